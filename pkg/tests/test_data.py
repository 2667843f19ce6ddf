import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hop3d.data import (LabelMode, SplitSpec, class_signatures, generate_scene, generate_split, phase2_labels,
                        pseudo_label_stub, sample_support, support_scene_indices)
from hop3d.net import IGNORE

SMALL_SPEC = SplitSpec(n_points=400, min_points=20, n_train=6, n_pool=12, n_test=4)


def test_generation_is_deterministic():
    a = generate_split(SMALL_SPEC, "pool")
    b = generate_split(SMALL_SPEC, "pool")
    for x, y in zip(a, b):
        assert x.feats.tobytes() == y.feats.tobytes() and x.labels.tobytes() == y.labels.tobytes()


def test_scenes_depend_only_on_their_own_seed():
    longer = generate_split(SplitSpec(n_points=400, min_points=20, n_test=9), "test")
    shorter = generate_split(SplitSpec(n_points=400, min_points=20, n_test=3), "test")
    for x, y in zip(shorter, longer):
        assert x.feats.tobytes() == y.feats.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([1, 2]))
def test_scene_invariants(seed, phase):
    spec = SMALL_SPEC
    s = generate_scene(seed, spec, phase)
    assert s.coords.shape == (spec.n_points, 3) and s.feats.shape == (spec.n_points, spec.f_in)
    assert s.coords.min() >= 0.0 and s.coords.max() <= 1.0
    np.testing.assert_array_equal(s.feats[:, :3], s.coords)
    assert set(np.unique(s.labels)) <= set(range(spec.num_classes))
    if phase == 1:
        assert s.labels.max() <= spec.k_base
    counts = np.bincount(s.labels, minlength=spec.num_classes)
    lo, hi = spec.classes_per_scene
    if phase == 2:
        assert lo <= len(s.present_classes()) <= hi
        for c in s.present_classes():
            assert counts[c] >= spec.min_points


def test_no_novel_classes_gives_base_labels_only():
    spec = SplitSpec(k_novel=0, n_points=400, min_points=20)
    for i in range(10):
        assert generate_scene(i, spec, 2).labels.max() <= spec.k_base


def test_signatures_are_unit_rows():
    sig = class_signatures(SMALL_SPEC)
    np.testing.assert_allclose(np.linalg.norm(sig, axis=1), 1.0)


def test_nearest_signature_classifier_on_clean_features():
    spec = SplitSpec(noise=0.0, n_points=400, min_points=20)
    sig = class_signatures(spec)
    for i in range(5):
        s = generate_scene(i, spec, 2)
        pred = np.argmax(s.feats[:, 3:] @ sig.T, axis=1)
        assert np.mean(pred == s.labels) >= 0.9


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        SplitSpec(k_base=0)
    with pytest.raises(ValueError):
        SplitSpec(n_points=100, min_points=64)
    with pytest.raises(ValueError):
        SplitSpec(classes_per_scene=(3, 2))


def test_support_covers_every_novel_class():
    pool = generate_split(SMALL_SPEC, "pool")
    sel = sample_support(SMALL_SPEC, pool)
    assert sorted(sel) == SMALL_SPEC.novel_classes
    for c, idx in sel.items():
        assert len(idx) == SMALL_SPEC.shots
        assert all(c in pool[i].present_classes() for i in idx)
    assert sample_support(SMALL_SPEC, pool) == sel
    flat = support_scene_indices(sel)
    assert len(flat) == len(set(flat)) and set(flat) == {i for v in sel.values() for i in v}


def test_support_single_candidate_and_shortage():
    pool = generate_split(SMALL_SPEC, "pool")
    c = SMALL_SPEC.novel_classes[0]
    holders = [i for i, s in enumerate(pool) if c in s.present_classes()]
    one = [pool[holders[0]]] + [s for s in pool if c not in s.present_classes()]
    spec1 = SplitSpec(k_base=SMALL_SPEC.k_base, k_novel=1, n_points=400, min_points=20)
    assert sample_support(spec1, one)[c] == [0]
    with pytest.raises(ValueError, match="need"):
        sample_support(spec1, [s for s in pool if c not in s.present_classes()])


class _ConstModel:
    """Returns fixed probabilities; columns map to labels by identity."""

    def __init__(self, probs):
        self.probs = probs

    def predict_proba(self, feats):
        return self.probs

    def cols_to_labels(self, cols):
        return np.asarray(cols, dtype=np.int64).copy()


def test_pseudo_label_gt_mode_copies():
    s = generate_scene(0, SMALL_SPEC, 2)
    out = pseudo_label_stub(None, s, LabelMode.GT)
    np.testing.assert_array_equal(out, s.labels)
    out[:] = 0
    assert s.labels.any()


def test_pseudo_label_thresh_uniform_is_all_ignore():
    s = generate_scene(1, SMALL_SPEC, 2)
    k = SMALL_SPEC.num_classes
    out = pseudo_label_stub(_ConstModel(np.full((s.n, k), 1.0 / k)), s, "thresh")
    assert np.all(out == IGNORE)


def test_pseudo_label_thresh_against_loop():
    s = generate_scene(2, SMALL_SPEC, 2)
    rng = np.random.default_rng(0)
    logits = 4 * rng.standard_normal((s.n, 5))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    out = pseudo_label_stub(_ConstModel(probs), s, "thresh", threshold=0.8)
    for i in range(s.n):
        j = int(np.argmax(probs[i]))
        assert out[i] == (j if probs[i, j] >= 0.8 else IGNORE)


def test_phase2_labels_keep_ground_truth_novel_points():
    s = generate_scene(3, SMALL_SPEC, 2)
    k = SMALL_SPEC.num_classes
    out = phase2_labels(_ConstModel(np.full((s.n, k), 1.0 / k)), s, SMALL_SPEC, "thresh")
    novel = s.labels > SMALL_SPEC.k_base
    np.testing.assert_array_equal(out[novel], s.labels[novel])
    assert np.all(out[~novel] == IGNORE)
