"""Whole-model gradients against extended-precision finite differences."""

import numpy as np
import pytest

from hop3d.data import Scene
from hop3d.hop_ent import EntropyConfig, select_confident
from hop3d.model import HopModel, ModelConfig
from hop3d.net import IGNORE, softmax
from hop3d.objectives import phase1_objective, phase2_objective

from oracles import LD, central_fd_ld, ld_ce, ld_conditional, ld_marginal, ld_model_logits, ld_orth, max_rel_err

SMALL = ModelConfig(f_in=5, hidden=6, feat_dim=4, head_hidden=5, k_base=3, k_novel=2)


def tiny_scene(rng, n, cfg, phase):
    hi = cfg.k_base + 1 if phase == 1 else cfg.k_base + cfg.k_novel + 1
    labels = rng.integers(0, hi, size=n)
    feats = rng.standard_normal((n, cfg.f_in))
    return Scene(feats[:, :3].copy(), feats, labels)


def make_models(seed, cfg=SMALL):
    rng = np.random.default_rng(seed)
    m1 = HopModel.init_phase1(cfg, rng)
    for t in m1.named_tensors().values():
        t += 0.1 * rng.standard_normal(t.shape)
    m2 = m1.to_phase2(rng.standard_normal((cfg.k_novel, cfg.feat_dim)), rng)
    for t in m2.named_tensors().values():
        t += 0.1 * rng.standard_normal(t.shape)
    return m1, m2, rng


def ld_phase1(model, scenes, lam):
    x = np.vstack([s.feats for s in scenes])
    y = model.labels_to_cols(np.concatenate([s.labels for s in scenes]))
    z = ld_model_logits(model.named_tensors(), x, 1, model.cfg.k_base, model.cfg.feat_dim)
    return ld_ce(z, y) + LD(lam) * ld_orth(model.base.raw)


def ld_phase2(model, scenes, labels, lam, ent, selections):
    x = np.vstack([s.feats for s in scenes])
    cols = model.labels_to_cols(np.concatenate(labels))
    z = ld_model_logits(model.named_tensors(), x, 2, model.cfg.k_base, model.cfg.feat_dim)
    loss = ld_ce(z, cols)
    if ent is not None:
        start = 0
        for s, sel in zip(scenes, selections):
            zs = z[start:start + s.n]
            loss += (LD(ent.lambda_cond) * ld_conditional(zs, model.novel_cols, sel, ent.renormalize)
                     - LD(ent.lambda_marg) * ld_marginal(zs, model.novel_cols, ent.renormalize)) / len(scenes)
            start += s.n
    return loss + LD(lam) * ld_orth(model.prototype_matrix())


@pytest.mark.parametrize("seed", range(3))
def test_phase1_objective_gradient(seed):
    m1, _, rng = make_models(seed)
    scenes = [tiny_scene(rng, 5, SMALL, 1) for _ in range(2)]
    loss, grads = phase1_objective(m1, scenes, 0.3)
    assert loss == pytest.approx(float(ld_phase1(m1, scenes, 0.3)), rel=1e-12)
    for name, t in m1.named_tensors().items():
        fd = central_fd_ld(lambda: ld_phase1(m1, scenes, 0.3), t)
        assert max_rel_err(grads[name], fd) <= 1e-5, name


@pytest.mark.parametrize("seed,renorm", [(0, False), (1, True), (2, False)])
def test_phase2_objective_gradient(seed, renorm):
    _, m2, rng = make_models(seed)
    scenes = [tiny_scene(rng, 6, SMALL, 2) for _ in range(2)]
    labels = [s.labels.copy() for s in scenes]
    labels[0][1] = IGNORE
    ent = EntropyConfig(0.2, 0.3, tau=0.3, renormalize=renorm)
    loss, grads, _, stats = phase2_objective(m2, scenes, labels, 0.1, ent)
    x = np.vstack([s.feats for s in scenes])
    probs = softmax(m2.forward(x)[0])
    selections, start = [], 0
    for s in scenes:
        selections.append(select_confident(probs[start:start + s.n], m2.novel_cols, ent.tau))
        start += s.n
    assert sum(len(s) for s in selections) == stats["selected"]

    def f():
        return ld_phase2(m2, scenes, labels, 0.1, ent, selections)

    assert loss == pytest.approx(float(f()), rel=1e-12)
    for name, t in m2.named_tensors().items():
        assert max_rel_err(grads[name], central_fd_ld(f, t)) <= 1e-5, name


def test_novel_split_sums_to_full_gradient():
    _, m2, rng = make_models(4)
    scenes = [tiny_scene(rng, 8, SMALL, 2) for _ in range(2)]
    labels = [s.labels for s in scenes]
    ent = EntropyConfig(0.1, 0.1, tau=0.3)
    _, full, _, _ = phase2_objective(m2, scenes, labels, 0.1, ent)
    _, split_total, novel, _ = phase2_objective(m2, scenes, labels, 0.1, ent, split_novel=True)
    for k in full:
        np.testing.assert_allclose(split_total[k], full[k], atol=1e-14)
    assert any(np.abs(novel[k]).sum() > 0 for k in novel)
