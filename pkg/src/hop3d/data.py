"""Synthetic labeled point-cloud scenes with a base/novel class split.

Every foreground object is a Gaussian blob of points around a random center
in the unit cube; background points fill the cube uniformly. Each point's
feature vector is its coordinates followed by a noisy copy of its class
signature. In phase-1 scenes novel objects are still present but labeled as
background.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .net import IGNORE


@dataclass
class SplitSpec:
    k_base: int = 6
    k_novel: int = 4
    shots: int = 1
    n_points: int = 2048
    sig_dim: int = 8
    noise: float = 0.3
    blob_sigma: float = 0.05
    min_points: int = 64
    bg_fraction: float = 0.4
    classes_per_scene: tuple = (2, 4)
    n_train: int = 200
    n_pool: int = 40
    n_test: int = 100
    seed_train: int = 1
    seed_support: int = 2
    seed_test: int = 3
    seed_signature: int = 0

    def __post_init__(self):
        if self.k_base < 1 or self.k_novel < 0:
            raise ValueError("need k_base >= 1 and k_novel >= 0")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        lo, hi = self.classes_per_scene
        if not 1 <= lo <= hi:
            raise ValueError("classes_per_scene must be 1 <= lo <= hi")
        fg_points = self.n_points - int(round(self.bg_fraction * self.n_points))
        if fg_points < hi * self.min_points:
            raise ValueError("too few foreground points for min_points per class")

    @property
    def base_classes(self) -> list[int]:
        return list(range(1, self.k_base + 1))

    @property
    def novel_classes(self) -> list[int]:
        return list(range(self.k_base + 1, self.k_base + self.k_novel + 1))

    @property
    def num_classes(self) -> int:
        """Labels including background."""
        return self.k_base + self.k_novel + 1

    @property
    def f_in(self) -> int:
        return 3 + self.sig_dim


@dataclass
class Scene:
    coords: np.ndarray  # N x 3
    feats: np.ndarray  # N x F_in
    labels: np.ndarray  # N, int

    def __post_init__(self):
        n = self.coords.shape[0]
        if self.feats.shape[0] != n or self.labels.shape != (n,):
            raise ValueError("coords, feats and labels disagree on point count")

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def present_classes(self) -> set[int]:
        return set(int(c) for c in np.unique(self.labels)) - {0}


def class_signatures(spec: SplitSpec) -> np.ndarray:
    """Unit signature vector per label (row 0 is background)."""
    rng = np.random.default_rng([spec.seed_signature, 7919])
    sig = rng.standard_normal((spec.num_classes, spec.sig_dim))
    return sig / np.linalg.norm(sig, axis=1, keepdims=True)


def generate_scene(seed, spec: SplitSpec, phase: int) -> Scene:
    """Deterministic scene for ``seed`` (an int or a sequence of ints)."""
    if phase not in (1, 2):
        raise ValueError("phase must be 1 or 2")
    rng = np.random.default_rng(seed)
    classes = spec.base_classes + spec.novel_classes
    lo, hi = spec.classes_per_scene
    k = int(rng.integers(lo, min(hi, len(classes)) + 1))
    present = np.sort(rng.choice(classes, size=k, replace=False))

    n_bg = int(round(spec.bg_fraction * spec.n_points))
    n_fg = spec.n_points - n_bg
    extra = n_fg - k * spec.min_points
    shares = rng.dirichlet(np.ones(k))
    counts = spec.min_points + np.floor(shares * extra).astype(int)
    counts[-1] += n_fg - counts.sum()

    coords = [rng.uniform(0.0, 1.0, size=(n_bg, 3))]
    labels = [np.zeros(n_bg, dtype=np.int64)]
    for c, m in zip(present, counts):
        center = rng.uniform(0.15, 0.85, size=3)
        coords.append(np.clip(center + spec.blob_sigma * rng.standard_normal((m, 3)), 0.0, 1.0))
        labels.append(np.full(m, c, dtype=np.int64))
    coords = np.vstack(coords)
    labels = np.concatenate(labels)
    sig = class_signatures(spec)[labels] + spec.noise * rng.standard_normal((spec.n_points, spec.sig_dim))
    feats = np.hstack([coords, sig])
    if phase == 1:
        labels = np.where(labels > spec.k_base, 0, labels)
    return Scene(coords, feats, labels)


def generate_split(spec: SplitSpec, which: str) -> list[Scene]:
    """``which`` is ``train`` (phase 1), ``pool`` or ``test`` (both phase 2)."""
    seed, count, phase = {
        "train": (spec.seed_train, spec.n_train, 1),
        "pool": (spec.seed_support, spec.n_pool, 2),
        "test": (spec.seed_test, spec.n_test, 2),
    }[which]
    return [generate_scene([seed, i], spec, phase) for i in range(count)]


def sample_support(spec: SplitSpec, pool: list[Scene], seed: int | None = None) -> dict[int, list[int]]:
    """Pick ``spec.shots`` pool indices per novel class among scenes containing it."""
    rng = np.random.default_rng([spec.seed_support if seed is None else seed, 104729])
    chosen: dict[int, list[int]] = {}
    for c in spec.novel_classes:
        candidates = [i for i, s in enumerate(pool) if c in s.present_classes()]
        if len(candidates) < spec.shots:
            raise ValueError(f"pool has {len(candidates)} scenes with novel class {c}, need {spec.shots}")
        chosen[c] = sorted(int(i) for i in rng.choice(candidates, size=spec.shots, replace=False))
    return chosen


def support_scene_indices(selection: dict[int, list[int]]) -> list[int]:
    out: list[int] = []
    for idx in selection.values():
        for i in idx:
            if i not in out:
                out.append(i)
    return out


class LabelMode(str, Enum):
    GT = "gt"
    THRESH = "thresh"


def pseudo_label_stub(model, scene: Scene, mode: LabelMode | str = LabelMode.GT, threshold: float = 0.9) -> np.ndarray:
    """Labels for a scene: ground truth, or the model's argmax where confident.

    In ``THRESH`` mode points whose max probability is below ``threshold`` get
    :data:`~hop3d.net.IGNORE`.
    """
    mode = LabelMode(mode)
    if mode is LabelMode.GT:
        return scene.labels.copy()
    probs = model.predict_proba(scene.feats)
    cols = probs.argmax(axis=1)
    conf = probs[np.arange(scene.n), cols]
    labels = model.cols_to_labels(cols)
    labels[conf < threshold] = IGNORE
    return labels


def phase2_labels(model, scene: Scene, spec: SplitSpec, mode: LabelMode | str = LabelMode.GT) -> np.ndarray:
    """Support-scene supervision: ground-truth novel points, base/background
    points from :func:`pseudo_label_stub` with the phase-1 model."""
    if LabelMode(mode) is LabelMode.GT:
        return scene.labels.copy()
    labels = pseudo_label_stub(model, scene, mode)
    novel = scene.labels > spec.k_base
    labels[novel] = scene.labels[novel]
    return labels
