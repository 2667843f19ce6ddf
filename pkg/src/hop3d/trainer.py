"""Two-phase training: base pretraining, then few-shot novel adaptation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabelMode, Scene, SplitSpec, phase2_labels, pseudo_label_stub
from .hop_ent import EntropyConfig
from .hop_grad import build_basis, collect_base_gradients, lift_bank, phi_gradient, project_phase2_gradient, sample_batch
from .linalg import OrthoBasis
from .metrics import MetricsReport, evaluate
from .model import HopModel, ModelConfig, phase2_phi_index
from .objectives import phase1_objective, phase2_objective
from .net import IGNORE
from .optim import AdamConfig, OptimState, adam_step

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr_phase1: float = 1e-2
    lr_phase2: float = 1e-2
    lambda_orth_p1: float = 0.1
    lambda_orth_p2: float = 0.1
    entropy: EntropyConfig = field(default_factory=lambda: EntropyConfig(renormalize=True))
    phase1_iters: int = 400
    adaptation_ratio: float = 0.1
    batch_scenes: int = 8
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_samples: int = 64
    gs_rel_tol: float = 1e-10
    project_scope: str = "full"
    label_mode: str = "gt"
    phase2_base_fill: bool = True
    hidden: int = 32
    feat_dim: int = 16
    head_hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.adaptation_ratio <= 1.0:
            raise ValueError("adaptation_ratio must lie in (0, 1]")
        if self.project_scope not in ("full", "novel_term_only"):
            raise ValueError("project_scope must be 'full' or 'novel_term_only'")
        LabelMode(self.label_mode)

    @property
    def phase2_iters(self) -> int:
        if self.phase1_iters == 0:
            return 0
        return max(1, int(round(self.adaptation_ratio * self.phase1_iters)))

    def adam(self, phase: int) -> AdamConfig:
        return AdamConfig(lr=self.lr_phase1 if phase == 1 else self.lr_phase2, beta1=self.beta1,
                          beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay)

    def model_config(self, spec: SplitSpec) -> ModelConfig:
        return ModelConfig(f_in=spec.f_in, hidden=self.hidden, feat_dim=self.feat_dim,
                           head_hidden=self.head_hidden, k_base=spec.k_base, k_novel=spec.k_novel)


@dataclass(frozen=True)
class Flags:
    hop_grad: bool = True
    hop_rep_orth: bool = True
    hop_ent: bool = True

    @classmethod
    def none(cls) -> "Flags":
        return cls(False, False, False)


@dataclass
class Phase1Result:
    model: HopModel
    basis: OrthoBasis
    metrics: MetricsReport | None
    losses: list


@dataclass
class Phase2Result:
    model: HopModel
    metrics: MetricsReport | None
    losses: list


def _rng(cfg: TrainConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream])


def _check_finite(loss: float, phase: int, step: int) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(f"phase {phase} loss became {loss} at step {step}")


def phase1_train(cfg: TrainConfig, spec: SplitSpec, train_scenes: list[Scene],
                 test_scenes: list[Scene] | None = None) -> Phase1Result:
    """Base pretraining, then gradient collection and basis construction.

    The returned basis lives in the phase-2 phi layout so phase 2 can use it
    directly.
    """
    if not train_scenes:
        raise ValueError("phase 1 needs base training scenes")
    mcfg = cfg.model_config(spec)
    model = HopModel.init_phase1(mcfg, _rng(cfg, 1))
    sampler = _rng(cfg, 2)
    state = OptimState()
    adam = cfg.adam(1)
    losses = []
    for step in range(cfg.phase1_iters):
        idx = sample_batch(sampler, len(train_scenes), cfg.batch_scenes)
        loss, grads = phase1_objective(model, [train_scenes[i] for i in idx], cfg.lambda_orth_p1)
        _check_finite(loss, 1, step)
        adam_step(model.named_tensors(), grads, state, adam)
        losses.append(loss)
        if step % 100 == 0:
            log.debug("phase1 step %d loss %.4f", step, loss)

    T = cfg.grad_samples if cfg.phase1_iters > 0 else 0
    bank = collect_base_gradients(model, train_scenes, T, seed=cfg.seed, batch_scenes=cfg.batch_scenes,
                                  lambda_orth=cfg.lambda_orth_p1)
    d = phase2_phi_index(mcfg).size
    basis = build_basis(lift_bank(bank, model), cfg.gs_rel_tol, d=d)
    log.info("phase1 done: %d steps, basis rank %d of d=%d", cfg.phase1_iters, basis.r, d)
    metrics = evaluate(model, test_scenes, spec.k_base, spec.k_novel) if test_scenes else None
    return Phase1Result(model, basis, metrics, losses)


def init_novel_prototypes(model: HopModel, support_scenes: list[Scene], spec: SplitSpec,
                          rng: np.random.Generator) -> np.ndarray:
    """Normalized mean backbone feature of each novel class's support points."""
    feats = [model.features(s.feats) for s in support_scenes]
    rows = []
    for c in spec.novel_classes:
        pts = [f[s.labels == c] for f, s in zip(feats, support_scenes)]
        pts = np.vstack(pts) if pts else np.zeros((0, model.cfg.feat_dim))
        mean = pts.mean(axis=0) if len(pts) else rng.standard_normal(model.cfg.feat_dim)
        if np.linalg.norm(mean) == 0.0:
            mean = rng.standard_normal(model.cfg.feat_dim)
        rows.append(mean / np.linalg.norm(mean))
    return np.vstack(rows)


def base_region_labels(model_p1: HopModel, scene: Scene, spec: SplitSpec, mode: str) -> np.ndarray:
    """Stub labels on a base scene, kept only where they name a base class."""
    labels = pseudo_label_stub(model_p1, scene, mode)
    return np.where((labels >= 1) & (labels <= spec.k_base), labels, IGNORE)


def project_phi(model: HopModel, grads: dict, novel_grads: dict | None, basis: OrthoBasis,
                scope: str) -> dict:
    """Replace the phi slice of ``grads`` by its projection off ``span(basis)``."""
    names = model.phi_names()
    if scope == "full":
        g = project_phase2_gradient(phi_gradient(model, grads), basis)
    else:
        g_novel = phi_gradient(model, novel_grads)
        g = phi_gradient(model, grads) - g_novel + project_phase2_gradient(g_novel, basis)
    out = dict(grads)
    off = 0
    for n in names:
        size = grads[n].size
        out[n] = g[off:off + size].reshape(grads[n].shape)
        off += size
    return out


def phase2_train(cfg: TrainConfig, spec: SplitSpec, model_p1: HopModel, basis: OrthoBasis,
                 support_scenes: list[Scene], flags: Flags = Flags(),
                 test_scenes: list[Scene] | None = None,
                 base_scenes: list[Scene] | None = None) -> Phase2Result:
    """Few-shot adaptation for ``cfg.phase2_iters`` steps.

    Each batch holds the support scenes (up to ``batch_scenes``); with
    ``cfg.phase2_base_fill`` the remaining slots are filled with base training
    scenes that carry only base-region labels from the pseudo-label stub.
    """
    if not support_scenes:
        raise ValueError("phase 2 needs support scenes")
    rng_init = _rng(cfg, 4)
    novel = init_novel_prototypes(model_p1, support_scenes, spec, rng_init)
    model = model_p1.to_phase2(novel, rng_init)
    d = phase2_phi_index(model.cfg).size
    if flags.hop_grad and basis.r > 0 and basis.d != d:
        raise ValueError(f"basis dimension {basis.d} does not match phi size {d}")
    labels = [phase2_labels(model_p1, s, spec, cfg.label_mode) for s in support_scenes]
    lambda_orth = cfg.lambda_orth_p2 if flags.hop_rep_orth else 0.0
    entropy = cfg.entropy if flags.hop_ent else None
    split = flags.hop_grad and cfg.project_scope == "novel_term_only"

    base_labels: dict[int, np.ndarray] = {}
    fill = cfg.phase2_base_fill and bool(base_scenes)

    sampler = _rng(cfg, 5)
    state = OptimState()
    adam = cfg.adam(2)
    losses = []
    for step in range(cfg.phase2_iters):
        idx = sample_batch(sampler, len(support_scenes), cfg.batch_scenes)
        batch = [support_scenes[i] for i in idx]
        batch_labels = [labels[i] for i in idx]
        n_fill = cfg.batch_scenes - len(batch) if fill else 0
        if n_fill > 0:
            for j in sample_batch(sampler, len(base_scenes), n_fill):
                if j not in base_labels:
                    base_labels[j] = base_region_labels(model_p1, base_scenes[j], spec, cfg.label_mode)
                batch.append(base_scenes[j])
                batch_labels.append(base_labels[j])
        loss, grads, novel_grads, _ = phase2_objective(model, batch, batch_labels, lambda_orth, entropy, split)
        _check_finite(loss, 2, step)
        if flags.hop_grad:
            grads = project_phi(model, grads, novel_grads, basis, cfg.project_scope)
        adam_step(model.named_tensors(), grads, state, adam)
        losses.append(loss)
    metrics = evaluate(model, test_scenes, spec.k_base, spec.k_novel) if test_scenes else None
    return Phase2Result(model, metrics, losses)
