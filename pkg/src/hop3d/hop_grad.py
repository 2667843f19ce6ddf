"""Base-gradient subspace: collection, orthonormal basis, and projection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import DEFAULT_REL_TOL, OrthoBasis, modified_gram_schmidt, project_out
from .model import HopModel, flatten_phi, lift_phase1_tensors, phase2_phi_index
from .net import flatten_tensors
from .objectives import phase1_objective


@dataclass
class GradientBank:
    grads: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.grads)

    @property
    def d(self) -> int:
        return self.grads[0].shape[0] if self.grads else 0


def sample_batch(rng: np.random.Generator, n_scenes: int, batch: int) -> np.ndarray:
    """Scene indices for one mini-batch (without replacement inside the batch)."""
    return rng.choice(n_scenes, size=min(batch, n_scenes), replace=False)


def phi_gradient(model: HopModel, grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(grads[n]) for n in model.phi_names()])


def collect_base_gradients(model: HopModel, base_scenes, T: int, seed: int, batch_scenes: int = 8,
                           lambda_orth: float = 0.1) -> GradientBank:
    """Phase-1 objective gradients w.r.t. phi on ``T`` seeded mini-batches.

    Parameters stay fixed throughout; the returned vectors use the layout of
    ``flatten_phi(model)``.
    """
    if not base_scenes:
        raise ValueError("no base scenes to collect gradients from")
    if T < 0:
        raise ValueError("T must be non-negative")
    rng = np.random.default_rng([seed, 31337])
    bank = GradientBank()
    for _ in range(T):
        idx = sample_batch(rng, len(base_scenes), batch_scenes)
        _, grads = phase1_objective(model, [base_scenes[i] for i in idx], lambda_orth)
        bank.grads.append(phi_gradient(model, grads))
    return bank


def lift_bank(bank: GradientBank, model: HopModel) -> GradientBank:
    """Map phase-1 phi gradients into the phase-2 phi layout (see ``lift_phase1_tensors``)."""
    if model.phase != 1:
        raise ValueError("lift_bank expects the phase-1 model the bank was collected from")
    _, p1_index = flatten_phi(model)
    p2_index = phase2_phi_index(model.cfg)
    lifted = GradientBank()
    for g in bank.grads:
        named = {e.name: g[e.offset:e.offset + e.length].reshape(e.shape) for e in p1_index.entries}
        out = lift_phase1_tensors(named, model.cfg)
        vec, _ = flatten_tensors([(e.name, out[e.name]) for e in p2_index.entries])
        lifted.grads.append(vec)
    return lifted


def build_basis(bank: GradientBank, rel_tol: float = DEFAULT_REL_TOL, d: int | None = None) -> OrthoBasis:
    """Orthonormal basis of the bank's span; empty bank needs ``d`` for the shape."""
    if bank.T == 0:
        if d is None:
            raise ValueError("empty bank: pass d to build an r = 0 basis")
        return OrthoBasis.empty(d)
    basis = modified_gram_schmidt(bank.grads, rel_tol)
    if basis.r == 0:
        return OrthoBasis.empty(bank.d)
    basis.b.setflags(write=False)
    return basis


def project_phase2_gradient(g_phi: np.ndarray, basis: OrthoBasis) -> np.ndarray:
    return project_out(g_phi, basis)
