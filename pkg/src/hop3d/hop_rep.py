"""Hierarchical prototype decomposition and the prototype orthogonality penalty.

Features are split by successive projection onto base and then novel
prototype sets; each projection is the sum of rank-1 projections onto the
individual unit prototypes (exact subspace projection only when the
prototypes are orthonormal).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .net import ForwardTape, Mlp


class Role(str, Enum):
    BASE = "base"
    NOVEL = "novel"


@dataclass
class PrototypeSet:
    raw: np.ndarray  # K x C trainable rows
    role: Role

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.ndim != 2 or self.raw.shape[0] < 1:
            raise ValueError(f"prototype matrix must be K x C with K >= 1, got {self.raw.shape}")

    @property
    def normalized(self) -> np.ndarray:
        return normalize_rows(self.raw)[0]


def normalize_rows(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(S, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm prototype")
    return S / norms[:, None], norms


def normalize_rows_backward(S_hat: np.ndarray, norms: np.ndarray, d_hat: np.ndarray) -> np.ndarray:
    radial = np.sum(S_hat * d_hat, axis=1, keepdims=True)
    return (d_hat - S_hat * radial) / norms[:, None]


def _project(features: np.ndarray, protos: PrototypeSet) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    S_hat = protos.normalized
    if features.ndim != 2 or features.shape[1] != S_hat.shape[1]:
        raise ValueError(f"feature dim {features.shape} does not match prototype dim {S_hat.shape[1]}")
    coeff = features @ S_hat.T  # <f, s_k> for every point and prototype
    aligned = coeff @ S_hat
    return aligned, features - aligned


def decompose_base(features: np.ndarray, base: PrototypeSet) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(f_b, r0)`` with ``f_b = sum_k <f, s_k> s_k`` and ``r0 = f - f_b``."""
    if base.role is not Role.BASE:
        raise ValueError("decompose_base needs a BASE prototype set")
    return _project(features, base)


def decompose_novel(r0: np.ndarray, novel: PrototypeSet) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(f_n, r1)`` by projecting the base residual onto novel prototypes."""
    if novel.role is not Role.NOVEL:
        raise ValueError("decompose_novel needs a NOVEL prototype set")
    return _project(r0, novel)


def project_backward(features: np.ndarray, S_hat: np.ndarray, d_aligned: np.ndarray,
                     d_resid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``(aligned, resid)`` w.r.t. the input features and unit prototypes."""
    g = d_aligned - d_resid
    coeff = features @ S_hat.T
    d_coeff = g @ S_hat.T
    d_S_hat = coeff.T @ g + d_coeff.T @ features
    d_features = d_resid + d_coeff @ S_hat
    return d_features, d_S_hat


def orthogonality_loss(prototypes) -> tuple[float, np.ndarray]:
    """Sum of ``|cos|`` over distinct pairs and its gradient w.r.t. the raw rows.

    ``prototypes`` is a ``K x C`` matrix of raw (unnormalized) rows, usually
    the base rows stacked over the novel rows.
    """
    S = np.asarray(prototypes, dtype=np.float64)
    if S.ndim != 2:
        raise ValueError("prototypes must be a K x C matrix")
    if S.shape[0] < 2:
        return 0.0, np.zeros_like(S)
    S_hat, norms = normalize_rows(S)
    G = S_hat @ S_hat.T
    iu = np.triu_indices(S.shape[0], k=1)
    loss = float(np.abs(G[iu]).sum())
    sign = np.sign(G)
    np.fill_diagonal(sign, 0.0)
    d_hat = sign @ S_hat
    return loss, normalize_rows_backward(S_hat, norms, d_hat)


def cosine_similarity_matrix(prototypes) -> np.ndarray:
    S_hat, _ = normalize_rows(np.atleast_2d(np.asarray(prototypes, dtype=np.float64)))
    G = S_hat @ S_hat.T
    G = 0.5 * (G + G.T)
    np.fill_diagonal(G, 1.0)
    return G


def mean_offdiag_abs_cosine(prototypes) -> float:
    G = cosine_similarity_matrix(prototypes)
    k = G.shape[0]
    if k < 2:
        return 0.0
    return float(np.abs(G[~np.eye(k, dtype=bool)]).mean())


def phase1_logits(f_b: np.ndarray, r0: np.ndarray, shared_head: Mlp) -> tuple[np.ndarray, ForwardTape]:
    """Shared head over ``[f_b, r0]``: ``K_b`` base logits then one background logit."""
    if f_b.shape != r0.shape:
        raise ValueError("f_b and r0 must have the same shape")
    if shared_head.in_dim != 2 * f_b.shape[1]:
        raise ValueError(f"shared head expects {shared_head.in_dim} inputs, got 2*{f_b.shape[1]}")
    return shared_head.forward(np.hstack([f_b, r0]))


def phase2_logits(f_b: np.ndarray, f_n: np.ndarray, r1: np.ndarray, h_b: Mlp,
                  h_n: Mlp) -> tuple[np.ndarray, ForwardTape, ForwardTape]:
    """``[h_b(f_b) | h_n(f_n, r1)]``; ``h_n`` emits ``K_n`` novel logits then background."""
    if h_b.in_dim != f_b.shape[1]:
        raise ValueError(f"h_b expects {h_b.in_dim} inputs, got {f_b.shape[1]}")
    if h_n.in_dim != 2 * f_n.shape[1] or f_n.shape != r1.shape:
        raise ValueError(f"h_n expects {h_n.in_dim} inputs, got 2*{f_n.shape[1]}")
    zb, tb = h_b.forward(f_b)
    zn, tn = h_n.forward(np.hstack([f_n, r1]))
    return np.hstack([zb, zn]), tb, tn
