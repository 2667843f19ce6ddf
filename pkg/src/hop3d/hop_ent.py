"""Dual-entropy regularizer on novel-class predictions.

Both terms take softmax probabilities over all logit columns and return the
loss together with its gradient w.r.t. the logits. By default the novel
columns of the full softmax are used as-is (a sub-distribution); with
``renormalize=True`` they are rescaled to sum to one first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy


@dataclass
class EntropyConfig:
    lambda_cond: float = 0.1
    lambda_marg: float = 0.1
    tau: float = 0.7
    renormalize: bool = False

    def __post_init__(self):
        if self.lambda_cond < 0 or self.lambda_marg < 0:
            raise ValueError("entropy weights must be non-negative")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")


def select_confident(probs: np.ndarray, novel_indices, tau: float = 0.7) -> np.ndarray:
    """Rows whose overall argmax is a novel column with probability >= ``tau``.

    Ties in the argmax go to the lowest column index.
    """
    probs = np.asarray(probs)
    novel = np.zeros(probs.shape[1], dtype=bool)
    novel[list(novel_indices)] = True
    top = probs.argmax(axis=1)
    conf = probs[np.arange(probs.shape[0]), top]
    return np.flatnonzero(novel[top] & (conf >= tau))


def _softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    return probs * (d_probs - np.sum(probs * d_probs, axis=1, keepdims=True))


def _neg_log_term(q: np.ndarray) -> np.ndarray:
    # d/dq of -q log q, with the q = 0 limit handled by the zero-mass mask
    out = np.zeros_like(q)
    pos = q > 0
    out[pos] = -(np.log(q[pos]) + 1.0)
    return out


def conditional_entropy(probs: np.ndarray, novel_indices, selected=None,
                        renormalize: bool = False) -> tuple[float, np.ndarray]:
    """Mean novel-class entropy over the selected rows.

    Parameters
    ----------
    probs : (N, K) array
        Softmax rows over every logit column.
    novel_indices : sequence of int
        Novel columns.
    selected : array of row indices, optional
        Rows to average over (all rows when omitted). Empty -> loss 0.

    Returns
    -------
    loss, grad
        ``grad`` is w.r.t. the logits, shape ``(N, K)``; unselected rows are 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    cols = np.asarray(list(novel_indices), dtype=np.int64)
    rows = np.arange(probs.shape[0]) if selected is None else np.asarray(selected, dtype=np.int64)
    grad = np.zeros_like(probs)
    if rows.size == 0:
        return 0.0, grad
    p = probs[rows]
    m = rows.size
    if renormalize:
        pn = p[:, cols]
        q = pn / pn.sum(axis=1, keepdims=True)
        loss = -xlogy(q, q).sum() / m
        # q is a softmax over the novel logits alone
        dz = _softmax_backward(q, _neg_log_term(q) / m)
        g = np.zeros_like(p)
        g[:, cols] = dz
    else:
        pn = p[:, cols]
        loss = -xlogy(pn, pn).sum() / m
        d_p = np.zeros_like(p)
        d_p[:, cols] = _neg_log_term(pn) / m
        g = _softmax_backward(p, d_p)
    grad[rows] = g
    return float(loss), grad


def marginal_entropy(probs: np.ndarray, novel_indices,
                     renormalize: bool = False) -> tuple[float, np.ndarray]:
    """Entropy of the batch-mean novel-class distribution and its logit gradient.

    The mean is taken over all ``N`` rows. With ``renormalize`` the mean novel
    mass is rescaled to a proper distribution before taking the entropy.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[0]
    if n < 1:
        raise ValueError("marginal entropy needs at least one row")
    cols = np.asarray(list(novel_indices), dtype=np.int64)
    pbar = probs[:, cols].mean(axis=0)
    if renormalize:
        total = pbar.sum()
        if total == 0.0:
            return 0.0, np.zeros_like(probs)
        q = pbar / total
        loss = -xlogy(q, q).sum()
        d_q = _neg_log_term(q)
        d_pbar = (d_q - np.dot(d_q, q)) / total
    else:
        loss = -xlogy(pbar, pbar).sum()
        d_pbar = _neg_log_term(pbar)
    d_p = np.zeros_like(probs)
    d_p[:, cols] = d_pbar / n
    return float(loss), _softmax_backward(probs, d_p)


def entropy_loss(cond: float, marg: float, cfg: EntropyConfig) -> float:
    """Combined regularizer: minimize conditional entropy, maximize marginal entropy."""
    return cfg.lambda_cond * cond - cfg.lambda_marg * marg


def entropy_regularizer(probs: np.ndarray, novel_indices, cfg: EntropyConfig) -> tuple[float, np.ndarray, dict]:
    """Full regularizer on one batch: selection, both terms, combined logit gradient."""
    sel = select_confident(probs, novel_indices, cfg.tau)
    cond, g_cond = conditional_entropy(probs, novel_indices, sel, cfg.renormalize)
    marg, g_marg = marginal_entropy(probs, novel_indices, cfg.renormalize)
    loss = entropy_loss(cond, marg, cfg)
    grad = cfg.lambda_cond * g_cond - cfg.lambda_marg * g_marg
    return loss, grad, {"cond": cond, "marg": marg, "selected": int(sel.size)}
