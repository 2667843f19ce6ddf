"""Phase-1 and phase-2 training objectives with full parameter gradients."""

from __future__ import annotations

import numpy as np

from .hop_ent import EntropyConfig, entropy_regularizer
from .hop_rep import orthogonality_loss
from .net import softmax, softmax_cross_entropy


def _stack(scenes, labels=None):
    x = np.vstack([s.feats for s in scenes])
    y = np.concatenate([s.labels for s in scenes] if labels is None else labels)
    sizes = [s.n for s in scenes]
    return x, y, sizes


def _add_orth(model, grads: dict, lambda_orth: float) -> float:
    if lambda_orth == 0.0:
        return 0.0
    loss, g = orthogonality_loss(model.prototype_matrix())
    kb = model.cfg.k_base
    grads["protos.base"] = grads["protos.base"] + lambda_orth * g[:kb]
    if model.phase == 2:
        grads["protos.novel"] = grads["protos.novel"] + lambda_orth * g[kb:]
    return lambda_orth * loss


def phase1_objective(model, scenes, lambda_orth: float) -> tuple[float, dict]:
    """Segmentation cross-entropy over the batch plus the weighted prototype penalty."""
    x, y, _ = _stack(scenes)
    logits, cache = model.forward(x)
    seg, d_logits = softmax_cross_entropy(logits, model.labels_to_cols(y))
    grads = model.backward(cache, d_logits)
    return seg + _add_orth(model, grads, lambda_orth), grads


def phase2_objective(model, scenes, labels, lambda_orth: float, entropy: EntropyConfig | None,
                     split_novel: bool = False) -> tuple[float, dict, dict | None, dict]:
    """Phase-2 loss: segmentation + entropy regularizer + weighted prototype penalty.

    The entropy regularizer is evaluated per scene and averaged over scenes.
    With ``split_novel`` the gradient of the novel-supervision part
    (cross-entropy on novel-labeled points plus the entropy regularizer) is
    also returned separately; the two parts sum to the full gradient.

    Returns ``(loss, grads, novel_grads or None, stats)``.
    """
    x, y, sizes = _stack(scenes, labels)
    logits, cache = model.forward(x)
    cols = model.labels_to_cols(y)
    seg, d_seg = softmax_cross_entropy(logits, cols)
    stats = {"seg": seg, "cond": 0.0, "marg": 0.0, "selected": 0}

    d_ent = np.zeros_like(logits)
    ent = 0.0
    if entropy is not None:
        probs = softmax(logits)
        start = 0
        for n in sizes:
            loss, g, st = entropy_regularizer(probs[start:start + n], model.novel_cols, entropy)
            ent += loss / len(sizes)
            d_ent[start:start + n] = g / len(sizes)
            stats["cond"] += st["cond"] / len(sizes)
            stats["marg"] += st["marg"] / len(sizes)
            stats["selected"] += st["selected"]
            start += n
    stats["ent"] = ent

    novel_grads = None
    if split_novel:
        novel_rows = np.isin(cols, model.novel_cols)
        d_novel = np.where(novel_rows[:, None], d_seg, 0.0) + d_ent
        d_rest = np.where(novel_rows[:, None], 0.0, d_seg)
        novel_grads = model.backward(cache, d_novel)
        rest = model.backward(cache, d_rest)
        grads = {k: rest[k] + novel_grads[k] for k in rest}
    else:
        grads = model.backward(cache, d_seg + d_ent)
    orth = _add_orth(model, grads, lambda_orth)
    stats["orth"] = orth
    return seg + ent + orth, grads, novel_grads, stats
