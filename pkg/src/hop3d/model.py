"""The composed segmentation model: backbone, prototypes and heads.

Logit column layout
-------------------
Phase 1: ``[base_1 .. base_Kb, background]``.
Phase 2: ``[base_1 .. base_Kb, novel_1 .. novel_Kn, background]``.

Scene labels use ``0`` for background, ``1..Kb`` for base and
``Kb+1..Kb+Kn`` for novel classes, so a foreground label ``l`` lives in
column ``l - 1`` and background in the last column.

The phi subset (the parameters whose gradients are projected) is every
prototype and head tensor; backbone tensors are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hop_rep import (PrototypeSet, Role, decompose_base, decompose_novel, normalize_rows,
                      normalize_rows_backward, phase1_logits, phase2_logits, project_backward)
from .net import IGNORE, Mlp, ParamIndex, flatten_tensors, scatter_tensors, softmax


@dataclass(frozen=True)
class ModelConfig:
    f_in: int = 11
    hidden: int = 32
    feat_dim: int = 16
    head_hidden: int = 32
    k_base: int = 6
    k_novel: int = 4


class HopModel:
    def __init__(self, cfg: ModelConfig, backbone: Mlp, base: PrototypeSet, shared_head: Mlp | None = None,
                 novel: PrototypeSet | None = None, h_b: Mlp | None = None, h_n: Mlp | None = None):
        self.cfg = cfg
        self.backbone = backbone
        self.base = base
        self.shared_head = shared_head
        self.novel = novel
        self.h_b = h_b
        self.h_n = h_n
        if novel is None and shared_head is None:
            raise ValueError("phase-1 model needs a shared head")
        if novel is not None and (h_b is None or h_n is None):
            raise ValueError("phase-2 model needs both h_b and h_n")

    # construction -------------------------------------------------------

    @classmethod
    def init_phase1(cls, cfg: ModelConfig, rng: np.random.Generator) -> "HopModel":
        backbone = Mlp.init([cfg.f_in, cfg.hidden, cfg.feat_dim], rng)
        protos = rng.standard_normal((cfg.k_base, cfg.feat_dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        head = Mlp.init([2 * cfg.feat_dim, cfg.head_hidden, cfg.k_base + 1], rng)
        return cls(cfg, backbone, PrototypeSet(protos, Role.BASE), shared_head=head)

    def to_phase2(self, novel_raw: np.ndarray, rng: np.random.Generator) -> "HopModel":
        """Phase-2 model: base prototypes and backbone carried over, ``h_b`` sliced
        from the shared head, ``h_n`` freshly initialized."""
        if self.phase != 1:
            raise ValueError("to_phase2 expects a phase-1 model")
        cfg = self.cfg
        lifted = lift_phase1_tensors(self.named_tensors(), cfg)
        h_b = _mlp_from_named(lifted, "h_b", 2)
        h_n = Mlp.init([2 * cfg.feat_dim, cfg.head_hidden, cfg.k_novel + 1], rng)
        return HopModel(cfg, self.backbone.copy(), PrototypeSet(self.base.raw.copy(), Role.BASE),
                        novel=PrototypeSet(np.array(novel_raw, dtype=np.float64), Role.NOVEL), h_b=h_b, h_n=h_n)

    def copy(self) -> "HopModel":
        m = HopModel(self.cfg, self.backbone.copy(), PrototypeSet(self.base.raw.copy(), Role.BASE),
                     shared_head=self.shared_head.copy() if self.shared_head else None,
                     novel=PrototypeSet(self.novel.raw.copy(), Role.NOVEL) if self.novel else None,
                     h_b=self.h_b.copy() if self.h_b else None, h_n=self.h_n.copy() if self.h_n else None)
        return m

    # layout -------------------------------------------------------------

    @property
    def phase(self) -> int:
        return 1 if self.novel is None else 2

    @property
    def num_logits(self) -> int:
        if self.phase == 1:
            return self.cfg.k_base + 1
        return self.cfg.k_base + self.cfg.k_novel + 1

    @property
    def background_col(self) -> int:
        return self.num_logits - 1

    @property
    def novel_cols(self) -> list[int]:
        if self.phase == 1:
            return []
        kb = self.cfg.k_base
        return list(range(kb, kb + self.cfg.k_novel))

    def labels_to_cols(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        cols = labels - 1
        cols[labels == 0] = self.background_col
        cols[labels == IGNORE] = IGNORE
        if np.any(cols[labels > 0] >= self.background_col) or np.any(labels < IGNORE):
            raise ValueError("label not representable in this phase")
        return cols

    def cols_to_labels(self, cols: np.ndarray) -> np.ndarray:
        cols = np.asarray(cols, dtype=np.int64)
        labels = cols + 1
        labels[cols == self.background_col] = 0
        return labels

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = dict(zip(self.backbone.tensor_names("backbone"), self.backbone.tensors()))
        out["protos.base"] = self.base.raw
        if self.phase == 1:
            out.update(zip(self.shared_head.tensor_names("head"), self.shared_head.tensors()))
        else:
            out["protos.novel"] = self.novel.raw
            out.update(zip(self.h_b.tensor_names("h_b"), self.h_b.tensors()))
            out.update(zip(self.h_n.tensor_names("h_n"), self.h_n.tensors()))
        return out

    def phi_names(self) -> list[str]:
        return [n for n in self.named_tensors() if not n.startswith("backbone.")]

    def prototype_matrix(self) -> np.ndarray:
        """Raw prototypes, base rows first then novel rows."""
        if self.novel is None:
            return self.base.raw
        return np.vstack([self.base.raw, self.novel.raw])

    # forward / backward -------------------------------------------------

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.backbone.forward(x)[0]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        feats, bb_tape = self.backbone.forward(x)
        f_b, r0 = decompose_base(feats, self.base)
        cache = {"x": x, "feats": feats, "bb_tape": bb_tape, "r0": r0}
        if self.phase == 1:
            logits, tape = phase1_logits(f_b, r0, self.shared_head)
            cache["head_tape"] = tape
        else:
            f_n, r1 = decompose_novel(r0, self.novel)
            logits, tb, tn = phase2_logits(f_b, f_n, r1, self.h_b, self.h_n)
            cache["hb_tape"], cache["hn_tape"] = tb, tn
        return logits, cache

    def backward(self, cache: dict, d_logits: np.ndarray) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        C = self.cfg.feat_dim
        feats, r0 = cache["feats"], cache["r0"]
        if self.phase == 1:
            g_head, d_in = self.shared_head.backward(cache["head_tape"], d_logits)
            grads.update(zip(self.shared_head.tensor_names("head"), g_head))
            d_fb, d_r0 = d_in[:, :C], d_in[:, C:]
        else:
            kb = self.cfg.k_base
            g_hb, d_fb = self.h_b.backward(cache["hb_tape"], d_logits[:, :kb])
            g_hn, d_in = self.h_n.backward(cache["hn_tape"], d_logits[:, kb:])
            grads.update(zip(self.h_b.tensor_names("h_b"), g_hb))
            grads.update(zip(self.h_n.tensor_names("h_n"), g_hn))
            Sn_hat, n_norms = normalize_rows(self.novel.raw)
            d_r0, d_Sn_hat = project_backward(r0, Sn_hat, d_in[:, :C], d_in[:, C:])
            grads["protos.novel"] = normalize_rows_backward(Sn_hat, n_norms, d_Sn_hat)
        Sb_hat, b_norms = normalize_rows(self.base.raw)
        d_feats, d_Sb_hat = project_backward(feats, Sb_hat, d_fb, d_r0)
        grads["protos.base"] = normalize_rows_backward(Sb_hat, b_norms, d_Sb_hat)
        g_bb, _ = self.backbone.backward(cache["bb_tape"], d_feats)
        grads.update(zip(self.backbone.tensor_names("backbone"), g_bb))
        return {n: grads[n] for n in self.named_tensors()}

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.forward(x)[0])


def flatten_phi(model: HopModel) -> tuple[np.ndarray, ParamIndex]:
    named = model.named_tensors()
    return flatten_tensors([(n, named[n]) for n in model.phi_names()])


def scatter_phi(model: HopModel, flat: np.ndarray, index: ParamIndex) -> None:
    if index.names != model.phi_names():
        raise ValueError("index was built from a different model topology")
    scatter_tensors(model.named_tensors(), flat, index)


def phase2_phi_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    C, H = cfg.feat_dim, cfg.head_hidden
    return [
        ("protos.base", (cfg.k_base, C)),
        ("protos.novel", (cfg.k_novel, C)),
        ("h_b.W0", (H, C)), ("h_b.b0", (H,)),
        ("h_b.W1", (cfg.k_base, H)), ("h_b.b1", (cfg.k_base,)),
        ("h_n.W0", (H, 2 * C)), ("h_n.b0", (H,)),
        ("h_n.W1", (cfg.k_novel + 1, H)), ("h_n.b1", (cfg.k_novel + 1,)),
    ]


def phase2_phi_index(cfg: ModelConfig) -> ParamIndex:
    return ParamIndex.build([(n, np.empty(s)) for n, s in phase2_phi_shapes(cfg)])


def lift_phase1_tensors(named: dict[str, np.ndarray], cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Linear map from phase-1 phi coordinates to phase-2 phi coordinates.

    Base prototypes carry over; ``h_b`` takes the ``f_b`` input block of the
    shared head's first layer and its base-logit output rows. Phase-2-only
    coordinates (novel prototypes, ``h_n``) are zero. The same map serves for
    parameters and for gradients.
    """
    C, kb = cfg.feat_dim, cfg.k_base
    out = {n: np.zeros(s) for n, s in phase2_phi_shapes(cfg)}
    out["protos.base"] = named["protos.base"].copy()
    out["h_b.W0"] = named["head.W0"][:, :C].copy()
    out["h_b.b0"] = named["head.b0"].copy()
    out["h_b.W1"] = named["head.W1"][:kb].copy()
    out["h_b.b1"] = named["head.b1"][:kb].copy()
    return out


def _mlp_from_named(named: dict[str, np.ndarray], prefix: str, n_layers: int) -> Mlp:
    return Mlp([(named[f"{prefix}.W{i}"].copy(), named[f"{prefix}.b{i}"].copy()) for i in range(n_layers)])
