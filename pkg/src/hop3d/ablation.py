"""Ablation grid: flag rows, lambda_orth sweep and adaptation-ratio sweep.

Every cell is one (row, seed) pair. Phase-1 runs are shared between cells
through a cache keyed by ``(seed, lambda_orth_p1)``; rows that switch the
orthogonality term off also pretrain without it.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import generate_split, sample_support, support_scene_indices
from .hop_rep import cosine_similarity_matrix, mean_offdiag_abs_cosine
from .trainer import Flags, Phase1Result, phase1_train, phase2_train

log = logging.getLogger(__name__)

TABLE_ROWS = (
    ("baseline", Flags(False, False, False), {}),
    ("rep_only", Flags(False, True, False), {}),
    ("grad_only", Flags(True, False, False), {}),
    ("net", Flags(True, True, False), {}),
    ("net+marginal", Flags(True, True, True), {"lambda_cond": 0.0}),
    ("full", Flags(True, True, True), {}),
)
LAMBDA_SWEEP = (0.0, 0.01, 0.1, 1.0)
AR_SWEEP = (0.00625, 0.025, 0.1)
GROUPS = ("table", "lambda", "ar")

SUMMARY_KEYS = ("miou_b", "miou_n", "miou_a", "hm", "base_drop", "mean_confidence",
                "high_conf_fraction", "class_frequency_cv", "offdiag_abs_cos")


@dataclass(frozen=True)
class Cell:
    group: str
    row: str
    seed: int
    flags: Flags
    overrides: tuple = field(default_factory=tuple)  # sorted (key, value) pairs

    def run_config(self, base: RunConfig) -> RunConfig:
        kw = dict(self.overrides)
        kw["seed"] = self.seed
        kw.update(hop_grad=self.flags.hop_grad, hop_rep_orth=self.flags.hop_rep_orth, hop_ent=self.flags.hop_ent)
        if not self.flags.hop_rep_orth:
            kw.setdefault("lambda_orth_p1", 0.0)
        return base.with_overrides(**kw)

    @property
    def subdir(self) -> str:
        return f"{self.group}/{self.row}/seed{self.seed}"


def ablation_grid(seeds, groups=GROUPS) -> list[Cell]:
    cells = []
    for seed in seeds:
        if "table" in groups:
            for name, flags, ov in TABLE_ROWS:
                cells.append(Cell("table", name, seed, flags, tuple(sorted(ov.items()))))
        if "lambda" in groups:
            for lam in LAMBDA_SWEEP:
                ov = {"lambda_orth_p1": lam, "lambda_orth_p2": lam}
                cells.append(Cell("lambda", f"lambda={lam:g}", seed, Flags(), tuple(sorted(ov.items()))))
        if "ar" in groups:
            for ar in AR_SWEEP:
                cells.append(Cell("ar", f"ar={ar:g}", seed, Flags(), (("adaptation_ratio", ar),)))
    return cells


class Phase1Cache:
    """Thread-safe memo of phase-1 runs keyed by ``(seed, lambda_orth_p1)``."""

    def __init__(self, train, test):
        self.train, self.test = train, test
        self._store: dict = {}
        self._locks: dict = {}
        self._guard = threading.Lock()

    def get(self, cfg: RunConfig) -> Phase1Result:
        key = (cfg.train.seed, cfg.train.lambda_orth_p1)
        with self._guard:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            if key not in self._store:
                self._store[key] = phase1_train(cfg.train, cfg.split, self.train, self.test)
            return self._store[key]

    def __len__(self):
        return len(self._store)


def run_cell(cell: Cell, base: RunConfig, data: dict, cache: Phase1Cache) -> dict:
    cfg = cell.run_config(base)
    p1 = cache.get(cfg)
    sel = sample_support(cfg.split, data["pool"], seed=cfg.support_seed + cell.seed)
    support = [data["pool"][i] for i in support_scene_indices(sel)]
    p2 = phase2_train(cfg.train, cfg.split, p1.model, p1.basis, support, cfg.flags, data["test"],
                      base_scenes=data["train"])
    rec = {"group": cell.group, "row": cell.row, "seed": cell.seed}
    rec.update(p2.metrics.to_dict())
    rec["base_drop"] = p1.metrics.miou_b - p2.metrics.miou_b
    rec["offdiag_abs_cos"] = mean_offdiag_abs_cosine(p2.model.prototype_matrix())
    rec["prototype_cosine"] = cosine_similarity_matrix(p2.model.prototype_matrix()).tolist()
    return rec


def thread_cap(default: int = 1) -> int:
    raw = os.environ.get("HOP_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"HOP_THREADS must be a positive integer, got {raw!r}") from None


def run_ablation(base: RunConfig, seeds, groups=GROUPS, out_dir=None, threads: int | None = None,
                 data: dict | None = None) -> list[dict]:
    """Run every cell, returning records in grid order."""
    cells = ablation_grid(seeds, groups)
    if not cells:
        return []
    if data is None:
        data = {k: generate_split(base.split, k) for k in ("train", "pool", "test")}
    cache = Phase1Cache(data["train"], data["test"])
    workers = threads if threads is not None else thread_cap()

    def job(cell):
        rec = run_cell(cell, base, data, cache)
        if out_dir is not None:
            d = Path(out_dir) / cell.subdir
            d.mkdir(parents=True, exist_ok=True)
            (d / "metrics.jsonl").write_text(json.dumps(rec, sort_keys=True) + "\n")
        log.info("cell %s done: HM %.2f", cell.subdir, rec["hm"])
        return rec

    if workers <= 1:
        return [job(c) for c in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, cells))


def bootstrap_ci(values, n_boot: int = 2000, seed: int = 0, level: float = 0.95) -> tuple[float, float, float]:
    """Median and percentile-bootstrap interval of the median."""
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=float)
    if v.size == 0:
        return (float("nan"),) * 3
    med = float(np.median(v))
    if v.size == 1:
        return med, med, med
    rng = np.random.default_rng(seed)
    meds = np.median(v[rng.integers(0, v.size, size=(n_boot, v.size))], axis=1)
    a = (1.0 - level) / 2.0
    return med, float(np.quantile(meds, a)), float(np.quantile(meds, 1.0 - a))


def summarize(records: list[dict], keys=SUMMARY_KEYS, seed: int = 0) -> list[dict]:
    """One summary row per (group, row), in first-seen order."""
    order: list = []
    buckets: dict = {}
    for r in records:
        k = (r["group"], r["row"])
        if k not in buckets:
            order.append(k)
            buckets[k] = []
        buckets[k].append(r)
    out = []
    for k in order:
        rows = buckets[k]
        summary = {"group": k[0], "row": k[1], "n_seeds": len(rows)}
        for key in keys:
            med, lo, hi = bootstrap_ci([r.get(key) for r in rows], seed=seed)
            summary[key] = med
            summary[f"{key}_lo"] = lo
            summary[f"{key}_hi"] = hi
        out.append(summary)
    return out
