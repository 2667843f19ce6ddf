import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hop3d.ablation import (AR_SWEEP, LAMBDA_SWEEP, TABLE_ROWS, ablation_grid, bootstrap_ci, run_ablation,
                            summarize, thread_cap)
from hop3d.config import RunConfig


def test_empty_grid():
    assert ablation_grid([], ("table",)) == []
    assert ablation_grid(range(3), ()) == []
    assert run_ablation(RunConfig.from_flat({}), [], ("table",)) == []
    assert summarize([]) == []


def test_grid_size_counting():
    seeds = range(4)
    cells = ablation_grid(seeds)
    assert len(cells) == len(seeds) * (len(TABLE_ROWS) + len(LAMBDA_SWEEP) + len(AR_SWEEP))
    assert len({c.subdir for c in cells}) == len(cells)


def test_rows_without_orthogonality_pretrain_without_it():
    base = RunConfig.from_flat({})
    for cell in ablation_grid([0], ("table",)):
        cfg = cell.run_config(base)
        assert cfg.flags == cell.flags and cfg.train.seed == 0
        expected = base.train.lambda_orth_p1 if cell.flags.hop_rep_orth else 0.0
        assert cfg.train.lambda_orth_p1 == expected
    marg = [c for c in ablation_grid([0], ("table",)) if c.row == "net+marginal"][0]
    assert marg.run_config(base).train.entropy.lambda_cond == 0.0


def test_bootstrap_edge_cases():
    assert bootstrap_ci([3.5]) == (3.5, 3.5, 3.5)
    assert all(np.isnan(bootstrap_ci([])))
    assert bootstrap_ci([None, 2.0, float("nan")]) == (2.0, 2.0, 2.0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=9))
def test_bootstrap_median_and_bounds(values):
    med, lo, hi = bootstrap_ci(values, n_boot=200)
    s = sorted(values)
    n = len(s)
    oracle = s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
    assert med == pytest.approx(oracle)
    assert s[0] <= lo <= hi <= s[-1]


def test_summarize_groups_rows():
    recs = [{"group": "table", "row": r, "seed": s, "hm": float(s)} for r in ("a", "b") for s in range(3)]
    out = summarize(recs, keys=("hm",))
    assert [(o["row"], o["n_seeds"], o["hm"]) for o in out] == [("a", 3, 1.0), ("b", 3, 1.0)]


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("HOP_THREADS", raising=False)
    assert thread_cap() == 1
    monkeypatch.setenv("HOP_THREADS", "3")
    assert thread_cap() == 3
    monkeypatch.setenv("HOP_THREADS", "0")
    assert thread_cap() == 1
    monkeypatch.setenv("HOP_THREADS", "many")
    with pytest.raises(ValueError):
        thread_cap()


def test_threaded_run_matches_serial():
    base = RunConfig.from_flat(dict(n_points=256, min_points=24, sig_dim=4, n_train=8, n_pool=16, n_test=3,
                                    phase1_iters=10, grad_samples=4, hidden=6, feat_dim=4, head_hidden=6,
                                    batch_scenes=3))
    a = run_ablation(base, [0], ("ar",), threads=1)
    b = run_ablation(base, [0], ("ar",), threads=2)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert [r["row"] for r in a] == [f"ar={x:g}" for x in AR_SWEEP]
