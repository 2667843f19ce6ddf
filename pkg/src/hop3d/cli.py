"""``hop3d`` command line: gen, phase1, phase2, eval, ablate, report.

Layout under ``--out``::

    data/manifest.json, data/{train,support,test}/scene_NNNNN.bin
    phase1/checkpoint.txt (model + basis), phase1/metrics.jsonl, phase1/*.csv
    phase2/checkpoint.txt, phase2/metrics.jsonl, phase2/*.csv
    eval/metrics.jsonl
    ablate/<group>/<row>/seed<k>/metrics.jsonl
    report/*.csv

Metric records are single JSON objects per line holding every MetricsReport
field plus a few run identifiers (``command``, ``seed``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import ablation
from .config import ConfigError, RunConfig, dump_run_config, load_run_config
from .data import generate_split, sample_support, support_scene_indices
from .hop_rep import cosine_similarity_matrix, mean_offdiag_abs_cosine
from .io import FormatError, load_checkpoint, load_scene, save_checkpoint, save_scene
from .metrics import MetricsReport, evaluate, report_from_predictions
from .trainer import phase1_train, phase2_train

log = logging.getLogger("hop3d")

MANIFEST_VERSION = 1


class CliError(RuntimeError):
    """A user-facing failure: printed without a traceback, exit status 2."""


# small helpers ------------------------------------------------------------

def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _emit(record: dict, path: Path) -> None:
    line = json.dumps(record, sort_keys=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(line + "\n")
    print(line)


def _fresh(path: Path) -> Path:
    if path.exists():
        path.unlink()
    return path


def export_metrics_csv(report: MetricsReport, prefix: Path, prototypes: np.ndarray | None = None) -> list[Path]:
    written = []
    names = [f"c{i}" for i in range(len(report.confusion))]
    p = prefix / "confusion.csv"
    _write_csv(p, ["truth\\pred", *names], [[n, *row] for n, row in zip(names, report.confusion)])
    written.append(p)
    bins = len(report.confidence_hist)
    p = prefix / "confidence_hist.csv"
    _write_csv(p, ["bin_lo", "bin_hi", "count"],
               [[i / bins, (i + 1) / bins, c] for i, c in enumerate(report.confidence_hist)])
    written.append(p)
    p = prefix / "class_frequency.csv"
    _write_csv(p, ["label", "fraction"], list(enumerate(report.class_frequency)))
    written.append(p)
    if prototypes is not None:
        G = cosine_similarity_matrix(prototypes)
        p = prefix / "prototype_similarity.csv"
        _write_csv(p, ["proto", *range(G.shape[0])], [[i, *("%.17g" % v for v in row)] for i, row in enumerate(G)])
        written.append(p)
    return written


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CliError(f"missing {path}: {hint}")
    return path


def _load_manifest(out: Path) -> dict:
    p = _need(out / "data" / "manifest.json", f"run `hop3d gen --out {out}` first")
    return json.loads(p.read_text())


def _load_scenes(out: Path, manifest: dict, split: str) -> list:
    return [load_scene(out / "data" / rel) for rel in manifest["files"][split]]


def _load_ckpt(path: Path, hint: str):
    _need(path, hint)
    try:
        return load_checkpoint(path)
    except FormatError as exc:
        raise CliError(f"{path}: {exc}") from exc


# commands -----------------------------------------------------------------

def cmd_gen(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    data = out / "data"
    spec = cfg.split
    try:
        data.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {data}: {exc}") from exc
    train = generate_split(spec, "train")
    pool = generate_split(spec, "pool")
    test = generate_split(spec, "test")
    support_seed = cfg.support_seed + cfg.train.seed
    selection = sample_support(spec, pool, seed=support_seed) if spec.k_novel else {}
    support_idx = support_scene_indices(selection)

    files = {}
    for name, scenes in (("train", train), ("support", [pool[i] for i in support_idx]), ("test", test)):
        d = data / name
        d.mkdir(exist_ok=True)
        for old in d.glob("scene_*.bin"):
            old.unlink()
        files[name] = []
        for i, s in enumerate(scenes):
            rel = f"{name}/scene_{i:05d}.bin"
            save_scene(data / rel, s)
            files[name].append(rel)
    manifest = {
        "version": MANIFEST_VERSION,
        "scene_format": "HOP3DSC1",
        "split": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()},
        "seeds": {"train": spec.seed_train, "pool": spec.seed_support, "test": spec.seed_test,
                  "signature": spec.seed_signature, "support_selection": support_seed},
        "counts": {k: len(v) for k, v in files.items()},
        "support_selection": {str(c): [support_idx.index(i) for i in idx] for c, idx in selection.items()},
        "support_pool_indices": support_idx,
        "files": files,
    }
    (data / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"command": "gen", "counts": manifest["counts"], "out": str(data)}, sort_keys=True))
    return 0


def _check_split(manifest: dict, cfg: RunConfig) -> None:
    if manifest["split"]["k_base"] != cfg.split.k_base or manifest["split"]["k_novel"] != cfg.split.k_novel:
        raise CliError("dataset class counts differ from the current config; rerun `hop3d gen` with it")


def cmd_phase1(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    manifest = _load_manifest(out)
    _check_split(manifest, cfg)
    train = _load_scenes(out, manifest, "train")
    test = _load_scenes(out, manifest, "test")
    if not train:
        raise CliError("the dataset has no training scenes; raise n_train and rerun `hop3d gen`")
    res = phase1_train(cfg.train, cfg.split, train, test or None)
    d = out / "phase1"
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "checkpoint.txt", res.model, res.basis)
    (d / "config.yaml").write_text(dump_run_config(cfg))
    _write_csv(d / "losses.csv", ["step", "loss"], [[i, "%.17g" % v] for i, v in enumerate(res.losses)])
    rec = {"command": "phase1", "seed": cfg.train.seed, "basis_rank": res.basis.r, "basis_dim": res.basis.d,
           "offdiag_abs_cos": mean_offdiag_abs_cosine(res.model.prototype_matrix())}
    if res.metrics is not None:
        rec.update(res.metrics.to_dict())
        export_metrics_csv(res.metrics, d, res.model.prototype_matrix())
    _emit(rec, _fresh(d / "metrics.jsonl"))
    return 0


def cmd_phase2(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    manifest = _load_manifest(out)
    _check_split(manifest, cfg)
    model, basis = _load_ckpt(out / "phase1" / "checkpoint.txt", f"run `hop3d phase1 --out {out}` first")
    if model.phase != 1:
        raise CliError(f"{out / 'phase1' / 'checkpoint.txt'} is not a phase-1 checkpoint")
    if basis is None:
        raise CliError("the phase-1 checkpoint carries no gradient basis; rerun `hop3d phase1`")
    support = _load_scenes(out, manifest, "support")
    if not support:
        raise CliError("the dataset has no support scenes; set k_novel >= 1 and rerun `hop3d gen`")
    test = _load_scenes(out, manifest, "test")
    train = _load_scenes(out, manifest, "train")
    res = phase2_train(cfg.train, cfg.split, model, basis, support, cfg.flags, test or None, base_scenes=train)
    d = out / "phase2"
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "checkpoint.txt", res.model)
    (d / "config.yaml").write_text(dump_run_config(cfg))
    _write_csv(d / "losses.csv", ["step", "loss"], [[i, "%.17g" % v] for i, v in enumerate(res.losses)])
    rec = {"command": "phase2", "seed": cfg.train.seed, **asdict(cfg.flags),
           "offdiag_abs_cos": mean_offdiag_abs_cosine(res.model.prototype_matrix())}
    if res.metrics is not None:
        rec.update(res.metrics.to_dict())
        export_metrics_csv(res.metrics, d, res.model.prototype_matrix())
    _emit(rec, _fresh(d / "metrics.jsonl"))
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None, oracle: bool = False) -> int:
    out = Path(cfg.out)
    manifest = _load_manifest(out)
    test = _load_scenes(out, manifest, "test")
    k_base, k_novel = manifest["split"]["k_base"], manifest["split"]["k_novel"]
    rec = {"command": "eval", "seed": cfg.train.seed}
    protos = None
    if oracle:
        report = report_from_predictions([s.labels for s in test], [s.labels for s in test],
                                         [np.ones(s.n) for s in test], k_base, k_novel)
        rec["predictor"] = "oracle"
    else:
        if checkpoint is None:
            p2 = out / "phase2" / "checkpoint.txt"
            path = p2 if p2.exists() else out / "phase1" / "checkpoint.txt"
        else:
            path = Path(checkpoint)
        model, _ = _load_ckpt(path, "train a model with `hop3d phase1`/`phase2` or pass --checkpoint")
        report = evaluate(model, test, k_base, k_novel, workers=cfg.eval_workers)
        try:
            rec["predictor"] = path.relative_to(out).as_posix()
        except ValueError:
            rec["predictor"] = str(path)
        protos = model.prototype_matrix()
    rec.update(report.to_dict())
    d = out / "eval"
    export_metrics_csv(report, d, protos)
    _emit(rec, _fresh(d / "metrics.jsonl"))
    return 0


def cmd_ablate(cfg: RunConfig, groups) -> int:
    out = Path(cfg.out) / "ablate"
    seeds = range(cfg.train.seed, cfg.train.seed + cfg.ablation_seeds)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_run_config(cfg))
    records = ablation.run_ablation(cfg, seeds, groups, out_dir=out)
    for r in records:
        print(json.dumps({k: v for k, v in r.items() if k not in ("confusion", "prototype_cosine")}, sort_keys=True))
    write_report(out, Path(cfg.out) / "report")
    return 0


# report -----------------------------------------------------------------------

REPORT_TABLES = {"table": "table2.csv", "lambda": "lambda_sweep.csv", "ar": "ar_sweep.csv"}


def collect_records(metrics_dir: Path) -> list[dict]:
    records = []
    for p in sorted(Path(metrics_dir).rglob("metrics.jsonl")):
        for line in p.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                if "group" in rec and "row" in rec:
                    records.append(rec)
    order = {g: i for i, g in enumerate(ablation.GROUPS)}
    records.sort(key=lambda r: (order.get(r["group"], 99), _row_rank(r), r["seed"]))
    return records


def _row_rank(rec):
    if rec["group"] == "table":
        names = [n for n, _, _ in ablation.TABLE_ROWS]
        return names.index(rec["row"]) if rec["row"] in names else 99
    try:
        return float(rec["row"].split("=", 1)[1])
    except (IndexError, ValueError):
        return 99


def write_report(metrics_dir: Path, report_dir: Path) -> list[Path]:
    records = collect_records(metrics_dir)
    if not records:
        print(f"warning: no ablation metrics found under {metrics_dir}; writing empty tables", file=sys.stderr)
    summary = ablation.summarize(records)
    header = ["group", "row", "n_seeds"]
    for k in ablation.SUMMARY_KEYS:
        header += [k, f"{k}_lo", f"{k}_hi"]
    written = []
    for group, fname in REPORT_TABLES.items():
        rows = [[s[h] for h in header] for s in summary if s["group"] == group]
        _write_csv(report_dir / fname, header, rows)
        written.append(report_dir / fname)

    # per-run exports for the confidence, frequency and similarity analyses
    hist_rows, freq_rows, sim_rows = [], [], []
    for r in records:
        key = [r["group"], r["row"], r["seed"]]
        for i, c in enumerate(r.get("confidence_hist") or []):
            hist_rows.append(key + [i, c])
        for lab, f in enumerate(r.get("class_frequency") or []):
            freq_rows.append(key + [lab, f])
        for i, row in enumerate(r.get("prototype_cosine") or []):
            for j, v in enumerate(row):
                sim_rows.append(key + [i, j, v])
    for fname, head, rows in (("confidence_hist.csv", ["bin", "count"], hist_rows),
                              ("class_frequency.csv", ["label", "fraction"], freq_rows),
                              ("prototype_similarity.csv", ["i", "j", "cosine"], sim_rows)):
        _write_csv(report_dir / fname, ["group", "row", "seed", *head], rows)
        written.append(report_dir / fname)
    print(json.dumps({"command": "report", "records": len(records), "tables": [str(p) for p in written]}))
    return written


def cmd_report(cfg: RunConfig, metrics_dir: str | None = None) -> int:
    src = Path(metrics_dir) if metrics_dir else Path(cfg.out) / "ablate"
    if not src.is_dir():
        raise CliError(f"metrics directory {src} does not exist; run `hop3d ablate` or pass --metrics-dir")
    write_report(src, Path(cfg.out) / "report")
    return 0


# entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML file of flat key: value settings")
    common.add_argument("--seed", type=int, help="training seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hop3d", description="Hierarchical orthogonal prototypes on synthetic point clouds.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the synthetic dataset")
    sub.add_parser("phase1", parents=[common], help="base pretraining + gradient basis")
    sub.add_parser("phase2", parents=[common], help="few-shot novel adaptation")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test scenes")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    p = sub.add_parser("ablate", parents=[common], help="run the ablation grid")
    p.add_argument("--groups", default=",".join(ablation.GROUPS),
                   help="comma-separated subset of: " + ", ".join(ablation.GROUPS))
    p = sub.add_parser("report", parents=[common], help="summarize ablation metrics into CSV tables")
    p.add_argument("--metrics-dir", metavar="DIR")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_run_config(args.config, args.set, seed=args.seed, out=args.out)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "phase1":
            return cmd_phase1(cfg)
        if args.command == "phase2":
            return cmd_phase2(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.oracle)
        if args.command == "ablate":
            groups = tuple(g.strip() for g in args.groups.split(",") if g.strip())
            bad = [g for g in groups if g not in ablation.GROUPS]
            if bad:
                raise CliError(f"unknown ablation group(s): {', '.join(bad)}")
            return cmd_ablate(cfg, groups)
        if args.command == "report":
            return cmd_report(cfg, args.metrics_dir)
        if args.command == "show-config":
            sys.stdout.write(dump_run_config(cfg))
            return 0
    except (CliError, ConfigError) as exc:
        print(f"hop3d {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
