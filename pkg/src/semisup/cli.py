"""Command-line surface: convert, train, sweep, study, probe, pseudolabel,
report.

Exit codes: 0 success, 1 config error, 2 runtime failure.  The runs root
defaults to ./runs and can be moved with the SEMISUP_RUNS environment
variable.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import evals, model as model_mod, pipelines
from .config import ConfigError


def _dataset_cache_load(dataset_cfg, cache={}):
    key = json.dumps({"path": dataset_cfg.path, "synthetic": dataset_cfg.synthetic},
                     sort_keys=True)
    if key not in cache:
        cache[key] = dataset_cfg.load()
    return cache[key]


# ----------------------------------------------------------------- commands

def cmd_convert(args) -> int:
    data_mod.convert_folder(args.input, args.output)
    d = data_mod.load_dataset(args.output)
    print(f"wrote {args.output}: N={len(d)} C={d.images.shape[1]} "
          f"H={d.images.shape[2]} W={d.images.shape[3]} classes={d.class_count}")
    return 0


def cmd_train(args) -> int:
    payload = config_mod.load_yaml(args.config)
    spec = config_mod.from_dict(payload)
    if args.seed is not None:
        import dataclasses
        spec = dataclasses.replace(spec, seed=args.seed)
    spec = spec.resolve()
    out = Path(args.out) if args.out else None
    dataset = _dataset_cache_load(spec.dataset)
    rec = pipelines.run(spec, out_dir=out, dataset=dataset)
    print(f"run {rec.run_id} finished: "
          + " ".join(f"{k}={v['top1']:.4f}" for k, v in sorted(rec.final_val.items())))
    print(f"artifacts: {rec.path}")
    return 0


def _sweep_point(payload: dict, overrides: dict, out_dir: str):
    raw = config_mod.apply_overrides(payload, overrides)
    spec = config_mod.from_dict(raw).resolve()
    dataset = _dataset_cache_load(spec.dataset)
    return pipelines.run(spec, out_dir=Path(out_dir), dataset=dataset)


def cmd_sweep(args) -> int:
    payload = config_mod.load_yaml(args.config)
    grid = config_mod.sweep_grid(payload)
    base = config_mod.from_dict(payload)  # validate the base config up front
    out_root = Path(args.out) if args.out else pipelines.runs_root() / f"sweep-{base.digest()[:8]}"
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "runs").mkdir(exist_ok=True)
    keys = sorted(grid)
    points = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    with open(out_root / "sweep.json", "w") as fh:
        json.dump({"sweep_id": out_root.name, "grid": grid,
                   "points": len(points)}, fh, sort_keys=True, indent=1)

    failures = 0
    for i, overrides in enumerate(points):
        point_dir = out_root / "runs" / f"point{i:03d}"
        if (point_dir / "summary.json").exists():
            print(f"[{i + 1}/{len(points)}] {overrides} - already complete, skipping")
            continue
        print(f"[{i + 1}/{len(points)}] {overrides}")
        try:
            _sweep_point(payload, overrides, str(point_dir))
        except Exception as err:  # record and continue with the other points
            failures += 1
            point_dir.mkdir(parents=True, exist_ok=True)
            with open(point_dir / "error.json", "w") as fh:
                json.dump({"point": overrides, "error": repr(err)}, fh, indent=1)
            print(f"  point failed: {err}", file=sys.stderr)
    print(f"sweep complete: {len(points) - failures}/{len(points)} points ok -> {out_root}")
    return 0 if failures == 0 else 2


def _parse_sizes(text: str):
    sizes = []
    for tok in text.split(","):
        tok = tok.strip()
        sizes.append("full" if tok == "full" else int(tok))
    return sizes


def cmd_study(args) -> int:
    sweep = evals.SweepTable.from_dir(args.sweep_dir)
    rows = evals.tiny_val_study(sweep, _parse_sizes(args.sizes), seed=args.seed)
    with open(Path(args.sweep_dir) / "study.json", "w") as fh:
        json.dump(rows, fh, indent=1)
    print("size,examples,spearman,argmax_gap")
    for row in rows:
        print(f"{row['size']},{row['subset_examples']},{row['spearman']:.4f},"
              f"{row['argmax_gap']:.4f}")
    return 0


def cmd_probe(args) -> int:
    mdl, _ = model_mod.load(Path(args.run_dir) / "model.ckpt")
    dataset = data_mod.load_dataset(args.data)
    parts = data_mod.split(dataset, data_mod.SplitSpec(
        labeled_fraction=1.0, val_sizes=("full",),
        val_per_class=max(1, int(len(dataset) * args.val_fraction / dataset.class_count)),
        seed=args.seed))
    cfg = pipelines.ProbeConfig(epochs=args.epochs, learning_rate=args.lr, seed=args.seed)
    before = {n: t.data.copy() for n, t in mdl.params.items()}
    record = pipelines.linear_probe(mdl, parts.labeled, parts.val_sets["full"], cfg)
    if args.freeze:
        frozen = all(np.array_equal(before[n], t.data) for n, t in mdl.params.items())
        record["backbone_frozen"] = bool(frozen)
        if not frozen:
            raise RuntimeError("backbone parameters changed during the probe")
    with open(Path(args.run_dir) / "probe.json", "w") as fh:
        json.dump(record, fh, indent=1)
    print(f"probe final top-1: {record['final_top1']:.4f}; "
          f"epochs to within 1 point of final: {record['epochs_to_within_1pct']}")
    return 0


def cmd_pseudolabel(args) -> int:
    mdl, _ = model_mod.load(Path(args.run_dir) / "model.ckpt")
    dataset = data_mod.load_dataset(args.data)
    ps = pipelines.pseudo_label(mdl, dataset.images, args.threshold, args.averaging)
    out = data_mod.ImageDataset(ps.images[ps.kept], ps.labels[ps.kept],
                                dataset.class_count, "pseudo")
    data_mod.save_dataset(out, args.output)
    np.asarray(ps.confidences, dtype="<f4").tofile(str(args.output) + ".conf")
    print(f"kept {int(ps.kept.sum())}/{len(ps.kept)} pseudo-labeled examples -> {args.output}")
    return 0


def cmd_report(args) -> int:
    text = evals.report(args.directory)
    out = Path(args.directory) / "report.md"
    out.write_text(text)
    print(text)
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semisup", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("convert", help="ingest a class-per-subfolder image tree")
    c.add_argument("input")
    c.add_argument("output")
    c.set_defaults(fn=cmd_convert)

    t = sub.add_parser("train", help="run the pipeline described by a config file")
    t.add_argument("config")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", help="Cartesian grid of runs from the config's sweep section")
    s.add_argument("config")
    s.add_argument("--out", default=None)
    s.add_argument("--parallel", type=int, default=1,
                   help="reserved; runs execute sequentially and resume by skipping "
                        "completed points")
    s.set_defaults(fn=cmd_sweep)

    st = sub.add_parser("study", help="tiny-validation-set correlation study over a sweep")
    st.add_argument("sweep_dir")
    st.add_argument("--sizes", default="1,5,full")
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(fn=cmd_study)

    pr = sub.add_parser("probe", help="linear probe on frozen features of a trained run")
    pr.add_argument("run_dir")
    pr.add_argument("--data", required=True)
    pr.add_argument("--epochs", type=int, default=40)
    pr.add_argument("--lr", type=float, default=0.1)
    pr.add_argument("--val-fraction", type=float, default=0.25)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--freeze", action="store_true",
                    help="assert the backbone received zero updates")
    pr.set_defaults(fn=cmd_probe)

    pl = sub.add_parser("pseudolabel", help="impute labels for a dataset with a trained model")
    pl.add_argument("run_dir")
    pl.add_argument("--data", required=True)
    pl.add_argument("--output", required=True)
    pl.add_argument("--threshold", type=float, default=None)
    pl.add_argument("--averaging", default="single",
                    choices=["single", "rot4", "crop5rot4"])
    pl.set_defaults(fn=cmd_pseudolabel)

    r = sub.add_parser("report", help="summarize completed runs below a directory")
    r.add_argument("directory")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
