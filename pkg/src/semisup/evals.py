"""Metrics, the tiny-validation-set correlation study, hypersweep curves,
and report generation.

Run directories are the unit of analysis: each holds a resolved config
snapshot, a metrics log, a summary record, and the model's predictions on
the full validation set so that validation subsets can be re-scored without
retraining.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PREDICTIONS_HEADER = "predictions v1"


def topk_accuracy(probs: np.ndarray, labels, k: int) -> float:
    """Fraction of rows whose label is among the k largest probabilities;
    ties broken by lowest class index."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    n, classes = probs.shape
    if not 1 <= k <= classes:
        raise ValueError(f"k={k} out of range for {classes} classes")
    # stable sort on -probs keeps the lowest class index first among ties
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    hits = (order == labels[:, None]).any(axis=1)
    return float(hits.mean())


# ------------------------------------------------------------- predictions

def write_predictions(path, probs: np.ndarray):
    probs = np.ascontiguousarray(probs, dtype="<f4")
    n, k = probs.shape
    with open(path, "wb") as fh:
        fh.write(f"{PREDICTIONS_HEADER} {n} {k} float32\n".encode())
        fh.write(probs.tobytes())


def read_predictions(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode().strip().split()
        if " ".join(header[:2]) != PREDICTIONS_HEADER:
            raise ValueError(f"{path}: not a predictions file")
        n, k = int(header[2]), int(header[3])
        return np.frombuffer(fh.read(), dtype="<f4").reshape(n, k).astype(np.float32)


def write_labels(path, labels):
    np.asarray(labels, dtype="<i4").tofile(path)


def read_labels(path) -> np.ndarray:
    return np.fromfile(path, dtype="<i4").astype(np.int64)


# -------------------------------------------------------------- run records

@dataclass
class RunRecord:
    run_id: str
    path: Path
    config: dict
    config_digest: str
    seed: int
    pipeline: str
    hyperparameters: dict
    final_val: dict  # val-set name -> {"top1":..., "top5":...}
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dir(cls, run_dir) -> "RunRecord":
        run_dir = Path(run_dir)
        with open(run_dir / "summary.json") as fh:
            s = json.load(fh)
        return cls(
            run_id=s["run_id"], path=run_dir, config=s["config"],
            config_digest=s["config_digest"], seed=s["seed"],
            pipeline=s["pipeline"], hyperparameters=s.get("hyperparameters", {}),
            final_val=s["final_val"],
            extra={k: v for k, v in s.items() if k not in
                   {"run_id", "config", "config_digest", "seed", "pipeline",
                    "hyperparameters", "final_val"}},
        )

    def final_top1(self, val_name="full") -> float:
        return self.final_val[val_name]["top1"]

    def predictions(self) -> np.ndarray:
        return read_predictions(self.path / "predictions.bin")

    def val_labels(self) -> np.ndarray:
        return read_labels(self.path / "val_labels.bin")

    def metrics(self) -> list:
        out = []
        with open(self.path / "metrics.jsonl") as fh:
            for line in fh:
                out.append(json.loads(line))
        return out


@dataclass
class SweepTable:
    sweep_id: str
    grid: dict
    records: list

    @classmethod
    def from_dir(cls, sweep_dir) -> "SweepTable":
        sweep_dir = Path(sweep_dir)
        with open(sweep_dir / "sweep.json") as fh:
            meta = json.load(fh)
        records = []
        for d in sorted((sweep_dir / "runs").iterdir()):
            if (d / "summary.json").exists():
                records.append(RunRecord.from_dir(d))
        return cls(sweep_id=meta["sweep_id"], grid=meta["grid"], records=records)

    def check_grid(self):
        for rec in self.records:
            for key, values in self.grid.items():
                if rec.hyperparameters.get(key) not in values:
                    raise ValueError(
                        f"run {rec.run_id}: {key}={rec.hyperparameters.get(key)!r} off the grid")
        return self


# ------------------------------------------------------------ rank statistics

def average_ranks(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    ranks[order] = np.arange(1, len(x) + 1)
    _, inverse = np.unique(x, return_inverse=True)
    sums = np.bincount(inverse, weights=ranks)
    counts = np.bincount(inverse)
    return (sums / counts)[inverse]


def spearman(a, b) -> float:
    """Spearman rank correlation with average-rank tie handling."""
    ra, rb = average_ranks(a), average_ranks(b)
    if np.array_equal(ra, rb):
        return 1.0
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        return 0.0
    return float((da * db).sum() / denom)


# ----------------------------------------------------------- tiny-val study

def _balanced_subset(labels: np.ndarray, per_class: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    picks = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if per_class > len(idx):
            raise ValueError(f"class {c}: validation subset larger than the pool")
        picks.append(idx[rng.permutation(len(idx))][:per_class])
    return np.sort(np.concatenate(picks))


def tiny_val_study(sweep: SweepTable, sizes, seed: int = 0) -> list:
    """Re-score stored full-validation predictions on class-balanced
    subsets of the given per-class sizes ("full" = everything).

    Per size: each run's subset accuracy, the Spearman correlation against
    full-set accuracy, and the full-set accuracy gap between the
    subset-argmax model (first maximum) and the true best model.
    """
    if not sweep.records:
        raise ValueError("sweep has no completed runs")
    labels = sweep.records[0].val_labels()
    preds = []
    for rec in sweep.records:
        if not np.array_equal(rec.val_labels(), labels):
            raise ValueError(f"run {rec.run_id} used a different validation set")
        preds.append(rec.predictions())

    full_acc = np.array([topk_accuracy(p, labels, 1) for p in preds])
    rows = []
    for size in sizes:
        if size == "full":
            idx = np.arange(len(labels))
        else:
            idx = _balanced_subset(labels, int(size), seed)
        sub_acc = np.array([topk_accuracy(p[idx], labels[idx], 1) for p in preds])
        pick = int(np.argmax(sub_acc))
        rows.append({
            "size": size,
            "subset_examples": int(len(idx)),
            "spearman": spearman(sub_acc, full_acc),
            "argmax_gap": float(full_acc.max() - full_acc[pick]),
            "picked_run": sweep.records[pick].run_id,
            "subset_acc": sub_acc.tolist(),
            "full_acc": full_acc.tolist(),
        })
    return rows


# --------------------------------------------------------- hypersweep curves

def hypersweep_curves(sweep: SweepTable, name: str) -> dict:
    """Ascending-sorted final accuracies for each value of one
    hyperparameter; the rightmost point of a curve is that value's best."""
    if name not in sweep.grid:
        raise ValueError(f"unknown hyperparameter {name!r}; grid has {sorted(sweep.grid)}")
    curves: dict = {}
    for value in sweep.grid[name]:
        accs = sorted(rec.final_top1() for rec in sweep.records
                      if rec.hyperparameters.get(name) == value)
        curves[value] = accs
    return curves


def curves_to_csv(curves: dict) -> str:
    lines = ["value,order,accuracy"]
    for value, accs in curves.items():
        for i, a in enumerate(accs):
            lines.append(f"{value},{i},{a}")
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------------- report

def _collect_runs(root: Path):
    records, broken = [], []
    for summary in sorted(root.rglob("summary.json")):
        try:
            records.append(RunRecord.from_dir(summary.parent))
        except (KeyError, ValueError, json.JSONDecodeError) as err:
            broken.append(f"{summary.parent}: {err}")
    return records, broken


def report(root, sizes=(1, 5, "full")) -> str:
    """Markdown summary over every completed run below root: per-pipeline
    accuracy tables (mean +/- std over seeds), step tables for multi-step
    runs, and a tiny-validation study when root is a sweep directory."""
    root = Path(root)
    records, broken = _collect_runs(root)
    lines = [f"# Run report: {root}", ""]
    if broken:
        lines.append("## Skipped (missing or corrupt records)")
        lines += [f"- {b}" for b in broken]
        lines.append("")
    if not records:
        lines.append("no completed runs")
        return "\n".join(lines) + "\n"

    groups: dict = {}
    for rec in records:
        key = (rec.pipeline, rec.hyperparameters.get("labeled_fraction"))
        groups.setdefault(key, []).append(rec)

    lines.append("## Final top-1 accuracy (full validation set)")
    lines.append("")
    lines.append("| pipeline | labeled fraction | runs | mean | std |")
    lines.append("|---|---|---|---|---|")
    for (pipeline, frac), recs in sorted(groups.items(), key=lambda kv: str(kv[0])):
        accs = np.array([r.final_top1() for r in recs])
        std = accs.std(ddof=1) if len(accs) > 1 else 0.0
        lines.append(f"| {pipeline} | {frac} | {len(recs)} | {accs.mean():.4f} | {std:.4f} |")
    lines.append("")

    step_rows = []
    for rec in records:
        for step_name, acc in sorted((rec.extra.get("step_final", {}) or {}).items()):
            step_rows.append((rec.pipeline, rec.run_id, step_name, acc))
    if step_rows:
        lines.append("## Multi-step pipelines")
        lines.append("")
        lines.append("| pipeline | run | step | top-1 |")
        lines.append("|---|---|---|---|")
        for row in step_rows:
            lines.append("| " + " | ".join(f"{x:.4f}" if isinstance(x, float) else str(x)
                                           for x in row) + " |")
        lines.append("")

    if (root / "sweep.json").exists():
        sweep = SweepTable.from_dir(root)
        if sweep.records and (sweep.records[0].path / "predictions.bin").exists():
            lines.append("## Tiny-validation study")
            lines.append("")
            lines.append("| subset size/class | examples | spearman | argmax gap |")
            lines.append("|---|---|---|---|")
            for row in tiny_val_study(sweep, sizes):
                lines.append(f"| {row['size']} | {row['subset_examples']} | "
                             f"{row['spearman']:.4f} | {row['argmax_gap']:.4f} |")
            lines.append("")
        for name in sweep.grid:
            csv = curves_to_csv(hypersweep_curves(sweep, name))
            out = root / f"curve_{name}.csv"
            out.write_text(csv)
            lines.append(f"hypersweep curve data: {out}")
        lines.append("")
    return "\n".join(lines) + "\n"
