"""Experiment recipes: supervised baseline, rotation/exemplar co-training,
VAT(+EntMin), pseudo-labeling, the three-step mix pipeline, prediction
averaging, linear probes, and seed/subset variance studies.

Every run owns a directory: resolved config snapshot, metrics log,
checkpoints, full-validation predictions, and a summary record.  Runs are
pure functions of (config, seed): identical inputs give identical artifacts
up to wall-clock fields.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as model_mod
from .config import RunSpec
from .data import (BatchPlan, BatchStream, ImageDataset, PointDataset, rotate90,
                   split as split_data, standard_augment)
from .evals import RunRecord, topk_accuracy, write_labels, write_predictions
from .losses import LossSpec, propose_vat_eps_grid
from .train import (FitResult, JsonlSink, TrainConfig, evaluate, fit,
                    predict_probs)

RUNS_ENV = "SEMISUP_RUNS"


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


# ------------------------------------------------------------- augmentation

class AugmentedStream:
    """Applies pad-crop-mirror augmentation to both batch halves."""

    def __init__(self, stream, seed: int, pad: int = 4):
        self.stream = stream
        self.rng = np.random.default_rng(seed)
        self.pad = pad

    @property
    def steps_per_epoch(self):
        return self.stream.steps_per_epoch

    def epoch(self):
        for xl, yl, xu in self.stream.epoch():
            xl = standard_augment(xl, rng=self.rng, pad=self.pad)
            if xu is not None:
                xu = standard_augment(xu, rng=self.rng, pad=self.pad)
            yield xl, yl, xu


# -------------------------------------------------------------- model setup

def _build_model(dataset, seed: int, width: int):
    if isinstance(dataset, PointDataset):
        return model_mod.MlpNet.init(seed, dataset.points.shape[1], dataset.class_count)
    return model_mod.ConvNet.init(seed, dataset.images.shape[1], dataset.class_count,
                                  width=width)


def _needs_unlabeled(loss: LossSpec) -> bool:
    return any((loss.w_rot > 0, loss.w_exemplar > 0, loss.w_vat > 0, loss.w_entmin > 0))


def _resolve_vat_eps(loss: LossSpec, images: np.ndarray, seed: int) -> LossSpec:
    """The half-nearest-neighbour heuristic picks the second grid point,
    mirroring the published sweep's best radius."""
    if loss.w_vat > 0 and loss.vat_eps is None:
        grid = propose_vat_eps_grid(images, seed=seed)
        return dataclasses.replace(loss, vat_eps=grid[1])
    return loss


# --------------------------------------------------------- view averaging

def _five_crops(batch: np.ndarray):
    n, c, h, w = batch.shape
    ch, cw = max(8, round(0.75 * h)), max(8, round(0.75 * w))
    tops, lefts = (0, h - ch), (0, w - cw)
    views = [batch[:, :, t:t + ch, l:l + cw] for t in tops for l in lefts]
    t0, l0 = (h - ch) // 2, (w - cw) // 2
    views.append(batch[:, :, t0:t0 + ch, l0:l0 + cw])
    return views


def predict(model, batch: np.ndarray, averaging: str = "single",
            batch_size: int = 256) -> np.ndarray:
    """Class probabilities, optionally averaged over transformed views."""
    if averaging == "single" or batch.ndim == 2:
        return predict_probs(model, batch, batch_size)
    if averaging == "rot4":
        views = [np.ascontiguousarray(np.rot90(batch, k, axes=(2, 3))) for k in range(4)]
    elif averaging == "crop5rot4":
        views = []
        for crop in _five_crops(batch):
            views += [np.ascontiguousarray(np.rot90(crop, k, axes=(2, 3))) for k in range(4)]
    else:
        raise ValueError(f"unknown averaging mode {averaging!r}")
    acc = None
    for v in views:
        p = predict_probs(model, v, batch_size)
        acc = p if acc is None else acc + p
    return acc / len(views)


# ------------------------------------------------------------- pseudo labels

@dataclass
class PseudoLabeledSet:
    images: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray
    kept: np.ndarray

    def kept_dataset(self, class_count: int) -> ImageDataset:
        return ImageDataset(self.images[self.kept], self.labels[self.kept],
                            class_count, "pseudo")


def pseudo_label(model, images: np.ndarray, threshold: float | None = None,
                 averaging: str = "single") -> PseudoLabeledSet:
    """Impute classes from the configured view-averaged softmax; keep those
    with max-probability confidence at or above the threshold (all, when no
    threshold is given)."""
    probs = predict(model, images, averaging)
    labels = probs.argmax(axis=1).astype(np.int64)
    conf = probs.max(axis=1)
    kept = np.ones(len(labels), bool) if threshold is None else conf >= threshold
    return PseudoLabeledSet(images=images, labels=labels, confidences=conf, kept=kept)


# -------------------------------------------------------------- run plumbing

def _hyper(spec: RunSpec, extra=None) -> dict:
    h = {
        "pipeline": spec.pipeline,
        "labeled_fraction": spec.split.labeled_fraction,
        "learning_rate": spec.train.learning_rate,
        "weight_decay": spec.train.weight_decay,
        "epochs": spec.train.epochs,
        "labeled_batch": spec.train.labeled_batch,
        "width": spec.width,
        "seed": spec.seed,
        "w_sup": spec.loss.w_sup, "w_rot": spec.loss.w_rot,
        "w_exemplar": spec.loss.w_exemplar, "w_vat": spec.loss.w_vat,
        "w_entmin": spec.loss.w_entmin, "vat_eps": spec.loss.vat_eps,
    }
    if extra:
        h.update(extra)
    return h


def _write_summary(out_dir: Path, spec: RunSpec, run_id: str, final_val: dict,
                   hyper: dict, extra: dict | None = None):
    summary = {
        "run_id": run_id,
        "pipeline": spec.pipeline,
        "seed": spec.seed,
        "config": spec.to_dict(),
        "config_digest": spec.digest(),
        "hyperparameters": hyper,
        "final_val": final_val,
        "wallclock": time.time(),
    }
    if extra:
        summary.update(extra)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)


def _emit_artifacts(out_dir: Path, spec: RunSpec, run_id: str, eval_model,
                    val_sets: dict, hyper: dict, extra: dict | None = None,
                    step: int = 0) -> RunRecord:
    from .config import dump_yaml
    dump_yaml(spec, out_dir / "config.yaml")
    final_val = {name: evaluate(eval_model, ds) for name, ds in val_sets.items()}
    if "full" in val_sets:
        full = val_sets["full"]
        arr = full.images if hasattr(full, "images") else full.points
        write_predictions(out_dir / "predictions.bin", predict_probs(eval_model, arr))
        write_labels(out_dir / "val_labels.bin", full.labels)
    model_mod.save(eval_model, out_dir / "model.ckpt", step=step, seed=spec.seed)
    _write_summary(out_dir, spec, run_id, final_val, hyper, extra)
    return RunRecord.from_dir(out_dir)


def _fit_once(mdl, labeled, unlabeled, val_sets, loss_spec: LossSpec,
              train_cfg: TrainConfig, augment: str, sink, run_id: str) -> FitResult:
    plan = BatchPlan(train_cfg.labeled_batch, train_cfg.unlabeled_batch,
                     seed=train_cfg.seed)
    stream = BatchStream(labeled, unlabeled, plan)
    if augment == "standard" and not isinstance(labeled, PointDataset):
        stream = AugmentedStream(stream, seed=train_cfg.seed + 101)
    return fit(mdl, loss_spec, stream, train_cfg, sink, val_sets, run_id)


def _single_fit_run(dataset, spec: RunSpec, out_dir: Path, uses_unlabeled: bool,
                    loss_spec: LossSpec | None = None) -> RunRecord:
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = split_data(dataset, spec.split)
    loss_spec = loss_spec if loss_spec is not None else spec.loss
    if uses_unlabeled:
        arr = parts.unlabeled.images if hasattr(parts.unlabeled, "images") else parts.unlabeled.points
        loss_spec = _resolve_vat_eps(loss_spec, arr, spec.seed)
    mdl = _build_model(dataset, spec.seed, spec.width)
    train_cfg = dataclasses.replace(spec.train, seed=spec.seed)
    run_id = f"{spec.pipeline}-s{spec.seed}-{spec.digest()[:8]}"
    sink = JsonlSink(out_dir / "metrics.jsonl")
    try:
        result = _fit_once(mdl, parts.labeled, parts.unlabeled if uses_unlabeled else None,
                           parts.val_sets, loss_spec, train_cfg, spec.augment, sink, run_id)
    finally:
        sink.close()
    eval_model = result.averaged if result.averaged is not None else result.model
    hyper = _hyper(spec, {"vat_eps": loss_spec.vat_eps})
    return _emit_artifacts(out_dir, spec, run_id, eval_model, parts.val_sets, hyper,
                           step=result.steps)


# ---------------------------------------------------------------- pipelines

def run_supervised(dataset, spec: RunSpec, out_dir: Path) -> RunRecord:
    loss = dataclasses.replace(spec.loss, w_rot=0, w_exemplar=0, w_vat=0, w_entmin=0)
    return _single_fit_run(dataset, spec, out_dir, uses_unlabeled=False, loss_spec=loss)


def run_selfsup(dataset, spec: RunSpec, out_dir: Path) -> RunRecord:
    """Joint supervised + self-supervised training (rotation or exemplar),
    with equal-size labeled/unlabeled batches."""
    return _single_fit_run(dataset, spec, out_dir, uses_unlabeled=True)


def run_vat(dataset, spec: RunSpec, out_dir: Path) -> RunRecord:
    return _single_fit_run(dataset, spec, out_dir, uses_unlabeled=True)


def run_pseudo_label(dataset, spec: RunSpec, out_dir: Path,
                     base_ckpt: Path | None = None) -> RunRecord:
    """Step 1 trains (or loads) a supervised base model; step 2 retrains a
    fresh model on the labeled set plus kept pseudo-labeled examples."""
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = split_data(dataset, spec.split)
    run_id = f"{spec.pipeline}-s{spec.seed}-{spec.digest()[:8]}"

    step1_dir = out_dir / "step1"
    step1_dir.mkdir(exist_ok=True)
    if base_ckpt is not None:
        base_model, _ = model_mod.load(base_ckpt)
        base_meta = {"base": str(base_ckpt)}
    elif (step1_dir / "model.ckpt").exists():
        base_model, _ = model_mod.load(step1_dir / "model.ckpt")
        base_meta = {"base": "step1 (cached)"}
    else:
        base_model = _build_model(dataset, spec.seed, spec.width)
        sink = JsonlSink(step1_dir / "metrics.jsonl")
        try:
            sup = dataclasses.replace(spec.loss, w_rot=0, w_exemplar=0, w_vat=0, w_entmin=0)
            _fit_once(base_model, parts.labeled, None, parts.val_sets, sup,
                      dataclasses.replace(spec.train, seed=spec.seed), spec.augment,
                      sink, run_id + "-step1")
        finally:
            sink.close()
        model_mod.save(base_model, step1_dir / "model.ckpt", seed=spec.seed)
        base_meta = {"base": "step1 (trained)"}
    base_acc = evaluate(base_model, parts.val_sets["full"])["top1"]

    labeled_arr = parts.labeled.images if hasattr(parts.labeled, "images") else parts.labeled.points
    unl_arr = parts.unlabeled.images if hasattr(parts.unlabeled, "images") else parts.unlabeled.points
    pseudo = pseudo_label(base_model, unl_arr, spec.threshold, spec.averaging)
    combined_images = np.concatenate([labeled_arr, pseudo.images[pseudo.kept]])
    combined_labels = np.concatenate([parts.labeled.labels, pseudo.labels[pseudo.kept]])
    if isinstance(dataset, PointDataset):
        combined = PointDataset(combined_images, combined_labels, dataset.class_count, "pseudo")
    else:
        combined = ImageDataset(combined_images, combined_labels, dataset.class_count, "pseudo")

    # step 2: fresh initialization, standard supervised recipe on the
    # enlarged set
    retrain_cfg = dataclasses.replace(spec.resolve().retrain, seed=spec.seed + 1)
    step2_model = _build_model(dataset, spec.seed + 1, spec.width)
    sink = JsonlSink(out_dir / "metrics.jsonl")
    try:
        sup = dataclasses.replace(spec.loss, w_rot=0, w_exemplar=0, w_vat=0, w_entmin=0)
        _fit_once(step2_model, combined, None, parts.val_sets, sup, retrain_cfg,
                  spec.augment, sink, run_id)
    finally:
        sink.close()
    extra = {
        "step_final": {"base": base_acc},
        "lineage": {**base_meta, "step2": "fresh initialization",
                    "kept": int(pseudo.kept.sum()), "pool": int(len(pseudo.kept))},
    }
    hyper = _hyper(spec, {"threshold": spec.threshold, "base_top1": base_acc})
    return _emit_artifacts(out_dir, spec, run_id, step2_model, parts.val_sets, hyper, extra)


def run_mix(dataset, spec: RunSpec, out_dir: Path) -> RunRecord:
    """Three steps: (1) joint rotation+VAT+EntMin training with Polyak
    averaging; (2) pseudo-label the full training set with 5-crop x
    4-rotation averaging and retrain with all losses from the step-1
    weights, epochs now counted on the full set; (3) fine-tune on the
    original labels with a small learning rate and large weight decay.
    Each step checkpoints independently, so a partial run resumes."""
    spec = spec.resolve()
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = split_data(dataset, spec.split)
    run_id = f"mix-s{spec.seed}-{spec.digest()[:8]}"
    step_final: dict[str, float] = {}

    unl_arr = parts.unlabeled.images
    loss1 = _resolve_vat_eps(spec.loss, unl_arr, spec.seed)

    # ---- step 1: joint losses + Polyak
    s1_ckpt = out_dir / "step1.ckpt"
    if s1_ckpt.exists():
        model1, _ = model_mod.load(s1_ckpt)
        with open(out_dir / "step1.json") as fh:
            step_final["step1"] = json.load(fh)["top1"]
    else:
        mdl = _build_model(dataset, spec.seed, spec.width)
        sink = JsonlSink(out_dir / "metrics_step1.jsonl")
        try:
            res = _fit_once(mdl, parts.labeled, parts.unlabeled, parts.val_sets,
                            loss1, dataclasses.replace(spec.train, seed=spec.seed),
                            spec.augment, sink, run_id + "-step1")
        finally:
            sink.close()
        model1 = res.averaged if res.averaged is not None else res.model
        model_mod.save(model1, s1_ckpt, seed=spec.seed)
        step_final["step1"] = evaluate(model1, parts.val_sets["full"])["top1"]
        with open(out_dir / "step1.json", "w") as fh:
            json.dump({"top1": step_final["step1"]}, fh)

    # ---- step 2: retrain with all losses on the pseudo-labeled full set
    s2_ckpt = out_dir / "step2.ckpt"
    if s2_ckpt.exists():
        model2, _ = model_mod.load(s2_ckpt)
        with open(out_dir / "step2.json") as fh:
            step_final["step2"] = json.load(fh)["top1"]
    else:
        full_images = np.concatenate([parts.labeled.images, parts.unlabeled.images])
        pseudo = pseudo_label(model1, full_images, threshold=None, averaging=spec.averaging)
        pseudo_ds = ImageDataset(full_images, pseudo.labels, dataset.class_count, "pseudo")
        from .data import save_dataset
        save_dataset(pseudo_ds, out_dir / "pseudo.bin")
        np.asarray(pseudo.confidences, dtype="<f4").tofile(out_dir / "pseudo_conf.bin")
        model2 = model1.clone()
        sink = JsonlSink(out_dir / "metrics_step2.jsonl")
        try:
            res = _fit_once(model2, pseudo_ds, parts.unlabeled, parts.val_sets, loss1,
                            dataclasses.replace(spec.step2, seed=spec.seed + 1),
                            spec.augment, sink, run_id + "-step2")
        finally:
            sink.close()
        model2 = res.averaged if res.averaged is not None else res.model
        model_mod.save(model2, s2_ckpt, seed=spec.seed)
        step_final["step2"] = evaluate(model2, parts.val_sets["full"])["top1"]
        with open(out_dir / "step2.json", "w") as fh:
            json.dump({"top1": step_final["step2"]}, fh)

    # ---- step 3: fine-tune on the original labels only
    model3 = model2.clone()
    sink = JsonlSink(out_dir / "metrics.jsonl")
    try:
        sup = dataclasses.replace(spec.loss, w_rot=0, w_exemplar=0, w_vat=0, w_entmin=0,
                                  w_sup=1.0)
        _fit_once(model3, parts.labeled, None, parts.val_sets, sup,
                  dataclasses.replace(spec.step3, seed=spec.seed + 2), spec.augment,
                  sink, run_id + "-step3")
    finally:
        sink.close()
    model_mod.save(model3, out_dir / "step3.ckpt", seed=spec.seed)
    step_final["step3"] = evaluate(model3, parts.val_sets["full"])["top1"]

    extra = {"step_final": step_final,
             "loss_weights": {"w_sup": spec.loss.w_sup, "w_rot": spec.loss.w_rot,
                              "w_vat": spec.loss.w_vat, "w_entmin": spec.loss.w_entmin}}
    hyper = _hyper(spec, {"vat_eps": loss1.vat_eps})
    return _emit_artifacts(out_dir, spec, run_id, model3, parts.val_sets, hyper, extra)


PIPELINE_RUNNERS = {
    "supervised": run_supervised,
    "rotation": run_selfsup,
    "exemplar": run_selfsup,
    "rotation_selfsup": run_selfsup,
    "vat": run_vat,
    "vat_entmin": run_vat,
    "pseudo_label": run_pseudo_label,
    "mix": run_mix,
}


def run(spec: RunSpec, out_dir=None, dataset=None) -> RunRecord:
    spec = spec.resolve()
    if dataset is None:
        dataset = spec.dataset.load()
    if out_dir is None:
        out_dir = runs_root() / f"{spec.pipeline}-s{spec.seed}-{spec.digest()[:8]}"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return PIPELINE_RUNNERS[spec.pipeline](dataset, spec, out_dir)


# -------------------------------------------------------------- linear probe

@dataclass
class ProbeConfig:
    epochs: int = 40
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch: int = 256
    warmup_epochs: float = 1.0
    seed: int = 0


def linear_probe(mdl, train_ds, val_ds, cfg: ProbeConfig = ProbeConfig()) -> dict:
    """Train a linear classifier on frozen pre-logits features.

    Features are extracted once; the backbone is never touched (asserted
    bitwise).  Records the per-epoch accuracy curve and the first epoch
    within one accuracy point of the final value.
    """
    from . import autodiff as ad
    from .losses import supervised_ce
    from .train import SgdMomentum, lr_at

    before = {n: t.data.copy() for n, t in mdl.params.items()}
    z_train = _embed_all(mdl, train_ds)
    z_val = _embed_all(mdl, val_ds)
    k = train_ds.class_count
    rng = np.random.default_rng(cfg.seed)
    w = ad.Tensor(rng.normal(0, 0.01, size=(z_train.shape[1], k)))
    b = ad.Tensor(np.zeros(k))
    params = {"w": w, "b": b}
    opt = SgdMomentum(params, cfg.momentum, cfg.weight_decay)
    sched = TrainConfig(learning_rate=cfg.learning_rate, epochs=cfg.epochs,
                        warmup_epochs=cfg.warmup_epochs)
    n = z_train.shape[0]
    spe = max(1, n // cfg.batch)
    curve = []
    step = 0
    for _epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            sel = perm[start:start + cfg.batch]
            g = ad.Graph()
            g.watch(w), g.watch(b)
            logits = ad.add(ad.matmul(ad.Tensor(z_train[sel]), w), b)
            loss = supervised_ce(logits, train_ds.labels[sel])
            grads = g.backward(loss)
            opt.step(params, {"w": grads.get(w), "b": grads.get(b)},
                     lr_at(sched, step, spe))
            step += 1
        val_logits = z_val @ w.data + b.data
        curve.append(topk_accuracy(val_logits, val_ds.labels, 1))

    for n_, t in mdl.params.items():
        if not np.array_equal(before[n_], t.data):
            raise RuntimeError("linear probe modified backbone parameters")
    final = curve[-1]
    within = next(i + 1 for i, a in enumerate(curve) if a >= final - 0.01)
    return {"curve": curve, "final_top1": final, "epochs_to_within_1pct": within,
            "backbone_frozen": True}


def _embed_all(mdl, ds, batch: int = 256) -> np.ndarray:
    arr = ds.images if hasattr(ds, "images") else ds.points
    twin = mdl.clone_detached()
    out = [twin.forward(arr[i:i + batch]).embedding.data
           for i in range(0, arr.shape[0], batch)]
    return np.concatenate(out)


# ----------------------------------------------------------- variance study

def variance_study(spec: RunSpec, out_root, n_runs: int = 9,
                   dataset=None) -> dict:
    """Re-run one pipeline with a fresh seed and a fresh labeled-subset draw
    per run; report mean and sample standard deviation of final accuracy."""
    if n_runs < 2:
        raise ValueError("need at least two runs for a standard deviation")
    spec = spec.resolve()
    if dataset is None:
        dataset = spec.dataset.load()
    out_root = Path(out_root)
    accs, seeds = [], []
    for i in range(n_runs):
        sub = dataclasses.replace(
            spec, seed=spec.seed + i,
            split=dataclasses.replace(spec.split, seed=spec.split.seed + i))
        rec = run(sub, out_root / f"var{i}", dataset=dataset)
        accs.append(rec.final_top1())
        seeds.append(sub.seed)
    accs = np.asarray(accs)
    return {
        "pipeline": spec.pipeline,
        "labeled_fraction": spec.split.labeled_fraction,
        "n_runs": n_runs,
        "seeds": seeds,
        "accs": accs.tolist(),
        "mean": float(accs.mean()),
        "std": float(accs.std(ddof=1)),
    }
