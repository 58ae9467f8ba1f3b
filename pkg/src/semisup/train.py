"""Optimization loop.

SGD with momentum and coupled weight decay, linear warmup followed by
step decays, optional Polyak (exponential moving average) parameter
averaging, and epoch accounting on the labeled set.  Metrics go to an
append-only sink, one self-describing record per line.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .losses import LossSpec, composite


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; silent skips hide divergence."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    epochs: int = 10
    warmup_epochs: float = 0.0
    decay_epochs: tuple = ()
    decay_factor: float = 0.1
    labeled_batch: int = 64
    unlabeled_batch: int | None = None
    polyak_half_life_epochs: float | None = None
    seed: int = 0

    def validate(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        decays = tuple(self.decay_epochs)
        if any(b <= a for a, b in zip(decays, decays[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if decays and decays[-1] >= self.epochs > 0:
            raise ValueError("decay_epochs must lie before the last epoch")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        return self


def lr_at(config: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warmup from zero, then the base rate decayed once per passed
    decay epoch."""
    if step < 0:
        raise ValueError("step must be non-negative")
    epoch = step / steps_per_epoch
    lr = config.learning_rate
    if config.warmup_epochs > 0 and epoch < config.warmup_epochs:
        lr *= epoch / config.warmup_epochs
    for d in config.decay_epochs:
        if epoch >= d:
            lr *= config.decay_factor
    return lr


class SgdMomentum:
    """velocity <- momentum*velocity + grad + weight_decay*param;
    param <- param - lr*velocity."""

    def __init__(self, params: dict, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, params: dict, grads: dict, lr: float):
        for name, t in params.items():
            g = grads.get(name)
            v = self.velocity[name]
            v *= self.momentum
            if g is not None:
                if g.shape != t.data.shape:
                    raise ValueError(f"gradient shape mismatch for {name!r}")
                v += g
            if self.weight_decay:
                v += self.weight_decay * t.data
            t.data -= lr * v


class PolyakAverager:
    """Exponential moving average of parameters.

    The per-step factor is 0.5 ** (1 / (half_life_epochs * steps_per_epoch)):
    the shadow decays by 50% towards the live parameters over each half-life.
    """

    def __init__(self, model, steps_per_epoch: int | None = None,
                 half_life_epochs: float = 1.0, factor: float | None = None):
        if factor is None:
            if steps_per_epoch is None:
                raise ValueError("need steps_per_epoch to derive the decay factor")
            factor = 0.5 ** (1.0 / (half_life_epochs * steps_per_epoch))
        if not 0 < factor < 1:
            raise ValueError("decay factor must be in (0, 1)")
        self.factor = factor
        self.shadow = {name: t.data.copy() for name, t in model.params.items()}

    def update(self, model):
        f = self.factor
        for name, t in model.params.items():
            s = self.shadow[name]
            s *= f
            s += (1.0 - f) * t.data

    def averaged_model(self, model):
        avg = model.clone()
        avg.set_param_arrays(self.shadow)
        return avg


# ------------------------------------------------------------------ metrics

class JsonlSink:
    """Append-only metrics log, one JSON record per line."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a")

    def write(self, record: dict):
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


class ListSink:
    def __init__(self):
        self.records = []

    def write(self, record: dict):
        self.records.append(record)

    def close(self):
        pass


def strip_wallclock(records):
    """Drop wall-clock fields so logs from identical runs compare equal."""
    return [{k: v for k, v in r.items() if k != "time"} for r in records]


# ----------------------------------------------------------------- inference

def predict_probs(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Softmax class probabilities from a clean single-view forward pass."""
    twin = model.clone_detached()
    out = []
    for start in range(0, images.shape[0], batch_size):
        logits = twin.forward(images[start:start + batch_size]).class_logits
        probs = np.exp(ad.log_softmax(logits).data)
        out.append(probs)
    return np.concatenate(out, axis=0)


def evaluate(model, dataset, batch_size: int = 256) -> dict:
    from .evals import topk_accuracy
    probs = predict_probs(model, dataset.images if hasattr(dataset, "images") else dataset.points,
                          batch_size)
    k = dataset.class_count
    return {
        "top1": topk_accuracy(probs, dataset.labels, 1),
        "top5": topk_accuracy(probs, dataset.labels, min(5, k)),
    }


# ----------------------------------------------------------------------- fit

@dataclass
class FitResult:
    model: object
    averaged: object | None
    history: list = field(default_factory=list)
    steps: int = 0


def fit(model, loss_spec: LossSpec, stream, config: TrainConfig, sink=None,
        val_sets: dict | None = None, run_id: str = "run") -> FitResult:
    """Run epochs * steps_per_epoch optimization steps.

    Emits one 'step' record per step (learning rate and per-term losses)
    and one 'epoch' record per epoch (validation accuracies, evaluated with
    a single central view).  Aborts on non-finite loss.
    """
    config.validate()
    loss_spec.validate()
    sink = sink or ListSink()
    rng = np.random.default_rng(config.seed)
    opt = SgdMomentum(model.params, config.momentum, config.weight_decay)
    spe = stream.steps_per_epoch
    polyak = None
    if config.polyak_half_life_epochs:
        polyak = PolyakAverager(model, steps_per_epoch=spe,
                                half_life_epochs=config.polyak_half_life_epochs)

    step = 0
    history = []
    for epoch in range(config.epochs):
        for xl, yl, xu in stream.epoch():
            lr = lr_at(config, step, spe)
            g = ad.Graph()
            res = composite(loss_spec, model, xl, yl, xu, graph=g, rng=rng)
            if not math.isfinite(res.terms["total"]):
                record = {"type": "abort", "run": run_id, "step": step, "epoch": epoch,
                          "terms": res.terms, "time": time.time()}
                sink.write(record)
                raise TrainingDiverged(f"non-finite loss at step {step}: {res.terms}")
            if res.total.graph is g:
                by_tensor = g.backward(res.total)
                grads = {name: by_tensor.get(t) for name, t in model.params.items()}
            else:
                grads = {}
            opt.step(model.params, grads, lr)
            if polyak is not None:
                polyak.update(model)
            rec = {"type": "step", "run": run_id, "step": step, "epoch": epoch,
                   "lr": lr, "time": time.time()}
            rec.update({k: v for k, v in res.terms.items()})
            sink.write(rec)
            step += 1
        eval_model = polyak.averaged_model(model) if polyak is not None else model
        val = {}
        for name, ds in (val_sets or {}).items():
            val[name] = evaluate(eval_model, ds)
        rec = {"type": "epoch", "run": run_id, "epoch": epoch, "step": step,
               "val": val, "time": time.time()}
        sink.write(rec)
        history.append(rec)

    averaged = polyak.averaged_model(model) if polyak is not None else None
    return FitResult(model=model, averaged=averaged, history=history, steps=step)
