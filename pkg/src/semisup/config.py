"""Config files: one YAML document per run, sections mirroring the runtime
dataclasses.  Unknown keys are rejected with their full key path, defaults
are expanded, and every run directory stores the fully-resolved config so
hyperparameter provenance is exact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

import yaml

from .data import SplitSpec, load_dataset, two_moons
from .losses import LossSpec
from .train import TrainConfig
from . import synth


class ConfigError(ValueError):
    pass


PIPELINES = ("supervised", "rotation", "exemplar", "vat", "vat_entmin",
             "pseudo_label", "mix", "rotation_selfsup")

# per-pipeline loss-weight operating points; user keys override
PIPELINE_LOSS_DEFAULTS = {
    "supervised": {"w_sup": 1.0},
    "rotation": {"w_sup": 1.0, "w_rot": 1.0},
    "exemplar": {"w_sup": 1.0, "w_exemplar": 1.0},
    "vat": {"w_sup": 1.0, "w_vat": 1.0},
    "vat_entmin": {"w_sup": 1.0, "w_vat": 1.0, "w_entmin": 0.3},
    "pseudo_label": {"w_sup": 1.0},
    "mix": {"w_sup": 0.3, "w_rot": 0.7, "w_vat": 0.3, "w_entmin": 0.3},
    "rotation_selfsup": {"w_sup": 0.0, "w_rot": 1.0},
}

ENTMIN_WEIGHT_GRID = (0.0, 0.03, 0.1, 0.3, 1.0)


@dataclass(frozen=True)
class DatasetConfig:
    path: str | None = None
    synthetic: dict | None = None

    def validate(self):
        if (self.path is None) == (self.synthetic is None):
            raise ConfigError("dataset: set exactly one of 'path' or 'synthetic'")
        if self.synthetic is not None:
            kind = self.synthetic.get("kind")
            if kind not in (*synth.SYNTH_KINDS, "two_moons"):
                raise ConfigError(f"dataset.synthetic.kind: unknown kind {kind!r}")
        return self

    def load(self):
        self.validate()
        if self.path is not None:
            return load_dataset(self.path)
        params = dict(self.synthetic)
        kind = params.pop("kind")
        if kind == "two_moons":
            return two_moons(params.pop("n"), params.pop("noise", 0.08),
                             params.pop("seed", 0))
        return synth.make(kind, **params)


def _build(cls, payload: dict, path: str):
    """Instantiate a dataclass from a mapping, rejecting unknown keys."""
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name for f in fields(cls)}
    for key in payload:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
    coerced = {}
    for f in fields(cls):
        if f.name not in payload:
            continue
        v = payload[f.name]
        if isinstance(v, list):
            v = tuple(v)
        coerced[f.name] = v
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from err


def _scaled_schedule(base: TrainConfig, epochs: int, decay_fracs=None) -> TrainConfig:
    """A derived schedule with the same shape at a different epoch budget."""
    if decay_fracs is None:
        scale = epochs / max(base.epochs, 1)
        decays = tuple(sorted({max(1, round(d * scale)) for d in base.decay_epochs}))
    else:
        decays = tuple(sorted({max(1, round(epochs * f)) for f in decay_fracs}))
    decays = tuple(d for d in decays if d < epochs)
    return dataclasses.replace(
        base, epochs=epochs, decay_epochs=decays,
        warmup_epochs=min(base.warmup_epochs, epochs / 6),
    )


@dataclass
class RunSpec:
    """Everything one run needs; the unit the CLI validates and stores."""

    pipeline: str
    dataset: DatasetConfig
    split: SplitSpec = field(default_factory=SplitSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    retrain: TrainConfig | None = None   # pseudo-label step 2
    step2: TrainConfig | None = None     # mix step 2
    step3: TrainConfig | None = None     # mix step 3
    averaging: str = "single"            # single | rot4 | crop5rot4
    threshold: float | None = None       # pseudo-label confidence filter
    augment: str = "standard"            # standard | none
    width: int = 1                       # model width multiplier
    seed: int = 0
    seeds: tuple = ()                    # used by variance studies

    def validate(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline: unknown kind {self.pipeline!r}; have {PIPELINES}")
        if self.averaging not in ("single", "rot4", "crop5rot4"):
            raise ConfigError(f"averaging: unknown mode {self.averaging!r}")
        if self.augment not in ("standard", "none"):
            raise ConfigError(f"augment: unknown mode {self.augment!r}")
        self.dataset.validate()
        self.loss.validate()
        self.train.validate()
        for name in ("retrain", "step2", "step3"):
            sub = getattr(self, name)
            if sub is not None:
                sub.validate()
        return self

    def resolve(self) -> "RunSpec":
        """Materialize derived sections so the stored config is explicit."""
        out = dataclasses.replace(self)
        if out.pipeline == "pseudo_label" and out.retrain is None:
            out.retrain = _scaled_schedule(out.train, max(2, out.train.epochs // 2))
        if out.pipeline == "mix":
            if out.train.polyak_half_life_epochs is None:
                out.train = dataclasses.replace(out.train, polyak_half_life_epochs=1.0)
            if out.step2 is None:
                out.step2 = _scaled_schedule(out.train, max(3, round(out.train.epochs / 5)),
                                             decay_fracs=(1 / 3, 2 / 3))
            if out.step3 is None:
                ep3 = max(2, round(out.train.epochs / 6))
                out.step3 = dataclasses.replace(
                    _scaled_schedule(out.train, ep3, decay_fracs=(0.25, 0.5, 0.75)),
                    learning_rate=out.train.learning_rate * 5e-3,
                    weight_decay=3e-3,
                    warmup_epochs=0.0,
                    polyak_half_life_epochs=None,
                )
            if out.averaging == "single":
                out.averaging = "crop5rot4"
        return out.validate()

    def to_dict(self) -> dict:
        def conv(obj):
            if dataclasses.is_dataclass(obj):
                return {k: conv(v) for k, v in dataclasses.asdict(obj).items()}
            if isinstance(obj, tuple):
                return [conv(v) for v in obj]
            if isinstance(obj, dict):
                return {k: conv(v) for k, v in obj.items()}
            return obj
        return conv(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def from_dict(payload: dict) -> RunSpec:
    if not isinstance(payload, dict):
        raise ConfigError("config root: expected a mapping")
    known = {f.name for f in fields(RunSpec)} | {"sweep"}
    for key in payload:
        if key not in known:
            raise ConfigError(f"{key}: unknown key")
    if "pipeline" not in payload:
        raise ConfigError("pipeline: required")
    if "dataset" not in payload:
        raise ConfigError("dataset: required")
    pipeline = payload["pipeline"]

    loss_payload = dict(payload.get("loss") or {})
    for k, v in PIPELINE_LOSS_DEFAULTS.get(pipeline, {}).items():
        loss_payload.setdefault(k, v)

    spec = RunSpec(
        pipeline=pipeline,
        dataset=_build(DatasetConfig, payload["dataset"], "dataset"),
        split=_build(SplitSpec, payload.get("split"), "split"),
        loss=_build(LossSpec, loss_payload, "loss"),
        train=_build(TrainConfig, payload.get("train"), "train"),
        retrain=_build(TrainConfig, payload["retrain"], "retrain") if payload.get("retrain") else None,
        step2=_build(TrainConfig, payload["step2"], "step2") if payload.get("step2") else None,
        step3=_build(TrainConfig, payload["step3"], "step3") if payload.get("step3") else None,
        averaging=payload.get("averaging", "single"),
        threshold=payload.get("threshold"),
        augment=payload.get("augment", "standard"),
        width=payload.get("width", 1),
        seed=payload.get("seed", 0),
        seeds=tuple(payload.get("seeds", ())),
    )
    return spec.validate()


def sweep_grid(payload: dict) -> dict:
    """The declared hyperparameter grid: dotted config keys -> value lists."""
    sweep = payload.get("sweep")
    if not sweep:
        raise ConfigError("sweep: section required for the sweep command")
    if set(sweep) - {"grid"}:
        raise ConfigError(f"sweep.{sorted(set(sweep) - {'grid'})[0]}: unknown key")
    grid = sweep.get("grid")
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("sweep.grid: expected a non-empty mapping of key -> list")
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.grid.{key}: expected a non-empty list")
    return grid


def apply_overrides(payload: dict, overrides: dict) -> dict:
    """Set dotted keys (e.g. train.learning_rate) in a raw config mapping."""
    out = json.loads(json.dumps({k: v for k, v in payload.items() if k != "sweep"}))
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{dotted}: path collides with a non-mapping value")
        node[parts[-1]] = value
    return out


def load_yaml(path) -> dict:
    with open(path) as fh:
        payload = yaml.safe_load(fh)
    if payload is None:
        raise ConfigError(f"{path}: empty config")
    return payload


def dump_yaml(spec: RunSpec, path):
    with open(path, "w") as fh:
        yaml.safe_dump(spec.to_dict(), fh, sort_keys=True)


def load(path) -> RunSpec:
    return from_dict(load_yaml(path))
