"""Small convolutional classifier with a shared backbone and two heads.

The backbone is fixed: conv3x3(16w) -> relu -> conv3x3(32w, /2) -> relu ->
conv3x3(64w, /2) -> relu -> conv3x3(64w, /2) -> relu -> global average pool.
The pooled vector is the pre-logits embedding used by the exemplar loss and
by linear probes; the class head and the 4-way rotation head both read it.

Also provides a tiny MLP with the same output contract for 2-D point
benchmarks, and a binary checkpoint container (see docs in README).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"SEMISUP-CKPT-1\n"

# (channel multiplier base, stride) per backbone stage
STAGE_PLAN = ((16, 1), (32, 2), (64, 2), (64, 2))
SUPPORTED_WIDTHS = (1, 2, 4)
ROTATION_CLASSES = 4


@dataclass
class Outputs:
    class_logits: ad.Tensor
    rot_logits: ad.Tensor | None
    embedding: ad.Tensor


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _he_normal(rng, shape, fan_in, dtype):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class ConvNet:
    def __init__(self, config: dict, params: dict[str, ad.Tensor]):
        self.config = dict(config)
        self.params = params

    # ------------------------------------------------------------- creation

    @classmethod
    def init(cls, seed: int, in_channels: int, class_count: int, width: int = 1,
             dtype=np.float32) -> "ConvNet":
        if class_count < 2:
            raise ValueError("class_count must be >= 2")
        if width not in SUPPORTED_WIDTHS:
            raise ValueError(f"unsupported width multiplier {width}; pick one of {SUPPORTED_WIDTHS}")
        rng = np.random.default_rng(seed)
        dtype = np.dtype(dtype)
        params: dict[str, ad.Tensor] = {}
        c_in = in_channels
        for i, (base, _stride) in enumerate(STAGE_PLAN, start=1):
            c_out = base * width
            fan_in = c_in * 9
            params[f"conv{i}.w"] = ad.Tensor(_he_normal(rng, (c_out, c_in, 3, 3), fan_in, dtype))
            params[f"conv{i}.b"] = ad.Tensor(np.zeros((c_out, 1, 1), dtype=dtype))
            c_in = c_out
        embed = STAGE_PLAN[-1][0] * width
        params["head_class.w"] = ad.Tensor(_he_normal(rng, (embed, class_count), embed, dtype))
        params["head_class.b"] = ad.Tensor(np.zeros((class_count,), dtype=dtype))
        params["head_rot.w"] = ad.Tensor(_he_normal(rng, (embed, ROTATION_CLASSES), embed, dtype))
        params["head_rot.b"] = ad.Tensor(np.zeros((ROTATION_CLASSES,), dtype=dtype))
        config = {
            "model": "convnet",
            "in_channels": int(in_channels),
            "class_count": int(class_count),
            "width": int(width),
            "dtype": dtype.name,
        }
        return cls(config, params)

    @property
    def class_count(self) -> int:
        return self.config["class_count"]

    @property
    def embed_dim(self) -> int:
        return STAGE_PLAN[-1][0] * self.config["width"]

    @property
    def dtype(self):
        return np.dtype(self.config["dtype"])

    # -------------------------------------------------------------- forward

    def forward(self, x) -> Outputs:
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4:
            raise ValueError("expected an N,C,H,W batch")
        if x.shape[2] < 8 or x.shape[3] < 8:
            raise ValueError("spatial extent too small for the three stride-2 stages")
        h = x
        for i, (_base, stride) in enumerate(STAGE_PLAN, start=1):
            h = ad.conv2d(h, self.params[f"conv{i}.w"], stride=stride, padding=1)
            h = ad.add(h, self.params[f"conv{i}.b"])
            h = ad.relu(h)
        embedding = ad.global_avg_pool(h)
        class_logits = ad.add(ad.matmul(embedding, self.params["head_class.w"]),
                              self.params["head_class.b"])
        rot_logits = ad.add(ad.matmul(embedding, self.params["head_rot.w"]),
                            self.params["head_rot.b"])
        return Outputs(class_logits=class_logits, rot_logits=rot_logits, embedding=embedding)

    def embed(self, x) -> np.ndarray:
        """Detached pre-logits embedding for frozen-feature consumers."""
        return self.forward(x).embedding.data

    # ------------------------------------------------------------- plumbing

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def set_param_arrays(self, arrays: dict[str, np.ndarray]):
        for name, arr in arrays.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter name {name!r}")
            t = self.params[name]
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            t.data = arr.astype(t.data.dtype, copy=True)

    def clone(self) -> "ConvNet":
        return type(self)(self.config, {n: ad.Tensor(t.data.copy()) for n, t in self.params.items()})

    def clone_detached(self) -> "ConvNet":
        """Twin sharing the parameter arrays through fresh, unattached tensors.

        Lets a side computation (e.g. the VAT power iteration) run forward
        passes as constants while the real parameters are watched on the
        main step graph.
        """
        return type(self)(self.config, {n: ad.Tensor(t.data) for n, t in self.params.items()})

    def digest(self) -> str:
        return config_digest(self.config)


class MlpNet(ConvNet):
    """Fully-connected classifier for low-dimensional point data.

    Shares the trainer-facing contract of ConvNet (params / forward /
    clone), with the last hidden layer standing in for the pre-logits
    embedding.  It has no rotation head: rotation pretext tasks are
    image-specific.
    """

    @classmethod
    def init(cls, seed: int, in_dim: int, class_count: int, hidden=(128, 128),
             dtype=np.float64) -> "MlpNet":
        if class_count < 2:
            raise ValueError("class_count must be >= 2")
        rng = np.random.default_rng(seed)
        dtype = np.dtype(dtype)
        params: dict[str, ad.Tensor] = {}
        d_in = in_dim
        for i, h in enumerate(hidden, start=1):
            params[f"fc{i}.w"] = ad.Tensor(_he_normal(rng, (d_in, h), d_in, dtype))
            params[f"fc{i}.b"] = ad.Tensor(np.zeros((h,), dtype=dtype))
            d_in = h
        params["head_class.w"] = ad.Tensor(_he_normal(rng, (d_in, class_count), d_in, dtype))
        params["head_class.b"] = ad.Tensor(np.zeros((class_count,), dtype=dtype))
        config = {
            "model": "mlp",
            "in_dim": int(in_dim),
            "class_count": int(class_count),
            "hidden": [int(h) for h in hidden],
            "dtype": dtype.name,
        }
        return cls(config, params)

    @property
    def embed_dim(self) -> int:
        return self.config["hidden"][-1]

    def forward(self, x) -> Outputs:
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 2:
            raise ValueError("expected an N,D batch of points")
        h = x
        for i in range(1, len(self.config["hidden"]) + 1):
            h = ad.add(ad.matmul(h, self.params[f"fc{i}.w"]), self.params[f"fc{i}.b"])
            h = ad.relu(h)
        class_logits = ad.add(ad.matmul(h, self.params["head_class.w"]),
                              self.params["head_class.b"])
        return Outputs(class_logits=class_logits, rot_logits=None, embedding=h)


def build(config: dict) -> ConvNet:
    """Reconstruct a freshly-initialized model from a stored config."""
    kind = config.get("model")
    if kind == "convnet":
        return ConvNet.init(0, config["in_channels"], config["class_count"],
                            config["width"], np.dtype(config["dtype"]))
    if kind == "mlp":
        return MlpNet.init(0, config["in_dim"], config["class_count"],
                           tuple(config["hidden"]), np.dtype(config["dtype"]))
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------- checkpoints

def save(model: ConvNet, path, step: int = 0, seed: int = 0):
    """Write the checkpoint container: text manifest + raw little-endian arrays."""
    arrays = model.param_arrays()
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = arrays[name]
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": 1,
        "step": int(step),
        "seed": int(seed),
        "config": model.config,
        "digest": model.digest(),
        "arrays": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        for raw in blobs:
            fh.write(raw)


def load(path, expected_config: dict | None = None) -> tuple[ConvNet, dict]:
    """Read a checkpoint; returns (model, manifest).

    Rejects digests that do not match the stored config, names the model
    does not declare, and (optionally) a config differing from
    expected_config.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(mlen).decode())
        data = fh.read()
    config = manifest["config"]
    if manifest["digest"] != config_digest(config):
        raise ValueError(f"{path}: config digest mismatch; file corrupt or config edited")
    if expected_config is not None and config != expected_config:
        diff = {k for k in set(config) | set(expected_config)
                if config.get(k) != expected_config.get(k)}
        raise ValueError(f"{path}: checkpoint config differs from expected on {sorted(diff)}")
    mdl = build(config)
    known = set(mdl.params)
    arrays = {}
    for ent in manifest["arrays"]:
        if ent["name"] not in known:
            raise ValueError(f"{path}: unknown parameter name {ent['name']!r}")
        dt = np.dtype(ent["dtype"]).newbyteorder("<")
        arr = np.frombuffer(data, dtype=dt, count=int(np.prod(ent["shape"], dtype=np.int64)),
                            offset=ent["offset"]).reshape(ent["shape"])
        arrays[ent["name"]] = arr.astype(ent["dtype"])
    missing = known - set(arrays)
    if missing:
        raise ValueError(f"{path}: checkpoint is missing parameters {sorted(missing)}")
    mdl.set_param_arrays(arrays)
    return mdl, manifest
