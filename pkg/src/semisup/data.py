"""Datasets, deterministic label subsetting, augmentations, batch assembly.

Images are N,C,H,W float arrays in [0,1].  Epochs are defined on the
labeled set: the unlabeled stream cycles independently with its own shuffle
and keeps its cursor across epochs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

DATASET_MAGIC = b"DESKIMG\x00"
DATASET_VERSION = 1


@dataclass
class ImageDataset:
    images: np.ndarray  # N,C,H,W in [0,1]
    labels: np.ndarray  # N ints in [0,K)
    class_count: int
    split_tag: str = "all"

    def __len__(self):
        return self.images.shape[0]

    def check(self):
        n = self.images.shape[0]
        if n == 0:
            raise ValueError("empty dataset")
        if self.images.ndim != 4:
            raise ValueError("images must be N,C,H,W")
        if self.labels.shape != (n,):
            raise ValueError("labels must be one integer per image")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError("label out of range")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("pixel values must lie in [0,1]")
        return self

    def subset(self, idx, tag=None) -> "ImageDataset":
        idx = np.asarray(idx)
        return ImageDataset(self.images[idx], self.labels[idx], self.class_count,
                            tag or self.split_tag)


@dataclass
class PointDataset:
    points: np.ndarray  # N,D
    labels: np.ndarray
    class_count: int
    split_tag: str = "all"

    def __len__(self):
        return self.points.shape[0]

    def subset(self, idx, tag=None) -> "PointDataset":
        idx = np.asarray(idx)
        return PointDataset(self.points[idx], self.labels[idx], self.class_count,
                            tag or self.split_tag)


# -------------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    """Class-balanced labeled/unlabeled/validation selection.

    val_per_class examples per class are held out first as the validation
    pool; val_sizes lists the per-class subset sizes to expose ("full" means
    the whole pool, and subsets are nested).  Of the remaining training set
    of size N, round(labeled_fraction * N / K) examples per class are
    labeled; the rest are the unlabeled set.
    """

    labeled_fraction: float = 0.1
    val_sizes: tuple = ("full",)
    val_per_class: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must be in (0, 1]")


@dataclass
class Split:
    labeled: ImageDataset
    unlabeled: ImageDataset
    val_sets: dict
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray


def split(d: ImageDataset, spec: SplitSpec) -> Split:
    rng = np.random.default_rng(spec.seed)
    k = d.class_count
    by_class = [np.flatnonzero(d.labels == c) for c in range(k)]
    for c, idxs in enumerate(by_class):
        if len(idxs) == 0:
            raise ValueError(f"class {c} has no examples")

    requested = [s for s in spec.val_sizes if s != "full"]
    if any(int(s) > spec.val_per_class for s in requested):
        raise ValueError("requested validation size exceeds the validation pool")

    val_idx, train_by_class = [], []
    for idxs in by_class:
        perm = idxs[rng.permutation(len(idxs))]
        if len(perm) <= spec.val_per_class:
            raise ValueError("class too small for the requested validation pool")
        val_idx.append(perm[:spec.val_per_class])
        train_by_class.append(perm[spec.val_per_class:])

    n_train = sum(len(t) for t in train_by_class)
    per_class = int(round(spec.labeled_fraction * n_train / k))
    if per_class < 1:
        raise ValueError("labeled fraction selects no examples for some class")
    labeled_idx, unlabeled_idx = [], []
    for c, t in enumerate(train_by_class):
        if len(t) < per_class:
            raise ValueError(f"class {c} has too few examples for the labeled split")
        labeled_idx.append(t[:per_class])
        unlabeled_idx.append(t[per_class:])

    labeled_idx = np.sort(np.concatenate(labeled_idx))
    unlabeled_idx = np.sort(np.concatenate(unlabeled_idx))

    val_sets = {}
    for s in spec.val_sizes:
        if s == "full":
            sel = np.sort(np.concatenate(val_idx)) if spec.val_per_class else np.array([], int)
            val_sets["full"] = d.subset(sel, "val-full")
        else:
            sel = np.sort(np.concatenate([v[: int(s)] for v in val_idx]))
            val_sets[str(int(s))] = d.subset(sel, f"val-{int(s)}")

    return Split(
        labeled=d.subset(labeled_idx, "labeled"),
        unlabeled=d.subset(unlabeled_idx, "unlabeled"),
        val_sets=val_sets,
        labeled_idx=labeled_idx,
        unlabeled_idx=unlabeled_idx,
    )


# -------------------------------------------------------------- augmentation

def rotate90(batch: np.ndarray):
    """All four 90-degree rotations of a square batch.

    Output order is [all 0, all 90, all 180, all 270] with labels 0..3;
    the 90-degree step is counter-clockwise: out[i][j] = in[j][W-1-i].
    """
    if batch.shape[2] != batch.shape[3]:
        raise ValueError("rotate90 requires square images")
    views = [np.rot90(batch, k, axes=(2, 3)) for k in range(4)]
    out = np.ascontiguousarray(np.concatenate(views, axis=0))
    n = batch.shape[0]
    labels = np.repeat(np.arange(4), n)
    return out, labels


def hflip(batch: np.ndarray) -> np.ndarray:
    return batch[:, :, :, ::-1]


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """img: 3,H,W in [0,1] -> h,s,v channels."""
    r, g, b = img[0], img[1], img[2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(span > 0, span, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def _hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    h, s, v = img[0], img[1], img[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """img: C,h,w -> C,out_h,out_w with half-pixel-centered sampling."""
    c, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    tl = img[:, y0[:, None], x0[None, :]]
    tr = img[:, y0[:, None], x1[None, :]]
    bl = img[:, y1[:, None], x0[None, :]]
    br = img[:, y1[:, None], x1[None, :]]
    top = tl * (1 - wx) + tr * wx
    bot = bl * (1 - wx) + br * wx
    return top * (1 - wy) + bot * wy


def _sample_crop(rng, h, w, min_area=0.08, max_area=1.0, ratio=(3 / 4, 4 / 3)):
    for _ in range(10):
        area = rng.uniform(min_area, max_area) * h * w
        aspect = rng.uniform(*ratio)
        cw = int(round(math.sqrt(area * aspect)))
        ch = int(round(math.sqrt(area / aspect)))
        if 1 <= ch <= h and 1 <= cw <= w:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def exemplar_instances(batch: np.ndarray, count: int = 8, seed=None, rng=None,
                       min_area: float = 0.08):
    """Heavily augmented copies per image: random-area crop resized back,
    random mirror, HSV jitter.  Returns (count*N images grouped by source,
    group ids)."""
    if rng is None:
        rng = np.random.default_rng(seed)
    n, c, h, w = batch.shape
    out = np.empty((n * count, c, h, w), dtype=batch.dtype)
    for i in range(n):
        for j in range(count):
            top, left, ch, cw = _sample_crop(rng, h, w, min_area=min_area)
            img = batch[i, :, top:top + ch, left:left + cw]
            if (ch, cw) != (h, w):
                img = _bilinear_resize(img, h, w)
            else:
                img = img.copy()
            if rng.random() < 0.5:
                img = img[:, :, ::-1]
            dh = rng.uniform(-0.1, 0.1)
            fs = rng.uniform(0.66, 1.5)
            fv = rng.uniform(0.66, 1.5)
            if c == 3:
                hsv = _rgb_to_hsv(img)
                hsv[0] = (hsv[0] + dh) % 1.0
                hsv[1] = np.clip(hsv[1] * fs, 0.0, 1.0)
                hsv[2] = np.clip(hsv[2] * fv, 0.0, 1.0)
                img = _hsv_to_rgb(hsv)
            else:
                img = img * fv  # hue/saturation are undefined off 3-channel data
            out[i * count + j] = np.clip(img, 0.0, 1.0)
    group_ids = np.repeat(np.arange(n), count)
    return out, group_ids


def standard_augment(batch: np.ndarray, seed=None, rng=None, pad: int = 4) -> np.ndarray:
    """Reflect-pad then random crop back to size, random horizontal mirror."""
    if rng is None:
        rng = np.random.default_rng(seed)
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.empty_like(batch)
    tops = rng.integers(0, 2 * pad + 1, size=n)
    lefts = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5
    for i in range(n):
        img = padded[i, :, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out


# ------------------------------------------------------------------- batches

@dataclass(frozen=True)
class BatchPlan:
    labeled_batch: int
    unlabeled_batch: int | None = None  # default: equal sizes
    seed: int = 0

    @property
    def unlabeled_size(self) -> int:
        return self.labeled_batch if self.unlabeled_batch is None else self.unlabeled_batch


class BatchStream:
    """Yields (labeled images, labels, unlabeled images | None) per step.

    One epoch is one pass over the labeled set (final short batch kept);
    the unlabeled cursor survives epoch boundaries.
    """

    def __init__(self, labeled: ImageDataset, unlabeled: ImageDataset | None,
                 plan: BatchPlan):
        if len(labeled) == 0:
            raise ValueError("labeled set is empty")
        if plan.labeled_batch < 1:
            raise ValueError("batch size must be positive")
        self.labeled = labeled
        self.unlabeled = unlabeled if unlabeled is not None and len(unlabeled) > 0 else None
        self.plan = plan
        self._rng_l = np.random.default_rng(plan.seed)
        self._rng_u = np.random.default_rng(plan.seed + 1)
        self._uperm = None
        self._ucursor = 0

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.labeled) / self.plan.labeled_batch)

    def _next_unlabeled(self, size: int) -> np.ndarray:
        chunks = []
        need = size
        while need > 0:
            if self._uperm is None or self._ucursor >= len(self._uperm):
                self._uperm = self._rng_u.permutation(len(self.unlabeled))
                self._ucursor = 0
            take = min(need, len(self._uperm) - self._ucursor)
            chunks.append(self._uperm[self._ucursor:self._ucursor + take])
            self._ucursor += take
            need -= take
        idx = np.concatenate(chunks)
        return self.unlabeled.images[idx]

    def epoch(self):
        perm = self._rng_l.permutation(len(self.labeled))
        bs = self.plan.labeled_batch
        for start in range(0, len(perm), bs):
            sel = perm[start:start + bs]
            xl = self.labeled.images[sel]
            yl = self.labeled.labels[sel]
            xu = self._next_unlabeled(self.plan.unlabeled_size) if self.unlabeled is not None else None
            yield xl, yl, xu


# ----------------------------------------------------------------- two moons

def two_moons(n: int, noise: float, seed: int = 0) -> PointDataset:
    """Interleaved half-circles with additive normal noise; class 0 is the
    upper unit half-circle."""
    if n % 2:
        raise ValueError("n must be even")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    half = n // 2
    theta = np.linspace(0.0, np.pi, half)
    outer = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    inner = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
    pts = np.concatenate([outer, inner]).astype(np.float64)
    if noise > 0:
        pts = pts + np.random.default_rng(seed).normal(0.0, noise, size=pts.shape)
    labels = np.concatenate([np.zeros(half, np.int64), np.ones(half, np.int64)])
    return PointDataset(pts, labels, class_count=2)


# ------------------------------------------------------------- binary format

def save_dataset(d: ImageDataset, path):
    """magic, version, N C H W (u32 LE), N*C*H*W uint8 pixels, N uint8 labels."""
    n, c, h, w = d.images.shape
    if d.class_count > 256:
        raise ValueError("the on-disk format stores labels as single bytes")
    pixels = np.round(np.clip(d.images, 0, 1) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<5I", DATASET_VERSION, n, c, h, w))
        fh.write(pixels.tobytes())
        fh.write(d.labels.astype(np.uint8).tobytes())


def load_dataset(path, class_count: int | None = None) -> ImageDataset:
    with open(path, "rb") as fh:
        magic = fh.read(len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        version, n, c, h, w = struct.unpack("<5I", fh.read(20))
        if version != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        pixels = np.frombuffer(fh.read(n * c * h * w), dtype=np.uint8)
        labels = np.frombuffer(fh.read(n), dtype=np.uint8)
    images = (pixels.reshape(n, c, h, w).astype(np.float32)) / 255.0
    labels = labels.astype(np.int64)
    k = class_count if class_count is not None else int(labels.max()) + 1
    return ImageDataset(images, labels, k).check()


def convert_folder(root, out_path):
    """Ingest a class-per-subfolder layout of .npy/.png images into the
    binary dataset format.  Classes are sorted subfolder names."""
    from pathlib import Path
    root = Path(root)
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"{root}: no class subfolders")
    images, labels = [], []
    extent = None
    for ci, cdir in enumerate(classes):
        files = sorted(p for p in cdir.iterdir()
                       if p.suffix.lower() in (".npy", ".png"))
        if not files:
            raise ValueError(f"{cdir}: no images")
        for p in files:
            if p.suffix.lower() == ".npy":
                arr = np.load(p)
            else:
                from PIL import Image
                arr = np.asarray(Image.open(p))
            if arr.ndim == 2:
                arr = arr[None]
            elif arr.ndim == 3 and arr.shape[-1] in (1, 3):
                arr = np.moveaxis(arr, -1, 0)
            elif arr.ndim != 3:
                raise ValueError(f"{p}: unsupported array shape {arr.shape}")
            if arr.dtype == np.uint8:
                arr = arr.astype(np.float32) / 255.0
            else:
                arr = arr.astype(np.float32)
                if arr.max() > 1.0:
                    raise ValueError(f"{p}: float images must already be in [0,1]")
            if extent is None:
                extent = arr.shape
            elif arr.shape != extent:
                raise ValueError(f"{p}: image extent {arr.shape} differs from {extent}")
            images.append(arr)
            labels.append(ci)
    d = ImageDataset(np.stack(images), np.asarray(labels, np.int64), len(classes)).check()
    save_dataset(d, out_path)
    return d
