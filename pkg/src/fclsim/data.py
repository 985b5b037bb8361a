"""Image datasets, synthetic generation, the binary dataset file format,
SimCLR-style augmentation, trigger pasting and client partitioning."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .numcore import RngStream


class DataConfigError(ValueError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


MIN_SIDE = 8


@dataclass(frozen=True)
class Example:
    pixels: np.ndarray
    label: int | None = None


class Dataset:
    """A stack of C x H x W images in [0, 1] with optional integer labels."""

    def __init__(self, pixels, labels=None, n_classes: int | None = None):
        px = np.array(pixels, dtype=np.float64, copy=True)
        if px.ndim != 4:
            raise DataConfigError(f"pixels must be (n, C, H, W), got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise DataConfigError("pixel values must lie in [0, 1]")
        px.flags.writeable = False
        lab = None
        if labels is not None:
            lab = np.array(labels, dtype=np.int64, copy=True).reshape(-1)
            if lab.size != px.shape[0]:
                raise DataConfigError("label count differs from example count")
            if n_classes is None:
                n_classes = int(lab.max()) + 1 if lab.size else 0
            if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
                raise DataConfigError(f"labels must lie in [0, {n_classes})")
            lab.flags.writeable = False
        self.pixels = px
        self.labels = lab
        self.n_classes = n_classes

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])  # type: ignore[return-value]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def __getitem__(self, i: int) -> Example:
        label = None if self.labels is None else int(self.labels[i])
        return Example(self.pixels[i], label)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.pixels[idx], labels, self.n_classes)

    def of_class(self, c: int) -> "Dataset":
        if self.labels is None:
            raise DataConfigError("dataset is unlabeled")
        return self.subset(np.flatnonzero(self.labels == c))

    def unlabeled(self) -> "Dataset":
        return Dataset(self.pixels, None, None)

    def split(self, fraction: float) -> tuple["Dataset", "Dataset"]:
        """First ``fraction`` of examples and the rest (order is preserved)."""
        cut = int(round(len(self) * fraction))
        return self.subset(np.arange(cut)), self.subset(np.arange(cut, len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels)
        )
        return same_labels and np.array_equal(self.pixels, other.pixels)

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, shape={self.shape}, n_classes={self.n_classes})"


def _smooth_field(gen: np.random.Generator, shape, n_waves: int = 6) -> np.ndarray:
    c, h, w = shape
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    out = np.zeros(shape)
    for ch in range(c):
        for _ in range(n_waves):
            fy, fx = gen.integers(0, 4, size=2)
            if fy == 0 and fx == 0:
                fx = 1
            phase = gen.uniform(0, 2 * np.pi)
            out[ch] += gen.normal() * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    out -= out.mean()
    return out / (np.sqrt(np.mean(out ** 2)) + 1e-12)


def class_templates(n_classes: int, shape, class_separation: float, seed: int) -> np.ndarray:
    """One low-frequency image per class, about ``class_separation`` apart in L2."""
    gen = RngStream(seed, 0x7E3).generator()
    d = int(np.prod(shape))
    amp = class_separation / math.sqrt(2.0 * d)
    return np.stack([0.5 + amp * _smooth_field(gen, shape) for _ in range(n_classes)])


def generate_synthetic(
    n_classes: int,
    n_per_class: int,
    shape=(3, 16, 16),
    class_separation: float = 8.0,
    noise: float = 0.1,
    seed: int = 0,
    template_seed: int | None = None,
) -> Dataset:
    """Labeled dataset of noisy copies of per-class smooth templates.

    ``template_seed`` fixes the class templates independently of the sample
    noise, so several datasets can share one visual "world".
    """
    if n_classes < 2:
        raise DataConfigError("n_classes must be >= 2")
    if class_separation <= 0:
        raise DataConfigError("class_separation must be positive")
    if noise < 0:
        raise DataConfigError("noise must be >= 0")
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape[1:]) < MIN_SIDE:
        raise DataConfigError(f"image shape {shape} too small to host a trigger (min {MIN_SIDE}x{MIN_SIDE})")
    templates = class_templates(n_classes, shape, class_separation,
                                seed if template_seed is None else template_seed)
    gen = RngStream(seed, 0xDA7A).generator()
    labels = np.repeat(np.arange(n_classes), n_per_class)
    pixels = templates[labels] + noise * gen.standard_normal((labels.size, *shape))
    order = gen.permutation(labels.size)
    return Dataset(np.clip(pixels[order], 0.0, 1.0), labels[order], n_classes)


# binary file format ---------------------------------------------------------

MAGIC = b"FCLD"
VERSION = 1
_HEADER = struct.Struct("<4sHIBHHB")
_MAX_PIXEL_BYTES = 1 << 34


def quantize(ds: Dataset) -> Dataset:
    """Round pixels to the u8 grid used by the file format."""
    return Dataset(np.round(ds.pixels * 255.0) / 255.0, ds.labels, ds.n_classes)


def save_dataset(ds: Dataset, path) -> None:
    n = len(ds)
    c, h, w = ds.shape
    if c > 0xFF or h > 0xFFFF or w > 0xFFFF:
        raise DataConfigError(f"shape {ds.shape} does not fit the file header")
    if ds.labels is not None and (ds.n_classes or 0) > 0xFFFF:
        raise DataConfigError("labels do not fit in u16")
    header = _HEADER.pack(MAGIC, VERSION, n, c, h, w, int(ds.labels is not None))
    body = np.round(ds.pixels * 255.0).astype(np.uint8).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)
        if ds.labels is not None:
            fh.write(ds.labels.astype("<u2").tobytes())


def parse_dataset(raw: bytes) -> Dataset:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise DatasetParseError("bad magic", 0)
    if len(raw) < _HEADER.size:
        raise DatasetParseError("truncated header", len(raw))
    _, version, n, c, h, w, has_labels = _HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise DatasetParseError(f"unsupported version {version}", 4)
    if c == 0 or h == 0 or w == 0:
        raise DatasetParseError(f"degenerate shape {(c, h, w)}", 10)
    if has_labels not in (0, 1):
        raise DatasetParseError(f"has_labels flag must be 0 or 1, got {has_labels}", 15)
    n_pix = n * c * h * w
    if n_pix > _MAX_PIXEL_BYTES:
        raise DatasetParseError(f"shape overflow: {n} x {c}x{h}x{w} pixels", 6)
    pos = _HEADER.size
    end = pos + n_pix
    if len(raw) < end:
        got = (len(raw) - pos) // (c * h * w)
        raise DatasetParseError(f"truncated pixel data: header declares {n} examples, body holds {got}", len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n_pix, offset=pos).reshape(n, c, h, w) / 255.0
    labels = None
    if has_labels:
        lab_end = end + 2 * n
        if len(raw) < lab_end:
            raise DatasetParseError(f"truncated labels: expected {n}, found {(len(raw) - end) // 2}", len(raw))
        labels = np.frombuffer(raw, dtype="<u2", count=n, offset=end).astype(np.int64)
        end = lab_end
    if len(raw) != end:
        raise DatasetParseError(f"{len(raw) - end} trailing bytes", end)
    return Dataset(pixels, labels)


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


# augmentation ---------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    """Enabled transforms; the default instance applies nothing."""

    crop_scale: tuple[float, float] | None = None
    flip: bool = False
    noise_sigma: float = 0.0
    brightness: float = 0.0

    @classmethod
    def simclr(cls) -> "AugmentPolicy":
        return cls(crop_scale=(0.5, 1.0), flip=True, noise_sigma=0.03, brightness=0.2)

    @property
    def empty(self) -> bool:
        return self.crop_scale is None and not self.flip and self.noise_sigma == 0 and self.brightness == 0


def _crop_resize(px: np.ndarray, gen: np.random.Generator, scale) -> np.ndarray:
    b, c, h, w = px.shape
    area = gen.uniform(scale[0], scale[1], size=b) * h * w
    ratio = np.exp(gen.uniform(math.log(3 / 4), math.log(4 / 3), size=b))
    ch = np.clip(np.sqrt(area / ratio), 1.0, h)
    cw = np.clip(np.sqrt(area * ratio), 1.0, w)
    top = gen.uniform(0, 1, size=b) * (h - ch)
    left = gen.uniform(0, 1, size=b) * (w - cw)
    ys = top[:, None] + (np.arange(h) + 0.5)[None, :] * (ch / h)[:, None] - 0.5
    xs = left[:, None] + (np.arange(w) + 0.5)[None, :] * (cw / w)[:, None] - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, :, None]
    wx = (xs - x0)[:, None, None, :]
    bi = np.arange(b)[:, None, None]

    def gather(yi, xi):
        # -> (b, c, h, w)
        return px[bi, :, yi[:, :, None], xi[:, None, :]].transpose(0, 3, 1, 2)

    top_row = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom_row = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top_row * (1 - wy) + bottom_row * wy


def augment_batch(pixels: np.ndarray, gen: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    """Augment a (b, C, H, W) stack; transforms run in a fixed order."""
    out = np.asarray(pixels, dtype=np.float64)
    if policy.empty:
        return out.copy()
    b = out.shape[0]
    if policy.crop_scale is not None:
        out = _crop_resize(out, gen, policy.crop_scale)
    if policy.flip:
        mask = gen.random(b) < 0.5
        out = np.where(mask[:, None, None, None], out[..., ::-1], out)
    if policy.noise_sigma > 0:
        out = out + policy.noise_sigma * gen.standard_normal(out.shape)
    if policy.brightness > 0:
        out = out * (1.0 + gen.uniform(-policy.brightness, policy.brightness, size=out.shape[:2]))[:, :, None, None]
    return np.clip(out, 0.0, 1.0)


def augment(x: Example, rng: RngStream, policy: AugmentPolicy) -> Example:
    out = augment_batch(x.pixels[None], rng.generator(), policy)[0]
    return Example(out, x.label)


# triggers -------------------------------------------------------------------

@dataclass(frozen=True)
class Trigger:
    patch: np.ndarray
    position: tuple[int, int]
    id: int = 0

    def check_fits(self, shape) -> None:
        c, h, w = shape
        pc, ph, pw = self.patch.shape
        r, col = self.position
        if pc not in (1, c):
            raise DataConfigError(f"trigger has {pc} channels, image has {c}")
        if r < 0 or col < 0 or r + ph > h or col + pw > w:
            raise DataConfigError(
                f"trigger {ph}x{pw} at {self.position} does not fit a {h}x{w} image")


CORNERS = ("bottom_right", "top_left", "top_right", "bottom_left")


def default_trigger(shape, id: int = 0, corner: str = "bottom_right", side: int | None = None) -> Trigger:
    """White square of side ceil(min(H, W) / 8) in the given corner."""
    c, h, w = shape
    s = side or math.ceil(min(h, w) / 8)
    rows = {"top": 0, "bottom": h - s}
    cols = {"left": 0, "right": w - s}
    try:
        vert, horiz = corner.split("_")
        pos = (rows[vert], cols[horiz])
    except (ValueError, KeyError):
        raise DataConfigError(f"unknown trigger corner {corner!r}") from None
    trig = Trigger(np.ones((c, s, s)), pos, id)
    trig.check_fits(shape)
    return trig


def embed_trigger_pixels(pixels: np.ndarray, e: Trigger) -> np.ndarray:
    """Paste ``e`` onto one image (C, H, W) or a stack (..., C, H, W)."""
    e.check_fits(pixels.shape[-3:])
    out = np.array(pixels, dtype=np.float64, copy=True)
    r, c = e.position
    _, ph, pw = e.patch.shape
    out[..., r:r + ph, c:c + pw] = e.patch
    return out


def embed_trigger(x: Example, e: Trigger) -> Example:
    return Example(embed_trigger_pixels(x.pixels, e), x.label)


def embed_trigger_dataset(ds: Dataset, e: Trigger) -> Dataset:
    return Dataset(embed_trigger_pixels(ds.pixels, e), ds.labels, ds.n_classes)


# partitioning ---------------------------------------------------------------

@dataclass(frozen=True)
class PartitionMode:
    kind: str = "iid"
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in ("iid", "dirichlet"):
            raise DataConfigError(f"unknown partition mode {self.kind!r}")
        if self.kind == "dirichlet" and self.alpha <= 0:
            raise DataConfigError("dirichlet alpha must be positive")


Partition = Mapping[int, np.ndarray]


def partition(ds: Dataset, n_clients: int, mode: PartitionMode | str = "iid", seed: int = 0) -> dict[int, np.ndarray]:
    """Split example indices of ``ds`` across ``n_clients`` disjoint, non-empty shards."""
    if isinstance(mode, str):
        mode = PartitionMode(mode)
    if n_clients < 1:
        raise DataConfigError("n_clients must be >= 1")
    if len(ds) < n_clients:
        raise DataConfigError(f"{len(ds)} examples cannot fill {n_clients} non-empty shards")
    gen = RngStream(seed, 0x9A27).generator()
    if mode.kind == "iid":
        perm = gen.permutation(len(ds))
        return {i: np.sort(part) for i, part in enumerate(np.array_split(perm, n_clients))}

    if ds.labels is None:
        raise DataConfigError("dirichlet partitioning needs a labeled dataset")
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.n_classes or 0)]
    for _ in range(100):
        shards: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for idx in by_class:
            if idx.size == 0:
                continue
            idx = gen.permutation(idx)
            props = gen.dirichlet(np.full(n_clients, mode.alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
            for client, part in enumerate(np.split(idx, cuts)):
                shards[client].append(part)
        parts = {i: np.sort(np.concatenate(s)) for i, s in enumerate(shards)}
        if all(p.size > 0 for p in parts.values()):
            return parts
    raise DataConfigError(
        f"could not draw a dirichlet(alpha={mode.alpha}) split with no empty client after 100 attempts")
