"""Datasets, resampling and file formats.

Images are stored as float64 arrays of shape (N, C, H, W).  Raw pixel bytes
map to [0, 1]; analysis happens in mean-normalized space.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Dataset",
    "IdxFormatError",
    "BadMagicError",
    "TruncatedFileError",
    "CountMismatchError",
    "CheckpointError",
    "load_idx",
    "mean_normalize",
    "apply_mean",
    "synth_blobs",
    "synth_split",
    "ResampleUnit",
    "resample",
    "cubic_weights",
    "interpolation_matrix",
    "save_checkpoint",
    "load_checkpoint",
    "write_csv",
    "format_cell",
]


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean_image: np.ndarray | None = None
    raw_range: tuple[float, float] = (0.0, 1.0)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.labels)} labels for {len(self.images)} images")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        object.__setattr__(self, "images", _readonly(np.asarray(self.images, dtype=np.float64)))
        object.__setattr__(self, "labels", _readonly(np.asarray(self.labels, dtype=np.int64)))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.images.shape[1:]))

    def subset(self, index) -> "Dataset":
        idx = np.asarray(index)
        return replace(self, images=self.images[idx].copy(), labels=self.labels[idx].copy())

    def raw_images(self) -> np.ndarray:
        """Un-normalized images (adds the stored mean back)."""
        if self.mean_image is None:
            return self.images.copy()
        return self.images + self.mean_image


def _readonly(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


# --------------------------------------------------------------------------
# IDX


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise TruncatedFileError(f"{path}: truncated payload, {len(raw) - header} of {count} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (MNIST layout) into an un-normalized set."""
    imgs = _read_idx(images_path, _IDX_IMAGES, 3)
    labels = _read_idx(labels_path, _IDX_LABELS, 1)
    if imgs.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{imgs.shape[0]} images but {labels.shape[0]} labels")
    images = imgs.astype(np.float64)[:, None] / 255.0
    labels = labels.astype(np.int64)
    c = num_classes if num_classes is not None else int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images=images, labels=labels, num_classes=c, raw_range=(0.0, 1.0))


# --------------------------------------------------------------------------
# normalization


def mean_normalize(raw: Dataset, mean_image: np.ndarray | None = None) -> Dataset:
    """Subtract the per-pixel mean (its own unless ``mean_image`` is given)."""
    if len(raw) == 0:
        raise ValueError("cannot mean-normalize an empty dataset")
    base = raw.raw_images()
    mean = base.mean(axis=0) if mean_image is None else np.asarray(mean_image, dtype=np.float64)
    if mean.shape != raw.image_shape:
        raise ValueError(f"mean image {mean.shape} does not match images {raw.image_shape}")
    mean = mean.copy()
    mean.flags.writeable = False
    return replace(raw, images=base - mean, mean_image=mean)


def apply_mean(raw: Dataset, reference: Dataset) -> Dataset:
    """Normalize ``raw`` with the mean stored on ``reference`` (train -> test)."""
    return mean_normalize(raw, reference.mean_image)


# --------------------------------------------------------------------------
# synthetic blobs


def _smooth_fields(rng, count: int, side: int, channels: int) -> np.ndarray:
    coarse = max(2, side // 2)
    unit = ResampleUnit(d_low=coarse, d_orig=side)
    up = interpolation_matrix(coarse, side, unit.a)
    fields = rng.standard_normal((count, channels, coarse, coarse))
    return np.einsum("ij,ncjk,lk->ncil", up, fields, up)


def synth_blobs(
    class_count: int,
    per_class: int,
    side: int,
    seed: int,
    *,
    channels: int = 1,
    sigma: float = 0.1,
    separation: float = 8.0,
    template_seed: int | None = None,
) -> Dataset:
    """Isotropic Gaussian blobs around smooth, mutually orthogonal templates.

    Templates are drawn from ``template_seed`` (default ``seed``) so that
    several splits can share them; pairwise template distance is
    ``separation * sigma``.  Samples are returned class-interleaved and
    un-normalized around a mid-gray 0.5 background.
    """
    if side < 4:
        raise ValueError(f"side must be >= 4, got {side}")
    if class_count < 2:
        raise ValueError("need at least two classes")
    dim = channels * side * side
    if class_count > dim:
        raise ValueError(f"{class_count} orthogonal templates do not fit in {dim} pixels")
    trng = np.random.default_rng(template_seed if template_seed is not None else seed)
    fields = _smooth_fields(trng, class_count, side, channels).reshape(class_count, dim)
    q, _ = np.linalg.qr(fields.T)
    radius = separation * sigma / np.sqrt(2.0)
    templates = (q.T * radius).reshape(class_count, channels, side, side)

    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(class_count), per_class)
    noise = rng.standard_normal((len(labels), channels, side, side)) * sigma
    images = 0.5 + templates[labels] + noise
    return Dataset(
        images=images,
        labels=labels.astype(np.int64),
        num_classes=class_count,
        raw_range=(float(images.min()), float(images.max())),
        meta={"templates": templates, "sigma": sigma, "separation": separation},
    )


def synth_split(class_count: int, per_class_train: int, per_class_test: int, side: int, seed: int, **kw):
    """Train/test blobs sharing templates; both normalized by the train mean."""
    train = synth_blobs(class_count, per_class_train, side, seed, template_seed=seed, **kw)
    test = synth_blobs(class_count, per_class_test, side, seed + 7919, template_seed=seed, **kw)
    train = mean_normalize(train)
    return train, apply_mean(test, train)


# --------------------------------------------------------------------------
# bicubic resampling


def cubic_weights(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel (a = -0.5 gives Catmull-Rom)."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    near = x <= 1.0
    far = (x > 1.0) & (x < 2.0)
    xn, xf = x[near], x[far]
    out[near] = (a + 2) * xn**3 - (a + 3) * xn**2 + 1
    out[far] = a * xf**3 - 5 * a * xf**2 + 8 * a * xf - 4 * a
    return out


def interpolation_matrix(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    """(n_out, n_in) bicubic resampling matrix, pixel-center aligned, edge-clamped."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        x = (i + 0.5) * ratio - 0.5
        base = int(np.floor(x))
        taps = np.arange(base - 1, base + 3)
        w = cubic_weights(x - taps, a)
        for t, wt in zip(np.clip(taps, 0, n_in - 1), w):
            m[i, t] += wt
    return m


@dataclass(frozen=True)
class ResampleUnit:
    """Down-then-up bicubic round trip on square images.

    ``method="lsq"`` (default) picks the low-resolution image whose bicubic
    upscale is closest in l2 to the input, which makes the round trip an
    orthogonal projector.  ``method="direct"`` samples the input with the
    bicubic kernel instead (not idempotent).
    """

    d_low: int
    d_orig: int
    a: float = -0.5
    method: str = "lsq"

    def __post_init__(self):
        if not 0 < self.d_low <= self.d_orig:
            raise ValueError(f"need 0 < d_low <= d_orig, got {self.d_low}, {self.d_orig}")
        if self.method not in ("lsq", "direct"):
            raise ValueError(f"unknown resampling method {self.method!r}")

    @property
    def identity(self) -> bool:
        return self.d_low == self.d_orig

    def up_matrix(self) -> np.ndarray:
        return interpolation_matrix(self.d_low, self.d_orig, self.a)

    def down_matrix(self) -> np.ndarray:
        if self.identity:
            return np.eye(self.d_orig)
        if self.method == "direct":
            return interpolation_matrix(self.d_orig, self.d_low, self.a)
        return np.linalg.pinv(self.up_matrix())

    def round_trip_1d(self) -> np.ndarray:
        if self.identity:
            return np.eye(self.d_orig)
        return self.up_matrix() @ self.down_matrix()

    def _check(self, images: np.ndarray):
        if images.shape[-1] != self.d_orig or images.shape[-2] != self.d_orig:
            raise ValueError(f"image side {images.shape[-2:]} does not match d_orig={self.d_orig}")

    def downscale(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        self._check(images)
        d = self.down_matrix()
        return np.einsum("ij,...jk,lk->...il", d, images, d)

    def upscale(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.shape[-1] != self.d_low or images.shape[-2] != self.d_low:
            raise ValueError(f"image side {images.shape[-2:]} does not match d_low={self.d_low}")
        u = self.up_matrix()
        return np.einsum("ij,...jk,lk->...il", u, images, u)

    def apply(self, images: np.ndarray) -> np.ndarray:
        """Round trip on any array whose last two axes are d_orig x d_orig."""
        images = np.asarray(images, dtype=np.float64)
        self._check(images)
        if self.identity:
            return images.copy()
        r = self.round_trip_1d()
        return np.einsum("ij,...jk,lk->...il", r, images, r)

    def matrix(self, channels: int = 1) -> np.ndarray:
        """Round trip as a dense (D, D) matrix on flattened (C, H, W) images."""
        r = self.round_trip_1d()
        return np.kron(np.eye(channels), np.kron(r, r))


def resample(unit: ResampleUnit, image: np.ndarray) -> np.ndarray:
    return unit.apply(image)


# --------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"CBNET1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path) -> None:
    """Write ``model`` as magic, length-prefixed descriptor, raw LE float64 params."""
    desc = dict(model.descriptor)
    desc["param_shapes"] = [list(p.shape) for p in model.params]
    text = json.dumps(desc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for p in model.params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path):
    from .models import Model, param_shapes

    raw = Path(path).read_bytes()
    if raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: magic mismatch")
    pos = len(_CKPT_MAGIC)
    if len(raw) < pos + 4:
        raise CheckpointError(f"{path}: descriptor length missing")
    (n,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    if len(raw) < pos + n:
        raise CheckpointError(f"{path}: descriptor truncated")
    try:
        desc = json.loads(raw[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable descriptor ({exc})") from None
    pos += n
    listed = [tuple(s) for s in desc.pop("param_shapes", [])]
    try:
        expected = param_shapes(desc)
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid descriptor ({exc})") from None
    if listed != expected:
        raise CheckpointError(f"{path}: descriptor parameter shapes {listed} disagree with layers {expected}")
    need = sum(int(np.prod(s)) for s in expected) * 8
    if len(raw) - pos != need:
        raise CheckpointError(f"{path}: payload length {len(raw) - pos} bytes, descriptor needs {need}")
    params = []
    for s in expected:
        count = int(np.prod(s))
        params.append(np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(s))
        pos += count * 8
    return Model(desc, params)


# --------------------------------------------------------------------------
# CSV


def format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """RFC-4180 CSV, UTF-8, floats at 9 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([format_cell(v) for v in row])
    return path
