"""Experiment drivers: score traces, subspace sweeps and the resampling table.

Every driver returns plain row lists (header + rows) so results can be
written with :func:`curvebench.data.write_csv` or checked directly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .attacks import AttackConfig, deepfool_batch
from .data import Dataset, ResampleUnit
from .models import Model, accuracy, logits_batch, predict
from .subspace import Subspace, norm_fraction, select_per_class

__all__ = [
    "percentile",
    "TraceResult",
    "run_trace",
    "symmetry_score",
    "separability_score",
    "default_s_grid",
    "default_d_grid",
    "run_accuracy_vs_d",
    "run_norm_fractions",
    "run_confined_norms",
    "run_resampling_table",
    "visualize_direction",
    "read_pnm",
    "ExperimentConfig",
    "ConfigError",
    "parse_config",
    "config_hash",
    "write_manifest",
]


def percentile(values, p: float, axis: int = 0) -> np.ndarray:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    x = np.sort(np.asarray(values, dtype=np.float64), axis=axis)
    n = x.shape[axis]
    if n == 0:
        raise ValueError("percentile of an empty sample")
    rank = max(1, int(math.ceil(p / 100.0 * n)))
    return np.take(x, min(rank, n) - 1, axis=axis)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# score traces


@dataclass
class TraceResult:
    direction_id: str
    class_index: int
    population: str
    s_grid: np.ndarray
    median: np.ndarray
    p30: np.ndarray
    p70: np.ndarray
    sup_other_median: np.ndarray
    transition_in: np.ndarray
    retention: np.ndarray
    softmax_median: np.ndarray
    count: int
    curves: np.ndarray = field(repr=False, default=None)

    HEADER = ("s", "median", "p30", "p70", "sup_other_median", "transition_in",
              "retention", "softmax_median")

    def rows(self) -> list[list]:
        cols = [self.s_grid, self.median, self.p30, self.p70, self.sup_other_median,
                self.transition_in, self.retention, self.softmax_median]
        return [list(r) for r in zip(*cols)]

    @property
    def swing(self) -> float:
        """max over s minus min over s of the median score."""
        return float(self.median.max() - self.median.min())


def _scores_along(model: Model, images: np.ndarray, d_hat: np.ndarray, s: np.ndarray,
                  chunk: int = 4096) -> np.ndarray:
    """Logits of every image at every step, shape (n, S, C)."""
    n = len(images)
    out = np.empty((n, len(s), model.num_classes))
    per = max(1, chunk // len(s))
    for start in range(0, n, per):
        block = images[start:start + per]
        batch = block[:, None] + s.reshape((1, -1) + (1,) * (block.ndim - 1)) * d_hat[None, None]
        z = logits_batch(model, batch.reshape((-1,) + images.shape[1:]))
        out[start:start + len(block)] = z.reshape(len(block), len(s), -1)
    return out


def run_trace(model: Model, dataset, direction, c: int, s_grid,
              population: str = "non_target", direction_id: str = "") -> TraceResult:
    """Population statistics of F_c(i + s * d_hat) over the step grid.

    Populations are defined by the clean prediction: ``non_target`` keeps
    samples not predicted as c, ``target`` those predicted as c.  The
    retention column always refers to the samples predicted as c.
    """
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d)
    if norm == 0:
        raise ValueError("direction must be nonzero")
    images = np.asarray(getattr(dataset, "images", dataset), dtype=np.float64)
    s = np.asarray(s_grid, dtype=np.float64).reshape(-1)
    pred = predict(model, images)
    masks = {"non_target": pred != c, "target": pred == c, "all": np.ones(len(pred), bool)}
    if population not in masks:
        raise ValueError(f"population must be one of {sorted(masks)}, got {population!r}")
    pop = masks[population]
    if not pop.any():
        raise ValueError(f"population {population!r} is empty for class {c}")
    z = _scores_along(model, images, d / norm, s)
    labels = np.argmax(z, axis=2)
    zp = z[pop]
    fc = zp[:, :, c]
    others = np.delete(zp, c, axis=2)
    sup_other = np.max(percentile(others, 50, axis=0), axis=1)
    owned = pred == c
    retention = (labels[owned] == c).mean(axis=0) if owned.any() else np.full(len(s), np.nan)
    return TraceResult(
        direction_id=direction_id,
        class_index=int(c),
        population=population,
        s_grid=s,
        median=percentile(fc, 50),
        p30=percentile(fc, 30),
        p70=percentile(fc, 70),
        sup_other_median=sup_other,
        transition_in=(labels[pop] == c).mean(axis=0),
        retention=retention,
        softmax_median=percentile(_softmax(zp)[:, :, c], 50),
        count=int(pop.sum()),
        curves=fc,
    )


def symmetry_score(curves, s_grid) -> tuple[np.ndarray, np.ndarray]:
    """Per-curve symmetry centre s0 and range-normalized asymmetry.

    Candidate centres are grid points with at least ceil((S-1)/4) offsets
    on both sides; the RMS of F(s0+u) - F(s0-u) is taken over every offset
    available at that centre.  Ties go to the centre closest to s = 0.
    """
    s = np.asarray(s_grid, dtype=np.float64).reshape(-1)
    f = np.atleast_2d(np.asarray(curves, dtype=np.float64))
    n_s = len(s)
    if n_s < 5:
        raise ValueError("symmetry_score needs at least 5 grid points")
    if f.shape[1] != n_s:
        raise ValueError("curves do not match the grid")
    min_off = int(math.ceil((n_s - 1) / 4))
    centres = [i for i in range(n_s) if min(i, n_s - 1 - i) >= min_off]
    centres.sort(key=lambda i: (abs(s[i]), i))
    s0 = np.zeros(len(f))
    score = np.zeros(len(f))
    for k, curve in enumerate(f):
        rng = curve.max() - curve.min()
        if rng == 0:
            continue
        best, best_i = np.inf, centres[0]
        for i in centres:
            m = min(i, n_s - 1 - i)
            diff = curve[i + 1:i + m + 1] - curve[i - m:i][::-1]
            r = float(np.sqrt(np.mean(diff ** 2)))
            if r < best:
                best, best_i = r, i
        s0[k] = s[best_i]
        score[k] = best / rng
    return s0, score


def separability_score(curves, s_grid, max_pairs: int = 200_000) -> float:
    """Median pairwise RMS gap between s=0-centered curves over the median range.

    0 means every sample traces the same curve up to a vertical shift.
    When there are more pairs than ``max_pairs`` a fixed, evenly strided
    subset of pairs is used.
    """
    s = np.asarray(s_grid, dtype=np.float64).reshape(-1)
    f = np.asarray(curves, dtype=np.float64)
    if len(s) < 2:
        raise ValueError("separability_score needs more than one grid point")
    if f.ndim != 2 or len(f) < 2:
        raise ValueError("separability_score needs at least two curves")
    i0 = int(np.argmin(np.abs(s)))
    centred = f - f[:, i0:i0 + 1]
    a, b = np.triu_indices(len(f), k=1)
    if len(a) > max_pairs:
        pick = np.linspace(0, len(a) - 1, max_pairs).astype(np.int64)
        a, b = a[pick], b[pick]
    gaps = np.empty(len(a))
    for start in range(0, len(a), 20_000):
        sl = slice(start, start + 20_000)
        gaps[sl] = np.sqrt(np.mean((centred[a[sl]] - centred[b[sl]]) ** 2, axis=1))
    med_gap = float(np.median(gaps))
    med_range = float(np.median(f.max(axis=1) - f.min(axis=1)))
    if med_range == 0:
        return 0.0 if med_gap == 0 else math.inf
    return med_gap / med_range


def default_s_grid(median_norm: float, points: int = 41, span: float = 5.0) -> np.ndarray:
    """Symmetric grid over +-span * median_norm, exact negation pairs."""
    if points < 3 or points % 2 == 0:
        raise ValueError("s grid needs an odd number of points >= 3")
    half = points // 2
    return span * median_norm * np.arange(-half, half + 1) / half


def default_d_grid(full: int) -> list[int]:
    """1, 2, 4, ... doubling, ending with ``full``."""
    grid, d = [], 1
    while d < full:
        grid.append(d)
        d *= 2
    grid.append(full)
    return grid


# --------------------------------------------------------------------------
# subspace sweeps


def _subspace_for(bases, variant: str, d: int) -> Subspace:
    src = bases[variant]
    if isinstance(src, Subspace):
        return src.prefix(d)
    return select_per_class(src, variant, d)


def run_accuracy_vs_d(model: Model, splits: Mapping[str, Dataset], bases: Mapping,
                      d_grid: Sequence[int], source: str = "curvature") -> tuple[list[str], list[list]]:
    """Accuracy of projected inputs for every (variant, d, split).

    ``bases`` maps a variant to a list of per-class DirectionSets
    (curvature source, d per class) or to a full Subspace whose prefixes
    are used (svd source, d counts total directions).
    """
    header = ["source", "variant", "d", "m", "split", "accuracy"]
    rows = []
    for variant in bases:
        for d in d_grid:
            sub = _subspace_for(bases, variant, int(d))
            for split, ds in splits.items():
                rows.append([source, variant, int(d), sub.m, split, accuracy(model, ds, sub)])
    return header, rows


def run_norm_fractions(subspaces: Mapping[tuple, Subspace], perturbations: Mapping[str, np.ndarray],
                       random_baseline: int = 200, seed: int = 0) -> tuple[list[str], list[list]]:
    """Mean projected-norm fraction per (method, variant, d).

    Zero-norm perturbations are dropped and counted in ``excluded``.  A
    ``random`` method of isotropic Gaussian vectors is appended when
    ``random_baseline`` > 0.
    """
    header = ["method", "variant", "d", "m", "fraction", "baseline_sqrt_m_over_D", "count", "excluded"]
    sets = {}
    for method, vecs in perturbations.items():
        v = np.asarray(vecs, dtype=np.float64)
        v = v.reshape(len(v), -1)
        keep = np.linalg.norm(v, axis=1) > 0
        sets[method] = (v[keep], int((~keep).sum()))
    if random_baseline:
        dim = next(iter(subspaces.values())).dim
        rng = np.random.default_rng(seed)
        sets["random"] = (rng.standard_normal((random_baseline, dim)), 0)
    rows = []
    for method, (v, excluded) in sets.items():
        if len(v) == 0:
            raise ValueError(f"no nonzero perturbations for method {method!r}")
        for (variant, d), sub in subspaces.items():
            rows.append([method, variant, int(d), sub.m, norm_fraction(sub, v),
                         math.sqrt(sub.m / sub.dim), len(v), excluded])
    return header, rows


def run_confined_norms(model: Model, images, subspaces: Mapping[tuple, Subspace],
                       cfg: AttackConfig = AttackConfig()) -> tuple[list[str], list[list]]:
    """Confined-DeepFool norms and projected-image norms per (ordering, d)."""
    header = ["ordering", "d", "m", "mean_norm", "converged_rate", "converged", "nonconverged",
              "mean_projected_image_norm"]
    x = np.asarray(getattr(images, "images", images), dtype=np.float64)
    rows = []
    for (ordering, d), sub in subspaces.items():
        recs = deepfool_batch(model, x, cfg, subspace=sub)
        ok = np.array([r.converged for r in recs])
        norms = np.array([r.l2_norm for r in recs])
        mean_norm = float(norms[ok].mean()) if ok.any() else math.nan
        proj = np.linalg.norm(sub.apply(x).reshape(len(x), -1), axis=1)
        rows.append([ordering, int(d), sub.m, mean_norm, float(ok.mean()), int(ok.sum()),
                     int((~ok).sum()), float(proj.mean())])
    return header, rows


def run_resampling_table(model: Model, dataset: Dataset, d_low_list: Sequence[int],
                         f_grid: Sequence[float] = (1, 2, 3, 4, 5, 10),
                         cfg: AttackConfig = AttackConfig(), perturbations=None,
                         method: str = "lsq") -> tuple[list[str], list[list]]:
    """Robustness of down-then-up resampling defences at several sizes.

    DeepFools (given or computed on the plain model) are scaled by f and
    passed through the round trip together with the image.  Fooling is a
    label change of the resampled prediction relative to the resampled
    clean prediction, over converged DeepFools.  The ``direct_*`` columns
    attack the resampled model itself.
    """
    x = dataset.images
    channels, side = x.shape[1], x.shape[-1]
    recs = perturbations if perturbations is not None else deepfool_batch(model, x, cfg)
    ok = np.array([r.converged for r in recs])
    delta = np.array([r.delta for r in recs])[ok]
    xs = x[ok]
    header = ["d_low", "mean_image_norm", "mean_perturbation_norm", "accuracy",
              *[f"fooling_f{format(f, 'g')}" for f in f_grid],
              "direct_fooling", "direct_mean_norm", "deepfool_mean_norm"]
    df_norm = float(np.linalg.norm(delta.reshape(len(delta), -1), axis=1).mean())
    rows = []
    for d_low in d_low_list:
        unit = ResampleUnit(int(d_low), side, method=method)
        rx = unit.apply(xs)
        clean = predict(model, rx)
        row = [int(d_low),
               float(np.linalg.norm(unit.apply(x).reshape(len(x), -1), axis=1).mean()),
               float(np.linalg.norm(unit.apply(delta).reshape(len(delta), -1), axis=1).mean()),
               accuracy(model, dataset, unit)]
        for f in f_grid:
            fooled = predict(model, unit.apply(xs + f * delta)) != clean
            row.append(float(fooled.mean()))
        wrapped = model.with_input_map(unit.matrix(channels))
        direct = deepfool_batch(wrapped, x, cfg, method="deepfool-resampled")
        d_ok = np.array([r.converged for r in direct])
        row.append(float(d_ok.mean()))
        row.append(float(np.mean([r.l2_norm for r in direct if r.converged])) if d_ok.any() else math.nan)
        row.append(df_norm)
        rows.append(row)
    return header, rows


# --------------------------------------------------------------------------
# images


def _rescale(direction: np.ndarray) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64)
    if d.ndim == 2:
        d = d[None]
    if d.ndim != 3 or d.shape[0] not in (1, 3):
        raise ValueError(f"direction must be (H, W), (1, H, W) or (3, H, W), got {d.shape}")
    out = np.empty(d.shape, dtype=np.uint8)
    for k, ch in enumerate(d):
        lo, hi = ch.min(), ch.max()
        if hi == lo:
            out[k] = 128
        else:
            out[k] = np.rint((ch - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return out


def visualize_direction(direction, path) -> Path:
    """Per-channel min/max rescale to 0..255 written as binary PGM or PPM."""
    img = _rescale(direction)
    path = Path(path)
    c, h, w = img.shape
    magic = b"P5" if c == 1 else b"P6"
    body = img[0] if c == 1 else np.transpose(img, (1, 2, 0))
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(body).tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM written by :func:`visualize_direction` as (C, H, W) uint8."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    magic, w, h, maxval, body = parts[0], int(parts[1]), int(parts[2]), int(parts[3]), parts[4]
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: unsupported image header")
    c = 1 if magic == b"P5" else 3
    arr = np.frombuffer(body, dtype=np.uint8, count=c * h * w)
    if c == 1:
        return arr.reshape(1, h, w).copy()
    return np.transpose(arr.reshape(h, w, 3), (2, 0, 1)).copy()


# --------------------------------------------------------------------------
# configuration and manifests


class ConfigError(ValueError):
    pass


def _parse_value(raw: str):
    text = raw.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if text.lower() in ("none", "null", ""):
        return None
    if "," in text:
        return [_parse_value(t) for t in text.split(",") if t.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment; commas make lists."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = _parse_value(value)
    return out


@dataclass
class ExperimentConfig:
    """Experiment knobs with their defaults; unknown keys are rejected."""

    model: str | None = None
    out: str = "out"
    dataset: str = "synth"
    synth_classes: int = 5
    synth_train: int = 200
    synth_test: int = 50
    synth_seed: int = 1
    synth_side: int = 8
    synth_sigma: float = 0.2
    synth_separation: float = 8.0
    idx_train_images: str | None = None
    idx_train_labels: str | None = None
    idx_test_images: str | None = None
    idx_test_labels: str | None = None
    idx_limit: int | None = None
    arch: str = "cnn-small"
    epochs: int = 30
    learning_rate: float = 0.02
    momentum: float = 0.9
    batch_size: int = 32
    weight_decay: float = 1e-3
    seed: int = 0
    overshoot: float = 0.02
    max_iterations: int = 50
    fd_step: float = 1e-2
    max_samples: int | None = None
    k_top: int = 10
    k_bottom: int = 10
    full_spectrum: bool = True
    classes: list | None = None
    target_class: int = 0
    direction: str = "pos"
    rank: int = 0
    population: str = "non_target"
    s_points: int = 41
    s_span: float = 5.0
    d_grid: list | None = None
    variants: list | None = None
    source: str = "curvature"
    d_low: list | None = None
    f_grid: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 10])
    uap_xi: float | None = None
    uap_passes: int = 5
    random_baseline: int = 200

    @classmethod
    def from_mapping(cls, values: Mapping) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = cls(**dict(values))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name in ("d_grid", "d_low", "f_grid", "classes", "variants"):
            v = getattr(self, name)
            if v is not None and not isinstance(v, list):
                setattr(self, name, [v])
        if self.f_grid is not None and len(self.f_grid) == 0:
            raise ConfigError("f_grid must be nonempty")
        if self.s_points < 3 or self.s_points % 2 == 0:
            raise ConfigError("s_points must be odd and >= 3 (symmetric grid)")
        if self.dataset not in ("synth", "idx"):
            raise ConfigError(f"dataset must be synth or idx, got {self.dataset!r}")
        if self.source not in ("curvature", "svd"):
            raise ConfigError(f"source must be curvature or svd, got {self.source!r}")
        if self.direction not in ("pos", "neg", "flat"):
            raise ConfigError(f"direction must be pos, neg or flat, got {self.direction!r}")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def config_hash(values: Mapping) -> str:
    canonical = json.dumps({k: values[k] for k in sorted(values)}, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir, command: str, config: Mapping, outputs: Sequence, threads: int | None) -> Path:
    """JSON manifest of the run: config hash, seeds, version and output digests."""
    out_dir = Path(out_dir)
    files = {}
    for p in outputs:
        p = Path(p)
        files[p.name] = _file_digest(p)
    manifest = {
        "command": command,
        "tool": "curvebench",
        "version": __version__,
        "config_hash": config_hash(config),
        "config": {k: config[k] for k in sorted(config)},
        "seeds": {"seed": config.get("seed")},
        "threads": threads,
        "csv_schema_version": 1,
        "outputs": files,
    }
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path
