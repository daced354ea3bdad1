"""Orthonormal image-space subspaces and projections onto them.

Bases are stored as rows: ``basis`` has shape (m, D) with orthonormal
rows, so projection is ``x @ basis.T @ basis`` on flattened images.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .curvature import DirectionSet, fix_sign

__all__ = [
    "Subspace",
    "VARIANTS",
    "orthonormalize",
    "select_per_class",
    "svd_directions",
    "svd_basis",
    "project",
    "norm_fraction",
    "save_subspace",
    "load_subspace",
]

VARIANTS = ("S_pos", "S_neg", "S_neg_pos", "S_flat", "S_hi", "S_lo", "full", "custom")
_QR_TOL = 1e-8


def orthonormalize(vectors: np.ndarray, tol: float = _QR_TOL) -> np.ndarray:
    """Sequential Gram-Schmidt (two passes) keeping input order.

    A column whose residual norm is at most ``tol`` times its own norm is
    dropped, so the output spans the input and every prefix of the output
    spans the corresponding prefix of the input.
    """
    vecs = np.asarray(vectors, dtype=np.float64).reshape(len(vectors), -1)
    out: list[np.ndarray] = []
    for v in vecs:
        norm = np.linalg.norm(v)
        if norm == 0:
            continue
        r = v.copy()
        if out:
            q = np.array(out)
            for _ in range(2):
                r -= q.T @ (q @ r)
        rn = np.linalg.norm(r)
        if rn <= tol * norm:
            continue
        out.append(r / rn)
    return np.array(out).reshape(len(out), vecs.shape[1]) if out else np.zeros((0, vecs.shape[1]))


@dataclass(frozen=True)
class Subspace:
    basis: np.ndarray
    image_shape: tuple
    variant: str = "custom"
    d: int = 0
    scores: np.ndarray | None = None
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=np.float64).reshape(-1, int(np.prod(self.image_shape)))
        object.__setattr__(self, "basis", b)
        object.__setattr__(self, "image_shape", tuple(self.image_shape))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if len(b) > b.shape[1]:
            raise ValueError(f"{len(b)} basis vectors exceed the input dimension {b.shape[1]}")
        if len(b) and np.abs(b @ b.T - np.eye(len(b))).max() > 1e-8:
            raise ValueError("basis is not orthonormal")

    @property
    def m(self) -> int:
        return len(self.basis)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @classmethod
    def full(cls, image_shape) -> "Subspace":
        dim = int(np.prod(image_shape))
        return cls(np.eye(dim), image_shape, "full", dim)

    @classmethod
    def empty(cls, image_shape, variant: str = "custom") -> "Subspace":
        return cls(np.zeros((0, int(np.prod(image_shape)))), image_shape, variant, 0)

    @classmethod
    def from_vectors(cls, vectors, image_shape, variant="custom", d=0, scores=None, **prov) -> "Subspace":
        return cls(orthonormalize(vectors), image_shape, variant, d, scores, prov)

    def prefix(self, m: int, d: int | None = None) -> "Subspace":
        """The first ``m`` basis vectors (nested-subspace view)."""
        sc = None if self.scores is None else self.scores[:m]
        return Subspace(self.basis[:m], self.image_shape, self.variant, m if d is None else d, sc,
                        dict(self.provenance))

    def projector(self) -> np.ndarray:
        return self.basis.T @ self.basis

    def apply(self, images) -> np.ndarray:
        """Project a batch (N, *image_shape) or a single image."""
        x = np.asarray(images, dtype=np.float64)
        single = x.shape == self.image_shape
        flat = x.reshape(1 if single else len(x), -1)
        if flat.shape[1] != self.dim:
            raise ValueError(f"shape {x.shape} does not match subspace of {self.image_shape}")
        out = (flat @ self.basis.T) @ self.basis if self.m else np.zeros_like(flat)
        return out.reshape(x.shape)

    def coefficients(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        return x.reshape(-1, self.dim) @ self.basis.T


def project(subspace: Subspace, x) -> np.ndarray:
    """Q Q^T x reshaped to the input's shape."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != subspace.image_shape and x.shape[1:] != subspace.image_shape:
        raise ValueError(f"shape {x.shape} does not match subspace of {subspace.image_shape}")
    return subspace.apply(x)


_CRITERIA = {"S_pos": ("pos",), "S_neg": ("neg",), "S_neg_pos": ("pos", "neg"), "S_flat": ("flat",)}


def select_per_class(direction_sets: Sequence[DirectionSet], variant: str, d: int) -> Subspace:
    """Aggregate ``d`` directions per class, interleaved round-robin, then QR.

    Rank j of every class (class-index order) comes before rank j + 1 of
    any class; for ``S_neg_pos`` the positive direction of a rank precedes
    the negative one.
    """
    if variant not in _CRITERIA:
        raise ValueError(f"variant must be one of {sorted(_CRITERIA)}, got {variant!r}")
    sets = sorted(direction_sets, key=lambda s: s.class_index)
    if not sets:
        raise ValueError("no direction sets given")
    shape = sets[0].shape
    if d == 0:
        return Subspace.empty(shape, variant)
    if d < 0:
        raise ValueError("d must be >= 0")
    picks = {}
    for ds in sets:
        need = d * len(_CRITERIA[variant]) if variant == "S_neg_pos" else d
        if need > len(ds) or d > len(ds):
            raise ValueError(f"class {ds.class_index}: d={d} exceeds the {len(ds)} available directions")
        picks[ds.class_index] = {w: ds.select(d, w) for w in _CRITERIA[variant]}
    ordered = []
    for j in range(d):
        for ds in sets:
            for w in _CRITERIA[variant]:
                ordered.append(picks[ds.class_index][w][j])
    sub = Subspace.from_vectors(np.array(ordered), shape, variant, d,
                                classes=[s.class_index for s in sets])
    return sub


def _stack(perturbations) -> np.ndarray:
    rows = [np.asarray(getattr(p, "delta", p), dtype=np.float64) for p in perturbations]
    if len(rows) < 2:
        raise ValueError("need at least two perturbations")
    shape = rows[0].shape
    if any(r.shape != shape for r in rows):
        raise ValueError("perturbations have inconsistent shapes")
    return np.array(rows)


def svd_directions(perturbations, unit=None) -> DirectionSet:
    """Right singular vectors of the stacked perturbations, high to low.

    With a :class:`~curvebench.data.ResampleUnit`, deltas are downscaled
    before stacking and the vectors live in the downsampled space.
    """
    stack = _stack(perturbations)
    if unit is not None:
        stack = unit.downscale(stack)
    shape = stack.shape[1:]
    mat = stack.reshape(len(stack), -1)
    if not np.any(mat):
        raise ValueError("all perturbations are zero")
    _, sv, vt = np.linalg.svd(mat, full_matrices=False)
    vt = np.array([fix_sign(v) for v in vt])
    return DirectionSet(vt.reshape((len(vt),) + shape), sv, -1, "svd",
                        {"count": len(mat), "downsampled": unit is not None})


def svd_basis(perturbations, ordering: str = "S_hi", d: int | None = None, unit=None) -> Subspace:
    """Subspace of right singular vectors ordered high-to-low (S_hi) or low-to-high (S_lo).

    ``d`` keeps only the first d vectors of the ordering.  With ``unit``,
    the downsampled singular vectors are upscaled and re-orthonormalized in
    input space (order preserved).
    """
    if ordering not in ("S_hi", "S_lo"):
        raise ValueError(f"ordering must be S_hi or S_lo, got {ordering!r}")
    ds = svd_directions(perturbations, unit)
    vecs, sv = ds.basis, ds.scores
    if ordering == "S_lo":
        vecs, sv = vecs[::-1], sv[::-1]
    if d is not None:
        vecs, sv = vecs[:d], sv[:d]
    shape = _stack(perturbations).shape[1:]
    if unit is not None:
        vecs = unit.upscale(vecs)
        basis = orthonormalize(vecs)
    else:
        basis = vecs.reshape(len(vecs), -1)
    return Subspace(basis, shape, ordering, len(basis) if d is None else d, sv[: len(basis)],
                    {"source": "svd", "downsampled": unit is not None})


def norm_fraction(subspace: Subspace, vectors) -> float:
    """Mean of |project(v)| / |v| over ``vectors``."""
    v = np.asarray(vectors, dtype=np.float64).reshape(len(vectors), -1)
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero vector in norm_fraction input")
    proj = np.linalg.norm(v @ subspace.basis.T, axis=1) if subspace.m else np.zeros(len(v))
    return float(np.mean(proj / norms))


# --------------------------------------------------------------------------
# serialization

_SUB_MAGIC = b"CBSUB1"


def save_subspace(sub: Subspace, path) -> None:
    tag = sub.variant.encode("utf-8")
    scores = np.zeros(sub.m) if sub.scores is None else np.asarray(sub.scores, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_SUB_MAGIC)
        fh.write(struct.pack("<H", len(tag)))
        fh.write(tag)
        fh.write(struct.pack("<iII", sub.d, sub.m, len(sub.image_shape)))
        fh.write(struct.pack("<" + "I" * len(sub.image_shape), *sub.image_shape))
        fh.write(np.ascontiguousarray(scores, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(sub.basis, dtype="<f8").tobytes())


def load_subspace(path) -> Subspace:
    raw = Path(path).read_bytes()
    if raw[:6] != _SUB_MAGIC:
        raise ValueError(f"{path}: magic mismatch")
    (tlen,) = struct.unpack_from("<H", raw, 6)
    pos = 8
    variant = raw[pos:pos + tlen].decode("utf-8")
    pos += tlen
    d, m, ndim = struct.unpack_from("<iII", raw, pos)
    pos += 12
    shape = struct.unpack_from("<" + "I" * ndim, raw, pos)
    pos += 4 * ndim
    size = int(np.prod(shape))
    if len(raw) != pos + 8 * m * (1 + size):
        raise ValueError(f"{path}: payload length does not match header")
    scores = np.frombuffer(raw, dtype="<f8", count=m, offset=pos).astype(np.float64)
    pos += 8 * m
    basis = np.frombuffer(raw, dtype="<f8", count=m * size, offset=pos).astype(np.float64)
    return Subspace(basis.reshape(m, size), shape, variant, d, scores)
