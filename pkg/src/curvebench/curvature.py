"""Mean decision-boundary Hessians and their extreme eigenpairs.

For a target class c, every sample not predicted as c is walked onto the
boundary F_c = F_src (src = its prediction).  The mean Hessian of
F_c - F_src over those boundary points is never formed: its action on a
vector comes from central differences of backpropagated input gradients,
and Lanczos with full reorthogonalization extracts the extreme eigenpairs.
No tangent-space projection is applied.

On piecewise-linear nets the finite-difference operator is neither exactly
linear nor symmetric (the step crosses activation kinks), so for moderate
input sizes it is assembled on the pixel basis and symmetrized before the
eigensolve.  The matrix-free path remains for large inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, deepfool_targeted_batch
from .models import Model, input_gradients, predict

__all__ = [
    "CurvatureConfig",
    "HessianOperator",
    "MatrixOperator",
    "DirectionSet",
    "NoQualifyingSamplesError",
    "hvp",
    "build_operator",
    "lanczos",
    "lanczos_extreme_eigs",
    "full_eigs",
    "principal_curvatures",
    "dense_matrix",
    "fix_sign",
    "save_directions",
    "load_directions",
]


class NoQualifyingSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class CurvatureConfig:
    fd_step: float = 1e-2
    max_samples: int | None = None
    k_top: int = 10
    k_bottom: int = 10
    iterations: int | None = None
    seed: int = 0
    attack: AttackConfig = AttackConfig()
    chunk: int = 4096
    # "auto" assembles when dim <= assemble_max_dim; "always" / "never"
    assemble: str = "auto"
    assemble_max_dim: int = 4096
    # return every eigenpair of the assembled matrix instead of the extremes
    full_spectrum: bool = False


def fix_sign(v: np.ndarray) -> np.ndarray:
    """Flip ``v`` so that its largest-magnitude entry is positive."""
    flat = v.reshape(-1)
    i = int(np.argmax(np.abs(flat)))
    return -v if flat[i] < 0 else v


@dataclass
class HessianOperator:
    model: Model
    target: int
    points: np.ndarray
    sources: np.ndarray
    fd_step: float = 1e-2
    counts: dict = field(default_factory=dict)
    chunk: int = 4096

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.points.shape[1:])

    @property
    def dim(self) -> int:
        return int(np.prod(self.points.shape[1:]))

    @property
    def n_used(self) -> int:
        return len(self.points)

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.apply_many(np.asarray(v, dtype=np.float64).reshape(1, -1))[0].reshape(np.shape(v))

    def apply_many(self, vs: np.ndarray) -> np.ndarray:
        """Operator applied to each row of ``vs`` (k, D); returns (k, D)."""
        vs = np.asarray(vs, dtype=np.float64).reshape(len(vs), -1)
        norms = np.linalg.norm(vs, axis=1)
        if np.any(norms == 0):
            raise ValueError("hvp needs a nonzero vector")
        n, h = self.n_used, self.fd_step
        pts = self.points.reshape(n, -1)
        w = np.zeros((2 * n, self.model.num_classes))
        rows = np.arange(n)
        w[rows, self.target] = 1.0
        w[rows, self.sources] -= 1.0
        w[n + rows] = w[rows]
        out = np.empty_like(vs)
        per_batch = max(1, self.chunk // (2 * n))
        for start in range(0, len(vs), per_batch):
            block = vs[start:start + per_batch] / norms[start:start + per_batch, None]
            k = len(block)
            plus = pts[None] + h * block[:, None, :]
            minus = pts[None] - h * block[:, None, :]
            x = np.concatenate([plus, minus], axis=1).reshape((k * 2 * n,) + self.image_shape)
            _, g = input_gradients(self.model, x, np.tile(w, (k, 1)))
            g = g.reshape(k, 2, n, -1)
            diff = (g[:, 0] - g[:, 1]).sum(axis=1) / (2 * h * n)
            out[start:start + k] = diff * norms[start:start + k, None]
        return out


    def assemble(self) -> "MatrixOperator":
        """Dense symmetrized matrix (H + H^T) / 2 on the pixel basis."""
        h = dense_matrix(self)
        return MatrixOperator(0.5 * (h + h.T), self.image_shape, self.target, dict(self.counts))


@dataclass
class MatrixOperator:
    """An explicit symmetric matrix acting on flattened images."""

    matrix: np.ndarray
    image_shape: tuple
    target: int = -1
    counts: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return (self.matrix @ v.reshape(-1)).reshape(v.shape)

    def apply_many(self, vs: np.ndarray) -> np.ndarray:
        vs = np.asarray(vs, dtype=np.float64).reshape(len(vs), -1)
        return vs @ self.matrix.T


def hvp(operator: HessianOperator, v: np.ndarray) -> np.ndarray:
    """Mean Hessian times ``v`` by central differences of input gradients."""
    return operator.apply(v)


def dense_matrix(operator) -> np.ndarray:
    """Assemble the operator column by column on the standard basis."""
    eye = np.eye(operator.dim)
    return operator.apply_many(eye).T


def build_operator(model: Model, dataset, c: int, cfg: CurvatureConfig = CurvatureConfig()) -> HessianOperator:
    """Boundary points for class ``c`` and the finite-difference operator on them.

    The mean is taken over accepted (converged) boundary points.
    """
    images = np.asarray(getattr(dataset, "images", dataset), dtype=np.float64)
    pred = predict(model, images)
    qualifying = np.flatnonzero(pred != c)
    if len(qualifying) == 0:
        raise NoQualifyingSamplesError(f"no qualifying samples: every sample is predicted as class {c}")
    used = qualifying if cfg.max_samples is None else qualifying[: cfg.max_samples]
    skipped = len(qualifying) - len(used)
    res = deepfool_targeted_batch(model, images[used], c, cfg.attack)
    ok = res.converged
    counts = {
        "qualifying": int(len(qualifying)),
        "accepted": int(ok.sum()),
        "skipped": int(skipped),
        "nonconverged": int((~ok).sum()),
        "dataset": int(len(images)),
    }
    if not ok.any():
        raise NoQualifyingSamplesError(f"no boundary point converged for class {c}")
    return HessianOperator(model, int(c), res.points[ok], res.sources[ok], cfg.fd_step, counts, cfg.chunk)


@dataclass
class DirectionSet:
    """Unit image-space directions with scores, sorted by descending score."""

    basis: np.ndarray
    scores: np.ndarray
    class_index: int = -1
    source: str = "curvature"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.basis) != len(self.scores):
            raise ValueError("one score per direction required")
        order = np.argsort(-self.scores, kind="stable")
        self.basis = self.basis[order]
        self.scores = self.scores[order]
        if "residuals" in self.meta:
            self.meta["residuals"] = list(np.asarray(self.meta["residuals"])[order])

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.basis.shape[1:])

    def _pick(self, idx) -> np.ndarray:
        return self.basis[np.asarray(idx, dtype=np.int64)]

    def indices(self, d: int, which: str) -> np.ndarray:
        if d > len(self):
            raise ValueError(f"requested {d} directions, only {len(self)} available")
        if which in ("pos", "positive"):
            return np.arange(d)
        if which in ("neg", "negative"):
            return np.arange(len(self) - 1, len(self) - 1 - d, -1)
        if which == "top":
            return np.argsort(-np.abs(self.scores), kind="stable")[:d]
        if which == "flat":
            return np.argsort(np.abs(self.scores), kind="stable")[:d]
        raise ValueError(f"unknown selection {which!r}")

    def select(self, d: int, which: str) -> np.ndarray:
        """``d`` directions: most positive, most negative, largest |score| or flattest."""
        return self._pick(self.indices(d, which))

    def top_positive(self) -> np.ndarray:
        return self.basis[0]

    def top_negative(self) -> np.ndarray:
        return self.basis[-1]


def _lanczos_vector(rng, q: np.ndarray, j: int, dim: int) -> np.ndarray | None:
    for _ in range(3):
        r = rng.standard_normal(dim)
        for _ in range(2):
            r -= q[:j].T @ (q[:j] @ r)
        nr = np.linalg.norm(r)
        if nr > 1e-8:
            return r / nr
    return None


def lanczos(apply, dim: int, iterations: int, seed: int = 0):
    """Lanczos tridiagonalization with full reorthogonalization.

    On breakdown the recurrence restarts from a random vector orthogonal to
    the current basis.  Returns ``(Q, alpha, beta, restarts)`` with Q of
    shape (m, dim).
    """
    m = min(iterations, dim)
    rng = np.random.default_rng(seed)
    q = np.zeros((m, dim))
    alpha = np.zeros(m)
    beta = np.zeros(max(m - 1, 0))
    restarts = 0
    v = rng.standard_normal(dim)
    q[0] = v / np.linalg.norm(v)
    scale = 0.0
    for j in range(m):
        w = apply(q[j])
        alpha[j] = q[j] @ w
        w = w - alpha[j] * q[j]
        if j > 0:
            w = w - beta[j - 1] * q[j - 1]
        for _ in range(2):
            w -= q[: j + 1].T @ (q[: j + 1] @ w)
        if j == m - 1:
            break
        b = np.linalg.norm(w)
        scale = max(scale, abs(alpha[j]), b)
        if b <= 1e-10 * max(scale, 1e-300):
            nxt = _lanczos_vector(rng, q, j + 1, dim)
            if nxt is None:
                return q[: j + 1], alpha[: j + 1], beta[:j], restarts
            restarts += 1
            beta[j] = 0.0
            q[j + 1] = nxt
        else:
            beta[j] = b
            q[j + 1] = w / b
    return q, alpha, beta, restarts


def lanczos_extreme_eigs(operator, k_top: int, k_bottom: int, iterations: int | None = None,
                         seed: int = 0, class_index: int | None = None) -> DirectionSet:
    """Largest ``k_top`` and smallest ``k_bottom`` eigenpairs of a symmetric operator.

    Residuals ||Av - lambda v|| are computed explicitly for each returned
    pair and stored in ``meta["residuals"]``; ``meta["complete"]`` says
    whether all of them met the tolerance.
    """
    dim = operator.dim
    if k_top + k_bottom > dim:
        raise ValueError(f"k_top + k_bottom = {k_top + k_bottom} exceeds dimension {dim}")
    if iterations is None:
        iterations = min(dim, max(2 * (k_top + k_bottom) + 20, 40))
    q, alpha, beta, restarts = lanczos(operator.apply, dim, iterations, seed)
    m = len(alpha)
    t = np.diag(alpha) + np.diag(beta[: m - 1], 1) + np.diag(beta[: m - 1], -1)
    theta, y = np.linalg.eigh(t)
    picks = list(range(m - 1, max(m - 1 - k_top, -1), -1))
    picks += [i for i in range(min(k_bottom, m)) if i not in picks]
    vecs = (y[:, picks].T @ q)
    vecs = np.array([fix_sign(v / np.linalg.norm(v)) for v in vecs])
    vals = theta[picks]
    resid = np.linalg.norm(operator.apply_many(vecs) - vals[:, None] * vecs, axis=1)
    norm_est = float(np.max(np.abs(theta))) if m else 0.0
    tol = 1e-3 * np.maximum(np.abs(vals), norm_est * 1e-3)
    meta = {
        "residuals": resid,
        "complete": bool(len(picks) == k_top + k_bottom and np.all(resid <= tol)),
        "lanczos_steps": int(m),
        "restarts": int(restarts),
        "norm_estimate": norm_est,
    }
    shape = getattr(operator, "image_shape", (dim,))
    cls = class_index if class_index is not None else getattr(operator, "target", -1)
    return DirectionSet(vecs.reshape((len(picks),) + tuple(shape)), vals, cls, "curvature", meta)


def principal_curvatures(model: Model, dataset, c: int, cfg: CurvatureConfig = CurvatureConfig()) -> DirectionSet:
    """Mean principal directions and curvature scores of the class-c boundary."""
    if cfg.assemble not in ("auto", "always", "never"):
        raise ValueError(f"assemble must be auto, always or never, got {cfg.assemble!r}")
    op = build_operator(model, dataset, c, cfg)
    assembled = cfg.assemble == "always" or (cfg.assemble == "auto" and op.dim <= cfg.assemble_max_dim)
    if cfg.full_spectrum and not assembled:
        raise ValueError("full_spectrum needs the assembled operator")
    solver = op.assemble() if assembled else op
    if cfg.full_spectrum:
        ds = full_eigs(solver, c)
    else:
        ds = lanczos_extreme_eigs(solver, cfg.k_top, cfg.k_bottom, cfg.iterations, cfg.seed, c)
    ds.meta.update(op.counts)
    ds.meta["fd_step"] = cfg.fd_step
    ds.meta["assembled"] = bool(assembled)
    return ds


def full_eigs(operator: MatrixOperator, class_index: int = -1) -> DirectionSet:
    """Every eigenpair of an assembled symmetric operator."""
    vals, vecs = np.linalg.eigh(operator.matrix)
    vecs = np.array([fix_sign(v) for v in vecs.T])
    resid = np.linalg.norm(operator.apply_many(vecs) - vals[:, None] * vecs, axis=1)
    meta = {"residuals": resid, "complete": True, "lanczos_steps": 0, "restarts": 0,
            "norm_estimate": float(np.max(np.abs(vals)))}
    return DirectionSet(vecs.reshape((len(vals),) + tuple(operator.image_shape)), vals,
                        class_index, "curvature", meta)


# --------------------------------------------------------------------------
# serialization

_DIR_MAGIC = b"CBDIR1"


def save_directions(ds: DirectionSet, path) -> Path:
    """Binary CBDIR1 file plus a ``.txt`` sidecar of statistics."""
    path = Path(path)
    shape = ds.shape
    with open(path, "wb") as fh:
        fh.write(_DIR_MAGIC)
        fh.write(struct.pack("<iII", ds.class_index, len(ds), len(shape)))
        fh.write(struct.pack("<" + "I" * len(shape), *shape))
        fh.write(np.ascontiguousarray(ds.scores, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.basis, dtype="<f8").tobytes())
    stats = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in ds.meta.items()}
    stats["residuals"] = [float(r) for r in stats.get("residuals", [])]
    stats["source"] = ds.source
    sidecar = path.with_suffix(path.suffix + ".txt")
    sidecar.write_text("\n".join(f"{k} = {json.dumps(stats[k])}" for k in sorted(stats)) + "\n",
                       encoding="utf-8")
    return path


def load_directions(path) -> DirectionSet:
    raw = Path(path).read_bytes()
    if raw[:6] != _DIR_MAGIC:
        raise ValueError(f"{path}: magic mismatch")
    cls, count, ndim = struct.unpack_from("<iII", raw, 6)
    pos = 18
    shape = struct.unpack_from("<" + "I" * ndim, raw, pos)
    pos += 4 * ndim
    size = int(np.prod(shape))
    if len(raw) != pos + 8 * count * (1 + size):
        raise ValueError(f"{path}: payload length does not match header")
    scores = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64)
    pos += 8 * count
    basis = np.frombuffer(raw, dtype="<f8", count=count * size, offset=pos).astype(np.float64)
    meta = {}
    sidecar = Path(str(path) + ".txt")
    source = "curvature"
    if sidecar.exists():
        for line in sidecar.read_text(encoding="utf-8").splitlines():
            if " = " in line:
                k, v = line.split(" = ", 1)
                meta[k] = json.loads(v)
        source = meta.pop("source", source)
    return DirectionSet(basis.reshape((count,) + tuple(shape)), scores, cls, source, meta)
