"""Gradient-based perturbations: FGSM, DeepFool variants, UAPs, saliency.

All attacks work in mean-normalized input space without intensity clipping.
Batched entry points (``*_batch``) vectorize over samples; the single-image
functions are thin wrappers around them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .models import Model, class_gradients, forward, input_gradients, jacobian, logits_batch, predict

__all__ = [
    "AttackConfig",
    "PerturbationRecord",
    "fgsm",
    "fgsm_batch",
    "fgsm_min_epsilon",
    "deepfool",
    "deepfool_batch",
    "deepfool_targeted",
    "deepfool_targeted_batch",
    "deepfool_confined",
    "fooling_rate",
    "uap_iterative",
    "uap_subspace",
    "random_perturbation",
    "saliency",
    "saliency_batch",
    "save_perturbations",
    "load_perturbations",
]


@dataclass(frozen=True)
class AttackConfig:
    max_iterations: int = 50
    overshoot: float = 0.02
    tolerance: float = 1e-4
    epsilon: float = 0.1
    xi: float = 1.0
    seed: int = 0
    uap_passes: int = 10
    uap_target: float = 0.8

    def __post_init__(self):
        if self.overshoot < 0:
            raise ValueError("overshoot must be >= 0")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class PerturbationRecord:
    delta: np.ndarray
    source_label: int
    end_label: int
    iterations: int
    l2_norm: float
    method: str
    converged: bool

    @classmethod
    def make(cls, delta, source, end, iterations, method, converged) -> "PerturbationRecord":
        delta = np.array(delta, dtype=np.float64)
        return cls(delta, int(source), int(end), int(iterations), float(np.linalg.norm(delta)),
                   method, bool(converged))


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(len(x), -1)


# --------------------------------------------------------------------------
# FGSM


def _loss_gradients(model: Model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample gradient of cross-entropy(logits(x_n), labels[n])."""
    xt = Tensor(x, _trusted=True)
    with Tape() as tape:
        loss = ad.scale(ad.cross_entropy(forward(model, xt), labels), float(len(x)))
    return tape.backward(loss)[xt].numpy()


def fgsm_batch(model: Model, images, labels, epsilon: float) -> list[PerturbationRecord]:
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    src = predict(model, x)
    delta = epsilon * np.sign(_loss_gradients(model, x, labels))
    end = predict(model, x + delta)
    return [PerturbationRecord.make(delta[n], src[n], end[n], 1, "fgsm", end[n] != src[n])
            for n in range(len(x))]


def fgsm(model: Model, image, label: int, epsilon: float) -> PerturbationRecord:
    """delta = epsilon * sign(grad of cross-entropy), sign(0) = 0."""
    return fgsm_batch(model, np.asarray(image)[None], [label], epsilon)[0]


def fgsm_min_epsilon(model: Model, images, labels=None, eps_start: float = 1e-3,
                     eps_max: float = 1e3, bisections: int = 40) -> list[PerturbationRecord]:
    """Smallest FGSM step that changes each sample's predicted label.

    The sign direction is fixed by the clean gradient; epsilon is grown
    geometrically until the label flips and then bisected.  Samples that
    never flip below ``eps_max`` come back non-converged.
    """
    x = np.asarray(images, dtype=np.float64)
    src = predict(model, x)
    labels = src if labels is None else np.asarray(labels, dtype=np.int64)
    direction = np.sign(_loss_gradients(model, x, labels))
    n = len(x)
    shape = (n,) + (1,) * (x.ndim - 1)

    def flips(eps):
        return predict(model, x + eps.reshape(shape) * direction) != src

    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    eps = np.full(n, eps_start)
    while True:
        open_ = np.isinf(hi) & (eps <= eps_max)
        if not open_.any():
            break
        f = flips(np.where(open_, eps, 0.0))
        hi = np.where(open_ & f, eps, hi)
        lo = np.where(open_ & ~f, eps, lo)
        eps = np.where(open_ & ~f, eps * 2.0, eps)
    found = np.isfinite(hi)
    for _ in range(bisections):
        mid = 0.5 * (lo + np.where(found, hi, 0.0))
        f = flips(np.where(found, mid, 0.0))
        hi = np.where(found & f, mid, hi)
        lo = np.where(found & ~f, mid, lo)
    final = np.where(found, hi, 0.0)
    delta = final.reshape(shape) * direction
    end = predict(model, x + delta)
    return [PerturbationRecord.make(delta[i], src[i], end[i], 1, "fgsm-min", found[i] and end[i] != src[i])
            for i in range(n)]


# --------------------------------------------------------------------------
# DeepFool


def _project_rows(w: np.ndarray, basis: np.ndarray | None) -> np.ndarray:
    if basis is None:
        return w
    return (w @ basis.T) @ basis


def deepfool_batch(model: Model, images, cfg: AttackConfig = AttackConfig(),
                   subspace=None, method: str | None = None) -> list[PerturbationRecord]:
    """Multiclass DeepFool w.r.t. each sample's own predicted class.

    With ``subspace`` (anything exposing an (m, D) orthonormal ``basis``),
    every gradient difference is projected onto it before the step is
    chosen and computed, so the accumulated perturbation stays inside.
    """
    x0 = np.asarray(images, dtype=np.float64)
    n = len(x0)
    shape = x0.shape
    flat0 = _flat(x0)
    basis = None if subspace is None else np.asarray(subspace.basis, dtype=np.float64).reshape(
        -1, flat0.shape[1])
    scale = 1.0 + cfg.overshoot
    src = predict(model, x0)
    r_tot = np.zeros_like(flat0)
    iters = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    rows = np.arange(n)

    for it in range(cfg.max_iterations + 1):
        idx = rows[active]
        if len(idx) == 0:
            break
        xa = (flat0[idx] + scale * r_tot[idx]).reshape((len(idx),) + shape[1:])
        if it == cfg.max_iterations:
            lab = predict(model, xa)
            converged[idx] = lab != src[idx]
            break
        out, jac = jacobian(model, xa)
        lab = np.argmax(out, axis=1)
        flipped = lab != src[idx]
        converged[idx[flipped]] = True
        active[idx[flipped]] = False
        keep = ~flipped
        if not keep.any():
            continue
        idx, out, jac = idx[keep], out[keep], jac[keep]
        s = src[idx]
        k = np.arange(len(idx))
        f = out - out[k, s][:, None]
        w = jac - jac[k, s][:, None, :]
        raw = np.linalg.norm(w, axis=2)
        w = _project_rows(w, basis)
        wn = np.linalg.norm(w, axis=2)
        # a projected gradient at round-off level means no usable direction
        wn[wn <= 1e-12 * raw] = 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            pert = np.abs(f) / wn
        pert[k, s] = np.inf
        pert[~np.isfinite(pert) | (wn == 0)] = np.inf
        best = np.argmin(pert, axis=1)
        stuck = ~np.isfinite(pert[k, best])
        active[idx[stuck]] = False
        go = ~stuck
        if go.any():
            g_idx = idx[go]
            kb = best[go]
            kk = k[go]
            wk = w[kk, kb]
            step = (np.abs(f[kk, kb]) / wn[kk, kb] ** 2)[:, None] * wk
            r_tot[g_idx] += step
            iters[g_idx] += 1

    delta = (scale * r_tot).reshape(shape)
    end = predict(model, x0 + delta)
    tag = method or ("deepfool" if subspace is None else "deepfool-confined")
    return [PerturbationRecord.make(delta[i], src[i], end[i], iters[i], tag,
                                    converged[i] and end[i] != src[i]) for i in range(n)]


def deepfool(model: Model, image, cfg: AttackConfig = AttackConfig()) -> PerturbationRecord:
    return deepfool_batch(model, np.asarray(image)[None], cfg)[0]


def deepfool_confined(model: Model, image, subspace, cfg: AttackConfig = AttackConfig()) -> PerturbationRecord:
    """DeepFool with all linearized-step gradients projected onto ``subspace``."""
    return deepfool_batch(model, np.asarray(image)[None], cfg, subspace=subspace)[0]


@dataclass
class BoundaryResult:
    points: np.ndarray
    sources: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray = field(default=None)


def deepfool_targeted_batch(model: Model, images, c: int, cfg: AttackConfig = AttackConfig()) -> BoundaryResult:
    """Walk each sample onto the boundary F_c = F_src, src = clean prediction.

    Newton steps on g = F_c - F_src until |g| <= tol * (|g(i)| + tol).
    The source class is frozen at entry.  Returns boundary points, not
    overshot adversaries.
    """
    x = np.array(images, dtype=np.float64)
    n = len(x)
    src = predict(model, x)
    if np.any(src == c):
        raise ValueError(f"targeted DeepFool needs samples not predicted as class {c}")
    flat = _flat(x)
    rows = np.arange(n)
    weights = np.zeros((n, model.num_classes))
    weights[rows, c] = 1.0
    weights[rows, src] -= 1.0
    tol = cfg.tolerance
    g0 = None
    thresh = None
    active = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    residual = np.zeros(n)
    for it in range(cfg.max_iterations + 1):
        idx = rows[active]
        if len(idx) == 0:
            break
        xa = flat[idx].reshape((len(idx),) + x.shape[1:])
        out, grad = input_gradients(model, xa, weights[idx])
        g = out[np.arange(len(idx)), c] - out[np.arange(len(idx)), src[idx]]
        if g0 is None:
            g0 = g.copy()
            thresh = tol * (np.abs(g0) + tol)
        residual[idx] = np.abs(g)
        done = np.abs(g) <= thresh[idx]
        converged[idx[done]] = True
        active[idx[done]] = False
        if it == cfg.max_iterations:
            break
        go = ~done
        grad = _flat(grad)[go]
        gn2 = np.sum(grad**2, axis=1)
        dead = gn2 == 0
        active[idx[go][dead]] = False
        live = idx[go][~dead]
        if len(live):
            flat[live] -= (g[go][~dead] / gn2[~dead])[:, None] * grad[~dead]
            iters[live] += 1
    return BoundaryResult(flat.reshape(x.shape), src, converged, iters, residual)


def deepfool_targeted(model: Model, image, c: int, cfg: AttackConfig = AttackConfig()) -> tuple[np.ndarray, bool, int]:
    """Boundary point between class ``c`` and the predicted class of ``image``.

    Returns ``(point, converged, iterations)``.
    """
    res = deepfool_targeted_batch(model, np.asarray(image)[None], c, cfg)
    return res.points[0], bool(res.converged[0]), int(res.iterations[0])


# --------------------------------------------------------------------------
# universal perturbations


def fooling_rate(model: Model, images, perturbation, clean_labels=None) -> float:
    """Fraction of samples whose predicted label changes under the perturbation.

    ``perturbation`` is a single image-shaped vector or one per sample.
    """
    x = np.asarray(images, dtype=np.float64)
    if len(x) == 0:
        return float("nan")
    clean = predict(model, x) if clean_labels is None else np.asarray(clean_labels)
    return float(np.mean(predict(model, x + np.asarray(perturbation, dtype=np.float64)) != clean))


def _ball(v: np.ndarray, xi: float) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v if norm <= xi else v * (xi / norm)


def uap_iterative(model: Model, dataset, xi: float, cfg: AttackConfig = AttackConfig()) -> np.ndarray:
    """Universal perturbation by aggregating DeepFool steps into an l2 ball.

    Passes over a seeded shuffle of the data; stops once the fooling rate
    exceeds ``cfg.uap_target`` or after ``cfg.uap_passes`` passes, and
    returns the best perturbation seen.
    """
    if xi <= 0:
        raise ValueError("xi must be > 0")
    x = np.asarray(getattr(dataset, "images", dataset), dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    clean = predict(model, x)
    v = np.zeros(x.shape[1:])
    best_v, best_rate = v.copy(), 0.0
    for _ in range(cfg.uap_passes):
        for n in rng.permutation(len(x)):
            xv = x[n] + v
            if predict(model, xv[None])[0] != clean[n]:
                continue
            rec = deepfool_batch(model, xv[None], cfg)[0]
            if rec.converged:
                v = _ball(v + rec.delta, xi)
        rate = fooling_rate(model, x, v, clean)
        if rate > best_rate:
            best_v, best_rate = v.copy(), rate
        if rate > cfg.uap_target:
            break
    return best_v


def uap_subspace(directions, m: int, xi: float, seed: int = 0, which: str = "top") -> np.ndarray:
    """Random unit combination of ``m`` directions, scaled to norm ``xi``.

    ``which="top"`` uses the largest-|score| directions, ``"flat"`` the
    smallest-|score| ones.
    """
    basis = directions.select(m, which)
    rng = np.random.default_rng(seed)
    coef = rng.standard_normal(len(basis))
    v = np.tensordot(coef, basis, axes=1)
    return v * (xi / np.linalg.norm(v))


def random_perturbation(shape, xi: float, seed: int = 0) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal(shape)
    return v * (xi / np.linalg.norm(v))


# --------------------------------------------------------------------------
# saliency


def saliency_batch(model: Model, images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    _, g = class_gradients(model, x, predict(model, x))
    return g


def saliency(model: Model, image) -> np.ndarray:
    """Raw gradient of the predicted class score w.r.t. the input."""
    return saliency_batch(model, np.asarray(image)[None])[0]


# --------------------------------------------------------------------------
# serialization

_PRT_MAGIC = b"CBPRT1"


def save_perturbations(records: Sequence[PerturbationRecord], path) -> None:
    """Binary set: magic, count, rank, shape, then one block per record."""
    if not records:
        raise ValueError("no records to save")
    shape = records[0].delta.shape
    with open(path, "wb") as fh:
        fh.write(_PRT_MAGIC)
        fh.write(struct.pack("<II", len(records), len(shape)))
        fh.write(struct.pack("<" + "I" * len(shape), *shape))
        for r in records:
            if r.delta.shape != shape:
                raise ValueError(f"inconsistent delta shape {r.delta.shape} vs {shape}")
            fh.write(np.ascontiguousarray(r.delta, dtype="<f8").tobytes())
            tag = r.method.encode("utf-8")
            fh.write(struct.pack("<iiidBH", r.source_label, r.end_label, r.iterations, r.l2_norm,
                                 int(r.converged), len(tag)))
            fh.write(tag)


def load_perturbations(path) -> list[PerturbationRecord]:
    raw = Path(path).read_bytes()
    if raw[:6] != _PRT_MAGIC:
        raise ValueError(f"{path}: magic mismatch")
    count, ndim = struct.unpack_from("<II", raw, 6)
    pos = 14
    shape = struct.unpack_from("<" + "I" * ndim, raw, pos)
    pos += 4 * ndim
    size = int(np.prod(shape))
    fixed = struct.calcsize("<iiidBH")
    out = []
    for _ in range(count):
        if len(raw) < pos + 8 * size + fixed:
            raise ValueError(f"{path}: truncated record")
        delta = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * size
        src, end, it, norm, conv, tlen = struct.unpack_from("<iiidBH", raw, pos)
        pos += fixed
        tag = raw[pos:pos + tlen].decode("utf-8")
        pos += tlen
        out.append(PerturbationRecord(delta, src, end, it, norm, tag, bool(conv)))
    return out
