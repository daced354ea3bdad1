"""Shared numerical oracles for the test-suite."""

import numpy as np

from curvebench import autodiff as ad


def scalarize(out: ad.Tensor, probe: np.ndarray) -> ad.Tensor:
    """<out, probe> as a scalar tensor, so any op can be checked against FD."""
    return ad.sum_all(ad.mul(out, ad.Tensor(probe)))


def fd_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def check_op(op, inputs: list[np.ndarray], rng, h: float = 1e-6) -> float:
    """Worst relative error between tape gradients and FD over all inputs."""
    tensors = [ad.Tensor(x) for x in inputs]
    with ad.Tape() as tape:
        out = op(*tensors)
        probe = rng.standard_normal(out.shape)
        loss = scalarize(out, probe) if out.ndim else out
    grads = tape.backward(loss)
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(xk, k=k):
            args = [ad.Tensor(v) for v in inputs[:k]] + [ad.Tensor(xk)] + [ad.Tensor(v) for v in inputs[k + 1:]]
            o = op(*args)
            return float(np.sum(o.data * probe)) if o.ndim else o.item()
        num = fd_gradient(f, x.copy(), h)
        worst = max(worst, rel_err(grads[tensors[k]].data, num))
    return worst


def nested_fd_hessian(op) -> np.ndarray:
    """Dense oracle for a boundary-point operator from logits alone.

    Gradients of g_n = F_c - F_src are central differences of the logits
    (inner step 1e-5); the Hessian column j is their central difference
    along e_j with the operator's own step h, averaged over the points.
    On a piecewise-linear net the inner step only rarely crosses a kink, so
    this tracks the backpropagated-gradient operator closely.
    """
    from curvebench.models import logits_batch

    h, eps, dim = op.fd_step, 1e-5, op.dim
    eye = np.eye(dim)
    out = np.zeros((dim, dim))
    for p, s in zip(op.points.reshape(op.n_used, -1), op.sources):
        def g(z):
            z = logits_batch(op.model, z.reshape((-1,) + op.image_shape))
            return z[:, op.target] - z[:, s]
        for j in range(dim):
            for sign in (1.0, -1.0):
                y = p + sign * h * eye[j]
                out[:, j] += sign * (g(y + eps * eye) - g(y - eps * eye)) / (2 * eps) / (2 * h)
    return out / op.n_used


def quadratic_operator(monkeypatch, a, n_points=3, seed=0):
    """Operator whose g = F_1 - F_0 is x^T A x, via a gradient hook."""
    from curvebench import curvature as cv
    from curvebench.models import linear_model

    dim = a.shape[0]
    shape = (1, 1, dim)

    def grads(model, images, weights):
        x = np.asarray(images).reshape(len(images), -1)
        gq = x @ (a + a.T).T  # gradient of x^T A x; F_0 is identically zero
        return None, (weights[:, 1:2] * gq).reshape((len(x),) + shape)

    monkeypatch.setattr(cv, "input_gradients", grads)
    model = linear_model(np.zeros((2, dim)), np.zeros(2), shape)
    pts = np.random.default_rng(seed).standard_normal((n_points,) + shape)
    return cv.HessianOperator(model, 1, pts, np.zeros(n_points, int), 1e-2)


# acceptance results, reported in the terminal summary
ACCEPTANCE: dict = {}


def report(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
