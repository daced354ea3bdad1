"""Reference classifiers built on the autodiff core.

A :class:`Model` is a JSON-able descriptor plus a list of float64 parameter
arrays.  All forward passes are batched over a leading sample axis; the
logits are the pre-softmax class scores every experiment consumes.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset

__all__ = [
    "Model",
    "TrainConfig",
    "TrainingDivergedError",
    "ARCHITECTURES",
    "layer_list",
    "param_shapes",
    "build_model",
    "linear_model",
    "forward",
    "logits",
    "logits_batch",
    "predict",
    "input_gradients",
    "class_gradients",
    "jacobian",
    "class_score_along",
    "train",
    "accuracy",
]

log = logging.getLogger(__name__)

ARCHITECTURES = ("linear", "mlp-2x64", "cnn-small", "mlp-<depth>x<width>")


def layer_list(arch: str, input_shape: Sequence[int], num_classes: int) -> list[dict]:
    """Expand an architecture name into an explicit layer list."""
    c, h, w = (int(v) for v in input_shape)
    dim = c * h * w
    if arch == "linear":
        return [{"type": "flatten"}, {"type": "dense", "in": dim, "out": num_classes}]
    m = re.fullmatch(r"mlp-(\d+)x(\d+)", arch)
    if m:
        depth, width = int(m.group(1)), int(m.group(2))
        layers: list[dict] = [{"type": "flatten"}]
        fan_in = dim
        for _ in range(depth):
            layers += [{"type": "dense", "in": fan_in, "out": width}, {"type": "relu"}]
            fan_in = width
        layers.append({"type": "dense", "in": fan_in, "out": num_classes})
        return layers
    if arch == "cnn-small":
        if h < 4 or w < 4:
            raise ValueError(f"cnn-small needs images of at least 4x4, got {h}x{w}")
        h2, w2 = (h // 2) // 2, (w // 2) // 2
        return [
            {"type": "conv", "in": c, "out": 8, "k": 3, "stride": 1, "pad": 1},
            {"type": "relu"},
            {"type": "maxpool"},
            {"type": "conv", "in": 8, "out": 16, "k": 3, "stride": 1, "pad": 1},
            {"type": "relu"},
            {"type": "maxpool"},
            {"type": "flatten"},
            {"type": "dense", "in": 16 * h2 * w2, "out": num_classes},
        ]
    raise ValueError(f"unknown architecture {arch!r}; known: {', '.join(ARCHITECTURES)}")


def param_shapes(descriptor: dict) -> list[tuple[int, ...]]:
    layers = layer_list(descriptor["arch"], descriptor["input_shape"], descriptor["num_classes"])
    if "layers" in descriptor and descriptor["layers"] != layers:
        raise ValueError("layer list does not match architecture name")
    shapes: list[tuple[int, ...]] = []
    for layer in layers:
        if layer["type"] == "dense":
            shapes += [(layer["out"], layer["in"]), (layer["out"],)]
        elif layer["type"] == "conv":
            shapes += [(layer["out"], layer["in"], layer["k"], layer["k"]), (layer["out"],)]
    return shapes


@dataclass(frozen=True)
class Model:
    descriptor: dict
    params: list
    input_map: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        expected = param_shapes(self.descriptor)
        got = [tuple(p.shape) for p in self.params]
        if got != expected:
            raise ValueError(f"parameter shapes {got} do not match descriptor {expected}")
        frozen = []
        for p in self.params:
            view = np.asarray(p, dtype=np.float64).view()
            view.flags.writeable = False
            frozen.append(view)
        object.__setattr__(self, "params", frozen)

    @property
    def arch(self) -> str:
        return self.descriptor["arch"]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.descriptor["input_shape"])

    @property
    def num_classes(self) -> int:
        return int(self.descriptor["num_classes"])

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def layers(self) -> list[dict]:
        return self.descriptor["layers"]

    def with_params(self, params) -> "Model":
        return Model(self.descriptor, [np.array(p, dtype=np.float64) for p in params], self.input_map)

    def with_input_map(self, matrix: np.ndarray | None) -> "Model":
        """Same network behind a fixed linear preprocessing map on flattened inputs."""
        if matrix is not None:
            matrix = np.asarray(matrix, dtype=np.float64)
            if matrix.shape != (self.input_dim, self.input_dim):
                raise ValueError(f"input map {matrix.shape} does not act on {self.input_dim}-dim inputs")
        return Model(self.descriptor, self.params, matrix)


def build_model(arch: str, input_shape: Sequence[int], num_classes: int, seed: int = 0,
                zero_last: bool = False) -> Model:
    """He-initialized weights (std sqrt(2/fan_in)), zero biases."""
    input_shape = [int(v) for v in input_shape]
    desc = {
        "arch": arch,
        "input_shape": input_shape,
        "num_classes": int(num_classes),
        "layers": layer_list(arch, input_shape, num_classes),
    }
    rng = np.random.default_rng(seed)
    params = []
    weighted = [layer for layer in desc["layers"] if layer["type"] in ("dense", "conv")]
    for i, layer in enumerate(weighted):
        if layer["type"] == "dense":
            shape = (layer["out"], layer["in"])
            fan_in = layer["in"]
        else:
            shape = (layer["out"], layer["in"], layer["k"], layer["k"])
            fan_in = layer["in"] * layer["k"] ** 2
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        if zero_last and i == len(weighted) - 1:
            w = np.zeros(shape)
        params += [w, np.zeros(layer["out"])]
    return Model(desc, params)


def linear_model(weight: np.ndarray, bias: np.ndarray, input_shape: Sequence[int]) -> Model:
    """Affine classifier F(i) = W flatten(i) + b with explicit parameters."""
    weight = np.asarray(weight, dtype=np.float64)
    desc = {
        "arch": "linear",
        "input_shape": [int(v) for v in input_shape],
        "num_classes": int(weight.shape[0]),
        "layers": layer_list("linear", input_shape, weight.shape[0]),
    }
    return Model(desc, [weight, np.asarray(bias, dtype=np.float64)])


def forward(model: Model, x: Tensor, params: Sequence[Tensor] | None = None) -> Tensor:
    """Logits for a batch ``x`` of shape (N, C, H, W) as a taped Tensor."""
    if tuple(x.shape[1:]) != model.input_shape:
        raise ad.ShapeError(f"input shape {x.shape[1:]} does not match model input {model.input_shape}")
    if params is None:
        params = [Tensor(p, _trusted=True) for p in model.params]
    h = x
    if model.input_map is not None:
        n = x.shape[0]
        flat = ad.flatten(h)
        h = ad.matmul(flat, Tensor(model.input_map.T, _trusted=True))
        h = ad.reshape(h, (n,) + model.input_shape)
    k = 0
    for layer in model.layers:
        kind = layer["type"]
        if kind == "dense":
            h = ad.bias_add(ad.matmul(h, _transpose(params[k])), params[k + 1])
            k += 2
        elif kind == "conv":
            h = ad.bias_add(ad.conv2d(h, params[k], stride=layer["stride"], padding=layer["pad"]),
                            params[k + 1], axis=1)
            k += 2
        elif kind == "relu":
            h = ad.relu(h)
        elif kind == "maxpool":
            h = ad.maxpool2x2(h)
        elif kind == "flatten":
            h = ad.flatten(h)
        else:
            raise ValueError(f"unknown layer type {kind!r}")
    return h


def _transpose(w: Tensor) -> Tensor:
    # weights are stored (out, in); transposing is a pure relabeling
    wt = w.data.T
    out = ad._record(wt, (w,), lambda g: (g.T,), "transpose")
    return out


def _batch(model: Model, images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.shape == model.input_shape:
        x = x[None]
    elif x.ndim == 2 and x.shape[1] == model.input_dim:
        x = x.reshape((-1,) + model.input_shape)
    if tuple(x.shape[1:]) != model.input_shape:
        raise ad.ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x


def logits_batch(model: Model, images) -> np.ndarray:
    """(N, C) logits for an (N, C, H, W) batch."""
    x = _batch(model, images)
    return forward(model, Tensor(x, _trusted=True)).numpy()


def logits(model: Model, image) -> np.ndarray:
    """Class scores F_c(i) for one image."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.input_shape:
        raise ad.ShapeError(f"image shape {image.shape} does not match model input {model.input_shape}")
    return logits_batch(model, image[None])[0]


def predict(model: Model, images) -> np.ndarray:
    """Argmax labels; ties go to the lowest class index."""
    return np.argmax(logits_batch(model, images), axis=1)


def input_gradients(model: Model, images, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample gradient of sum_k weights[n, k] * F_k(i_n) w.r.t. i_n.

    Returns ``(logits, gradients)`` where gradients has the batch's shape.
    """
    x = _batch(model, images)
    weights = np.asarray(weights, dtype=np.float64)
    xt = Tensor(x, _trusted=True)
    with Tape() as tape:
        out = forward(model, xt)
        total = ad.sum_all(ad.mul(out, Tensor(weights, _trusted=True)))
    grads = tape.backward(total)
    return out.numpy(), grads[xt].numpy()


def class_gradients(model: Model, images, classes) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of F_{classes[n]} at each image."""
    x = _batch(model, images)
    w = np.zeros((len(x), model.num_classes))
    w[np.arange(len(x)), np.asarray(classes)] = 1.0
    return input_gradients(model, x, w)


def jacobian(model: Model, images) -> tuple[np.ndarray, np.ndarray]:
    """Logits (N, C) and full input Jacobian (N, C, D)."""
    x = _batch(model, images)
    n, c = len(x), model.num_classes
    rep = np.tile(x, (c, 1, 1, 1))
    w = np.zeros((c * n, c))
    w[np.arange(c * n), np.repeat(np.arange(c), n)] = 1.0
    out, g = input_gradients(model, rep, w)
    jac = g.reshape(c, n, -1).transpose(1, 0, 2)
    return out[:n], jac


def class_score_along(model: Model, image, direction, c: int, s_grid) -> np.ndarray:
    """F_c(i + s * d/|d|) for each s."""
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d)
    if norm == 0:
        raise ValueError("direction must be nonzero")
    d_hat = d / norm
    s = np.asarray(s_grid, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    batch = image[None] + s.reshape((-1,) + (1,) * image.ndim) * d_hat[None]
    return logits_batch(model, batch)[:, c]


# --------------------------------------------------------------------------
# training


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) in epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning rate, momentum and weight decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be positive")


def train(model: Model, dataset: Dataset, cfg: TrainConfig,
          test: Dataset | None = None) -> tuple[Model, list[dict]]:
    """SGD with momentum on mean cross-entropy.

    Returns the trained model and one log row per epoch with keys
    ``epoch, loss, train_acc, test_acc`` (test_acc is NaN without a test set).
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = [np.array(p, dtype=np.float64) for p in model.params]
    velocity = [np.zeros_like(p) for p in params]
    history = []
    n = len(dataset)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pt = [Tensor(p, _trusted=False) for p in params]
            xt = Tensor(dataset.images[idx], _trusted=False)
            with Tape() as tape:
                loss = ad.cross_entropy(forward(model, xt, pt), dataset.labels[idx])
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(epoch)
            grads = tape.backward(loss)
            for j, p in enumerate(params):
                g = grads[pt[j]].data + cfg.weight_decay * p
                velocity[j] = cfg.momentum * velocity[j] + g
                params[j] = p - cfg.learning_rate * velocity[j]
            total += loss.item() * len(idx)
            seen += len(idx)
        for p in params:
            if not np.all(np.isfinite(p)):
                raise TrainingDivergedError(epoch)
        current = model.with_params(params)
        row = {
            "epoch": epoch,
            "loss": total / seen,
            "train_acc": accuracy(current, dataset),
            "test_acc": accuracy(current, test) if test is not None else float("nan"),
        }
        log.debug("epoch %d loss %.4f train %.3f", epoch, row["loss"], row["train_acc"])
        history.append(row)
    return model.with_params(params), history


def accuracy(model: Model, dataset: Dataset, preprocess=None, batch_size: int = 512) -> float:
    """Fraction of samples whose argmax logit (after ``preprocess``) equals the label.

    ``preprocess`` is anything with an ``apply(images)`` method, such as a
    :class:`~curvebench.data.ResampleUnit` or :class:`~curvebench.subspace.Subspace`,
    or a plain callable.
    """
    if len(dataset) == 0:
        return float("nan")
    hits = 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start:start + batch_size]
        if preprocess is not None:
            x = preprocess.apply(x) if hasattr(preprocess, "apply") else preprocess(x)
        hits += int(np.sum(predict(model, x) == dataset.labels[start:start + batch_size]))
    return hits / len(dataset)
