"""Central finite-difference gradient checking (uses forward passes only)."""

from __future__ import annotations

import zlib
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .rng import CounterRNG
from .tensor import Tensor


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)`` (0 when both vanish)."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place.

    With ``indices`` (flat positions) only those entries are estimated.
    """
    flat = x.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    grad = np.zeros(flat.size if indices is None else len(indices))
    for j, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        grad[i if indices is None else j] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape) if indices is None else grad


def check_op(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], seed: int = 0,
             h: float = 1e-5, wrt: Sequence[int] | None = None) -> float:
    """Max relative error between autodiff and finite differences for ``sum(w * fn(*x))``.

    ``w`` is a fixed random weighting so every output element matters.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    weights = CounterRNG(seed).normal(out.shape) if out.shape else np.array(1.0)
    loss = (out * weights).sum()
    loss.backward()

    def f():
        with T.no_grad():
            return float((fn(*[Tensor(a) for a in arrays]).data * weights).sum())

    worst = 0.0
    for i in wrt:
        num = numerical_gradient(f, arrays[i], h)
        worst = max(worst, relative_error(tensors[i].grad, num))
    return worst


# ---------------------------------------------------------------------------
# catalog of differentiable ops with random input factories
# ---------------------------------------------------------------------------

def _gain_bias(rng, d):
    return [rng.normal(d), rng.normal(d)]


def _bn_train(x, g, b):
    d = x.shape[1]
    return T.batch_norm_1d(x, g, b, np.zeros(d), np.ones(d), training=True)


def _bn_eval(x, g, b):
    d = x.shape[1]
    return T.batch_norm_1d(x, g, b, np.full(d, 0.3), np.full(d, 1.7), training=False)


def _dropout(x):
    return T.dropout(x, 0.4, True, CounterRNG(5))  # fixed mask on every call


OP_CASES = {
    "add": (lambda a, b: a + b, lambda r: [r.normal((3, 4)), r.normal(4)]),
    "sub": (lambda a, b: a - b, lambda r: [r.normal((3, 4)), r.normal((3, 1))]),
    "mul": (lambda a, b: a * b, lambda r: [r.normal((3, 4)), r.normal((1, 4))]),
    "div": (lambda a, b: a / b, lambda r: [r.normal((3, 4)), 2.0 + r.uniform((3, 4))]),
    "neg": (lambda a: -a, lambda r: [r.normal((2, 5))]),
    "power": (lambda a: a ** 3, lambda r: [r.normal((2, 5))]),
    "exp": (T.exp, lambda r: [r.normal((2, 5))]),
    "log": (T.log, lambda r: [0.5 + r.uniform((2, 5))]),
    "sqrt": (T.sqrt, lambda r: [0.5 + r.uniform((2, 5))]),
    "tanh": (T.tanh, lambda r: [r.normal((2, 5))]),
    "relu": (T.relu, lambda r: [r.normal((2, 5))]),
    "gelu": (T.gelu, lambda r: [r.normal((2, 5))]),
    "sum": (lambda a: T.tsum(a, axis=1), lambda r: [r.normal((3, 4, 2))]),
    "mean": (lambda a: T.mean(a, axis=(0, 2), keepdims=True), lambda r: [r.normal((3, 4, 2))]),
    "reshape": (lambda a: a.reshape(4, 6), lambda r: [r.normal((2, 3, 4))]),
    "transpose": (lambda a: a.transpose(2, 0, 1), lambda r: [r.normal((2, 3, 4))]),
    "swapaxes": (lambda a: T.swapaxes(a, 0, 2), lambda r: [r.normal((2, 3, 4))]),
    "broadcast_to": (lambda a: T.broadcast_to(a, (3, 2, 4)), lambda r: [r.normal((1, 1, 4))]),
    "getitem": (lambda a: a[:, 0], lambda r: [r.normal((3, 4, 2))]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), lambda r: [r.normal((2, 1, 3)), r.normal((2, 4, 3))]),
    "matmul": (T.matmul, lambda r: [r.normal((4, 5)), r.normal((5, 3))]),
    "softmax": (lambda a: T.softmax(a, axis=-1), lambda r: [r.normal((3, 6))]),
    "log_softmax": (lambda a: T.log_softmax(a, axis=-1), lambda r: [r.normal((3, 6))]),
    "layer_norm": (T.layer_norm, lambda r: [r.normal((3, 8))] + _gain_bias(r, 8)),
    "batch_norm_train": (_bn_train, lambda r: [r.normal((6, 4))] + _gain_bias(r, 4)),
    "batch_norm_eval": (_bn_eval, lambda r: [r.normal((6, 4))] + _gain_bias(r, 4)),
    "l2_normalize": (T.l2_normalize, lambda r: [r.normal((2, 16))]),
    # interior of the clamp range, where the straight-through gradient is exact
    "clip_value": (lambda a: T.clip_value(a, -1.0, 1.0), lambda r: [1.8 * r.uniform((3, 4)) - 0.9]),
    "dropout": (_dropout, lambda r: [r.normal((4, 5))]),
}


def op_gradient_error(name: str, trials: int = 20) -> float:
    """Worst relative error of ``OP_CASES[name]`` over ``trials`` seeded random inputs."""
    fn, make = OP_CASES[name]
    worst = 0.0
    for trial in range(trials):
        rng = CounterRNG(1000 + trial).split(zlib.crc32(name.encode()))
        worst = max(worst, check_op(fn, make(rng), seed=trial))
    return worst


def model_gradient_error(model, images, seed=0, per_tensor=4, directions=3):
    """Worst relative error over sampled coordinates and random directions (all parameters)."""
    rng = CounterRNG(seed)
    weights = rng.normal((len(images), model.config.embed_dim))
    x = Tensor(images, requires_grad=True)
    model.zero_grad()
    (model(x) * weights).sum().backward()

    def f():
        with T.no_grad():
            return float((model(images).data * weights).sum())

    errors = []
    for name, p in model.named_parameters():
        idx = np.sort(rng.split(len(errors)).permutation(p.size)[:per_tensor])
        num = numerical_gradient(f, p.data, indices=idx)
        errors.append(relative_error(p.grad.reshape(-1)[idx], num))
    idx = rng.split(999).permutation(images.size)[:16]
    errors.append(relative_error(x.grad.reshape(-1)[idx], numerical_gradient(f, images, indices=idx)))

    params = model.parameters()
    h = 1e-5
    for d in range(directions):
        drng = rng.split(5000 + d)
        dirs = [drng.normal(p.shape) for p in params]
        analytic = sum(float((p.grad * v).sum()) for p, v in zip(params, dirs))
        for p, v in zip(params, dirs):
            p.data += h * v
        fp = f()
        for p, v in zip(params, dirs):
            p.data -= 2 * h * v
        fm = f()
        for p, v in zip(params, dirs):
            p.data += h * v
        errors.append(relative_error(np.array([analytic]), np.array([(fp - fm) / (2 * h)])))
    return max(errors)
