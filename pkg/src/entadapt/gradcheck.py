"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

STEP = 1e-5
# denominators below this are treated as this (gradients that are ~0 on both sides)
FLOOR = 1e-7


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], n_samples: int | None = None,
                    rng: np.random.Generator | None = None, step: float = STEP) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` rebuilds the graph from the current tensor values and returns
    a scalar.  ``n_samples`` coordinates are drawn at random across all
    ``tensors`` (all coordinates when ``None``).
    """
    for t in tensors:
        t.zero_grad()
    loss_fn().backward()
    analytic = [t.grad.copy() for t in tensors]
    coords = [(i, j) for i, t in enumerate(tensors) for j in range(t.data.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in pick]
    worst = 0.0
    for i, j in coords:
        flat = tensors[i].data.reshape(-1)
        old = flat[j]
        flat[j] = old + step
        up = float(loss_fn().data)
        flat[j] = old - step
        down = float(loss_fn().data)
        flat[j] = old
        numeric = (up - down) / (2 * step)
        worst = max(worst, float(relative_error(analytic[i].reshape(-1)[j], numeric)))
    return worst


def _leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.uniform(-2, 2, shape), requires_grad=True)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """One small graph per differentiable op, on random inputs in [-2, 2]."""
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    w = _leaf(rng, 4, 2)
    x3, y3 = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 3)
    bias, bias_b = _leaf(rng, 4), _leaf(rng, 3, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    mask = np.where(rng.random((3, 4)) < 0.3, -1e9, 0.0)
    mask[:, 0] = 0.0
    return {
        "add": (lambda: tc.add(a, b), [a, b]),
        "sub": (lambda: tc.sub(a, b), [a, b]),
        "mul": (lambda: tc.mul(a, b), [a, b]),
        "scale": (lambda: tc.scale(a, -1.7), [a]),
        "add_const": (lambda: tc.add_const(a, 3.0), [a]),
        "mul_const": (lambda: tc.mul_const(a, np.arange(4.0)), [a]),
        "exp": (lambda: tc.exp(a), [a]),
        "log": (lambda: tc.log(pos), [pos]),
        "gelu": (lambda: tc.gelu(a), [a]),
        "add_bias": (lambda: tc.add_bias(a, bias), [a, bias]),
        "add_bias_rows": (lambda: tc.add_bias(tc.reshape(x3, (3, 2, 4)), bias_b), [x3, bias_b]),
        "matmul": (lambda: tc.matmul(a, w), [a, w]),
        "bmm": (lambda: tc.bmm(x3, y3), [x3, y3]),
        "transpose": (lambda: tc.transpose(x3, (2, 0, 1)), [x3]),
        "reshape": (lambda: tc.reshape(a, (2, 6)), [a]),
        "softmax": (lambda: tc.softmax(a, mask), [a]),
        "log_softmax": (lambda: tc.log_softmax(a), [a]),
        "logsumexp": (lambda: tc.logsumexp(a), [a]),
        "layernorm": (lambda: tc.layernorm(a, bias, tc.scale(bias, 0.5)), [a, bias]),
        "sum_axis": (lambda: tc.sum(x3, axis=1), [x3]),
        "take": (lambda: tc.take(a, [2, 0, 2, 1], axis=0), [a]),
        "take_axis1": (lambda: tc.take(x3, [[0, 2], [1, 1]], axis=1), [x3]),
        "pick": (lambda: tc.pick(a, np.array([3, 0, 1])), [a]),
        "stack": (lambda: tc.stack([a, b, a]), [a, b]),
        "concat": (lambda: tc.concat([a, b], axis=1), [a, b]),
    }


def check_op(name: str, seed: int) -> float:
    """Gradient check of one op case under a fixed random weighting of its output."""
    rng = np.random.default_rng(seed)
    fn, inputs = op_cases(rng)[name]
    weights = rng.normal(size=fn().shape)
    return check_gradients(lambda: tc.sum(tc.mul_const(fn(), weights)), inputs)
