"""Central finite-difference checks for every differentiable op.

Each case draws random float64 inputs, reduces the op output to a scalar
with a random projection, and compares the analytic gradient of every input
against central differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .ctc import ctc_loss
from .tensor import BatchNormState, Tensor

STEP = 1e-5
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(diff / scale)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = STEP) -> np.ndarray:
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f()
        flat[i] = old - step
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return g


def check(build: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray], rng: np.random.Generator) -> float:
    """Worst relative error over all inputs of ``build``.

    ``build`` maps input tensors to an output tensor; a fixed random
    projection turns the output into a scalar.
    """
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(inputs)
    proj = rng.normal(size=out.shape)

    def scalar() -> float:
        with T.no_grad():
            return float((build(inputs).data * proj).sum())

    loss = T.sum_all(T.mul(out, proj))
    T.backward(loss)
    worst = 0.0
    for t in inputs:
        num = numeric_grad(scalar, t.data)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(ana, num))
    return worst


def _distinct(rng, shape):
    # values spaced well beyond the FD step so max/argmax never flips
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.1 + rng.uniform(0, 0.01, size=shape)).astype(np.float64)


def case_conv2d(rng):
    x = rng.normal(size=(2, 2, 5, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    stride, pad = [(1, 1), (1, 0), (2, 1)][int(rng.integers(3))]
    if (5 + 2 * pad - 3) % stride or (6 + 2 * pad - 3) % stride:
        stride = 1
    return check(lambda t: T.conv2d(t[0], t[1], t[2], stride=stride, padding=pad), [x, w, b], rng)


def case_conv1d(rng):
    x = rng.normal(size=(2, 3, 5))
    w = rng.normal(size=(4, 3, 3))
    b = rng.normal(size=4)
    return check(lambda t: T.conv1d(t[0], t[1], t[2], padding=1), [x, w, b], rng)


def case_maxpool2d(rng):
    return check(lambda t: T.maxpool2d(t[0]), [_distinct(rng, (2, 2, 4, 6))], rng)


def case_batchnorm(rng):
    x = rng.normal(size=(3, 2, 3, 4)) * 2 + 1
    gamma = rng.normal(size=2)
    beta = rng.normal(size=2)

    def build(t):
        return T.batchnorm(t[0], t[1], t[2], BatchNormState(2, dtype=np.float64), training=True)

    return check(build, [x, gamma, beta], rng)


def case_linear(rng):
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(5, 4))
    b = rng.normal(size=5)
    return check(lambda t: T.linear(t[0], t[1], t[2]), [x, w, b], rng)


def case_bilstm(rng):
    t_len, b, d, h = 3, 1, 2, 2
    x = rng.normal(size=(t_len, b, d))
    arrs = [x]
    for _ in range(2):
        arrs += [rng.normal(size=(4 * h, d)) * 0.7, rng.normal(size=(4 * h, h)) * 0.7, rng.normal(size=4 * h) * 0.5]
    return check(lambda t: T.bilstm_layer(t[0], t[1:4], t[4:7]), arrs, rng)


def case_log_softmax(rng):
    return check(lambda t: T.log_softmax(t[0], axis=-1), [rng.normal(size=(3, 5)) * 2], rng)


def case_ctc(rng):
    t_len = int(rng.integers(2, 6))
    n_classes = int(rng.integers(2, 5))
    while True:
        u = int(rng.integers(1, 4))
        tgt = [int(v) for v in rng.integers(1, n_classes, size=u)]
        if len(tgt) + sum(a == b for a, b in zip(tgt, tgt[1:])) <= t_len:
            break
    logits = rng.normal(size=(t_len, n_classes))
    inputs = [Tensor(logits, requires_grad=True)]

    def scalar() -> float:
        return float(ctc_loss(Tensor(inputs[0].data), tgt).data)

    T.backward(ctc_loss(inputs[0], tgt))
    return relative_error(inputs[0].grad, numeric_grad(scalar, inputs[0].data))


CASES: dict[str, Callable[[np.random.Generator], float]] = {
    "conv2d": case_conv2d,
    "conv1d": case_conv1d,
    "maxpool2d": case_maxpool2d,
    "batchnorm": case_batchnorm,
    "linear": case_linear,
    "bilstm_layer": case_bilstm,
    "log_softmax": case_log_softmax,
    "ctc_loss": case_ctc,
}


@dataclass
class GradcheckResult:
    op: str
    seeds: int
    worst: float

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def run_gradcheck(seeds: int = 20, ops=None) -> list[GradcheckResult]:
    results = []
    for name in ops or CASES:
        worst = 0.0
        for s in range(seeds):
            worst = max(worst, CASES[name](np.random.default_rng([s, len(name)])))
        results.append(GradcheckResult(name, seeds, worst))
    return results
