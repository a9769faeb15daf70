"""CTC loss, an enumeration oracle for it, and greedy decoding.

Blank is always class 0. All recursions run in the log domain.
"""
from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

from .tensor import Tensor, _make

BLANK = 0
# stands in for log(0); far below any reachable log-probability
NEG_INF = -1e30


class CTCInfeasibleError(ValueError):
    """The target cannot be aligned to the available number of time steps."""


def extend_target(target: Sequence[int]) -> np.ndarray:
    """Interleave blanks: [a, b] -> [0, a, 0, b, 0]."""
    target = np.asarray(target, dtype=np.int64)
    if np.any(target == BLANK):
        raise ValueError("target label sequences must not contain the blank id 0")
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    return ext


def min_steps(target: Sequence[int]) -> int:
    """Shortest input length able to emit ``target`` (repeats need a blank between)."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _logsumexp3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    m = np.maximum(np.maximum(a, b), c)
    return m + np.log(np.exp(a - m) + np.exp(b - m) + np.exp(c - m))


def _lattice(log_probs: np.ndarray, target: Sequence[int]):
    """Alpha and beta tables (T×S) in the log domain."""
    t_len = log_probs.shape[0]
    ext = extend_target(target)
    s_len = len(ext)
    if min_steps(target) > t_len:
        raise CTCInfeasibleError(
            f"target of length {len(target)} needs at least {min_steps(target)} steps, got {t_len}"
        )
    lp = log_probs[:, ext]  # T×S
    # s-2 transition is allowed into non-blank positions whose label differs from s-2
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    neg = np.full(s_len, NEG_INF)
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = lp[0, 0]
    if s_len > 1:
        alpha[0, 1] = lp[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        jump = np.where(skip, np.concatenate(([NEG_INF, NEG_INF], prev[:-2])), neg)
        alpha[t] = np.maximum(_logsumexp3(stay, step, jump) + lp[t], NEG_INF)

    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = lp[-1, -1]
    if s_len > 1:
        beta[-1, -2] = lp[-1, -2]
    skip_from = np.zeros(s_len, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG_INF]))
        jump = np.where(skip_from, np.concatenate((nxt[2:], [NEG_INF, NEG_INF])), neg)
        beta[t] = np.maximum(_logsumexp3(stay, step, jump) + lp[t], NEG_INF)
    return ext, alpha, beta


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def ctc_nll(log_probs: np.ndarray, target: Sequence[int]) -> float:
    """-log p(target | log_probs) by the forward recursion."""
    _, alpha, _ = _lattice(np.asarray(log_probs, dtype=np.float64), target)
    final = alpha[-1, -2:] if alpha.shape[1] > 1 else alpha[-1, -1:]
    return -float(np.logaddexp.reduce(final))


def ctc_nll_and_grad(logits: np.ndarray, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. unnormalized logits (T×C) for one sample.

    The gradient is softmax minus the normalized alpha-beta state occupancy
    per class.
    """
    work = np.asarray(logits, dtype=np.float64)
    log_probs = _log_softmax(work)
    ext, alpha, beta = _lattice(log_probs, target)
    final = alpha[-1, -2:] if alpha.shape[1] > 1 else alpha[-1, -1:]
    log_p = float(np.logaddexp.reduce(final))
    # alpha*beta double counts the emission at t
    occ = alpha + beta - log_probs[:, ext]
    post = np.exp(occ - log_p)  # T×S
    per_class = np.zeros_like(log_probs)
    for s, k in enumerate(ext):
        per_class[:, k] += post[:, s]
    grad = np.exp(log_probs) - per_class
    return -log_p, grad


def ctc_loss(logits: Tensor, targets: Sequence[Sequence[int]]) -> Tensor:
    """Mean CTC loss over a B×T×C batch of raw logits.

    Accepts a single T×C sequence with one target as well. The backward rule
    is the analytic occupancy gradient, not a replay of the recursion.
    """
    data = logits.data
    single = data.ndim == 2
    if single:
        data = data[None]
        targets = [targets]
    if len(targets) != data.shape[0]:
        raise ValueError(f"{data.shape[0]} logit sequences but {len(targets)} targets")
    batch = data.shape[0]
    losses = np.empty(batch)
    grads = np.empty(data.shape, dtype=np.float64)
    for n, tgt in enumerate(targets):
        losses[n], grads[n] = ctc_nll_and_grad(data[n], tgt)
    out = np.asarray(losses.mean(), dtype=logits.dtype)
    grads /= batch
    if single:
        grads = grads[0]

    def _bw(g):
        return ((g * grads).astype(logits.dtype),)

    return _make(out, (logits,), _bw)


def ctc_brute_force(probs: np.ndarray, target: Sequence[int], max_paths: int = 10**6) -> float:
    """-log p(target) by summing over every alignment path.

    Exponential in T; meant as a reference for small problems only.
    """
    probs = np.asarray(probs, dtype=np.float64)
    t_len, n_classes = probs.shape
    if n_classes**t_len > max_paths:
        raise ValueError(f"{n_classes}^{t_len} paths exceeds the enumeration limit {max_paths}")
    target = tuple(int(v) for v in target)
    total = 0.0
    found = False
    for path in itertools.product(range(n_classes), repeat=t_len):
        if collapse(path) != target:
            continue
        found = True
        p = 1.0
        for t, k in enumerate(path):
            p *= probs[t, k]
        total += p
    if not found:
        raise CTCInfeasibleError(f"no alignment of length {t_len} collapses to {list(target)}")
    return -math.log(total)


def collapse(path: Sequence[int]) -> tuple[int, ...]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for k in path:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return tuple(out)


def greedy_path(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first (lowest) index on ties
    return np.argmax(np.asarray(logits), axis=-1)


def greedy_decode(logits: np.ndarray, alphabet) -> str:
    """Best-path decoding of a T×C score matrix into a string."""
    return alphabet.decode(collapse(greedy_path(logits)))
