import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htr.ctc import (
    CTCInfeasibleError,
    collapse,
    ctc_brute_force,
    ctc_loss,
    ctc_nll,
    ctc_nll_and_grad,
    extend_target,
    greedy_decode,
    min_steps,
)
from htr.dataset import Alphabet
from htr.gradcheck import numeric_grad, relative_error
from htr.tensor import Tensor, backward


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def random_instance(rng, t_max=6, c_max=4, u_max=3):
    while True:
        t_len = int(rng.integers(1, t_max + 1))
        n_classes = int(rng.integers(2, c_max + 1))
        u = int(rng.integers(1, u_max + 1))
        target = [int(v) for v in rng.integers(1, n_classes, size=u)]
        if min_steps(target) <= t_len:
            return rng.normal(size=(t_len, n_classes)) * 1.5, target


def test_extended_target_layout():
    ext = extend_target([2, 3, 3])
    assert list(ext) == [0, 2, 0, 3, 0, 3, 0]
    with pytest.raises(ValueError):
        extend_target([0, 1])


def test_single_step_loss():
    probs = np.array([[0.2, 0.7, 0.1]])
    assert ctc_nll(np.log(probs), [1]) == pytest.approx(-math.log(0.7), abs=1e-12)
    assert ctc_brute_force(probs, [1]) == pytest.approx(-math.log(0.7), abs=1e-12)
    assert ctc_nll(np.log(probs), [1]) == pytest.approx(0.35667, abs=1e-5)


def test_uniform_two_step_loss_is_ln3():
    probs = np.full((2, 3), 1 / 3)
    # paths (a,a), (a,-), (-,a)
    assert ctc_brute_force(probs, [1]) == pytest.approx(math.log(3), abs=1e-12)
    loss = ctc_loss(Tensor(np.zeros((2, 3))), [1])
    assert float(loss.data) == pytest.approx(math.log(3), abs=1e-12)
    assert float(loss.data) == pytest.approx(1.0986, abs=1e-4)


def test_repeat_needs_blank():
    with pytest.raises(CTCInfeasibleError):
        ctc_loss(Tensor(np.zeros((2, 3))), [1, 1])
    with pytest.raises(CTCInfeasibleError):
        ctc_brute_force(np.full((2, 3), 1 / 3), [1, 1])
    assert min_steps([1, 1]) == 3
    ctc_loss(Tensor(np.zeros((3, 3))), [1, 1])


@pytest.mark.parametrize("seed", range(50))
def test_matches_enumeration(seed):
    logits, target = random_instance(np.random.default_rng(seed))
    ref = ctc_brute_force(softmax(logits), target)
    assert abs(float(ctc_loss(Tensor(logits), target).data) - ref) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_enumeration_property(seed):
    logits, target = random_instance(np.random.default_rng(seed))
    assert abs(ctc_nll(np.log(softmax(logits)), target) - ctc_brute_force(softmax(logits), target)) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    logits, target = random_instance(np.random.default_rng(seed), t_max=5)
    _, grad = ctc_nll_and_grad(logits, target)
    num = numeric_grad(lambda: ctc_nll_and_grad(logits, target)[0], logits)
    assert relative_error(grad, num) < 1e-4


def test_batched_loss_is_mean_and_gradient_scaled():
    rng = np.random.default_rng(0)
    la, ta = random_instance(rng, t_max=4)
    lb = rng.normal(size=la.shape)
    tb = [1]
    x = Tensor(np.stack([la, lb]), requires_grad=True)
    loss = ctc_loss(x, [ta, tb])
    expected = (ctc_nll_and_grad(la, ta)[0] + ctc_nll_and_grad(lb, tb)[0]) / 2
    assert float(loss.data) == pytest.approx(expected, abs=1e-12)
    backward(loss)
    np.testing.assert_allclose(x.grad[0], ctc_nll_and_grad(la, ta)[1] / 2)


@pytest.mark.parametrize("seed", range(20))
def test_raising_target_logit_where_occupancy_dominates_never_increases_loss(seed):
    rng = np.random.default_rng(seed)
    logits, target = random_instance(rng)
    base, grad = ctc_nll_and_grad(logits, target)
    checked = 0
    for t in range(logits.shape[0]):
        for k in set(target):
            # grad = softmax - occupancy; raising the logit helps wherever it is negative
            if grad[t, k] < -1e-6:
                bumped = logits.copy()
                bumped[t, k] += 1e-3
                assert ctc_nll_and_grad(bumped, target)[0] <= base
                checked += 1
    assert checked > 0


def test_raising_target_logit_can_increase_loss():
    # "a" already emitted at step 0 and closed by a blank: more "a" at step 2 risks "aa"
    logits = np.array([[0.0, 5.0, 0.0], [5.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    base = ctc_nll_and_grad(logits, [1])[0]
    bumped = logits.copy()
    bumped[2, 1] += 1.0
    assert ctc_nll_and_grad(bumped, [1])[0] > base


@pytest.mark.parametrize("seed", range(20))
def test_shift_invariance_per_step(seed):
    rng = np.random.default_rng(seed)
    logits, target = random_instance(rng)
    shifted = logits.copy()
    shifted[int(rng.integers(logits.shape[0]))] += rng.normal() * 10
    assert abs(ctc_nll_and_grad(logits, target)[0] - ctc_nll_and_grad(shifted, target)[0]) < 1e-9


def test_loss_nonnegative_and_long_sequence_finite():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(128, 30)) * 3
    target = [int(v) for v in rng.integers(1, 30, size=40)]
    loss, grad = ctc_nll_and_grad(logits, target)
    assert np.isfinite(loss) and loss >= 0
    assert np.all(np.isfinite(grad))
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-9)


def test_brute_force_scale_guard():
    with pytest.raises(ValueError, match="limit"):
        ctc_brute_force(np.full((11, 4), 0.25), [1])


ALPHA = Alphabet(" ab")  # blank, space, a, b


def onehot_path(path, n=4):
    z = np.full((len(path), n), -5.0)
    z[np.arange(len(path)), path] = 5.0
    return z


@pytest.mark.parametrize(
    "path,text",
    [([0, 2, 2, 0, 3], "ab"), ([0, 0, 0], ""), ([2, 0, 2], "aa"), ([1, 2, 3, 1], " ab ")],
)
def test_greedy_decode(path, text):
    assert greedy_decode(onehot_path(path), ALPHA) == text


def test_greedy_ties_go_to_lowest_index():
    assert greedy_decode(np.zeros((3, 4)), ALPHA) == ""
    z = np.zeros((1, 4))
    z[0, 2] = z[0, 3] = 1.0
    assert greedy_decode(z, ALPHA) == "a"


def test_collapse():
    assert collapse([1, 1, 0, 1, 2, 2]) == (1, 1, 2)
