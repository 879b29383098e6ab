import math

import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cmstew.numerics import DimensionError, NumericalError, finite_difference_check
from cmstew.objectives import (DccaConfig, LossWeights, alignment_loss, bce_loss, binary_accuracy,
                               ccc, dcca_correlation, mae_translation_loss, mse_loss, total_loss,
                               weighted_f1)

from conftest import rand64


def t64(values):
    return torch.tensor(values, dtype=torch.float64)


# -- oracles ---------------------------------------------------------------------

def cca_oracle(a, b, r1, r2):
    """Classical CCA: canonical correlations from the generalized eigenproblem
    S_sw S_w^-1 S_ws v = rho^2 S_s v on the same regularized covariances."""
    n, d = a.shape
    ac, bc = a - a.mean(0), b - b.mean(0)
    s_s = ac.T @ ac / (n - 1) + r1 * np.eye(d)
    s_w = bc.T @ bc / (n - 1) + r2 * np.eye(d)
    s_sw = ac.T @ bc / (n - 1)
    rho2 = scipy.linalg.eigh(s_sw @ np.linalg.solve(s_w, s_sw.T), s_s, eigvals_only=True)
    return float(np.sqrt(np.clip(rho2, 0, None)).sum())


def ccc_oracle(y, p):
    n = len(y)
    my, mp = sum(y) / n, sum(p) / n
    vy = sum((v - my) ** 2 for v in y) / n
    vp = sum((v - mp) ** 2 for v in p) / n
    cov = sum((a - my) * (b - mp) for a, b in zip(y, p)) / n
    return 2 * cov / (vy + vp + (my - mp) ** 2)


def weighted_f1_oracle(y, p):
    def f1(cls):
        tp = sum(1 for a, b in zip(y, p) if a == cls and b == cls)
        fp = sum(1 for a, b in zip(y, p) if a != cls and b == cls)
        fn = sum(1 for a, b in zip(y, p) if a == cls and b != cls)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        return 2 * prec * rec / (prec + rec) if prec + rec else 0.0

    n_p = sum(1 for v in y if v == 1)
    n_n = len(y) - n_p
    return (f1(1) * n_p + f1(0) * n_n) / (n_p + n_n)


# -- prediction and translation losses ------------------------------------------------

def test_mse_examples():
    assert mse_loss(t64([1.0, 2.0]), t64([1.0, 2.0])).item() == 0.0
    assert mse_loss(t64([0.0, 0.0]), t64([1.0, -1.0])).item() == 1.0
    rng = np.random.default_rng(3)
    y, p = rng.standard_normal(7), rng.standard_normal(7)
    assert mse_loss(t64(y), t64(p)).item() == pytest.approx(np.mean((y - p) ** 2), rel=1e-14)
    with pytest.raises(DimensionError):
        mse_loss(t64([1.0]), t64([1.0, 2.0]))


def test_bce_examples():
    assert bce_loss(t64([1.0]), t64([1 - 1e-7])).item() == pytest.approx(0.0, abs=1e-6)
    assert bce_loss(t64([1.0, 0.0]), t64([0.5, 0.5])).item() == pytest.approx(math.log(2), rel=1e-12)
    y, p = [1, 0, 1], [0.9, 0.2, 0.6]
    ref = -sum(a * math.log(b) + (1 - a) * math.log(1 - b) for a, b in zip(y, p)) / 3
    assert bce_loss(t64(y), t64(p)).item() == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ValueError):
        bce_loss(t64([0.5]), t64([0.5]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_bce_nonnegative(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 9).astype(float)
    assert bce_loss(t64(y), t64(rng.random(9))).item() >= 0
    assert bce_loss(t64(y), t64(y)).item() == pytest.approx(0.0, abs=1e-6)


def test_mae_translation_examples():
    x = rand64(4, 3)
    assert mae_translation_loss(x, x).item() == 0.0
    assert mae_translation_loss(torch.zeros(4, 3), torch.ones(4, 3)).item() == 1.0
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    ref = sum(abs(a[i, j] - b[i, j]) for i in range(4) for j in range(3)) / 12
    assert mae_translation_loss(t64(a), t64(b)).item() == pytest.approx(ref, rel=1e-14)
    with pytest.raises(DimensionError):
        mae_translation_loss(torch.zeros(4, 3), torch.zeros(4, 2))


# -- DCCA ---------------------------------------------------------------------

def test_dcca_self_correlation_is_width():
    x = rand64(50, 3, seed=1)
    assert dcca_correlation(x, x, DccaConfig(0, 0)).item() == pytest.approx(3.0, abs=1e-9)


def test_dcca_perfect_linear_one_dimensional():
    a = t64([[1.0], [2.0], [3.0]])
    b = t64([[2.0], [4.0], [6.0]])
    assert dcca_correlation(a, b, DccaConfig(0, 0)).item() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_dcca_matches_classical_cca(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((200, 3))
    b = a @ rng.standard_normal((3, 3)) + rng.standard_normal((200, 3))
    got = dcca_correlation(t64(a), t64(b), DccaConfig(1e-4, 1e-4)).item()
    assert got == pytest.approx(cca_oracle(a, b, 1e-4, 1e-4), abs=1e-6)


def test_dcca_symmetry_and_rotation_invariance():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((60, 4))
    b = a @ rng.standard_normal((4, 4)) + rng.standard_normal((60, 4))
    cfg, swapped = DccaConfig(1e-3, 5e-2), DccaConfig(5e-2, 1e-3)
    base = dcca_correlation(t64(a), t64(b), cfg).item()
    assert dcca_correlation(t64(b), t64(a), swapped).item() == pytest.approx(base, abs=1e-10)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    rotated = dcca_correlation(t64(a), t64(b @ q), cfg).item()
    assert rotated == pytest.approx(base, abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_dcca_bounded_by_width(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((40, 3))
    b = rng.standard_normal((40, 3)) + 0.5 * a
    corr = dcca_correlation(t64(a), t64(b), DccaConfig(0, 0)).item()
    assert -1e-9 <= corr <= 3 + 1e-9
    la = alignment_loss(t64(a), t64(b), DccaConfig(0, 0)).item()
    assert la == pytest.approx(-corr, abs=1e-12)
    assert -3 - 1e-9 <= la <= 0


def test_dcca_errors():
    with pytest.raises(ValueError, match="at least 2"):
        dcca_correlation(rand64(1, 3), rand64(1, 3))
    with pytest.raises(DimensionError):
        dcca_correlation(rand64(5, 3), rand64(5, 2))
    bad = rand64(5, 2)
    bad[0, 0] = float("inf")
    with pytest.raises(NumericalError, match="strong"):
        dcca_correlation(bad, rand64(5, 2))


@pytest.mark.parametrize("seed", range(3))
def test_alignment_gradient_check(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((30, 4))
    xs = t64(a)
    xw = t64(a @ rng.standard_normal((4, 4)) + rng.standard_normal((30, 4))).requires_grad_()
    cfg = DccaConfig(1e-3, 1e-3)
    err = finite_difference_check(lambda: alignment_loss(xs, xw, cfg), {"xw": xw}, max_coords=None)
    assert err <= 1e-4
    xs.requires_grad_()
    alignment_loss(xs, xw, cfg).backward()
    assert xs.grad is None  # the strong side is a constant target


def test_dcca_gradient_check_both_inputs_with_repeated_singular_values():
    x = rand64(30, 4, seed=2, requires_grad=True)
    y = x.detach().clone().requires_grad_()
    cfg = DccaConfig(1e-3, 1e-3)
    err = finite_difference_check(lambda: dcca_correlation(x, y, cfg), {"x": x, "y": y},
                                  max_coords=None)
    assert err <= 1e-4


# -- total loss ---------------------------------------------------------------

def test_total_loss():
    assert total_loss(1.5, -2.0, 3.0, LossWeights(0, 0)) == 1.5
    assert total_loss(1.0, -2.0, 3.0, LossWeights(0.5, 0.1)) == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(NumericalError, match="alignment"):
        total_loss(1.0, float("nan"), 0.0, LossWeights())
    with pytest.raises(ValueError):
        LossWeights(-1, 0)


# -- metrics -------------------------------------------------------------------

def test_accuracy_examples():
    assert binary_accuracy([1, 0, 1], [0.9, 0.1, 0.7]) == 1.0
    assert binary_accuracy([1, 0, 1, 0], [0.9, 0.2, 0.3, 0.6]) == 0.5
    y, p = np.array([1, 0, 1, 0, 1]), np.array([0.9, 0.2, 0.3, 0.6, 0.55])
    assert binary_accuracy(y, 1 - p) == pytest.approx(1 - binary_accuracy(y, p))


def test_weighted_f1_examples():
    assert weighted_f1([1, 0, 1, 0], [1, 0, 1, 0]) == 1.0
    assert weighted_f1([1, 1, 0, 0], [1, 0, 0, 0]) == pytest.approx(0.7333333333333333, abs=1e-12)
    assert weighted_f1([1, 1, 1], [1, 1, 1]) == 1.0
    assert weighted_f1([1, 1, 1], [1, 0, 1]) == pytest.approx(0.8)  # plain positive-class F1


def test_ccc_examples():
    y = np.array([0.1, 0.5, -0.3, 0.9])
    assert ccc(y, y) == pytest.approx(1.0)
    assert ccc([-1, 0, 1], [1, 0, -1]) == pytest.approx(-1.0)
    assert ccc([1, 2, 3, 4], [2, 2, 4, 4]) == pytest.approx(0.8, abs=1e-12)
    assert ccc([1, 2, 3], [5, 5, 5]) == 0.0
    with pytest.raises(ValueError):
        ccc([2, 2, 2], [2, 2, 2])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.1, 10), b=st.floats(-5, 5))
def test_ccc_affine_invariance_and_pearson_bound(seed, a, b):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(20)
    p = 0.7 * y + rng.standard_normal(20)
    base = ccc(y, p)
    assert ccc(a * y + b, a * p + b) == pytest.approx(base, abs=1e-9)
    assert abs(base) <= abs(np.corrcoef(y, p)[0, 1]) + 1e-12
    assert -1 <= base <= 1


def test_randomized_metric_oracles():
    from sklearn.metrics import f1_score

    rng = np.random.default_rng(11)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, n)
        scores = rng.random(n)
        pred = (scores >= 0.5).astype(int)
        assert binary_accuracy(y, scores) == pytest.approx(
            sum(int(a == b) for a, b in zip(y, pred)) / n, abs=1e-9)
        assert weighted_f1(y, pred) == pytest.approx(weighted_f1_oracle(list(y), list(pred)), abs=1e-9)
        assert weighted_f1(y, pred) == pytest.approx(
            f1_score(y, pred, average="weighted", zero_division=0), abs=1e-9)
        yr, pr = rng.standard_normal(n), rng.standard_normal(n)
        assert ccc(yr, pr) == pytest.approx(ccc_oracle(list(yr), list(pr)), abs=1e-9)
