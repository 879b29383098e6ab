"""Training losses and evaluation metrics.

Losses operate on torch tensors and are differentiable; metrics operate on
numpy arrays and return plain floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .numerics import ConfigError, DimensionError, NumericalError

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class DccaConfig:
    r1: float = 1e-3
    r2: float = 1e-3
    eigen_floor: float = 1e-12
    latent_dim: int = 100

    def __post_init__(self):
        if self.r1 < 0 or self.r2 < 0:
            raise ConfigError("DCCA regularisers must be nonnegative")
        if self.eigen_floor <= 0:
            raise ConfigError("eigen_floor must be positive")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be nonnegative")


def mse_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    if y.shape != y_hat.shape:
        raise DimensionError(f"mse: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    if y.numel() == 0:
        raise DimensionError("mse: empty input")
    return ((y - y_hat) ** 2).mean()


def bce_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy, negated so that it is minimised."""
    if y.shape != y_hat.shape:
        raise DimensionError(f"bce: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    if y.numel() == 0:
        raise DimensionError("bce: empty input")
    if not torch.all((y == 0) | (y == 1)):
        raise ValueError("bce: labels must be 0 or 1")
    p = y_hat.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def mae_translation_loss(xs: torch.Tensor, xs_hat: torch.Tensor) -> torch.Tensor:
    if xs.shape != xs_hat.shape:
        raise DimensionError(f"translation: {tuple(xs.shape)} vs {tuple(xs_hat.shape)}")
    return (xs - xs_hat).abs().mean()


def _inv_sqrt(sigma: np.ndarray, floor: float, name: str) -> np.ndarray:
    if not np.all(np.isfinite(sigma)):
        raise NumericalError(f"{name} covariance is not finite")
    w, v = np.linalg.eigh(sigma)
    w = np.maximum(w, floor)
    return (v / np.sqrt(w)) @ v.T


def _dcca_forward(hs: np.ndarray, hw: np.ndarray, cfg: DccaConfig):
    n, d = hs.shape
    hs_c = hs - hs.mean(axis=0)
    hw_c = hw - hw.mean(axis=0)
    s_sw = hs_c.T @ hw_c / (n - 1)
    s_s = hs_c.T @ hs_c / (n - 1) + cfg.r1 * np.eye(d)
    s_w = hw_c.T @ hw_c / (n - 1) + cfg.r2 * np.eye(d)
    s_s_is = _inv_sqrt(s_s, cfg.eigen_floor, "strong")
    s_w_is = _inv_sqrt(s_w, cfg.eigen_floor, "weak")
    t = s_s_is @ s_sw @ s_w_is
    if not np.all(np.isfinite(t)):
        raise NumericalError("DCCA T matrix is not finite")
    u, sv, vt = np.linalg.svd(t)
    return sv.sum(), (hs_c, hw_c, s_s_is, s_w_is, u, sv, vt)


class _TraceNormCorrelation(torch.autograd.Function):
    # Gradient of ||T||_tr through the covariance estimates:
    #   d/dS_sw = S_s^-1/2 U V^T S_w^-1/2
    #   d/dS_s  = -1/2 S_s^-1/2 U D U^T S_s^-1/2   (and the same on the weak side)
    # computed in float64 regardless of the input precision.

    @staticmethod
    def forward(ctx, xs, xw, cfg):
        hs = xs.detach().cpu().double().numpy()
        hw = xw.detach().cpu().double().numpy()
        value, cache = _dcca_forward(hs, hw, cfg)
        ctx.cache = cache
        return xs.new_tensor(value)

    @staticmethod
    def backward(ctx, grad_out):
        hs_c, hw_c, s_s_is, s_w_is, u, sv, vt = ctx.cache
        n = hs_c.shape[0]
        k = sv.shape[0]
        u, vt = u[:, :k], vt[:k]
        d_sw = s_s_is @ u @ vt @ s_w_is
        d_ss = -0.5 * s_s_is @ (u * sv) @ u.T @ s_s_is
        d_ww = -0.5 * s_w_is @ (vt.T * sv) @ vt @ s_w_is
        g_s = (2 * hs_c @ d_ss + hw_c @ d_sw.T) / (n - 1)
        g_w = (2 * hw_c @ d_ww + hs_c @ d_sw) / (n - 1)
        g = float(grad_out)
        gs = torch.from_numpy(g * g_s).to(grad_out.dtype) if ctx.needs_input_grad[0] else None
        gw = torch.from_numpy(g * g_w).to(grad_out.dtype) if ctx.needs_input_grad[1] else None
        return gs, gw, None


def dcca_correlation(xs_prime: torch.Tensor, xw_prime: torch.Tensor,
                     cfg: DccaConfig | None = None) -> torch.Tensor:
    """Total canonical correlation: the sum of singular values of
    ``S_s^-1/2 S_sw S_w^-1/2`` over the rows (samples) of both inputs."""
    cfg = cfg or DccaConfig()
    if xs_prime.dim() != 2 or xs_prime.shape != xw_prime.shape:
        raise DimensionError(
            f"dcca: expected matching [N, d] inputs, got {tuple(xs_prime.shape)} "
            f"and {tuple(xw_prime.shape)}")
    if xs_prime.shape[0] < 2:
        raise ValueError(f"dcca: need at least 2 samples, got {xs_prime.shape[0]}")
    return _TraceNormCorrelation.apply(xs_prime, xw_prime, cfg)


def alignment_loss(xs_prime: torch.Tensor, xw_prime: torch.Tensor,
                   cfg: DccaConfig | None = None) -> torch.Tensor:
    # the strong-side latents are a fixed target
    return -dcca_correlation(xs_prime.detach(), xw_prime, cfg)


def total_loss(lp, la, lt, w: LossWeights):
    for name, term in (("prediction", lp), ("alignment", la), ("translation", lt)):
        value = float(term.detach()) if torch.is_tensor(term) else float(term)
        if not math.isfinite(value):
            raise NumericalError(f"{name} loss is not finite: {value}")
    return lp + w.alpha * la + w.beta * lt


# -- metrics -----------------------------------------------------------------

def binary_accuracy(y, y_hat, threshold: float = 0.5) -> float:
    y = np.asarray(y)
    y_hat = np.asarray(y_hat)
    if y.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean((y_hat >= threshold).astype(int) == y.astype(int)))


def _f1(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def weighted_f1(y, y_hat_bin) -> float:
    y = np.asarray(y).astype(int)
    p = np.asarray(y_hat_bin).astype(int)
    if y.size == 0:
        raise ValueError("F1 of an empty set")
    tp = int(np.sum((p == 1) & (y == 1)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    n_p, n_n = tp + fn, tn + fp
    return (_f1(tp, fp, fn) * n_p + _f1(tn, fn, fp) * n_n) / (n_p + n_n)


def ccc(y, y_hat) -> float:
    """Concordance correlation coefficient with population (1/N) moments."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.size < 2:
        raise ValueError("ccc needs two equal-length sequences of at least 2 values")
    mu_y, mu_p = y.mean(), y_hat.mean()
    cov = np.mean((y - mu_y) * (y_hat - mu_p))
    denom = y.var() + y_hat.var() + (mu_y - mu_p) ** 2
    if denom == 0:
        raise ValueError("ccc is undefined for two identical constant sequences")
    return float(2 * cov / denom)
