"""Differentiable primitives on top of torch tensors, plus a gradient verifier.

Training runs in float32; the verification path promotes everything to float64.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping

import torch

TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is outside its allowed range."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value."""


class GradientCheckError(AssertionError):
    def __init__(self, error: float, tol: float):
        super().__init__(f"gradient check failed: max relative error {error:.3e} > {tol:.1e}")
        self.error = error


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # leading batch dims are allowed; only the contraction extents must agree
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def activation(x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "sigmoid":
        return torch.sigmoid(x)
    if kind == "tanh":
        return torch.tanh(x)
    if kind == "relu":
        # torch.relu backward uses (x > 0), so the subgradient at 0 is 0
        return torch.relu(x)
    if kind in ("none", None):
        return x
    raise ConfigError(f"unknown activation {kind!r}")


def softmax_rows(m: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax over the last axis with max subtraction."""
    if m.shape[-1] < 1:
        raise DimensionError("softmax_rows needs at least one column")
    shifted = m - m.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
               eps: float = 1e-5) -> torch.Tensor:
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise DimensionError(
            f"layer_norm: width {x.shape[-1]} vs gamma {tuple(gamma.shape)}, "
            f"beta {tuple(beta.shape)}")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gamma + beta


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
    eps: float = 1e-6,
    tol: float = 1e-4,
    max_coords: int | None = 64,
    seed: int = 0,
) -> float:
    """Compare autograd gradients with central differences.

    ``params`` are float64 leaf tensors with ``requires_grad`` set; ``loss_fn``
    recomputes the scalar loss from their current values. Up to ``max_coords``
    coordinates per parameter are sampled (all of them when ``None``). Returns
    the worst relative error ``|analytic - numeric| / max(1, |numeric|)``;
    raises ``GradientCheckError`` when it exceeds ``tol``.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ConfigError(f"finite-difference eps {eps} outside [1e-6, 1e-4]")
    items = list(params.items() if isinstance(params, Mapping) else params)
    for name, p in items:
        if p.dtype != CHECK_DTYPE:
            raise ConfigError(f"{name}: gradient checks run in float64")
        p.grad = None

    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericalError(f"loss is not finite before perturbation: {loss.item()}")
    loss.backward()
    analytic = {name: (p.grad.detach().clone() if p.grad is not None
                       else torch.zeros_like(p)) for name, p in items}

    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for name, p in items:
            flat = p.view(-1)
            n = flat.numel()
            if max_coords is None or n <= max_coords:
                coords = range(n)
            else:
                coords = torch.randperm(n, generator=gen)[:max_coords].tolist()
            grad_flat = analytic[name].view(-1)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericalError(f"non-finite loss while perturbing {name}[{i}]")
                numeric = (up - down) / (2 * eps)
                err = abs(grad_flat[i].item() - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    if worst > tol:
        raise GradientCheckError(worst, tol)
    return worst
