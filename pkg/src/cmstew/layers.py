"""Sequence building blocks: dense, bidirectional GRU, positional encoding,
multi-head self-attention and the post-norm transformer encoder layer.

Every forward accepts either a single sequence ``[T, d]`` or a batch of
equal-length sequences ``[B, T, d]``. Stochastic ops take ``train_mode`` and an
explicit ``torch.Generator`` so runs are reproducible.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .numerics import (ConfigError, DimensionError, activation, layer_norm,
                       matmul, softmax_rows)


def uniform_init(shape: tuple[int, ...], fan_in: int, gen: torch.Generator) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).float()


def dropout(x: torch.Tensor, rate: float, train_mode: bool,
            rng: torch.Generator | None = None) -> torch.Tensor:
    """Inverted dropout; identity outside training or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate {rate} outside [0, 1)")
    if not train_mode or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = torch.rand(x.shape, generator=rng, dtype=x.dtype) < keep
    return x * mask / keep


class Dense(nn.Module):
    """Time-shared affine map followed by an optional activation."""

    def __init__(self, d_in: int, d_out: int, act: str = "none",
                 gen: torch.Generator | None = None):
        super().__init__()
        gen = gen if gen is not None else torch.Generator().manual_seed(0)
        self.W = nn.Parameter(uniform_init((d_in, d_out), d_in, gen))
        self.b = nn.Parameter(torch.zeros(d_out))
        self.act = act

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(
                f"dense: input width {x.shape[-1]} != layer input {self.d_in}")
        return activation(matmul(x, self.W) + self.b, self.act)


class GRUDirection(nn.Module):
    """One direction of a GRU layer (reset gate applied inside the candidate)."""

    def __init__(self, d_in: int, hidden: int, gen: torch.Generator):
        super().__init__()
        H = hidden
        for g in ("z", "r", "n"):
            setattr(self, f"W_{g}", nn.Parameter(uniform_init((d_in, H), d_in, gen)))
            setattr(self, f"U_{g}", nn.Parameter(uniform_init((H, H), H, gen)))
        self.b_z = nn.Parameter(torch.zeros(H))
        self.b_r = nn.Parameter(torch.zeros(H))
        self.b_un = nn.Parameter(torch.zeros(H))
        self.b_n = nn.Parameter(torch.zeros(H))
        self.hidden = H

    def forward(self, x: torch.Tensor, reverse: bool = False) -> torch.Tensor:
        # x: [B, T, d_in] -> [B, T, H]
        B, T, _ = x.shape
        H = self.hidden
        W = torch.cat([self.W_z, self.W_r, self.W_n], dim=1)
        U = torch.cat([self.U_z, self.U_r, self.U_n], dim=1)
        xb = x @ W + torch.cat([self.b_z, self.b_r, self.b_n])
        h = x.new_zeros(B, H)
        outs = [None] * T
        steps = range(T - 1, -1, -1) if reverse else range(T)
        for t in steps:
            hu = h @ U
            xt = xb[:, t]
            z = torch.sigmoid(xt[:, :H] + hu[:, :H])
            r = torch.sigmoid(xt[:, H:2 * H] + hu[:, H:2 * H])
            n = torch.tanh(xt[:, 2 * H:] + r * (hu[:, 2 * H:] + self.b_un))
            h = (1 - z) * n + z * h
            outs[t] = h
        return torch.stack(outs, dim=1)


class BiGRU(nn.Module):
    """Stack of 1 or 2 bidirectional GRU layers; output width ``2 * hidden``."""

    def __init__(self, d_in: int, hidden: int, num_layers: int = 1,
                 dropout_rate: float = 0.0, gen: torch.Generator | None = None):
        super().__init__()
        if num_layers not in (1, 2):
            raise ConfigError(f"num_layers must be 1 or 2, got {num_layers}")
        gen = gen if gen is not None else torch.Generator().manual_seed(0)
        self.layers = nn.ModuleList()
        width = d_in
        for _ in range(num_layers):
            self.layers.append(nn.ModuleDict({
                "fwd": GRUDirection(width, hidden, gen),
                "bwd": GRUDirection(width, hidden, gen),
            }))
            width = 2 * hidden
        self.hidden = hidden
        self.d_in = d_in
        self.dropout_rate = dropout_rate

    def forward(self, x: torch.Tensor, train_mode: bool = False,
                rng: torch.Generator | None = None) -> torch.Tensor:
        single = x.dim() == 2
        if single:
            x = x.unsqueeze(0)
        if x.shape[1] == 0:
            raise DimensionError("bigru: empty sequence")
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"bigru: input width {x.shape[-1]} != {self.d_in}")
        for i, layer in enumerate(self.layers):
            if i > 0:
                x = dropout(x, self.dropout_rate, train_mode, rng)
            x = torch.cat([layer["fwd"](x), layer["bwd"](x, reverse=True)], dim=-1)
        return x.squeeze(0) if single else x


def sinusoidal_positions(T: int, d: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if d % 2:
        raise ConfigError(f"positional encoding width must be even, got {d}")
    pos = torch.arange(T, dtype=torch.float64).unsqueeze(1)
    rates = torch.pow(10000.0, -torch.arange(0, d, 2, dtype=torch.float64) / d)
    pe = torch.zeros(T, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * rates)
    pe[:, 1::2] = torch.cos(pos * rates)
    return pe.to(dtype)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout_rate: float = 0.0,
                 gen: torch.Generator | None = None):
        super().__init__()
        if heads < 1 or d % heads:
            raise ConfigError(f"{heads} heads do not divide width {d}")
        gen = gen if gen is not None else torch.Generator().manual_seed(0)
        # head i owns columns [i*d_k, (i+1)*d_k) of the Q/K/V projections
        self.W_q = nn.Parameter(uniform_init((d, d), d, gen))
        self.W_k = nn.Parameter(uniform_init((d, d), d, gen))
        self.W_v = nn.Parameter(uniform_init((d, d), d, gen))
        self.W_o = nn.Parameter(uniform_init((d, d), d, gen))
        self.d = d
        self.heads = heads
        self.dropout_rate = dropout_rate

    def forward(self, x: torch.Tensor, train_mode: bool = False,
                rng: torch.Generator | None = None) -> torch.Tensor:
        if x.shape[-1] != self.d:
            raise DimensionError(f"mha: input width {x.shape[-1]} != {self.d}")
        *lead, T, d = x.shape
        h, dk = self.heads, d // self.heads

        def split(m):
            return matmul(x, m).reshape(*lead, T, h, dk).transpose(-3, -2)

        q, k, v = split(self.W_q), split(self.W_k), split(self.W_v)
        weights = softmax_rows(q @ k.transpose(-1, -2) / math.sqrt(dk))
        weights = dropout(weights, self.dropout_rate, train_mode, rng)
        heads = (weights @ v).transpose(-3, -2).reshape(*lead, T, d)
        return matmul(heads, self.W_o)


class TransformerEncoderLayer(nn.Module):
    """Post-norm encoder layer: MHA and a two-layer feed-forward block, each
    wrapped in dropout, a residual add and layer normalisation."""

    def __init__(self, d: int = 100, heads: int = 2, ffn_dims: tuple[int, int] = (400, 100),
                 dropout_rate: float = 0.0, gen: torch.Generator | None = None,
                 eps: float = 1e-5):
        super().__init__()
        if ffn_dims[-1] != d:
            raise ConfigError(f"feed-forward output {ffn_dims[-1]} must equal width {d}")
        gen = gen if gen is not None else torch.Generator().manual_seed(0)
        self.mha = MultiHeadAttention(d, heads, dropout_rate, gen)
        self.ffn1 = Dense(d, ffn_dims[0], "relu", gen)
        self.ffn2 = Dense(ffn_dims[0], ffn_dims[1], "none", gen)
        self.ln1_gamma = nn.Parameter(torch.ones(d))
        self.ln1_beta = nn.Parameter(torch.zeros(d))
        self.ln2_gamma = nn.Parameter(torch.ones(d))
        self.ln2_beta = nn.Parameter(torch.zeros(d))
        self.dropout_rate = dropout_rate
        self.eps = eps

    def forward(self, x: torch.Tensor, train_mode: bool = False,
                rng: torch.Generator | None = None) -> torch.Tensor:
        p = self.dropout_rate
        a = dropout(self.mha(x, train_mode, rng), p, train_mode, rng)
        y = layer_norm(x + a, self.ln1_gamma, self.ln1_beta, self.eps)
        f = dropout(self.ffn1(y), p, train_mode, rng)
        f = dropout(self.ffn2(f), p, train_mode, rng)
        return layer_norm(y + f, self.ln2_gamma, self.ln2_beta, self.eps)
