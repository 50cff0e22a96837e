"""Parameterized building blocks.

Linear maps, layer normalization, two-layer MLPs, mixer blocks that
alternate time- and feature-axis mixing, and the input embedding that
aligns a lookback window with the forecast horizon.

Weights initialize uniform in +/- 1/sqrt(fan_in) from the caller's PRNG;
biases start at zero.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tt
from .exceptions import DimensionError
from .tensor import Tensor


class Block:
    """Base for anything that owns parameters.

    ``named_parameters`` walks attributes in definition order, recursing
    into nested blocks and lists of blocks, so the parameter order is
    deterministic for a given construction path.
    """

    def named_parameters(self, prefix=""):
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Block):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Block):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self):
        return sum(p.size for p in self.parameters())


def init_weight(rng, in_dim, shape):
    bound = 1.0 / math.sqrt(in_dim)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Linear(Block):
    def __init__(self, in_dim, out_dim, rng):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = init_weight(rng, in_dim, (in_dim, out_dim))
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x):
        if x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"linear layer expects trailing dim {self.in_dim}, got shape {x.shape}"
            )
        return tt.add(tt.matmul(x, self.weight), self.bias)


class MLP(Block):
    """Two-layer perceptron with ReLU in between."""

    def __init__(self, in_dim, hidden_dim, out_dim, rng):
        self.fc1 = Linear(in_dim, hidden_dim, rng)
        self.fc2 = Linear(hidden_dim, out_dim, rng)

    def __call__(self, x):
        return self.fc2(tt.relu(self.fc1(x)))


class LayerNorm(Block):
    """Normalizes the last axis to zero mean / unit variance, then affine."""

    def __init__(self, dim):
        self.dim = dim
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        if x.shape[-1] != self.dim:
            raise DimensionError(
                f"layer norm over dim {self.dim} got shape {x.shape}"
            )
        return tt.add(tt.mul(tt.standardize(x), self.gain), self.shift)


class TSMixerBlock(Block):
    """Residual mixing along the time axis, then along the feature axis.

    Input and output are (..., horizon, dim). Each mixing stage normalizes
    over the axis being mixed before its MLP, so inference needs no batch
    statistics.
    """

    def __init__(self, horizon, dim, rng, time_hidden=None, feat_hidden=None):
        self.horizon = horizon
        self.dim = dim
        self.time_norm = LayerNorm(horizon)
        self.time_mlp = MLP(horizon, time_hidden or horizon, horizon, rng)
        self.feat_norm = LayerNorm(dim)
        self.feat_mlp = MLP(dim, feat_hidden or dim, dim, rng)

    def __call__(self, x):
        if x.shape[-2:] != (self.horizon, self.dim):
            raise DimensionError(
                f"mixer block expects (..., {self.horizon}, {self.dim}), got {x.shape}"
            )
        flipped = tt.swap_last(x)
        x = tt.add(x, tt.swap_last(self.time_mlp(self.time_norm(flipped))))
        return tt.add(x, self.feat_mlp(self.feat_norm(x)))


class TSMixerExpert(Block):
    """A stack of mixer blocks; the expert function used throughout."""

    def __init__(self, horizon, dim, blocks, rng, hidden=None):
        self.blocks = [
            TSMixerBlock(horizon, dim, rng, time_hidden=hidden, feat_hidden=hidden)
            for _ in range(blocks)
        ]

    def __call__(self, x):
        for block in self.blocks:
            x = block(x)
        return x


class EmbeddingLayer(Block):
    """Maps raw history and future covariates into the latent grid.

    The history (..., lookback, hist_channels) is projected along its time
    axis onto the horizon, concatenated with the future covariates
    (..., horizon, future_channels) on the channel axis, and the combined
    channels are projected to the latent width. Output is
    (..., horizon, latent_dim).
    """

    def __init__(self, lookback, hist_channels, horizon, future_channels, latent_dim, rng):
        self.lookback = lookback
        self.hist_channels = hist_channels
        self.horizon = horizon
        self.future_channels = future_channels
        self.latent_dim = latent_dim
        self.time_proj = Linear(lookback, horizon, rng)
        self.chan_proj = Linear(hist_channels + future_channels, latent_dim, rng)

    def __call__(self, hist, future=None):
        if hist.shape[-2:] != (self.lookback, self.hist_channels):
            raise DimensionError(
                "embedding expects history (..., "
                f"{self.lookback}, {self.hist_channels}), got {hist.shape}"
            )
        x = tt.swap_last(self.time_proj(tt.swap_last(hist)))
        if self.future_channels:
            if future is None or future.shape[-2:] != (self.horizon, self.future_channels):
                got = None if future is None else future.shape
                raise DimensionError(
                    "embedding expects future covariates (..., "
                    f"{self.horizon}, {self.future_channels}), got {got}"
                )
            x = tt.concat([x, future], axis=-1)
        return self.chan_proj(x)
