"""Stochastic fusion of expert outputs.

Candidate experts are weighted cell by cell: every (position, latent)
coordinate carries its own categorical distribution over experts, derived
either from batch-level affinities between expert activations or directly
from per-sample activations. During training one expert is sampled per
cell; at evaluation the pooled value is the probability-weighted
expectation so inference is deterministic.

The probabilities themselves never carry gradient: both the affinity
distances and the activations entering the routing softmax are treated as
constants, mirroring classic stochastic pooling where routing learns only
through which experts receive gradient.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .exceptions import ContractError, DimensionError
from .layers import Block, Linear
from .tensor import Tensor

TRAIN = "train"
EVAL = "eval"

PROB_CELL_TOL = 1e-9


class ProbTensor:
    """Categorical distributions over experts, one per trailing cell.

    ``probs`` has shape (num_experts, *cells); every cell's column must be
    non-negative and sum to one within ``PROB_CELL_TOL``.
    """

    __slots__ = ("probs",)

    def __init__(self, probs):
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim < 2:
            raise ContractError(
                f"probability tensor needs an expert axis plus cells, got shape {p.shape}"
            )
        if np.any(p < 0):
            raise ContractError("probability tensor has negative entries")
        sums = p.sum(axis=0)
        if np.max(np.abs(sums - 1.0)) > PROB_CELL_TOL:
            raise ContractError(
                "probability tensor cells do not sum to 1 "
                f"(worst deviation {np.max(np.abs(sums - 1.0)):.3e})"
            )
        self.probs = p

    @property
    def num_experts(self):
        return self.probs.shape[0]

    @property
    def cell_shape(self):
        return self.probs.shape[1:]


@dataclass
class ForwardContext:
    """Carries the forward mode, the sampling PRNG, and optional routing
    capture/replay used by the finite-difference gradient checker."""

    mode: str = EVAL
    rng: np.random.Generator | None = None
    capture: list | None = None
    replay: deque | None = None

    def __post_init__(self):
        if self.mode not in (TRAIN, EVAL):
            raise ContractError(f"unknown forward mode {self.mode!r}")

    def resolve_probs(self, compute):
        if self.replay is not None:
            if not self.replay:
                raise ContractError("routing replay exhausted")
            return self.replay.popleft()
        probs = compute()
        if self.capture is not None:
            self.capture.append(probs)
        return probs

    @classmethod
    def replaying(cls, probs, mode=EVAL, rng=None):
        return cls(mode=mode, rng=rng, replay=deque(probs))


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _stable_softmax0(x):
    shifted = x - x.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def affinity_probs(own, others):
    """Routing distribution from batch-level activation affinities.

    ``own`` is (batch, *cells) for the active expert; ``others`` is
    (candidates, batch, *cells). Per cell, each candidate's distance is the
    batch sum of absolute differences to the active expert, and the
    distribution is the softmax of the negated distances. One distribution
    serves the whole batch. Computed on raw values, outside the tape.
    """
    own = _as_array(own)
    others = _as_array(others)
    if own.ndim < 1 or own.shape[0] < 1:
        raise ContractError("affinity_probs needs at least one sample")
    if others.ndim != own.ndim + 1 or others.shape[1:] != own.shape:
        raise DimensionError(
            f"affinity_probs: own {own.shape} vs others {others.shape}"
        )
    if others.shape[0] < 1:
        raise ContractError("affinity_probs needs at least one candidate expert")
    distances = np.abs(own[None, ...] - others).sum(axis=1)
    return ProbTensor(_stable_softmax0(-distances))


def activation_probs(o_cat):
    """Routing distribution taken directly from expert activations.

    ``o_cat`` is (experts, *cells); the softmax runs over the expert axis
    independently per cell, with no batch aggregation. Computed on raw
    values, outside the tape.
    """
    cat = _as_array(o_cat)
    if cat.ndim < 2 or cat.shape[0] < 1:
        raise ContractError(
            f"activation_probs needs (experts, *cells), got shape {cat.shape}"
        )
    return ProbTensor(_stable_softmax0(cat))


def _sample_cells(probs, cell_shape, rng):
    """One inverse-CDF categorical draw per cell, in row-major cell order."""
    cum = np.cumsum(probs, axis=0)
    draws = rng.random(cell_shape)
    if probs.shape[1:] != cell_shape:
        # Distributions shared across a leading batch axis of the cells.
        cum = cum.reshape((cum.shape[0], 1) + cum.shape[1:])
    idx = (draws[None, ...] >= cum).sum(axis=0)
    return np.minimum(idx, probs.shape[0] - 1)


def stoch_pool(o_cat, probs, mode, rng=None):
    """Collapse the expert axis of ``o_cat`` under per-cell distributions.

    ``o_cat`` is (experts, *cells); ``probs`` may match exactly, or the
    cells of ``o_cat`` may carry one extra leading batch axis that the
    distributions are shared across. In train mode one expert is sampled
    per cell and the gradient flows only into the selected entries; in eval
    mode the result is the expectation over experts. Probabilities carry no
    gradient in either mode.
    """
    if not isinstance(probs, ProbTensor):
        probs = ProbTensor(probs)
    p = probs.probs
    cells = o_cat.shape[1:]
    if o_cat.shape[0] != p.shape[0]:
        raise DimensionError(
            f"stoch_pool: expert counts differ, {o_cat.shape} vs {p.shape}"
        )
    if p.shape[1:] != cells and p.shape[1:] != cells[1:]:
        raise DimensionError(
            f"stoch_pool: cells {cells} incompatible with probs {p.shape}"
        )
    if mode == EVAL:
        weights = p if p.shape[1:] == cells else np.broadcast_to(
            p.reshape((p.shape[0], 1) + p.shape[1:]), o_cat.shape
        )
        return tt.sum_(tt.mul(o_cat, tt.constant(weights)), axis=0)
    if mode == TRAIN:
        if rng is None:
            raise ContractError("train-mode pooling needs a PRNG")
        idx = _sample_cells(p, cells, rng)
        return tt.take_expert(o_cat, idx)
    raise ContractError(f"unknown pooling mode {mode!r}")


class Fusion(Block):
    """Combines directly-passed tensors with the pooled expert consensus.

    Every expert output is first passed through a shared width-preserving
    linear map, pooled cell-wise under the routing distribution, then the
    direct inputs and the pooled tensor are concatenated on the trailing
    axis and projected back to the working width.
    """

    def __init__(self, width, direct_slots, rng):
        self.width = width
        self.direct_slots = direct_slots
        self.expert_proj = Linear(width, width, rng)
        self.combine = Linear((direct_slots + 1) * width, width, rng)

    def __call__(self, direct, o_cat, probs, mode, rng=None):
        if len(direct) != self.direct_slots:
            raise DimensionError(
                f"fusion configured for {self.direct_slots} direct inputs, got {len(direct)}"
            )
        for d in direct:
            if d.shape != o_cat.shape[1:]:
                raise DimensionError(
                    f"fusion: direct input {d.shape} vs expert cells {o_cat.shape[1:]}"
                )
        pooled = stoch_pool(self.expert_proj(o_cat), probs, mode, rng)
        return self.combine(tt.concat([*direct, pooled], axis=-1))
