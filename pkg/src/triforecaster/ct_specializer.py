"""Context- and time-specializing expert layers, plus the contrastive loss.

The context stage mixes the latent axis per timestep through a small MoE
whose routing comes straight from expert activations; the time stage does
the same along the horizon axis on the transposed representation. A
residual connection spans the whole layer. The context-stage output feeds
the contrastive objective, which pulls contextually similar samples toward
the same context experts.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .exceptions import ContractError, DimensionError
from .fusion import ForwardContext, Fusion, activation_probs
from .layers import Block, MLP
from .tensor import Tensor


class ContextMoE(Block):
    """Experts mixing the latent axis; captures instance-context variation."""

    def __init__(self, num_experts, horizon, dim, rng, hidden=None):
        if num_experts < 1:
            raise ContractError("context stage needs at least one expert")
        self.experts = [MLP(dim, hidden or dim, dim, rng) for _ in range(num_experts)]
        self.fusion = Fusion(dim, direct_slots=1, rng=rng)

    def forward(self, x, ctx: ForwardContext):
        o_cat = tt.stack([g(x) for g in self.experts], axis=0)
        probs = ctx.resolve_probs(lambda: activation_probs(o_cat.data))
        return self.fusion([x], o_cat, probs, ctx.mode, ctx.rng)


class TimeMoE(Block):
    """Experts mixing the horizon axis on the transposed representation."""

    def __init__(self, num_experts, horizon, dim, rng, hidden=None):
        if num_experts < 1:
            raise ContractError("time stage needs at least one expert")
        self.experts = [MLP(horizon, hidden or horizon, horizon, rng) for _ in range(num_experts)]
        self.fusion = Fusion(horizon, direct_slots=1, rng=rng)

    def forward(self, x, ctx: ForwardContext):
        flipped = tt.swap_last(x)
        o_cat = tt.stack([h(flipped) for h in self.experts], axis=0)
        probs = ctx.resolve_probs(lambda: activation_probs(o_cat.data))
        fused = self.fusion([flipped], o_cat, probs, ctx.mode, ctx.rng)
        return tt.swap_last(fused)


class CTSpecializerLayer(Block):
    """Context stage, then time stage, with a layer-spanning residual.

    Either stage may be absent (ablations); a missing stage passes its
    input through. ``forward`` returns the layer output and the
    context-stage output used by the contrastive loss.
    """

    def __init__(self, num_context_experts, num_time_experts, horizon, dim, rng,
                 hidden=None, use_context=True, use_time=True):
        self.context = (
            ContextMoE(num_context_experts, horizon, dim, rng, hidden=hidden)
            if use_context else None
        )
        self.time = (
            TimeMoE(num_time_experts, horizon, dim, rng, hidden=hidden)
            if use_time else None
        )

    def named_parameters(self, prefix=""):
        if self.context is not None:
            yield from self.context.named_parameters(f"{prefix}context.")
        if self.time is not None:
            yield from self.time.named_parameters(f"{prefix}time.")

    def forward(self, x, ctx: ForwardContext):
        ctx_out = self.context.forward(x, ctx) if self.context is not None else x
        timed = self.time.forward(ctx_out, ctx) if self.time is not None else ctx_out
        return tt.add(timed, x), ctx_out


def _flat_norm(x):
    return tt.sqrt(tt.sum_(tt.square(x)))


def cosine_sim(u, v):
    """Cosine similarity of two same-shape tensors, flattened to vectors."""
    if u.shape != v.shape:
        raise DimensionError(f"cosine_sim: shapes {u.shape} and {v.shape} differ")
    uf, vf = tt.flatten(u), tt.flatten(v)
    nu, nv = _flat_norm(uf), _flat_norm(vf)
    if float(nu.data) == 0.0 or float(nv.data) == 0.0:
        raise ContractError("cosine_sim: zero-norm input")
    return tt.div(tt.sum_(tt.mul(uf, vf)), tt.mul(nu, nv))


def cosine_sim_batch(u, v):
    """Per-sample cosine similarity over leading axis 0; returns shape (n,)."""
    if u.shape != v.shape:
        raise DimensionError(f"cosine_sim_batch: shapes {u.shape} and {v.shape} differ")
    axes = tuple(range(1, u.ndim))
    nu = tt.sqrt(tt.sum_(tt.square(u), axis=axes))
    nv = tt.sqrt(tt.sum_(tt.square(v), axis=axes))
    if np.any(nu.data == 0.0) or np.any(nv.data == 0.0):
        raise ContractError("cosine_sim_batch: zero-norm input")
    return tt.div(tt.sum_(tt.mul(u, v), axis=axes), tt.mul(nu, nv))


def contrastive_loss(anchor, positive, negatives, temperature):
    """Ratio-form contrastive objective over last-layer context outputs.

    Returns -exp(s+/t) / (exp(s+/t) + sum_i exp(s-_i/t)) where the s are
    cosine similarities of the anchor against its positive and negatives.
    The value always lies in (-1, 0); no logarithm is applied. A shared
    constant is subtracted inside the exponentials for numerical stability,
    which leaves the ratio unchanged.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if not negatives:
        raise ContractError("contrastive loss needs at least one negative sample")
    s_pos = cosine_sim(anchor, positive)
    s_negs = [cosine_sim(anchor, n) for n in negatives]
    shift = float(max([s_pos.data.max()] + [s.data.max() for s in s_negs]))
    num = tt.exp(tt.scale(tt.sub(s_pos, shift), 1.0 / temperature))
    den = num
    for s in s_negs:
        den = tt.add(den, tt.exp(tt.scale(tt.sub(s, shift), 1.0 / temperature)))
    return tt.neg(tt.div(num, den))


def contrastive_terms_batch(anchor, positive, negatives, temperature):
    """Vectorized contrastive terms for a batch; returns shape (n,).

    ``anchor`` and ``positive`` are (n, ...) tensors, ``negatives`` a list
    of (n, ...) tensors (one per negative slot). Agrees with
    ``contrastive_loss`` applied per sample.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if not negatives:
        raise ContractError("contrastive loss needs at least one negative sample")
    s_pos = cosine_sim_batch(anchor, positive)
    s_negs = [cosine_sim_batch(anchor, n) for n in negatives]
    shift = tt.constant(
        np.maximum.reduce([s_pos.data] + [s.data for s in s_negs])
    )
    num = tt.exp(tt.scale(tt.sub(s_pos, shift), 1.0 / temperature))
    den = num
    for s in s_negs:
        den = tt.add(den, tt.exp(tt.scale(tt.sub(s, shift), 1.0 / temperature)))
    return tt.neg(tt.div(num, den))
