"""Region-expert mixing layers.

Each layer runs one expert per region plus a shared expert on a
region-homogeneous batch. The active region's expert output and the shared
output pass straight into the fusion combiner; the remaining candidates
(the shared expert and every other region's expert, never the active
region's own) are pooled under a routing distribution derived from
batch-level affinities. A residual connection closes the layer.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .exceptions import ContractError
from .fusion import ForwardContext, Fusion, affinity_probs
from .layers import Block, TSMixerExpert


class RegionMixerLayer(Block):
    def __init__(self, num_regions, horizon, dim, expert_blocks, rng, expert_hidden=None):
        self.num_regions = num_regions
        # Expert 0 is shared across regions; expert t+1 belongs to region t.
        self.shared_expert = TSMixerExpert(horizon, dim, expert_blocks, rng, hidden=expert_hidden)
        self.region_experts = [
            TSMixerExpert(horizon, dim, expert_blocks, rng, hidden=expert_hidden)
            for _ in range(num_regions)
        ]
        self.fusion = Fusion(dim, direct_slots=2, rng=rng)

    def candidate_experts(self, region):
        """Expert indices eligible for pooling: everyone but the region's own."""
        own = region + 1
        return [i for i in range(self.num_regions + 1) if i != own]

    def forward(self, x, region, ctx: ForwardContext):
        if not 0 <= region < self.num_regions:
            raise ContractError(
                f"region index {region} out of range for {self.num_regions} regions"
            )
        if x.ndim != 3:
            raise ContractError(
                f"region mixing expects a (batch, horizon, dim) input, got {x.shape}"
            )
        outputs = [self.shared_expert(x)]
        outputs.extend(expert(x) for expert in self.region_experts)
        own = outputs[region + 1]
        shared = outputs[0]
        candidates = self.candidate_experts(region)
        o_cat = tt.stack([outputs[i] for i in candidates], axis=0)
        probs = ctx.resolve_probs(
            lambda: affinity_probs(own.data, np.stack([outputs[i].data for i in candidates]))
        )
        fused = self.fusion([own, shared], o_cat, probs, ctx.mode, ctx.rng)
        return tt.add(fused, x)


class RegionMixerStack(Block):
    """Zero or more region mixing layers applied in sequence."""

    def __init__(self, num_layers, num_regions, horizon, dim, expert_blocks, rng,
                 expert_hidden=None):
        self.layers = [
            RegionMixerLayer(num_regions, horizon, dim, expert_blocks, rng,
                             expert_hidden=expert_hidden)
            for _ in range(num_layers)
        ]

    def forward(self, x, region, ctx: ForwardContext):
        for layer in self.layers:
            x = layer.forward(x, region, ctx)
        return x
