"""End-to-end forecasting networks and checkpoint serialization.

``TriForecasterNet`` chains the input embedding, region mixing, and the
context/time specializer stack, finishing with one linear projection head
per region. The two reference baselines share the embedding design: the
multi-task baseline uses one shared mixer backbone with per-region MLP
heads, the single-task baseline trains a fully separate network per region.

Checkpoints are a JSON manifest (parameter names, shapes, byte offsets,
config hash, seed) next to a binary blob of little-endian float64 values
concatenated in manifest order, so saved parameters are bit-exact.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import tensor as tt
from .config import TrainConfig
from .exceptions import ContractError, DimensionError
from .fusion import ForwardContext
from .layers import Block, EmbeddingLayer, Linear, MLP, TSMixerExpert
from .ct_specializer import CTSpecializerLayer
from .region_mixer import RegionMixerStack
from .tensor import Tensor


class DataDims:
    """Geometry of the dataset a model is built for."""

    def __init__(self, num_regions, lookback, hist_channels, horizon, future_channels):
        for name, value in (("num_regions", num_regions), ("lookback", lookback),
                            ("hist_channels", hist_channels), ("horizon", horizon)):
            if value < 1:
                raise ContractError(f"{name} must be positive, got {value}")
        if future_channels < 0:
            raise ContractError(f"future_channels must be >= 0, got {future_channels}")
        self.num_regions = num_regions
        self.lookback = lookback
        self.hist_channels = hist_channels
        self.horizon = horizon
        self.future_channels = future_channels

    def to_dict(self):
        return {
            "num_regions": self.num_regions,
            "lookback": self.lookback,
            "hist_channels": self.hist_channels,
            "horizon": self.horizon,
            "future_channels": self.future_channels,
        }


class TriForecasterNet(Block):
    def __init__(self, dims: DataDims, cfg: TrainConfig, rng):
        region_layers = 0 if cfg.ablate == "regionmixer" else cfg.region_layers
        self.embedding = EmbeddingLayer(
            dims.lookback, dims.hist_channels, dims.horizon,
            dims.future_channels, cfg.latent_dim, rng,
        )
        self.region_stack = RegionMixerStack(
            region_layers, dims.num_regions, dims.horizon, cfg.latent_dim,
            cfg.expert_blocks, rng, expert_hidden=cfg.expert_hidden,
        )
        self.ct_layers = [
            CTSpecializerLayer(
                cfg.num_e_per_moe, cfg.num_e_per_moe, dims.horizon, cfg.latent_dim,
                rng, hidden=cfg.expert_hidden,
                use_context=cfg.ablate != "contextmoe",
                use_time=cfg.ablate != "timemoe",
            )
            for _ in range(cfg.moe_blocks)
        ]
        self.heads = [Linear(cfg.latent_dim, 1, rng) for _ in range(dims.num_regions)]
        self.num_regions = dims.num_regions
        self.contrastive_source = cfg.contrastive_source

    def forward(self, hist, future, region, ctx: ForwardContext, collect_context=False):
        """Forecast a region-homogeneous batch.

        Returns ``(prediction, context)`` where prediction is
        (batch, horizon, 1) and context is the context-stage representation
        for the contrastive loss (None unless ``collect_context``).
        """
        if not 0 <= region < self.num_regions:
            raise ContractError(
                f"unknown region index {region} for {self.num_regions} regions"
            )
        x = self.embedding(hist, future)
        x = self.region_stack.forward(x, region, ctx)
        context_outputs = []
        for layer in self.ct_layers:
            x, ctx_out = layer.forward(x, ctx)
            context_outputs.append(ctx_out)
        prediction = self.heads[region](x)
        context = None
        if collect_context and context_outputs:
            if self.contrastive_source == "last":
                context = context_outputs[-1]
            else:
                acc = context_outputs[0]
                for extra in context_outputs[1:]:
                    acc = tt.add(acc, extra)
                context = tt.scale(acc, 1.0 / len(context_outputs))
        return prediction, context


class MTLNet(Block):
    """Shared mixer backbone with independently parameterized region heads."""

    def __init__(self, dims: DataDims, cfg: TrainConfig, rng):
        self.embedding = EmbeddingLayer(
            dims.lookback, dims.hist_channels, dims.horizon,
            dims.future_channels, cfg.latent_dim, rng,
        )
        self.backbone = TSMixerExpert(
            dims.horizon, cfg.latent_dim, cfg.backbone_blocks, rng,
            hidden=cfg.expert_hidden,
        )
        self.heads = [
            MLP(cfg.latent_dim, cfg.latent_dim, 1, rng) for _ in range(dims.num_regions)
        ]
        self.num_regions = dims.num_regions

    def forward(self, hist, future, region, ctx, collect_context=False):
        if not 0 <= region < self.num_regions:
            raise ContractError(
                f"unknown region index {region} for {self.num_regions} regions"
            )
        x = self.backbone(self.embedding(hist, future))
        return self.heads[region](x), None


class SingleRegionNet(Block):
    """One region's standalone model: embedding, mixer stack, MLP head."""

    def __init__(self, dims: DataDims, cfg: TrainConfig, rng):
        self.embedding = EmbeddingLayer(
            dims.lookback, dims.hist_channels, dims.horizon,
            dims.future_channels, cfg.latent_dim, rng,
        )
        self.backbone = TSMixerExpert(
            dims.horizon, cfg.latent_dim, cfg.backbone_blocks, rng,
            hidden=cfg.expert_hidden,
        )
        self.head = MLP(cfg.latent_dim, cfg.latent_dim, 1, rng)

    def forward(self, hist, future, region, ctx, collect_context=False):
        return self.head(self.backbone(self.embedding(hist, future))), None


class STLNet(Block):
    """Independent per-region models with zero parameter sharing."""

    def __init__(self, dims: DataDims, cfg: TrainConfig, rng):
        self.nets = [SingleRegionNet(dims, cfg, rng) for _ in range(dims.num_regions)]
        self.num_regions = dims.num_regions

    def forward(self, hist, future, region, ctx, collect_context=False):
        if not 0 <= region < self.num_regions:
            raise ContractError(
                f"unknown region index {region} for {self.num_regions} regions"
            )
        return self.nets[region].forward(hist, future, region, ctx, collect_context)


def build_model(cfg: TrainConfig, dims: DataDims, rng):
    cfg.validate()
    if cfg.model == "triforecaster":
        return TriForecasterNet(dims, cfg, rng)
    if cfg.model == "mtl":
        return MTLNet(dims, cfg, rng)
    if cfg.model == "stl":
        return STLNet(dims, cfg, rng)
    raise ContractError(f"unknown model kind {cfg.model!r}")


def dims_from_bundle(bundle):
    return DataDims(
        num_regions=len(bundle.region_ids),
        lookback=bundle.lookback,
        hist_channels=len(bundle.hist_channels),
        horizon=bundle.horizon,
        future_channels=len(bundle.future_channels),
    )


def build_checkpoint_model(cfg: TrainConfig, bundle):
    """A freshly initialized model matching a run's config and dataset,
    ready to receive checkpoint parameters."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    return build_model(cfg, dims_from_bundle(bundle), rng)


def param_count(model: Block):
    return model.param_count()


def parameter_manifest(model: Block):
    """Ordered (name, shape, byte_offset) rows for every parameter."""
    rows = []
    offset = 0
    for name, p in model.named_parameters():
        rows.append({"name": name, "shape": list(p.shape), "dtype": "f64",
                     "byte_offset": offset})
        offset += p.size * 8
    return rows


def state_dict(model: Block):
    return {name: p.data.copy() for name, p in model.named_parameters()}

def load_state(model: Block, state):
    for name, p in model.named_parameters():
        if name not in state:
            raise ContractError(f"state is missing parameter {name}")
        if state[name].shape != p.data.shape:
            raise DimensionError(
                f"parameter {name}: state shape {state[name].shape} vs model {p.data.shape}"
            )
        p.data[...] = state[name]


def save_checkpoint(directory, name, model: Block, config_hash, seed):
    """Write ``<name>.json`` (manifest) and ``<name>.bin`` (parameter blob)."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "config_hash": config_hash,
        "seed": seed,
        "parameters": parameter_manifest(model),
    }
    blob = bytearray()
    for _, p in model.named_parameters():
        blob += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    manifest_path = os.path.join(directory, f"{name}.json")
    blob_path = os.path.join(directory, f"{name}.bin")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(blob_path, "wb") as fh:
        fh.write(bytes(blob))
    return manifest_path, blob_path


def load_checkpoint(directory, name, model: Block):
    """Load parameters saved by ``save_checkpoint`` into ``model``.

    Returns the manifest dict. Raises if names, shapes, or offsets do not
    line up with the model's parameter manifest.
    """
    manifest_path = os.path.join(directory, f"{name}.json")
    blob_path = os.path.join(directory, f"{name}.bin")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    rows = manifest["parameters"]
    params = list(model.named_parameters())
    if len(rows) != len(params):
        raise ContractError(
            f"checkpoint has {len(rows)} parameters, model has {len(params)}"
        )
    for row, (pname, p) in zip(rows, params):
        if row["name"] != pname:
            raise ContractError(
                f"checkpoint parameter {row['name']!r} does not match model {pname!r}"
            )
        if tuple(row["shape"]) != p.data.shape:
            raise DimensionError(
                f"parameter {pname}: checkpoint shape {row['shape']} vs model {p.data.shape}"
            )
        start = row["byte_offset"]
        end = start + p.size * 8
        if end > len(blob):
            raise ContractError(f"checkpoint blob truncated at parameter {pname}")
        values = np.frombuffer(blob[start:end], dtype="<f8").reshape(p.data.shape)
        p.data[...] = values
    return manifest
