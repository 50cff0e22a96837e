"""Run configuration: every training and model hyperparameter in one place."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .exceptions import ContractError

MODELS = ("triforecaster", "mtl", "stl")
ABLATIONS = ("none", "regionmixer", "contextmoe", "timemoe")
EVAL_POOL_MODES = ("expectation", "sample")
CONTRASTIVE_SOURCES = ("last", "mean")


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 64
    latent_dim: int = 16
    region_layers: int = 1
    moe_blocks: int = 2
    num_e_per_moe: int = 4
    alpha: float = 0.1
    temperature: float = 0.5
    num_negatives: int = 4
    max_epochs: int = 200
    patience: int = 50
    seed: int = 0
    model: str = "triforecaster"
    ablate: str = "none"
    expert_blocks: int = 2
    expert_hidden: int | None = None
    backbone_blocks: int = 6
    eval_pool_mode: str = "expectation"
    contrastive_source: str = "last"
    stride: int = 1

    def validate(self):
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        for name in ("batch_size", "latent_dim", "num_e_per_moe", "max_epochs",
                     "expert_blocks", "backbone_blocks", "stride"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ContractError(f"{name} must be a positive integer, got {value!r}")
        for name in ("region_layers", "moe_blocks", "patience", "num_negatives"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ContractError(f"{name} must be a non-negative integer, got {value!r}")
        if self.expert_hidden is not None and (
            not isinstance(self.expert_hidden, int) or self.expert_hidden < 1
        ):
            raise ContractError(f"expert_hidden must be null or positive, got {self.expert_hidden!r}")
        if self.alpha < 0:
            raise ContractError(f"alpha must be non-negative, got {self.alpha}")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if self.alpha > 0 and self.num_negatives < 1:
            raise ContractError("contrastive loss enabled but num_negatives < 1")
        if self.model not in MODELS:
            raise ContractError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.ablate not in ABLATIONS:
            raise ContractError(f"ablate must be one of {ABLATIONS}, got {self.ablate!r}")
        if self.eval_pool_mode not in EVAL_POOL_MODES:
            raise ContractError(
                f"eval_pool_mode must be one of {EVAL_POOL_MODES}, got {self.eval_pool_mode!r}"
            )
        if self.contrastive_source not in CONTRASTIVE_SOURCES:
            raise ContractError(
                f"contrastive_source must be one of {CONTRASTIVE_SOURCES}, "
                f"got {self.contrastive_source!r}"
            )
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data).validate()

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def hash(self):
        """Stable digest of the configuration contents."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
