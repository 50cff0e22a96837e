"""Scikit-learn style estimators over the forecasting networks.

Hyperparameters are plain constructor arguments, so ``get_params`` /
``set_params`` / ``clone`` work the usual way and the estimators slot into
standard tooling. ``fit`` consumes a ``DatasetBundle`` from the data
pipeline; ``predict`` takes a region-homogeneous list of its samples and
returns normalized forecasts, one row per sample.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .config import TrainConfig
from .data import DatasetBundle
from .exceptions import ContractError
from .training import evaluate, predict, run_training
from .validation import check_fitted, check_sample_batch


class _LoadForecaster(BaseEstimator):
    _model_kind = None

    def _make_config(self):
        return TrainConfig(model=self._model_kind, **self.get_params()).validate()

    def fit(self, dataset, log=None):
        """Train on a ``DatasetBundle``; returns self.

        Fitted state: ``model_`` (the network), ``config_``, ``history_``,
        ``best_epoch_``, ``metrics_`` (val/test MSE and MAE at the best
        epoch), ``region_ids_``, and ``stats_`` (normalization statistics
        for turning predictions back into load units).
        """
        if not isinstance(dataset, DatasetBundle):
            raise ContractError(
                f"fit expects a DatasetBundle, got {type(dataset).__name__}"
            )
        config = self._make_config()
        model, result = run_training(config, dataset, log=log)
        self.model_ = model
        self.config_ = config
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.metrics_ = result.metrics
        self.region_ids_ = list(dataset.region_ids)
        self.stats_ = dataset.stats
        self.horizon_ = dataset.horizon
        return self

    def predict(self, samples):
        """Normalized (n, horizon) forecasts for one region's samples."""
        check_fitted(self)
        region = check_sample_batch(samples)
        return predict(
            self.model_, samples, region,
            pool_mode=self.config_.eval_pool_mode, seed=self.config_.seed,
        )

    def predict_load(self, samples):
        """Forecasts in original load units (denormalized per region)."""
        check_fitted(self)
        normalized = self.predict(samples)
        return self.stats_.denormalize_load(samples[0].region_id, normalized)

    def evaluate(self, dataset, split="test"):
        """Per-region and mean MSE/MAE on a bundle split (normalized scale)."""
        check_fitted(self)
        return evaluate(
            self.model_, dataset, split,
            pool_mode=self.config_.eval_pool_mode, seed=self.config_.seed,
        )


class TriForecasterRegressor(_LoadForecaster):
    """Region-expert mixing plus context/time specialization with
    stochastic fusion and an optional contrastive objective."""

    _model_kind = "triforecaster"

    def __init__(self, lr=0.001, batch_size=64, latent_dim=16, region_layers=1,
                 moe_blocks=2, num_e_per_moe=4, alpha=0.1, temperature=0.5,
                 num_negatives=4, max_epochs=200, patience=50, seed=0,
                 ablate="none", expert_blocks=2, expert_hidden=None,
                 eval_pool_mode="expectation", contrastive_source="last"):
        self.lr = lr
        self.batch_size = batch_size
        self.latent_dim = latent_dim
        self.region_layers = region_layers
        self.moe_blocks = moe_blocks
        self.num_e_per_moe = num_e_per_moe
        self.alpha = alpha
        self.temperature = temperature
        self.num_negatives = num_negatives
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.ablate = ablate
        self.expert_blocks = expert_blocks
        self.expert_hidden = expert_hidden
        self.eval_pool_mode = eval_pool_mode
        self.contrastive_source = contrastive_source


class MTLRegressor(_LoadForecaster):
    """Shared mixer backbone with per-region MLP heads."""

    _model_kind = "mtl"

    def __init__(self, lr=0.001, batch_size=64, latent_dim=16, backbone_blocks=6,
                 expert_hidden=None, max_epochs=200, patience=50, seed=0,
                 eval_pool_mode="expectation"):
        self.lr = lr
        self.batch_size = batch_size
        self.latent_dim = latent_dim
        self.backbone_blocks = backbone_blocks
        self.expert_hidden = expert_hidden
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.eval_pool_mode = eval_pool_mode


class STLRegressor(_LoadForecaster):
    """One fully independent model per region."""

    _model_kind = "stl"

    def __init__(self, lr=0.001, batch_size=64, latent_dim=16, backbone_blocks=6,
                 expert_hidden=None, max_epochs=200, patience=50, seed=0,
                 eval_pool_mode="expectation"):
        self.lr = lr
        self.batch_size = batch_size
        self.latent_dim = latent_dim
        self.backbone_blocks = backbone_blocks
        self.expert_hidden = expert_hidden
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.eval_pool_mode = eval_pool_mode
