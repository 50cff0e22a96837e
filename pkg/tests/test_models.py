"""Model zoo: shapes, determinism, parameter accounting, checkpoints."""

import numpy as np
import pytest

import triforecaster.tensor as tt
from triforecaster.config import TrainConfig
from triforecaster.exceptions import ContractError, DimensionError
from triforecaster.fusion import EVAL, TRAIN, ForwardContext
from triforecaster.gradcheck import run_model_gradcheck
from triforecaster.layers import Linear
from triforecaster.models import (
    DataDims,
    MTLNet,
    STLNet,
    TriForecasterNet,
    build_model,
    load_checkpoint,
    load_state,
    param_count,
    parameter_manifest,
    save_checkpoint,
    state_dict,
)
from triforecaster.tensor import Tensor


def dims_for(num_regions=3, lookback=24, hist_channels=2, horizon=12, future_channels=2):
    return DataDims(num_regions, lookback, hist_channels, horizon, future_channels)


def cfg_for(**kwargs):
    defaults = dict(latent_dim=8, region_layers=1, moe_blocks=1, num_e_per_moe=2,
                    expert_blocks=1, alpha=0.0)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


def batch_for(dims, n=4, seed=0):
    rng = np.random.default_rng(seed)
    hist = Tensor(rng.normal(size=(n, dims.lookback, dims.hist_channels)))
    future = Tensor(rng.normal(size=(n, dims.horizon, dims.future_channels)))
    return hist, future


class TestForward:
    def test_output_shape(self):
        dims = dims_for()
        model = TriForecasterNet(dims, cfg_for(), np.random.default_rng(0))
        hist, future = batch_for(dims)
        pred, ctx_out = model.forward(hist, future, 1, ForwardContext(mode=EVAL))
        assert pred.shape == (4, 12, 1)
        assert ctx_out is None

    def test_collect_context(self):
        dims = dims_for()
        model = TriForecasterNet(dims, cfg_for(), np.random.default_rng(0))
        hist, future = batch_for(dims)
        _, ctx_out = model.forward(
            hist, future, 0, ForwardContext(mode=EVAL), collect_context=True
        )
        assert ctx_out.shape == (4, 12, 8)

    def test_unknown_region(self):
        dims = dims_for()
        model = TriForecasterNet(dims, cfg_for(), np.random.default_rng(0))
        hist, future = batch_for(dims)
        with pytest.raises(ContractError):
            model.forward(hist, future, 3, ForwardContext(mode=EVAL))

    def test_ablation_floor_still_differentiates(self):
        # No mixing layers at all: embedding plus head, gradients still flow.
        dims = dims_for()
        model = TriForecasterNet(
            dims, cfg_for(region_layers=0, moe_blocks=0), np.random.default_rng(1)
        )
        hist, future = batch_for(dims, seed=2)
        pred, _ = model.forward(hist, future, 0, ForwardContext(mode=EVAL))
        tt.sum_(tt.square(pred)).backward()
        touched = {
            name: p.grad
            for name, p in model.named_parameters()
            if name.startswith("embedding.") or name.startswith("heads.0.")
        }
        assert touched
        assert all(g is not None and np.all(np.isfinite(g)) for g in touched.values())
        untouched = [p.grad for name, p in model.named_parameters()
                     if name.startswith("heads.1.")]
        assert all(g is None for g in untouched)

    def test_eval_forward_deterministic(self):
        dims = dims_for()
        model = TriForecasterNet(dims, cfg_for(), np.random.default_rng(3))
        hist, future = batch_for(dims, seed=4)
        a, _ = model.forward(hist, future, 0, ForwardContext(mode=EVAL))
        b, _ = model.forward(hist, future, 0, ForwardContext(mode=EVAL))
        np.testing.assert_array_equal(a.data, b.data)

    def test_full_model_gradcheck_tiny_config(self):
        max_err, _ = run_model_gradcheck(seed=0)
        assert max_err <= 1e-4

    def test_mtl_and_stl_shapes(self):
        dims = dims_for()
        for cls in (MTLNet, STLNet):
            model = cls(dims, cfg_for(backbone_blocks=2), np.random.default_rng(5))
            hist, future = batch_for(dims, seed=6)
            pred, ctx_out = model.forward(hist, future, 2, ForwardContext(mode=EVAL))
            assert pred.shape == (4, 12, 1)
            assert ctx_out is None

    def test_stl_shares_nothing(self):
        dims = dims_for(num_regions=2)
        model = STLNet(dims, cfg_for(backbone_blocks=1), np.random.default_rng(7))
        names = [name for name, _ in model.named_parameters()]
        assert all(name.startswith(("nets.0.", "nets.1.")) for name in names)
        per_region = param_count(model.nets[0])
        assert param_count(model) == 2 * per_region


class TestParamCount:
    def test_linear_count(self):
        layer = Linear(3, 2, np.random.default_rng(8))
        assert layer.param_count() == 8

    def test_adding_region_adds_expert_and_head(self):
        cfg = cfg_for()
        base = TriForecasterNet(dims_for(num_regions=2), cfg, np.random.default_rng(9))
        bigger = TriForecasterNet(dims_for(num_regions=3), cfg, np.random.default_rng(9))
        expert = base.region_stack.layers[0].region_experts[0]
        head = base.heads[0]
        expected_delta = cfg.region_layers * expert.param_count() + head.param_count()
        assert param_count(bigger) - param_count(base) == expected_delta

    def test_manifest_enumeration_matches_count(self):
        model = TriForecasterNet(dims_for(), cfg_for(), np.random.default_rng(10))
        manifest = parameter_manifest(model)
        total = sum(int(np.prod(row["shape"])) for row in manifest)
        assert total == param_count(model)
        # Offsets are contiguous float64 strides.
        offset = 0
        for row in manifest:
            assert row["byte_offset"] == offset
            offset += int(np.prod(row["shape"])) * 8

    @pytest.mark.parametrize("ablate", ["regionmixer", "contextmoe", "timemoe"])
    def test_ablations_have_strictly_fewer_params(self, ablate):
        full = build_model(cfg_for(), dims_for(), np.random.default_rng(11))
        ablated = build_model(cfg_for(ablate=ablate), dims_for(), np.random.default_rng(11))
        assert param_count(ablated) < param_count(full)


class TestDeterminism:
    def test_same_seed_bit_identical_parameters(self):
        cfg = cfg_for()
        a = build_model(cfg, dims_for(), np.random.default_rng(42))
        b = build_model(cfg, dims_for(), np.random.default_rng(42))
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = cfg_for()
        model = build_model(cfg, dims_for(), np.random.default_rng(12))
        save_checkpoint(tmp_path, "best", model, cfg.hash(), cfg.seed)
        clone = build_model(cfg, dims_for(), np.random.default_rng(13))
        manifest = load_checkpoint(tmp_path, "best", clone)
        assert manifest["config_hash"] == cfg.hash()
        assert manifest["seed"] == cfg.seed
        for (_, pa), (_, pb) in zip(model.named_parameters(), clone.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_shape_mismatch_rejected(self, tmp_path):
        cfg = cfg_for()
        model = build_model(cfg, dims_for(), np.random.default_rng(14))
        save_checkpoint(tmp_path, "best", model, cfg.hash(), cfg.seed)
        other = build_model(cfg_for(latent_dim=4), dims_for(), np.random.default_rng(15))
        with pytest.raises((ContractError, DimensionError)):
            load_checkpoint(tmp_path, "best", other)

    def test_state_dict_round_trip(self):
        cfg = cfg_for()
        model = build_model(cfg, dims_for(), np.random.default_rng(16))
        state = state_dict(model)
        for p in model.parameters():
            p.data[...] = 0.0
        load_state(model, state)
        for (name, p) in model.named_parameters():
            np.testing.assert_array_equal(p.data, state[name])
