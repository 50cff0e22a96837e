"""Stochastic fusion: routing distributions, pooling, and the combiner."""

import numpy as np
import pytest

import triforecaster.tensor as tt
from triforecaster.exceptions import ContractError, DimensionError
from triforecaster.fusion import (
    EVAL,
    TRAIN,
    Fusion,
    ProbTensor,
    activation_probs,
    affinity_probs,
    stoch_pool,
)
from triforecaster.gradcheck import check_gradients
from triforecaster.tensor import Tensor


class TestProbTensor:
    def test_valid(self):
        p = ProbTensor(np.full((4, 2, 3), 0.25))
        assert p.num_experts == 4 and p.cell_shape == (2, 3)

    def test_rejects_bad_sum(self):
        with pytest.raises(ContractError):
            ProbTensor(np.full((4, 2, 3), 0.3))

    def test_rejects_negative(self):
        bad = np.array([[[1.5]], [[-0.5]]])
        with pytest.raises(ContractError):
            ProbTensor(bad)


class TestAffinityProbs:
    def test_zero_distances_give_uniform(self):
        rng = np.random.default_rng(0)
        own = rng.normal(size=(4, 3, 2))
        others = np.stack([own, own, own])
        probs = affinity_probs(own, others).probs
        np.testing.assert_allclose(probs, 1 / 3, atol=1e-15)

    def test_log_two_distance_closed_form(self):
        own = np.zeros((1, 1, 1))
        others = np.zeros((2, 1, 1, 1))
        others[1, 0, 0, 0] = np.log(2.0)
        probs = affinity_probs(own, others).probs
        np.testing.assert_allclose(probs[:, 0, 0], [2 / 3, 1 / 3], atol=1e-15)

    def test_cells_sum_to_one(self):
        rng = np.random.default_rng(1)
        own = rng.normal(size=(8, 5, 4)) * 10
        others = rng.normal(size=(3, 8, 5, 4)) * 10
        probs = affinity_probs(own, others).probs
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-9)

    def test_empty_batch_rejected(self):
        with pytest.raises(ContractError):
            affinity_probs(np.zeros((0, 2, 2)), np.zeros((3, 0, 2, 2)))


class TestActivationProbs:
    def test_identical_experts_uniform(self):
        rng = np.random.default_rng(2)
        one = rng.normal(size=(4, 3))
        probs = activation_probs(np.stack([one] * 5)).probs
        np.testing.assert_allclose(probs, 0.2, atol=1e-15)

    def test_single_expert_is_one(self):
        probs = activation_probs(np.random.default_rng(3).normal(size=(1, 4, 3)))
        np.testing.assert_array_equal(probs.probs, np.ones((1, 4, 3)))

    def test_cells_sum_to_one(self):
        rng = np.random.default_rng(4)
        probs = activation_probs(rng.normal(size=(6, 4, 3)) * 20).probs
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-9)


def one_hot_probs(num_experts, cells, hot):
    p = np.zeros((num_experts,) + cells)
    p[hot] = 1.0
    return ProbTensor(p)


class TestStochPool:
    def test_one_hot_selects_expert_both_modes(self):
        rng = np.random.default_rng(5)
        o_cat = Tensor(rng.normal(size=(3, 4, 2)))
        probs = one_hot_probs(3, (4, 2), hot=2)
        for mode in (TRAIN, EVAL):
            out = stoch_pool(o_cat, probs, mode, rng=np.random.default_rng(0))
            np.testing.assert_array_equal(out.data, o_cat.data[2])

    def test_eval_symmetry_cancels(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 2))
        o_cat = Tensor(np.stack([x, -x]))
        probs = ProbTensor(np.full((2, 4, 2), 0.5))
        out = stoch_pool(o_cat, probs, EVAL)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-15)

    def test_eval_is_convex_combination(self):
        rng = np.random.default_rng(7)
        o_cat = rng.normal(size=(5, 6, 3))
        probs = ProbTensor(
            activation_probs(rng.normal(size=(5, 6, 3))).probs
        )
        out = stoch_pool(Tensor(o_cat), probs, EVAL).data
        assert np.all(out <= o_cat.max(axis=0) + 1e-12)
        assert np.all(out >= o_cat.min(axis=0) - 1e-12)

    def test_train_sampling_frequencies(self):
        # Empirical draw frequencies track the cell distribution.
        p = np.zeros((3, 2, 2))
        p[0], p[1], p[2] = 0.7, 0.2, 0.1
        probs = ProbTensor(p)
        o_cat = Tensor(np.arange(3.0)[:, None, None] * np.ones((3, 2, 2)))
        rng = np.random.default_rng(8)
        draws = 100_000
        counts = np.zeros((3, 2, 2))
        for _ in range(draws):
            out = stoch_pool(o_cat, probs, TRAIN, rng=rng)
            chosen = out.data.astype(int)
            for e in range(3):
                counts[e] += chosen == e
        freqs = counts / draws
        np.testing.assert_allclose(freqs, p, atol=0.01)

    def test_train_needs_rng(self):
        o_cat = Tensor(np.zeros((2, 2, 2)))
        with pytest.raises(ContractError):
            stoch_pool(o_cat, ProbTensor(np.full((2, 2, 2), 0.5)), TRAIN)

    def test_invalid_probs_rejected(self):
        o_cat = Tensor(np.zeros((2, 2, 2)))
        with pytest.raises(ContractError):
            stoch_pool(o_cat, np.full((2, 2, 2), 0.6), TRAIN, np.random.default_rng(0))

    def test_fixed_seed_bit_reproducible(self):
        rng = np.random.default_rng(9)
        o_cat = Tensor(rng.normal(size=(4, 5, 3)))
        probs = activation_probs(rng.normal(size=(4, 5, 3)))
        a = stoch_pool(o_cat, probs, TRAIN, rng=np.random.default_rng(42)).data
        b = stoch_pool(o_cat, probs, TRAIN, rng=np.random.default_rng(42)).data
        np.testing.assert_array_equal(a, b)

    def test_every_expert_eventually_selected(self):
        # Non-degenerate distributions explore the full expert set per cell.
        rng = np.random.default_rng(10)
        probs = ProbTensor(np.full((3, 4, 2), 1 / 3))
        o_cat = Tensor(np.arange(3.0)[:, None, None] * np.ones((3, 4, 2)))
        seen = np.zeros((3, 4, 2), dtype=bool)
        for _ in range(200):
            chosen = stoch_pool(o_cat, probs, TRAIN, rng=rng).data.astype(int)
            for e in range(3):
                seen[e] |= chosen == e
        assert seen.all()

    def test_shared_probs_across_batch(self):
        rng = np.random.default_rng(11)
        o_cat = Tensor(rng.normal(size=(3, 6, 4, 2)))
        probs = one_hot_probs(3, (4, 2), hot=1)
        out = stoch_pool(o_cat, probs, EVAL)
        np.testing.assert_array_equal(out.data, o_cat.data[1])

    def test_gradient_only_into_selected(self):
        o_cat = Tensor(np.zeros((2, 2, 2)), requires_grad=True)
        probs = one_hot_probs(2, (2, 2), hot=0)
        out = stoch_pool(o_cat, probs, TRAIN, rng=np.random.default_rng(0))
        tt.sum_(out).backward()
        np.testing.assert_array_equal(o_cat.grad[0], np.ones((2, 2)))
        np.testing.assert_array_equal(o_cat.grad[1], np.zeros((2, 2)))


class TestFusion:
    def test_constructed_mean_weights(self):
        # Identity expert projection and a blockwise-mean combiner reduce
        # fusion to an average of the direct inputs and the selected expert.
        rng = np.random.default_rng(12)
        width, slots = 3, 2
        fusion = Fusion(width, slots, rng)
        fusion.expert_proj.weight.data[:] = np.eye(width)
        fusion.expert_proj.bias.data[:] = 0.0
        fusion.combine.weight.data[:] = np.vstack([np.eye(width)] * (slots + 1)) / (slots + 1)
        fusion.combine.bias.data[:] = 0.0
        d1 = Tensor(rng.normal(size=(4, width)))
        d2 = Tensor(rng.normal(size=(4, width)))
        o_cat = Tensor(rng.normal(size=(3, 4, width)))
        probs = one_hot_probs(3, (4, width), hot=1)
        out = fusion([d1, d2], o_cat, probs, EVAL)
        np.testing.assert_allclose(
            out.data, (d1.data + d2.data + o_cat.data[1]) / 3.0, atol=1e-12
        )

    def test_output_shape(self):
        rng = np.random.default_rng(13)
        fusion = Fusion(16, 2, rng)
        direct = [Tensor(rng.normal(size=(216, 16))) for _ in range(2)]
        o_cat = Tensor(rng.normal(size=(4, 216, 16)))
        probs = activation_probs(rng.normal(size=(4, 216, 16)))
        assert fusion(direct, o_cat, probs, EVAL).shape == (216, 16)

    def test_wrong_slot_count(self):
        fusion = Fusion(3, 2, np.random.default_rng(14))
        with pytest.raises(DimensionError):
            fusion([Tensor(np.zeros((4, 3)))], Tensor(np.zeros((2, 4, 3))),
                   ProbTensor(np.full((2, 4, 3), 0.5)), EVAL)

    def test_identical_experts_invariant_to_probs(self):
        rng = np.random.default_rng(15)
        fusion = Fusion(3, 1, rng)
        x = Tensor(rng.normal(size=(4, 3)))
        one = rng.normal(size=(4, 3))
        o_cat = Tensor(np.stack([one] * 3))
        out_uniform = fusion([x], o_cat, ProbTensor(np.full((3, 4, 3), 1 / 3)), EVAL)
        out_hot = fusion([x], o_cat, one_hot_probs(3, (4, 3), hot=2), EVAL)
        np.testing.assert_allclose(out_uniform.data, out_hot.data, atol=1e-12)

    def test_eval_gradcheck(self):
        rng = np.random.default_rng(16)
        fusion = Fusion(3, 2, rng)
        d1 = Tensor(rng.uniform(-1, 1, (4, 3)))
        d2 = Tensor(rng.uniform(-1, 1, (4, 3)))
        o_cat = Tensor(rng.uniform(-1, 1, (3, 4, 3)))
        probs = activation_probs(rng.normal(size=(3, 4, 3)))
        w = Tensor(rng.normal(size=(4, 3)))
        loss = lambda: tt.sum_(tt.mul(fusion([d1, d2], o_cat, probs, EVAL), w))
        max_err, _ = check_gradients(loss, fusion.named_parameters())
        assert max_err <= 1e-4
