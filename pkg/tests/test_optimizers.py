import math

import numpy as np
import pytest

from tailsam.data import frequency_table
from tailsam.exceptions import (
    InvalidConfigError,
    NonFiniteGradientError,
    ZeroFrequencyTargetError,
    ZeroGradientError,
)
from tailsam.model import Batch, EmbeddingModel
from tailsam.optimizers import (
    ItemWeights,
    OptimizerConfig,
    OptState,
    PackedDataset,
    base_update,
    eisam_step,
    epsilon_hat,
    group_sam_step,
    make_step_fn,
    plain_step,
    rw_step,
    sam_step,
    train,
    weighted_batch_loss_and_grad,
)
from tailsam.weighting import WeightingScheme
from conftest import make_dataset
from toy_models import CountingModel, LinearModel, PerTargetQuadratic, QuadraticModel

SCHEMES = [
    WeightingScheme.normalized(),
    WeightingScheme.effective_number(0.9),
    WeightingScheme.exponential(2.0),
]


def sgd_cfg(variant, rho=0.1, lam=1.0, lr=0.1, scheme=None):
    return OptimizerConfig(
        variant=variant, rho=rho, lam=lam, lr=lr, base="sgd",
        scheme=scheme or WeightingScheme.identity(),
    )


class TestEpsilonHat:
    def test_closed_form(self):
        eps = epsilon_hat(np.array([3.0, 4.0]), 1.0)
        assert np.allclose(eps, [0.6, 0.8], atol=1e-15)

    def test_zero_radius(self):
        assert not epsilon_hat(np.array([5.0, -1.0]), 0.0).any()

    def test_degenerate_gradient(self):
        with pytest.raises(ZeroGradientError):
            epsilon_hat(np.zeros(3), 0.1)

    def test_norm_is_rho(self):
        rng = np.random.default_rng(0)
        g = rng.standard_normal(20)
        assert np.linalg.norm(epsilon_hat(g, 0.37)) == pytest.approx(0.37, rel=1e-12)


class TestWeightedBatchLoss:
    def test_frequency_scheme_cancels_to_plain_mean(self, small_model_instance):
        model, theta, dataset, table = small_model_instance
        iw = ItemWeights.from_table(table, WeightingScheme.frequency(), model.n_items)
        batch = PackedDataset(dataset).batch(np.arange(16))
        value, _ = weighted_batch_loss_and_grad(model, theta, batch, iw)
        assert value == pytest.approx(float(model.losses(theta, batch).mean()), rel=1e-14)

    def test_identity_scheme_on_balanced_two_items(self):
        model = EmbeddingModel(2, 3)
        theta = model.init_params(3)
        dataset = make_dataset([0, 1, 0, 1])
        table = frequency_table(dataset, n_items=2)
        iw = ItemWeights.from_table(table, WeightingScheme.identity(), 2)
        batch = PackedDataset(dataset).batch(np.arange(4))
        value, _ = weighted_batch_loss_and_grad(model, theta, batch, iw)
        assert value == pytest.approx(2 * float(model.losses(theta, batch).mean()), rel=1e-12)

    @pytest.mark.parametrize("scheme", SCHEMES, ids=lambda s: s.kind)
    def test_single_sample_enumeration_is_unbiased(self, scheme, small_model_instance):
        model, theta, dataset, table = small_model_instance
        packed = PackedDataset(dataset)
        iw = ItemWeights.from_table(table, scheme, model.n_items)
        per_batch = [
            weighted_batch_loss_and_grad(model, theta, packed.batch([j]), iw)[0]
            for j in range(len(packed))
        ]
        lhs = math.fsum(per_batch) / len(packed)
        losses = model.losses(theta, packed.full_batch())
        rhs = math.fsum(
            iw.f[item] * math.fsum(losses[packed.targets == item]) / (packed.targets == item).sum()
            for item in np.unique(packed.targets)
        )
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))

    def test_grouped_mode_weighs_within_batch_item_means(self, small_model_instance):
        model, theta, dataset, table = small_model_instance
        iw = ItemWeights.from_table(table, WeightingScheme.exponential(2.0), model.n_items)
        batch = PackedDataset(dataset).batch(np.arange(24))
        value, _ = weighted_batch_loss_and_grad(model, theta, batch, iw, mode="grouped")
        losses = model.losses(theta, batch)
        expected = math.fsum(
            iw.f[item] * losses[batch.targets == item].mean()
            for item in np.unique(batch.targets)
        )
        assert value == pytest.approx(expected, rel=1e-12)

    def test_zero_frequency_target_rejected(self, small_model_instance):
        model, theta, dataset, table = small_model_instance
        iw = ItemWeights.from_table(table, WeightingScheme.exponential(), model.n_items)
        zero_count = next(i for i, c in table.counts.items() if c == 0)
        batch = Batch.from_examples([((0,), zero_count)])
        with pytest.raises(ZeroFrequencyTargetError):
            weighted_batch_loss_and_grad(model, theta, batch, iw)


class TestWorkedOneD:
    """Single parameter, loss theta^2: every step value is hand-checkable."""

    def setup_method(self):
        self.model = PerTargetQuadratic([1.0])
        self.table = frequency_table(make_dataset([0]))
        self.iw = ItemWeights.from_table(self.table, WeightingScheme.identity(), 1)
        self.batch = Batch.from_examples([((0,), 0)])
        self.theta = np.array([1.0])

    def test_sam_step_lands_on_078(self):
        cfg = sgd_cfg("sam")
        theta2, _, report = sam_step(self.model, self.theta, OptState(0), self.batch, cfg)
        assert float(theta2[0]) == 0.78
        assert report.eps_norm == 0.1
        assert not report.fallback

    def test_eisam_step_reduces_to_sam_here(self):
        cfg = sgd_cfg("eisam")
        theta2, _, report = eisam_step(
            self.model, self.theta, OptState(0), self.batch, self.iw, cfg
        )
        assert float(theta2[0]) == 0.78
        assert report.g2_norm == 0.0  # plain and weighted gradients coincide

    def test_two_group_hand_unrolled_value(self):
        model = PerTargetQuadratic([1.0, 2.0])
        batch = Batch.from_examples([((0,), 0), ((1,), 1)])
        head_mask = np.array([True, False])
        cfg = sgd_cfg("group_sam")
        theta2, _, _ = group_sam_step(
            model, np.array([1.0]), OptState(0), batch, head_mask, cfg
        )
        # plain grad 3, per-group corrections 0.2 and 0.4, lr 0.1
        assert abs(float(theta2[0]) - 0.64) < 1e-12


class TestReductions:
    @pytest.mark.parametrize("variant", ["sam", "group_sam", "eisam"])
    def test_zero_radius_equals_plain_step(self, variant, small_model_instance):
        model, theta, dataset, table = small_model_instance
        packed = PackedDataset(dataset)
        rng = np.random.default_rng(31)
        cfg = OptimizerConfig(variant=variant, rho=0.0, lam=0.7,
                              scheme=WeightingScheme.exponential(2.0))
        plain_cfg = OptimizerConfig(variant="plain", rho=0.0, lam=0.7)
        step = make_step_fn(model, cfg, table)
        for _ in range(5):
            point = theta + 0.1 * rng.standard_normal(model.d)
            batch = packed.batch(rng.choice(len(packed), size=8, replace=False))
            got, _, _ = step(point, OptState.fresh(model.d, cfg), batch)
            want, _, _ = plain_step(model, point, OptState.fresh(model.d, plain_cfg),
                                    batch, plain_cfg)
            assert np.abs(got - want).max() <= 1e-12

    def test_eisam_matches_sam_under_frequency_weighting(self, small_model_instance):
        model, theta, dataset, table = small_model_instance
        packed = PackedDataset(dataset)
        cfg_e = OptimizerConfig(variant="eisam", rho=0.05, lam=1.0,
                                scheme=WeightingScheme.frequency())
        cfg_s = OptimizerConfig(variant="sam", rho=0.05, lam=1.0)
        iw = ItemWeights.from_table(table, WeightingScheme.frequency(), model.n_items)
        th_e, th_s = theta.copy(), theta.copy()
        st_e, st_s = OptState.fresh(model.d, cfg_e), OptState.fresh(model.d, cfg_s)
        rng = np.random.default_rng(5)
        for _ in range(10):
            batch = packed.batch(rng.choice(len(packed), size=8, replace=False))
            th_e, st_e, _ = eisam_step(model, th_e, st_e, batch, iw, cfg_e)
            th_s, st_s, _ = sam_step(model, th_s, st_s, batch, cfg_s)
            assert np.abs(th_e - th_s).max() <= 1e-10

    def test_single_group_batch_reduces_to_sam(self, small_model_instance):
        model, theta, dataset, table = small_model_instance
        packed = PackedDataset(dataset)
        head_item = next(iter(table.head))
        indices = np.nonzero(packed.targets == head_item)[0][:6]
        batch = packed.batch(indices)
        cfg = OptimizerConfig(variant="group_sam", rho=0.05, lam=1.0)
        got, _, _ = group_sam_step(model, theta, OptState.fresh(model.d, cfg), batch,
                                   table.head_mask(model.n_items), cfg)
        cfg_s = OptimizerConfig(variant="sam", rho=0.05, lam=1.0)
        want, _, _ = sam_step(model, theta, OptState.fresh(model.d, cfg_s), batch, cfg_s)
        assert np.abs(got - want).max() <= 1e-10


class TestAscentDirection:
    def test_perturbation_raises_the_loss_to_first_order(self, small_model_instance):
        # loss at theta + eps_hat >= loss at theta - c * rho^2 on smooth instances
        model, theta, dataset, table = small_model_instance
        packed = PackedDataset(dataset)
        rng = np.random.default_rng(55)
        rho = 1e-3
        for _ in range(10):
            batch = packed.batch(rng.choice(len(packed), size=8, replace=False))
            row = np.full(batch.size, 1.0 / batch.size)
            _, grads = model.loss_and_grads(theta, batch, [row])
            eps = epsilon_hat(grads[0], rho)
            base = float(row @ model.losses(theta, batch))
            moved = float(row @ model.losses(theta + eps, batch))
            assert moved >= base - 10 * rho**2


class TestZeroGradientFallback:
    def test_sam_falls_back_to_plain(self):
        model = QuadraticModel(np.eye(2))
        batch = Batch.from_examples([((0,), 0)])
        cfg = sgd_cfg("sam", rho=0.5)
        theta2, _, report = sam_step(model, np.zeros(2), OptState(0), batch, cfg)
        assert report.fallback and report.eps_norm == 0.0
        assert not theta2.any()

    def test_eisam_falls_back_to_plain_gradient(self):
        model = QuadraticModel(np.eye(2))
        table = frequency_table(make_dataset([0]))
        iw = ItemWeights.from_table(table, WeightingScheme.identity(), 1)
        batch = Batch.from_examples([((0,), 0)])
        cfg = sgd_cfg("eisam", rho=0.5)
        theta2, _, report = eisam_step(model, np.zeros(2), OptState(0), batch, iw, cfg)
        assert report.fallback
        assert not theta2.any()


class TestRW:
    def test_identity_scheme_equals_plain(self, small_model_instance):
        model, theta, dataset, table = small_model_instance
        packed = PackedDataset(dataset)
        batch = packed.batch(np.arange(10))
        iw = ItemWeights.from_table(table, WeightingScheme.identity(), model.n_items)
        cfg = OptimizerConfig(variant="rw", scheme=WeightingScheme.identity())
        got, _, _ = rw_step(model, theta, OptState.fresh(model.d, cfg), batch, iw, cfg)
        plain_cfg = OptimizerConfig(variant="plain")
        want, _, _ = plain_step(model, theta, OptState.fresh(model.d, plain_cfg),
                                batch, plain_cfg)
        assert np.array_equal(got, want)

    def test_zero_weight_sample_drops_out(self):
        # item 1 has frequency 1 under this table, so its exponential weight is 0
        model = EmbeddingModel(2, 3)
        theta = model.init_params(0)
        table = frequency_table(make_dataset([1, 1]), n_items=2)
        iw = ItemWeights.from_table(table, WeightingScheme.exponential(1.0), 2)
        assert iw.f.tolist() == [1.0, 0.0]
        batch = Batch.from_examples([((0,), 0), ((1,), 1)])
        cfg = sgd_cfg("rw", lr=0.1, scheme=WeightingScheme.exponential(1.0))
        got, _, _ = rw_step(model, theta, OptState(0), batch, iw, cfg)
        lone = Batch.from_examples([((0,), 0)])
        expected = theta - 0.1 * model.grad(theta, lone, np.array([1.0]))
        assert np.allclose(got, expected, atol=1e-15, rtol=0)

    def test_matches_per_sample_gradient_oracle(self, small_model_instance):
        model, theta, dataset, table = small_model_instance
        packed = PackedDataset(dataset)
        batch = packed.batch(np.arange(6))
        iw = ItemWeights.from_table(table, WeightingScheme.exponential(2.0), model.n_items)
        cfg = sgd_cfg("rw", lr=0.2, scheme=WeightingScheme.exponential(2.0))
        got, _, _ = rw_step(model, theta, OptState(0), batch, iw, cfg)
        f_k = iw.f[batch.targets]
        row = f_k / f_k.sum()
        oracle = sum(
            row[k] * model.grad(theta, packed.batch([k]), np.array([1.0]))
            for k in range(6)
        )
        assert np.allclose(got, theta - 0.2 * oracle, atol=1e-10, rtol=0)


class TestBaseUpdate:
    def test_sgd_zero_gradient_keeps_params(self):
        cfg = sgd_cfg("plain")
        theta = np.array([1.0, -2.0])
        theta2, state2 = base_update(OptState(0), theta, np.zeros(2), cfg)
        assert np.array_equal(theta2, theta)
        assert state2.step_count == 1

    def test_adam_first_step_magnitude(self):
        cfg = OptimizerConfig(variant="plain", base="adam", lr=5e-4)
        g = np.array([3.7])
        theta2, _ = base_update(OptState.fresh(1, cfg), np.zeros(1), g, cfg)
        expected = 5e-4 * 3.7 / (3.7 + 1e-8)
        assert abs(theta2[0]) == pytest.approx(expected, rel=1e-12)
        assert abs(theta2[0]) == pytest.approx(5e-4, rel=1e-6)

    def test_sgd_steps_compose_linearly(self):
        cfg = sgd_cfg("plain", lr=0.05)
        g = np.array([0.3, -1.1])
        one, state = base_update(OptState(0), np.ones(2), g, cfg)
        two, _ = base_update(state, one, g, cfg)
        direct, _ = base_update(OptState(0), np.ones(2), 2 * g, cfg)
        assert np.allclose(two, direct, rtol=1e-15, atol=0)

    def test_nonfinite_gradient_aborts_with_step_index(self):
        cfg = sgd_cfg("plain")
        with pytest.raises(NonFiniteGradientError) as err:
            base_update(OptState(17), np.zeros(1), np.array([np.nan]), cfg)
        assert err.value.step_index == 17


class TestScaleInvariance:
    def test_direction_unchanged_and_gradient_scaled(self, small_model_instance):
        model, theta, dataset, table = small_model_instance
        packed = PackedDataset(dataset)
        batch = packed.batch(np.arange(12))
        raw = WeightingScheme.exponential(2.0)
        scaled = WeightingScheme.exponential(2.0, normalize="mean-one")
        iw_raw = ItemWeights.from_table(table, raw, model.n_items)
        iw_scaled = ItemWeights.from_table(table, scaled, model.n_items)
        c = iw_scaled.f[iw_raw.f > 0][0] / iw_raw.f[iw_raw.f > 0][0]
        _, g_raw = weighted_batch_loss_and_grad(model, theta, batch, iw_raw)
        _, g_scaled = weighted_batch_loss_and_grad(model, theta, batch, iw_scaled)
        assert np.allclose(g_scaled, c * g_raw, rtol=1e-12, atol=1e-15)
        eps_raw = epsilon_hat(g_raw, 0.1)
        eps_scaled = epsilon_hat(g_scaled, 0.1)
        assert np.abs(eps_raw - eps_scaled).max() <= 1e-12


class TestCostContract:
    def _run(self, variant, table, model):
        counter = CountingModel(model)
        cfg = OptimizerConfig(variant=variant, rho=0.1, lam=0.5,
                              scheme=WeightingScheme.exponential(2.0))
        step = make_step_fn(counter, cfg, table, n_items=model.n_items)
        batch = Batch.from_examples([((0,), 0), ((1,), 1), ((0,), 0)])
        step(np.array([1.0]), OptState.fresh(1, cfg), batch)
        return counter.forwards, counter.backprops

    def test_eisam_costs_at_most_one_extra_evaluation_each_way(self):
        model = PerTargetQuadratic([1.0, 2.0])
        table = frequency_table(make_dataset([0, 1, 0]))
        sam_fwd, sam_bwd = self._run("sam", table, model)
        eis_fwd, eis_bwd = self._run("eisam", table, model)
        assert (sam_fwd, sam_bwd) == (2, 2)
        assert eis_fwd - sam_fwd <= 1
        assert eis_bwd - sam_bwd == 1

    def test_group_sam_costs_one_evaluation_per_group_plus_base(self):
        model = PerTargetQuadratic([1.0, 2.0])
        table = frequency_table(make_dataset([0, 1, 0]))
        fwd, bwd = self._run("group_sam", table, model)
        assert fwd == 1 + 2  # base pass plus one perturbed pass per group
        assert bwd == 4


class TestTrain:
    def test_zero_epochs_returns_initial_params(self, small_model_instance):
        model, theta, dataset, table = small_model_instance
        cfg = OptimizerConfig(variant="plain")
        out, reports = train(model, theta, dataset, table, cfg, epochs=0, seed=0)
        assert np.array_equal(out, theta)
        assert reports == []

    def test_bitwise_deterministic(self, small_model_instance):
        model, theta, dataset, table = small_model_instance
        cfg = OptimizerConfig(variant="eisam", scheme=WeightingScheme.exponential(2.0),
                              batch_size=16)
        a, _ = train(model, theta, dataset, table, cfg, epochs=2, seed=9)
        b, _ = train(model, theta, dataset, table, cfg, epochs=2, seed=9)
        assert np.array_equal(a, b)

    def test_loss_decreases_on_separable_data(self):
        examples = tuple(((i,), i) for i in range(5)) * 40
        dataset = make_dataset([t for _, t in examples],
                               prefix_pool=[p for p, _ in examples])
        table = frequency_table(dataset, n_items=5)
        model = EmbeddingModel(5, 4)
        cfg = OptimizerConfig(variant="plain", base="sgd", lr=0.5, batch_size=16)
        _, reports = train(model, model.init_params(0), dataset, table, cfg,
                           epochs=3, seed=0)
        assert reports[-1].mean_loss < reports[0].mean_loss

    def test_partial_last_batch_is_kept(self, small_model_instance):
        model, theta, dataset, table = small_model_instance
        cfg = OptimizerConfig(variant="plain", batch_size=64)
        _, reports = train(model, theta, dataset, table, cfg, epochs=1, seed=0)
        assert reports[0].n_steps == math.ceil(len(dataset) / 64)

    def test_nonfinite_gradient_aborts(self):
        model = LinearModel([np.nan])
        dataset = make_dataset([0] * 12)
        cfg = sgd_cfg("plain")
        with pytest.raises(NonFiniteGradientError):
            train(model, np.zeros(1), dataset, None, cfg, epochs=1, seed=0)

    def test_variant_requires_table(self):
        model = PerTargetQuadratic([1.0])
        cfg = OptimizerConfig(variant="eisam")
        with pytest.raises(InvalidConfigError):
            make_step_fn(model, cfg, None)

    def test_invalid_config_values(self):
        with pytest.raises(InvalidConfigError):
            OptimizerConfig(variant="sam", rho=-1.0)
        with pytest.raises(InvalidConfigError):
            OptimizerConfig(variant="nope")
        with pytest.raises(InvalidConfigError):
            OptimizerConfig(base="rmsprop")
