import hashlib

import numpy as np
import pytest
import torch
from scipy import stats as sstats

from vrgan.errors import ConfigurationError
from vrgan.losses import VrganLambdas
from vrgan.models import GeneratorSpec, RegressorSpec
from vrgan.toydata import ToyConfig, gen_toy_dataset, weibull_cdf
from vrgan.training import (
    EmpiricalTargets,
    TrainConfig,
    TrainData,
    WeibullTargets,
    g_step,
    init_state,
    load_train_state,
    r_step,
    sample_targets,
    save_train_state,
    train,
)

from helpers import micro_gradient_errors

TINY_TOY = ToyConfig(image_size=16, side_scale=12.0, noise_sigma_px=0.5, n_train=24,
                     n_val_pairs=6, n_test_pairs=0, seed=1)
TINY_GEN = GeneratorSpec(image_size=16, depth=2, base_channels=4)
TINY_REG = RegressorSpec(width=4)


@pytest.fixture(scope="module")
def tiny_data():
    ds = gen_toy_dataset(TINY_TOY)
    images, y, _, _ = ds["train"].arrays()
    return TrainData(images, y, WeibullTargets(), val=ds["val"].arrays())


def param_hash(module):
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def test_micro_model_gradients_match_finite_differences():
    # 2-parameter affine micro-models over 4-pixel images
    assert micro_gradient_errors(20).max() < 1e-5


# ---------------------------------------------------------------------------
# target sampling


class TestSampleTargets:
    def test_weibull_ks(self):
        draws = sample_targets(np.zeros(100_000), WeibullTargets(), np.random.default_rng(0))
        assert sstats.kstest(draws, lambda v: weibull_cdf(v, 7.0, 0.75)).statistic < 0.01

    def test_degenerate_empirical(self):
        draws = sample_targets(np.zeros(50), EmpiricalTargets((0.5,)), np.random.default_rng(0))
        assert np.all(draws == 0.5)

    def test_independent_of_y_values(self):
        a = sample_targets(np.zeros(8), WeibullTargets(), np.random.default_rng(3))
        b = sample_targets(np.linspace(0, 1, 8), WeibullTargets(), np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# steps


def _batch(data, n=8):
    return data.images[:n], data.y[:n], np.full(n, 0.6)


class TestSteps:
    def test_r_step_isolation(self, tiny_data):
        state = init_state(TrainConfig(batch_size=8), tiny_data, TINY_GEN, TINY_REG)
        g_before, r_before = param_hash(state.generator), param_hash(state.regressor)
        r_step(state, *_batch(tiny_data))
        assert param_hash(state.generator) == g_before
        assert param_hash(state.regressor) != r_before

    def test_g_step_isolation(self, tiny_data):
        state = init_state(TrainConfig(batch_size=8), tiny_data, TINY_GEN, TINY_REG)
        g_before, r_before = param_hash(state.generator), param_hash(state.regressor)
        metrics = g_step(state, *_batch(tiny_data))
        assert metrics["loss_reg"] == 0.0  # zero-initialised output layer
        assert param_hash(state.regressor) == r_before
        assert param_hash(state.generator) != g_before
        assert all(p.requires_grad for p in state.regressor.parameters())

    def test_plain_regression_ablation(self, tiny_data):
        # small step: near the optimum Adam oscillates across the kink of the L1 loss
        cfg = TrainConfig(batch_size=8, lambdas=VrganLambdas(lambda_rxp=0.0), learning_rate=5e-5)
        state = init_state(cfg, tiny_data, TINY_GEN, TINY_REG)
        losses = [r_step(state, *_batch(tiny_data))["loss_rx"] for _ in range(50)]
        assert losses[-1] < 0.5 * losses[0]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_sparsity_only_collapses_maps(self, tiny_data):
        cfg = TrainConfig(batch_size=8, lambdas=VrganLambdas(lambda_gx=0.0), learning_rate=1e-3)
        state = init_state(cfg, tiny_data, TINY_GEN, TINY_REG)
        torch.nn.init.normal_(state.generator.out.weight, std=0.3)
        regs = [g_step(state, *_batch(tiny_data))["loss_reg"] for _ in range(30)]
        assert regs[-1] < regs[0]


# ---------------------------------------------------------------------------
# schedule, determinism, resume


class TestTrain:
    def test_patience_zero_one_epoch(self, tiny_data):
        cfg = TrainConfig(batch_size=8, max_epochs=1, early_stop_patience=0)
        state, history = train(cfg, tiny_data, TINY_GEN, TINY_REG)
        assert len(history) == 1 and state.epoch == 1

    def test_early_stopping_rule(self, tiny_data):
        cfg = TrainConfig(batch_size=8, max_epochs=6, early_stop_patience=0)
        _, history = train(cfg, tiny_data, TINY_GEN, TINY_REG)
        scores = [row["val_ncc"] for row in history]
        best = -np.inf
        for i, s in enumerate(scores):
            if s <= best:
                assert i == len(scores) - 1
            best = max(best, s)

    def test_history_columns(self, tiny_data):
        _, history = train(TrainConfig(batch_size=8, max_epochs=1), tiny_data, TINY_GEN, TINY_REG)
        assert set(history[0]) == {"epoch", "loss_rx", "loss_rxp", "loss_gxp", "loss_reg", "val_ncc"}
        assert all(history[0][k] >= 0 for k in ("loss_rx", "loss_rxp", "loss_gxp", "loss_reg"))

    def test_determinism(self, tiny_data):
        cfg = TrainConfig(batch_size=8, max_epochs=2)
        s1, h1 = train(cfg, tiny_data, TINY_GEN, TINY_REG)
        s2, h2 = train(cfg, tiny_data, TINY_GEN, TINY_REG)
        assert h1 == h2
        assert param_hash(s1.generator) == param_hash(s2.generator) and param_hash(s1.regressor) == param_hash(s2.regressor)

    def test_resume_matches_uninterrupted(self, tiny_data, tmp_path):
        straight, h_straight = train(TrainConfig(batch_size=8, max_epochs=3), tiny_data, TINY_GEN, TINY_REG)
        first, _ = train(TrainConfig(batch_size=8, max_epochs=1), tiny_data, TINY_GEN, TINY_REG)
        save_train_state(tmp_path / "state.npz", first)
        cfg = TrainConfig(batch_size=8, max_epochs=3)
        resumed = load_train_state(tmp_path / "state.npz", cfg, tiny_data, TINY_GEN, TINY_REG)
        resumed, h_resumed = train(cfg, tiny_data, TINY_GEN, TINY_REG, state=resumed)
        assert h_resumed == h_straight
        assert param_hash(resumed.generator) == param_hash(straight.generator)
        assert param_hash(resumed.regressor) == param_hash(straight.regressor)

    def test_no_validation_falls_back_to_loss(self, tiny_data):
        data = TrainData(tiny_data.images, tiny_data.y, tiny_data.targets)
        state, history = train(TrainConfig(batch_size=8, max_epochs=1), data, TINY_GEN, TINY_REG)
        assert np.isnan(history[0]["val_ncc"]) and np.isfinite(state.best_val)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(learning_rate=0), dict(early_stop_patience=-1), dict(batch_size=0),
                                        dict(alternation=0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kwargs)

    def test_empty_data(self):
        with pytest.raises(ConfigurationError):
            TrainData(np.zeros((0, 16, 16)), np.zeros(0), WeibullTargets())

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            VrganLambdas(lambda_gx=-0.1)
