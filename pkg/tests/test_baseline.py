import math

import numpy as np
import pytest
import torch

from vrgan.baseline import (
    BaselineConfig,
    baseline_critic_step,
    baseline_generator_step,
    gradient_penalty,
    init_baseline_state,
)
from vrgan.errors import ConfigurationError
from vrgan.evaluation import baseline_effect_fn
from vrgan.models import GeneratorSpec, RegressorSpec

GEN = GeneratorSpec(image_size=32, depth=3, base_channels=4)
CRIT = RegressorSpec(width=4, norm="layer")


class LinearCritic(torch.nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = torch.nn.Parameter(torch.as_tensor(w, dtype=torch.float64))

    def forward(self, x):
        return x.flatten(1) @ self.w.flatten()


class ConstantCritic(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.c = torch.nn.Parameter(torch.zeros(()))

    def forward(self, x):
        return self.c.expand(x.shape[0]) + 0 * self.c


def _pair(n=4, shape=(1, 3, 3), seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn((n,) + shape, generator=g, dtype=torch.float64),
            torch.randn((n,) + shape, generator=g, dtype=torch.float64))


class TestGradientPenalty:
    def test_constant_critic(self):
        real, fake = _pair()
        gp = gradient_penalty(ConstantCritic(), real, fake, np.random.default_rng(0))
        assert float(gp.detach()) == pytest.approx(1.0, abs=1e-12)

    def test_linear_critic(self):
        w = np.arange(9, dtype=np.float64).reshape(1, 3, 3) / 10
        real, fake = _pair()
        gp = gradient_penalty(LinearCritic(w), real, fake, np.random.default_rng(1))
        assert float(gp.detach()) == pytest.approx((np.linalg.norm(w) - 1) ** 2, abs=1e-12)

    @pytest.mark.parametrize("n", [1, 4, 9, 16])
    def test_sum_critic(self, n):
        real, fake = _pair(shape=(1, n))
        gp = gradient_penalty(LinearCritic(np.ones(n)), real, fake, np.random.default_rng(2))
        assert float(gp.detach()) == pytest.approx((math.sqrt(n) - 1) ** 2, abs=1e-12)

    def test_unit_norm_is_zero(self):
        real, fake = _pair(shape=(1, 2))
        w = np.array([0.6, 0.8])
        assert gradient_penalty(LinearCritic(w), real, fake, np.random.default_rng(3)).item() == pytest.approx(0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            gradient_penalty(ConstantCritic(), torch.zeros(2, 1, 3, 3), torch.zeros(3, 1, 3, 3), np.random.default_rng(0))

    def test_differentiable(self):
        real, fake = _pair(shape=(1, 2))
        critic = LinearCritic(np.array([2.0, 0.0]))
        gradient_penalty(critic, real, fake, np.random.default_rng(0)).backward()
        # d/dw (|w| - 1)^2 = 2 (|w| - 1) w / |w| = (2, 0)
        np.testing.assert_allclose(critic.w.grad.numpy(), [2.0, 0.0], atol=1e-12)


def _state(**kwargs):
    return init_baseline_state(BaselineConfig(batch_size=4, **kwargs), GEN, CRIT)


def _batches(seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((4, 32, 32)).astype(np.float32), rng.standard_normal((4, 32, 32)).astype(np.float32)


def _params(module):
    return [p.detach().clone() for p in module.parameters()]


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


class TestSteps:
    def test_zero_critic_loss_equals_gp_factor(self):
        state = _state(gp_factor=10.0)
        state.critic = ConstantCritic()
        state.opt_d = torch.optim.Adam(state.critic.parameters())
        b1, b0 = _batches()
        metrics = baseline_critic_step(state, b1, b0)
        assert metrics["wasserstein"] == 0.0
        assert metrics["critic_loss"] == pytest.approx(10.0, abs=1e-6)

    def test_critic_step_leaves_generator(self):
        state = _state()
        before_m, before_d = _params(state.mapper), _params(state.critic)
        baseline_critic_step(state, *_batches())
        assert _same(before_m, _params(state.mapper))
        assert not _same(before_d, _params(state.critic))

    def test_generator_step_leaves_critic(self):
        state = _state()
        before_m, before_d = _params(state.mapper), _params(state.critic)
        baseline_generator_step(state, _batches()[0])
        assert _same(before_d, _params(state.critic))
        assert not _same(before_m, _params(state.mapper))
        assert all(p.requires_grad for p in state.critic.parameters())

    def test_generator_raises_critic_score(self):
        torch.manual_seed(0)
        state = _state(map_lambda=0.0, learning_rate=1e-3)
        x1 = torch.as_tensor(_batches()[0])[:, None]
        with torch.no_grad():
            before = state.critic(x1 + state.mapper(x1)).mean()
        for _ in range(5):
            baseline_generator_step(state, x1)
        with torch.no_grad():
            after = state.critic(x1 + state.mapper(x1)).mean()
        assert after > before

    def test_map_lambda_shrinks_maps(self):
        state = _state(map_lambda=100.0, learning_rate=1e-3)
        state.critic = ConstantCritic()
        torch.nn.init.normal_(state.mapper.out.weight, std=0.2)
        x1 = torch.as_tensor(_batches()[0])[:, None]
        with torch.no_grad():
            before = state.mapper(x1).abs().mean()
        for _ in range(5):
            baseline_generator_step(state, x1)
        with torch.no_grad():
            assert state.mapper(x1).abs().mean() < before

    def test_no_map_lambda_no_adversary_is_static(self):
        state = _state(map_lambda=0.0)
        state.critic = ConstantCritic()
        torch.nn.init.normal_(state.mapper.out.weight, std=0.2)
        before = _params(state.mapper)
        baseline_generator_step(state, _batches()[0])
        assert _same(before, _params(state.mapper))

    def test_empty_pool(self):
        state = _state()
        with pytest.raises(ConfigurationError):
            baseline_critic_step(state, np.zeros((0, 32, 32), np.float32), _batches()[1])


class TestUnconditioned:
    def test_maps_ignore_targets(self):
        state = _state()
        torch.nn.init.normal_(state.mapper.out.weight, std=0.2)
        x = _batches()[0]
        fn = baseline_effect_fn(state.mapper)
        a = fn(x, np.full(4, 0.8), np.full(4, 0.3))
        b = fn(x, np.full(4, 0.8), np.full(4, 0.6))
        assert np.array_equal(a, b) and np.abs(a).max() > 0

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            BaselineConfig(critic_steps=0)
        with pytest.raises(ConfigurationError):
            BaselineConfig(gp_factor=-1)
