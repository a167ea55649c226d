"""Classification baseline: an unconditioned map generator trained against a WGAN-GP critic.

The map generator turns class-1 images (``y >= threshold``) into
``x + m(x)``; the critic ``c`` tries to tell those apart from real class-0
images.  The generator minimises ``-c(x + m(x)) + map_lambda * |m(x)|`` and
the critic minimises ``c(fake) - c(real) + gp_factor * GP``.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from .errors import ConfigurationError, NumericalError
from .evaluation import baseline_effect_fn, evaluate_pairs
from .models import GeneratorSpec, RegressorSpec, UNetGenerator, build_regressor, critic_spec, spec_dict
from .training import deterministic_mode, frozen

logger = logging.getLogger(__name__)

BASELINE_HISTORY_COLUMNS = ("epoch", "critic_loss", "wasserstein", "gradient_penalty", "gen_adv", "map_l1", "val_ncc")


@dataclass(frozen=True)
class BaselineConfig:
    map_lambda: float = 100.0
    gp_factor: float = 10.0
    critic_steps: int = 5
    threshold: float = 0.7
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.map_lambda < 0 or self.gp_factor < 0:
            raise ConfigurationError("map_lambda and gp_factor must be non-negative")
        if self.critic_steps < 1:
            raise ConfigurationError("critic_steps must be >= 1")
        if self.early_stop_patience < 0 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("invalid schedule settings")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def baseline_specs(gen_spec: GeneratorSpec, crit_spec: RegressorSpec) -> dict:
    return {"method": "vagan", "generator": spec_dict(gen_spec), "critic": spec_dict(crit_spec)}


def unconditioned(gen_spec: GeneratorSpec) -> GeneratorSpec:
    return dataclasses.replace(gen_spec, cond_channels=0)


def gradient_penalty(critic, x_real, x_fake, rng: np.random.Generator):
    """Mean of ``(||grad critic(x_hat)||_2 - 1) ** 2`` at random interpolates ``x_hat``."""
    if x_real.shape != x_fake.shape:
        raise ValueError(f"shape mismatch: {tuple(x_real.shape)} vs {tuple(x_fake.shape)}")
    eps_shape = (x_real.shape[0],) + (1,) * (x_real.dim() - 1)
    eps = torch.as_tensor(rng.random(x_real.shape[0]), dtype=x_real.dtype).reshape(eps_shape)
    x_hat = (eps * x_real.detach() + (1 - eps) * x_fake.detach()).requires_grad_(True)
    out = critic(x_hat)
    (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x_hat)
    norms = grad.flatten(1).norm(2, dim=1)
    if not torch.all(torch.isfinite(norms)):
        raise NumericalError("non-finite critic gradient in gradient penalty")
    return ((norms - 1) ** 2).mean()


@dataclass
class BaselineState:
    mapper: torch.nn.Module
    critic: torch.nn.Module
    opt_m: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    config: BaselineConfig
    specs: dict
    order_rng: np.random.Generator
    gp_rng: np.random.Generator
    epoch: int = 0
    best_val: float = -math.inf
    epochs_since_best: int = 0
    best_weights: Optional[dict] = None
    history: list = field(default_factory=list)


def _t(x):
    x = torch.as_tensor(x, dtype=torch.float32)
    return x[:, None] if x.dim() == 3 else x


def baseline_critic_step(state: BaselineState, batch_class1, batch_class0) -> dict:
    """One critic update; the map generator is only evaluated."""
    x1, x0 = _t(batch_class1), _t(batch_class0)
    if len(x1) == 0 or len(x0) == 0:
        raise ConfigurationError("empty class pool")
    n = min(len(x1), len(x0))
    x1, x0 = x1[:n], x0[:n]
    with torch.no_grad():
        fake = x1 + state.mapper(x1)
    state.opt_d.zero_grad(set_to_none=True)
    d_real = state.critic(x0).mean()
    d_fake = state.critic(fake).mean()
    gp = gradient_penalty(state.critic, x0, fake, state.gp_rng)
    wasserstein = d_real - d_fake
    loss = -wasserstein + state.config.gp_factor * gp
    if not torch.isfinite(loss):
        raise NumericalError("non-finite critic loss", {"epoch": state.epoch, "wasserstein": wasserstein.item()})
    loss.backward()
    state.opt_d.step()
    return {"critic_loss": loss.item(), "wasserstein": wasserstein.item(), "gradient_penalty": gp.item()}


def baseline_generator_step(state: BaselineState, batch_class1) -> dict:
    """One map-generator update against the fixed critic."""
    x1 = _t(batch_class1)
    state.opt_m.zero_grad(set_to_none=True)
    with frozen(state.critic):
        dx = state.mapper(x1)
        adv = -state.critic(x1 + dx).mean()
        l1 = dx.abs().mean()
        loss = adv + state.config.map_lambda * l1
        if not torch.isfinite(loss):
            raise NumericalError("non-finite generator loss", {"epoch": state.epoch, "map_l1": l1.item()})
        loss.backward()
    state.opt_m.step()
    return {"gen_adv": adv.item(), "map_l1": l1.item()}


def init_baseline_state(config: BaselineConfig, gen_spec: GeneratorSpec,
                        crit: Optional[RegressorSpec] = None) -> BaselineState:
    torch.manual_seed(config.seed)
    gen_spec = unconditioned(gen_spec)
    crit = crit or critic_spec()
    mapper = UNetGenerator(gen_spec)
    critic = build_regressor(crit)
    betas = (config.adam_beta1, config.adam_beta2)
    return BaselineState(
        mapper=mapper, critic=critic,
        opt_m=torch.optim.Adam(mapper.parameters(), lr=config.learning_rate, betas=betas),
        opt_d=torch.optim.Adam(critic.parameters(), lr=config.learning_rate, betas=betas),
        config=config,
        specs=baseline_specs(gen_spec, crit),
        order_rng=np.random.default_rng([config.seed, 1]),
        gp_rng=np.random.default_rng([config.seed, 3]),
    )


def _run_epoch(state: BaselineState, pool1: np.ndarray, pool0: np.ndarray) -> dict:
    """One pass of the critic over the class-1 pool.

    Every ``critic_steps`` critic batches are followed by one generator
    update on the most recent class-1 batch.
    """
    cfg = state.config
    bs = cfg.batch_size
    order1 = state.order_rng.permutation(len(pool1))
    order0 = state.order_rng.permutation(len(pool0))
    cursor0 = 0
    sums: dict = {}
    counts: dict = {}
    for b, start in enumerate(range(0, len(pool1), bs)):
        idx1 = order1[start:start + bs]
        if cursor0 + len(idx1) > len(order0):
            order0 = state.order_rng.permutation(len(pool0))
            cursor0 = 0
        idx0 = order0[cursor0:cursor0 + len(idx1)]
        cursor0 += len(idx1)
        metrics = baseline_critic_step(state, pool1[idx1], pool0[idx0])
        if (b + 1) % cfg.critic_steps == 0:
            metrics.update(baseline_generator_step(state, pool1[idx1]))
        for k, v in metrics.items():
            sums[k] = sums.get(k, 0.0) + v
            counts[k] = counts.get(k, 0) + 1
    return {c: sums[c] / counts[c] if counts.get(c) else math.nan for c in BASELINE_HISTORY_COLUMNS[1:6]}


def train_baseline(config: BaselineConfig, images: np.ndarray, y: np.ndarray, gen_spec: GeneratorSpec,
                   crit: Optional[RegressorSpec] = None, val=None,
                   on_epoch: Optional[Callable[[BaselineState, dict], None]] = None):
    """Train the baseline on a training set partitioned at ``config.threshold``.

    ``val`` is an optional ``(images, y, y_prime, gt_maps)`` tuple; the stored
    ``y'`` is ignored by the unconditioned generator.  Returns
    ``(state, history)``.
    """
    images = np.asarray(images)
    y = np.asarray(y)
    pool1 = images[y >= config.threshold]
    pool0 = images[y < config.threshold]
    if len(pool1) == 0 or len(pool0) == 0:
        raise ConfigurationError(
            f"class pools at threshold {config.threshold}: {len(pool1)} positive, {len(pool0)} negative"
        )
    with deterministic_mode(config.deterministic):
        state = init_baseline_state(config, gen_spec, crit)
        while state.epoch < config.max_epochs:
            losses = _run_epoch(state, pool1, pool0)
            state.epoch += 1
            val_ncc = math.nan
            metric = -losses["map_l1"] if not math.isnan(losses["map_l1"]) else -math.inf
            if val is not None:
                state.mapper.eval()
                val_ncc = float(np.mean(evaluate_pairs(baseline_effect_fn(state.mapper), val)))
                state.mapper.train()
                metric = val_ncc
            row = {"epoch": state.epoch, **losses, "val_ncc": val_ncc}
            state.history.append(row)
            logger.info("baseline epoch %d %s", state.epoch, row)
            if metric > state.best_val:
                state.best_val = metric
                state.epochs_since_best = 0
                state.best_weights = {"mapper": copy.deepcopy(state.mapper.state_dict()),
                                      "critic": copy.deepcopy(state.critic.state_dict())}
            else:
                state.epochs_since_best += 1
            if on_epoch is not None:
                on_epoch(state, row)
            if state.epochs_since_best > config.early_stop_patience:
                break
    return state, state.history


def restore_best_baseline(state: BaselineState) -> BaselineState:
    if state.best_weights is not None:
        state.mapper.load_state_dict(state.best_weights["mapper"])
        state.critic.load_state_dict(state.best_weights["critic"])
    return state


def save_baseline_checkpoint(path, state: BaselineState, weights: Optional[dict] = None):
    mapper = copy.deepcopy(state.mapper)
    critic = copy.deepcopy(state.critic)
    if weights is not None:
        mapper.load_state_dict(weights["mapper"])
        critic.load_state_dict(weights["critic"])
    # stored under "generator" so every checkpoint exposes its map generator the same way
    arrays = {**ckpt.module_arrays("generator", mapper), **ckpt.module_arrays("critic", critic)}
    header = {"specs": state.specs, "spec_hash": ckpt.spec_hash(state.specs), "epoch": state.epoch}
    ckpt.save_archive(path, arrays, header)
