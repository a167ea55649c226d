"""Alternating generator / regressor training with early stopping.

One iteration takes a mini-batch ``(x, y)``, draws ``y'`` from the
training target distribution and then

1. updates the regressor ``f`` on ``lambda_rx * |f(x) - y| + lambda_rxp * |f(x') - y|``,
   with ``x'`` produced by the current generator outside the autograd graph;
2. updates the generator on ``lambda_gx * |f(x') - y'| + lambda_reg * |dx|``,
   back-propagating through ``f`` without changing it.
"""

from __future__ import annotations

import contextlib
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
from .evaluation import evaluate_pairs, vrgan_effect_fn
from .losses import VrganLambdas, generator_objective, regressor_objective
from .models import (
    ConditioningStats,
    GeneratorSpec,
    RegressorSpec,
    UNetGenerator,
    build_regressor,
    spec_dict,
    trainable_parameters,
)

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "loss_rx", "loss_rxp", "loss_gxp", "loss_reg", "val_ncc")


@dataclass(frozen=True)
class TrainConfig:
    lambdas: VrganLambdas = field(default_factory=VrganLambdas)
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    alternation: int = 1
    deterministic: bool = True
    # random horizontal/vertical flips of training images; only for data
    # whose targets are flip-invariant, such as the toy squares
    flip_augment: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        # patience 0 is accepted: stop after the first epoch without improvement
        if self.early_stop_patience < 0:
            raise ConfigurationError("early_stop_patience must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.alternation < 1:
            raise ConfigurationError("batch_size, max_epochs and alternation must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# target distributions


@dataclass(frozen=True)
class WeibullTargets:
    shape: float = 7.0
    scale: float = 0.75

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.random(n)
        return self.scale * (-np.log1p(-u)) ** (1.0 / self.shape)


@dataclass(frozen=True)
class EmpiricalTargets:
    values: tuple

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.choice(np.asarray(self.values, dtype=np.float64), size=n, replace=True)


def sample_targets(y_batch, distribution, rng: np.random.Generator) -> np.ndarray:
    """Draw one ``y'`` per batch element, independently of the ``y`` values."""
    return distribution.sample(rng, len(y_batch))


# ---------------------------------------------------------------------------
# data / state


@dataclass
class TrainData:
    """In-memory training data.

    ``images`` is ``(N, H, W)``; ``val`` is an optional tuple
    ``(images, y, y_prime, gt_maps)`` used for early stopping.
    """

    images: np.ndarray
    y: np.ndarray
    targets: object
    val: Optional[tuple] = None

    def __post_init__(self):
        if len(self.images) == 0:
            raise ConfigurationError("training set is empty")
        if len(self.images) != len(self.y):
            raise ConfigurationError("images and targets differ in length")


@dataclass
class TrainState:
    generator: torch.nn.Module
    regressor: torch.nn.Module
    opt_g: torch.optim.Optimizer
    opt_r: torch.optim.Optimizer
    stats: ConditioningStats
    config: TrainConfig
    specs: dict
    order_rng: np.random.Generator
    target_rng: np.random.Generator
    augment_rng: np.random.Generator
    epoch: int = 0
    best_val: float = -math.inf
    epochs_since_best: int = 0
    best_weights: Optional[dict] = None
    history: list = field(default_factory=list)

    @property
    def spec_hash(self) -> str:
        return ckpt.spec_hash(self.specs)


@contextlib.contextmanager
def frozen(module: torch.nn.Module):
    """Temporarily exclude a module's parameters from autograd."""
    flags = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in flags:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in flags:
            p.requires_grad_(flag)


@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def _adam(params, config: TrainConfig):
    return torch.optim.Adam(params, lr=config.learning_rate, betas=(config.adam_beta1, config.adam_beta2))


def vrgan_specs(gen_spec: GeneratorSpec, reg_spec: RegressorSpec) -> dict:
    return {"method": "vrgan", "generator": spec_dict(gen_spec), "regressor": spec_dict(reg_spec)}


def init_state(config: TrainConfig, data: TrainData, gen_spec: GeneratorSpec, reg_spec: RegressorSpec,
               pretrained_weights=None, stats: Optional[ConditioningStats] = None) -> TrainState:
    torch.manual_seed(config.seed)
    generator = UNetGenerator(gen_spec)
    calib = None
    if pretrained_weights is None:
        imgs = torch.as_tensor(data.images[:256], dtype=torch.float32)[:, None]
        calib = list(torch.split(imgs, 64))
    regressor = build_regressor(reg_spec, pretrained_weights, calibration_batches=calib)
    return TrainState(
        generator=generator, regressor=regressor,
        opt_g=_adam(trainable_parameters(generator), config),
        opt_r=_adam(trainable_parameters(regressor), config),
        stats=stats or ConditioningStats.from_values(data.y),
        config=config,
        specs=vrgan_specs(gen_spec, reg_spec),
        order_rng=np.random.default_rng([config.seed, 1]),
        target_rng=np.random.default_rng([config.seed, 2]),
        augment_rng=np.random.default_rng([config.seed, 4]),
    )


def _as_batch(x, y, y_prime):
    xt = torch.as_tensor(x, dtype=torch.float32)
    if xt.dim() == 3:
        xt = xt[:, None]
    return xt, torch.as_tensor(y, dtype=torch.float32), torch.as_tensor(y_prime, dtype=torch.float32)


def _check_finite(total, terms, state, step_name):
    if not torch.isfinite(total):
        snapshot = {k: float(v) for k, v in terms.items()}
        snapshot.update(epoch=state.epoch, step=step_name)
        raise NumericalError(f"non-finite loss in {step_name}", snapshot)


def r_step(state: TrainState, x, y, y_prime) -> dict:
    """One optimizer update of the regressor; the generator is only evaluated."""
    x, y, y_prime = _as_batch(x, y, y_prime)
    state.opt_r.zero_grad(set_to_none=True)
    total, terms = regressor_objective(state.generator, state.regressor, x, y, y_prime, state.stats, state.config.lambdas)
    _check_finite(total, terms, state, "r_step")
    total.backward()
    state.opt_r.step()
    return {k: float(v) for k, v in terms.items()}


def g_step(state: TrainState, x, y, y_prime) -> dict:
    """One optimizer update of the generator; the regressor is a fixed differentiable function here."""
    x, y, y_prime = _as_batch(x, y, y_prime)
    state.opt_g.zero_grad(set_to_none=True)
    with frozen(state.regressor):
        total, terms = generator_objective(state.generator, state.regressor, x, y, y_prime, state.stats, state.config.lambdas)
        _check_finite(total, terms, state, "g_step")
        total.backward()
    state.opt_g.step()
    return {k: float(v) for k, v in terms.items()}


def validation_ncc(generator, stats, val) -> float:
    generator.eval()
    scores = evaluate_pairs(vrgan_effect_fn(generator, stats), val)
    generator.train()
    return float(np.mean(scores))


def random_flips(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Flip each ``(H, W)`` image left-right and/or up-down with probability 1/2."""
    flips = rng.random((len(images), 2)) < 0.5
    out = np.array(images, copy=True)
    for i, (lr, ud) in enumerate(flips):
        if lr:
            out[i] = out[i, :, ::-1]
        if ud:
            out[i] = out[i, ::-1, :]
    return out


def run_epoch(state: TrainState, data: TrainData) -> dict:
    cfg = state.config
    n = len(data.images)
    order = state.order_rng.permutation(n)
    sums = {c: 0.0 for c in HISTORY_COLUMNS[1:5]}
    counts = {c: 0 for c in sums}
    for b, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        x, y = data.images[idx], data.y[idx]
        if cfg.flip_augment:
            x = random_flips(x, state.augment_rng)
        y_prime = sample_targets(y, data.targets, state.target_rng)
        metrics = r_step(state, x, y, y_prime)
        if (b + 1) % cfg.alternation == 0:
            metrics.update(g_step(state, x, y, y_prime))
        for k, v in metrics.items():
            sums[k] += v
            counts[k] += 1
    return {k: sums[k] / counts[k] if counts[k] else math.nan for k in sums}


def _snapshot_weights(state: TrainState) -> dict:
    return {"generator": copy.deepcopy(state.generator.state_dict()), "regressor": copy.deepcopy(state.regressor.state_dict())}


def train(config: TrainConfig, data: TrainData, gen_spec: GeneratorSpec, reg_spec: RegressorSpec, *,
          pretrained_weights=None, state: Optional[TrainState] = None,
          on_epoch: Optional[Callable[[TrainState, dict], None]] = None):
    """Train until ``max_epochs`` or until the validation NCC stalls for ``patience`` epochs.

    Pass ``state`` to resume.  Returns ``(state, history)``; the best
    weights are kept in ``state.best_weights`` (see :func:`restore_best`).
    Without validation pairs the negated composite training loss stands in
    for the validation metric.
    """
    with deterministic_mode(config.deterministic):
        if state is None:
            state = init_state(config, data, gen_spec, reg_spec, pretrained_weights)
        while state.epoch < config.max_epochs:
            losses = run_epoch(state, data)
            state.epoch += 1
            if data.val is not None:
                val_ncc = validation_ncc(state.generator, state.stats, data.val)
                metric = val_ncc
            else:
                val_ncc = math.nan
                lam = config.lambdas
                metric = -(lam.lambda_rx * losses["loss_rx"] + lam.lambda_rxp * losses["loss_rxp"]
                           + lam.lambda_gx * losses["loss_gxp"] + lam.lambda_reg * losses["loss_reg"])
            row = {"epoch": state.epoch, **losses, "val_ncc": val_ncc}
            state.history.append(row)
            logger.info("epoch %d %s", state.epoch, row)
            if metric > state.best_val:
                state.best_val = metric
                state.epochs_since_best = 0
                state.best_weights = _snapshot_weights(state)
            else:
                state.epochs_since_best += 1
            if on_epoch is not None:
                on_epoch(state, row)
            if state.epochs_since_best > config.early_stop_patience:
                break
    return state, state.history


def restore_best(state: TrainState) -> TrainState:
    if state.best_weights is not None:
        state.generator.load_state_dict(state.best_weights["generator"])
        state.regressor.load_state_dict(state.best_weights["regressor"])
    return state


# ---------------------------------------------------------------------------
# persistence


def model_header(state_specs: dict, stats: Optional[ConditioningStats], extra=None) -> dict:
    header = {"specs": state_specs, "spec_hash": ckpt.spec_hash(state_specs)}
    if stats is not None:
        header["stats"] = dataclasses.asdict(stats)
    header.update(extra or {})
    return header


def save_model_checkpoint(path, state: TrainState, weights: Optional[dict] = None):
    """Write the generator/regressor weights (current, or ``weights`` if given)."""
    generator = copy.deepcopy(state.generator)
    regressor = copy.deepcopy(state.regressor)
    if weights is not None:
        generator.load_state_dict(weights["generator"])
        regressor.load_state_dict(weights["regressor"])
    arrays = {**ckpt.module_arrays("generator", generator), **ckpt.module_arrays("regressor", regressor)}
    ckpt.save_archive(path, arrays, model_header(state.specs, state.stats, {"epoch": state.epoch}))


def load_generator(path, expected_specs: Optional[dict] = None):
    """Load the map generator from any model checkpoint.

    Returns ``(generator, stats, header)``; ``stats`` is ``None`` for baseline
    checkpoints.
    """
    from .models import spec_from_dict

    arrays, header = ckpt.load_archive(path)
    if expected_specs is not None:
        ckpt.check_header(header, ckpt.spec_hash(expected_specs))
    elif header.get("spec_hash") != ckpt.spec_hash(header["specs"]):
        raise ckpt.CheckpointMismatchError("checkpoint header is inconsistent with its own specs")
    generator = UNetGenerator(spec_from_dict(header["specs"]["generator"]))
    ckpt.load_module_arrays("generator", generator, arrays)
    generator.eval()
    stats = ConditioningStats(**header["stats"]) if "stats" in header else None
    return generator, stats, header


def save_train_state(path, state: TrainState):
    """Full resumable state: weights, Adam moments, RNG streams, history, best weights."""
    arrays = {**ckpt.module_arrays("generator", state.generator), **ckpt.module_arrays("regressor", state.regressor)}
    g_arrays, g_groups = ckpt.optimizer_arrays("opt_g", state.opt_g)
    r_arrays, r_groups = ckpt.optimizer_arrays("opt_r", state.opt_r)
    arrays.update(g_arrays)
    arrays.update(r_arrays)
    if state.best_weights is not None:
        for name, sd in state.best_weights.items():
            arrays.update({f"best.{name}.{k}": v.cpu().numpy() for k, v in sd.items()})
    header = model_header(state.specs, state.stats, {
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "best_val": state.best_val,
        "epochs_since_best": state.epochs_since_best,
        "history": state.history,
        "opt_g_groups": g_groups,
        "opt_r_groups": r_groups,
        "order_rng": state.order_rng.bit_generator.state,
        "target_rng": state.target_rng.bit_generator.state,
        "augment_rng": state.augment_rng.bit_generator.state,
        "has_best": state.best_weights is not None,
    })
    ckpt.save_archive(path, arrays, header)


def load_train_state(path, config: TrainConfig, data: TrainData, gen_spec: GeneratorSpec,
                     reg_spec: RegressorSpec) -> TrainState:
    arrays, header = ckpt.load_archive(path)
    ckpt.check_header(header, ckpt.spec_hash(vrgan_specs(gen_spec, reg_spec)))
    state = init_state(config, data, gen_spec, reg_spec, stats=ConditioningStats(**header["stats"]))
    ckpt.load_module_arrays("generator", state.generator, arrays)
    ckpt.load_module_arrays("regressor", state.regressor, arrays)
    ckpt.load_optimizer_arrays("opt_g", state.opt_g, arrays, header["opt_g_groups"])
    ckpt.load_optimizer_arrays("opt_r", state.opt_r, arrays, header["opt_r_groups"])
    state.order_rng.bit_generator.state = header["order_rng"]
    state.target_rng.bit_generator.state = header["target_rng"]
    state.augment_rng.bit_generator.state = header["augment_rng"]
    state.epoch = header["epoch"]
    state.best_val = header["best_val"]
    state.epochs_since_best = header["epochs_since_best"]
    state.history = [dict(r) for r in header["history"]]
    if header["has_best"]:
        state.best_weights = {
            name: {k[len(f"best.{name}."):]: torch.from_numpy(np.array(v))
                   for k, v in arrays.items() if k.startswith(f"best.{name}.")}
            for name in ("generator", "regressor")
        }
    return state
