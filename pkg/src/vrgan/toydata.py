"""Synthetic squares benchmark.

Each image is a centred bright square on a dark background plus a smooth
noise field.  The square's side length is proportional to the regression
target ``y``, which follows a Weibull distribution.  Because the images are
generated, the expected effect map for any target change is known exactly:
``render_square(y_prime) - render_square(y)``.

Every sample draws its randomness from its own stream seeded by
``(seed, seed_index)``, so samples can be regenerated independently and in
any order.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError

# Noise values are snapped to this grid so that ``square + noise - noise``
# reproduces the square bit-exactly in float64.
_NOISE_QUANTUM = 2.0 ** -32
_MAX_REJECTION_DRAWS = 10 ** 6
_Y_MAX_RENDERABLE = 1.1


@dataclass(frozen=True)
class ToyConfig:
    image_size: int = 224
    weibull_shape: float = 7.0
    weibull_scale: float = 0.75
    side_scale: float = 200.0
    noise_sigma_px: float = 4.0
    noise_amplitude: float = 0.3
    class_threshold: float = 0.7
    n_train: int = 10000
    n_val_pairs: int = 5325
    n_test_pairs: int = 5424
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ConfigurationError(f"image_size must be >= 16, got {self.image_size}")
        if not (self.weibull_shape > 0 and self.weibull_scale > 0):
            raise ConfigurationError("Weibull shape and scale must be positive")
        if self.side_scale <= 0 or self.side_scale * _Y_MAX_RENDERABLE > self.image_size - 2:
            raise ConfigurationError(
                f"side_scale={self.side_scale} does not fit y up to {_Y_MAX_RENDERABLE} "
                f"inside a {self.image_size}px frame"
            )
        if not 0 < self.class_threshold < 1.5 * self.weibull_scale:
            raise ConfigurationError(f"class_threshold {self.class_threshold} out of range")
        if self.noise_sigma_px < 0 or self.noise_amplitude < 0:
            raise ConfigurationError("noise parameters must be non-negative")
        for name in ("n_train", "n_val_pairs", "n_test_pairs"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyConfig":
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in fields:
                raise ConfigurationError(f"unknown toy config key {key!r}")
            default = getattr(cls, key)
            kwargs[key] = type(default)(value)
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class ToySample:
    image: np.ndarray
    y: float
    noise: np.ndarray
    side_px: int
    seed_index: int


@dataclass
class ToyPair:
    sample: ToySample
    y_prime: float
    gt_map: np.ndarray


# ---------------------------------------------------------------------------
# primitives


def sample_weibull(u, shape: float, scale: float):
    """Inverse-CDF Weibull sampling: ``scale * (-log(1 - u)) ** (1 / shape)``.

    ``u`` may be a scalar or an array of uniform variates in ``[0, 1)``.
    """
    if not (shape > 0 and scale > 0):
        raise ValueError("shape and scale must be positive")
    u_arr = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(u_arr)) or np.any(u_arr < 0) or np.any(u_arr >= 1):
        raise ValueError("uniform variates must be finite and lie in [0, 1)")
    y = scale * (-np.log1p(-u_arr)) ** (1.0 / shape)
    return float(y) if np.ndim(u) == 0 else y


def weibull_cdf(y, shape: float, scale: float):
    y = np.asarray(y, dtype=np.float64)
    return -np.expm1(-(np.clip(y, 0, None) / scale) ** shape)


def side_length(y: float, cfg: ToyConfig) -> int:
    # half-up rounding; Python's round() is banker's rounding
    side = int(math.floor(y * cfg.side_scale + 0.5))
    return int(min(max(side, 4), cfg.image_size - 2))


def render_square(y: float, cfg: ToyConfig) -> np.ndarray:
    """Background -1 with a centred +1 square whose side is ``round(y * side_scale)``."""
    if not y > 0:
        raise ValueError(f"y must be positive, got {y}")
    n = cfg.image_size
    side = side_length(y, cfg)
    start = (n - side) // 2
    img = np.full((n, n), -1.0)
    img[start:start + side, start:start + side] = 1.0
    return img


def make_noise(cfg: ToyConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.image_size
    white = rng.standard_normal((n, n))
    if cfg.noise_amplitude == 0:
        return np.zeros((n, n))
    field = ndimage.gaussian_filter(white, cfg.noise_sigma_px, mode="reflect")
    field -= field.mean()
    field *= cfg.noise_amplitude / field.std()
    return np.round(field / _NOISE_QUANTUM) * _NOISE_QUANTUM


def gt_effect_map(y: float, y_prime: float, cfg: ToyConfig) -> np.ndarray:
    return render_square(y_prime, cfg) - render_square(y, cfg)


# ---------------------------------------------------------------------------
# dataset assembly


def _sample_rng(cfg: ToyConfig, seed_index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, seed_index])


def draw_weibull(cfg: ToyConfig, rng: np.random.Generator, *, above: Optional[bool] = None):
    """Draw a positive Weibull variate, optionally truncated at the class threshold.

    ``above=True`` keeps draws ``>= class_threshold``, ``above=False`` keeps
    draws ``< class_threshold``.  Returns ``(value, n_draws)``.
    """
    inv_shape = 1.0 / cfg.weibull_shape
    for n_draws in range(1, _MAX_REJECTION_DRAWS + 1):
        y = cfg.weibull_scale * (-math.log1p(-rng.random())) ** inv_shape
        if y <= 0:
            continue
        if above is None or (y >= cfg.class_threshold) == above:
            return y, n_draws
    raise ConfigurationError(
        f"rejection sampling exceeded {_MAX_REJECTION_DRAWS} draws; class_threshold "
        f"{cfg.class_threshold} is incompatible with Weibull({cfg.weibull_shape}, {cfg.weibull_scale})"
    )


def _make_sample(cfg: ToyConfig, y: float, noise: np.ndarray, seed_index: int) -> ToySample:
    return ToySample(
        image=render_square(y, cfg) + noise,
        y=y,
        noise=noise,
        side_px=side_length(y, cfg),
        seed_index=seed_index,
    )


def make_train_sample(cfg: ToyConfig, seed_index: int) -> ToySample:
    rng = _sample_rng(cfg, seed_index)
    y, _ = draw_weibull(cfg, rng)
    return _make_sample(cfg, y, make_noise(cfg, rng), seed_index)


def make_pair(cfg: ToyConfig, seed_index: int) -> ToyPair:
    rng = _sample_rng(cfg, seed_index)
    y, _ = draw_weibull(cfg, rng, above=True)
    y_prime, _ = draw_weibull(cfg, rng, above=False)
    sample = _make_sample(cfg, y, make_noise(cfg, rng), seed_index)
    return ToyPair(sample=sample, y_prime=y_prime, gt_map=gt_effect_map(y, y_prime, cfg))


class ToySplit(Sequence):
    """Lazily generated split; items are regenerated from their seed index on access.

    Full-size splits would need several gigabytes if materialised, so
    samples are produced on demand.  Use :meth:`arrays` for stacked tensors.
    """

    def __init__(self, cfg: ToyConfig, name: str, offset: int, length: int):
        self.cfg = cfg
        self.name = name
        self.offset = offset
        self.length = length

    @property
    def is_pairs(self) -> bool:
        return self.name != "train"

    def __len__(self):
        return self.length

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(self.length))]
        if i < 0:
            i += self.length
        if not 0 <= i < self.length:
            raise IndexError(i)
        index = self.offset + i
        return make_pair(self.cfg, index) if self.is_pairs else make_train_sample(self.cfg, index)

    def seed_indices(self) -> range:
        return range(self.offset, self.offset + self.length)

    def arrays(self, dtype=np.float32):
        """Stack the split into ``(images, y, y_prime, gt_maps)``.

        ``y_prime`` and ``gt_maps`` are ``None`` for the training split.
        """
        n = self.cfg.image_size
        images = np.empty((self.length, n, n), dtype=dtype)
        y = np.empty(self.length)
        if not self.is_pairs:
            for i, s in enumerate(self):
                images[i], y[i] = s.image, s.y
            return images, y, None, None
        y_prime = np.empty(self.length)
        gt = np.empty((self.length, n, n), dtype=dtype)
        for i, p in enumerate(self):
            images[i], y[i], y_prime[i], gt[i] = p.sample.image, p.sample.y, p.y_prime, p.gt_map
        return images, y, y_prime, gt


def gen_toy_dataset(cfg: ToyConfig) -> dict:
    """Build the train / val / test splits for ``cfg``.

    Seed indices are laid out contiguously (train, then val, then test), so
    the three splits never share a random stream.
    """
    n_tr, n_va = cfg.n_train, cfg.n_val_pairs
    return {
        "train": ToySplit(cfg, "train", 0, n_tr),
        "val": ToySplit(cfg, "val", n_tr, n_va),
        "test": ToySplit(cfg, "test", n_tr + n_va, cfg.n_test_pairs),
    }


def analytic_moments(cfg: ToyConfig) -> tuple[float, float]:
    """Mean and standard deviation of Weibull(shape, scale)."""
    k, lam = cfg.weibull_shape, cfg.weibull_scale
    g1 = math.gamma(1 + 1 / k)
    g2 = math.gamma(1 + 2 / k)
    return lam * g1, lam * math.sqrt(g2 - g1 ** 2)
