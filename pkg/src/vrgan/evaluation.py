"""NCC scoring of effect maps, multi-seed aggregation and y' sweep panels."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .models import ConditioningStats, normalize_condition

logger = logging.getLogger(__name__)

MAP_DISPLAY_RANGE = (-2.0, 2.0)
IMAGE_DISPLAY_RANGE = (-1.0, 1.0)


def ncc(a, b) -> float:
    """Zero-mean normalized cross-correlation (Pearson r over pixels).

    Returns 0 when either raster is constant.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    # relative guard: rounding leaves ~1e-16 residue on constant rasters
    if na <= 1e-12 * max(1.0, a.size ** 0.5) or nb <= 1e-12 * max(1.0, b.size ** 0.5):
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def batch_ncc(maps, gts) -> np.ndarray:
    return np.array([ncc(m, g) for m, g in zip(maps, gts)])


# ---------------------------------------------------------------------------
# effect-map producers


EffectFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def vrgan_effect_fn(generator, stats: ConditioningStats, device="cpu") -> EffectFn:
    def fn(x, y, y_prime):
        cond = normalize_condition(y, y_prime, stats)
        with torch.no_grad():
            xt = torch.as_tensor(x, dtype=torch.float32, device=device)[:, None]
            ct = torch.as_tensor(cond, dtype=torch.float32, device=device)
            return generator(xt, ct)[:, 0].cpu().numpy()
    return fn


def baseline_effect_fn(mapper, device="cpu") -> EffectFn:
    """Effect maps from an unconditioned map generator; ``y`` and ``y'`` are ignored."""
    def fn(x, y, y_prime):
        with torch.no_grad():
            xt = torch.as_tensor(x, dtype=torch.float32, device=device)[:, None]
            return mapper(xt)[:, 0].cpu().numpy()
    return fn


def _pair_arrays(pairs):
    if isinstance(pairs, tuple):
        return pairs
    images = np.stack([p.sample.image for p in pairs])
    y = np.array([p.sample.y for p in pairs])
    y_prime = np.array([p.y_prime for p in pairs])
    gt = np.stack([p.gt_map for p in pairs])
    return images, y, y_prime, gt


def evaluate_pairs(effect_fn: EffectFn, pairs, batch_size: int = 64) -> np.ndarray:
    """Per-pair NCC between produced and ground-truth effect maps.

    ``pairs`` is a sequence of ToyPair-like objects or a tuple of stacked
    arrays ``(images, y, y_prime, gt_maps)``.  ``effect_fn`` maps a batch of
    images with their ``y`` and ``y'`` to effect maps.
    """
    images, y, y_prime, gt = _pair_arrays(pairs)
    scores = np.empty(len(images))
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        maps = np.asarray(effect_fn(images[sl], y[sl], y_prime[sl]))
        scores[sl] = batch_ncc(maps, gt[sl])
    return scores


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    method: str
    config_hash: str
    seeds: list = field(default_factory=list)
    seed_means: list = field(default_factory=list)
    per_sample_ncc: list = field(default_factory=list)
    failed_seeds: list = field(default_factory=list)
    warning: Optional[str] = None

    def __post_init__(self):
        for scores in self.per_sample_ncc:
            if any(not -1.0 <= s <= 1.0 for s in scores):
                raise ValueError("NCC values must lie in [-1, 1]")

    @property
    def n_seeds(self) -> int:
        return len(self.seeds)

    @property
    def mean_ncc(self) -> float:
        flat = np.concatenate([np.asarray(s, dtype=np.float64) for s in self.per_sample_ncc]) \
            if self.per_sample_ncc else np.empty(0)
        return float(flat.mean()) if flat.size else math.nan

    @property
    def aggregate_mean(self) -> float:
        return float(np.mean(self.seed_means)) if self.seed_means else math.nan

    @property
    def aggregate_std(self) -> float:
        if len(self.seed_means) < 2:
            return 0.0
        return float(np.std(self.seed_means, ddof=1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(n_seeds=self.n_seeds, aggregate_mean=self.aggregate_mean,
                 aggregate_std=self.aggregate_std, mean_ncc=self.mean_ncc)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        keys = ("method", "config_hash", "seeds", "seed_means", "per_sample_ncc", "failed_seeds", "warning")
        return cls(**{k: d[k] for k in keys})

    def per_sample_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["seed", "index", "ncc"])
        for seed, scores in zip(self.seeds, self.per_sample_ncc):
            for i, s in enumerate(scores):
                writer.writerow([seed, i, repr(float(s))])
        return buf.getvalue()


def derive_seeds(master_seed: int, n_seeds: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(n_seeds) % (2 ** 31)]


def multi_seed(protocol: Callable[[int], Sequence[float]], n_seeds: int = 5, master_seed: int = 0,
               seeds: Optional[Sequence[int]] = None, method: str = "vrgan",
               config_hash: str = "") -> EvalReport:
    """Run ``protocol(seed) -> per-sample NCC`` for several seeds and aggregate.

    A seed whose protocol raises is recorded in ``failed_seeds``; the
    aggregate then covers only the completed seeds and ``warning`` is set.
    """
    if n_seeds < 2:
        raise ValueError("multi_seed needs at least two seeds")
    seeds = list(seeds) if seeds is not None else derive_seeds(master_seed, n_seeds)
    report = EvalReport(method=method, config_hash=config_hash)
    for seed in seeds:
        try:
            scores = [float(s) for s in protocol(seed)]
        except Exception as exc:  # noqa: BLE001 -- any training abort marks the seed failed
            logger.warning("seed %d failed: %s", seed, exc)
            report.failed_seeds.append(seed)
            continue
        report.seeds.append(seed)
        report.per_sample_ncc.append(scores)
        report.seed_means.append(float(np.mean(scores)))
    if report.failed_seeds:
        report.warning = f"{len(report.failed_seeds)} of {len(seeds)} seeds failed"
    return report


# ---------------------------------------------------------------------------
# sweep panels


@dataclass
class SweepPanel:
    montage: np.ndarray
    delta_maps: np.ndarray
    x_primes: np.ndarray
    y_primes: np.ndarray


def _to_unit(values, lo_hi):
    lo, hi = lo_hi
    return np.clip((np.asarray(values, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def sweep_panel(generator, x: np.ndarray, y: float, y_prime_list, stats: ConditioningStats) -> SweepPanel:
    """Two-row montage of effect maps (top) and counterfactuals (bottom) across ``y'``.

    The left column holds the original image under a neutral (zero) map.
    Maps use the fixed range [-2, 2] (gray = no change), images [-1, 1].
    """
    y_primes = np.asarray(list(y_prime_list), dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    batch = np.repeat(x[None], len(y_primes), axis=0)
    fn = vrgan_effect_fn(generator, stats)
    dx = np.asarray(fn(batch, np.full(len(y_primes), y), y_primes), dtype=np.float64)
    x_primes = batch + dx
    top = [np.full_like(x, 0.5)] + [_to_unit(d, MAP_DISPLAY_RANGE) for d in dx]
    bottom = [_to_unit(x, IMAGE_DISPLAY_RANGE)] + [_to_unit(xp, IMAGE_DISPLAY_RANGE) for xp in x_primes]
    montage = np.vstack([np.hstack(top), np.hstack(bottom)])
    return SweepPanel(montage=montage, delta_maps=dx, x_primes=x_primes, y_primes=y_primes)


def parse_range(spec: str) -> list[float]:
    """Expand ``"start:stop:count"`` into evenly spaced values, or parse a comma list."""
    if ":" in spec:
        start, stop, count = spec.split(":")
        return [float(v) for v in np.linspace(float(start), float(stop), int(count))]
    return [float(v) for v in spec.split(",") if v.strip()]


def foreground_area(image, threshold: float = 0.0) -> int:
    return int(np.count_nonzero(np.asarray(image) > threshold))
