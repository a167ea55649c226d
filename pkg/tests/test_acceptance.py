"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale criteria (1, 7, 9) share one set of trained models: three
seeds of each method on the ``toy-desk`` preset, trained through the CLI.
Training takes well over an hour on one CPU core, so results are cached
under ``$VRGAN_ACCEPTANCE_CACHE`` (default ``~/.cache/vrgan/acceptance``)
keyed by the package source and the preset configuration.  Criterion 2
(full scale) runs only when ``VRGAN_FULL_SCALE=1``.
"""

import dataclasses
import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import ndimage

from vrgan import storage
from vrgan.baseline import gradient_penalty
from vrgan.cli import main
from vrgan.config import preset
from vrgan.evaluation import baseline_effect_fn, foreground_area, ncc, vrgan_effect_fn
from vrgan.losses import loss_gxp, loss_reg, loss_rx, loss_rxp
from vrgan.registration import AffineTransform, centered_affine, composition_error, register_affine, warp_affine
from vrgan.toydata import ToyConfig, gen_toy_dataset, gt_effect_map, render_square
from vrgan.training import load_generator
from vrgan.xray import XraySample, build_gt_map

from helpers import micro_gradient_errors

TOL = 1e-6


@pytest.fixture
def verdict(capsys, request):
    """``verdict(ok, detail)`` prints the criterion line and fails the test if not ``ok``."""

    def _verdict(ok, detail):
        name = request.node.name.removeprefix("test_")
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail

    return _verdict


# ---------------------------------------------------------------------------
# trained desk-scale models


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(storage.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _cache_root(name: str) -> Path:
    base = Path(os.environ.get("VRGAN_ACCEPTANCE_CACHE", Path.home() / ".cache" / "vrgan" / "acceptance"))
    cfg = preset(name)
    return base / f"{name}-{_source_digest()}-{cfg.hash[:12]}"


def trained_runs(name: str, extra=()):
    """Train (or reuse) both methods on preset ``name``; returns ``{method: run_dir}``."""
    root = _cache_root(name)
    data = root / "data"
    if not (data / storage.MANIFEST_NAME).exists():
        assert main(["gen-toy", "--preset", name, "--out", str(data), "--force"]) == 0
    runs = {}
    for method in ("vrgan", "vagan"):
        out = root / method
        if not (out / "report.json").exists():
            start = time.perf_counter()
            code = main(["multi-seed", "--preset", name, "--method", method, "--dataset", str(data),
                         "--out", str(out), "--force", *extra])
            assert code == 0, f"{method} multi-seed exited with {code}"
            storage.write_json(out / "timing.json", {"seconds": time.perf_counter() - start})
        runs[method] = out
    return root, runs


@pytest.fixture(scope="session")
def desk():
    return trained_runs("toy-desk")


def _report(run_dir):
    return json.loads((Path(run_dir) / "report.json").read_text())


def _seed_checkpoints(run_dir):
    return [Path(run_dir) / f"seed_{s}" / "best.npz" for s in _report(run_dir)["seeds"]]


# ---------------------------------------------------------------------------
# 1-2 benchmark


def test_criterion_1_desk_benchmark(desk, verdict):
    _, runs = desk
    vr, va = _report(runs["vrgan"]), _report(runs["vagan"])
    vr_mean = float(np.mean(vr["seed_means"]))
    va_mean = float(np.mean(va["seed_means"]))
    minutes = storage.read_json(runs["vrgan"] / "timing.json")["seconds"] / 60 / len(vr["seeds"])
    detail = (f"VR-GAN {vr_mean:.3f} (seeds {np.round(vr['seed_means'], 3).tolist()}), "
              f"VA-GAN {va_mean:.3f} (seeds {np.round(va['seed_means'], 3).tolist()}), "
              f"gap {vr_mean - va_mean:+.3f}; {minutes:.0f} min per VR-GAN seed; "
              f"need VR-GAN >= 0.70 and gap >= 0.02")
    verdict(vr["seeds"] == va["seeds"] and vr_mean >= 0.70 and vr_mean - va_mean >= 0.02
            and minutes <= 180, detail)


@pytest.mark.skipif(os.environ.get("VRGAN_FULL_SCALE") != "1", reason="full scale runs only with VRGAN_FULL_SCALE=1")
def test_criterion_2_full_scale(verdict):
    _, runs = trained_runs("toy-paper")
    vr = float(np.mean(_report(runs["vrgan"])["seed_means"]))
    va = float(np.mean(_report(runs["vagan"])["seed_means"]))
    verdict(abs(vr - 0.853) <= 0.05 and abs(va - 0.780) <= 0.05,
            f"VR-GAN {vr:.3f} (target 0.853 +/- 0.05), VA-GAN {va:.3f} (target 0.780 +/- 0.05)")


# ---------------------------------------------------------------------------
# 3-4 kernels and gradients


class _Affine(torch.nn.Module):
    def __init__(self, w, c=0.0):
        super().__init__()
        self.w = torch.nn.Parameter(torch.as_tensor(w, dtype=torch.float64))
        self.c = c

    def forward(self, x):
        return x.flatten(1) @ self.w.flatten() + self.c


def _t(values):
    return torch.as_tensor(values, dtype=torch.float64)


def test_criterion_3_loss_kernels(verdict):
    failures = []

    def check(label, got, want):
        got = got.item() if isinstance(got, torch.Tensor) else float(got)
        if abs(got - want) > TOL:
            failures.append(f"{label}: {got} != {want}")

    mean_r = _Affine(np.full(4, 0.25))
    x = _t(np.arange(8.0).reshape(2, 1, 2, 2))  # pixel means 1.5 and 5.5
    check("loss_rx zero", loss_rx(_t([0.5, 0.8]), _t([0.5, 0.8])), 0.0)
    check("loss_rx hand", loss_rx(_t([0.0, 1.0, 3.0]), _t([1.0, 1.0, 1.0])), 1.0)
    check("loss_gxp oracle", loss_gxp(mean_r, x, _t([1.5, 5.5])), 0.0)
    check("loss_gxp hand", loss_gxp(mean_r, x, _t([2.0, 5.0])), 0.5)
    check("loss_rxp hand", loss_rxp(mean_r, x, _t([1.0, 7.5])), 1.25)
    check("loss_reg zero", loss_reg(torch.zeros(2, 1, 3, 3)), 0.0)
    check("loss_reg hand", loss_reg(_t([[[[1.0, -2.0], [0.0, 3.0]]]])), 1.5)
    check("ncc self", ncc(np.arange(9.0), np.arange(9.0)), 1.0)
    check("ncc negated", ncc(np.arange(9.0), -np.arange(9.0)), -1.0)
    check("ncc hand", ncc([1, 2, 3], [1, 3, 2]), 0.5)
    check("ncc constant", ncc(np.ones(4), np.arange(4.0)), 0.0)
    real, fake = _t(np.ones((3, 1, 2, 2))), _t(np.zeros((3, 1, 2, 2)))
    rng = np.random.default_rng(0)
    check("gp linear", gradient_penalty(_Affine([3.0, 4.0, 0.0, 0.0]), real, fake, rng), 16.0)
    check("gp unit", gradient_penalty(_Affine([0.6, 0.8, 0.0, 0.0]), real, fake, rng), 0.0)
    check("gp sum", gradient_penalty(_Affine(np.ones(4)), real, fake, rng), 1.0)

    # properties on 1000 random inputs
    for k in range(1000):
        n = int(rng.integers(1, 9))
        p, y = _t(rng.normal(0, 2, n)), _t(rng.normal(0, 2, n))
        a = float(rng.uniform(0.01, 10))
        m = _t(rng.normal(0, 1, (n, 1, 3, 3)))
        l_py, l_yp = float(loss_rx(p, y)), float(loss_rx(y, p))
        if l_py < 0 or abs(l_py - l_yp) > TOL:
            failures.append(f"loss_rx symmetry/sign at draw {k}")
        if abs(float(loss_rx(a * p, a * y)) - a * l_py) > TOL * max(1.0, a * l_py):
            failures.append(f"loss_rx homogeneity at draw {k}")
        reg = float(loss_reg(m))
        if reg < 0 or abs(float(loss_reg(-m)) - reg) > TOL or abs(float(loss_reg(a * m)) - a * reg) > TOL * max(1, a * reg):
            failures.append(f"loss_reg properties at draw {k}")
        u, v = rng.normal(size=(2, 12))
        r = ncc(u, v)
        if not -1 <= r <= 1 or abs(r - ncc(v, u)) > TOL:
            failures.append(f"ncc bounds/symmetry at draw {k}")
    verdict(not failures, "all examples and 1000-draw properties hold" if not failures else "; ".join(failures[:5]))


def test_criterion_4_micro_model_gradients(verdict):
    errors = micro_gradient_errors(20)
    verdict(bool(errors.max() < 1e-5), f"max relative error {errors.max():.2e} over 20 points (need < 1e-5)")


# ---------------------------------------------------------------------------
# 5-6 registration and the x-ray ground-truth pipeline


def _smooth(n, seed, sigma):
    img = ndimage.gaussian_filter(np.random.default_rng(seed).standard_normal((n, n)), sigma)
    return img / img.std()


def test_criterion_5_registration_recovery(verdict):
    rng = np.random.default_rng(2024)
    img = _smooth(224, 0, 6.0)
    errors = []
    for _ in range(100):
        rot = rng.uniform(-5, 5)
        scale = rng.uniform(0.95, 1.05)
        shift = rng.uniform(-8, 8, 2) / np.sqrt(2)  # |shift| <= 8 px
        warp = centered_affine(img.shape, rot, scale, tuple(shift))
        res = register_affine(img, warp_affine(img, warp))
        errors.append(composition_error(res.transform, warp, img.shape))
    errors = np.array(errors)
    recovered = int(np.sum(errors < 1.0))
    self_res = register_affine(img, img)
    self_err = float(np.max(np.abs(self_res.transform.params - AffineTransform.identity().params)))
    verdict(recovered >= 95 and self_err <= 1e-3,
            f"{recovered}/100 warps within 1 px (median {np.median(errors):.3f} px, worst {errors.max():.3f} px); "
            f"self-registration max parameter deviation {self_err:.1e}")


def _gt_map_errors(pairs):
    maes = []
    for y, y_prime, x, target in pairs:
        study = build_gt_map((XraySample("s", None, x, y, 0), XraySample("s", None, target, y_prime, 0)))
        maes.append(float(np.mean(np.abs(study.gt_map - (target - x)))))
    return np.array(maes)


def test_criterion_6_gt_map_cross_check(verdict):
    # toydata pairs: both images share the noise field, so target - x is exactly gt_effect_map
    cfg = dataclasses.replace(preset("toy-desk").toy, n_train=0, n_val_pairs=0, n_test_pairs=20)
    toy = [(p.sample.y, p.y_prime, p.sample.image, p.sample.image + p.gt_map) for p in gen_toy_dataset(cfg)["test"]]
    for y, y_prime, x, target in toy:
        assert np.array_equal(target - x, gt_effect_map(y, y_prime, cfg))
    maes = _gt_map_errors(toy)
    # for reference only: small squares over a dominant shared background, plus a pose change
    wide = ToyConfig(image_size=128, side_scale=40.0, n_train=0, n_val_pairs=0, n_test_pairs=0)
    rng = np.random.default_rng(6)
    posed = []
    for k in range(5):
        y, y_prime = rng.uniform(0.45, 0.95, 2)
        anatomy = 2 * _smooth(128, 100 + k, 4.0)
        warp = centered_affine((128, 128), rng.uniform(-2, 2), rng.uniform(0.98, 1.02), tuple(rng.uniform(-2, 2, 2)))
        x = render_square(y, wide) + anatomy
        target = warp_affine(render_square(y_prime, wide) + anatomy, warp)
        study = build_gt_map((XraySample("s", None, x, y, 0), XraySample("s", None, target, y_prime, 0)))
        posed.append(float(np.mean(np.abs(study.gt_map - gt_effect_map(y, y_prime, wide)))))
    verdict(maes.mean() < 0.05,
            f"toydata pairs: mean MAE {maes.mean():.3f} (worst {maes.max():.3f}, need < 0.05); "
            f"reference case with a dominant shared background: MAE {np.round(posed, 3).tolist()}")


# ---------------------------------------------------------------------------
# 7-9 trained-model structure, determinism, sweeps


def _test_inputs(root, n=50):
    images, y, _, _ = storage.load_split_arrays(root / "data", "test")
    return images[:n], y[:n]


def test_criterion_7_structural_distinction(desk, verdict):
    root, runs = desk
    images, y = _test_inputs(root)
    target_pairs = [(0.5, 0.7), (0.6, 0.9), (0.4, 1.0), (0.7, 0.9)]
    baseline_equal = True
    for path in _seed_checkpoints(runs["vagan"]):
        mapper, _, _ = load_generator(path)
        fn = baseline_effect_fn(mapper)
        maps = [fn(images, y, np.full(len(y), v)) for v in (0.5, 0.7, 0.9, 1.0)]
        baseline_equal &= all(np.array_equal(maps[0], m) for m in maps[1:])
    diffs = []
    for path in _seed_checkpoints(runs["vrgan"]):
        generator, stats, _ = load_generator(path)
        fn = vrgan_effect_fn(generator, stats)
        for a, b in target_pairs:
            da = fn(images, y, np.full(len(y), a))
            db = fn(images, y, np.full(len(y), b))
            diffs.append(float(np.mean(np.abs(da - db))))
    verdict(baseline_equal and min(diffs) > 0.01,
            f"baseline maps bit-identical across y': {baseline_equal}; "
            f"smallest VR-GAN mean |map difference| {min(diffs):.4f} over pairs {target_pairs} (need > 0.01)")


def test_criterion_8_determinism(tmp_path, verdict):
    cfg = tmp_path / "small.cfg"
    cfg.write_text("[run]\npreset = toy-desk\n[toy]\nn_train = 64\nn_val_pairs = 8\nn_test_pairs = 8\n"
                   "[generator]\nbase_channels = 4\n[regressor]\nwidth = 4\n[critic]\nwidth = 4\n")
    same = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["gen-toy", "--config", str(cfg), "--seed", "3", "--deterministic", "--out", str(out / "data")]) == 0
        for method in ("vrgan", "vagan"):
            assert main(["train", "--config", str(cfg), "--seed", "3", "--deterministic", "--method", method,
                         "--max-epochs", "2", "--dataset", str(out / "data"), "--out", str(out / method)]) == 0
    csvs = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    for rel in csvs:
        same.append((tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes())
    verdict(len(csvs) == 5 and all(same), f"{sum(same)}/{len(csvs)} CSV files byte-identical across two runs")


def test_criterion_9_sweep_monotonicity(desk, verdict):
    root, runs = desk
    images, y = _test_inputs(root)
    targets = np.round(np.arange(0.3, 1.0001, 0.1), 1)
    generator, stats, _ = load_generator(_seed_checkpoints(runs["vrgan"])[0])
    fn = vrgan_effect_fn(generator, stats)
    areas = np.stack([[foreground_area(x) for x in images + fn(images, y, np.full(len(y), t))] for t in targets], 1)
    monotone = np.all(np.diff(areas, axis=1) >= 0, axis=1)
    verdict(monotone.mean() >= 0.9,
            f"{int(monotone.sum())}/{len(monotone)} inputs with non-decreasing foreground area over y' in "
            f"{targets.tolist()} (need >= 90%)")
