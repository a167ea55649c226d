"""Command-line entry point: ``vrgan <command> [options]``.

Commands: ``gen-toy``, ``train``, ``eval``, ``multi-seed``, ``sweep``,
``register``.  Every output directory receives a ``run_manifest.json``
recording the command, the resolved configuration and its hash.

Exit codes: 0 success, 1 user/configuration error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import storage
from .baseline import restore_best_baseline, save_baseline_checkpoint, train_baseline
from .checkpoint import CheckpointMismatchError
from .config import RunConfig, load_config
from .errors import ConfigurationError, DegenerateImageError, NumericalError
from .evaluation import (EvalReport, baseline_effect_fn, evaluate_pairs, multi_seed, parse_range,
                         sweep_panel, vrgan_effect_fn)
from .registration import register_affine
from .toydata import gen_toy_dataset
from .training import (HISTORY_COLUMNS, TrainData, WeibullTargets, load_generator, restore_best,
                       save_model_checkpoint, train)

logger = logging.getLogger("vrgan")

RUN_MANIFEST = "run_manifest.json"
DEVICE_ENV = "VRGAN_DEVICE"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for numerical aborts here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _device() -> str:
    return os.environ.get(DEVICE_ENV, "cpu")


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, cfg: RunConfig = None, artifacts=(), **extra):
    manifest = {
        "command": command,
        "created": dt.datetime.now(dt.timezone.utc).isoformat(),
        "artifacts": sorted(str(a) for a in artifacts),
        **extra,
    }
    if cfg is not None:
        manifest["config"] = cfg.to_dict()
        manifest["config_hash"] = cfg.hash
    storage.write_json(out / RUN_MANIFEST, manifest)


def _overrides(args) -> dict:
    out = {}
    for key in ("method", "preset", "seed", "n_seeds", "max_epochs", "n_train"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    if getattr(args, "deterministic", False):
        out["deterministic"] = True
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _resolve(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _write_history(path, rows, columns):
    storage.write_metadata_csv(path, rows, columns)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_toy(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args.out, args.force)
    manifest = storage.write_toy_dataset(out, cfg.toy, gen_toy_dataset(cfg.toy))
    _write_manifest(out, "gen-toy", cfg, artifacts=storage.SPLITS, dataset_hash=manifest["config_hash"])
    print(f"wrote {manifest['counts']} to {out}")
    return 0


def _load_training_data(dataset: Path, cfg: RunConfig):
    manifest = storage.read_dataset_manifest(dataset)
    if manifest["config"]["image_size"] != cfg.generator.image_size:
        raise ConfigurationError("dataset image size does not match the generator configuration")
    images, y, _, _ = storage.load_split_arrays(dataset, "train")
    val = storage.load_split_arrays(dataset, "val")
    if len(images) == 0:
        raise ConfigurationError("training split is empty")
    toy = manifest["config"]
    targets = WeibullTargets(toy["weibull_shape"], toy["weibull_scale"])
    return manifest, images, y, (val if len(val[0]) else None), targets


def run_training(cfg: RunConfig, dataset: Path, out: Path):
    """Train ``cfg.method`` on a dataset directory and write checkpoints + history."""
    manifest, images, y, val, targets = _load_training_data(dataset, cfg)
    if cfg.method == "vrgan":
        pretrained = torch.load(cfg.pretrained_weights) if cfg.pretrained_weights else None
        data = TrainData(images, y, targets, val=val)
        state, history = train(cfg.train, data, cfg.generator, cfg.regressor, pretrained_weights=pretrained)
        save_model_checkpoint(out / "last.npz", state)
        restore_best(state)
        save_model_checkpoint(out / "best.npz", state)
        columns = HISTORY_COLUMNS
    else:
        state, history = train_baseline(cfg.baseline, images, y, cfg.generator, cfg.critic, val=val)
        save_baseline_checkpoint(out / "last.npz", state)
        restore_best_baseline(state)
        save_baseline_checkpoint(out / "best.npz", state)
        from .baseline import BASELINE_HISTORY_COLUMNS as columns
    _write_history(out / "history.csv", history, columns)
    return manifest, state, history


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args.out, args.force)
    manifest, _, history = run_training(cfg, Path(args.dataset), out)
    _write_manifest(out, "train", cfg, artifacts=["best.npz", "last.npz", "history.csv"],
                    dataset_hash=manifest["config_hash"], dataset=str(Path(args.dataset).resolve()))
    print(f"trained {cfg.method} for {len(history)} epochs -> {out}")
    return 0


def _effect_fn(checkpoint):
    generator, stats, header = load_generator(checkpoint)
    method = header["specs"]["method"]
    fn = vrgan_effect_fn(generator, stats) if method == "vrgan" else baseline_effect_fn(generator)
    return fn, method, header


def evaluate_checkpoint(checkpoint, dataset, split="test") -> tuple:
    fn, method, header = _effect_fn(checkpoint)
    pairs = storage.load_split_arrays(dataset, split)
    if pairs[2] is None:
        raise ConfigurationError(f"split {split!r} has no ground-truth maps")
    return evaluate_pairs(fn, pairs), method, header


def _write_report(out: Path, report: EvalReport):
    (out / "report.json").write_text(report.to_json())
    (out / "per_sample_ncc.csv").write_text(report.per_sample_csv())


def cmd_eval(args) -> int:
    out = _prepare_out(args.out, args.force)
    if args.config is not None or args.preset is not None:
        cfg = _resolve(args)
        expected = _expected_specs(cfg)
        load_generator(args.checkpoint, expected)
    scores, method, header = evaluate_checkpoint(args.checkpoint, args.dataset, args.split)
    report = EvalReport(method=method, config_hash=header["spec_hash"], seeds=[header.get("seed", 0)],
                        seed_means=[float(np.mean(scores))], per_sample_ncc=[[float(s) for s in scores]])
    _write_report(out, report)
    _write_manifest(out, "eval", artifacts=["report.json", "per_sample_ncc.csv"],
                    checkpoint=str(Path(args.checkpoint).resolve()))
    print(f"{method}: mean NCC {report.aggregate_mean:.4f} over {len(scores)} pairs")
    return 0


def _expected_specs(cfg: RunConfig) -> dict:
    from .baseline import baseline_specs, unconditioned
    from .training import vrgan_specs

    if cfg.method == "vrgan":
        return vrgan_specs(cfg.generator, cfg.regressor)
    return baseline_specs(unconditioned(cfg.generator), cfg.critic)


def cmd_multi_seed(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args.out, args.force)
    dataset = Path(args.dataset)

    def protocol(seed):
        run_dir = out / f"seed_{seed}"
        run_dir.mkdir(exist_ok=True)
        run_training(cfg.with_seed(seed), dataset, run_dir)
        scores, _, _ = evaluate_checkpoint(run_dir / "best.npz", dataset, args.split)
        return scores

    report = multi_seed(protocol, n_seeds=cfg.n_seeds, master_seed=cfg.master_seed,
                        method=cfg.method, config_hash=cfg.hash)
    _write_report(out, report)
    _write_manifest(out, "multi-seed", cfg, artifacts=["report.json", "per_sample_ncc.csv"],
                    dataset=str(dataset.resolve()))
    print(f"{cfg.method}: {report.aggregate_mean:.4f} +/- {report.aggregate_std:.4f} over {report.n_seeds} seeds")
    return 0 if not report.failed_seeds else 2


def cmd_sweep(args) -> int:
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    generator, stats, header = load_generator(args.checkpoint)
    if header["specs"]["method"] != "vrgan":
        raise UsageError("sweep needs a VR-GAN checkpoint; baseline maps do not depend on the target value")
    out = _prepare_out(args.out, args.force)
    if args.image:
        image = storage.read_png16(args.image) if args.raw16 else storage.read_grayscale(args.image)
        y = args.y
    else:
        images, ys, _, _ = storage.load_split_arrays(args.dataset, args.split)
        image, y = images[args.pair_id], float(ys[args.pair_id]) if args.y is None else args.y
    if y is None:
        raise UsageError("--y is required with --image")
    panel = sweep_panel(generator, image, y, parse_range(args.y_primes), stats)
    storage.write_png8(out / "montage.png", panel.montage)
    np.save(out / "delta_maps.npy", panel.delta_maps)
    for k, (yp, dx) in enumerate(zip(panel.y_primes, panel.delta_maps)):
        storage.write_png16(out / f"delta_{k:02d}.png", dx)
    _write_manifest(out, "sweep", artifacts=["montage.png", "delta_maps.npy"],
                    checkpoint=str(Path(args.checkpoint).resolve()), y=y,
                    y_primes=[float(v) for v in panel.y_primes])
    print(f"montage with {len(panel.y_primes)} targets -> {out / 'montage.png'}")
    return 0


def cmd_register(args) -> int:
    reader = storage.read_png16 if args.raw16 else storage.read_grayscale
    ref, mov = reader(args.reference), reader(args.moving)
    if ref.shape != mov.shape:
        raise UsageError(f"image sizes differ: {ref.shape} vs {mov.shape}")
    out = _prepare_out(args.out, args.force)
    res = register_affine(ref, mov, levels=args.levels)
    diff = res.aligned - ref
    lo, hi = min(ref.min(), mov.min()), max(ref.max(), mov.max())
    span = hi - lo if hi > lo else 1.0
    storage.write_png8(out / "aligned.png", (res.aligned - lo) / span)
    storage.write_png8(out / "difference.png", 0.5 + diff / (2 * span))
    np.save(out / "difference.npy", diff)
    storage.write_metadata_csv(out / "transform.csv", [dict(zip(("a11", "a12", "a13", "a21", "a22", "a23"),
                                                                 res.transform.params))],
                               ("a11", "a12", "a13", "a21", "a22", "a23"))
    _write_manifest(out, "register", artifacts=["aligned.png", "difference.png", "difference.npy", "transform.csv"],
                    transform=[float(v) for v in res.transform.params], mse=res.mse,
                    converged=res.converged, flags=res.flags)
    print("transform:", " ".join(f"{v:.6f}" for v in res.transform.params),
          "" if res.converged else "(flagged: non-convergence)")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _common(p, dataset=False):
    p.add_argument("--config", help="sectioned key = value configuration file")
    p.add_argument("--preset", choices=["toy-paper", "toy-desk"])
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    if dataset:
        p.add_argument("--dataset", required=True, help="dataset directory written by gen-toy")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vrgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="generate the synthetic squares dataset")
    _common(p)
    p.add_argument("--n-train", type=int)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train", help="train VR-GAN or the VA-GAN baseline")
    _common(p, dataset=True)
    p.add_argument("--method", choices=["vrgan", "vagan"])
    p.add_argument("--max-epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against ground-truth maps")
    _common(p, dataset=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", choices=["vrgan", "vagan"])
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("multi-seed", help="train and evaluate over several seeds")
    _common(p, dataset=True)
    p.add_argument("--method", choices=["vrgan", "vagan"])
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_multi_seed)

    p = sub.add_parser("sweep", help="effect-map montage across target values")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--image", help="input image (PNG)")
    p.add_argument("--raw16", action="store_true", help="decode 16-bit PNGs with the dataset intensity mapping")
    p.add_argument("--dataset", help="dataset directory, with --pair-id")
    p.add_argument("--split", default="test")
    p.add_argument("--pair-id", type=int, default=0)
    p.add_argument("--y", type=float)
    p.add_argument("--y-primes", required=True, help="start:stop:count or comma-separated list")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("register", help="affine registration of two images")
    p.add_argument("reference")
    p.add_argument("moving")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--raw16", action="store_true")
    p.set_defaults(func=cmd_register)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_default_device(_device()) if _device() != "cpu" else None
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc} {exc.snapshot}", file=sys.stderr)
        return 2
    except (UsageError, ConfigurationError, CheckpointMismatchError, DegenerateImageError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
