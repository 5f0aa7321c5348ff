"""Command-line entry points: simulate | train | render | eval | sweep.

Every run appends exactly one manifest line (command, resolved config,
seed, content hash of its inputs, output paths, wall-clock) to
``manifests.jsonl`` in its output directory, so any run can be reproduced
from its manifest alone.

Exit codes: 0 ok, 2 config error, 3 training failure, 4 query outside the
trained range, 5 shape or wavelength mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import SceneSplit, generate_synthetic, load_cube, save_cube, save_plane
from .errors import (
    ConfigError,
    CubeFormatError,
    ShapeMismatchError,
    TrainingFailure,
    WavelengthRangeError,
)
from .metrics import evaluate_scenes, write_plots
from .pipeline import (
    TrainConfig,
    build_dataset,
    dispersion_from,
    mask_from,
    render,
    scene_spec,
    train,
)
from .sensing import Measurement, SensingOperator

EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_RANGE = 4
EXIT_MISMATCH = 5


def _hash_path(path: Path, digest) -> None:
    if path.is_file():
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    elif path.is_dir():
        for child in sorted(path.rglob("*")):
            if child.is_file():
                digest.update(str(child.relative_to(path)).encode())
                digest.update(child.read_bytes())


def content_hash(paths) -> str:
    digest = hashlib.sha256()
    for p in paths:
        if p is not None:
            _hash_path(Path(p), digest)
    return digest.hexdigest()


def append_manifest(out_dir: Path, command: str, config: dict, seed, inputs_hash: str,
                    outputs, started: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs_hash": inputs_hash,
        "outputs": [str(p) for p in outputs],
        "wallclock_s": round(time.time() - started, 3),
    }
    with open(out_dir / "manifests.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_config(path: str, overrides) -> TrainConfig:
    cfg = TrainConfig.from_json(path)
    values = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            values[key] = json.loads(raw)
        except json.JSONDecodeError:
            values[key] = raw
    env_seed = os.environ.get("PHYCOSF_SEED")
    if env_seed is not None:
        values["seed"] = int(env_seed)
    if values:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **values})
    return cfg


def parse_wavelengths(args) -> list:
    if args.wavelengths:
        return [float(v) for v in args.wavelengths.split(",")]
    if args.range:
        try:
            lo, hi, step = (float(v) for v in args.range.split(":"))
        except ValueError as exc:
            raise ConfigError(f"--range must be lo:hi:step, got {args.range!r}") from exc
        if step <= 0 or hi < lo:
            raise ConfigError(f"bad --range {args.range!r}")
        n = int(np.floor((hi - lo) / step + 1e-9)) + 1
        return [lo + k * step for k in range(n)]
    raise ConfigError("render needs --wavelengths or --range")


def cmd_simulate(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_scenes, render_scenes = build_dataset(cfg)
    mask = mask_from(cfg)
    op = SensingOperator(mask, dispersion_from(cfg), cfg.render_bands)
    outputs = []
    mask_dir = out / "mask"
    save_plane(mask.values, mask_dir)
    outputs.append(mask_dir)
    split = SceneSplit(
        train_scenes=[sid for sid, _ in train_scenes],
        render_scenes=[sid for sid, _ in render_scenes],
        train_wavelengths=list(cfg.wavelength_pool),
        holdout_wavelengths=list(cfg.holdout_wavelengths),
    )
    split.to_json(out / "split.json")
    outputs.append(out / "split.json")
    full_grid = sorted(set(cfg.wavelength_pool) | set(cfg.holdout_wavelengths))
    rng = np.random.default_rng(cfg.seed)
    for sid, scene in render_scenes:
        meas = op.forward(scene.select(cfg.render_bands), cfg.noise_sigma, rng)
        meas_dir = out / f"{sid}_measurement"
        save_plane(meas.data, meas_dir)
        outputs.append(meas_dir)
        if cfg.dataset_kind == "synthetic":
            idx = int(sid.replace("scene", ""))
            ref = generate_synthetic(scene_spec(cfg, idx), full_grid)
            ref_dir = out / f"{sid}_reference"
            save_cube(ref, ref_dir)
            outputs.append(ref_dir)
    append_manifest(out, "simulate", cfg.to_dict(), cfg.seed,
                    content_hash([args.config]), outputs, started)
    return 0


def cmd_train(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    train_scenes, _ = build_dataset(cfg)
    ckpt = train(train_scenes, cfg, out, resume_from=args.resume)
    append_manifest(out, "train", cfg.to_dict(), cfg.seed,
                    content_hash([args.config, args.resume]),
                    [ckpt, out / "loss.csv"], started)
    return 0


def cmd_render(args) -> int:
    started = time.time()
    queries = parse_wavelengths(args)
    if sorted(set(queries)) != queries:
        raise ConfigError("query wavelengths must be strictly increasing for cube output")
    meas_cube = load_cube(args.measurement)
    measurement = Measurement(meas_cube.data[:, :, 0])
    from .pipeline import load_model

    cfg, model = load_model(args.checkpoint)
    sensed = [float(v) for v in args.sensed.split(",")] if args.sensed else cfg.render_bands
    cube = render(measurement, sensed, queries, (cfg, model))
    out = Path(args.out)
    cube_dir = out / "rendered"
    save_cube(cube, cube_dir)
    append_manifest(out, "render", cfg.to_dict(), cfg.seed,
                    content_hash([args.checkpoint, args.measurement]),
                    [cube_dir], started)
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    pred = load_cube(args.pred)
    ref = load_cube(args.ref)
    pred_l = [round(float(l), 6) for l in pred.wavelengths]
    ref_l = [round(float(l), 6) for l in ref.wavelengths]
    if pred_l != ref_l:
        diff = sorted(set(pred_l) ^ set(ref_l))
        raise ShapeMismatchError(
            f"prediction and reference wavelength grids differ; symmetric difference: {diff}"
        )
    report = evaluate_scenes([(Path(args.pred).name, pred, ref)], task=args.task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    report.to_json(report_path)
    plots = write_plots(report, [(Path(args.pred).name, pred, ref)], out / "plots")
    print(json.dumps({"sam_deg": report.avg_sam_deg, "psnr_db": report.avg_psnr_db,
                      "ssim": report.avg_ssim}))
    append_manifest(out, "eval", {"pred": args.pred, "ref": args.ref, "task": args.task},
                    None, content_hash([args.pred, args.ref]),
                    [report_path, *plots], started)
    return 0


DEFAULT_VARIANTS = [
    {"name": "full"},
    {"name": "no_rfe", "rfe_enabled": False},
    {"name": "no_ssh", "ssh_enabled": False},
]


def run_variant(cfg: TrainConfig, out: Path):
    """Train one configuration and evaluate it at trained and held-out bands.

    Returns the pair of reports (continuous, super-resolution); the latter
    is None when the config holds out no wavelengths.
    """
    from .pipeline import load_model, render_planes
    from .cube import SpectralCube

    train_scenes, render_scenes = build_dataset(cfg)
    if not render_scenes:
        raise ConfigError("sweep needs at least one render scene")
    ckpt = train(train_scenes, cfg, out)
    cfg_loaded, model = load_model(ckpt)
    mask = mask_from(cfg)
    op = SensingOperator(mask, dispersion_from(cfg), cfg.render_bands)
    full_grid = sorted(set(cfg.wavelength_pool) | set(cfg.holdout_wavelengths))
    pairs_cont, pairs_sr = [], []
    for sid, scene in render_scenes:
        meas = op.forward(scene.select(cfg.render_bands), 0.0)
        if cfg.dataset_kind == "synthetic":
            idx = int(sid.replace("scene", ""))
            ref_full = generate_synthetic(scene_spec(cfg, idx), full_grid)
        else:
            ref_full = scene
        planes = render_planes(meas, cfg.render_bands, full_grid, (cfg_loaded, model))
        pred_full = SpectralCube(planes, full_grid)
        pairs_cont.append((sid, pred_full.select(cfg.wavelength_pool),
                           ref_full.select(cfg.wavelength_pool)))
        if cfg.holdout_wavelengths:
            pairs_sr.append((sid, pred_full.select(cfg.holdout_wavelengths),
                             ref_full.select(cfg.holdout_wavelengths)))
    report_cont = evaluate_scenes(pairs_cont, task="continuous")
    report_cont.to_json(out / "report_continuous.json")
    report_sr = None
    if pairs_sr:
        report_sr = evaluate_scenes(pairs_sr, task="super-resolution")
        report_sr.to_json(out / "report_superres.json")
    return report_cont, report_sr


def cmd_sweep(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.set)
    variants = DEFAULT_VARIANTS
    if args.variants:
        with open(args.variants) as fh:
            variants = json.load(fh)
    out = Path(args.out)
    outputs = []
    summary = {}
    for variant in variants:
        overrides = {k: v for k, v in variant.items() if k != "name"}
        name = variant.get("name") or "_".join(f"{k}={v}" for k, v in overrides.items())
        vcfg = replace(cfg, **overrides) if overrides else cfg
        vout = out / name
        vout.mkdir(parents=True, exist_ok=True)
        report_cont, report_sr = run_variant(vcfg, vout)
        summary[name] = {
            "continuous": {"sam_deg": report_cont.avg_sam_deg,
                           "psnr_db": report_cont.avg_psnr_db,
                           "ssim": report_cont.avg_ssim},
            "super_resolution": None if report_sr is None else {
                "sam_deg": report_sr.avg_sam_deg,
                "psnr_db": report_sr.avg_psnr_db,
                "ssim": report_sr.avg_ssim},
        }
        outputs.append(vout)
    with open(out / "sweep_summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(json.dumps(summary, sort_keys=True))
    append_manifest(out, "sweep", cfg.to_dict(), cfg.seed,
                    content_hash([args.config, args.variants]),
                    outputs + [out / "sweep_summary.json"], started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cassilab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write mask, measurements and references")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a cube at query wavelengths")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--measurement", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--wavelengths", default=None, help="comma separated list in nm")
    p.add_argument("--range", default=None, help="lo:hi:step in nm")
    p.add_argument("--sensed", default=None, help="override the sensed band list")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="score a prediction against a reference")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", default="continuous")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate a set of ablation variants")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default=None, help="JSON list of {name, overrides}")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CubeFormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingFailure as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except WavelengthRangeError as exc:
        print(f"query range error: {exc}", file=sys.stderr)
        return EXIT_RANGE
    except ShapeMismatchError as exc:
        print(f"mismatch error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
