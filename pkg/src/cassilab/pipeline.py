"""Two-phase protocol: discrete-wavelength training, continuous rendering.

Each training step samples a fresh subset of the wavelength pool, slices
the ground truth there, simulates the coded snapshot through the fixed
mask, runs the unfolded model and takes an L1 step.  Rendering later loads
a checkpoint and queries the final-stage prior at arbitrary in-range
wavelengths.  Training is deterministic per seed: all randomness flows
through the torch global generator (init) and one numpy generator
(sampling, crops, noise), both captured in every checkpoint.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, asdict, fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    load_checkpoint,
    model_state_from,
    optimizer_state_from,
    restore_rng,
    save_checkpoint,
)
from .cube import SpectralCube
from .data import SyntheticSpec, crop_patch, generate_synthetic, load_cube
from .errors import ConfigError, TrainingFailure, WavelengthRangeError
from .mixer import MixerConfig
from .sensing import CodedMask, DispersionModel, Measurement, SensingOperator, generate_mask
from .spectral import FrequencyBank, SpectralFieldPrior
from .unfolding import UnfoldedReconstructor

logger = logging.getLogger(__name__)

FINAL_LR = 1e-6


@dataclass
class TrainConfig:
    """Everything a run needs; also the JSON config schema for the CLI."""

    wavelength_pool: list
    holdout_wavelengths: list | None = None
    n_sample: int = 6
    patch: int = 256
    stages: int = 9
    channels: int = 72
    freq_dim: int = 32
    freq_sigma: float = 1.0
    embed_dim: int = 64
    state_dim: int = 8
    lr: float = 1e-3
    epochs: int = 200
    max_steps: int | None = None
    seed: int = 0
    mask_seed: int = 0
    data_seed: int = 0
    density: float = 0.5
    d_total: int | None = None
    lambda_min: float = 450.0
    lambda_max: float = 650.0
    noise_sigma: float = 0.0
    render_bands: list | None = None
    branches: int = 3
    seq_domain: str = "frequency"
    ssh_enabled: bool = True
    rfe_enabled: bool = True
    se_enabled: bool = True
    residual_prior: bool = False
    grad_clip: float = 1.0
    augment: bool = True
    measurement_bands: str = "sampled"
    dataset_kind: str = "synthetic"
    dataset_dir: str | None = None
    n_scenes: int = 16
    n_train_scenes: int = 12
    n_blobs: int = 4
    n_peaks: int = 2

    def __post_init__(self):
        pool = sorted(float(l) for l in self.wavelength_pool)
        if len(pool) == 0:
            raise ConfigError("wavelength_pool must be non-empty")
        if len(set(pool)) != len(pool):
            raise ConfigError("wavelength_pool contains duplicates")
        self.wavelength_pool = pool
        self.holdout_wavelengths = sorted(float(l) for l in (self.holdout_wavelengths or []))
        if set(self.holdout_wavelengths) & set(pool):
            raise ConfigError("holdout wavelengths must be disjoint from the training pool")
        if self.n_sample > len(pool):
            raise ConfigError(
                f"n_sample={self.n_sample} exceeds pool size {len(pool)}"
            )
        if self.patch % 4 != 0:
            raise ConfigError(f"patch must be divisible by 4, got {self.patch}")
        if not self.lambda_min < self.lambda_max:
            raise ConfigError("need lambda_min < lambda_max")
        for lam in pool + self.holdout_wavelengths:
            if lam < self.lambda_min or lam > self.lambda_max:
                raise ConfigError(
                    f"wavelength {lam} nm outside [{self.lambda_min}, {self.lambda_max}]"
                )
        if self.measurement_bands not in ("sampled", "fixed"):
            raise ConfigError(
                f"measurement_bands must be 'sampled' or 'fixed', got {self.measurement_bands!r}"
            )
        if self.render_bands is None:
            idx = np.round(np.linspace(0, len(pool) - 1, self.n_sample)).astype(int)
            self.render_bands = [pool[i] for i in idx]
        else:
            self.render_bands = sorted(float(l) for l in self.render_bands)
            missing = set(self.render_bands) - set(pool)
            if missing:
                raise ConfigError(f"render_bands not in the pool: {sorted(missing)}")
            if len(self.render_bands) != self.n_sample:
                raise ConfigError(
                    f"render_bands must list {self.n_sample} wavelengths, got {len(self.render_bands)}"
                )

    @property
    def d_total_effective(self) -> int:
        return self.d_total if self.d_total is not None else 2 * (self.n_sample - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "wavelength_pool" not in payload:
            raise ConfigError("missing config key 'wavelength_pool'")
        return cls(**payload)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            with open(path) as fh:
                payload = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        return cls.from_dict(payload)


def dispersion_from(cfg: TrainConfig) -> DispersionModel:
    return DispersionModel(cfg.d_total_effective, cfg.lambda_min, cfg.lambda_max)


def mask_from(cfg: TrainConfig, H: int | None = None, W: int | None = None) -> CodedMask:
    return generate_mask(cfg.mask_seed, H or cfg.patch, W or cfg.patch, cfg.density)


def build_model(cfg: TrainConfig) -> UnfoldedReconstructor:
    """Construct the unfolded model; call under a seeded torch RNG for determinism."""
    mixer_cfg = MixerConfig(
        channels=cfg.channels, d_state=cfg.state_dim,
        branches=cfg.branches, seq_domain=cfg.seq_domain,
    )
    bank = FrequencyBank.draw(cfg.freq_dim, cfg.freq_sigma) if cfg.ssh_enabled else None
    prior = SpectralFieldPrior(
        n_bands=cfg.n_sample, mixer_cfg=mixer_cfg, bank=bank, embed_dim=cfg.embed_dim,
        lambda_min=cfg.lambda_min, lambda_max=cfg.lambda_max,
        ssh_enabled=cfg.ssh_enabled, rfe_enabled=cfg.rfe_enabled, se_enabled=cfg.se_enabled,
        residual=cfg.residual_prior,
    )
    return UnfoldedReconstructor(prior, n_stages=cfg.stages)


def scene_spec(cfg: TrainConfig, index: int) -> SyntheticSpec:
    return SyntheticSpec(
        seed=cfg.data_seed * 100003 + index, H=cfg.patch, W=cfg.patch,
        n_blobs=cfg.n_blobs, n_peaks=cfg.n_peaks,
        lambda_min=cfg.lambda_min, lambda_max=cfg.lambda_max,
        dictionary_seed=cfg.data_seed,
    )


def build_dataset(cfg: TrainConfig):
    """Return (train, render) lists of (scene_id, SpectralCube on the pool grid)."""
    if cfg.dataset_kind == "synthetic":
        scenes = [
            (f"scene{i:02d}", generate_synthetic(scene_spec(cfg, i), cfg.wavelength_pool))
            for i in range(cfg.n_scenes)
        ]
    elif cfg.dataset_kind == "dir":
        if not cfg.dataset_dir:
            raise ConfigError("dataset_kind='dir' requires dataset_dir")
        root = Path(cfg.dataset_dir)
        paths = sorted(p for p in root.iterdir() if (p / "header.json").exists())
        if not paths:
            raise ConfigError(f"no portable cubes found under {root}")
        scenes = []
        for p in paths:
            cube = load_cube(p)
            scenes.append((p.name, cube.select(cfg.wavelength_pool)))
    else:
        raise ConfigError(f"unknown dataset_kind {cfg.dataset_kind!r}")
    if cfg.n_train_scenes > len(scenes):
        raise ConfigError(
            f"n_train_scenes={cfg.n_train_scenes} exceeds available scenes {len(scenes)}"
        )
    return scenes[: cfg.n_train_scenes], scenes[cfg.n_train_scenes :]


def sample_wavelengths(pool, n: int, rng: np.random.Generator) -> list:
    """n distinct wavelengths from the pool, uniform without replacement, sorted."""
    pool = list(pool)
    if n > len(pool):
        raise ValueError(f"cannot sample {n} wavelengths from a pool of {len(pool)}")
    picked = rng.choice(len(pool), size=n, replace=False)
    return sorted(pool[i] for i in picked)


class TrainState:
    """Mutable bundle passed through training steps."""

    def __init__(self, cfg: TrainConfig):
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.model = build_model(cfg)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.mask = mask_from(cfg)
        self.dispersion = dispersion_from(cfg)
        self.fixed_op = SensingOperator(self.mask, self.dispersion, cfg.render_bands)
        self.step = 0
        self.epoch = 0
        self.audit: set = set()
        self.total_steps = 1  # set by the training loop before stepping

    def lr_at(self, step: int) -> float:
        t = min(step, self.total_steps) / max(self.total_steps, 1)
        return FINAL_LR + (self.cfg.lr - FINAL_LR) * 0.5 * (1.0 + math.cos(math.pi * t))

    def save(self, path) -> None:
        save_checkpoint(
            path, self.model, self.cfg.to_dict(),
            optimizer=self.optimizer, step=self.step, epoch=self.epoch,
            np_rng=self.rng, audit=self.audit,
        )

    @classmethod
    def resume(cls, cfg: TrainConfig, path) -> "TrainState":
        manifest = load_checkpoint(path)
        saved = TrainConfig.from_dict(manifest["config"])
        if saved.to_dict() != cfg.to_dict():
            raise ConfigError("checkpoint config differs from the requested config")
        state = cls(cfg)
        state.model.load_state_dict(model_state_from(manifest))
        opt_state = optimizer_state_from(manifest)
        if opt_state is not None:
            state.optimizer.load_state_dict(opt_state)
        state.rng = restore_rng(manifest)
        state.step = manifest["step"]
        state.epoch = manifest["epoch"]
        state.audit = set(manifest["audit_wavelengths"])
        return state


def dihedral(data: np.ndarray, code: int) -> np.ndarray:
    """Apply one of the 8 axis-aligned flips/rotations to an (H, W, N) array."""
    out = np.rot90(data, k=code % 4, axes=(0, 1))
    if code >= 4:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def augment_patch(data: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Flip/rotate, cyclically shift, and rescale a training patch.

    The coding mask stays fixed while the scene moves and dims, so every
    draw is a physically valid new acquisition of the same scene family.
    """
    out = dihedral(data, int(rng.integers(0, 8)))
    dy = int(rng.integers(0, out.shape[0]))
    dx = int(rng.integers(0, out.shape[1]))
    out = np.roll(out, (dy, dx), axis=(0, 1))
    gain = rng.uniform(0.6, 1.05)
    return np.clip(out * gain, 0.0, 1.0).astype(np.float32)


def training_step(state: TrainState, scene: SpectralCube) -> float:
    """One sampled-wavelength L1 step on a single scene; returns the loss."""
    cfg = state.cfg
    patch = crop_patch(scene, cfg.patch, state.rng)
    if cfg.augment:
        patch = SpectralCube(augment_patch(patch.data, state.rng), patch.wavelengths)
    sampled = sample_wavelengths(cfg.wavelength_pool, cfg.n_sample, state.rng)
    state.audit.update(sampled)
    gt = patch.select(sampled)
    gt_t = torch.from_numpy(np.ascontiguousarray(gt.data.transpose(2, 0, 1))).unsqueeze(0)
    if cfg.measurement_bands == "fixed":
        # one fixed acquisition system; the sampled bands are rendering queries
        op = state.fixed_op
        meas = patch.select(cfg.render_bands)
        y = op.forward_t(torch.from_numpy(
            np.ascontiguousarray(meas.data.transpose(2, 0, 1))).unsqueeze(0))
    else:
        op = SensingOperator(state.mask, state.dispersion, sampled)
        y = op.forward_t(gt_t)
    if cfg.noise_sigma > 0:
        noise = state.rng.normal(0.0, cfg.noise_sigma, size=tuple(y.shape)).astype(np.float32)
        y = y + torch.from_numpy(noise)
    try:
        if cfg.measurement_bands == "fixed":
            _, output = state.model(op, y, query_wavelengths=sampled)
        else:
            output, _ = state.model(op, y)
    except FloatingPointError as exc:
        raise TrainingFailure(f"step {state.step}: {exc}") from exc
    loss = (output - gt_t).abs().mean()
    if not torch.isfinite(loss):
        raise TrainingFailure(f"non-finite loss at step {state.step}")
    for group in state.optimizer.param_groups:
        group["lr"] = state.lr_at(state.step)
    state.optimizer.zero_grad()
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    return float(loss.detach())


def train(dataset, cfg: TrainConfig, out_dir, resume_from=None,
          keep_epoch_checkpoints: bool = False) -> Path:
    """Train over (scene_id, cube) pairs; returns the checkpoint directory.

    A checkpoint is written after every epoch (and once for epoch 0 so an
    ``epochs=0`` run still yields the initialization); by default the same
    directory is overwritten, with ``keep_epoch_checkpoints`` an epoch-tagged
    copy is kept too.  The loss curve is appended to ``loss.csv``.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    for sid, scene in dataset:
        have = set(float(l) for l in scene.wavelengths)
        if not set(cfg.wavelength_pool) <= have:
            raise ConfigError(
                f"scene {sid} does not cover the wavelength pool"
            )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoint"
    loss_csv = out_dir / "loss.csv"

    if resume_from is not None:
        state = TrainState.resume(cfg, resume_from)
    else:
        state = TrainState(cfg)
    steps_per_epoch = len(dataset)
    planned = cfg.epochs * steps_per_epoch
    state.total_steps = min(planned, cfg.max_steps) if cfg.max_steps else planned

    mode = "a" if resume_from is not None else "w"
    with open(loss_csv, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss", "lr"])
        if state.epoch == 0 and state.step == 0:
            state.save(ckpt_dir)
        for epoch in range(state.epoch, cfg.epochs):
            if state.step >= state.total_steps:
                break
            for _, scene in dataset:
                if state.step >= state.total_steps:
                    break
                lr_now = state.lr_at(state.step)
                loss = training_step(state, scene)
                writer.writerow([state.step, f"{loss:.8f}", f"{lr_now:.8e}"])
            state.epoch = epoch + 1
            state.save(ckpt_dir)
            if keep_epoch_checkpoints:
                state.save(out_dir / f"epoch_{state.epoch:04d}")
            logger.info("epoch %d/%d loss=%.6f", state.epoch, cfg.epochs, loss)
    return ckpt_dir


def load_model(path):
    """Rebuild (cfg, model) from a checkpoint directory, ready for rendering."""
    manifest = load_checkpoint(path)
    cfg = TrainConfig.from_dict(manifest["config"])
    model = build_model(cfg)
    model.load_state_dict(model_state_from(manifest))
    return cfg, model


def render_planes(measurement: Measurement, sensed_wavelengths, queries, ckpt) -> np.ndarray:
    """Render intensity planes at the query wavelengths: (H, W, Q) array.

    ``ckpt`` is a checkpoint directory or an already loaded (cfg, model)
    pair.  Queries may repeat or be unsorted; planes come back in query
    order.
    """
    if isinstance(ckpt, (str, Path)):
        cfg, model = load_model(ckpt)
    else:
        cfg, model = ckpt
    queries = [float(l) for l in queries]
    if not queries:
        raise ValueError("query wavelength list must be non-empty")
    for lam in queries:
        if lam < cfg.lambda_min or lam > cfg.lambda_max:
            raise WavelengthRangeError(
                f"query {lam} nm outside trained range [{cfg.lambda_min}, {cfg.lambda_max}] nm"
            )
    dispersion = dispersion_from(cfg)
    sensed = sorted(float(l) for l in sensed_wavelengths)
    H = measurement.data.shape[0]
    W = measurement.data.shape[1] - dispersion.shift(sensed[-1])
    mask = generate_mask(cfg.mask_seed, H, W, cfg.density)
    op = SensingOperator(mask, dispersion, sensed)
    y = torch.from_numpy(np.asarray(measurement.data, dtype=np.float32)).unsqueeze(0)
    with torch.no_grad():
        _, rendered = model(op, y, query_wavelengths=queries)
    return rendered.squeeze(0).numpy().transpose(1, 2, 0)


def render(measurement: Measurement, sensed_wavelengths, queries, ckpt) -> SpectralCube:
    """Render a cube at strictly increasing query wavelengths."""
    queries = [float(l) for l in queries]
    if sorted(set(queries)) != queries:
        raise ValueError(
            "render() writes a cube and needs strictly increasing queries; "
            "use render_planes() for arbitrary query lists"
        )
    planes = render_planes(measurement, sensed_wavelengths, queries, ckpt)
    return SpectralCube(planes, queries)
