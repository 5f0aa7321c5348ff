"""Reconstruction quality metrics and evaluation reports.

PSNR is computed per band against a unit peak and averaged over bands,
the angular metric per pixel over the spectral axis (reported in degrees),
and SSIM with the canonical 11x11 Gaussian window constants, averaged over
bands.  Identical inputs hit the 100 dB PSNR sentinel rather than infinity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .cube import SpectralCube
from .errors import ShapeMismatchError

PSNR_CAP_DB = 100.0
SAM_EPS = 1e-8
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_volume(x) -> np.ndarray:
    if isinstance(x, SpectralCube):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def _check_pair(x: np.ndarray, ref: np.ndarray) -> None:
    if x.shape != ref.shape:
        raise ShapeMismatchError(f"metric operands differ in shape: {x.shape} vs {ref.shape}")


def psnr(x, ref) -> float:
    """Band-averaged peak signal-to-noise ratio in dB (peak = 1.0)."""
    x, ref = _as_volume(x), _as_volume(ref)
    _check_pair(x, ref)
    if x.ndim == 2:
        x, ref = x[:, :, None], ref[:, :, None]
    values = []
    for b in range(x.shape[2]):
        mse = np.mean((x[:, :, b] - ref[:, :, b]) ** 2)
        if mse <= 10 ** (-PSNR_CAP_DB / 10.0):
            values.append(PSNR_CAP_DB)
        else:
            values.append(10.0 * np.log10(1.0 / mse))
    return float(np.mean(values))


def sam(x, ref) -> float:
    """Mean per-pixel spectral angle in degrees; invariant to positive scaling."""
    x, ref = _as_volume(x), _as_volume(ref)
    _check_pair(x, ref)
    if x.ndim != 3:
        raise ShapeMismatchError(f"spectral angle needs (H, W, N) volumes, got shape {x.shape}")
    dot = np.sum(x * ref, axis=2)
    norms = np.linalg.norm(x, axis=2) * np.linalg.norm(ref, axis=2)
    cosine = np.clip(dot / (norms + SAM_EPS), -1.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(cosine))))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(x, ref) -> float:
    """Single-scale SSIM of two 2-D images with dynamic range 1.0."""
    x, ref = _as_volume(x), _as_volume(ref)
    _check_pair(x, ref)
    if x.ndim != 2:
        raise ShapeMismatchError(f"ssim operates on single band images, got shape {x.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ShapeMismatchError(
            f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )
    w = _gaussian_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_x = convolve2d(x, w, mode="valid")
    mu_y = convolve2d(ref, w, mode="valid")
    sxx = convolve2d(x * x, w, mode="valid") - mu_x**2
    syy = convolve2d(ref * ref, w, mode="valid") - mu_y**2
    sxy = convolve2d(x * ref, w, mode="valid") - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim_cube(x, ref) -> float:
    """Band-averaged SSIM over two cubes."""
    x, ref = _as_volume(x), _as_volume(ref)
    _check_pair(x, ref)
    return float(np.mean([ssim(x[:, :, b], ref[:, :, b]) for b in range(x.shape[2])]))


@dataclass
class SceneScores:
    scene_id: str
    sam_deg: float
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    """Per-scene scores plus their averages and the per-wavelength PSNR curve."""

    task: str
    scenes: list
    avg_sam_deg: float
    avg_psnr_db: float
    avg_ssim: float
    wavelengths_nm: list
    psnr_per_wavelength_db: list

    def to_json(self, path) -> None:
        payload = asdict(self)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")


def score_scene(scene_id: str, pred: SpectralCube, ref: SpectralCube) -> SceneScores:
    if pred.data.shape != ref.data.shape or not np.allclose(
        pred.wavelengths, ref.wavelengths, rtol=0, atol=1e-6
    ):
        raise ShapeMismatchError(
            f"scene {scene_id}: prediction and reference disagree in shape or wavelengths"
        )
    return SceneScores(
        scene_id=scene_id,
        sam_deg=sam(pred, ref),
        psnr_db=psnr(pred, ref),
        ssim=ssim_cube(pred, ref),
    )


def evaluate_scenes(pairs, task: str = "continuous") -> EvalReport:
    """Score (scene_id, prediction, reference) triples and aggregate them."""
    scored = [score_scene(sid, pred, ref) for sid, pred, ref in pairs]
    if not scored:
        raise ValueError("nothing to evaluate")
    wavelengths = pairs[0][2].wavelengths
    curves = np.zeros(wavelengths.size)
    for _, pred, ref in pairs:
        curves += np.array([
            psnr(pred.data[:, :, b], ref.data[:, :, b]) for b in range(wavelengths.size)
        ])
    curves /= len(pairs)
    return EvalReport(
        task=task,
        scenes=[asdict(s) for s in scored],
        avg_sam_deg=float(np.mean([s.sam_deg for s in scored])),
        avg_psnr_db=float(np.mean([s.psnr_db for s in scored])),
        avg_ssim=float(np.mean([s.ssim for s in scored])),
        wavelengths_nm=[float(l) for l in wavelengths],
        psnr_per_wavelength_db=[float(v) for v in curves],
    )


def write_plots(report: EvalReport, pairs, out_dir) -> list:
    """Render the standard plot bundle; returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(report.wavelengths_nm, report.psnr_per_wavelength_db, marker="o", ms=3)
    ax.set_xlabel("wavelength (nm)")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(f"per-wavelength PSNR ({report.task})")
    fig.tight_layout()
    p = out_dir / "psnr_per_wavelength.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    sid, pred, ref = pairs[0]
    H, W, _ = ref.data.shape
    r0, r1 = H // 3, 2 * H // 3
    c0, c1 = W // 3, 2 * W // 3
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(ref.wavelengths, ref.data[r0:r1, c0:c1].mean(axis=(0, 1)), label="reference")
    ax.plot(pred.wavelengths, pred.data[r0:r1, c0:c1].mean(axis=(0, 1)), "--", label="prediction")
    ax.set_xlabel("wavelength (nm)")
    ax.set_ylabel("mean intensity")
    ax.set_title(f"spectral signature, center region of {sid}")
    ax.legend()
    fig.tight_layout()
    p = out_dir / "spectral_signature.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    n_show = min(3, ref.n_bands)
    idx = np.linspace(0, ref.n_bands - 1, n_show).astype(int)
    fig, axes = plt.subplots(1, n_show, figsize=(3 * n_show, 3))
    axes = np.atleast_1d(axes)
    for ax, b in zip(axes, idx):
        im = ax.imshow(np.abs(pred.data[:, :, b] - ref.data[:, :, b]), cmap="viridis")
        ax.set_title(f"|error| at {ref.wavelengths[b]:.1f} nm", fontsize=8)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    p = out_dir / "error_heatmaps.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return [str(p) for p in paths]
