"""Portable cube I/O, scene splits, patch cropping, synthetic scenes.

The on-disk cube container is a directory with ``header.json`` and
``data.bin``.  The header declares the logical ``(H, W, N)`` shape, the
raw dtype and layout, and the wavelength axis; ``data.bin`` stores N
band planes of H x W little-endian float32 values, band slowest.  Masks
and measurements reuse the container with N = 1.

Synthetic scenes are sums of spatial Gaussian fields, each carrying its
own mixture of spectral Gaussian components, so ground truth exists in
closed form at any wavelength.  The same spec evaluated on two different
grids produces analytically consistent slices, which is what makes true
zero-shot evaluation possible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cube import SpectralCube
from .errors import CubeFormatError

FORMAT_DTYPE = "float32-le"
FORMAT_LAYOUT = "row-major, band-slowest"


def save_cube(cube: SpectralCube, path) -> None:
    """Write a cube to the portable directory container."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    H, W, N = cube.data.shape
    header = {
        "shape": [H, W, N],
        "dtype": FORMAT_DTYPE,
        "layout": FORMAT_LAYOUT,
        "wavelengths_nm": [float(l) for l in cube.wavelengths],
    }
    with open(path / "header.json", "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
        fh.write("\n")
    planes = np.ascontiguousarray(cube.data.transpose(2, 0, 1), dtype="<f4")
    with open(path / "data.bin", "wb") as fh:
        fh.write(planes.tobytes())


def load_cube(path) -> SpectralCube:
    """Read a cube from the portable container, validating as it goes."""
    path = Path(path)
    header_path = path / "header.json"
    if not header_path.exists():
        raise CubeFormatError(f"no header.json under {path}")
    try:
        with open(header_path) as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CubeFormatError(f"header.json is not valid JSON: {exc}") from exc
    for key in ("shape", "dtype", "layout", "wavelengths_nm"):
        if key not in header:
            raise CubeFormatError(f"header.json missing required key '{key}'")
    if header["dtype"] != FORMAT_DTYPE:
        raise CubeFormatError(f"unsupported dtype {header['dtype']!r}, expected {FORMAT_DTYPE!r}")
    H, W, N = (int(v) for v in header["shape"])
    wavelengths = np.asarray(header["wavelengths_nm"], dtype=np.float64)
    if wavelengths.size != N:
        raise CubeFormatError(
            f"wavelength list has {wavelengths.size} entries for {N} bands"
        )
    if N > 1 and not np.all(np.diff(wavelengths) > 0):
        raise CubeFormatError("wavelengths_nm must be strictly increasing")
    raw = (path / "data.bin").read_bytes()
    expected = H * W * N * 4
    if len(raw) != expected:
        raise CubeFormatError(
            f"data.bin holds {len(raw)} bytes, expected {expected} for shape {(H, W, N)}"
        )
    planes = np.frombuffer(raw, dtype="<f4").reshape(N, H, W)
    if not np.all(np.isfinite(planes)):
        raise CubeFormatError("data.bin payload contains non-finite values")
    return SpectralCube(planes.transpose(1, 2, 0).copy(), wavelengths)


def save_plane(plane: np.ndarray, path, label: float = 0.0) -> None:
    """Store a 2-D array (mask or measurement) as a single-band cube."""
    save_cube(SpectralCube(np.asarray(plane, dtype=np.float32)[:, :, None], [label]), path)


def load_plane(path) -> np.ndarray:
    cube = load_cube(path)
    if cube.n_bands != 1:
        raise CubeFormatError(f"expected a single-band container, got {cube.n_bands} bands")
    return cube.data[:, :, 0]


@dataclass
class SceneSplit:
    """Disjoint scene and wavelength partitions for the two-phase protocol."""

    train_scenes: list
    render_scenes: list
    train_wavelengths: list
    holdout_wavelengths: list

    def __post_init__(self):
        if set(self.train_scenes) & set(self.render_scenes):
            raise ValueError("train and render scene lists must be disjoint")
        if set(self.train_wavelengths) & set(self.holdout_wavelengths):
            raise ValueError("train and holdout wavelength lists must be disjoint")

    @property
    def full_grid(self) -> list:
        return sorted(self.train_wavelengths + self.holdout_wavelengths)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {
                    "train_scenes": list(self.train_scenes),
                    "render_scenes": list(self.render_scenes),
                    "train_wavelengths": list(self.train_wavelengths),
                    "holdout_wavelengths": list(self.holdout_wavelengths),
                },
                fh, indent=1,
            )
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "SceneSplit":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(**payload)


def desk_wavelength_grid(lambda_min: float = 450.0, lambda_max: float = 650.0,
                         n: int = 16, holdout_indices=(2, 6, 9, 13)):
    """Default desk-scale grid: n evenly spaced bands, four held out inside."""
    grid = np.linspace(lambda_min, lambda_max, n)
    holdout = [float(grid[i]) for i in holdout_indices]
    train = [float(l) for i, l in enumerate(grid) if i not in set(holdout_indices)]
    return train, holdout


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of one synthetic continuous-spectrum scene.

    With ``dictionary_seed`` set, the spectral components of all scenes
    sharing that seed come from one small material dictionary (scene seeds
    only place the spatial fields), mimicking how natural hyperspectral
    scenes share reflectance statistics.  Without it every scene draws its
    own spectra.
    """

    seed: int
    H: int = 32
    W: int = 32
    n_blobs: int = 4
    n_peaks: int = 2
    lambda_min: float = 450.0
    lambda_max: float = 650.0
    dictionary_seed: int | None = None
    n_materials: int = 4


def _draw_peaks(rng, spec: SyntheticSpec, center_band=None):
    """Spectral components of one material; optionally localized to a sub-band."""
    span = spec.lambda_max - spec.lambda_min
    peaks = []
    for _ in range(spec.n_peaks):
        if center_band is None:
            c = rng.uniform(spec.lambda_min + 0.1 * span, spec.lambda_max - 0.1 * span)
            w = rng.uniform(0.18, 0.45) * span
        else:
            c = center_band + rng.uniform(-0.06, 0.06) * span
            w = rng.uniform(0.20, 0.40) * span
        peaks.append({"a": rng.uniform(0.5, 1.0), "c": c, "w": w})
    return peaks


def _draw_scene_params(spec: SyntheticSpec):
    rng = np.random.default_rng(spec.seed)
    span = spec.lambda_max - spec.lambda_min
    if spec.dictionary_seed is not None:
        dict_rng = np.random.default_rng([spec.dictionary_seed, 1])
        materials = [_draw_peaks(dict_rng, spec) for _ in range(spec.n_materials)]
        pick = lambda: materials[int(rng.integers(0, spec.n_materials))]
        ambient_rng = dict_rng  # one shared illuminant for the whole dataset
    else:
        pick = lambda: _draw_peaks(rng, spec)
        ambient_rng = rng
    blobs = []
    # broad ambient field first, so no pixel's spectrum ever collapses to zero
    blobs.append({
        "cx": spec.W / 2.0,
        "cy": spec.H / 2.0,
        "sx": 10.0 * spec.W,
        "sy": 10.0 * spec.H,
        "amp": rng.uniform(0.10, 0.20),
        "peaks": [
            {
                "a": ambient_rng.uniform(0.5, 1.0),
                "c": ambient_rng.uniform(spec.lambda_min + 0.2 * span, spec.lambda_max - 0.2 * span),
                "w": ambient_rng.uniform(0.5, 0.9) * span,
            }
        ],
    })
    for _ in range(spec.n_blobs):
        blobs.append({
            "cx": rng.uniform(0, spec.W - 1),
            "cy": rng.uniform(0, spec.H - 1),
            "sx": rng.uniform(0.18, 0.45) * spec.W,
            "sy": rng.uniform(0.18, 0.45) * spec.H,
            "amp": rng.uniform(0.5, 1.0),
            "peaks": pick(),
        })
    return blobs


def _evaluate_scene(blobs, spec: SyntheticSpec, wavelengths: np.ndarray) -> np.ndarray:
    ys, xs = np.mgrid[0 : spec.H, 0 : spec.W]
    cube = np.zeros((spec.H, spec.W, wavelengths.size))
    for blob in blobs:
        g = blob["amp"] * np.exp(
            -((xs - blob["cx"]) ** 2) / (2 * blob["sx"] ** 2)
            - ((ys - blob["cy"]) ** 2) / (2 * blob["sy"] ** 2)
        )
        s = np.zeros(wavelengths.size)
        for p in blob["peaks"]:
            s += p["a"] * np.exp(-((wavelengths - p["c"]) ** 2) / (2 * p["w"] ** 2))
        cube += g[:, :, None] * s[None, None, :]
    return cube


def _scene_scale(blobs, spec: SyntheticSpec) -> float:
    # grid-independent normalization from a fixed dense reference grid
    ref = np.linspace(spec.lambda_min, spec.lambda_max, 257)
    peak = _evaluate_scene(blobs, spec, ref).max()
    return 0.9 / peak if peak > 0 else 1.0


def generate_synthetic(spec: SyntheticSpec, wavelength_grid) -> SpectralCube:
    """Evaluate a synthetic scene on a wavelength grid; exact for any grid."""
    grid = np.asarray(wavelength_grid, dtype=np.float64)
    if grid.min() < spec.lambda_min or grid.max() > spec.lambda_max:
        raise ValueError(
            f"grid [{grid.min()}, {grid.max()}] outside spec range "
            f"[{spec.lambda_min}, {spec.lambda_max}]"
        )
    blobs = _draw_scene_params(spec)
    cube = _evaluate_scene(blobs, spec, grid) * _scene_scale(blobs, spec)
    return SpectralCube(np.clip(cube, 0.0, 1.0).astype(np.float32), grid)


def synthetic_curvature_bound(spec: SyntheticSpec) -> float:
    """Upper bound on |d2/dlambda2| of any pixel's spectrum, for interp tests."""
    blobs = _draw_scene_params(spec)
    scale = _scene_scale(blobs, spec)
    bound = 0.0
    for blob in blobs:
        b = sum(p["a"] / p["w"] ** 2 for p in blob["peaks"])  # |s''| <= sum a/w^2
        bound += blob["amp"] * b
    return float(bound * scale)


def crop_patch(cube: SpectralCube, size: int, rng: np.random.Generator) -> SpectralCube:
    """Uniformly random size x size crop, wavelengths preserved."""
    H, W, _ = cube.data.shape
    if size > H or size > W:
        raise ValueError(f"patch size {size} exceeds scene size {H}x{W}")
    top = int(rng.integers(0, H - size + 1))
    left = int(rng.integers(0, W - size + 1))
    return SpectralCube(
        cube.data[top : top + size, left : left + size, :].copy(), cube.wavelengths
    )
