"""Single-disperser CASSI forward model.

Conventions used throughout:

- A scene cube has spatial size H x W and N_s sensed bands.  The disperser
  shifts band n to the right by an integer pixel count d_n, so the detector
  plane is H x W_out with W_out = W + max_n d_n.
- The measurement is the band sum of the mask-coded, shifted cube plus
  optional i.i.d. Gaussian noise.  Shifts zero-pad on the left and extend
  the width on the right; nothing wraps around.
- The adjoint crops each band's shifted window back to W columns and
  re-applies the mask, which is the exact transpose of the forward map on
  the W-wide domain.
- The Gram operator of this map is diagonal; ``normal_diag`` returns its
  entries, which is what makes the closed-form data step cheap.

Tensor-facing methods (``forward_t`` etc.) operate on band-first torch
tensors ``[..., N, H, W]`` and are differentiable; the numpy-facing methods
wrap them for simulation and I/O code working with :class:`SpectralCube`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cube import SpectralCube
from .errors import ShapeMismatchError, WavelengthRangeError


@dataclass
class CodedMask:
    """Physical coding mask with the seed/density it was drawn from."""

    values: np.ndarray
    seed: int
    density: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeMismatchError(f"mask must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("mask contains non-finite values")

    @property
    def shape(self) -> tuple:
        return self.values.shape


def generate_mask(seed: int, H: int, W: int, density: float) -> CodedMask:
    """Draw a binary coding mask; each cell is 1 with probability ``density``.

    Deterministic for a fixed seed.
    """
    if H < 1 or W < 1:
        raise ValueError(f"mask dimensions must be positive, got {H}x{W}")
    if not 0.0 < density < 1.0:
        raise ValueError(f"density must lie in (0, 1), got {density}")
    rng = np.random.default_rng(seed)
    values = (rng.random((H, W)) < density).astype(np.float32)
    return CodedMask(values=values, seed=seed, density=density)


@dataclass(frozen=True)
class DispersionModel:
    """Linear-in-wavelength integer pixel shift over [lambda_min, lambda_max].

    ``shift(lambda_min) == 0`` and ``shift(lambda_max) == d_total``; the
    rounded linear law keeps the shift monotone nondecreasing.
    """

    d_total: int
    lambda_min: float
    lambda_max: float

    def __post_init__(self):
        if self.d_total < 0:
            raise ValueError(f"d_total must be >= 0, got {self.d_total}")
        if not self.lambda_min < self.lambda_max:
            raise ValueError(
                f"need lambda_min < lambda_max, got [{self.lambda_min}, {self.lambda_max}]"
            )

    def shift(self, wavelength: float) -> int:
        if wavelength < self.lambda_min or wavelength > self.lambda_max:
            raise WavelengthRangeError(
                f"wavelength {wavelength} nm outside dispersion range "
                f"[{self.lambda_min}, {self.lambda_max}] nm"
            )
        frac = (wavelength - self.lambda_min) / (self.lambda_max - self.lambda_min)
        return int(round(self.d_total * frac))


@dataclass
class Measurement:
    """Single coded snapshot (H x W_out) and the noise level it was formed with."""

    data: np.ndarray
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ShapeMismatchError(f"measurement must be 2-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("measurement contains non-finite values")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


class SensingOperator:
    """Mask + disperser + sensed wavelength set: the linear map y = Phi x."""

    def __init__(self, mask: CodedMask, dispersion: DispersionModel, sensed_wavelengths):
        sensed = np.asarray(sensed_wavelengths, dtype=np.float64)
        if sensed.ndim != 1 or sensed.size < 1:
            raise ValueError("sensed_wavelengths must be a non-empty 1-D list")
        if sensed.size > 1 and not np.all(np.diff(sensed) > 0):
            raise ValueError("sensed_wavelengths must be strictly increasing")
        self.mask = mask
        self.dispersion = dispersion
        self.sensed_wavelengths = sensed
        self.shifts = [dispersion.shift(lam) for lam in sensed]
        self._mask_t = torch.from_numpy(mask.values)

    @property
    def n_bands(self) -> int:
        return self.sensed_wavelengths.size

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width_in(self) -> int:
        return self.mask.shape[1]

    @property
    def width_out(self) -> int:
        # shift is monotone, so the last sensed band carries the max shift
        return self.width_in + self.shifts[-1]

    def band_shift(self, wavelength: float) -> int:
        """Pixel shift of the given wavelength under this operator's disperser."""
        return self.dispersion.shift(wavelength)

    # -- tensor core -------------------------------------------------------

    def _mask_like(self, x: torch.Tensor) -> torch.Tensor:
        return self._mask_t.to(dtype=x.dtype, device=x.device)

    def forward_t(self, x: torch.Tensor) -> torch.Tensor:
        """Coded snapshot of a band-first cube [..., N, H, W] -> [..., H, W_out]."""
        N, H, W = self.n_bands, self.height, self.width_in
        if x.shape[-3:] != (N, H, W):
            raise ShapeMismatchError(
                f"expected cube tensor [..., {N}, {H}, {W}], got {tuple(x.shape)}"
            )
        mask = self._mask_like(x)
        y = x.new_zeros(x.shape[:-3] + (H, self.width_out))
        for n, d in enumerate(self.shifts):
            y[..., :, d : d + W] += x[..., n, :, :] * mask
        return y

    def adjoint_t(self, y: torch.Tensor) -> torch.Tensor:
        """Transpose map [..., H, W_out] -> [..., N, H, W]."""
        N, H, W = self.n_bands, self.height, self.width_in
        if y.shape[-2:] != (H, self.width_out):
            raise ShapeMismatchError(
                f"expected measurement tensor [..., {H}, {self.width_out}], got {tuple(y.shape)}"
            )
        mask = self._mask_like(y)
        bands = [y[..., :, d : d + W] * mask for d in self.shifts]
        return torch.stack(bands, dim=-3)

    def normal_diag_t(self, dtype=torch.float32) -> torch.Tensor:
        """Diagonal of Phi Phi^T as an [H, W_out] tensor (sum of squared shifted masks)."""
        H, W = self.height, self.width_in
        mask2 = self._mask_t.to(dtype) ** 2
        diag = torch.zeros(H, self.width_out, dtype=dtype)
        for d in self.shifts:
            diag[:, d : d + W] += mask2
        return diag

    # -- numpy convenience --------------------------------------------------

    def forward(self, cube: SpectralCube, noise_sigma: float = 0.0, rng=None) -> Measurement:
        """Simulate a measurement from a cube whose grid matches the sensed set."""
        if cube.data.shape[:2] != self.mask.shape:
            raise ShapeMismatchError(
                f"cube spatial dims {cube.data.shape[:2]} do not match mask {self.mask.shape}"
            )
        if cube.n_bands != self.n_bands or not np.allclose(
            cube.wavelengths, self.sensed_wavelengths, rtol=0, atol=1e-6
        ):
            raise ShapeMismatchError(
                "cube wavelengths do not match the operator's sensed set: "
                f"{cube.wavelengths.tolist()} vs {self.sensed_wavelengths.tolist()}"
            )
        x = torch.from_numpy(np.ascontiguousarray(cube.data.transpose(2, 0, 1)))
        y = self.forward_t(x).numpy()
        if noise_sigma > 0:
            if rng is None:
                rng = np.random.default_rng()
            y = y + rng.normal(0.0, noise_sigma, size=y.shape).astype(np.float32)
        return Measurement(data=y, noise_sigma=float(noise_sigma))

    def adjoint(self, y: Measurement) -> np.ndarray:
        """Apply the transpose to a measurement, returning an (H, W, N) array."""
        x = self.adjoint_t(torch.from_numpy(np.asarray(y.data, dtype=np.float32)))
        return x.numpy().transpose(1, 2, 0)

    def phi_phit_diag(self) -> np.ndarray:
        """Diagonal of Phi Phi^T as an (H, W_out) array."""
        return self.normal_diag_t(dtype=torch.float64).numpy()

    # -- dense oracle --------------------------------------------------------

    def dense_matrix(self) -> np.ndarray:
        """Explicit sensing matrix over the zero-padded cube domain.

        Rows index vec(Y) for a row-major (H, W_out) measurement; columns
        index vec of the padded band-slowest cube (N, H, W_out).  Padding
        columns (w >= W) are identically zero.  Intended for oracle tests
        only; guarded against large instances.
        """
        N, H, W = self.n_bands, self.height, self.width_in
        Wt = self.width_out
        n_entries = H * Wt * N
        if n_entries > 10**5:
            raise ValueError(
                f"dense matrix refused: padded cube has {n_entries} entries > 1e5; "
                "use the implicit forward_t/adjoint_t methods at this scale"
            )
        phi = np.zeros((H * Wt, n_entries), dtype=np.float64)
        mask = self.mask.values.astype(np.float64)
        for n, d in enumerate(self.shifts):
            for h in range(H):
                for w in range(W):
                    row = h * Wt + (w + d)
                    col = n * (H * Wt) + h * Wt + w
                    phi[row, col] = mask[h, w]
        return phi


def pad_cube_for_dense(data: np.ndarray, width_out: int) -> np.ndarray:
    """Zero-pad an (H, W, N) cube to (H, W_out, N) for use with ``dense_matrix``."""
    H, W, N = data.shape
    out = np.zeros((H, width_out, N), dtype=np.float64)
    out[:, :W, :] = data
    return out


def vec_padded_cube(padded: np.ndarray) -> np.ndarray:
    """Flatten an (H, W_out, N) padded cube band-slowest, matching ``dense_matrix``."""
    return np.ascontiguousarray(padded.transpose(2, 0, 1)).reshape(-1)
