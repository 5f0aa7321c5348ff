"""Spectral cube container.

A cube is an (H, W, N) radiance array with an explicit strictly increasing
wavelength axis in nanometers.  All algorithms in this package treat the
wavelength list as authoritative metadata; band index alone is never enough
to identify a slice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError


@dataclass
class SpectralCube:
    """(H, W, N) radiance volume plus its wavelength axis in nm."""

    data: np.ndarray
    wavelengths: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
        validate_cube(self.data, self.wavelengths)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def n_bands(self) -> int:
        return self.data.shape[2]

    def band(self, wavelength: float) -> np.ndarray:
        """Return the (H, W) slice at an exactly matching wavelength."""
        idx = np.nonzero(np.isclose(self.wavelengths, wavelength, rtol=0, atol=1e-6))[0]
        if idx.size == 0:
            raise KeyError(f"wavelength {wavelength} nm not present in cube grid")
        return self.data[:, :, int(idx[0])]

    def select(self, wavelengths) -> "SpectralCube":
        """Sub-cube at the given wavelengths, which must all exist in the grid."""
        planes = [self.band(lam) for lam in wavelengths]
        return SpectralCube(np.stack(planes, axis=2), np.asarray(wavelengths, dtype=np.float64))


def validate_cube(data: np.ndarray, wavelengths: np.ndarray) -> None:
    if data.ndim != 3:
        raise ShapeMismatchError(f"cube data must be 3-D (H, W, N), got shape {data.shape}")
    H, W, N = data.shape
    if H < 1 or W < 1:
        raise ShapeMismatchError(f"cube spatial dims must be >= 1, got {H}x{W}")
    if wavelengths.ndim != 1 or wavelengths.shape[0] != N:
        raise ShapeMismatchError(
            f"wavelength list length {wavelengths.shape} does not match band count {N}"
        )
    if N > 1 and not np.all(np.diff(wavelengths) > 0):
        raise ValueError("wavelengths must be strictly increasing")
    if not np.all(np.isfinite(data)):
        raise ValueError("cube data contains non-finite values")
    if not np.all(np.isfinite(wavelengths)):
        raise ValueError("wavelength list contains non-finite values")
