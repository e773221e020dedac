"""
Single-disperser CASSI forward model and its matrix-free sensing operator.

A cube F (H x W x N bands) is modulated by a coded mask, each band is sheared
right by d pixels per band index, and the sheared bands are summed onto a
detector of width W + d(N-1). The sensing matrix Phi never materializes except
through ``SensingOperator.dense_matrix`` for small verification instances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, UsageError

log = logging.getLogger(__name__)

# Nominal centre wavelengths (nm) of the 28-band 450-650 nm benchmark grid.
BENCHMARK_WAVELENGTHS = (
    453.3, 457.6, 462.1, 466.8, 471.6, 476.5, 481.6, 486.9, 492.4, 498.0,
    503.9, 509.9, 516.2, 522.7, 529.5, 536.5, 543.8, 551.4, 558.6, 567.5,
    575.3, 584.3, 594.4, 604.2, 614.4, 625.1, 636.3, 648.1,
)


def default_wavelengths(bands: int) -> tuple[float, ...]:
    """Band labels in nm: the benchmark grid for 28 bands, else a linear 450-650 grid."""
    if bands == len(BENCHMARK_WAVELENGTHS):
        return BENCHMARK_WAVELENGTHS
    if bands == 1:
        return (550.0,)
    return tuple(float(v) for v in np.round(np.linspace(450.0, 650.0, bands), 1))


def _as_float(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def sheared_width(width: int, bands: int, shift_step: int) -> int:
    return width + shift_step * (bands - 1)


@dataclass(frozen=True)
class HsiCube:
    """H x W x N reflectance cube with per-band wavelength labels."""

    data: np.ndarray
    wavelengths: tuple = ()

    def __post_init__(self):
        data = _as_float(self.data)
        if data.ndim != 3:
            raise DimensionError(f"cube must be H x W x N, got shape {data.shape}", axis="rank")
        for axis, n in zip(("height", "width", "bands"), data.shape):
            if n < 1:
                raise DimensionError(f"cube {axis} must be positive, got {n}", axis=axis)
        if not np.all(np.isfinite(data)):
            raise DomainError("cube contains non-finite values")
        wavelengths = tuple(float(w) for w in self.wavelengths) or default_wavelengths(data.shape[2])
        if len(wavelengths) != data.shape[2]:
            raise DimensionError(
                f"{len(wavelengths)} wavelength labels for {data.shape[2]} bands", axis="bands"
            )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "wavelengths", wavelengths)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ShearedCube:
    """Dispersed cube, H x (W + d(N-1)) x N. Band n occupies columns [d*n, d*n + W)."""

    data: np.ndarray
    shift_step: int

    def __post_init__(self):
        data = _as_float(self.data)
        if data.ndim != 3:
            raise DimensionError(f"sheared cube must be rank 3, got shape {data.shape}", axis="rank")
        if self.shift_step < 0:
            raise ConfigError(f"shift step must be >= 0, got {self.shift_step}")
        if data.shape[1] - self.shift_step * (data.shape[2] - 1) < 1:
            raise DimensionError(
                f"width {data.shape[1]} too small for {data.shape[2]} bands at d={self.shift_step}",
                axis="width",
            )
        object.__setattr__(self, "data", data)

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        """Width of the unsheared scene."""
        return self.data.shape[1] - self.shift_step * (self.bands - 1)


@dataclass(frozen=True)
class CodedMask:
    """Base aperture code M* (H x W, values in [0, 1]) and the dispersion step."""

    base: np.ndarray
    shift_step: int = 2

    def __post_init__(self):
        base = _as_float(self.base)
        if base.ndim != 2:
            raise DimensionError(f"mask must be H x W, got shape {base.shape}", axis="rank")
        if self.shift_step < 0:
            raise ConfigError(f"shift step must be >= 0, got {self.shift_step}")
        if base.size and (base.min() < 0.0 or base.max() > 1.0):
            raise DomainError(f"mask values must lie in [0, 1], got [{base.min()}, {base.max()}]")
        object.__setattr__(self, "base", base)

    @classmethod
    def random_binary(cls, height: int, width: int, shift_step: int,
                      rng: np.random.Generator, p: float = 0.5) -> "CodedMask":
        """Seeded Bernoulli(p) aperture."""
        return cls((rng.random((height, width)) < p).astype(np.float64), shift_step)

    def crop(self, top: int, left: int, height: int, width: int) -> "CodedMask":
        return CodedMask(self.base[top:top + height, left:left + width], self.shift_step)


@dataclass(frozen=True)
class NoiseSpec:
    shot_bits: Optional[int] = None
    gaussian_sigma: float = 0.0

    def describe(self) -> str:
        parts = []
        if self.shot_bits:
            parts.append(f"{self.shot_bits}-bit shot")
        if self.gaussian_sigma:
            parts.append(f"gaussian sigma={self.gaussian_sigma:g}")
        return ", ".join(parts) or "none"


@dataclass(frozen=True)
class Measurement:
    """Detector image, H x (W + d(N-1))."""

    data: np.ndarray
    noise_meta: Optional[NoiseSpec] = None

    def __post_init__(self):
        data = _as_float(self.data)
        if data.ndim != 2:
            raise DimensionError(f"measurement must be rank 2, got shape {data.shape}", axis="rank")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class SensingOperator:
    """Matrix-free Phi: shifted mask per band plus the diagonal of Phi Phi^T."""

    shifted_mask: np.ndarray
    delta: np.ndarray = field(repr=False)
    shift_step: int

    @classmethod
    def from_mask(cls, mask: CodedMask, bands: int) -> "SensingOperator":
        if bands < 1:
            raise DimensionError(f"bands must be positive, got {bands}", axis="bands")
        h, w = mask.base.shape
        d = mask.shift_step
        shifted = np.zeros((h, sheared_width(w, bands, d), bands), dtype=mask.base.dtype)
        for n in range(bands):
            shifted[:, d * n:d * n + w, n] = mask.base
        delta = np.sum(shifted * shifted, axis=2)
        return cls(shifted, delta, d)

    @property
    def bands(self) -> int:
        return self.shifted_mask.shape[2]

    @property
    def measurement_shape(self) -> tuple[int, int]:
        return self.shifted_mask.shape[:2]

    def dense_matrix(self) -> np.ndarray:
        """Explicit Phi of shape (t, t*N). Column p*N + n is band n at detector pixel p."""
        t = self.delta.size
        n = self.bands
        dense = np.zeros((t, t * n), dtype=np.float64)
        dense[np.repeat(np.arange(t), n), np.arange(t * n)] = self.shifted_mask.reshape(-1)
        return dense


def shift_cube(cube: HsiCube, d: int) -> ShearedCube:
    """Translate band n right by d*n columns, zero elsewhere."""
    if d < 0:
        raise ConfigError(f"shift step must be >= 0, got {d}")
    h, w, bands = cube.data.shape
    out = np.zeros((h, sheared_width(w, bands, d), bands), dtype=cube.data.dtype)
    for n in range(bands):
        out[:, d * n:d * n + w, n] = cube.data[:, :, n]
    return ShearedCube(out, d)


def unshift_cube(sheared: ShearedCube, wavelengths: tuple = ()) -> HsiCube:
    """Inverse of ``shift_cube``: read band n back from columns [d*n, d*n + W)."""
    d, w = sheared.shift_step, sheared.width
    data = np.stack([sheared.data[:, d * n:d * n + w, n] for n in range(sheared.bands)], axis=2)
    return HsiCube(data, wavelengths)


def modulate(cube: HsiCube, mask: CodedMask) -> HsiCube:
    if mask.base.shape != cube.data.shape[:2]:
        axis = "height" if mask.base.shape[0] != cube.height else "width"
        raise DimensionError(
            f"mask extents {mask.base.shape} do not match cube {cube.data.shape[:2]}", axis=axis
        )
    return HsiCube(cube.data * mask.base[:, :, None], cube.wavelengths)


def integrate(sheared: ShearedCube) -> Measurement:
    return Measurement(np.sum(sheared.data, axis=2))


def _check_operator(shape: tuple, op: SensingOperator, what: str) -> None:
    if tuple(shape) != op.shifted_mask.shape[:len(shape)]:
        axis = "height" if shape[0] != op.shifted_mask.shape[0] else "width"
        raise DimensionError(
            f"{what} extents {tuple(shape)} do not match operator {op.shifted_mask.shape}", axis=axis
        )


def apply_phi(x: ShearedCube, op: SensingOperator) -> Measurement:
    """Phi x: per detector pixel, sum over bands of M_n * x_n."""
    _check_operator(x.data.shape, op, "sheared cube")
    return Measurement(np.sum(op.shifted_mask * x.data, axis=2))


def apply_phi_t(y: Measurement, op: SensingOperator) -> ShearedCube:
    """Phi^T y: band n is M_n * y."""
    _check_operator(y.data.shape, op, "measurement")
    return ShearedCube(op.shifted_mask * y.data[:, :, None], op.shift_step)


def phi_diag(op: SensingOperator) -> np.ndarray:
    """delta(p) = sum_n M_n(p)^2, the diagonal of Phi Phi^T."""
    return op.delta


def add_shot_noise(y: Measurement, bits: int, rng: np.random.Generator) -> Measurement:
    """Poisson photon noise for a detector with ``bits`` of dynamic range."""
    if bits < 1:
        raise ConfigError(f"shot-noise bit depth must be >= 1, got {bits}")
    if np.any(y.data < 0):
        raise DomainError("shot noise needs a nonnegative measurement")
    meta = NoiseSpec(shot_bits=bits)
    peak = float(y.data.max()) if y.data.size else 0.0
    if peak == 0.0:
        return Measurement(np.zeros_like(y.data), meta)
    scale = (2.0 ** bits - 1.0) / peak
    counts = rng.poisson(y.data * scale)
    return Measurement((counts / scale).astype(y.data.dtype), meta)


def forward(cube: HsiCube, mask: CodedMask, noise: Optional[NoiseSpec] = None,
            rng: Optional[np.random.Generator] = None) -> Measurement:
    """y = Phi x + n for the cube under ``mask``."""
    y = integrate(shift_cube(modulate(cube, mask), mask.shift_step))
    if noise is None or (not noise.shot_bits and not noise.gaussian_sigma):
        return y
    if rng is None:
        raise UsageError("noisy simulation needs a seeded generator")
    if noise.shot_bits:
        y = add_shot_noise(y, noise.shot_bits, rng)
    data = y.data
    if noise.gaussian_sigma:
        data = data + rng.normal(0.0, noise.gaussian_sigma, size=data.shape).astype(data.dtype)
    log.debug("simulated measurement %s with noise: %s", data.shape, noise.describe())
    return Measurement(data, noise)
