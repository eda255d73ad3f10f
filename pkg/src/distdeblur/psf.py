"""Point-spread function generators: Airy (circular pupil) and axis-aligned Gaussian."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import read_raw, write_raw

__all__ = [
    "Psf",
    "PsfGrid",
    "airy_psf",
    "gaussian_psf",
    "delta_psf",
    "grid_coordinates",
    "shift_variant_psf_grid",
    "uniform_psf_grid",
    "fwhm_to_sigma",
    "save_psf_grid",
    "load_psf_grid",
]

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


def fwhm_to_sigma(fwhm: float) -> float:
    return fwhm / FWHM_PER_SIGMA


@dataclass(frozen=True)
class Psf:
    """Odd-sized, nonnegative, unit-sum kernel centered at ``(size - 1) // 2``."""

    kernel: np.ndarray

    def __post_init__(self):
        k = self.kernel
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
            raise ValueError(f"PSF must be square with odd side, got shape {k.shape}")
        if np.any(k < 0):
            raise ValueError("PSF has negative entries")
        if abs(k.sum() - 1.0) > 1e-12:
            raise ValueError(f"PSF must sum to 1, sums to {k.sum()!r}")

    @classmethod
    def normalized(cls, kernel) -> "Psf":
        k = np.array(kernel, dtype=np.float64)
        k = np.maximum(k, 0.0)
        return cls(k / k.sum())

    @property
    def size(self) -> int:
        return self.kernel.shape[0]

    @property
    def center(self) -> int:
        return (self.size - 1) // 2

    @property
    def half_width(self) -> int:
        return (self.size - 1) // 2


@dataclass(frozen=True)
class PsfGrid:
    """PSFs sampled at a rows x cols grid of pixel positions of the observed image."""

    psfs: tuple  # rows x cols nested tuple of Psf
    grid_y: tuple
    grid_x: tuple

    def __post_init__(self):
        sizes = {p.size for row in self.psfs for p in row}
        if len(sizes) != 1:
            raise ValueError(f"all PSFs in a grid must share one size, got {sorted(sizes)}")
        if len(self.psfs) != len(self.grid_y) or any(len(r) != len(self.grid_x) for r in self.psfs):
            raise ValueError("PSF array does not match grid coordinates")

    @property
    def rows(self) -> int:
        return len(self.grid_y)

    @property
    def cols(self) -> int:
        return len(self.grid_x)

    @property
    def support(self) -> int:
        return self.psfs[0][0].size

    def at(self, row: int, col: int) -> Psf:
        return self.psfs[row][col]


def _check_support(support: int):
    if support < 1 or support % 2 == 0:
        raise ValueError(f"PSF support must be a positive odd integer, got {support}")


def delta_psf(support: int = 1) -> Psf:
    _check_support(support)
    k = np.zeros((support, support))
    k[support // 2, support // 2] = 1.0
    return Psf(k)


def airy_psf(support: int, aperture_radius: float) -> Psf:
    """Diffraction PSF ``|IDFT(pupil)|**2`` of a binary disk of ``aperture_radius`` DFT samples.

    The pupil lives on the ``support x support`` frequency grid, centered at zero
    frequency, so the result is real-even and peaks at the kernel center.
    """
    _check_support(support)
    if aperture_radius <= 0:
        raise ValueError(f"aperture radius must be positive, got {aperture_radius}")
    if aperture_radius >= support / 2:
        raise ValueError(
            f"aperture radius {aperture_radius} >= support/2 = {support / 2}: pupil exceeds the grid"
        )
    f = np.fft.fftfreq(support) * support  # signed integer frequencies
    pupil = (f[:, None] ** 2 + f[None, :] ** 2 <= aperture_radius**2).astype(np.float64)
    field = np.fft.ifft2(pupil)
    intensity = np.fft.fftshift(field.real**2 + field.imag**2)
    # enforce exact point symmetry lost to FFT rounding
    intensity = 0.5 * (intensity + intensity[::-1, ::-1])
    intensity = 0.5 * (intensity + intensity.T)
    return Psf.normalized(intensity)


def gaussian_psf(support: int, fwhm_y: float, fwhm_x: float) -> Psf:
    """Axis-aligned Gaussian sampled at pixel centers."""
    _check_support(support)
    if fwhm_y <= 0 or fwhm_x <= 0:
        raise ValueError(f"FWHM must be positive, got ({fwhm_y}, {fwhm_x})")
    t = np.arange(support) - support // 2
    gy = np.exp(-0.5 * (t / fwhm_to_sigma(fwhm_y)) ** 2)
    gx = np.exp(-0.5 * (t / fwhm_to_sigma(fwhm_x)) ** 2)
    return Psf.normalized(np.outer(gy / gy.sum(), gx / gx.sum()))


def grid_coordinates(count: int, dim: int) -> tuple:
    """Equidistant grid positions spanning ``[0, dim - 1]``: ``round(k (dim-1) / (count-1))``."""
    if count < 1:
        raise ValueError("grid needs at least one point")
    if count > dim:
        raise ValueError(f"grid of {count} points does not fit {dim} pixels")
    if count == 1:
        return ((dim - 1) // 2,)
    return tuple(int(math.floor(k * (dim - 1) / (count - 1) + 0.5)) for k in range(count))


def uniform_psf_grid(psf: Psf, rows: int, cols: int, image_h: int, image_w: int) -> PsfGrid:
    """The same PSF at every grid point (shift-invariant blur)."""
    return PsfGrid(
        psfs=tuple(tuple(psf for _ in range(cols)) for _ in range(rows)),
        grid_y=grid_coordinates(rows, image_h),
        grid_x=grid_coordinates(cols, image_w),
    )


def shift_variant_psf_grid(rows, cols, image_h, image_w, support, fwhm_center, fwhm_corner,
                           grid_y=None, grid_x=None) -> PsfGrid:
    """Gaussian PSFs whose FWHM grows linearly with normalized distance from the image center.

    ``fwhm_center`` and ``fwhm_corner`` are ``(fwhm_y, fwhm_x)`` pairs; the corner
    value is reached at the image corners. PSFs are sampled at the regular grid
    of :func:`grid_coordinates` unless explicit ``grid_y``/``grid_x`` are given.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"grid must be at least 1x1, got {rows}x{cols}")
    fc = np.asarray(fwhm_center, dtype=np.float64)
    fk = np.asarray(fwhm_corner, dtype=np.float64)
    if np.any(fc <= 0) or np.any(fk <= 0):
        raise ValueError("FWHM parameters must be positive")
    cy, cx = (image_h - 1) / 2.0, (image_w - 1) / 2.0
    if grid_y is None:
        gy = grid_coordinates(rows, image_h)
        # nominal (unrounded) positions so the middle point of an odd grid sits exactly at the center
        ny = (np.arange(rows) - (rows - 1) / 2.0) * ((image_h - 1) / max(rows - 1, 1))
    else:
        gy = tuple(int(v) for v in grid_y)
        ny = np.asarray(gy, dtype=np.float64) - cy
    if grid_x is None:
        gx = grid_coordinates(cols, image_w)
        nx = (np.arange(cols) - (cols - 1) / 2.0) * ((image_w - 1) / max(cols - 1, 1))
    else:
        gx = tuple(int(v) for v in grid_x)
        nx = np.asarray(gx, dtype=np.float64) - cx
    if len(gy) != rows or len(gx) != cols:
        raise ValueError("explicit grid coordinates do not match the grid size")
    if rows == 1:
        ny = np.zeros(1)
    if cols == 1:
        nx = np.zeros(1)
    rmax = math.hypot(cy, cx)
    radial = np.hypot(ny[:, None], nx[None, :]) / rmax if rmax > 0 else np.zeros((rows, cols))
    cache = {}
    psfs = []
    for r in range(rows):
        row = []
        for c in range(cols):
            fy, fx = fc + (fk - fc) * radial[r, c]
            key = (float(fy), float(fx))
            if key not in cache:
                cache[key] = gaussian_psf(support, *key)
            row.append(cache[key])
        psfs.append(tuple(row))
    return PsfGrid(psfs=tuple(psfs), grid_y=gy, grid_x=gx)


def save_psf_grid(stem, grid: PsfGrid) -> None:
    """Write ``<stem>.raw`` (PSF mosaic, row-major by grid cell) and ``<stem>.txt`` header."""
    stem = Path(stem)
    s = grid.support
    mosaic = np.zeros((grid.rows * s, grid.cols * s))
    for r in range(grid.rows):
        for c in range(grid.cols):
            mosaic[r * s:(r + 1) * s, c * s:(c + 1) * s] = grid.at(r, c).kernel
    write_raw(stem.with_suffix(".raw"), mosaic)
    lines = [
        f"rows={grid.rows}",
        f"cols={grid.cols}",
        f"support={s}",
        "grid_y=" + ",".join(map(str, grid.grid_y)),
        "grid_x=" + ",".join(map(str, grid.grid_x)),
    ]
    stem.with_suffix(".txt").write_text("\n".join(lines) + "\n")


def load_psf_grid(stem) -> PsfGrid:
    stem = Path(stem)
    meta = dict(
        line.split("=", 1) for line in stem.with_suffix(".txt").read_text().splitlines() if "=" in line
    )
    rows, cols, s = int(meta["rows"]), int(meta["cols"]), int(meta["support"])
    mosaic = read_raw(stem.with_suffix(".raw"))
    psfs = tuple(
        tuple(Psf(mosaic[r * s:(r + 1) * s, c * s:(c + 1) * s].copy()) for c in range(cols))
        for r in range(rows)
    )
    return PsfGrid(
        psfs=psfs,
        grid_y=tuple(int(v) for v in meta["grid_y"].split(",")),
        grid_x=tuple(int(v) for v in meta["grid_x"].split(",")),
    )
