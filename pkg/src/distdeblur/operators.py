"""FFT blur operators: circular convolution, valid-region local blur, shift-variant composite.

Kernel centering: the PSF center is rolled to index ``(0, 0)`` before the forward
transform, so ``circular_convolve(img, delta)`` is the identity and the valid
region of a block is its interior trimmed by ``(psf_size - 1) // 2`` per side.
"""

from __future__ import annotations

import numpy as np
from scipy import fft as sfft

from .imaging import Region
from .partition import BlockLayout, WeightField
from .psf import Psf

__all__ = [
    "circular_convolve",
    "LocalBlurOperator",
    "ShiftVariantOperator",
    "operator_norm",
]


def _transfer(kernel: np.ndarray, fft_shape, shift: int = 0) -> np.ndarray:
    """Real FFT of the kernel with its center at ``(-shift, -shift)`` (cyclically)."""
    p = kernel.shape[0]
    c = (p - 1) // 2
    padded = np.zeros(fft_shape)
    padded[:p, :p] = kernel
    padded = np.roll(padded, (-c - shift, -c - shift), axis=(0, 1))
    return sfft.rfft2(padded)


def circular_convolve(img: np.ndarray, psf: Psf) -> np.ndarray:
    """Cyclic convolution of ``img`` with the centered ``psf``, same size as ``img``."""
    if psf.size > img.shape[0] or psf.size > img.shape[1]:
        raise ValueError(f"PSF of size {psf.size} larger than image {img.shape}")
    t = _transfer(psf.kernel, img.shape)
    return sfft.irfft2(sfft.rfft2(img) * t, s=img.shape)


class LocalBlurOperator:
    """Valid-region blur of an estimate block: circular convolution then central chop.

    Every output pixel is a complete (non-wrapped) convolution sum, so the
    operator maps an ``(h, w)`` estimate block to an ``(h - p + 1, w - p + 1)``
    observed block.
    """

    def __init__(self, psf: Psf, estimate_shape, pad_fast: bool = False):
        eh, ew = (int(v) for v in estimate_shape)
        m = psf.half_width
        if eh <= 2 * m or ew <= 2 * m:
            raise ValueError(f"estimate block {eh}x{ew} too small for PSF of size {psf.size}")
        self.psf = psf
        self.margin = m
        self.estimate_shape = (eh, ew)
        self.observed_shape = (eh - 2 * m, ew - 2 * m)
        if pad_fast:
            self.fft_shape = (sfft.next_fast_len(eh, real=True), sfft.next_fast_len(ew, real=True))
        else:
            self.fft_shape = (eh, ew)
        self.transfer = _transfer(psf.kernel, self.fft_shape)
        # the valid region starts at (m, m); shifting the kernel by -m moves it to the
        # origin, and the adjoint's zero-embedding at (m, m) becomes plain end padding
        self._shifted = _transfer(psf.kernel, self.fft_shape, m)
        self._shifted_conj = np.conj(self._shifted)
        oh, ow = self.observed_shape
        self._valid = (slice(0, oh), slice(0, ow))
        self._crop = None if self.fft_shape == self.estimate_shape else (slice(0, eh), slice(0, ew))

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.shape != self.estimate_shape:
            raise ValueError(f"expected estimate block {self.estimate_shape}, got {x.shape}")
        full = sfft.irfft2(sfft.rfft2(x, s=self.fft_shape) * self._shifted, s=self.fft_shape)
        return full[self._valid]

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        if r.shape != self.observed_shape:
            raise ValueError(f"expected observed block {self.observed_shape}, got {r.shape}")
        full = sfft.irfft2(sfft.rfft2(r, s=self.fft_shape) * self._shifted_conj, s=self.fft_shape)
        return full if self._crop is None else full[self._crop].copy()

    __call__ = apply


class ShiftVariantOperator:
    """Smooth shift-variant blur as a weighted sum of local shift-invariant blurs.

    Each block's weight field is blurred by its own PSF; the block support is
    padded by the PSF half-width (clipped at the image border) so blur spilling
    out of a block is not lost and the operator is an exact PSF interpolation.
    """

    def __init__(self, layout: BlockLayout, psfs, weights: WeightField, pad_fast: bool = False):
        if len(psfs) != len(layout) or len(weights) != len(layout):
            raise ValueError(
                f"layout has {len(layout)} blocks but got {len(psfs)} PSFs and {len(weights)} weights"
            )
        if any(p.size != layout.psf_size for p in psfs):
            raise ValueError("PSF sizes disagree with the layout")
        m = layout.margin
        self.layout = layout
        self.observed_shape = layout.observed_shape
        self.estimate_shape = layout.estimate_shape
        whole = Region.whole(layout.observed_shape)
        self.parts = []
        for b, psf in zip(layout.blocks, psfs):
            obs = b.observed.dilate(m).intersect(whole)
            est = Region(obs.top, obs.left, obs.height + 2 * m, obs.width + 2 * m)
            w = weights.global_weight(b.index)[est.slices].copy()
            self.parts.append((obs, est, w, LocalBlurOperator(psf, est.shape, pad_fast)))

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.shape != self.estimate_shape:
            raise ValueError(f"expected estimate image {self.estimate_shape}, got {x.shape}")
        y = np.zeros(self.observed_shape)
        for obs, est, w, op in self.parts:
            y[obs.slices] += op.apply(w * x[est.slices])
        return y

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        if r.shape != self.observed_shape:
            raise ValueError(f"expected observed image {self.observed_shape}, got {r.shape}")
        out = np.zeros(self.estimate_shape)
        for obs, est, w, op in self.parts:
            out[est.slices] += w * op.adjoint(r[obs.slices])
        return out

    __call__ = apply


def operator_norm(op, iterations: int = 50, seed: int = 0) -> float:
    """Largest singular value estimate by power iteration on ``op.adjoint(op.apply(.))``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.estimate_shape)
    x /= np.linalg.norm(x)
    s = 0.0
    for _ in range(iterations):
        z = op.adjoint(op.apply(x))
        s = np.linalg.norm(z)
        if s == 0:
            return 0.0
        x = z / s
    return float(np.sqrt(s))
