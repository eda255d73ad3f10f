"""Dense 2D images, rectangular regions and the chop/embed operator pair.

Images are plain ``float64`` numpy arrays of shape ``(height, width)``.
Whenever an image is viewed as a vector, pixels are ordered row-major
(C order), so ``vec(img)[r * width + c] == img[r, c]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Region",
    "as_image",
    "chop",
    "embed_zero_pad",
    "weighted_norm_sq",
    "vec",
    "unvec",
    "read_raw",
    "write_raw",
    "read_png",
    "write_png",
]

RAW_MAGIC = b"IMGF"
_RAW_HEADER = struct.Struct("<4sIII")  # magic, height, width, reserved


@dataclass(frozen=True)
class Region:
    """Axis-aligned pixel rectangle: rows ``top .. top+height-1``, cols ``left .. left+width-1``."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"region must be at least 1x1, got {self.height}x{self.width}")

    @property
    def bottom(self) -> int:
        """One past the last row."""
        return self.top + self.height

    @property
    def right(self) -> int:
        """One past the last column."""
        return self.left + self.width

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def slices(self) -> tuple[slice, slice]:
        return (slice(self.top, self.bottom), slice(self.left, self.right))

    def intersect(self, other: "Region") -> "Region | None":
        top, left = max(self.top, other.top), max(self.left, other.left)
        bottom, right = min(self.bottom, other.bottom), min(self.right, other.right)
        if bottom <= top or right <= left:
            return None
        return Region(top, left, bottom - top, right - left)

    def contains(self, other: "Region") -> bool:
        return (
            other.top >= self.top
            and other.left >= self.left
            and other.bottom <= self.bottom
            and other.right <= self.right
        )

    def relative_to(self, origin: "Region") -> "Region":
        """Same rectangle expressed in the local coordinates of ``origin``."""
        return Region(self.top - origin.top, self.left - origin.left, self.height, self.width)

    def dilate(self, margin: int) -> "Region":
        return Region(self.top - margin, self.left - margin,
                      self.height + 2 * margin, self.width + 2 * margin)

    def shift(self, dy: int, dx: int) -> "Region":
        return Region(self.top + dy, self.left + dx, self.height, self.width)

    @classmethod
    def whole(cls, shape) -> "Region":
        return cls(0, 0, int(shape[0]), int(shape[1]))


def as_image(data) -> np.ndarray:
    """Validate and convert to a C-contiguous 2D float64 array."""
    img = np.ascontiguousarray(data, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"image must be 2D, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(img))[0])
        raise ValueError(f"image has a non-finite value at pixel {bad}")
    return img


def _check_inside(r: Region, shape, what="image"):
    h, w = shape
    for name, value, lo, hi in (
        ("top", r.top, 0, h),
        ("left", r.left, 0, w),
        ("bottom", r.bottom, 0, h),
        ("right", r.right, 0, w),
    ):
        if value < lo or value > hi:
            raise IndexError(
                f"region {r} out of bounds of {what} {h}x{w}: {name}={value} not in [{lo}, {hi}]"
            )


def chop(img: np.ndarray, r: Region) -> np.ndarray:
    """Copy of the pixels of ``img`` inside ``r``."""
    _check_inside(r, img.shape)
    return img[r.slices].copy()


def embed_zero_pad(img: np.ndarray, r: Region, canvas_h: int, canvas_w: int) -> np.ndarray:
    """Place ``img`` at ``r`` on a zero canvas. Adjoint of :func:`chop`."""
    if img.shape != r.shape:
        raise ValueError(f"image shape {img.shape} does not match region size {r.shape}")
    _check_inside(r, (canvas_h, canvas_w), what="canvas")
    out = np.zeros((canvas_h, canvas_w))
    out[r.slices] = img
    return out


def weighted_norm_sq(a: np.ndarray, w) -> float:
    """``sum(w * a**2)``; ``w`` may be a scalar or a per-pixel array."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim and w.shape != a.shape:
        raise ValueError(f"weight shape {w.shape} does not match image shape {a.shape}")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    return float(np.sum(w * a * a))


def vec(img: np.ndarray) -> np.ndarray:
    """Row-major lexicographic vector view."""
    return np.ascontiguousarray(img).reshape(-1)


def unvec(v: np.ndarray, shape) -> np.ndarray:
    return np.asarray(v).reshape(shape)


# -- file formats -------------------------------------------------------------


def write_raw(path, img: np.ndarray) -> None:
    """Bit-exact float64 storage: 16-byte little-endian header then row-major pixels."""
    img = np.ascontiguousarray(img, dtype="<f8")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(RAW_MAGIC, h, w, 0))
        fh.write(img.tobytes(order="C"))


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _RAW_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, h, w, _ = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = data[_RAW_HEADER.size:]
    if len(body) != 8 * h * w:
        raise ValueError(f"{path}: expected {8 * h * w} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(h, w).astype(np.float64)


def read_png(path, photon_max: float = 6000.0) -> np.ndarray:
    """Load an 8- or 16-bit grayscale PNG, scaling full-scale to ``photon_max``."""
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            full = 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            full = 255.0
    return arr * (photon_max / full)


def write_png(path, img: np.ndarray, photon_max: float | None = None) -> None:
    """Write a 16-bit grayscale PNG; values are clipped to ``[0, photon_max]``."""
    from PIL import Image as PILImage

    top = float(photon_max) if photon_max else float(max(img.max(), 1e-12))
    q = np.round(np.clip(img / top, 0.0, 1.0) * 65535.0).astype(np.uint16)
    PILImage.fromarray(q).save(path)
