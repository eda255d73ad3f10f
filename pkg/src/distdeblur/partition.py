"""Block geometry, first-order interpolation weights and overlap bookkeeping.

Two coordinate systems are used throughout:

* observed coordinates index the sensor image, shape ``(image_h, image_w)``;
* estimate coordinates index the unknown image, which extends the observed
  one by ``margin = (psf_size - 1) // 2`` pixels on every side. Observed pixel
  ``(a, b)`` sits at estimate pixel ``(a + margin, b + margin)``.

A block owns an observed region ``O_i`` and an estimate region
``P_i = O_i`` dilated by ``margin``, which is exactly the support the
valid-region blur of ``O_i`` depends on.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import Region
from .psf import grid_coordinates

__all__ = [
    "REGIMES",
    "Block",
    "BlockLayout",
    "OverlapPair",
    "WeightField",
    "build_layout",
    "build_weights",
    "overlap_pairs",
    "manifest_text",
    "parse_manifest",
    "write_manifest",
    "read_manifest",
]

REGIMES = ("shift_invariant", "piecewise", "smooth_variant")


@dataclass(frozen=True)
class Block:
    index: int
    row: int
    col: int
    grid_point: tuple  # (y, x) in observed coordinates
    observed: Region
    estimate: Region
    neighbors: tuple = ()


@dataclass(frozen=True)
class _Axis:
    """1D partition: block extents ``[start, stop)``, grid points and ramps between neighbors."""

    extents: tuple
    grid: tuple
    ramps: tuple  # (p0, p1) per consecutive pair, observed coordinates

    def profile(self, k: int, t: np.ndarray) -> np.ndarray:
        """Weight of block ``k`` at observed positions ``t`` (may lie outside the image)."""
        w = np.ones_like(t, dtype=np.float64)
        if k > 0:
            w *= 1.0 - _fall(t, *self.ramps[k - 1])
        if k < len(self.extents) - 1:
            w *= _fall(t, *self.ramps[k])
        return w


def _fall(t, p0, p1):
    """1 before ``p0``, 0 after ``p1``, linear in between; a step when ``p0 == p1``."""
    if p1 == p0:
        return (t < p0).astype(np.float64)
    return np.clip((p1 - t) / (p1 - p0), 0.0, 1.0)


@dataclass(frozen=True)
class BlockLayout:
    image_h: int
    image_w: int
    psf_size: int
    regime: str
    overlap: int | None
    rows: int
    cols: int
    blocks: tuple
    axis_y: _Axis = field(repr=False)
    axis_x: _Axis = field(repr=False)

    @property
    def margin(self) -> int:
        return (self.psf_size - 1) // 2

    @property
    def observed_shape(self) -> tuple:
        return (self.image_h, self.image_w)

    @property
    def estimate_shape(self) -> tuple:
        return (self.image_h + 2 * self.margin, self.image_w + 2 * self.margin)

    @property
    def grid_y(self) -> tuple:
        return self.axis_y.grid

    @property
    def grid_x(self) -> tuple:
        return self.axis_x.grid

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def __getitem__(self, i) -> Block:
        return self.blocks[i]

    def shared_region(self, i: int, j: int) -> Region | None:
        """``P_i`` intersected with ``P_j`` in estimate coordinates."""
        return self.blocks[i].estimate.intersect(self.blocks[j].estimate)

    def coverage(self) -> np.ndarray:
        """Number of blocks whose estimate region contains each estimate pixel."""
        count = np.zeros(self.estimate_shape, dtype=np.int64)
        for b in self.blocks:
            count[b.estimate.slices] += 1
        return count


def _tile_axis(dim: int, count: int, overlap: int) -> _Axis:
    base, rem = divmod(dim, count)
    sizes = [base] * count
    sizes[0] += rem - rem // 2
    sizes[-1] += rem // 2
    bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    if count > 1 and overlap > min(sizes):
        raise ValueError(f"overlap {overlap} larger than block size {min(sizes)}")
    lo, hi = overlap // 2, overlap - overlap // 2
    extents, ramps = [], []
    for k in range(count):
        start = bounds[k] - (lo if k > 0 else 0)
        stop = bounds[k + 1] + (hi if k < count - 1 else 0)
        extents.append((int(start), int(stop)))
    for k in range(count - 1):
        b = bounds[k + 1]
        ramps.append((b - lo - 0.5, b + hi - 0.5))
    grid = tuple(int(bounds[k] + (sizes[k] - 1) // 2) for k in range(count))
    return _Axis(tuple(extents), grid, tuple(ramps))


def _smooth_axis(dim: int, count: int) -> _Axis:
    g = grid_coordinates(count, dim)
    if count == 1:
        return _Axis(((0, dim),), g, ())
    extents = []
    for k in range(count):
        start = g[k - 1] if k > 0 else 0
        stop = g[k + 1] + 1 if k < count - 1 else dim
        extents.append((start, stop))
    ramps = tuple((float(g[k]), float(g[k + 1])) for k in range(count - 1))
    return _Axis(tuple(extents), g, ramps)


def build_layout(image_h, image_w, grid_rows, grid_cols, psf_size,
                 regime="smooth_variant", overlap_override=None) -> BlockLayout:
    """Split an observed image into overlapping blocks.

    ``smooth_variant`` blocks span three consecutive grid points, so neighbors
    overlap by half a block. ``shift_invariant`` and ``piecewise`` use
    contiguous tiles grown so adjacent blocks share ``overlap_override`` pixels
    (default ``ceil(psf_size / 2) + 1``).
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if grid_rows < 1 or grid_cols < 1:
        raise ValueError(f"grid must be at least 1x1, got {grid_rows}x{grid_cols}")
    if grid_rows > image_h or grid_cols > image_w:
        raise ValueError(f"grid {grid_rows}x{grid_cols} larger than image {image_h}x{image_w}")
    if psf_size < 1 or psf_size % 2 == 0:
        raise ValueError(f"PSF size must be odd, got {psf_size}")

    overlap = None
    if regime == "smooth_variant":
        ay, ax = _smooth_axis(image_h, grid_rows), _smooth_axis(image_w, grid_cols)
    else:
        overlap = math.ceil(psf_size / 2) + 1 if overlap_override is None else int(overlap_override)
        if overlap < 0:
            raise ValueError(f"overlap must be nonnegative, got {overlap}")
        ay, ax = _tile_axis(image_h, grid_rows, overlap), _tile_axis(image_w, grid_cols, overlap)

    m = (psf_size - 1) // 2
    blocks = []
    for r, (y0, y1) in enumerate(ay.extents):
        for c, (x0, x1) in enumerate(ax.extents):
            obs = Region(y0, x0, y1 - y0, x1 - x0)
            # observed [y0, y1) maps to estimate [y0 + m, y1 + m), dilated by m
            est = Region(y0, x0, obs.height + 2 * m, obs.width + 2 * m)
            blocks.append(Block(len(blocks), r, c, (ay.grid[r], ax.grid[c]), obs, est))

    n = len(blocks)
    if n > 1:
        small = [b.index for b in blocks
                 if b.observed.height < 2 * psf_size or b.observed.width < 2 * psf_size]
        if small:
            warnings.warn(
                f"{len(small)} block(s) smaller than twice the PSF size ({2 * psf_size} px); "
                "local problems will be poorly determined",
                stacklevel=2,
            )

    nbrs = [[] for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if blocks[i].estimate.intersect(blocks[j].estimate) is not None:
                nbrs[i].append(j)
                nbrs[j].append(i)
    blocks = tuple(
        Block(b.index, b.row, b.col, b.grid_point, b.observed, b.estimate, tuple(sorted(nbrs[b.index])))
        for b in blocks
    )
    return BlockLayout(image_h, image_w, psf_size, regime, overlap,
                       grid_rows, grid_cols, blocks, ay, ax)


@dataclass(frozen=True)
class WeightField:
    """Per-block interpolation weights ``omega_i`` over each block's estimate region."""

    layout: BlockLayout
    weights: tuple  # arrays, one per block, shaped like block.estimate

    def __getitem__(self, i) -> np.ndarray:
        return self.weights[i]

    def __len__(self):
        return len(self.weights)

    def total(self) -> np.ndarray:
        """Sum of all weights on the global estimate domain, accumulated in block order."""
        acc = np.zeros(self.layout.estimate_shape)
        for b, w in zip(self.layout.blocks, self.weights):
            acc[b.estimate.slices] += w
        return acc

    def global_weight(self, i: int) -> np.ndarray:
        """``omega_i`` embedded in the estimate domain (zero outside ``P_i``)."""
        out = np.zeros(self.layout.estimate_shape)
        out[self.layout.blocks[i].estimate.slices] = self.weights[i]
        return out


def build_weights(layout: BlockLayout) -> WeightField:
    """Separable piecewise-linear weights forming a partition of unity.

    Smooth-variant blocks get a hat equal to 1 at their grid point and 0 at the
    neighboring grid points; tiled regimes ramp only across the shared strip.
    Border blocks are clamped to 1 out to the edge of the estimate domain.
    """
    m = layout.margin
    out = []
    for b in layout.blocks:
        ty = np.arange(b.estimate.top, b.estimate.bottom, dtype=np.float64) - m
        tx = np.arange(b.estimate.left, b.estimate.right, dtype=np.float64) - m
        wy = layout.axis_y.profile(b.row, ty)
        wx = layout.axis_x.profile(b.col, tx)
        out.append(np.outer(wy, wx))
    return WeightField(layout, tuple(out))


@dataclass(frozen=True)
class OverlapPair:
    i: int
    j: int
    shared: Region  # estimate coordinates
    local_i: Region  # same pixels in block i's local coordinates
    local_j: Region


def overlap_pairs(layout: BlockLayout) -> list:
    """All block pairs ``i < j`` whose estimate regions intersect."""
    pairs = []
    for b in layout.blocks:
        for j in b.neighbors:
            if j <= b.index:
                continue
            shared = layout.shared_region(b.index, j)
            pairs.append(OverlapPair(
                b.index, j, shared,
                shared.relative_to(b.estimate),
                shared.relative_to(layout.blocks[j].estimate),
            ))
    return pairs


# -- manifest -----------------------------------------------------------------


def _fmt_region(r: Region) -> str:
    return f"{r.top},{r.left},{r.height},{r.width}"


def _parse_region(s: str) -> Region:
    return Region(*(int(v) for v in s.split(",")))


def manifest_text(layout: BlockLayout, addresses=None) -> str:
    """Plain key=value manifest: a layout header then one ``[block k]`` section per block."""
    lines = [
        f"image_h={layout.image_h}",
        f"image_w={layout.image_w}",
        f"psf_size={layout.psf_size}",
        f"regime={layout.regime}",
        f"overlap={'' if layout.overlap is None else layout.overlap}",
        f"grid_rows={layout.rows}",
        f"grid_cols={layout.cols}",
    ]
    for b in layout.blocks:
        lines += [
            "",
            f"[block {b.index}]",
            f"row={b.row}",
            f"col={b.col}",
            f"grid_point={b.grid_point[0]},{b.grid_point[1]}",
            f"observed={_fmt_region(b.observed)}",
            f"estimate={_fmt_region(b.estimate)}",
            "neighbors=" + ",".join(map(str, b.neighbors)),
        ]
        if addresses is not None:
            host, port = addresses[b.index]
            lines.append(f"address={host}:{port}")
    return "\n".join(lines) + "\n"


def write_manifest(path, layout: BlockLayout, addresses=None) -> None:
    Path(path).write_text(manifest_text(layout, addresses))


def read_manifest(path):
    """Rebuild the layout from a manifest file; returns ``(layout, addresses_or_None)``."""
    return parse_manifest(Path(path).read_text())


def parse_manifest(text: str):
    header, sections, current = {}, {}, None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("[block"):
            current = int(line[len("[block"):-1])
            sections[current] = {}
            continue
        key, value = line.split("=", 1)
        (header if current is None else sections[current])[key] = value
    layout = build_layout(
        int(header["image_h"]), int(header["image_w"]),
        int(header["grid_rows"]), int(header["grid_cols"]),
        int(header["psf_size"]), header["regime"],
        None if header["overlap"] == "" else int(header["overlap"]),
    )
    for k, sec in sections.items():
        b = layout.blocks[k]
        if (_parse_region(sec["observed"]) != b.observed
                or _parse_region(sec["estimate"]) != b.estimate):
            raise ValueError(f"manifest block {k} disagrees with the recomputed layout")
    addresses = None
    if sections and all("address" in s for s in sections.values()):
        addresses = {}
        for k, sec in sections.items():
            host, port = sec["address"].rsplit(":", 1)
            addresses[k] = (host, int(port))
    return layout, addresses
