"""2D image construction from volumes: stitching, ROI tiles, downsampling.

Layout convention, shared by every routine here: an axial slice at depth z is
drawn with image row = voxel y and image column = voxel x, and slices fill
grid cells row-major in ascending-z order.  Slice k of ``slice_indices`` goes
to flat cell k (cells are numbered row-major, 0-based); cells listed in
``removed_cells`` stay at zero so glyph symbols can be drawn there later.

Pre-downsample images carry provenance: for every pixel that displays a
voxel, the (x, y, z) coordinate it came from.  Downsampling mixes source
pixels, so it drops provenance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FormatError, LabelVolume, Volume3D

IMG_MAGIC = b"IMG1"
IMG_HEADER_SIZE = 12


class LayoutError(ValueError):
    pass


class ProvenanceError(ValueError):
    pass


class CanvasOverflowError(ValueError):
    """ROI tiles exceed the canvas; carries the size that would fit."""

    def __init__(self, required: tuple[int, int], canvas: tuple[int, int]):
        super().__init__(
            f"tiles need a {required[0]}x{required[1]} canvas, "
            f"got {canvas[0]}x{canvas[1]}")
        self.required = required


@dataclass
class Image2D:
    """Single-channel float image; values in [0, 1], row-major.

    ``provenance`` (when present) is an (h, w, 3) int32 array holding the
    source voxel (x, y, z) per pixel, or -1 where no voxel is displayed.
    """

    width: int
    height: int
    pixels: np.ndarray  # (height, width) float32
    provenance: np.ndarray | None = None

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width):
            raise ValueError(
                f"pixel array {self.pixels.shape} != (h, w) = "
                f"({self.height}, {self.width})")
        if self.pixels.dtype != np.float32:
            self.pixels = self.pixels.astype(np.float32)
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0, 1]: [{lo}, {hi}]")
        if self.provenance is not None and self.provenance.shape != (self.height, self.width, 3):
            raise ValueError("provenance shape must be (h, w, 3)")


@dataclass(frozen=True)
class StitchSpec:
    """Grid layout for stitching axial slices into one image."""

    grid: tuple[int, int]  # (rows, cols)
    slice_shape: tuple[int, int]  # (ny, nx): cell height, cell width
    slice_indices: tuple[int, ...]  # ascending z
    removed_cells: tuple[int, ...] = ()  # flat cell indices freed for glyphs

    def __post_init__(self):
        rows, cols = self.grid
        if rows * cols < len(self.slice_indices):
            raise LayoutError(
                f"{rows}x{cols} grid cannot hold {len(self.slice_indices)} slices")
        if list(self.slice_indices) != sorted(set(self.slice_indices)):
            raise LayoutError("slice_indices must be strictly ascending")
        for cell in self.removed_cells:
            if not 0 <= cell < rows * cols:
                raise LayoutError(f"removed cell {cell} outside grid")

    @property
    def image_shape(self) -> tuple[int, int]:
        rows, cols = self.grid
        ny, nx = self.slice_shape
        return rows * ny, cols * nx

    def cell_origin(self, cell: int) -> tuple[int, int]:
        rows, cols = self.grid
        ny, nx = self.slice_shape
        r, c = divmod(cell, cols)
        return r * ny, c * nx

    @classmethod
    def for_volume(cls, dims: tuple[int, int, int], grid: tuple[int, int],
                   slice_indices: tuple[int, ...] | None = None,
                   removed_cells: tuple[int, ...] = ()) -> "StitchSpec":
        nx, ny, nz = dims
        if slice_indices is None:
            slice_indices = tuple(range(nz))
        return cls(grid=grid, slice_shape=(ny, nx),
                   slice_indices=slice_indices, removed_cells=removed_cells)


def stitch(volume: Volume3D, spec: StitchSpec) -> Image2D:
    """Stitch axial slices into a grid image with full voxel provenance."""
    nx, ny, nz = volume.dims
    if spec.slice_shape != (ny, nx):
        raise LayoutError(
            f"spec slice shape {spec.slice_shape} != volume slice ({ny}, {nx})")
    for z in spec.slice_indices:
        if not 0 <= z < nz:
            raise LayoutError(f"slice index {z} outside volume depth {nz}")
    h, w = spec.image_shape
    pixels = np.zeros((h, w), dtype=np.float32)
    prov = np.full((h, w, 3), -1, dtype=np.int32)
    xs, ys = np.meshgrid(np.arange(nx), np.arange(ny))  # (ny, nx)
    removed = set(spec.removed_cells)
    for cell, z in enumerate(spec.slice_indices):
        if cell in removed:
            continue
        r0, c0 = spec.cell_origin(cell)
        pixels[r0:r0 + ny, c0:c0 + nx] = volume.data[:, :, z].T
        prov[r0:r0 + ny, c0:c0 + nx, 0] = xs
        prov[r0:r0 + ny, c0:c0 + nx, 1] = ys
        prov[r0:r0 + ny, c0:c0 + nx, 2] = z
    return Image2D(width=w, height=h, pixels=pixels, provenance=prov)


def pixel_of_voxel(spec: StitchSpec, voxel: tuple[int, int, int]) -> tuple[int, int]:
    """(row, col) of a voxel in the stitched layout; errors if not displayed."""
    x, y, z = voxel
    try:
        cell = spec.slice_indices.index(z)
    except ValueError:
        raise ProvenanceError(f"voxel z={z} not in any selected slice") from None
    if cell in spec.removed_cells:
        raise ProvenanceError(f"slice z={z} occupies removed cell {cell}")
    ny, nx = spec.slice_shape
    if not (0 <= x < nx and 0 <= y < ny):
        raise ProvenanceError(f"voxel ({x}, {y}) outside slice extent")
    r0, c0 = spec.cell_origin(cell)
    return r0 + y, c0 + x


def voxel_of_pixel(image: Image2D, pixel: tuple[int, int]) -> tuple[int, int, int]:
    """Source voxel (x, y, z) of a pre-downsample pixel."""
    if image.provenance is None:
        raise ProvenanceError("image carries no provenance (downsampled?)")
    r, c = pixel
    if not (0 <= r < image.height and 0 <= c < image.width):
        raise ProvenanceError(f"pixel ({r}, {c}) outside image")
    x, y, z = (int(v) for v in image.provenance[r, c])
    if x < 0:
        raise ProvenanceError(f"pixel ({r}, {c}) displays no voxel")
    return x, y, z


def _pool_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) area-overlap weights; each output row sums to 1."""
    if dst > src:
        raise ValueError(f"target {dst} exceeds source {src}")
    if dst <= 0:
        raise ValueError("target dims must be positive")
    weights = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        for r in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            weights[i, r] = min(hi, r + 1) - max(lo, r)
    return weights / scale


def downsample(image: Image2D, target_w: int, target_h: int) -> Image2D:
    """Area-average pooling to (target_h, target_w); provenance is dropped."""
    wr = _pool_weights(image.height, target_h)
    wc = _pool_weights(image.width, target_w)
    out = wr @ image.pixels.astype(np.float64) @ wc.T
    out = np.clip(out, 0.0, 1.0)
    return Image2D(width=target_w, height=target_h,
                   pixels=out.astype(np.float32), provenance=None)


# ---------------------------------------------------------------------------
# ROI images


@dataclass(frozen=True)
class RoiImageSpec:
    """Tile layout for ROI images.

    ``roi_labels`` is in importance-rank order; tiles are emitted per ROI in
    that order, per slice ascending in z, and shelf-packed left-to-right,
    top-to-bottom with ``tile_gap`` pixels of separation.  ``reserved_bottom``
    rows at the canvas bottom are kept free (glyph strip for hybrid images).
    """

    roi_labels: tuple[int, ...]
    canvas: tuple[int, int]  # (height, width)
    tile_gap: int = 1
    reserved_bottom: int = 0

    def __post_init__(self):
        if len(set(self.roi_labels)) != len(self.roi_labels):
            raise LayoutError("roi_labels must be distinct")
        if self.reserved_bottom >= self.canvas[0]:
            raise LayoutError("reserved strip swallows the whole canvas")


@dataclass(frozen=True)
class RoiTilePlan:
    """Precomputed tile geometry for one (atlas, spec) pair."""

    spec: RoiImageSpec
    # per tile: (label, z, x0, x1, y0, y1, row0, col0)
    tiles: tuple[tuple[int, int, int, int, int, int, int, int], ...]


def plan_roi_tiles(atlas: LabelVolume, spec: RoiImageSpec) -> RoiTilePlan:
    """Lay out every (ROI, slice) crop on the canvas; errors on overflow.

    The layout depends only on the atlas and spec, so one plan serves a whole
    cohort sharing the atlas.
    """
    for label in spec.roi_labels:
        if label not in atlas.label_names or not np.any(atlas.labels == label):
            raise LayoutError(f"ROI {label} absent or empty in atlas")
    canvas_h, canvas_w = spec.canvas
    usable_h = canvas_h - spec.reserved_bottom
    gap = spec.tile_gap
    crops = []
    for label in spec.roi_labels:
        mask = atlas.labels == label
        zs = np.flatnonzero(mask.any(axis=(0, 1)))
        for z in zs:
            sl = mask[:, :, z]
            xs = np.flatnonzero(sl.any(axis=1))
            ys = np.flatnonzero(sl.any(axis=0))
            crops.append((int(label), int(z), int(xs[0]), int(xs[-1]) + 1,
                          int(ys[0]), int(ys[-1]) + 1))
    tiles = []
    cur_row, cur_col, shelf_h = 0, 0, 0
    for (label, z, x0, x1, y0, y1) in crops:
        th, tw = y1 - y0, x1 - x0
        if tw > canvas_w:
            raise CanvasOverflowError((usable_h, tw), spec.canvas)
        if cur_col + tw > canvas_w:
            cur_row += shelf_h + gap
            cur_col, shelf_h = 0, 0
        if cur_row + th > usable_h:
            required = _required_canvas(crops, canvas_w, gap) + spec.reserved_bottom
            raise CanvasOverflowError((required, canvas_w), spec.canvas)
        tiles.append((label, z, x0, x1, y0, y1, cur_row, cur_col))
        cur_col += tw + gap
        shelf_h = max(shelf_h, th)
    return RoiTilePlan(spec=spec, tiles=tuple(tiles))


def _required_canvas(crops, canvas_w: int, gap: int) -> int:
    cur_row, cur_col, shelf_h = 0, 0, 0
    for (_, _, x0, x1, y0, y1) in crops:
        th, tw = y1 - y0, x1 - x0
        if cur_col + tw > canvas_w:
            cur_row += shelf_h + gap
            cur_col, shelf_h = 0, 0
        cur_col += tw + gap
        shelf_h = max(shelf_h, th)
    return cur_row + shelf_h


def roi_image(volume: Volume3D, atlas: LabelVolume, spec: RoiImageSpec,
              plan: RoiTilePlan | None = None) -> Image2D:
    """Render ROI crops (non-ROI pixels zeroed) onto the tile canvas."""
    if volume.dims != atlas.dims:
        raise LayoutError(f"volume dims {volume.dims} != atlas dims {atlas.dims}")
    if plan is None:
        plan = plan_roi_tiles(atlas, spec)
    canvas_h, canvas_w = spec.canvas
    pixels = np.zeros((canvas_h, canvas_w), dtype=np.float32)
    prov = np.full((canvas_h, canvas_w, 3), -1, dtype=np.int32)
    for (label, z, x0, x1, y0, y1, row0, col0) in plan.tiles:
        crop = volume.data[x0:x1, y0:y1, z].T  # (th, tw): row = y, col = x
        mask = (atlas.labels[x0:x1, y0:y1, z] == label).T
        th, tw = crop.shape
        pixels[row0:row0 + th, col0:col0 + tw] = np.where(mask, crop, 0.0)
        xs, ys = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
        region = prov[row0:row0 + th, col0:col0 + tw]
        region[..., 0] = np.where(mask, xs, region[..., 0])
        region[..., 1] = np.where(mask, ys, region[..., 1])
        region[..., 2] = np.where(mask, z, region[..., 2])
    return Image2D(width=canvas_w, height=canvas_h, pixels=pixels, provenance=prov)


def stitched_label_image(atlas: LabelVolume, spec: StitchSpec) -> np.ndarray:
    """(h, w) uint16 atlas labels in stitched-image space (0 = unmapped)."""
    h, w = spec.image_shape
    out = np.zeros((h, w), dtype=np.uint16)
    removed = set(spec.removed_cells)
    ny, nx = spec.slice_shape
    for cell, z in enumerate(spec.slice_indices):
        if cell in removed:
            continue
        r0, c0 = spec.cell_origin(cell)
        out[r0:r0 + ny, c0:c0 + nx] = atlas.labels[:, :, z].T
    return out


# ---------------------------------------------------------------------------
# Image file I/O: IMG1 (authoritative float32) and 16-bit PGM (inspection)


def write_image(image: Image2D, path: str | Path) -> None:
    path = Path(path)
    header = IMG_MAGIC + struct.pack("<II", image.width, image.height)
    payload = np.ascontiguousarray(image.pixels, dtype="<f4").tobytes()
    path.write_bytes(header + payload)


def read_image(path: str | Path) -> Image2D:
    raw = Path(path).read_bytes()
    if len(raw) < IMG_HEADER_SIZE:
        raise FormatError("truncated header", len(raw))
    if raw[:4] != IMG_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", 0)
    w, h = struct.unpack("<II", raw[4:12])
    expected = IMG_HEADER_SIZE + 4 * w * h
    if len(raw) != expected:
        raise FormatError(f"payload length {len(raw) - IMG_HEADER_SIZE} != {4 * w * h}",
                          min(len(raw), expected))
    pixels = np.frombuffer(raw, dtype="<f4", offset=IMG_HEADER_SIZE).reshape(h, w).copy()
    return Image2D(width=w, height=h, pixels=pixels)


def write_pgm(image: Image2D, path: str | Path) -> None:
    """16-bit binary PGM (P5), big-endian sample order per the PGM spec."""
    path = Path(path)
    header = f"P5\n{image.width} {image.height}\n65535\n".encode("ascii")
    samples = np.round(image.pixels.astype(np.float64) * 65535.0).astype(">u2")
    path.write_bytes(header + samples.tobytes())
