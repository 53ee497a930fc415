"""Glyph rendering: tabular features drawn as symbols inside hybrid images.

Three glyphs per subject, always in this order: a pentagon whose radius
encodes left-hemisphere lesion size, a pie slice of fixed size whose
intensity encodes recovery time, and a fixed severity symbol (one shape per
category).  Rasterization is plain pixel-center containment, no
anti-aliasing, so identical inputs give bit-identical rasters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import SEVERITY_CATEGORIES, SubjectRecord, Volume3D, LabelVolume
from .imaging import (
    Image2D,
    LayoutError,
    RoiImageSpec,
    RoiTilePlan,
    StitchSpec,
    downsample,
    roi_image,
    stitch,
)

# moderate/normal/unknown symbols follow the source convention; severe and
# mild are our own picks (only three of the five shapes are prescribed).
DEFAULT_SEVERITY_SYMBOLS = {
    "severe": "square",
    "moderate": "triangle",
    "mild": "cross",
    "normal": "ellipse",
    "unknown": "star",
}

SHAPE_NAMES = ("pentagon", "pie", "square", "triangle", "cross", "ellipse", "star")

# glyph box = (row0, col0, height, width) on the host canvas
Box = tuple[int, int, int, int]


class GlyphOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class GlyphSpec:
    """Geometry and value normalizers for the three glyphs.

    ``size_ref`` and ``time_ref`` must come from training-split statistics
    only (see ``normalizers_from_records``); values at or above the reference
    saturate the encoding.
    """

    pentagon_radius: tuple[float, float]  # (r_min, r_max) in pixels
    pie_radius: float
    pie_intensity: tuple[float, float]  # (i_min, i_max), within [0, 1]
    size_ref: float
    time_ref: float
    # flat stitch-grid cells to draw into; None = first 3 freed cells
    placement_cells: tuple[int, int, int] | None = None
    severity_symbols: Mapping[str, str] = field(
        default_factory=lambda: dict(DEFAULT_SEVERITY_SYMBOLS))

    def __post_init__(self):
        r_min, r_max = self.pentagon_radius
        if not 0 < r_min < r_max:
            raise ValueError(f"need 0 < r_min < r_max, got ({r_min}, {r_max})")
        i_min, i_max = self.pie_intensity
        if not 0 <= i_min < i_max <= 1:
            raise ValueError(f"need 0 <= i_min < i_max <= 1, got ({i_min}, {i_max})")
        if self.pie_radius <= 0:
            raise ValueError("pie_radius must be positive")
        if self.size_ref <= 0 or self.time_ref <= 0:
            raise ValueError("normalizers must be positive")
        if self.placement_cells is not None and len(set(self.placement_cells)) != 3:
            raise ValueError("placement_cells must be three distinct cells")
        missing = set(SEVERITY_CATEGORIES) - set(self.severity_symbols)
        if missing:
            raise ValueError(f"severity_symbols missing {sorted(missing)}")
        for cat, shape in self.severity_symbols.items():
            if shape not in SHAPE_NAMES:
                raise ValueError(f"unknown shape {shape!r} for {cat!r}")

    def to_json_dict(self) -> dict:
        return {
            "pentagon_radius": list(self.pentagon_radius),
            "pie_radius": self.pie_radius,
            "pie_intensity": list(self.pie_intensity),
            "size_ref": self.size_ref,
            "time_ref": self.time_ref,
            "placement_cells": (None if self.placement_cells is None
                                else list(self.placement_cells)),
            "severity_symbols": dict(self.severity_symbols),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GlyphSpec":
        return cls(
            pentagon_radius=tuple(d["pentagon_radius"]),
            pie_radius=float(d["pie_radius"]),
            pie_intensity=tuple(d["pie_intensity"]),
            size_ref=float(d["size_ref"]),
            time_ref=float(d["time_ref"]),
            placement_cells=(None if d.get("placement_cells") is None
                             else tuple(d["placement_cells"])),
            severity_symbols=dict(d.get("severity_symbols",
                                        DEFAULT_SEVERITY_SYMBOLS)),
        )


def normalizers_from_records(records: Sequence[SubjectRecord]) -> tuple[float, float]:
    """(size_ref, time_ref) as 99th percentiles of the given records.

    Call with training-group records only; lock-box subjects must not shape
    the encoding.
    """
    if not records:
        raise ValueError("no records")
    sizes = np.array([r.left_lesion_size for r in records], dtype=np.float64)
    times = np.array([r.recovery_time for r in records], dtype=np.float64)
    size_ref = float(np.percentile(sizes, 99))
    time_ref = float(np.percentile(times, 99))
    # degenerate cohorts (all zeros) still need a usable scale
    return max(size_ref, 1e-9), max(time_ref, 1e-9)


# ---------------------------------------------------------------------------
# Rasterizers.  Each returns an (h, w) float32 cell, shape filled with
# `intensity`, background 0.  Pixel centers at (col+0.5, row+0.5).


def _pixel_centers(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def _fill_polygon(h: int, w: int, verts: np.ndarray, intensity: float) -> np.ndarray:
    """Even-odd polygon fill; handles convex and star polygons alike."""
    px, py = _pixel_centers(h, w)
    inside = np.zeros((h, w), dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        crosses = (y0 <= py) != (y1 <= py)
        if y1 == y0:
            continue
        xint = x0 + (py - y0) / (y1 - y0) * (x1 - x0)
        inside ^= crosses & (px < xint)
    out = np.zeros((h, w), dtype=np.float32)
    out[inside] = np.float32(intensity)
    return out


def _regular_verts(cx: float, cy: float, radius: float, n: int,
                   start_angle: float = -np.pi / 2) -> np.ndarray:
    angles = start_angle + 2 * np.pi * np.arange(n) / n
    return np.stack([cx + radius * np.cos(angles),
                     cy + radius * np.sin(angles)], axis=1)


def pentagon_raster(h: int, w: int, radius: float, intensity: float = 1.0) -> np.ndarray:
    cx, cy = w / 2, h / 2
    return _fill_polygon(h, w, _regular_verts(cx, cy, radius, 5), intensity)


def triangle_raster(h: int, w: int, radius: float, intensity: float = 1.0) -> np.ndarray:
    cx, cy = w / 2, h / 2
    return _fill_polygon(h, w, _regular_verts(cx, cy, radius, 3), intensity)


def star_raster(h: int, w: int, radius: float, intensity: float = 1.0) -> np.ndarray:
    cx, cy = w / 2, h / 2
    outer = _regular_verts(cx, cy, radius, 5)
    inner = _regular_verts(cx, cy, 0.45 * radius, 5, start_angle=-np.pi / 2 + np.pi / 5)
    verts = np.empty((10, 2))
    verts[0::2] = outer
    verts[1::2] = inner
    return _fill_polygon(h, w, verts, intensity)


def square_raster(h: int, w: int, radius: float, intensity: float = 1.0) -> np.ndarray:
    px, py = _pixel_centers(h, w)
    half = 0.72 * radius
    inside = (np.abs(px - w / 2) <= half) & (np.abs(py - h / 2) <= half)
    out = np.zeros((h, w), dtype=np.float32)
    out[inside] = np.float32(intensity)
    return out


def ellipse_raster(h: int, w: int, radius: float, intensity: float = 1.0) -> np.ndarray:
    px, py = _pixel_centers(h, w)
    a, b = radius, 0.55 * radius
    inside = ((px - w / 2) / a) ** 2 + ((py - h / 2) / b) ** 2 <= 1.0
    out = np.zeros((h, w), dtype=np.float32)
    out[inside] = np.float32(intensity)
    return out


def cross_raster(h: int, w: int, radius: float, intensity: float = 1.0) -> np.ndarray:
    px, py = _pixel_centers(h, w)
    dx, dy = np.abs(px - w / 2), np.abs(py - h / 2)
    arm = 0.24 * radius
    inside = ((dx <= arm) & (dy <= radius)) | ((dy <= arm) & (dx <= radius))
    out = np.zeros((h, w), dtype=np.float32)
    out[inside] = np.float32(intensity)
    return out


def pie_raster(h: int, w: int, radius: float, intensity: float) -> np.ndarray:
    """120-degree sector opening from straight-up to lower-right."""
    px, py = _pixel_centers(h, w)
    dx, dy = px - w / 2, py - h / 2
    ang = np.arctan2(dy, dx)
    inside = (dx * dx + dy * dy <= radius * radius) & (ang >= -np.pi / 2) & (ang < np.pi / 6)
    out = np.zeros((h, w), dtype=np.float32)
    out[inside] = np.float32(intensity)
    return out


_SHAPE_FNS = {
    "pentagon": pentagon_raster,
    "triangle": triangle_raster,
    "star": star_raster,
    "square": square_raster,
    "ellipse": ellipse_raster,
    "cross": cross_raster,
}


def severity_raster(shape: str, h: int, w: int, intensity: float = 1.0) -> np.ndarray:
    """Fixed-size severity symbol raster for a cell of the given size."""
    radius = 0.38 * min(h, w)
    return _SHAPE_FNS[shape](h, w, radius, intensity)


def _clamp01(v: float) -> float:
    return min(1.0, max(0.0, v))


def render_glyphs(record: SubjectRecord, spec: GlyphSpec, canvas: np.ndarray,
                  boxes: Sequence[Box]) -> np.ndarray:
    """Draw the three glyphs into the given canvas boxes (pentagon, pie,
    severity, in that order).  Returns a new array; boxes must be empty."""
    if len(boxes) != 3:
        raise ValueError(f"need 3 glyph boxes, got {len(boxes)}")
    out = canvas.copy()
    r_min, r_max = spec.pentagon_radius
    radius = r_min + (r_max - r_min) * _clamp01(record.left_lesion_size / spec.size_ref)
    i_min, i_max = spec.pie_intensity
    intensity = i_min + (i_max - i_min) * _clamp01(record.recovery_time / spec.time_ref)
    shape = spec.severity_symbols[record.severity]
    rasters = []
    for box, needed in zip(boxes, (r_max, spec.pie_radius, None)):
        r0, c0, bh, bw = box
        if needed is not None and 2 * needed > min(bh, bw):
            raise LayoutError(
                f"glyph radius {needed} does not fit a {bh}x{bw} cell")
    rasters.append(pentagon_raster(boxes[0][2], boxes[0][3], radius))
    rasters.append(pie_raster(boxes[1][2], boxes[1][3], spec.pie_radius, intensity))
    rasters.append(severity_raster(shape, boxes[2][2], boxes[2][3]))
    for box, raster in zip(boxes, rasters):
        r0, c0, bh, bw = box
        region = out[r0:r0 + bh, c0:c0 + bw]
        if np.any(region != 0.0):
            raise GlyphOverlapError(f"placement box {box} is not empty")
        out[r0:r0 + bh, c0:c0 + bw] = raster
    return out


# ---------------------------------------------------------------------------
# Hybrid image builders


def _dorsal_cells(stitch_spec: StitchSpec) -> tuple[int, ...]:
    n = len(stitch_spec.slice_indices)
    return tuple(range(n - 4, n))


def hybrid_stitched(volume: Volume3D, record: SubjectRecord,
                    stitch_spec: StitchSpec, glyph_spec: GlyphSpec,
                    target: tuple[int, int] | None = None) -> Image2D:
    """Stitched image with the 4 most-dorsal slices dropped and glyphs in 3
    of the freed cells.  ``target`` (w, h) applies area-average downsampling."""
    if len(stitch_spec.slice_indices) < 4:
        raise LayoutError("need at least 4 slices to free glyph cells")
    expected = _dorsal_cells(stitch_spec)
    if tuple(sorted(stitch_spec.removed_cells)) != expected:
        raise LayoutError(
            f"removed_cells must be the 4 most-dorsal slice cells {expected}, "
            f"got {tuple(sorted(stitch_spec.removed_cells))}")
    base = stitch(volume, stitch_spec)
    cells = glyph_spec.placement_cells
    if cells is None:
        cells = expected[:3]
    if not set(cells) <= set(expected):
        raise LayoutError(f"placement cells {cells} not among freed cells {expected}")
    ny, nx = stitch_spec.slice_shape
    boxes = [(*stitch_spec.cell_origin(c), ny, nx) for c in cells]
    pixels = render_glyphs(record, glyph_spec, base.pixels, boxes)
    img = Image2D(width=base.width, height=base.height, pixels=pixels,
                  provenance=base.provenance)
    if target is not None:
        img = downsample(img, target[0], target[1])
    return img


def glyph_strip_boxes(roi_spec: RoiImageSpec) -> list[Box]:
    """Three equal-width boxes across the canvas's reserved bottom strip."""
    if roi_spec.reserved_bottom <= 0:
        raise LayoutError("roi_spec must reserve a bottom strip for glyphs")
    canvas_h, canvas_w = roi_spec.canvas
    strip_h = roi_spec.reserved_bottom
    bw = canvas_w // 3
    r0 = canvas_h - strip_h
    return [(r0, i * bw, strip_h, bw) for i in range(3)]


def hybrid_roi(volume: Volume3D, atlas: LabelVolume, roi_spec: RoiImageSpec,
               record: SubjectRecord, glyph_spec: GlyphSpec,
               plan: RoiTilePlan | None = None,
               target: tuple[int, int] | None = None) -> Image2D:
    """ROI tile image plus the three glyphs in the reserved bottom strip."""
    boxes = glyph_strip_boxes(roi_spec)
    base = roi_image(volume, atlas, roi_spec, plan)
    pixels = render_glyphs(record, glyph_spec, base.pixels, boxes)
    img = Image2D(width=base.width, height=base.height, pixels=pixels,
                  provenance=base.provenance)
    if target is not None:
        img = downsample(img, target[0], target[1])
    return img
