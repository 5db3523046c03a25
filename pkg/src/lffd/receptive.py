"""Receptive-field arithmetic for stacks of convolutions, plus the coverage audit.

The accumulated quantities follow the usual recurrence over layers
(``rf += (k - 1) * stride_so_far; stride *= s``), starting from a 1x1 field at
stride 1. With the all-pad-1 convention for 3x3 convs the RF center of cell
(i, j) lands exactly on ``(acc_stride * j, acc_stride * i)`` in input pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class LayerSpec:
    """Geometry of one convolution; channel counts ride along for the network builder."""

    name: str
    kernel: int
    stride: int
    pad: int
    in_channels: int = 0
    out_channels: int = 0


@dataclass(frozen=True)
class RFInfo:
    """Accumulated stride, RF size and center mapping at one layer's output."""

    layer: str
    acc_stride: int
    rf_size: int

    def center_of(self, i: int, j: int) -> tuple[int, int]:
        return rf_center(self, i, j)


def accumulate(layers: Sequence[LayerSpec]) -> list[RFInfo]:
    """Per-layer (acc_stride, rf_size) for a layer stack, input to output."""
    if not layers:
        raise ValueError("empty layer list")
    rf, stride = 1, 1
    out = []
    for layer in layers:
        rf = rf + (layer.kernel - 1) * stride
        stride = stride * layer.stride
        out.append(RFInfo(layer=layer.name, acc_stride=stride, rf_size=rf))
    return out


def rf_center(
    info: RFInfo, i: int, j: int, map_dims: tuple[int, int] | None = None
) -> tuple[int, int]:
    """Input-pixel (x, y) under the all-pad-1 convention: x = acc_stride*j, y = acc_stride*i."""
    if i < 0 or j < 0:
        raise IndexError(f"negative cell index ({i}, {j})")
    if map_dims is not None and (i >= map_dims[0] or j >= map_dims[1]):
        raise IndexError(f"cell ({i}, {j}) outside map {map_dims}")
    return info.acc_stride * j, info.acc_stride * i


def centers_strictly_inside(d: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Count lattice points k*d with lo < k*d < hi, vectorized over interval arrays."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    first = np.floor(lo / d) + 1  # smallest k with k*d > lo
    last = np.ceil(hi / d) - 1  # largest k with k*d < hi
    first = np.maximum(first, 0)  # the lattice starts at 0
    return np.maximum(last - first + 1, 0).astype(np.int64)


@dataclass
class CoverageReport:
    min_centers_inside_per_face: int
    uncovered_faces: int
    faces_checked: int
    worst_case: tuple[int, int, int] | None = None  # (size, x, y) of a minimal-coverage face


def coverage_audit(
    config,
    image_dims: tuple[int, int],
    face_side_range: tuple[int, int] = (10, 560),
    exhaustive_limit: int = 64,
    stratified_step: int = 3,
) -> CoverageReport:
    """Count the owning branch's RF centers inside every square-face placement.

    Placements are exhaustive (every integer offset) for sizes up to
    ``exhaustive_limit`` and strided by ``stratified_step`` above; the center
    lattice is periodic with the branch stride, so the strided sweep loses no
    information. A face is uncovered when zero centers fall strictly inside it.
    """
    img_h, img_w = image_dims
    lo_s, hi_s = face_side_range
    min_centers = None
    worst = None
    uncovered = 0
    checked = 0
    for size in range(lo_s, hi_s + 1):
        branch = _owning_branch(config.branches, size)
        if branch is None:
            uncovered += max(0, img_w - size + 1) * max(0, img_h - size + 1)
            continue
        d = branch.acc_stride
        step = 1 if size <= exhaustive_limit else stratified_step
        xs = np.arange(0, img_w - size + 1, step)
        ys = np.arange(0, img_h - size + 1, step)
        if len(xs) == 0 or len(ys) == 0:
            continue
        cx = centers_strictly_inside(d, xs, xs + size)
        cy = centers_strictly_inside(d, ys, ys + size)
        counts = cy[:, None] * cx[None, :]
        checked += counts.size
        uncovered += int((counts == 0).sum())
        m = int(counts.min())
        if min_centers is None or m < min_centers:
            min_centers = m
            iy, ix = np.unravel_index(int(counts.argmin()), counts.shape)
            worst = (size, int(xs[ix]), int(ys[iy]))
    return CoverageReport(
        min_centers_inside_per_face=0 if min_centers is None else min_centers,
        uncovered_faces=uncovered,
        faces_checked=checked,
        worst_case=worst,
    )


def _owning_branch(branches: Iterable, size: float):
    for b in branches:
        lo_ok = size >= b.scale_lo if b.branch_id == 1 else size > b.scale_lo
        if lo_ok and size <= b.scale_hi:
            return b
    return None
