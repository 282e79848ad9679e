"""Gaussian target heatmaps, argmax decoding, and loss/metric functions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from voxloc.volume import Volume3

__all__ = [
    "HeatmapSpec",
    "TargetPoint",
    "gaussian_heatmap",
    "argmax_position",
    "wmse",
    "dice_score",
    "dice_loss",
]


@dataclass(frozen=True)
class HeatmapSpec:
    """Shape of the Gaussian target encoding.

    The map is isotropic in millimetres, unnormalized with peak value
    ``peak`` at the center, and truncated: values strictly below
    ``cutoff`` are stored as exactly 0, so the support is the closed ball
    of radius ``sigma_mm * sqrt(2 ln(peak / cutoff))``.
    """

    sigma_mm: float = 1.5
    cutoff: float = 0.05
    peak: float = 1.0

    def __post_init__(self):
        if self.sigma_mm <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma_mm}")
        if not 0.0 <= self.cutoff < self.peak:
            raise ValueError(f"cutoff must lie in [0, peak), got {self.cutoff}")

    @property
    def support_radius_mm(self) -> float:
        if self.cutoff == 0.0:
            return math.inf
        return self.sigma_mm * math.sqrt(2.0 * math.log(self.peak / self.cutoff))


@dataclass(frozen=True)
class TargetPoint:
    """A target position in voxel coordinates, optionally tagged with a side."""

    position: tuple[float, float, float]
    side: str | None = None

    def __post_init__(self):
        pos = tuple(float(x) for x in self.position)
        if len(pos) != 3 or not all(math.isfinite(x) for x in pos):
            raise ValueError(f"position must be three finite reals, got {self.position}")
        if self.side not in (None, "left", "right"):
            raise ValueError(f"side must be 'left', 'right' or None, got {self.side!r}")
        object.__setattr__(self, "position", pos)

    @property
    def as_array(self) -> np.ndarray:
        return np.asarray(self.position, dtype=np.float64)


def gaussian_heatmap(spec: HeatmapSpec, center: TargetPoint, dims, spacing) -> Volume3:
    """Truncated Gaussian heatmap around a (possibly sub-voxel) center.

    ``value(v) = peak * exp(-||v - c||^2_mm / (2 sigma^2))`` with distances
    taken in millimetres; values below the cutoff are exactly 0. The peak
    is exactly ``spec.peak`` when the center lies on a voxel.
    """
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if any(d < 1 for d in dims):
        raise ValueError(f"dims must be positive, got {dims}")
    if any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be positive, got {spacing}")
    c = center.as_array
    out = np.zeros(dims, dtype=np.float64)
    r_mm = spec.support_radius_mm
    lo = [0, 0, 0]
    hi = list(dims)
    if math.isfinite(r_mm):
        for a in range(3):
            lo[a] = max(0, int(math.floor((c[a] * spacing[a] - r_mm) / spacing[a])))
            hi[a] = min(dims[a], int(math.ceil((c[a] * spacing[a] + r_mm) / spacing[a])) + 1)
            if lo[a] >= hi[a]:
                return Volume3(out, spacing)
    # squared mm distance decomposes per axis on the regular grid
    d2 = [
        ((np.arange(lo[a], hi[a], dtype=np.float64) - c[a]) * spacing[a]) ** 2
        for a in range(3)
    ]
    dist2 = d2[0][:, None, None] + d2[1][None, :, None] + d2[2][None, None, :]
    block = spec.peak * np.exp(-dist2 / (2.0 * spec.sigma_mm**2))
    block[block < spec.cutoff] = 0.0
    out[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = block
    return Volume3(out, spacing)


def argmax_position(h: Volume3) -> TargetPoint:
    """Integer voxel index of the maximum value.

    Ties break to the smallest linear index in x-fastest order. NaN
    voxels are ignored; an all-NaN volume is invalid data.
    """
    flat = h.ravel_linear()
    if np.all(np.isnan(flat)):
        raise ValueError("argmax of an all-NaN volume")
    idx = int(np.nanargmax(flat))
    pos = np.unravel_index(idx, h.dims, order="F")
    return TargetPoint(tuple(float(p) for p in pos))


def wmse(pred: Volume3, gt: Volume3, fg_weight: float = 100.0) -> tuple[float, Volume3]:
    """Foreground-weighted mean squared error and its gradient wrt pred.

    ``loss = (1/V) sum w_i (pred_i - gt_i)^2`` with ``w_i = fg_weight``
    where ``gt_i > 0`` and 1 elsewhere; ``grad_i = (2/V) w_i (pred_i - gt_i)``.
    Weighting is binary on the ground-truth support, not proportional to it.
    """
    if pred.dims != gt.dims:
        raise ValueError(f"dim mismatch: {pred.dims} vs {gt.dims}")
    if fg_weight < 1.0:
        raise ValueError(f"fg_weight must be >= 1, got {fg_weight}")
    p = pred.data.astype(np.float64, copy=False)
    g = gt.data.astype(np.float64, copy=False)
    w = np.where(g > 0.0, float(fg_weight), 1.0)
    diff = p - g
    volume = p.size
    loss = float(np.sum(w * diff * diff) / volume)
    grad = (2.0 / volume) * w * diff
    return loss, Volume3(grad, pred.spacing)


def dice_score(a: Volume3, b: Volume3) -> float:
    """Overlap score 2|a n b| / (|a| + |b|) of two binary volumes.

    Both-empty inputs score 1 (perfect agreement on "nothing there").
    """
    if a.dims != b.dims:
        raise ValueError(f"dim mismatch: {a.dims} vs {b.dims}")
    am = a.data != 0
    bm = b.data != 0
    denom = int(am.sum()) + int(bm.sum())
    if denom == 0:
        return 1.0
    inter = int(np.logical_and(am, bm).sum())
    return 2.0 * inter / denom


def dice_loss(a: Volume3, b: Volume3) -> float:
    """Loss form of the overlap score (1 - dice_score)."""
    return 1.0 - dice_score(a, b)
