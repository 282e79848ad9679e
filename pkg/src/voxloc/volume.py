"""Dense 3-D scalar volumes on a regular anisotropic grid.

Conventions used throughout the package:

* ``data[i, j, k]`` indexes axes ``(0, 1, 2)``; axis 0 runs anatomical
  left to right.
* Voxel ``(i, j, k)`` has its physical center at
  ``(i * spacing[0], j * spacing[1], k * spacing[2])`` millimetres.
* The linear (file) order is x-fastest: element ``(i, j, k)`` sits at
  linear index ``i + dims[0] * (j + dims[1] * k)``, i.e. Fortran order
  of the ``(i, j, k)`` array.
* Out-of-bounds reads clamp to the nearest edge voxel during
  resampling; cropping instead pads with an explicit pad value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Volume3",
    "VoxelBox",
    "resample_isotropic",
    "rescale_intensity",
    "downsample_to",
    "crop_box",
    "flip_lr",
    "write_volume",
    "read_volume",
]

#: Axis-0 orientation tag stored in volume headers.
AXIS0_CONVENTION = "LR"


@dataclass(frozen=True)
class Volume3:
    """An immutable dense scalar volume with voxel spacing in mm.

    Attributes:
        data: 3-D float array, shape equal to ``dims``. The buffer is
            marked read-only at construction.
        spacing: per-axis voxel spacing in mm, all entries > 0.
        axis0: orientation tag of axis 0 (always ``"LR"``).
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    axis0: str = field(default=AXIS0_CONVENTION)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"volume dims must be positive, got {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        if self.axis0 != AXIS0_CONVENTION:
            raise ValueError(f"unsupported axis-0 convention {self.axis0!r}")
        arr = arr.copy() if not arr.flags.owndata or arr.base is not None else arr
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume3":
        """Same grid geometry, new voxel values (shape must match)."""
        if tuple(np.shape(data)) != self.dims:
            raise ValueError(f"shape {np.shape(data)} does not match dims {self.dims}")
        return Volume3(np.asarray(data), self.spacing)

    def ravel_linear(self) -> np.ndarray:
        """Values in x-fastest linear order (the file payload order)."""
        return self.data.ravel(order="F")


@dataclass(frozen=True)
class VoxelBox:
    """An axis-aligned box given by its center voxel and extent in voxels.

    The low corner is ``center - extent // 2`` per axis, so the center
    voxel of the cropped output is output voxel ``extent // 2``.
    """

    center: tuple[int, int, int]
    extent: tuple[int, int, int]

    def __post_init__(self):
        center = tuple(int(c) for c in self.center)
        extent = tuple(int(e) for e in self.extent)
        if len(center) != 3 or len(extent) != 3:
            raise ValueError("center and extent must have three components")
        if any(e < 1 for e in extent):
            raise ValueError(f"extent must be positive, got {extent}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "extent", extent)

    @property
    def low(self) -> tuple[int, int, int]:
        return tuple(c - e // 2 for c, e in zip(self.center, self.extent))

    @property
    def high(self) -> tuple[int, int, int]:
        """Exclusive upper corner."""
        return tuple(lo + e for lo, e in zip(self.low, self.extent))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _interp_axis_linear(arr: np.ndarray, pos: np.ndarray, axis: int) -> np.ndarray:
    # Linear interpolation along one axis at fractional index positions.
    # Positions are clamped first so out-of-range reads return the exact
    # edge voxel value (no arithmetic on the padded side).
    n = arr.shape[axis]
    pos = np.clip(pos, 0.0, float(n - 1))
    lo = np.floor(pos).astype(np.int64)
    np.minimum(lo, n - 1, out=lo)
    frac = pos - lo
    hi = np.minimum(lo + 1, n - 1)
    shape = [1, 1, 1]
    shape[axis] = pos.size
    w = frac.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1.0 - w) + np.take(arr, hi, axis=axis) * w


def _take_axis_nearest(arr: np.ndarray, pos: np.ndarray, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    idx = np.clip(np.rint(pos).astype(np.int64), 0, n - 1)
    return np.take(arr, idx, axis=axis)


def _resample_grid(v: Volume3, out_dims, out_spacing, positions, interpolation: str) -> Volume3:
    # Axis-separable resampling: the grid mapping is axis-aligned, so one
    # 1-D interpolation pass per axis reproduces full trilinear sampling.
    if interpolation not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    out = v.data.astype(np.float64, copy=False)
    for axis in range(3):
        if interpolation == "trilinear":
            out = _interp_axis_linear(out, positions[axis], axis)
        else:
            out = _take_axis_nearest(out, positions[axis], axis)
    return Volume3(out.astype(v.data.dtype, copy=False), tuple(out_spacing))


def resample_isotropic(v: Volume3, target_spacing: float, interpolation: str = "trilinear") -> Volume3:
    """Resample onto an isotropic grid with the given spacing in mm.

    Output dims are ``round(dims * spacing / target_spacing)`` per axis
    (half rounds up), at least 1. Output voxel ``q`` samples the input at
    physical position ``q * target_spacing``, so a volume that is already
    isotropic at the target spacing is returned unchanged. Images use
    trilinear interpolation; masks should pass ``interpolation="nearest"``.
    """
    if target_spacing <= 0:
        raise ValueError(f"target spacing must be > 0, got {target_spacing}")
    out_dims = tuple(
        max(1, int(np.floor(d * s / target_spacing + 0.5)))
        for d, s in zip(v.dims, v.spacing)
    )
    positions = [
        np.arange(out_dims[a], dtype=np.float64) * (target_spacing / v.spacing[a])
        for a in range(3)
    ]
    return _resample_grid(v, out_dims, (target_spacing,) * 3, positions, interpolation)


def downsample_to(v: Volume3, dims, interpolation: str = "trilinear") -> Volume3:
    """Resample onto exactly the requested grid, preserving physical extent.

    Output spacing is ``dims_in * spacing_in / dims_out`` per axis, and
    output voxel ``q`` samples the input at fractional index
    ``q * dims_in / dims_out``, so coarse-grid coordinates map back to the
    input grid by pure scaling. Works in both directions; the pipeline
    also uses it with ``interpolation="nearest"`` to carry masks back to
    the full-resolution grid.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"target dims must be three positive ints, got {dims}")
    out_spacing = tuple(v.dims[a] * v.spacing[a] / dims[a] for a in range(3))
    positions = [
        np.arange(dims[a], dtype=np.float64) * (v.dims[a] / dims[a]) for a in range(3)
    ]
    return _resample_grid(v, dims, out_spacing, positions, interpolation)


# ---------------------------------------------------------------------------
# intensity range, cropping, orientation
# ---------------------------------------------------------------------------


def rescale_intensity(v: Volume3) -> Volume3:
    """Affine rescale of the value range to [0, 1].

    A constant volume maps to all zeros (the degenerate range is treated
    as empty contrast rather than an error).
    """
    data = v.data.astype(np.float64, copy=False)
    vmin = float(data.min())
    vmax = float(data.max())
    if vmax == vmin:
        out = np.zeros_like(data)
    else:
        out = (data - vmin) / (vmax - vmin)
    return Volume3(out.astype(v.data.dtype, copy=False), v.spacing)


def crop_box(v: Volume3, box: VoxelBox, pad_value: float = 0.0) -> Volume3:
    """Extract an axis-aligned box, padding out-of-bounds voxels.

    Output voxel ``q`` is input voxel ``box.low + q``; spacing is
    preserved. Regions outside the input get ``pad_value`` exactly (no
    edge clamping here, unlike resampling).
    """
    low = box.low
    out = np.full(box.extent, pad_value, dtype=v.data.dtype)
    src = []
    dst = []
    for a in range(3):
        s0 = max(low[a], 0)
        s1 = min(low[a] + box.extent[a], v.dims[a])
        if s0 >= s1:
            return Volume3(out, v.spacing)
        src.append(slice(s0, s1))
        dst.append(slice(s0 - low[a], s1 - low[a]))
    out[tuple(dst)] = v.data[tuple(src)]
    return Volume3(out, v.spacing)


def flip_lr(v: Volume3) -> Volume3:
    """Mirror the volume along axis 0 (left-right). Involution, bitwise."""
    return Volume3(v.data[::-1, :, :].copy(), v.spacing)


# ---------------------------------------------------------------------------
# file format: JSON header + raw little-endian float32 payload
# ---------------------------------------------------------------------------

_HEADER_DTYPE = "f32"
_HEADER_ORDER = "x-fastest"


def _payload_path(header_path: Path) -> Path:
    return header_path.with_suffix(".raw")


def write_volume(v: Volume3, header_path: str | Path) -> None:
    """Write a volume as a two-file pair: JSON header plus raw payload.

    The header ``<name>.json`` records dims, spacing, dtype, linear order
    and the axis-0 orientation tag; the payload ``<name>.raw`` holds the
    voxel values as little-endian float32 in x-fastest order.
    """
    header_path = Path(header_path)
    header = {
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "dtype": _HEADER_DTYPE,
        "order": _HEADER_ORDER,
        "axis0": v.axis0,
    }
    header_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    payload = np.ascontiguousarray(v.data.astype("<f4").ravel(order="F"))
    _payload_path(header_path).write_bytes(payload.tobytes())


def read_volume(header_path: str | Path) -> Volume3:
    """Read a volume written by :func:`write_volume`.

    Raises ValueError on unknown header fields values or when the payload
    length does not match the header dims.
    """
    header_path = Path(header_path)
    header = json.loads(header_path.read_text())
    dims = tuple(int(d) for d in header["dims"])
    spacing = tuple(float(s) for s in header["spacing"])
    if header.get("dtype") != _HEADER_DTYPE:
        raise ValueError(f"unsupported dtype {header.get('dtype')!r} in {header_path}")
    if header.get("order") != _HEADER_ORDER:
        raise ValueError(f"unsupported linear order {header.get('order')!r} in {header_path}")
    if header.get("axis0") != AXIS0_CONVENTION:
        raise ValueError(f"unsupported axis-0 tag {header.get('axis0')!r} in {header_path}")
    raw = _payload_path(header_path).read_bytes()
    expected = int(np.prod(dims)) * 4
    if len(raw) != expected:
        raise ValueError(
            f"payload length mismatch for {header_path}: expected {expected} bytes, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(dims, order="F").copy()
    return Volume3(data, spacing)
