"""Pluggable predictors: segmenters and localizers for the pipeline.

Three localizer families cover the testing needs of the uncertainty
machinery:

* ``ConvNetLocalizer``: a miniature forward-only 3-D conv stack with
  inference-time inverted dropout, exercising real Monte Carlo dropout
  mechanics with loadable or seeded weights.
* ``OracleLocalizer`` / ``MarkerLocalizer``: controlled test doubles
  that emit a Gaussian heatmap at a known target with configurable bias,
  positional jitter and a spurious-peak failure mode. The marker variant
  finds its target from the volume content (the brightest compact blob),
  which makes it equivariant under spatial augmentation.
* ``EchoLocalizer``: returns its input, handy for chain-reduction tests.

Segmentation is stage-1 plumbing here, so ``TruthMaskSegmenter`` wraps
known phantom masks (optionally noise-perturbed at their boundary) and
``IntensityBandSegmenter`` provides an intensity-threshold fallback.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from scipy import ndimage

from voxloc.heatmap import HeatmapSpec, TargetPoint, gaussian_heatmap
from voxloc.volume import Volume3, downsample_to

__all__ = [
    "Localizer",
    "Segmenter",
    "InvalidModelError",
    "ConvNetSpec",
    "ConvNetLocalizer",
    "convnet_forward",
    "apply_inverted_dropout",
    "save_weights",
    "OracleLocalizerConfig",
    "oracle_localize",
    "OracleLocalizer",
    "MarkerLocalizer",
    "EchoLocalizer",
    "TruthMaskSegmenter",
    "IntensityBandSegmenter",
    "synthetic_segment",
]


class InvalidModelError(Exception):
    """Weight data does not match the declared network layout."""


@runtime_checkable
class Localizer(Protocol):
    """Heatmap predictor: single channel, same dims as the input.

    Contracts every implementation must honor:
    * ``stochastic=False``: identical output for identical input,
      bit-reproducible regardless of seed.
    * ``stochastic=True``: output is a deterministic function of
      (input, seed).
    """

    def predict(self, v: Volume3, stochastic: bool = False, seed: int = 0) -> Volume3: ...


@runtime_checkable
class Segmenter(Protocol):
    """Probability maps for (background, left structure, right structure)."""

    def predict(self, v: Volume3) -> tuple[Volume3, Volume3, Volume3]: ...


# ---------------------------------------------------------------------------
# miniature conv network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvNetSpec:
    """Layout of the plain 3-D conv stack.

    ``channels`` lists the output channels of each layer; the input is
    single-channel and the final layer must emit one channel, bounded to
    [0, 1] by a sigmoid. ``dropout_layers`` defaults to the deepest half
    of the hidden layers (the half adjacent to the output).
    """

    channels: tuple[int, ...] = (8, 16, 16, 8, 1)
    kernel_size: int = 3
    dropout_rate: float = 0.5
    dropout_layers: tuple[int, ...] | None = None

    def __post_init__(self):
        channels = tuple(int(c) for c in self.channels)
        if len(channels) < 2 or any(c < 1 for c in channels):
            raise ValueError(f"channels must be >= 2 positive entries, got {channels}")
        if channels[-1] != 1:
            raise ValueError("final layer must emit a single heatmap channel")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0,1), got {self.dropout_rate}")
        object.__setattr__(self, "channels", channels)
        n_hidden = len(channels) - 1
        if self.dropout_layers is None:
            layers = tuple(range(n_hidden - n_hidden // 2, n_hidden))
        else:
            layers = tuple(int(i) for i in self.dropout_layers)
            if any(i < 0 or i >= n_hidden for i in layers):
                raise ValueError(f"dropout layers must index hidden layers, got {layers}")
        object.__setattr__(self, "dropout_layers", layers)

    @property
    def layer_shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """(weight shape, bias shape) per layer."""
        k = self.kernel_size
        in_ch = (1,) + self.channels[:-1]
        return [
            ((c_out, c_in, k, k, k), (c_out,))
            for c_in, c_out in zip(in_ch, self.channels)
        ]


def apply_inverted_dropout(x: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Zero units with the given probability and scale survivors by 1/(1-rate)."""
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate)


def _conv3d_same(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    # x: (c_in, nx, ny, nz); weight: (c_out, c_in, k, k, k)
    c_out = weight.shape[0]
    out = np.empty((c_out,) + x.shape[1:], dtype=np.float64)
    for o in range(c_out):
        acc = np.zeros(x.shape[1:], dtype=np.float64)
        for i in range(x.shape[0]):
            acc += ndimage.correlate(x[i], weight[o, i], mode="constant", cval=0.0)
        out[o] = acc + bias[o]
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to stay overflow-free
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class ConvNetLocalizer:
    """Forward-only conv stack with seeded or file-backed weights."""

    def __init__(self, spec: ConvNetSpec, weights: list[tuple[np.ndarray, np.ndarray]]):
        expected = spec.layer_shapes
        if len(weights) != len(expected):
            raise InvalidModelError(
                f"expected {len(expected)} layers, got {len(weights)}"
            )
        for i, ((w, b), (w_shape, b_shape)) in enumerate(zip(weights, expected)):
            if tuple(w.shape) != w_shape or tuple(b.shape) != b_shape:
                raise InvalidModelError(
                    f"layer {i}: weight/bias shapes {w.shape}/{b.shape} "
                    f"do not match spec {w_shape}/{b_shape}"
                )
        self.spec = spec
        self.weights = [(w.astype(np.float64), b.astype(np.float64)) for w, b in weights]

    @classmethod
    def from_seed(cls, spec: ConvNetSpec, seed: int = 0) -> "ConvNetLocalizer":
        """Xavier-style uniform initialization driven by the seed."""
        rng = np.random.default_rng(seed)
        weights = []
        for w_shape, b_shape in spec.layer_shapes:
            fan_in = w_shape[1] * spec.kernel_size**3
            fan_out = w_shape[0] * spec.kernel_size**3
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append((rng.uniform(-limit, limit, w_shape), np.zeros(b_shape)))
        return cls(spec, weights)

    @classmethod
    def from_file(cls, spec: ConvNetSpec, manifest_path: str | Path) -> "ConvNetLocalizer":
        return cls(spec, load_weights(manifest_path))

    def predict(self, v: Volume3, stochastic: bool = False, seed: int = 0) -> Volume3:
        rng = np.random.default_rng(seed) if stochastic else None
        x = v.data.astype(np.float64, copy=False)[None]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(self.weights):
            x = _conv3d_same(x, w, b)
            if i == last:
                x = _sigmoid(x)
            else:
                np.maximum(x, 0.0, out=x)
                if stochastic and i in self.spec.dropout_layers:
                    x = apply_inverted_dropout(x, self.spec.dropout_rate, rng)
        return Volume3(x[0], v.spacing)


def convnet_forward(net: ConvNetLocalizer, v: Volume3, stochastic: bool = False, seed: int = 0) -> Volume3:
    return net.predict(v, stochastic=stochastic, seed=seed)


def save_weights(net: ConvNetLocalizer, manifest_path: str | Path) -> None:
    """Write weights as a JSON shape manifest plus raw little-endian f32 payload."""
    manifest_path = Path(manifest_path)
    manifest = {
        "dtype": "f32",
        "layers": [
            {"weight": list(w.shape), "bias": list(b.shape)} for w, b in net.weights
        ],
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    chunks = []
    for w, b in net.weights:
        chunks.append(w.astype("<f4").ravel())
        chunks.append(b.astype("<f4").ravel())
    manifest_path.with_suffix(".raw").write_bytes(np.concatenate(chunks).tobytes())


def load_weights(manifest_path: str | Path) -> list[tuple[np.ndarray, np.ndarray]]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("dtype") != "f32":
        raise InvalidModelError(f"unsupported weight dtype {manifest.get('dtype')!r}")
    raw = manifest_path.with_suffix(".raw").read_bytes()
    layers = manifest.get("layers", [])
    total = sum(
        int(np.prod(layer["weight"])) + int(np.prod(layer["bias"])) for layer in layers
    )
    if len(raw) != total * 4:
        raise InvalidModelError(
            f"weight payload length mismatch: expected {total * 4} bytes, got {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f4")
    weights = []
    offset = 0
    for layer in layers:
        w_shape = tuple(int(n) for n in layer["weight"])
        b_shape = tuple(int(n) for n in layer["bias"])
        w_size = int(np.prod(w_shape))
        b_size = int(np.prod(b_shape))
        w = flat[offset : offset + w_size].reshape(w_shape).astype(np.float64)
        offset += w_size
        b = flat[offset : offset + b_size].reshape(b_shape).astype(np.float64)
        offset += b_size
        weights.append((w, b))
    return weights


# ---------------------------------------------------------------------------
# oracle localizers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleLocalizerConfig:
    """Controlled error model for localizer test doubles.

    ``jitter_std`` adds per-axis Gaussian position noise in stochastic
    mode; ``bias`` is a fixed offset in voxels; with probability
    ``failure_rate`` the heatmap is replaced by a spurious peak far from
    the target. A deterministic pass only fails when ``failure_rate``
    is 1 (guaranteed failures must corrupt baselines too).
    """

    jitter_std: float = 0.0
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    failure_rate: float = 0.0
    heatmap: HeatmapSpec = field(default_factory=HeatmapSpec)

    def __post_init__(self):
        if self.jitter_std < 0:
            raise ValueError(f"jitter_std must be >= 0, got {self.jitter_std}")
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValueError(f"failure_rate must lie in [0,1], got {self.failure_rate}")
        object.__setattr__(self, "bias", tuple(float(b) for b in self.bias))


def _far_peak_deterministic(truth: np.ndarray, dims: np.ndarray) -> np.ndarray:
    # two fixed candidates near opposite corners; one is always far
    a = 0.15 * (dims - 1.0)
    b = 0.85 * (dims - 1.0)
    return a if np.linalg.norm(a - truth) >= np.linalg.norm(b - truth) else b


def _far_peak_random(truth: np.ndarray, dims: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    min_dist = max(8.0, float(dims.min()) / 3.0)
    for _ in range(100):
        cand = rng.uniform(0.0, dims - 1.0)
        if np.linalg.norm(cand - truth) >= min_dist:
            return cand
    return _far_peak_deterministic(truth, dims)  # pragma: no cover - tiny volumes only


def oracle_localize(
    cfg: OracleLocalizerConfig,
    truth: TargetPoint,
    v: Volume3,
    stochastic: bool = False,
    seed: int = 0,
) -> Volume3:
    """Gaussian heatmap at truth + bias, with configured jitter/failures."""
    pos = truth.as_array
    dims = np.asarray(v.dims, dtype=np.float64)
    if np.any(pos < 0) or np.any(pos > dims - 1.0):
        raise ValueError(f"truth {truth.position} outside volume bounds {v.dims}")
    center = pos + np.asarray(cfg.bias)
    if stochastic:
        rng = np.random.default_rng(seed)
        if rng.uniform() < cfg.failure_rate:
            center = _far_peak_random(pos, dims, rng)
        elif cfg.jitter_std > 0:
            center = center + rng.normal(0.0, cfg.jitter_std, size=3)
    elif cfg.failure_rate >= 1.0:
        center = _far_peak_deterministic(pos, dims)
    return gaussian_heatmap(cfg.heatmap, TargetPoint(tuple(center)), v.dims, v.spacing)


class OracleLocalizer:
    """Localizer bound to a fixed known target position."""

    def __init__(self, cfg: OracleLocalizerConfig, truth: TargetPoint):
        self.cfg = cfg
        self.truth = truth

    def predict(self, v: Volume3, stochastic: bool = False, seed: int = 0) -> Volume3:
        return oracle_localize(self.cfg, self.truth, v, stochastic=stochastic, seed=seed)


class MarkerLocalizer:
    """Localizer that finds the brightest compact blob in the volume.

    Detection runs on a Gaussian-smoothed copy (argmax, then an
    intensity-weighted centroid over a small window for sub-voxel
    precision). Because the target is read from the content, predictions
    move with the image under spatial transforms, so the oracle behaves
    equivariantly in augmentation chains. The configured error model is
    applied on top of the detected position.
    """

    def __init__(self, cfg: OracleLocalizerConfig, smooth_sigma_mm: float = 1.0, refine_radius: int = 2):
        self.cfg = cfg
        self.smooth_sigma_mm = float(smooth_sigma_mm)
        self.refine_radius = int(refine_radius)

    def detect(self, v: Volume3) -> TargetPoint:
        data = v.data.astype(np.float64, copy=False)
        sigma_vox = [self.smooth_sigma_mm / s for s in v.spacing]
        smooth = ndimage.gaussian_filter(data, sigma=sigma_vox, mode="nearest")
        idx = np.unravel_index(int(np.argmax(smooth.ravel(order="F"))), v.dims, order="F")
        r = self.refine_radius
        lo = [max(0, idx[a] - r) for a in range(3)]
        hi = [min(v.dims[a], idx[a] + r + 1) for a in range(3)]
        window = smooth[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
        weights = window - window.min()
        total = weights.sum()
        if total <= 0.0:
            return TargetPoint(tuple(float(i) for i in idx))
        grids = np.meshgrid(*(np.arange(lo[a], hi[a], dtype=np.float64) for a in range(3)), indexing="ij")
        centroid = tuple(float((g * weights).sum() / total) for g in grids)
        return TargetPoint(centroid)

    def predict(self, v: Volume3, stochastic: bool = False, seed: int = 0) -> Volume3:
        detected = self.detect(v)
        return oracle_localize(self.cfg, detected, v, stochastic=stochastic, seed=seed)


class EchoLocalizer:
    """Returns the input volume as its heatmap. For chain-reduction tests."""

    def predict(self, v: Volume3, stochastic: bool = False, seed: int = 0) -> Volume3:
        return v


# ---------------------------------------------------------------------------
# segmenters
# ---------------------------------------------------------------------------

_P_FG = 0.96
_P_OFF = 0.02


def _binarize(v: Volume3, dims) -> np.ndarray:
    if v.dims != tuple(dims):
        v = downsample_to(v, dims, interpolation="nearest")
    return v.data > 0.5


def _boundary_perturb(mask: np.ndarray, flip_rate: float, rng: np.random.Generator) -> np.ndarray:
    # flip a fraction of the one-voxel shell on both sides of the surface
    inner = mask & ~ndimage.binary_erosion(mask)
    outer = ndimage.binary_dilation(mask) & ~mask
    flips = (inner | outer) & (rng.random(mask.shape) < flip_rate)
    return mask ^ flips


def _stack_probabilities(left: np.ndarray, right: np.ndarray, spacing) -> tuple[Volume3, Volume3, Volume3]:
    p_left = np.where(left, _P_FG, _P_OFF)
    p_right = np.where(right, _P_FG, _P_OFF)
    both = left & right
    if both.any():  # overlapping structures: split the foreground mass
        p_left[both] = 0.49
        p_right[both] = 0.49
    p_bg = 1.0 - p_left - p_right
    return (
        Volume3(p_bg, spacing),
        Volume3(p_left, spacing),
        Volume3(p_right, spacing),
    )


class TruthMaskSegmenter:
    """Stage-1 stand-in that derives probabilities from known masks.

    Masks are resampled (nearest) to the input grid, optionally perturbed
    along their boundary shell, and converted to near-one-hot channel
    probabilities. Repeated calls are deterministic: the perturbation rng
    is re-seeded per call.
    """

    def __init__(
        self,
        left_mask: Volume3,
        right_mask: Volume3,
        boundary_noise: bool = False,
        flip_rate: float = 0.3,
        seed: int = 0,
    ):
        self.left_mask = left_mask
        self.right_mask = right_mask
        self.boundary_noise = bool(boundary_noise)
        self.flip_rate = float(flip_rate)
        self.seed = int(seed)

    def predict(self, v: Volume3) -> tuple[Volume3, Volume3, Volume3]:
        left = _binarize(self.left_mask, v.dims)
        right = _binarize(self.right_mask, v.dims)
        if self.boundary_noise:
            rng = np.random.default_rng(self.seed)
            left = _boundary_perturb(left, self.flip_rate, rng)
            right = _boundary_perturb(right, self.flip_rate, rng)
        return _stack_probabilities(left, right, v.spacing)


class IntensityBandSegmenter:
    """Threshold fallback: foreground = intensities inside a band, split at the midplane."""

    def __init__(self, band: tuple[float, float] = (0.35, 0.85)):
        if band[0] >= band[1]:
            raise ValueError(f"band must be a nonempty interval, got {band}")
        self.band = (float(band[0]), float(band[1]))

    def predict(self, v: Volume3) -> tuple[Volume3, Volume3, Volume3]:
        fg = (v.data >= self.band[0]) & (v.data <= self.band[1])
        mid = v.dims[0] // 2
        half = np.zeros(v.dims, dtype=bool)
        half[:mid] = True
        return _stack_probabilities(fg & half, fg & ~half, v.spacing)


def synthetic_segment(
    v: Volume3,
    left_mask: Volume3,
    right_mask: Volume3,
    boundary_noise: bool = False,
    seed: int = 0,
) -> tuple[Volume3, Volume3, Volume3]:
    """Probability channels (background, left, right) from truth masks."""
    seg = TruthMaskSegmenter(left_mask, right_mask, boundary_noise=boundary_noise, seed=seed)
    return seg.predict(v)
