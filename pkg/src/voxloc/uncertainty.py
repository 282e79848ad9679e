"""Sampling-based uncertainty: dropout passes, augmentation passes, MAD.

Three samplers share one aggregation: N heatmaps (all mapped back to the
original orientation) reduce to a voxelwise mean and population variance,
per-sample argmax positions, their centroid, and the mean distance of the
positions from that centroid (the dispersion score used for rejection).
The final target of a run is the argmax of the mean map.

Samplers:
* dropout passes: stochastic predictor on the untransformed input,
  seeds ``base_seed + i``.
* augmentation passes: per sample, draw a rigid + intensity transform,
  undo it on the input (spatial inverse with trilinear resampling, then
  the intensity inverse), predict deterministically, and map the heatmap
  back through the forward spatial transform.
* hybrid: the augmentation chain with the stochastic predictor, so both
  randomness sources are active.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from voxloc.heatmap import TargetPoint, argmax_position
from voxloc.predictors import Localizer
from voxloc.transforms import TransformPriors, intensity_apply_inverse, rigid_apply, sample_transform
from voxloc.volume import Volume3, write_volume

__all__ = [
    "SamplingError",
    "McConfig",
    "UncertaintySummary",
    "mean_variance",
    "mad",
    "run_mcdo",
    "run_tta",
    "run_hybrid",
    "run_mode",
    "BoxplotStats",
    "rejection_stats",
    "write_summary_maps",
]

MODES = ("mcdo", "tta", "hybrid")


class SamplingError(Exception):
    """A Monte Carlo pass failed; carries the sample index."""

    def __init__(self, index: int, message: str):
        super().__init__(f"sample {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class McConfig:
    """Settings for one uncertainty run."""

    mode: str = "mcdo"
    n_samples: int = 100
    priors: TransformPriors = field(default_factory=TransformPriors)
    base_seed: int = 0
    keep_samples: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_samples < 2:
            raise ValueError(f"n_samples must be >= 2, got {self.n_samples}")


@dataclass(frozen=True)
class UncertaintySummary:
    """Aggregated output of one uncertainty run."""

    mode: str
    n_samples: int
    base_seed: int
    sample_heatmaps: tuple[Volume3, ...] | None
    mean_map: Volume3
    variance_map: Volume3
    argmax_positions: np.ndarray
    centroid: tuple[float, float, float]
    mad: float
    final_target: TargetPoint

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "n_samples": self.n_samples,
            "base_seed": self.base_seed,
            "argmax_positions": self.argmax_positions.tolist(),
            "centroid": list(self.centroid),
            "mad": self.mad,
            "final_target": list(self.final_target.position),
        }


class _Accumulator:
    """Streaming sum/sum-of-squares reduction over sample heatmaps."""

    def __init__(self):
        self.n = 0
        self.total = None
        self.total_sq = None
        self.spacing = None
        self.dims = None

    def add(self, v: Volume3) -> None:
        data = v.data.astype(np.float64, copy=False)
        if self.total is None:
            self.total = data.copy()
            self.total_sq = data * data
            self.spacing = v.spacing
            self.dims = v.dims
        else:
            if v.dims != self.dims:
                raise ValueError(f"sample dims {v.dims} do not match {self.dims}")
            self.total += data
            self.total_sq += data * data
        self.n += 1

    def finalize(self) -> tuple[Volume3, Volume3]:
        mean = self.total / self.n
        var = self.total_sq / self.n - mean * mean
        np.maximum(var, 0.0, out=var)  # rounding can leave tiny negatives
        return Volume3(mean, self.spacing), Volume3(var, self.spacing)


def mean_variance(samples: Sequence[Volume3]) -> tuple[Volume3, Volume3]:
    """Voxelwise mean and population variance of a sample stack."""
    if len(samples) < 2:
        raise ValueError(f"need at least 2 samples, got {len(samples)}")
    acc = _Accumulator()
    for s in samples:
        acc.add(s)
    return acc.finalize()


def mad(positions) -> float:
    """Mean Euclidean distance of positions from their centroid."""
    pts = np.asarray(positions, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("mad of an empty position set")
    pts = pts.reshape(-1, 3)
    centroid = pts.mean(axis=0)
    return float(np.linalg.norm(pts - centroid, axis=1).mean())


def _aggregate(cfg: McConfig, sample_fn: Callable[[int], Volume3]) -> UncertaintySummary:
    acc = _Accumulator()
    kept = [] if cfg.keep_samples else None
    positions = np.empty((cfg.n_samples, 3), dtype=np.float64)
    for i in range(cfg.n_samples):
        try:
            sample = sample_fn(i)
        except Exception as exc:  # noqa: BLE001 - re-raised with the index
            raise SamplingError(i, str(exc)) from exc
        acc.add(sample)
        positions[i] = argmax_position(sample).as_array
        if kept is not None:
            kept.append(sample)
    mean_map, variance_map = acc.finalize()
    centroid = positions.mean(axis=0)
    return UncertaintySummary(
        mode=cfg.mode,
        n_samples=cfg.n_samples,
        base_seed=cfg.base_seed,
        sample_heatmaps=tuple(kept) if kept is not None else None,
        mean_map=mean_map,
        variance_map=variance_map,
        argmax_positions=positions,
        centroid=tuple(float(c) for c in centroid),
        mad=mad(positions),
        final_target=argmax_position(mean_map),
    )


def run_mcdo(loc: Localizer, v: Volume3, cfg: McConfig) -> UncertaintySummary:
    """Stochastic predictor passes on the untransformed input."""
    if cfg.mode != "mcdo":
        raise ValueError(f"config mode is {cfg.mode!r}, expected 'mcdo'")
    return _aggregate(cfg, lambda i: loc.predict(v, stochastic=True, seed=cfg.base_seed + i))


def _augmented_sample(loc: Localizer, v: Volume3, cfg: McConfig, i: int, stochastic: bool) -> Volume3:
    seed = cfg.base_seed + i
    tf, curve = sample_transform(cfg.priors, seed)
    undone = rigid_apply(tf.invert(), v, interpolation="trilinear")
    latent = intensity_apply_inverse(curve, undone)
    heat = loc.predict(latent, stochastic=stochastic, seed=seed)
    return rigid_apply(tf, heat, interpolation="trilinear")


def run_tta(loc: Localizer, v: Volume3, cfg: McConfig) -> UncertaintySummary:
    """Augmentation passes with the deterministic predictor."""
    if cfg.mode != "tta":
        raise ValueError(f"config mode is {cfg.mode!r}, expected 'tta'")
    return _aggregate(cfg, lambda i: _augmented_sample(loc, v, cfg, i, stochastic=False))


def run_hybrid(loc: Localizer, v: Volume3, cfg: McConfig) -> UncertaintySummary:
    """Augmentation passes with the stochastic predictor."""
    if cfg.mode != "hybrid":
        raise ValueError(f"config mode is {cfg.mode!r}, expected 'hybrid'")
    return _aggregate(cfg, lambda i: _augmented_sample(loc, v, cfg, i, stochastic=True))


def run_mode(loc: Localizer, v: Volume3, cfg: McConfig) -> UncertaintySummary:
    """Dispatch on cfg.mode."""
    runner = {"mcdo": run_mcdo, "tta": run_tta, "hybrid": run_hybrid}[cfg.mode]
    return runner(loc, v, cfg)


def write_summary_maps(summary: UncertaintySummary, out_dir: str | Path, prefix: str) -> dict:
    """Write mean/variance volumes plus the scalar JSON; returns file names."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {
        "mean": f"{prefix}_mean.json",
        "variance": f"{prefix}_variance.json",
        "summary": f"{prefix}_summary.json",
    }
    write_volume(summary.mean_map, out_dir / files["mean"])
    write_volume(summary.variance_map, out_dir / files["variance"])
    (out_dir / files["summary"]).write_text(json.dumps(summary.to_json(), sort_keys=True, indent=2) + "\n")
    return files


# ---------------------------------------------------------------------------
# rejection statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoxplotStats:
    """Tukey five-point summary with the upper rejection fence."""

    n: int
    q1: float
    median: float
    q3: float
    iqr: float
    fence: float
    upper_whisker: float
    flagged: tuple[int, ...]

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "q1": self.q1,
            "median": self.median,
            "q3": self.q3,
            "iqr": self.iqr,
            "fence": self.fence,
            "upper_whisker": self.upper_whisker,
            "flagged": list(self.flagged),
        }


def rejection_stats(values: Iterable[float]) -> BoxplotStats:
    """Flag values above Q3 + 1.5*IQR (linear-interpolation quantiles)."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.ndim != 1 or len(vals) < 4:
        raise ValueError(f"need at least 4 scalar values, got {vals.shape}")
    q1, median, q3 = (float(q) for q in np.percentile(vals, [25.0, 50.0, 75.0]))
    iqr = q3 - q1
    fence = q3 + 1.5 * iqr
    below = vals[vals <= fence]
    upper_whisker = float(below.max())
    flagged = tuple(int(i) for i in np.flatnonzero(vals > fence))
    return BoxplotStats(
        n=len(vals),
        q1=q1,
        median=median,
        q3=q3,
        iqr=iqr,
        fence=fence,
        upper_whisker=upper_whisker,
        flagged=flagged,
    )
