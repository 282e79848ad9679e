"""Synthetic phantom volumes with known structures and targets.

Each phantom holds two ellipsoidal "thalami" on a flat background, a
bright compact marker painted at each latent target (so content-based
localizers have something to find), and optional difficulty knobs:
a lateral displacement that pushes the structures apart (standing in
for enlarged ventricles), additive Gaussian noise and a multiplicative
low-order polynomial bias field. Masks are exact ellipsoid lattices
computed before noise, and targets are transported with the
displacement, so ground truth stays analytic for every knob setting.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from voxloc.heatmap import HeatmapSpec, TargetPoint, gaussian_heatmap
from voxloc.volume import Volume3, read_volume, rescale_intensity, write_volume

__all__ = [
    "InfeasibleSpecError",
    "PhantomSpec",
    "PhantomCase",
    "generate_phantom",
    "CohortEntry",
    "hard_case_ids",
    "cohort_case_spec",
    "iter_cohort",
    "generate_cohort",
    "write_cohort",
    "read_manifest",
]


class InfeasibleSpecError(Exception):
    """The requested phantom geometry cannot be realized."""


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and corruption knobs for one phantom.

    The two structures sit symmetrically about the volume midplane at
    ``lateral_offset_mm`` (plus ``ventricle_enlargement_mm``) from the
    center along axis 0. The latent target of each structure lies at a
    fixed fractional offset of the semi-axes from its center, mirrored
    in x for the right side.
    """

    dims: tuple[int, int, int] = (192, 192, 192)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    semi_axes_mm: tuple[float, float, float] = (10.0, 14.0, 11.0)
    lateral_offset_mm: float = 16.0
    structure_intensity: float = 0.62
    background_intensity: float = 0.12
    edge_width: float = 0.15
    # x fraction is negative so each target (and its marker) sits on the
    # lateral side, keeping the opposite marker out of a 64-voxel crop
    target_offset_frac: tuple[float, float, float] = (-0.2, -0.25, 0.15)
    marker_amplitude: float = 0.38
    marker_sigma_mm: float = 1.2
    ventricle_enlargement_mm: float = 0.0
    noise_std: float = 0.0
    bias_field_amplitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 64 for d in dims):
            # both 64-voxel crops must fit the volume
            raise ValueError(f"dims must be >= 64 per axis, got {dims}")
        spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        if any(a <= 0 for a in self.semi_axes_mm):
            raise ValueError(f"semi-axes must be positive, got {self.semi_axes_mm}")
        if self.lateral_offset_mm <= 0:
            raise ValueError("lateral offset must be positive")
        if not 0.0 <= self.background_intensity < self.structure_intensity <= 1.0:
            raise ValueError("need 0 <= background < structure intensity <= 1")
        if not 0.0 < self.edge_width < 1.0:
            raise ValueError(f"edge width must lie in (0,1), got {self.edge_width}")
        if any(abs(f) >= 0.9 for f in self.target_offset_frac):
            raise ValueError("target offset fractions must keep the target inside the mask")
        if self.marker_amplitude < 0 or self.marker_sigma_mm <= 0:
            raise ValueError("marker amplitude must be >= 0 with positive sigma")
        if self.ventricle_enlargement_mm < 0 or self.noise_std < 0 or self.bias_field_amplitude < 0:
            raise ValueError("corruption knobs must be >= 0")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "semi_axes_mm", tuple(float(a) for a in self.semi_axes_mm))
        object.__setattr__(self, "target_offset_frac", tuple(float(f) for f in self.target_offset_frac))

    def structure_centers_mm(self) -> tuple[np.ndarray, np.ndarray]:
        """Left and right structure centers in mm, displacement applied."""
        mid = (np.asarray(self.dims, dtype=np.float64) - 1.0) * np.asarray(self.spacing) / 2.0
        shift = self.lateral_offset_mm + self.ventricle_enlargement_mm
        left = mid - np.array([shift, 0.0, 0.0])
        right = mid + np.array([shift, 0.0, 0.0])
        return left, right

    def target_positions(self) -> tuple[TargetPoint, TargetPoint]:
        """Latent targets in voxel coordinates, transported with the centers."""
        left_c, right_c = self.structure_centers_mm()
        frac = np.asarray(self.target_offset_frac)
        axes = np.asarray(self.semi_axes_mm)
        mirror = np.array([-1.0, 1.0, 1.0])
        left_mm = left_c + frac * axes
        right_mm = right_c + frac * axes * mirror
        sp = np.asarray(self.spacing)
        return (
            TargetPoint(tuple(left_mm / sp), side="left"),
            TargetPoint(tuple(right_mm / sp), side="right"),
        )


@dataclass(frozen=True)
class PhantomCase:
    """One generated phantom with its ground truth."""

    image: Volume3
    left_mask: Volume3
    right_mask: Volume3
    truth_left: TargetPoint
    truth_right: TargetPoint
    spec: PhantomSpec

    def truth(self, side: str) -> TargetPoint:
        if side == "left":
            return self.truth_left
        if side == "right":
            return self.truth_right
        raise ValueError(f"unknown side {side!r}")


def _rho_squared(spec: PhantomSpec, center_mm: np.ndarray) -> np.ndarray:
    # separable normalized ellipsoid radius, built by broadcast
    parts = []
    for axis in range(3):
        coords = np.arange(spec.dims[axis], dtype=np.float64) * spec.spacing[axis]
        parts.append(((coords - center_mm[axis]) / spec.semi_axes_mm[axis]) ** 2)
    return (
        parts[0][:, None, None] + parts[1][None, :, None] + parts[2][None, None, :]
    )


def _edge_profile(rho2: np.ndarray, width: float) -> np.ndarray:
    # 1 inside, cosine rolloff across [1-width, 1+width] in rho, 0 outside
    rho = np.sqrt(rho2)
    t = np.clip((rho - (1.0 - width)) / (2.0 * width), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * t))


def _bias_field(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    # quadratic polynomial in normalized coords, peak magnitude 1, no constant term
    coeffs = rng.uniform(-1.0, 1.0, 9)
    u = [np.linspace(-1.0, 1.0, d) if d > 1 else np.zeros(1) for d in spec.dims]
    U = u[0][:, None, None]
    V = u[1][None, :, None]
    W = u[2][None, None, :]
    p = (
        coeffs[0] * U + coeffs[1] * V + coeffs[2] * W
        + coeffs[3] * U * V + coeffs[4] * U * W + coeffs[5] * V * W
        + coeffs[6] * U**2 + coeffs[7] * V**2 + coeffs[8] * W**2
    )
    peak = np.abs(p).max()
    if peak > 0:
        p /= peak
    return 1.0 + spec.bias_field_amplitude * p


def generate_phantom(spec: PhantomSpec) -> PhantomCase:
    """Build one phantom deterministically from its spec.

    Random draws happen in a fixed order (bias coefficients, then noise)
    so the same seed always yields a bitwise-identical case.
    """
    rng = np.random.default_rng(spec.seed)
    left_c, right_c = spec.structure_centers_mm()
    rho2_left = _rho_squared(spec, left_c)
    rho2_right = _rho_squared(spec, right_c)

    left_mask = rho2_left <= 1.0
    right_mask = rho2_right <= 1.0
    if not left_mask.any() or not right_mask.any():
        raise InfeasibleSpecError("a structure lies outside the volume")
    if (left_mask & right_mask).any():
        raise InfeasibleSpecError("structures overlap; reduce size or displacement")

    amplitude = spec.structure_intensity - spec.background_intensity
    profile = np.maximum(
        _edge_profile(rho2_left, spec.edge_width),
        _edge_profile(rho2_right, spec.edge_width),
    )
    img = spec.background_intensity + amplitude * profile

    truth_left, truth_right = spec.target_positions()
    marker = HeatmapSpec(sigma_mm=spec.marker_sigma_mm, cutoff=0.004, peak=1.0)
    for truth in (truth_left, truth_right):
        bump = gaussian_heatmap(marker, TargetPoint(truth.position), spec.dims, spec.spacing)
        img += spec.marker_amplitude * bump.data

    if spec.bias_field_amplitude > 0:
        img *= _bias_field(spec, rng)
    if spec.noise_std > 0:
        img += rng.normal(0.0, spec.noise_std, spec.dims)

    image = rescale_intensity(Volume3(img, spec.spacing))
    image = Volume3(image.data.astype(np.float32), spec.spacing)

    for truth, mask in ((truth_left, left_mask), (truth_right, right_mask)):
        idx = tuple(int(round(p)) for p in truth.position)
        if not mask[idx]:
            raise InfeasibleSpecError(f"target {truth.position} fell outside its mask")

    return PhantomCase(
        image=image,
        left_mask=Volume3(left_mask.astype(np.float32), spec.spacing),
        right_mask=Volume3(right_mask.astype(np.float32), spec.spacing),
        truth_left=truth_left,
        truth_right=truth_right,
        spec=spec,
    )


# ---------------------------------------------------------------------------
# cohorts
# ---------------------------------------------------------------------------


class CohortEntry(NamedTuple):
    case_id: int
    case: PhantomCase
    hard: bool


EASY_ENLARGEMENT_MM = (0.0, 1.0)
EASY_NOISE_STD = (0.01, 0.02)
HARD_ENLARGEMENT_MM = (5.0, 6.0)
HARD_NOISE_STD = (0.06, 0.1)


def hard_case_ids(n: int, n_hard: int, seed: int) -> tuple[int, ...]:
    """Which case ids carry the hard profile; depends only on (n, n_hard, seed)."""
    if not 0 <= n_hard <= n:
        raise ValueError(f"need 0 <= n_hard <= n, got n_hard={n_hard}, n={n}")
    if n_hard == 0:
        return ()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    return tuple(sorted(int(i) for i in rng.choice(n, size=n_hard, replace=False)))


def cohort_case_spec(case_id: int, seed: int, base: PhantomSpec, hard: bool) -> PhantomSpec:
    """Spec for one cohort case; a function of (seed, case_id) only.

    Every case draws mild anatomy variation and noise so distinct seeds
    give distinct images; hard cases get large displacement plus heavy
    noise on top.
    """
    case_seed = int(np.random.SeedSequence([seed, case_id]).generate_state(1)[0])
    rng = np.random.default_rng(np.random.SeedSequence([seed, case_id, 1]))
    enlargement = HARD_ENLARGEMENT_MM if hard else EASY_ENLARGEMENT_MM
    noise = HARD_NOISE_STD if hard else EASY_NOISE_STD
    return replace(
        base,
        seed=case_seed,
        ventricle_enlargement_mm=float(rng.uniform(*enlargement)),
        noise_std=float(rng.uniform(*noise)),
    )


def iter_cohort(
    n: int,
    n_hard: int = 0,
    seed: int = 0,
    base_spec: PhantomSpec | None = None,
) -> Iterator[CohortEntry]:
    if n < 1:
        raise ValueError(f"cohort size must be >= 1, got {n}")
    base = base_spec or PhantomSpec()
    hard = set(hard_case_ids(n, n_hard, seed))
    for i in range(n):
        spec = cohort_case_spec(i, seed, base, i in hard)
        yield CohortEntry(i, generate_phantom(spec), i in hard)


def generate_cohort(
    n: int,
    n_hard: int = 0,
    seed: int = 0,
    base_spec: PhantomSpec | None = None,
) -> list[PhantomCase]:
    return [entry.case for entry in iter_cohort(n, n_hard, seed, base_spec)]


def _spec_echo(spec: PhantomSpec) -> dict:
    echo = asdict(spec)
    for key, value in echo.items():
        if isinstance(value, tuple):
            echo[key] = list(value)
    return echo


def write_cohort(
    out_dir: str | Path,
    n: int,
    n_hard: int = 0,
    seed: int = 0,
    base_spec: PhantomSpec | None = None,
    meta: dict | None = None,
) -> dict:
    """Generate a cohort to disk and return the written manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = []
    for case_id, case, hard in iter_cohort(n, n_hard, seed, base_spec):
        case_dir = out_dir / f"case_{case_id:03d}"
        case_dir.mkdir(exist_ok=True)
        files = {}
        for name, vol in (
            ("image", case.image),
            ("left_mask", case.left_mask),
            ("right_mask", case.right_mask),
        ):
            write_volume(vol, case_dir / f"{name}.json")
            files[name] = f"case_{case_id:03d}/{name}.json"
        cases.append(
            {
                "id": case_id,
                "files": files,
                "truth_targets": {
                    "left": list(case.truth_left.position),
                    "right": list(case.truth_right.position),
                },
                "hard": hard,
                "spec": _spec_echo(case.spec),
            }
        )
    manifest = {"seed": seed, "n": n, "n_hard": n_hard, "cases": cases}
    if meta:
        manifest.update(meta)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def load_case_volumes(manifest_path: str | Path, entry: dict) -> tuple[Volume3, Volume3, Volume3]:
    """Read (image, left mask, right mask) for one manifest entry."""
    root = Path(manifest_path).parent
    files = entry["files"]
    return (
        read_volume(root / files["image"]),
        read_volume(root / files["left_mask"]),
        read_volume(root / files["right_mask"]),
    )
