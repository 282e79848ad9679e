"""Reproducible experiments over phantom cohorts.

Three commands, mirrored by the CLI: generate a cohort to disk, run the
pipeline plus the uncertainty modes over it, and analyze dispersion
scores into a rejection report. All outputs are deterministic functions
of the configuration: every random draw derives from (seed, case id,
side, mode), rows are sorted before writing, and per-row runtimes are
kept out of results.csv (they live in timings.csv and the per-case JSON)
so repeated runs produce byte-identical result files.

results.csv column order (the stability contract):
    case_id, side, mode, status,
    pred_x, pred_y, pred_z, truth_x, truth_y, truth_z,
    error_mm, mad, flagged
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from voxloc.heatmap import HeatmapSpec
from voxloc.phantom import PhantomSpec, load_case_volumes, read_manifest, write_cohort
from voxloc.pipeline import PipelineConfig, PipelineFailureError, run_pipeline
from voxloc.predictors import (
    ConvNetLocalizer,
    ConvNetSpec,
    MarkerLocalizer,
    OracleLocalizerConfig,
    TruthMaskSegmenter,
)
from voxloc.transforms import TransformPriors
from voxloc.uncertainty import McConfig, rejection_stats, run_mode
from voxloc.volume import flip_lr

__all__ = [
    "UsageError",
    "SchemaError",
    "MODE_ORDER",
    "RESULT_COLUMNS",
    "ExperimentConfig",
    "load_config",
    "config_hash",
    "cmd_generate",
    "cmd_run",
    "cmd_analyze",
]

log = logging.getLogger(__name__)

MODE_ORDER = ("baseline", "mcdo", "tta", "hybrid")
RESULT_COLUMNS = (
    "case_id",
    "side",
    "mode",
    "status",
    "pred_x",
    "pred_y",
    "pred_z",
    "truth_x",
    "truth_y",
    "truth_z",
    "error_mm",
    "mad",
    "flagged",
)
SIDES = ("left", "right")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARTIAL = 3
EXIT_IO = 4


class UsageError(Exception):
    """Invalid request (bad flag values, impossible sizes)."""


class SchemaError(Exception):
    """An input file does not have the expected structure."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a generate/run/analyze round needs, JSON-serializable."""

    cohort_dir: str = "cohort"
    out_dir: str = "results"
    n_cases: int = 10
    n_hard: int = 0
    dims: tuple[int, int, int] = (128, 128, 128)
    modes: tuple[str, ...] = MODE_ORDER
    n_samples: int = 20
    jitter_std: float = 0.5
    hard_failure_rate: float = 0.0
    shift_range_mm: tuple[float, float] = (-10.0, 10.0)
    rotate_range_deg: tuple[float, float] = (-20.0, 20.0)
    curve_range: tuple[float, float] = (0.25, 0.75)
    heatmap_sigma_mm: float = 1.5
    seed: int = 0
    workers: int = 1
    weight_file: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "shift_range_mm", tuple(float(x) for x in self.shift_range_mm))
        object.__setattr__(self, "rotate_range_deg", tuple(float(x) for x in self.rotate_range_deg))
        object.__setattr__(self, "curve_range", tuple(float(x) for x in self.curve_range))
        if not self.modes or len(set(self.modes)) != len(self.modes):
            raise UsageError(f"modes must be a nonempty set, got {self.modes}")
        unknown = [m for m in self.modes if m not in MODE_ORDER]
        if unknown:
            raise UsageError(f"unknown modes {unknown}; choose from {MODE_ORDER}")
        if self.n_samples < 2:
            raise UsageError(f"n_samples must be >= 2, got {self.n_samples}")
        if self.workers < 1:
            raise UsageError(f"workers must be >= 1, got {self.workers}")
        if not 0.0 <= self.hard_failure_rate <= 1.0:
            raise UsageError(f"hard_failure_rate must lie in [0,1], got {self.hard_failure_rate}")
        if self.weight_file is not None and not Path(self.weight_file).exists():
            raise UsageError(f"weight file {self.weight_file} does not exist")

    @property
    def priors(self) -> TransformPriors:
        return TransformPriors(
            s_range=self.shift_range_mm,
            r_range=self.rotate_range_deg,
            curve_control_range=self.curve_range,
        )

    def to_json(self) -> dict:
        obj = asdict(self)
        for key, value in obj.items():
            if isinstance(value, tuple):
                obj[key] = list(value)
        return obj


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Config from an optional JSON file with keyword overrides on top."""
    fields = {}
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except OSError as exc:
            raise SchemaError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise SchemaError(f"config {path} must hold a JSON object")
        known = set(ExperimentConfig.__dataclass_fields__)
        unknown = sorted(set(loaded) - known)
        if unknown:
            raise SchemaError(f"config {path} has unknown keys {unknown}")
        fields.update(loaded)
    fields.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**fields)
    except TypeError as exc:
        raise SchemaError(f"bad config: {exc}") from exc


# Paths and worker counts are execution details; two runs of the same
# experiment must carry the same hash no matter where or how wide they ran.
_HASH_EXCLUDED = ("cohort_dir", "out_dir", "workers")


def config_hash(cfg: ExperimentConfig) -> str:
    obj = {k: v for k, v in cfg.to_json().items() if k not in _HASH_EXCLUDED}
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def derive_seed(*path: int) -> int:
    return int(np.random.SeedSequence(list(path)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig) -> int:
    if cfg.n_cases < 1:
        raise UsageError(f"cohort size must be >= 1, got {cfg.n_cases}")
    if cfg.n_hard > cfg.n_cases:
        raise UsageError(f"n_hard {cfg.n_hard} exceeds cohort size {cfg.n_cases}")
    base = PhantomSpec(dims=cfg.dims)
    write_cohort(
        cfg.cohort_dir,
        cfg.n_cases,
        n_hard=cfg.n_hard,
        seed=cfg.seed,
        base_spec=base,
        meta={"config_hash": config_hash(cfg)},
    )
    log.info("wrote %d cases to %s", cfg.n_cases, cfg.cohort_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _build_localizer(cfg: ExperimentConfig, failure_rate: float):
    oracle = OracleLocalizerConfig(
        jitter_std=cfg.jitter_std,
        failure_rate=failure_rate,
        heatmap=HeatmapSpec(sigma_mm=cfg.heatmap_sigma_mm),
    )
    if cfg.weight_file is not None:
        return ConvNetLocalizer.from_file(ConvNetSpec(), cfg.weight_file)
    return MarkerLocalizer(oracle)


def _failed_rows(cfg: ExperimentConfig, case_id: int, truths: dict, sides=SIDES) -> list[dict]:
    rows = []
    for side in sides:
        truth = truths[side]
        for mode in cfg.modes:
            rows.append(
                {
                    "case_id": case_id,
                    "side": side,
                    "mode": mode,
                    "status": "failed",
                    "pred": None,
                    "truth": truth,
                    "error_mm": None,
                    "mad": None,
                    "flagged": None,
                    "runtime_ms": 0.0,
                }
            )
    return rows


def _case_task(args: tuple[dict, str, dict]) -> tuple[list[dict], dict]:
    cfg_fields, manifest_path, entry = args
    cfg = ExperimentConfig(**cfg_fields)
    case_id = int(entry["id"])
    truths = {s: list(map(float, entry["truth_targets"][s])) for s in SIDES}
    case_json: dict = {
        "case_id": case_id,
        "hard": bool(entry["hard"]),
        "modes": {},
    }

    try:
        image, left_mask, right_mask = load_case_volumes(manifest_path, entry)
    except Exception as exc:  # noqa: BLE001 - any load problem fails the case
        case_json["error"] = str(exc)
        return _failed_rows(cfg, case_id, truths), case_json

    failure_rate = cfg.hard_failure_rate if entry["hard"] else 0.0
    localizer = _build_localizer(cfg, failure_rate)
    pipeline_cfg = PipelineConfig(
        segmenter=TruthMaskSegmenter(left_mask, right_mask),
        localizer=localizer,
        heatmap=HeatmapSpec(sigma_mm=cfg.heatmap_sigma_mm),
    )
    try:
        result = run_pipeline(pipeline_cfg, image)
    except PipelineFailureError as exc:
        case_json["error"] = str(exc)
        return _failed_rows(cfg, case_id, truths), case_json

    case_json["pipeline"] = result.to_json()
    dims = np.asarray(image.dims, dtype=np.float64)
    spacing = np.asarray(image.spacing)
    rows: list[dict] = []
    for side_idx, side in enumerate(SIDES):
        truth = np.asarray(truths[side])
        if side not in result.sides:
            rows.extend(_failed_rows(cfg, case_id, truths, sides=(side,)))
            continue
        side_res = result.sides[side]
        crop_in = flip_lr(side_res.crop) if side == "left" else side_res.crop
        extent0 = side_res.crop.dims[0]
        low = np.asarray(side_res.box.low, dtype=np.float64)
        for mode in cfg.modes:
            mode_idx = MODE_ORDER.index(mode)
            t0 = time.perf_counter()
            mad_val = None
            try:
                if mode == "baseline":
                    pred = side_res.target.as_array.copy()
                else:
                    mc = McConfig(
                        mode=mode,
                        n_samples=cfg.n_samples,
                        priors=cfg.priors,
                        base_seed=derive_seed(cfg.seed, case_id, side_idx, mode_idx),
                        keep_samples=False,
                    )
                    summary = run_mode(localizer, crop_in, mc)
                    peak = summary.final_target.as_array.copy()
                    if side == "left":
                        peak[0] = extent0 - 1 - peak[0]
                    pred = np.clip(low + peak, 0.0, dims - 1.0)
                    mad_val = float(summary.mad)
                status = "ok"
                error_mm = float(np.linalg.norm((pred - truth) * spacing))
            except Exception as exc:  # noqa: BLE001 - a mode failure is a row failure
                rows.append(
                    {
                        "case_id": case_id,
                        "side": side,
                        "mode": mode,
                        "status": "failed",
                        "pred": None,
                        "truth": truths[side],
                        "error_mm": None,
                        "mad": None,
                        "flagged": None,
                        "runtime_ms": (time.perf_counter() - t0) * 1e3,
                    }
                )
                case_json.setdefault("mode_errors", {})[f"{side}/{mode}"] = str(exc)
                continue
            runtime_ms = (time.perf_counter() - t0) * 1e3
            rows.append(
                {
                    "case_id": case_id,
                    "side": side,
                    "mode": mode,
                    "status": status,
                    "pred": [float(p) for p in pred],
                    "truth": truths[side],
                    "error_mm": error_mm,
                    "mad": mad_val,
                    "flagged": None,
                    "runtime_ms": runtime_ms,
                }
            )
            case_json["modes"].setdefault(mode, {})[side] = {
                "pred": [float(p) for p in pred],
                "error_mm": error_mm,
                "mad": mad_val,
            }
    return rows, case_json


def _apply_flags(rows: list[dict], modes) -> None:
    """Mark rows above the per-mode upper fence; needs >= 4 scores per mode."""
    for mode in modes:
        if mode == "baseline":
            continue
        indexed = [(i, r["mad"]) for i, r in enumerate(rows) if r["mode"] == mode and r["mad"] is not None]
        if len(indexed) < 4:
            log.warning("mode %s has %d dispersion scores; need 4 to flag", mode, len(indexed))
            continue
        stats = rejection_stats([m for _, m in indexed])
        flagged = set(stats.flagged)
        for pos, (row_idx, _) in enumerate(indexed):
            rows[row_idx]["flagged"] = pos in flagged


def _fmt(value, kind: str) -> str:
    if value is None:
        return ""
    if kind == "float":
        return f"{value:.6f}"
    if kind == "bool":
        return "true" if value else "false"
    return str(value)


def _write_results_csv(path: Path, rows: list[dict], header_comment: str) -> None:
    buf = io.StringIO()
    buf.write(header_comment + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for r in rows:
        pred = r["pred"] or (None, None, None)
        truth = r["truth"] or (None, None, None)
        writer.writerow(
            [
                r["case_id"],
                r["side"],
                r["mode"],
                r["status"],
                _fmt(pred[0], "float"),
                _fmt(pred[1], "float"),
                _fmt(pred[2], "float"),
                _fmt(truth[0], "float"),
                _fmt(truth[1], "float"),
                _fmt(truth[2], "float"),
                _fmt(r["error_mm"], "float"),
                _fmt(r["mad"], "float"),
                _fmt(r["flagged"], "bool"),
            ]
        )
    path.write_text(buf.getvalue())


def _write_timings_csv(path: Path, rows: list[dict], header_comment: str) -> None:
    buf = io.StringIO()
    buf.write(header_comment + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["case_id", "side", "mode", "runtime_ms"])
    for r in rows:
        writer.writerow([r["case_id"], r["side"], r["mode"], f"{r['runtime_ms']:.3f}"])
    path.write_text(buf.getvalue())


def cmd_run(cfg: ExperimentConfig) -> int:
    manifest_path = Path(cfg.cohort_dir) / "manifest.json"
    if not manifest_path.exists():
        raise SchemaError(f"no cohort manifest at {manifest_path}; run generate first")
    manifest = read_manifest(manifest_path)
    entries = manifest.get("cases")
    if not entries:
        raise SchemaError(f"manifest {manifest_path} lists no cases")

    cfg_fields = {**asdict(cfg)}
    tasks = [(cfg_fields, str(manifest_path), entry) for entry in entries]
    if cfg.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(_case_task, tasks))
    else:
        outcomes = [_case_task(t) for t in tasks]

    rows: list[dict] = []
    case_jsons: list[dict] = []
    for case_rows, case_json in outcomes:
        rows.extend(case_rows)
        case_jsons.append(case_json)
    rows.sort(key=lambda r: (r["case_id"], r["side"], MODE_ORDER.index(r["mode"])))
    _apply_flags(rows, cfg.modes)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    comment = f"# config_hash={digest} seed={cfg.seed}"
    _write_results_csv(out_dir / "results.csv", rows, comment)
    _write_timings_csv(out_dir / "timings.csv", rows, comment)
    cases_dir = out_dir / "cases"
    cases_dir.mkdir(exist_ok=True)
    for case_json in case_jsons:
        case_json["config_hash"] = digest
        case_json["seed"] = cfg.seed
        path = cases_dir / f"case_{case_json['case_id']:03d}.json"
        path.write_text(json.dumps(case_json, sort_keys=True, indent=2) + "\n")

    n_failed = sum(1 for r in rows if r["status"] != "ok")
    log.info("wrote %d rows (%d failed) to %s", len(rows), n_failed, out_dir / "results.csv")
    return EXIT_PARTIAL if n_failed else EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def _read_results(path: Path) -> tuple[dict, list[dict]]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise SchemaError(f"cannot read results {path}: {exc}") from exc
    meta = {}
    lines = text.splitlines()
    body_start = 0
    for line in lines:
        if not line.startswith("#"):
            break
        body_start += 1
        for token in line.lstrip("# ").split():
            if "=" in token:
                key, value = token.split("=", 1)
                meta[key] = value
    reader = csv.DictReader(io.StringIO("\n".join(lines[body_start:])))
    if reader.fieldnames is None or not set(RESULT_COLUMNS) <= set(reader.fieldnames):
        missing = sorted(set(RESULT_COLUMNS) - set(reader.fieldnames or ()))
        raise SchemaError(f"results file {path} is missing columns {missing}")
    return meta, list(reader)


def cmd_analyze(results_path: str | Path, manifest_path: str | Path, out_dir: str | Path) -> int:
    results_path = Path(results_path)
    meta, records = _read_results(results_path)
    try:
        manifest = read_manifest(manifest_path)
        hard_cases = sorted(int(c["id"]) for c in manifest["cases"] if c["hard"])
    except OSError as exc:
        raise SchemaError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"manifest {manifest_path} is malformed: {exc}") from exc

    modes_present = []
    for r in records:
        if r["mode"] not in modes_present:
            modes_present.append(r["mode"])

    long_rows: list[dict] = []
    report_modes: dict[str, dict] = {}
    for mode in modes_present:
        if mode == "baseline":
            continue
        scored = [r for r in records if r["mode"] == mode and r["status"] == "ok" and r["mad"] != ""]
        if len(scored) < 4:
            log.warning("mode %s has %d scored rows; need 4, skipping", mode, len(scored))
            continue
        mads = [float(r["mad"]) for r in scored]
        stats = rejection_stats(mads)
        flagged_set = set(stats.flagged)
        flagged_cases = sorted({int(scored[i]["case_id"]) for i in flagged_set})
        hits = set(flagged_cases) & set(hard_cases)
        recall = len(hits) / len(hard_cases) if hard_cases else None
        precision = len(hits) / len(flagged_cases) if flagged_cases else None
        report_modes[mode] = {
            "stats": stats.to_json(),
            "flagged_cases": flagged_cases,
            "recall": recall,
            "precision": precision,
            "n_scored": len(scored),
        }
        hard_lookup = set(hard_cases)
        for i, r in enumerate(scored):
            long_rows.append(
                {
                    "case_id": int(r["case_id"]),
                    "side": r["side"],
                    "mode": mode,
                    "mad": float(r["mad"]),
                    "flagged": i in flagged_set,
                    "hard": int(r["case_id"]) in hard_lookup,
                }
            )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {
        "config_hash": meta.get("config_hash", ""),
        "seed": meta.get("seed", ""),
        "hard_cases": hard_cases,
        "modes": report_modes,
    }
    (out_dir / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")

    long_rows.sort(key=lambda r: (r["case_id"], r["side"], MODE_ORDER.index(r["mode"])))
    buf = io.StringIO()
    buf.write(f"# config_hash={meta.get('config_hash', '')} seed={meta.get('seed', '')}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["case_id", "side", "mode", "mad", "flagged", "hard"])
    for r in long_rows:
        writer.writerow(
            [
                r["case_id"],
                r["side"],
                r["mode"],
                f"{r['mad']:.6f}",
                "true" if r["flagged"] else "false",
                "true" if r["hard"] else "false",
            ]
        )
    (out_dir / "analysis_long.csv").write_text(buf.getvalue())
    log.info("wrote report for %d modes to %s", len(report_modes), out_dir)
    return EXIT_OK
