"""Configuration-driven experiment runner and report writers.

A run covers every (object, baseline, scene) cell. Scene ``i`` uses seed
``seed + i`` at every baseline and for every approach, so comparisons across
baselines and approaches are paired. Results are written as CSV (one row per
scene and approach) plus plain-text and CSV summaries and per-object recall
curves. All numbers are synthetic analogs produced by oracle sensors.
"""

from __future__ import annotations

import configparser
import csv
import io
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid, StereoPoseError
from .metrics import RECALL_THRESHOLD, evaluate_pose, keypoint_error, recall_curve
from .pipelines import APPROACHES, VolumeConfig, estimate_pose, gt_pose_in_ref
from .scene import NoiseModel, load_model, observe, sample_scene
from .solver import SolverConfig

SYNTHETIC_LABEL = "synthetic analog (oracle sensors, no trained networks)"
PRESETS = {"linemod-gaps": {1: 0.02, 5: 0.10, 10: 0.20}}
THREADS_ENV = "STEREOPOSE_THREADS"
DEFAULT_BIN_WIDTH = 0.02


@dataclass(frozen=True)
class ExperimentConfig:
    objects: tuple[str, ...] = ("box",)
    approaches: tuple[str, ...] = APPROACHES
    baselines: tuple[float, ...] = (0.02, 0.10, 0.20)
    noise: NoiseModel = field(default_factory=NoiseModel)
    scenes_per_cell: int = 10
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    volume: VolumeConfig = field(default_factory=VolumeConfig)
    output_dir: str = "stereopose-out"
    n_keypoints: int = 9
    record_timing: bool = False

    def __post_init__(self):
        if not self.objects:
            raise ConfigInvalid("objects must be nonempty")
        if not self.approaches:
            raise ConfigInvalid("approaches must be nonempty")
        bad = [a for a in self.approaches if a not in APPROACHES]
        if bad:
            raise ConfigInvalid(f"unknown approaches {bad}; choose from {APPROACHES}")
        if len(set(self.approaches)) != len(self.approaches):
            raise ConfigInvalid("approaches repeat")
        if not self.baselines:
            raise ConfigInvalid("baselines must be nonempty")
        if any(not (b >= 0 and math.isfinite(b)) for b in self.baselines):
            raise ConfigInvalid("baselines must be finite and nonnegative")
        if self.scenes_per_cell < 1:
            raise ConfigInvalid("scenes_per_cell must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigInvalid("seed must be a 64-bit unsigned integer")
        if self.n_keypoints < 4:
            raise ConfigInvalid("n_keypoints must be >= 4")


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def _split_list(text: str, seps=",") -> list[str]:
    for s in seps[1:]:
        text = text.replace(s, seps[0])
    return [t.strip() for t in text.split(seps[0]) if t.strip()]


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigInvalid(f"not a boolean: {text!r}")


def _coerce(kind, text: str, where: str):
    try:
        if kind is bool:
            return _parse_bool(text)
        if kind is int:
            return int(text.strip(), 0)
        if kind is float:
            return float(text)
        return text.strip()
    except ValueError as exc:
        raise ConfigInvalid(f"{where}: cannot parse {text!r}") from exc


def _section_overrides(cls, section, name: str) -> dict:
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, text in section.items():
        if key not in types:
            raise ConfigInvalid(f"unknown key [{name}] {key}")
        t = types[key]
        kind = {"float": float, "int": int, "bool": bool}.get(t if isinstance(t, str) else t.__name__, str)
        out[key] = _coerce(kind, text, f"[{name}] {key}")
    return out


def baselines_from_preset(name: str) -> tuple[float, ...]:
    if name not in PRESETS:
        raise ConfigInvalid(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    return tuple(PRESETS[name][gap] for gap in sorted(PRESETS[name]))


EXPERIMENT_KEYS = {"approaches", "baselines", "preset", "scenes_per_cell", "seed", "output_dir", "n_keypoints", "record_timing"}


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from INI text.

    Sections: ``[experiment]``, ``[objects]`` (key ``models``: specs separated by
    newlines or ``;``), ``[noise]``, ``[solver]`` and ``[volume]``. Unknown
    sections or keys raise :class:`ConfigInvalid`.
    """
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigInvalid(str(exc)) from exc
    known = {"experiment", "objects", "noise", "solver", "volume"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigInvalid(f"unknown section(s) {sorted(unknown)}")

    kw: dict = {}
    if parser.has_section("experiment"):
        sec = parser["experiment"]
        extra = set(sec) - EXPERIMENT_KEYS
        if extra:
            raise ConfigInvalid(f"unknown key(s) [experiment] {sorted(extra)}")
        if "approaches" in sec:
            kw["approaches"] = tuple(a.lower() for a in _split_list(sec["approaches"]))
        if "baselines" in sec and "preset" in sec:
            raise ConfigInvalid("give either baselines or preset, not both")
        if "baselines" in sec:
            kw["baselines"] = tuple(_coerce(float, b, "[experiment] baselines") for b in _split_list(sec["baselines"]))
        if "preset" in sec:
            kw["baselines"] = baselines_from_preset(sec["preset"].strip())
        for key, kind in (("scenes_per_cell", int), ("seed", int), ("n_keypoints", int), ("record_timing", bool)):
            if key in sec:
                kw[key] = _coerce(kind, sec[key], f"[experiment] {key}")
        if "output_dir" in sec:
            kw["output_dir"] = sec["output_dir"].strip()
    if parser.has_section("objects"):
        sec = parser["objects"]
        extra = set(sec) - {"models"}
        if extra:
            raise ConfigInvalid(f"unknown key(s) [objects] {sorted(extra)}")
        models = _split_list(sec.get("models", ""), "\n;")
        if base_dir is not None:
            models = [_resolve_model(m, base_dir) for m in models]
        kw["objects"] = tuple(models)
    try:
        if parser.has_section("noise"):
            kw["noise"] = NoiseModel(**_section_overrides(NoiseModel, parser["noise"], "noise"))
        if parser.has_section("solver"):
            kw["solver"] = SolverConfig(**_section_overrides(SolverConfig, parser["solver"], "solver"))
        if parser.has_section("volume"):
            kw["volume"] = VolumeConfig(**_section_overrides(VolumeConfig, parser["volume"], "volume"))
    except ValueError as exc:
        raise ConfigInvalid(str(exc)) from exc
    return ExperimentConfig(**kw)


def _resolve_model(spec: str, base_dir: Path) -> str:
    if spec.lower().endswith(".ply") and not Path(spec).is_absolute():
        return str(base_dir / spec)
    return spec


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)


def format_config(cfg: ExperimentConfig) -> str:
    """INI text that :func:`parse_config` reads back to ``cfg``."""
    lines = ["[experiment]"]
    lines.append("approaches = " + ", ".join(cfg.approaches))
    lines.append("baselines = " + ", ".join(repr(float(b)) for b in cfg.baselines))
    for key in ("scenes_per_cell", "seed", "n_keypoints", "record_timing", "output_dir"):
        lines.append(f"{key} = {getattr(cfg, key)}")
    lines += ["", "[objects]", "models = " + "; ".join(cfg.objects)]
    for name, obj in (("noise", cfg.noise), ("solver", cfg.solver), ("volume", cfg.volume)):
        lines += ["", f"[{name}]"] + [f"{k} = {v!r}" if not isinstance(v, str) else f"{k} = {v}" for k, v in asdict(obj).items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    object: str
    approach: str
    baseline: float
    scene: int
    keypoint_error: float
    add: float
    add_s: float
    success: bool
    solve_ms: float
    seed: int
    status: str = "ok"
    keypoint_errors: tuple[float, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status == "ok"


CSV_FIELDS = [f.name for f in fields(ResultRow)]


def _approach_rank(a: str) -> int:
    return APPROACHES.index(a) if a in APPROACHES else len(APPROACHES)


def row_sort_key(row: ResultRow):
    return (row.object, _approach_rank(row.approach), row.baseline, row.scene)


@lru_cache(maxsize=16)
def _model(spec: str, n_keypoints: int):
    return load_model(spec, n_keypoints)


def run_cell(cfg: ExperimentConfig, obj: str, baseline: float, scene: int) -> list[ResultRow]:
    """All approaches on one scene; failures become rows with a status."""
    model = _model(obj, cfg.n_keypoints)
    seed = cfg.seed + scene
    nan = float("nan")

    def failed(approach, exc):
        return ResultRow(obj, approach, baseline, scene, nan, nan, nan, False, nan, seed, type(exc).__name__)

    try:
        sc = sample_scene(model, baseline, seed)
        obs = observe(model, sc, cfg.noise, seed)
    except StereoPoseError as exc:
        return [failed(a, exc) for a in cfg.approaches]
    gt = gt_pose_in_ref(obs)
    rows = []
    for approach in cfg.approaches:
        t0 = time.perf_counter()
        try:
            pose, kps = estimate_pose(approach, model, obs, cfg.solver, cfg.volume, seed)
        except (StereoPoseError, np.linalg.LinAlgError) as exc:
            rows.append(failed(approach, exc))
            continue
        ms = (time.perf_counter() - t0) * 1e3 if cfg.record_timing else nan
        errs, mean = keypoint_error(kps, obs.gt_keypoints)
        ev = evaluate_pose(model, pose, gt, errs, baseline)
        rows.append(ResultRow(obj, approach, baseline, scene, mean, ev.add, ev.add_s, ev.success, ms, seed,
                              "ok", ev.keypoint_errors))
    return rows


def _run_task(args):
    return run_cell(*args)


def worker_count(env: str | None = None) -> int:
    """Workers allowed by ``STEREOPOSE_THREADS`` (0 or unset = all CPUs)."""
    text = os.environ.get(THREADS_ENV, "0") if env is None else env
    try:
        n = int(text)
    except ValueError as exc:
        raise ConfigInvalid(f"{THREADS_ENV} must be an integer, got {text!r}") from exc
    if n < 0:
        raise ConfigInvalid(f"{THREADS_ENV} must be >= 0")
    return n or (os.cpu_count() or 1)


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> list[ResultRow]:
    """Every (object, baseline, scene) cell, rows sorted for stable output."""
    for obj in cfg.objects:
        _model(obj, cfg.n_keypoints)  # surface ModelLoadError before any work
    tasks = [(cfg, o, b, s) for o in cfg.objects for b in cfg.baselines for s in range(cfg.scenes_per_cell)]
    workers = min(worker_count() if workers is None else workers, len(tasks))
    if workers <= 1:
        chunks = [run_cell(*t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    rows = [r for chunk in chunks for r in chunk]
    return sorted(rows, key=row_sort_key)


# ---------------------------------------------------------------------------
# CSV input / output
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, tuple):
        return ";".join(_fmt(float(x)) for x in v)
    return str(v)


def _write_csv(path: Path, header: list[str], rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    return path


def write_rows(rows, path) -> Path:
    return _write_csv(Path(path), CSV_FIELDS, ([getattr(r, f) for f in CSV_FIELDS] for r in rows))


def _float(text: str) -> float:
    return float(text) if text != "" else float("nan")


def read_rows(path) -> list[ResultRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_FIELDS:
            raise ValueError(f"{path}: expected columns {CSV_FIELDS}")
        return [
            ResultRow(
                object=r["object"], approach=r["approach"], baseline=float(r["baseline"]), scene=int(r["scene"]),
                keypoint_error=_float(r["keypoint_error"]), add=_float(r["add"]), add_s=_float(r["add_s"]),
                success=r["success"] == "1", solve_ms=_float(r["solve_ms"]), seed=int(r["seed"]), status=r["status"],
                keypoint_errors=tuple(_float(x) for x in r["keypoint_errors"].split(";")) if r["keypoint_errors"] else (),
            )
            for r in reader
        ]


# ---------------------------------------------------------------------------
# Summaries and curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Summary:
    keypoint_table: list[tuple]  # approach, baseline, mean error, ok rows, failed rows
    success_table: list[tuple]  # object, approach, success rate, rows
    timing_table: list[tuple]  # approach, mean solve ms, timed rows

    KEYPOINT_HEADER = ("approach", "baseline", "mean_keypoint_error", "n_ok", "n_failed")
    SUCCESS_HEADER = ("object", "approach", "success_rate", "n_rows")
    TIMING_HEADER = ("approach", "mean_solve_ms", "n_timed")


def _groups(rows, key):
    out: dict = {}
    for r in rows:
        out.setdefault(key(r), []).append(r)
    return out


def summarize(rows) -> Summary:
    """Mean keypoint error per (approach, baseline) and success rate per
    (object, approach). Failed rows count as unsuccessful."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to summarize")
    kp = []
    for (rank, approach, b), grp in sorted(_groups(rows, lambda r: (_approach_rank(r.approach), r.approach, r.baseline)).items()):
        ok = [r.keypoint_error for r in grp if r.ok]
        kp.append((approach, b, float(np.mean(ok)) if ok else float("nan"), len(ok), len(grp) - len(ok)))
    sr = []
    for (obj, rank, approach), grp in sorted(_groups(rows, lambda r: (r.object, _approach_rank(r.approach), r.approach)).items()):
        sr.append((obj, approach, sum(r.success for r in grp) / len(grp), len(grp)))
    tm = []
    for (rank, approach), grp in sorted(_groups(rows, lambda r: (_approach_rank(r.approach), r.approach)).items()):
        ms = [r.solve_ms for r in grp if not math.isnan(r.solve_ms)]
        if ms:
            tm.append((approach, float(np.mean(ms)), len(ms)))
    return Summary(kp, sr, tm)


def _text_table(header, rows) -> str:
    cells = [list(header)] + [[_fmt_cell(v) for v in r] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    lines = ["  ".join(c[i].rjust(widths[i]) for i in range(len(header))).rstrip() for c in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def format_summary(summary: Summary) -> str:
    parts = [f"# Results are a {SYNTHETIC_LABEL}.", "",
             "Mean 3D keypoint error (m) by approach and baseline",
             _text_table(Summary.KEYPOINT_HEADER, summary.keypoint_table), "",
             "ADD(-S) success rate (< 10% of diameter; ADD-S for symmetric objects)",
             _text_table(Summary.SUCCESS_HEADER, summary.success_table)]
    if summary.timing_table:
        parts += ["", "Mean end-to-end solve time per scene", _text_table(Summary.TIMING_HEADER, summary.timing_table)]
    return "\n".join(parts) + "\n"


def write_summary(summary: Summary, out_dir) -> list[Path]:
    out = Path(out_dir)
    paths = [
        _write_csv(out / "summary_keypoints.csv", list(Summary.KEYPOINT_HEADER), summary.keypoint_table),
        _write_csv(out / "summary_success.csv", list(Summary.SUCCESS_HEADER), summary.success_table),
    ]
    text = out / "summary.txt"
    text.write_text(format_summary(summary), encoding="utf-8")
    return paths + [text]


CURVE_FIELDS = ["baseline_bin_low", "baseline_bin_high", "recall", "count"]


def recall_curves(rows, threshold: float = RECALL_THRESHOLD, bin_width: float = DEFAULT_BIN_WIDTH) -> dict:
    """Recall curve per (object, approach) over per-keypoint errors.

    Failed rows are left out since they carry no keypoint errors.
    """
    out = {}
    for (obj, rank, approach), grp in sorted(_groups(rows, lambda r: (r.object, _approach_rank(r.approach), r.approach)).items()):
        samples = [(r.baseline, r.keypoint_errors) for r in grp if r.ok and r.keypoint_errors]
        if samples:
            out[(obj, approach)] = recall_curve(samples, threshold, bin_width)
    return out


def _safe_name(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in Path(text).name) or "object"


def emit_recall_curves(rows, out_dir, threshold: float = RECALL_THRESHOLD, bin_width: float = DEFAULT_BIN_WIDTH) -> list[Path]:
    """One CSV per (object, approach); empty baseline bins have no row."""
    paths = []
    for (obj, approach), curve in recall_curves(rows, threshold, bin_width).items():
        body = [(b.low, b.high, b.recall, b.count) for b in curve.bins]
        paths.append(_write_csv(Path(out_dir) / f"recall_{_safe_name(obj)}_{approach}.csv", CURVE_FIELDS, body))
    return paths


def write_outputs(cfg: ExperimentConfig, rows, out_dir=None) -> list[Path]:
    """Results CSV, summaries, recall curves and the resolved config."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_rows(rows, out / "results.csv")]
    paths += write_summary(summarize(rows), out)
    paths += emit_recall_curves(rows, out)
    cfg_path = out / "config.ini"
    cfg_path.write_text(format_config(replace(cfg, output_dir=str(out))), encoding="utf-8")
    return paths + [cfg_path]
