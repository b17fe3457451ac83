"""Experiment configuration, orchestration, and report emission.

One YAML config drives every experiment; each phase derives its own RNG
seed from the master seed and a phase label, so adding a phase never
perturbs the randomness of existing ones. Reports are written as CSV and
JSON with shortest-round-trip float formatting, which makes repeated runs
byte-identical; wall-clock timings live only in the run manifest.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import os
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, NumericError
from .metrics import (ConvergencePoint, ConvergenceReport, SlopeFit, TVEstimate,
                      fit_loglog_slope, kde_fit, trajectory_global_error,
                      tv_monte_carlo)
from .mlp_score import (MLPScoreField, TrainConfig, load_checkpoint,
                        optimal_loss_oracle, save_checkpoint, train_noise_predictor)
from .samplers import (SamplerRun, generate_samples, get_scheme, get_tableau,
                       default_tableau_for, write_samples_csv, write_trajectory_csv)
from .schedules import LinearBetaSchedule
from .score_fields import ExactGaussianScore, GaussianData, marginal_law

__all__ = [
    "ExperimentConfig",
    "RunManifest",
    "derive_seed",
    "load_config",
    "run_convergence_experiment",
    "run_training_sweep",
    "run_order_study",
    "emit_report",
    "report_csv_text",
    "report_json_text",
]

THREADS_ENV_VAR = "PFSPLIT_NUM_THREADS"

PAPER_MU = (1.0, -1.0)
PAPER_SIGMA = ((1.5, 0.6), (0.6, 0.8))

DEFAULT_CONVERGE_T = (8, 16, 32, 64, 128)
DEFAULT_ORDER_T = (16, 32, 64, 128, 256)


def derive_seed(master: int, label: str, index: int = 0) -> int:
    """Independent 64-bit stream seed from (master, phase label, sub-index)."""
    payload = f"{int(master)}:{label}:{int(index)}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV_VAR}={raw!r} is not an integer") from None
    return max(1, n)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment settings; every field has a default matching the
    reference two-dimensional Gaussian setup."""

    data: GaussianData
    schedule: LinearBetaSchedule
    scheme: str = "strang"
    tableau: str | None = None
    T_list: tuple[int, ...] = DEFAULT_CONVERGE_T
    score_kind: str = "exact"          # exact | mlp | train
    checkpoint: str | None = None
    hidden_layers: int = 2
    width: int = 200
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    n_samples: int = 20_000
    n_mc: int = 100_000
    bandwidth_rule: str = "scott"
    time_grid_points: int = 21
    order_schemes: tuple[str, ...] = ("strang", "lie")
    order_T_list: tuple[int, ...] = DEFAULT_ORDER_T
    ref_multiple: int = 64
    n_probe: int = 16
    sweep_layers: tuple[int, ...] = (1, 2, 3, 4)
    sweep_widths: tuple[int, ...] = (100, 200, 400, 800)
    seed: int = 0
    out: str = "pfsplit-out"

    def __post_init__(self) -> None:
        for name, ts in (("sampler.steps", self.T_list), ("order_study.steps", self.order_T_list)):
            if not ts:
                raise ConfigError(f"{name} must be non-empty")
            if any(t < 1 for t in ts):
                raise ConfigError(f"{name} entries must be >= 1")
            if list(ts) != sorted(set(ts)):
                raise ConfigError(f"{name} must be strictly increasing")
        if self.n_samples < 100:
            raise ConfigError(f"metrics.n_samples must be >= 100, got {self.n_samples}")
        if self.score_kind not in ("exact", "mlp", "train"):
            raise ConfigError(f"score.kind must be exact|mlp|train, got {self.score_kind!r}")
        if self.score_kind == "mlp" and not self.checkpoint:
            raise ConfigError("score.kind 'mlp' requires score.checkpoint")
        get_scheme(self.scheme)
        if self.tableau is not None:
            get_tableau(self.tableau)
        for s in self.order_schemes:
            get_scheme(s)
        if self.time_grid_points < 2:
            raise ConfigError("metrics.time_grid_points must be >= 2")

    def resolve_field(self):
        """Build the configured score field; returns (field, train_report|None)."""
        if self.score_kind == "exact":
            return ExactGaussianScore(self.data, self.schedule), None
        if self.score_kind == "mlp":
            params, _ = load_checkpoint(self.checkpoint)
            return MLPScoreField(params, self.schedule), None
        cfg = TrainConfig(**{**self.train.to_dict(),
                             "seed": derive_seed(self.seed, "train-inline")})
        params, report = train_noise_predictor(
            cfg, [self.width] * self.hidden_layers, self.data, self.schedule)
        return MLPScoreField(params, self.schedule), report

    def target_law(self):
        return marginal_law(self.data, self.schedule, self.schedule.t_min)


def _cfg_section(raw: dict, key: str) -> dict:
    sec = raw.get(key, {})
    if sec is None:
        sec = {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {key!r} must be a mapping")
    return sec


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    known = {"data", "schedule", "sampler", "score", "metrics", "order_study",
             "train_sweep", "seed", "out"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    d = _cfg_section(raw, "data")
    try:
        data = GaussianData(mu=np.asarray(d.get("mu", PAPER_MU), dtype=float),
                            sigma_mat=np.asarray(d.get("sigma", PAPER_SIGMA), dtype=float))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid data section: {exc}") from exc

    s = _cfg_section(raw, "schedule")
    try:
        sched = LinearBetaSchedule(beta0=float(s.get("beta0", 0.1)),
                                   beta1=float(s.get("beta1", 20.0)),
                                   t_min=float(s.get("t_min", 0.0)))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid schedule section: {exc}") from exc

    sa = _cfg_section(raw, "sampler")
    sc = _cfg_section(raw, "score")
    me = _cfg_section(raw, "metrics")
    od = _cfg_section(raw, "order_study")
    sw = _cfg_section(raw, "train_sweep")
    tr = sc.get("train", {}) or {}
    try:
        train = TrainConfig(n_train=int(tr.get("n_train", 50_000)),
                            n_iters=int(tr.get("n_iters", 15_000)),
                            lr_start=float(tr.get("lr_start", 1e-5)),
                            lr_end=float(tr.get("lr_end", 1e-6)),
                            batch_size=int(tr.get("batch_size", 128)))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid score.train section: {exc}") from exc

    return ExperimentConfig(
        data=data,
        schedule=sched,
        scheme=str(sa.get("scheme", "strang")),
        tableau=sa.get("tableau"),
        T_list=tuple(int(t) for t in sa.get("steps", DEFAULT_CONVERGE_T)),
        score_kind=str(sc.get("kind", "exact")),
        checkpoint=sc.get("checkpoint"),
        hidden_layers=int(sc.get("hidden_layers", 2)),
        width=int(sc.get("width", 200)),
        train=train,
        n_samples=int(me.get("n_samples", 20_000)),
        n_mc=int(me.get("n_mc", 100_000)),
        bandwidth_rule=str(me.get("bandwidth_rule", "scott")),
        time_grid_points=int(me.get("time_grid_points", 21)),
        order_schemes=tuple(od.get("schemes", ("strang", "lie"))),
        order_T_list=tuple(int(t) for t in od.get("steps", DEFAULT_ORDER_T)),
        ref_multiple=int(od.get("ref_multiple", 64)),
        n_probe=int(od.get("n_probe", 16)),
        sweep_layers=tuple(int(x) for x in sw.get("hidden_layers", (1, 2, 3, 4))),
        sweep_widths=tuple(int(x) for x in sw.get("widths", (100, 200, 400, 800))),
        seed=int(raw.get("seed", 0)),
        out=str(raw.get("out", "pfsplit-out")),
    )


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return config_from_dict({})
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(raw or {})


# ---------------------------------------------------------------------------
# Report formatting: stable field order, shortest-round-trip floats.

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _csv_text(header: list[str], rows: list[list]) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON-serializable: {type(o)}")


def report_json_text(obj: dict) -> str:
    return json.dumps(obj, indent=2, default=_json_default) + "\n"


def report_csv_text(report) -> str:
    """CSV body for any report object produced by the run_* functions."""
    if isinstance(report, ConvergenceReport):
        header = ["T", "h", "tv", "tv_stderr", "tv_raw", "kde_floor",
                  "kde_floor_stderr", "used_in_fit", "slope", "intercept"]
        rows = [[p.T, p.h, p.tv.value, p.tv.stderr, p.tv.raw_value,
                 report.floor.value, report.floor.stderr, p.used_in_fit,
                 report.slope, report.intercept]
                for p in report.points]
        return _csv_text(header, rows)
    if isinstance(report, OrderStudyReport):
        header = ["scheme", "T", "h", "max_error", "slope"]
        rows = [[c.scheme, c.T, c.h, c.error, report.slopes[c.scheme]]
                for c in report.cells]
        return _csv_text(header, rows)
    if isinstance(report, TrainingSweepReport):
        header = ["hidden_layers", "width", "final_loss", "final_loss_fresh",
                  "optimal_loss", "status"]
        rows = [[c.hidden_layers, c.width, c.final_loss, c.final_loss_fresh,
                 report.optimal_loss, c.status]
                for c in report.cells]
        return _csv_text(header, rows)
    raise ConfigError(f"no CSV layout for report type {type(report).__name__}")


def emit_report(report_obj, fmt: str, path) -> Path:
    """Write a report to disk; byte-stable for identical report content."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        text = report_csv_text(report_obj) if not isinstance(report_obj, dict) \
            else _csv_text(list(report_obj.keys()), [list(report_obj.values())])
        path.write_text(text, encoding="utf-8", newline="\n")
    elif fmt == "json":
        obj = report_obj if isinstance(report_obj, dict) else report_to_json_obj(report_obj)
        path.write_text(report_json_text(obj), encoding="utf-8", newline="\n")
    else:
        raise ConfigError(f"unknown report format {fmt!r}; use csv or json")
    return path


def _tv_obj(tv: TVEstimate) -> dict:
    return {"value": tv.value, "raw_value": tv.raw_value, "stderr": tv.stderr,
            "n_mc": tv.n_mc, "seed": tv.seed}


def report_to_json_obj(report) -> dict:
    if isinstance(report, ConvergenceReport):
        return {
            "kind": "convergence",
            "score_kind": report.score_kind,
            "scheme": report.scheme,
            "slope": report.slope,
            "intercept": report.intercept,
            "residuals": list(report.residuals),
            "kde_floor": _tv_obj(report.floor),
            "points": [{"T": p.T, "h": p.h, "used_in_fit": p.used_in_fit,
                        "tv": _tv_obj(p.tv)} for p in report.points],
        }
    if isinstance(report, OrderStudyReport):
        return {
            "kind": "order_study",
            "slopes": dict(report.slopes),
            "cells": [{"scheme": c.scheme, "T": c.T, "h": c.h, "max_error": c.error}
                      for c in report.cells],
        }
    if isinstance(report, TrainingSweepReport):
        return {
            "kind": "training_sweep",
            "optimal_loss": report.optimal_loss,
            "cells": [{"hidden_layers": c.hidden_layers, "width": c.width,
                       "final_loss": c.final_loss,
                       "final_loss_fresh": c.final_loss_fresh,
                       "status": c.status} for c in report.cells],
        }
    raise ConfigError(f"no JSON layout for report type {type(report).__name__}")


# ---------------------------------------------------------------------------
# Experiment phases.

@dataclass(eq=False)
class RunManifest:
    """Everything needed to reproduce a run: config echo, derived seeds,
    version, and per-phase wall-clock timings (timings are informational
    and excluded from the determinism guarantee)."""

    config_echo: dict
    version: str = __version__
    seeds: dict = dc_field(default_factory=dict)
    timings_s: dict = dc_field(default_factory=dict)

    def note_seed(self, label: str, seed: int) -> None:
        self.seeds[label] = seed

    def write(self, path) -> None:
        obj = {"version": self.version, "config": self.config_echo,
               "seeds": self.seeds, "timings_s": self.timings_s}
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(report_json_text(obj), encoding="utf-8")


def _config_echo(cfg: ExperimentConfig) -> dict:
    return {
        "data": {"mu": cfg.data.mu.tolist(), "sigma": cfg.data.sigma_mat.tolist()},
        "schedule": {"beta0": cfg.schedule.beta0, "beta1": cfg.schedule.beta1,
                     "t_min": cfg.schedule.t_min},
        "sampler": {"scheme": cfg.scheme, "tableau": cfg.tableau,
                    "steps": list(cfg.T_list)},
        "score": {"kind": cfg.score_kind, "checkpoint": cfg.checkpoint,
                  "hidden_layers": cfg.hidden_layers, "width": cfg.width,
                  "train": cfg.train.to_dict()},
        "metrics": {"n_samples": cfg.n_samples, "n_mc": cfg.n_mc,
                    "bandwidth_rule": cfg.bandwidth_rule,
                    "time_grid_points": cfg.time_grid_points},
        "order_study": {"schemes": list(cfg.order_schemes),
                        "steps": list(cfg.order_T_list),
                        "ref_multiple": cfg.ref_multiple, "n_probe": cfg.n_probe},
        "train_sweep": {"hidden_layers": list(cfg.sweep_layers),
                        "widths": list(cfg.sweep_widths)},
        "seed": cfg.seed,
        "out": cfg.out,
    }


def _parallel_map(fn, items, max_workers: int):
    if max_workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as ex:
        return list(ex.map(fn, items))


def _slope_for_report(fit_pts):
    """Least-squares slope over the qualifying points; falls back to the
    two-point line when the floor exclusion leaves exactly two, and to
    None below that."""
    if len(fit_pts) >= 3:
        fit = fit_loglog_slope(fit_pts)
        return fit.slope, fit.intercept, fit.residuals
    if len(fit_pts) == 2:
        (h1, v1), (h2, v2) = fit_pts
        slope = float(np.log(v1 / v2) / np.log(h1 / h2))
        intercept = float(np.log(v1) - slope * np.log(h1))
        return slope, intercept, (0.0, 0.0)
    return None, None, ()


def measure_kde_floor(cfg: ExperimentConfig, manifest: RunManifest | None = None) -> TVEstimate:
    """TV between a KDE of perfect target draws and the target itself: the
    estimator noise floor at the configured sample count and bandwidth rule."""
    target = cfg.target_law()
    seed_draw = derive_seed(cfg.seed, "kde-floor-draw")
    seed_tv = derive_seed(cfg.seed, "kde-floor-tv")
    if manifest is not None:
        manifest.note_seed("kde-floor-draw", seed_draw)
        manifest.note_seed("kde-floor-tv", seed_tv)
    rng = np.random.default_rng(np.random.SeedSequence(seed_draw))
    samples = target.sample(cfg.n_samples, rng)
    kde = kde_fit(samples, rule=cfg.bandwidth_rule)
    return tv_monte_carlo(kde, target, cfg.n_mc, seed_tv)


def run_convergence_experiment(cfg: ExperimentConfig, out_dir=None,
                               field=None) -> ConvergenceReport:
    """TV against the analytic target for each step count, with slope fit.

    Writes convergence.csv / convergence.json and a manifest under out_dir
    (cfg.out by default). A prebuilt score field may be passed to reuse a
    trained network.
    """
    out = Path(out_dir if out_dir is not None else cfg.out)
    manifest = RunManifest(config_echo=_config_echo(cfg))
    t0 = time.perf_counter()
    if field is None:
        field, _ = cfg.resolve_field()
    manifest.timings_s["score_setup"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    floor = measure_kde_floor(cfg, manifest)
    manifest.timings_s["kde_floor"] = time.perf_counter() - t0

    target = cfg.target_law()
    scheme = get_scheme(cfg.scheme)
    tableau = get_tableau(cfg.tableau) if cfg.tableau else default_tableau_for(scheme)

    def one_cell(item):
        i, T = item
        seed_samp = derive_seed(cfg.seed, "converge-sample", i)
        seed_tv = derive_seed(cfg.seed, "converge-tv", i)
        run = SamplerRun(field=field, sched=cfg.schedule, T=T,
                         scheme=scheme, tableau=tableau)
        samples = generate_samples(run, cfg.n_samples, seed_samp)
        kde = kde_fit(samples, rule=cfg.bandwidth_rule)
        tv = tv_monte_carlo(kde, target, cfg.n_mc, seed_tv)
        return (T, tv, seed_samp, seed_tv)

    t0 = time.perf_counter()
    cells = _parallel_map(one_cell, list(enumerate(cfg.T_list)), worker_count())
    manifest.timings_s["tv_sweep"] = time.perf_counter() - t0

    points = []
    for (T, tv, seed_samp, seed_tv) in cells:
        manifest.note_seed(f"converge-sample[T={T}]", seed_samp)
        manifest.note_seed(f"converge-tv[T={T}]", seed_tv)
        used = tv.value >= 3.0 * floor.value
        points.append(ConvergencePoint(T=T, h=1.0 / T, tv=tv, used_in_fit=used))

    fit_pts = [(p.h, p.tv.value) for p in points if p.used_in_fit]
    slope, intercept, resid = _slope_for_report(fit_pts)

    report = ConvergenceReport(points=tuple(points), floor=floor, slope=slope,
                               intercept=intercept, residuals=resid,
                               score_kind=field.kind, scheme=cfg.scheme)
    emit_report(report, "csv", out / "convergence.csv")
    emit_report(report, "json", out / "convergence.json")
    manifest.write(out / "manifest.json")
    return report


@dataclass(frozen=True)
class OrderCell:
    scheme: str
    T: int
    h: float
    error: float


@dataclass(frozen=True, eq=False)
class OrderStudyReport:
    cells: tuple[OrderCell, ...]
    slopes: dict


def run_order_study(cfg: ExperimentConfig, out_dir=None) -> OrderStudyReport:
    """Trajectory error against the RK4 reference for each scheme and T,
    plus per-scheme log-log slopes. Writes order_study.csv / .json."""
    out = Path(out_dir if out_dir is not None else cfg.out)
    manifest = RunManifest(config_echo=_config_echo(cfg))
    field = ExactGaussianScore(cfg.data, cfg.schedule)
    cells: list[OrderCell] = []
    slopes: dict[str, float] = {}
    t_start = time.perf_counter()
    for scheme_name in cfg.order_schemes:
        scheme = get_scheme(scheme_name)
        tableau = default_tableau_for(scheme)
        errs = []
        for i, T in enumerate(cfg.order_T_list):
            seed = derive_seed(cfg.seed, f"order-{scheme_name}", i)
            manifest.note_seed(f"order-{scheme_name}[T={T}]", seed)
            run = SamplerRun(field=field, sched=cfg.schedule, T=T,
                             scheme=scheme, tableau=tableau)
            err = trajectory_global_error(run, cfg.ref_multiple * T, cfg.n_probe, seed)
            errs.append(err)
            cells.append(OrderCell(scheme=scheme_name, T=T, h=1.0 / T, error=err))
        fit = fit_loglog_slope([(1.0 / T, e) for T, e in zip(cfg.order_T_list, errs)])
        slopes[scheme_name] = fit.slope
    manifest.timings_s["order_study"] = time.perf_counter() - t_start
    report = OrderStudyReport(cells=tuple(cells), slopes=slopes)
    emit_report(report, "csv", out / "order_study.csv")
    emit_report(report, "json", out / "order_study.json")
    manifest.write(out / "manifest_order.json")
    return report


@dataclass(frozen=True)
class SweepCell:
    hidden_layers: int
    width: int
    final_loss: float | None
    final_loss_fresh: float | None
    status: str


@dataclass(frozen=True, eq=False)
class TrainingSweepReport:
    cells: tuple[SweepCell, ...]
    optimal_loss: float


def run_training_sweep(cfg: ExperimentConfig, out_dir=None) -> TrainingSweepReport:
    """Train the depth x width grid, dump checkpoints and the loss table.

    A diverging cell is recorded with status 'diverged' and the sweep
    continues. Writes train_sweep.csv / .json plus one checkpoint per cell.
    """
    out = Path(out_dir if out_dir is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config_echo=_config_echo(cfg))
    l_star = optimal_loss_oracle(cfg.data, cfg.schedule)
    cells = []
    t_start = time.perf_counter()
    for li, layers in enumerate(cfg.sweep_layers):
        for wi, width in enumerate(cfg.sweep_widths):
            label = f"train-sweep[{layers}x{width}]"
            seed = derive_seed(cfg.seed, "train-sweep", li * 1000 + wi)
            manifest.note_seed(label, seed)
            cell_cfg = TrainConfig(**{**cfg.train.to_dict(), "seed": seed})
            try:
                params, rep = train_noise_predictor(
                    cell_cfg, [width] * layers, cfg.data, cfg.schedule)
            except NumericError as exc:
                cells.append(SweepCell(layers, width, None, None, f"diverged: {exc}"))
                continue
            save_checkpoint(out / f"mlp_{layers}x{width}.npz", params, cell_cfg)
            cells.append(SweepCell(layers, width, rep.final_loss,
                                   rep.final_loss_fresh, "ok"))
    manifest.timings_s["train_sweep"] = time.perf_counter() - t_start
    report = TrainingSweepReport(cells=tuple(cells), optimal_loss=l_star)
    emit_report(report, "csv", out / "train_sweep.csv")
    emit_report(report, "json", out / "train_sweep.json")
    manifest.write(out / "manifest_train.json")
    return report


def run_sample_phase(cfg: ExperimentConfig, T: int, n: int, out_dir=None,
                     trajectory: bool = False) -> Path:
    """Generate samples at one step count and write them as CSV."""
    out = Path(out_dir if out_dir is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    field, _ = cfg.resolve_field()
    scheme = get_scheme(cfg.scheme)
    tableau = get_tableau(cfg.tableau) if cfg.tableau else default_tableau_for(scheme)
    run = SamplerRun(field=field, sched=cfg.schedule, T=T, scheme=scheme,
                     tableau=tableau, record_trajectory=trajectory)
    seed = derive_seed(cfg.seed, "sample", T)
    result = generate_samples(run, n, seed)
    if trajectory:
        samples, traj = result
        write_trajectory_csv(out / f"trajectory_T{T}.csv", traj, T)
    else:
        samples = result
    path = out / f"samples_T{T}.csv"
    write_samples_csv(path, samples)
    return path
