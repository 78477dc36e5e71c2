"""Experiment orchestration: degrade, solve and score across sweep grids.

Configs are flat ``key = value`` INI files::

    [experiment]
    dataset = synth-gray-16x16
    task = random-inpaint
    solver = pflow
    checkpoint = runs/synth.pflw
    n_images = 32
    seeds = 0
    output_dir = runs/inpaint

    [solver]
    iterations = 100
    ode_steps = 5
    step_size = 0.4

    [sweep]
    ode_steps = 3, 5, 8, 10, 15
    projection = on, off
"""

from __future__ import annotations

import configparser
import itertools
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cfm import ToyDataset
from .degradations import degrade, naive_inverse, task_preset
from .diagnostics import complexity_probe, toy_task_analogs
from .errors import ConfigurationError, NumericalFailure
from .metrics import PSNR_CAP, MetricReport, mse, psnr, ssim
from .numerics import Rng
from .report import line_chart, write_csv, write_svg
from .solver import SOLVER_KINDS, SolverConfig, solve
from .velocity_net import load_checkpoint

PSNR_NOTE = "psnr peak-to-peak range 2 (images normalised to [-1, 1]); identical pairs capped at 100 dB"
SWEEP_AXES = ("ode_steps", "iterations", "step_size", "projection")
RECORD_HEADER = [
    "cell", "ode_steps", "iterations", "step_size", "projection", "image", "seed", "status",
    "final_loss", "mse", "psnr", "ssim", "degraded_psnr", "degraded_ssim", "x0_norm",
]
AGGREGATE_HEADER = [
    "cell", "ode_steps", "iterations", "step_size", "projection", "n", "n_failed",
    "mse_mean", "mse_std", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std",
    "degraded_psnr_mean", "improved_fraction",
]
HISTOGRAM_HEADER = ["cell", "metric", "bin_lo", "bin_hi", "count"]
TIMING_HEADER = ["cell", "image", "seed", "wall_ms"]

# Per-task (eta, N) defaults; K = 100 throughout.
TASK_DEFAULTS = {
    "denoise": (0.3, 10),
    "blur": (0.2, 5),
    "sr": (0.5, 10),
    "random-inpaint": (0.4, 5),
    "box-inpaint": (0.3, 10),
}


def default_solver_config(task, **overrides):
    eta, n = TASK_DEFAULTS[task]
    return replace(SolverConfig(iterations=100, ode_steps=n, step_size=eta), **overrides)


@dataclass
class ExperimentConfig:
    dataset: str = "synth-gray-16x16"
    task: str = "random-inpaint"
    solver: str = "pflow"
    solver_config: SolverConfig = field(default_factory=SolverConfig)
    sweep: dict = field(default_factory=dict)
    n_images: int = 4
    seeds: tuple = (0,)
    image_seed: int = 1234
    output_dir: str = "pflow-out"
    checkpoint: str = ""
    workers: int = 1
    histogram_bins: int = 10
    ssim_window: int = 7

    def __post_init__(self):
        if self.solver not in SOLVER_KINDS:
            raise ConfigurationError(f"unknown solver {self.solver!r}; valid: {', '.join(SOLVER_KINDS)}")
        if self.n_images < 1:
            raise ConfigurationError("n_images must be >= 1")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        for axis, values in self.sweep.items():
            if axis not in SWEEP_AXES:
                raise ConfigurationError(f"unknown sweep axis {axis!r}; valid: {', '.join(SWEEP_AXES)}")
            if not values:
                raise ConfigurationError(f"sweep axis {axis!r} is empty")
        task_operator(self.dataset, self.task)


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


_SOLVER_FIELDS = {
    "iterations": int, "ode_steps": int, "step_size": float, "proxy_scalar": float,
    "projection_enabled": _parse_bool, "projection": _parse_bool, "latent_penalty": float, "seed": int,
}
_AXIS_TYPES = {"ode_steps": int, "iterations": int, "step_size": float, "projection": _parse_bool}


def parse_experiment_config(text):
    cp = configparser.ConfigParser()
    cp.read_string(text)
    exp = cp["experiment"] if cp.has_section("experiment") else {}
    task = exp.get("task", "random-inpaint")
    solver_kwargs = {}
    if cp.has_section("solver"):
        for key, value in cp["solver"].items():
            if key not in _SOLVER_FIELDS:
                raise ConfigurationError(f"unknown solver key {key!r}")
            name = "projection_enabled" if key == "projection" else key
            solver_kwargs[name] = _SOLVER_FIELDS[key](value)
    try:
        base = default_solver_config(task, **solver_kwargs) if task in TASK_DEFAULTS else SolverConfig(**solver_kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    sweep = {}
    if cp.has_section("sweep"):
        for key, value in cp["sweep"].items():
            if key not in _AXIS_TYPES:
                raise ConfigurationError(f"unknown sweep axis {key!r}; valid: {', '.join(SWEEP_AXES)}")
            sweep[key] = [_AXIS_TYPES[key](v) for v in value.split(",") if v.strip()]
    seeds = tuple(int(s) for s in exp.get("seeds", "0").split(",") if s.strip())
    return ExperimentConfig(
        dataset=exp.get("dataset", "synth-gray-16x16"),
        task=task,
        solver=exp.get("solver", "pflow"),
        solver_config=base,
        sweep=sweep,
        n_images=int(exp.get("n_images", "4")),
        seeds=seeds,
        image_seed=int(exp.get("image_seed", "1234")),
        output_dir=exp.get("output_dir", "pflow-out"),
        checkpoint=exp.get("checkpoint", ""),
        workers=int(exp.get("workers", "1")),
        histogram_bins=int(exp.get("histogram_bins", "10")),
        ssim_window=int(exp.get("ssim_window", "7")),
    )


def load_experiment_config(path):
    with open(path) as fh:
        return parse_experiment_config(fh.read())


def sweep_cells(cfg):
    """Solver configs for every grid point, in a stable order."""
    axes = [a for a in SWEEP_AXES if a in cfg.sweep]
    cells = []
    for values in itertools.product(*(cfg.sweep[a] for a in axes)):
        changes = dict(zip(axes, values))
        if "projection" in changes:
            changes["projection_enabled"] = changes.pop("projection")
        sc = replace(cfg.solver_config, **changes)
        cells.append((cell_key(sc), sc))
    return sorted(cells, key=lambda kv: kv[0])


def cell_key(sc):
    return f"N{sc.ode_steps:03d}_K{sc.iterations:04d}_eta{sc.step_size:.4f}_proj{int(sc.projection_enabled)}"


def evaluation_images(cfg):
    ds = ToyDataset(cfg.dataset)
    return ds.sample(Rng(cfg.image_seed), cfg.n_images)


def _image_shape(dataset):
    return ToyDataset(dataset).image_shape


def task_operator(dataset, task):
    """Preset operator for ``task`` sized to ``dataset``; 2-D kinds use the 1 x 2 analogs."""
    h, w = _image_shape(dataset)
    if h == 1:
        analogs = toy_task_analogs()
        if task not in analogs:
            task_preset(task)  # raises with the list of valid names
        return analogs[task]
    return task_preset(task, h, w)


def _operator(cfg):
    return task_operator(cfg.dataset, cfg.task)


def _ssim_or_nan(a, b, window, shape):
    if min(shape) < window:
        return math.nan
    return ssim(np.reshape(a, shape), np.reshape(b, shape), window)


def _solve_one(job):
    params, cfg, key, sc, image_idx, image, seed = job
    op = _operator(cfg)
    shape = (op.height, op.width)
    obs = degrade(op, image, Rng(seed).spawn(image_idx))
    degraded = naive_inverse(op, obs.y)
    row = {
        "cell": key, "ode_steps": sc.ode_steps, "iterations": sc.iterations, "step_size": sc.step_size,
        "projection": sc.projection_enabled, "image": image_idx, "seed": seed,
        "degraded_psnr": min(psnr(degraded, image), PSNR_CAP),
        "degraded_ssim": _ssim_or_nan(degraded, image, cfg.ssim_window, shape),
    }
    start = time.perf_counter()
    try:
        result = solve(cfg.solver, params, obs, replace(sc, seed=seed), Rng(seed).spawn(100_000 + image_idx))
    except NumericalFailure as exc:
        row.update(status=f"failed:{exc.code}", final_loss=math.nan, mse=math.nan, psnr=math.nan,
                   ssim=math.nan, x0_norm=math.nan)
        return row, 1e3 * (time.perf_counter() - start)
    x1 = result.x1_final
    row.update(
        status="ok",
        final_loss=result.records[-1].loss,
        mse=mse(x1, image),
        psnr=min(psnr(x1, image), PSNR_CAP),
        ssim=_ssim_or_nan(x1, image, cfg.ssim_window, shape),
        x0_norm=result.records[-1].x0_norm,
    )
    return row, 1e3 * (time.perf_counter() - start)


def _load_params(cfg, params):
    if params is not None:
        return params
    if not cfg.checkpoint or not os.path.exists(cfg.checkpoint):
        raise ConfigurationError(f"checkpoint for dataset {cfg.dataset!r} not found: {cfg.checkpoint!r}")
    return load_checkpoint(cfg.checkpoint)


def run_experiment(cfg, params=None, write=True):
    """Run every sweep cell x image x seed; returns ``(rows, aggregate, reports)``.

    Output files (when ``write``): records.csv, aggregate.csv, histograms.csv,
    timings.csv and summary.svg in ``cfg.output_dir``. All but timings.csv
    are byte-identical across reruns of the same config.
    """
    params = _load_params(cfg, params)
    images = evaluation_images(cfg)
    jobs = [
        (params, cfg, key, sc, i, images[i], seed)
        for key, sc in sweep_cells(cfg)
        for i in range(cfg.n_images)
        for seed in cfg.seeds
    ]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_solve_one, jobs))
    else:
        results = [_solve_one(j) for j in jobs]
    order = sorted(range(len(jobs)), key=lambda j: (jobs[j][2], jobs[j][4], jobs[j][6]))
    rows = [results[j][0] for j in order]
    timings = [{"cell": rows[n]["cell"], "image": rows[n]["image"], "seed": rows[n]["seed"],
                "wall_ms": round(results[j][1], 3)} for n, j in enumerate(order)]
    aggregate, reports = aggregate_rows(rows)
    if write:
        write_outputs(cfg, rows, aggregate, reports, timings)
    return rows, aggregate, reports


def aggregate_rows(rows):
    by_cell = {}
    for r in rows:
        by_cell.setdefault(r["cell"], []).append(r)
    aggregate, reports = [], {}
    for key in sorted(by_cell):
        cell_rows = by_cell[key]
        ok = [r for r in cell_rows if r["status"] == "ok"]
        rep = MetricReport(
            mse=[r["mse"] for r in ok], psnr=[r["psnr"] for r in ok], ssim=[r["ssim"] for r in ok]
        )
        reports[key] = rep
        summ = rep.summary()
        first = cell_rows[0]
        aggregate.append({
            "cell": key,
            **{k: first[k] for k in ("ode_steps", "iterations", "step_size", "projection")},
            "n": len(cell_rows),
            "n_failed": len(cell_rows) - len(ok),
            **summ,
            "degraded_psnr_mean": float(np.mean([r["degraded_psnr"] for r in cell_rows])),
            "improved_fraction": float(np.mean([r["psnr"] > r["degraded_psnr"] for r in ok])) if ok else 0.0,
        })
    return aggregate, reports


def write_outputs(cfg, rows, aggregate, reports, timings):
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    notes = [PSNR_NOTE, f"dataset={cfg.dataset} task={cfg.task} solver={cfg.solver}"]
    write_csv(os.path.join(out, "records.csv"), RECORD_HEADER, rows, notes)
    write_csv(os.path.join(out, "aggregate.csv"), AGGREGATE_HEADER, aggregate, notes)
    hist_rows = []
    for key, rep in reports.items():
        for metric in ("psnr", "ssim", "mse"):
            vals = np.array(getattr(rep, metric), dtype=float)
            vals = vals[np.isfinite(vals)]
            if vals.size == 0:
                continue
            counts, edges = np.histogram(np.minimum(vals, PSNR_CAP), bins=cfg.histogram_bins)
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                hist_rows.append([key, metric, float(lo), float(hi), int(c)])
    write_csv(os.path.join(out, "histograms.csv"), HISTOGRAM_HEADER, hist_rows, notes)
    write_csv(os.path.join(out, "timings.csv"), TIMING_HEADER, timings, notes)
    xs = list(range(len(aggregate)))
    svg = line_chart(
        {"restored": (xs, [a["psnr_mean"] for a in aggregate]),
         "degraded": (xs, [a["degraded_psnr_mean"] for a in aggregate])},
        title=f"{cfg.task}: mean PSNR per sweep cell", xlabel="cell index (sorted key)", ylabel="PSNR [dB]",
    )
    write_svg(os.path.join(out, "summary.svg"), svg)


def compare_solvers(cfg, params=None, write=True):
    """Wall time and peak cached tapes of pflow vs dflow at equal (K, N), per image."""
    params = _load_params(cfg, params)
    images = evaluation_images(cfg)
    op = _operator(cfg)
    sc = cfg.solver_config
    rows = []
    for i, image in enumerate(images):
        obs = degrade(op, image, Rng(cfg.seeds[0]).spawn(i))
        row = {"image": i, "iterations": sc.iterations, "ode_steps": sc.ode_steps}
        for kind in ("pflow", "dflow"):
            start = time.perf_counter()
            res = solve(kind, params, obs, sc, Rng(cfg.seeds[0]).spawn(100_000 + i))
            peak, fwd, bwd = complexity_probe(res)
            row[f"{kind}_wall_ms"] = 1e3 * (time.perf_counter() - start)
            row[f"{kind}_peak_tapes"] = peak
            row[f"{kind}_forward_evals"] = fwd
            row[f"{kind}_backward_evals"] = bwd
            row[f"{kind}_psnr"] = min(psnr(res.x1_final, image), PSNR_CAP)
        row["wall_ratio"] = row["dflow_wall_ms"] / row["pflow_wall_ms"]
        row["tape_ratio"] = row["dflow_peak_tapes"] / row["pflow_peak_tapes"]
        rows.append(row)
    if write:
        os.makedirs(cfg.output_dir, exist_ok=True)
        header = list(rows[0].keys())
        write_csv(os.path.join(cfg.output_dir, "bench.csv"), header, rows,
                  [PSNR_NOTE, "wall times are hardware-dependent and reported only"])
    return rows
