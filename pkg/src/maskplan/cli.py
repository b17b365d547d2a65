"""Experiment harness: TOML-configured runs, CSV/JSON/SVG outputs.

Subcommands:

    run      execute every (sampler, seed) cell; write results.csv
    compare  run >= 2 samplers; write summary.csv and print a table
    sweep    cartesian grid over sampler knobs; one summary row per cell
    plot     render an SVG from a previously written CSV
    trace    dump a single trajectory as JSON

Exit codes: 0 success, 2 configuration error, 3 runtime failure. All
randomness comes from config seeds. wall_ms columns are informational and
are the only nondeterministic output.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core import BlockSchedule, StepSchedule
from .denoiser import BACKENDS, DenoiserHandle
from .metrics import TrajectoryRecord, pearson_entropy_accuracy, summarize
from .samplers import POLICIES, DecodingInvariantError, SamplerConfig, decode
from .tasks import TaskSpec, build_task, classify_path, load_task

CONFIG_VERSION = 1
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

RESULTS_COLUMNS = [
    "run_id", "task", "policy", "seed", "K", "tau_token", "tau_pos", "N",
    "gamma", "beam", "steps", "cumulative_entropy_nats",
    "final_state_uncertainty_nats", "correct", "first_group", "off_manifold",
    "denoiser_calls", "wall_ms",
]

STEPS_COLUMNS = [
    "run_id", "label", "seed", "step", "pairs", "cost_nats",
    "cumulative_nats", "uncertainty_before_nats", "uncertainty_after_nats",
    "info_gain_nats", "objective_nats", "bypass", "off_manifold",
    "n_candidates", "denoiser_calls",
]

SWEEP_DIMENSIONS = ("tau_token", "tau_pos", "k", "n_candidates", "gamma",
                    "beam_width")

_SAMPLER_KEYS = {
    "label", "policy", "kind", "tau_token", "tau_pos", "n_candidates",
    "gamma", "beam_width", "n_traj", "kl_eps", "pc_lam", "schedule",
    "block_size",
}

LN2 = math.log(2.0)


class ConfigError(Exception):
    """Anything wrong with the experiment description (exit code 2)."""


@dataclass
class ExperimentConfig:
    source: Path
    task_name: Optional[str]
    task_params: dict
    task_file: Optional[str]
    backend: str
    eta: float
    samplers: list[dict]
    n_seeds: int
    base_seed: int
    out_dir: Path
    emit: tuple[str, ...]
    jobs: int
    sweep: Optional[dict] = None
    sweep_cap: int = 4096


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse failure in {path}: {exc}") from exc

    version = data.pop("config_version", None)
    _require(version == CONFIG_VERSION,
             f"config_version must be {CONFIG_VERSION}, got {version!r}")

    task = data.pop("task", None)
    _require(isinstance(task, dict), "missing [task] table")
    name = task.pop("name", None)
    file_ = task.pop("file", None)
    _require((name is None) != (file_ is None),
             "[task] needs exactly one of 'name' or 'file'")
    backend = task.pop("backend", "exact_oracle")
    _require(backend in BACKENDS, f"unknown backend {backend!r}")
    eta = float(task.pop("eta", 0.1))
    params = dict(task)  # remaining keys are task parameters

    run = data.pop("run", {})
    _require(isinstance(run, dict), "[run] must be a table")
    n_seeds = int(run.pop("seeds", 1))
    _require(n_seeds >= 1, "run.seeds must be >= 1")
    base_seed = int(run.pop("base_seed", 0))
    out_dir = Path(run.pop("out", "out"))
    jobs = int(run.pop("jobs", 1))
    _require(jobs >= 1, "run.jobs must be >= 1")
    emit = run.pop("emit", ["csv"])
    _require(isinstance(emit, list) and emit, "run.emit must be a nonempty list")
    for item in emit:
        _require(item in ("csv", "json_traces", "svg"),
                 f"unknown emit target {item!r}")
    sweep_cap = int(run.pop("sweep_cap", 4096))
    _require(not run, f"unknown [run] keys: {sorted(run)}")

    samplers = data.pop("sampler", None)
    _require(isinstance(samplers, list) and samplers,
             "at least one [[sampler]] table is required")
    for table in samplers:
        _require(isinstance(table, dict), "[[sampler]] entries must be tables")
        unknown = set(table) - _SAMPLER_KEYS
        _require(not unknown, f"unknown sampler keys: {sorted(unknown)}")

    sweep = data.pop("sweep", None)
    if sweep is not None:
        _require(isinstance(sweep, dict), "[sweep] must be a table")
        unknown = set(sweep) - set(SWEEP_DIMENSIONS)
        _require(not unknown, f"unknown sweep dimensions: {sorted(unknown)}")
        for dim, values in sweep.items():
            _require(isinstance(values, list) and values,
                     f"sweep.{dim} must be a nonempty list")

    _require(not data, f"unknown top-level keys: {sorted(data)}")

    cfg = ExperimentConfig(
        source=path, task_name=name, task_params=params, task_file=file_,
        backend=backend, eta=eta, samplers=samplers, n_seeds=n_seeds,
        base_seed=base_seed, out_dir=out_dir, emit=tuple(emit), jobs=jobs,
        sweep=sweep, sweep_cap=sweep_cap,
    )
    labels = [effective_label(t) for t in cfg.samplers]
    _require(len(labels) == len(set(labels)),
             f"sampler labels must be unique, got {labels}")
    return cfg


def effective_label(table: dict) -> str:
    if table.get("label"):
        return str(table["label"])
    policy = table.get("policy", "")
    if policy == "greedy":
        return f"greedy:{table.get('kind', 'neg_entropy')}"
    return str(policy)


def build_task_spec(cfg: ExperimentConfig) -> TaskSpec:
    try:
        if cfg.task_name is not None:
            return build_task(cfg.task_name, **cfg.task_params)
        task_path = Path(cfg.task_file)
        if not task_path.is_absolute():
            task_path = cfg.source.parent / task_path
        _require(task_path.exists(), f"task file not found: {task_path}")
        return load_task(task_path)
    except (ValueError, TypeError, OSError, KeyError) as exc:
        raise ConfigError(f"cannot build task: {exc}") from exc


def _parse_gamma(value):
    if value is None:
        return 0.8
    if value == "off":
        return None
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    raise ConfigError(f"gamma must be a number or 'off', got {value!r}")


def build_sampler(table: dict, length: int, seed: int) -> SamplerConfig:
    """Materialize one [[sampler]] table against a task of the given length."""
    table = dict(table)
    sched_table = table.pop("schedule", {"kind": "constant", "k": 1})
    if not isinstance(sched_table, dict):
        raise ConfigError("sampler.schedule must be a table")
    kind = sched_table.get("kind", "constant")
    try:
        schedule = StepSchedule(
            kind, length,
            k=sched_table.get("k"),
            total_steps=sched_table.get("total_steps"),
        )
        blocks = BlockSchedule(int(table.pop("block_size", length)))
        return SamplerConfig(
            policy=table.pop("policy", ""),
            schedule=schedule,
            blocks=blocks,
            seed=seed,
            kind=table.pop("kind", "neg_entropy"),
            tau_token=float(table.pop("tau_token", 0.7)),
            tau_pos=float(table.pop("tau_pos", 0.1)),
            n_candidates=int(table.pop("n_candidates", 8)),
            gamma=_parse_gamma(table.pop("gamma", None)),
            beam_width=int(table.pop("beam_width", 2)),
            n_traj=int(table.pop("n_traj", 4)),
            kl_eps=float(table.pop("kl_eps", 5e-4)),
            pc_lam=float(table.pop("pc_lam", 0.01)),
            label=str(table.pop("label", "")),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad sampler table: {exc}") from exc


@dataclass
class CellResult:
    record: TrajectoryRecord
    label: str
    seed: int
    sampler: SamplerConfig
    denoiser_calls: int
    wall_ms: float


def run_cells(task: TaskSpec, samplers: list[SamplerConfig], seeds: list[int],
              jobs: int, backend: str, eta: float) -> list[CellResult]:
    """Execute every (sampler, seed) cell; output order is config-major then
    seed order regardless of completion order."""
    length = task.joint.length
    cells = [(cfg, seed) for cfg in samplers for seed in seeds]

    def one(cell) -> CellResult:
        cfg, seed = cell
        cfg = replace(cfg, seed=seed)
        den = DenoiserHandle(task.joint, backend, eta)
        t0 = time.perf_counter()
        rec = decode(cfg, den, length)
        wall = (time.perf_counter() - t0) * 1000.0
        return CellResult(rec, cfg.effective_label(), seed, cfg,
                          den.call_count, wall)

    if jobs == 1:
        return [one(c) for c in cells]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, cells))


def _fmt(value: float) -> str:
    return repr(float(value))


def results_rows(task: TaskSpec, outs: list[CellResult]) -> list[dict]:
    rows = []
    for out in outs:
        cfg = out.sampler
        if cfg.schedule.kind == "constant":
            k_field = str(cfg.schedule.k)
        else:
            k_field = f"{cfg.schedule.kind}:{cfg.schedule.total_steps}"
        if cfg.policy == "beam":
            beam_field = str(cfg.beam_width)
        elif cfg.policy == "best_of_n":
            beam_field = str(cfg.n_traj)
        else:
            beam_field = ""
        uses_candidates = cfg.policy in ("lookum", "info_gain", "beam",
                                         "best_of_n")
        uses_bypass = cfg.policy in ("info_gain", "beam", "best_of_n")
        policy = cfg.policy if cfg.policy != "greedy" else f"greedy:{cfg.kind}"
        rec = out.record
        rows.append({
            "run_id": f"{out.label}:{out.seed}",
            "task": task.name,
            "policy": policy,
            "seed": out.seed,
            "K": k_field,
            "tau_token": _fmt(cfg.tau_token),
            "tau_pos": _fmt(cfg.tau_pos),
            "N": cfg.n_candidates if uses_candidates else "",
            "gamma": (_fmt(cfg.gamma) if uses_bypass and cfg.gamma is not None
                      else ""),
            "beam": beam_field,
            "steps": rec.n_steps,
            "cumulative_entropy_nats": _fmt(rec.h_tilde),
            "final_state_uncertainty_nats":
                _fmt(rec.steps[-1].score.state_uncertainty_after),
            "correct": int(task.correct(rec.final_tokens)),
            "first_group": classify_path(rec, task),
            "off_manifold": int(rec.any_off_manifold()),
            "denoiser_calls": out.denoiser_calls,
            "wall_ms": f"{out.wall_ms:.3f}",
        })
    return rows


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def steps_rows(outs: list[CellResult]) -> list[dict]:
    rows = []
    for out in outs:
        cum = 0.0
        for i, step in enumerate(out.record.steps):
            cum += step.score.immediate_cost
            rows.append({
                "run_id": f"{out.label}:{out.seed}",
                "label": out.label,
                "seed": out.seed,
                "step": i + 1,
                "pairs": ";".join(f"{p}:{t}" for p, t in step.action.pairs),
                "cost_nats": _fmt(step.score.immediate_cost),
                "cumulative_nats": _fmt(cum),
                "uncertainty_before_nats":
                    _fmt(step.score.state_uncertainty_before),
                "uncertainty_after_nats":
                    _fmt(step.score.state_uncertainty_after),
                "info_gain_nats": _fmt(step.score.info_gain),
                "objective_nats": _fmt(step.score.objective),
                "bypass": int(step.bypass_used),
                "off_manifold": int(step.off_manifold),
                "n_candidates": step.n_candidates,
                "denoiser_calls": step.denoiser_calls,
            })
    return rows


def summary_rows(task: TaskSpec, outs: list[CellResult],
                 extra: Optional[dict[str, dict]] = None) -> list[dict]:
    """One row per sampler label; `extra` maps label -> grid columns."""
    summaries = summarize([o.record for o in outs], task)
    walls: dict[str, list[float]] = {}
    policies: dict[str, str] = {}
    for out in outs:
        walls.setdefault(out.label, []).append(out.wall_ms)
        cfg = out.sampler
        policies[out.label] = (cfg.policy if cfg.policy != "greedy"
                               else f"greedy:{cfg.kind}")
    rows = []
    for s in summaries:
        row = {
            "label": s.label,
            "policy": policies[s.label],
            "n_runs": s.n_runs,
            "mean_h_tilde_nats": _fmt(s.mean_h_tilde),
            "std_h_tilde_nats": _fmt(s.std_h_tilde),
            "accuracy": _fmt(s.accuracy),
            "off_manifold_rate": _fmt(s.off_manifold_rate),
            "mean_calls_per_step": _fmt(s.mean_calls_per_step),
            "mean_wall_ms": f"{sum(walls[s.label]) / len(walls[s.label]):.3f}",
        }
        for group in task.groups:
            row[f"freq_{group}"] = _fmt(s.path_frequencies[group])
        if extra is not None:
            row.update(extra.get(s.label, {}))
        rows.append(row)
    return rows


def _to_display(nats: float, bits: bool) -> float:
    return nats / LN2 if bits else nats


def print_summary_table(task: TaskSpec, rows: list[dict], bits: bool) -> None:
    unit = "bits" if bits else "nats"
    grp_cols = [f"freq_{g}" for g in task.groups]
    header = (f"{'label':<26} {'mean H~ (' + unit + ')':>16} {'std':>8} "
              f"{'acc':>6} {'off':>6} {'calls/step':>10} "
              + " ".join(f"{c:>14}" for c in grp_cols))
    print(header)
    print("-" * len(header))
    for row in rows:
        mean = _to_display(float(row["mean_h_tilde_nats"]), bits)
        std = _to_display(float(row["std_h_tilde_nats"]), bits)
        cells = " ".join(f"{float(row[c]):>14.3f}" for c in grp_cols)
        print(f"{row['label']:<26} {mean:>16.4f} {std:>8.4f} "
              f"{float(row['accuracy']):>6.3f} "
              f"{float(row['off_manifold_rate']):>6.3f} "
              f"{float(row['mean_calls_per_step']):>10.2f} {cells}")


# ---------------------------------------------------------------------------
# figures

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_trajectories(rows: list[dict], out_path: Path, bits: bool) -> None:
    plt = _pyplot()
    unit = "bits" if bits else "nats"
    series: dict[str, tuple[list[int], list[float]]] = {}
    for row in rows:
        xs, ys = series.setdefault(row["run_id"], ([], []))
        xs.append(int(row["step"]))
        ys.append(_to_display(float(row["cumulative_nats"]), bits))
    fig, ax = plt.subplots(figsize=(6, 4))
    for run_id, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", markersize=3, label=run_id)
    ax.set_xlabel("decoding step")
    ax.set_ylabel(f"cumulative entropy ({unit})")
    if len(series) <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_scatter(rows: list[dict], out_path: Path, bits: bool) -> None:
    plt = _pyplot()
    unit = "bits" if bits else "nats"
    xs = [_to_display(float(r["mean_h_tilde_nats"]), bits) for r in rows]
    ys = [float(r["accuracy"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(xs, ys)
    for r, x, y in zip(rows, xs, ys):
        ax.annotate(r["label"], (x, y), fontsize=7,
                    textcoords="offset points", xytext=(4, 4))
    r_val = _pearson(xs, ys)
    if r_val is not None:
        ax.set_title(f"Pearson r = {r_val:.3f}")
    ax.set_xlabel(f"mean cumulative entropy ({unit})")
    ax.set_ylabel("accuracy")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def _pearson(xs, ys) -> Optional[float]:
    if len(xs) < 2:
        return None
    import numpy as np
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.std() == 0.0 or y.std() == 0.0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def _varying_dimension(rows: list[dict]) -> Optional[str]:
    for dim in SWEEP_DIMENSIONS:
        if all(dim in row for row in rows):
            values = {row[dim] for row in rows}
            values.discard("")
            if len(values) > 1:
                return dim
    return None


def plot_sweep(rows: list[dict], out_path: Path, bits: bool) -> str:
    plt = _pyplot()
    dim = _varying_dimension(rows)
    if dim is None:
        raise ConfigError("no sweep dimension varies in this csv")
    unit = "bits" if bits else "nats"
    base = lambda row: row["label"].split("|", 1)[0]
    series: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        if row[dim] == "":
            continue
        series.setdefault(base(row), []).append(
            (float(row[dim]),
             _to_display(float(row["mean_h_tilde_nats"]), bits)))
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, pts in series.items():
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=label)
    ax.set_xlabel(dim)
    ax.set_ylabel(f"mean cumulative entropy ({unit})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return dim


# ---------------------------------------------------------------------------
# subcommands

def _prepare(args, min_samplers: int = 1):
    cfg = parse_config(args.config)
    if args.out is not None:
        cfg.out_dir = Path(args.out)
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.seed_override is not None:
        cfg.base_seed = args.seed_override
    _require(len(cfg.samplers) >= min_samplers,
             f"this command needs at least {min_samplers} sampler configs")
    task = build_task_spec(cfg)
    samplers = [build_sampler(t, task.joint.length, cfg.base_seed)
                for t in cfg.samplers]
    seeds = list(range(cfg.base_seed, cfg.base_seed + cfg.n_seeds))
    return cfg, task, samplers, seeds


def cmd_run(args) -> int:
    cfg, task, samplers, seeds = _prepare(args)
    outs = run_cells(task, samplers, seeds, cfg.jobs, cfg.backend, cfg.eta)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    results = cfg.out_dir / "results.csv"
    write_csv(results, RESULTS_COLUMNS, results_rows(task, outs))
    print(f"wrote {results} ({len(outs)} rows)")
    if "json_traces" in cfg.emit:
        traces = cfg.out_dir / "traces"
        traces.mkdir(exist_ok=True)
        for out in outs:
            name = f"{out.label.replace(':', '-').replace('/', '-')}-{out.seed}.json"
            with open(traces / name, "w", encoding="utf-8") as fh:
                json.dump(out.record.to_json_dict(), fh, indent=2)
                fh.write("\n")
        print(f"wrote {len(outs)} traces under {traces}")
    if "svg" in cfg.emit:
        srows = steps_rows(outs)
        write_csv(cfg.out_dir / "steps.csv", STEPS_COLUMNS, srows)
        # one representative curve per sampler; steps.csv keeps every run
        first = {out.label: f"{out.label}:{out.seed}" for out in reversed(outs)}
        shown = [r for r in srows if r["run_id"] in set(first.values())]
        plot_trajectories(shown, cfg.out_dir / "trajectory.svg", args.bits)
        print(f"wrote {cfg.out_dir / 'steps.csv'} and trajectory.svg")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg, task, samplers, seeds = _prepare(args, min_samplers=2)
    outs = run_cells(task, samplers, seeds, cfg.jobs, cfg.backend, cfg.eta)
    rows = summary_rows(task, outs)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    columns = list(rows[0].keys())
    write_csv(cfg.out_dir / "summary.csv", columns, rows)
    print_summary_table(task, rows, args.bits)
    summaries = summarize([o.record for o in outs], task)
    r = pearson_entropy_accuracy(summaries)
    if r is not None:
        print(f"Pearson r (mean H~ vs accuracy): {r:.4f}")
    print(f"wrote {cfg.out_dir / 'summary.csv'} ({len(rows)} rows)")
    if "svg" in cfg.emit:
        plot_scatter(rows, cfg.out_dir / "scatter.svg", args.bits)
        print(f"wrote {cfg.out_dir / 'scatter.svg'}")
    return EXIT_OK


def _sweep_cells(cfg: ExperimentConfig) -> list[tuple[dict, dict]]:
    """(sampler table, grid assignment) per cell, sampler-major order."""
    _require(cfg.sweep is not None and cfg.sweep,
             "sweep requires a nonempty [sweep] table")
    dims = [(d, cfg.sweep[d]) for d in SWEEP_DIMENSIONS if d in cfg.sweep]
    assignments: list[dict] = [{}]
    for dim, values in dims:
        assignments = [dict(a, **{dim: v}) for a in assignments
                       for v in values]
    cells = []
    for table in cfg.samplers:
        for assign in assignments:
            cells.append((table, assign))
    _require(len(cells) <= cfg.sweep_cap,
             f"sweep grid has {len(cells)} cells, cap is {cfg.sweep_cap}")
    return cells


def _apply_assignment(table: dict, assign: dict) -> dict:
    out = dict(table)
    suffix = []
    for dim, value in assign.items():
        if dim == "k":
            out["schedule"] = {"kind": "constant", "k": int(value)}
        else:
            out[dim] = value
        suffix.append(f"{dim}={value}")
    base = effective_label(table)
    out["label"] = base + ("|" + ",".join(suffix) if suffix else "")
    return out


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config)
    if args.out is not None:
        cfg.out_dir = Path(args.out)
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.seed_override is not None:
        cfg.base_seed = args.seed_override
    task = build_task_spec(cfg)
    cells = _sweep_cells(cfg)
    length = task.joint.length
    seeds = list(range(cfg.base_seed, cfg.base_seed + cfg.n_seeds))
    all_rows: list[dict] = []
    for table, assign in cells:
        cell_table = _apply_assignment(table, assign)
        sampler = build_sampler(cell_table, length, cfg.base_seed)
        outs = run_cells(task, [sampler], seeds, cfg.jobs, cfg.backend,
                         cfg.eta)
        grid_cols = {}
        for dim in SWEEP_DIMENSIONS:
            if dim not in assign:
                grid_cols[dim] = ""
            elif dim == "gamma" and assign[dim] == "off":
                grid_cols[dim] = "off"
            elif dim in ("k", "n_candidates", "beam_width"):
                grid_cols[dim] = str(int(assign[dim]))
            else:
                grid_cols[dim] = _fmt(float(assign[dim]))
        rows = summary_rows(task, outs,
                            extra={sampler.effective_label(): grid_cols})
        all_rows.extend(rows)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    columns = list(all_rows[0].keys())
    write_csv(cfg.out_dir / "summary.csv", columns, all_rows)
    print(f"wrote {cfg.out_dir / 'summary.csv'} ({len(all_rows)} rows)")
    if "svg" in cfg.emit:
        dim = plot_sweep(all_rows, cfg.out_dir / "sweep.svg", args.bits)
        print(f"wrote {cfg.out_dir / 'sweep.svg'} (x = {dim})")
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    _require(path.exists(), f"csv not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    _require(bool(rows), f"{path} has no data rows")
    return rows


def cmd_plot(args) -> int:
    rows = _read_csv(Path(args.csv))
    out_dir = Path(args.out) if args.out is not None else Path(args.csv).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    needed = {
        "trajectory": {"run_id", "step", "cumulative_nats"},
        "scatter": {"label", "mean_h_tilde_nats", "accuracy"},
        "sweep": {"label", "mean_h_tilde_nats"},
    }[args.kind]
    missing = needed - set(rows[0])
    _require(not missing, f"csv lacks columns {sorted(missing)} "
                          f"needed by kind {args.kind!r}")
    out_path = out_dir / f"{args.kind}.svg"
    if args.kind == "trajectory":
        plot_trajectories(rows, out_path, args.bits)
    elif args.kind == "scatter":
        plot_scatter(rows, out_path, args.bits)
    else:
        plot_sweep(rows, out_path, args.bits)
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg, task, samplers, _ = _prepare(args)
    sampler = replace(samplers[0], seed=cfg.base_seed)
    den = DenoiserHandle(task.joint, cfg.backend, cfg.eta)
    rec = decode(sampler, den, task.joint.length)
    text = json.dumps(rec.to_json_dict(), indent=2)
    if args.out is not None:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text + "\n", encoding="utf-8")
        print(f"wrote {out_path}")
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskplan",
        description="Decoding-order experiments over exact tabular oracles.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True,
                           help="TOML experiment description")
        p.add_argument("--out", default=None,
                       help="output directory (overrides config)")
        p.add_argument("--jobs", type=int, default=None,
                       help="max concurrent cells")
        p.add_argument("--bits", action="store_true",
                       help="display entropies in bits (storage stays nats)")
        p.add_argument("--seed-override", type=int, default=None,
                       help="replace the config's base seed")

    p_run = sub.add_parser("run", help="execute all cells, write results.csv")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare",
                           help="summarize >= 2 samplers side by side")
    common(p_cmp)
    p_cmp.set_defaults(func=cmd_compare)

    p_swp = sub.add_parser("sweep", help="cartesian parameter grid")
    common(p_swp)
    p_swp.set_defaults(func=cmd_sweep)

    p_plot = sub.add_parser("plot", help="render an SVG from a CSV")
    p_plot.add_argument("--csv", required=True, help="input csv path")
    p_plot.add_argument("--kind", required=True,
                        choices=("trajectory", "scatter", "sweep"))
    p_plot.add_argument("--out", default=None)
    p_plot.add_argument("--bits", action="store_true")
    p_plot.set_defaults(func=cmd_plot)

    p_tr = sub.add_parser("trace", help="dump one trajectory as JSON")
    common(p_tr)
    p_tr.set_defaults(func=cmd_trace)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DecodingInvariantError as exc:
        print(f"runtime invariant violated: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - the CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
