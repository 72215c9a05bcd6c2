"""Benchmark harness command line.

Subcommands: ``run`` (execute one configuration, possibly a small preset
grid, and write per-cell artifacts), ``sweep`` (a grid plus an aggregate
table), ``check`` (structural diagnostics with hard thresholds), and
``plot`` (SVG convergence curves from saved traces).

Everything a run writes is deterministic given the configuration and seed,
except wall-clock timings, which live only in JSON artifacts (summary and
timing sidecar), never in the trace CSVs.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import diagnostics, sensing, solvers
from .linalg import RandomStream, uniform_in_ball
from .oracles import CSV_HEADER, SolverConfig, SUMMARY_THRESHOLDS

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_CHECK_FAILURE = 3

METHODS = ("gnp", "rgnp", "polyak", "rpolyak", "scaledsm")
RESTARTED_METHODS = {"rgnp", "rpolyak"}
MAX_WORKERS_ENV = "GNPBENCH_MAX_WORKERS"

# Keys that may carry a list of values to be expanded into a grid.
GRID_KEYS = ("method", "n", "d", "r", "kappa", "pfail", "T", "K", "h0", "seed")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """One fully resolved experiment cell."""

    method: str
    n: int = 2
    d: int = 100
    r: int = 5
    m: Optional[int] = None
    m_multiplier: float = 8.0
    kappa: float = 1.0
    pfail: float = 0.0
    seed: int = 0
    T: int = 500
    K: Optional[int] = None
    h0: Optional[float] = None
    theta: Optional[float] = None
    init_radius: float = 0.1
    max_oracle_calls: Optional[int] = None
    time_budget_sec: Optional[float] = None
    target_objective_gap: Optional[float] = None
    cg_tol: float = 1e-10
    cg_max_iter: Optional[int] = None

    def resolved_m(self) -> int:
        if self.m is not None:
            return int(self.m)
        # Default sampling rule: multiplier * d * r at order 2,
        # multiplier * n * d * r for higher orders.
        scale = 1 if self.n == 2 else self.n
        return int(round(self.m_multiplier * scale * self.d * self.r))

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.n < 2 or self.d < 1 or self.r < 1 or self.r > self.d:
            raise ConfigError("need n >= 2 and 1 <= r <= d")
        if self.resolved_m() < 1:
            raise ConfigError("need at least one measurement")
        if self.kappa < 1.0:
            raise ConfigError("kappa must be at least 1")
        if not 0.0 <= self.pfail < 0.5:
            raise ConfigError("pfail must lie in [0, 1/2)")
        if self.T < 0:
            raise ConfigError("T must be nonnegative")
        if self.init_radius < 0:
            raise ConfigError("init_radius must be nonnegative")
        if self.method == "scaledsm" and self.n != 2:
            raise ConfigError("scaledsm is defined for order n=2 problems only")
        if self.method in RESTARTED_METHODS:
            if self.h0 is None:
                raise ConfigError(f"{self.method} requires an explicit lower bound h0")
            if self.K is None or self.K < 1:
                raise ConfigError(f"{self.method} requires a positive restart count K")
            if self.theta is not None and self.theta != 0.5:
                raise ConfigError("restarted runs pin the step fraction to 1/2")
        else:
            if self.pfail > 0.0:
                raise ConfigError(
                    f"{self.method} needs a known optimal value; with pfail > 0 use rgnp/rpolyak"
                )
            if self.method == "gnp":
                if self.theta is not None and not 0.5 <= self.theta <= 1.0:
                    raise ConfigError("theta must lie in [1/2, 1]")
            elif self.theta is not None:
                raise ConfigError(f"{self.method} uses its fixed stepsize rule; theta not accepted")

    def label(self) -> str:
        parts = [
            self.method,
            f"n{self.n}",
            f"d{self.d}",
            f"r{self.r}",
            f"m{self.resolved_m()}",
            f"k{self.kappa:g}",
            f"p{self.pfail:g}",
            f"s{self.seed}",
            f"T{self.T}",
        ]
        if self.K is not None:
            parts.append(f"K{self.K}")
        if self.h0 is not None:
            parts.append(f"h{self.h0:g}")
        return "_".join(parts)


PRESETS: dict[str, dict] = {
    # Condition-number comparison, preconditioned vs plain subgradient.
    "fig1-desk": {
        "method": ["gnp", "polyak"],
        "kappa": [1.0, 10.0],
        "n": 2, "d": 100, "r": 5, "pfail": 0.0, "seed": 11,
        "T": 5000, "max_oracle_calls": 5000, "target_objective_gap": 1e-8,
        "plot": True,
    },
    # Same instances, preconditioned vs metric-scaled subgradient.
    "fig2-desk": {
        "method": ["gnp", "scaledsm"],
        "kappa": [1.0, 10.0],
        "n": 2, "d": 100, "r": 5, "pfail": 0.0, "seed": 11,
        "T": 5000, "max_oracle_calls": 5000, "target_objective_gap": 1e-8,
        "plot": True,
    },
    # Tensor order sweep at moderate conditioning.
    "fig3-desk": {
        "method": ["gnp", "polyak"],
        "n": [2, 3, 4],
        "d": 50, "r": 5, "kappa": 3.0, "pfail": 0.0, "seed": 21,
        "T": 10000, "max_oracle_calls": 10000, "target_objective_gap": 1e-6,
        "plot": True,
    },
    # Corrupted measurements, restarted methods with lower bound 0.
    "fig4-desk": {
        "cells": [
            {"method": "rgnp", "T": 200, "K": 50},
            {"method": "rpolyak", "T": 1000, "K": 10},
        ],
        "pfail": [0.1, 0.2],
        "n": 2, "d": 50, "r": 5, "kappa": 5.0, "h0": 0.0, "seed": 7,
        "max_oracle_calls": 10000,
        "plot": True,
    },
    # Rank sweep at order 3.
    "fig5-desk": {
        "method": ["gnp", "polyak"],
        "r": [2, 5, 8],
        "n": 3, "d": 50, "kappa": 3.0, "pfail": 0.0, "seed": 23,
        "T": 10000, "max_oracle_calls": 10000, "target_objective_gap": 1e-6,
        "plot": True,
    },
    # Small instance for the structural checks.
    "check-small": {
        "method": "gnp",
        "n": 2, "d": 6, "r": 2, "kappa": 2.0, "pfail": 0.0, "seed": 3,
        "T": 400, "target_objective_gap": 1e-10,
    },
}


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def expand_config(doc: dict, seed_override: Optional[int] = None):
    """Resolve a config document into experiment cells plus harness options.

    A document may name a ``preset`` (explicit keys override the preset's),
    provide a ``cells`` list of per-cell overrides, and give lists for any
    of the grid keys; lists expand to their cross product in declaration
    order. Cells share the base seed unless they pin their own or the grid
    sweeps over ``seed``, so method comparisons within one sweep run on
    identical instances.
    """
    doc = dict(doc)
    preset_name = doc.pop("preset", None)
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
        merged = json.loads(json.dumps(PRESETS[preset_name]))  # deep copy
        merged.update(doc)
        doc = merged

    options = {
        "out": doc.pop("out", None),
        "plot": bool(doc.pop("plot", False)),
        "preset": preset_name,
    }

    cells_spec = doc.pop("cells", [None])
    if not isinstance(cells_spec, list) or not cells_spec:
        raise ConfigError("cells must be a nonempty list of objects")
    if seed_override is not None:
        doc["seed"] = seed_override

    known = set(ExperimentConfig.__dataclass_fields__)
    configs = []
    for cell_doc in cells_spec:
        merged = dict(doc)
        if cell_doc is not None:
            if not isinstance(cell_doc, dict):
                raise ConfigError("each cell must be a JSON object")
            merged.update(cell_doc)
            if seed_override is not None and "seed" not in cell_doc:
                merged["seed"] = seed_override
        unknown = set(merged) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        grid_items = [
            (key, merged[key]) for key in GRID_KEYS
            if key in merged and isinstance(merged[key], list)
        ]
        grid_keys = [key for key, _ in grid_items]
        for combo in itertools.product(*(vals for _, vals in grid_items)):
            resolved = dict(merged)
            resolved.update(dict(zip(grid_keys, combo)))
            try:
                cfg = ExperimentConfig(**resolved)
            except TypeError as exc:
                raise ConfigError(str(exc))
            cfg.validate()
            configs.append(cfg)

    labels = [c.label() for c in configs]
    if len(set(labels)) != len(labels):
        raise ConfigError("configuration expands to cells with identical labels")
    return configs, options


def _solver_config(cell: ExperimentConfig) -> SolverConfig:
    return SolverConfig(
        max_oracle_calls=cell.max_oracle_calls,
        time_budget=cell.time_budget_sec,
        cg_tol=cell.cg_tol,
        cg_max_iter=cell.cg_max_iter,
        step_fraction=cell.theta if (cell.theta is not None and cell.method == "gnp") else 1.0,
        target_objective_gap=cell.target_objective_gap,
    )


def run_cell(cell: ExperimentConfig, out_dir: Path) -> dict:
    """Generate the cell's instance, solve it, and write its artifacts.

    Writes ``<label>.csv`` (pinned schema, byte-reproducible),
    ``<label>.summary.json`` (config echo, thresholds, timings),
    ``<label>.timing.json`` (per-row wall seconds), and
    ``<label>.instance.json`` (regenerable instance description).
    """
    m = cell.resolved_m()
    stream = RandomStream(cell.seed)
    inst = sensing.generate_instance(stream, cell.n, cell.d, cell.r, m, cell.kappa, cell.pfail)
    oracle = sensing.make_oracle(inst)
    reference = sensing.reference_optimal_value(inst)
    radius = cell.init_radius * float(np.linalg.norm(inst.X_star))
    x0 = inst.X_star + uniform_in_ball(stream.substream("init"), cell.d, cell.r, radius)

    cfg = _solver_config(cell)
    metadata = {
        "method": cell.method, "seed": cell.seed, "n": cell.n, "d": cell.d,
        "r": cell.r, "m": m, "kappa": cell.kappa, "pfail": cell.pfail,
    }
    common = dict(metadata=metadata, report_reference=reference)
    if cell.method == "gnp":
        best, record = solvers.gnp(oracle, x0, cell.T, cfg, **common)
    elif cell.method == "polyak":
        best, record = solvers.polyak_subgrad(oracle, x0, cell.T, cfg, **common)
    elif cell.method == "scaledsm":
        best, record = solvers.scaled_sm(oracle, x0, cell.T, cfg, **common)
    elif cell.method == "rgnp":
        best, record = solvers.rgnp(oracle, x0, cell.h0, cell.T, cell.K, cfg, **common)
    elif cell.method == "rpolyak":
        best, record = solvers.rpolyak(oracle, x0, cell.h0, cell.T, cell.K, cfg, **common)
    else:  # pragma: no cover - validate() rejects earlier
        raise ConfigError(f"unknown method {cell.method!r}")

    label = cell.label()
    trace_path = out_dir / f"{label}.csv"
    record.to_csv(trace_path)
    timing_path = out_dir / f"{label}.timing.json"
    with open(timing_path, "w") as fh:
        json.dump({"time_sec": [row.time_sec for row in record.rows]}, fh)
        fh.write("\n")
    instance_path = out_dir / f"{label}.instance.json"
    sensing.save_instance(inst, instance_path)

    last = record.rows[-1]
    best_h = min(row.h_value for row in record.rows)
    summary = {
        "label": label,
        "config": asdict(cell),
        "m": m,
        "reference_value": reference,
        "optimal_value_known": oracle.optimal_value is not None,
        "rows": len(record.rows),
        "oracle_calls": last.oracle_calls,
        "wall_time_sec": last.time_sec,
        "best_objective": best_h,
        "best_objective_gap": best_h - reference,
        "thresholds": record.summary(),
        "restarts": [
            {"k": s.k, "lower_bound": s.lower_bound, "round_best": s.incumbent_value}
            for s in record.restart_history
        ],
        "status": "ok",
    }
    summary_path = out_dir / f"{label}.summary.json"
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    return {
        "label": label,
        "config": cell,
        "record": record,
        "trace_csv": str(trace_path),
        "summary": summary,
        "summary_json": str(summary_path),
        "timing_json": str(timing_path),
        "instance_json": str(instance_path),
    }


def _max_workers(n_cells: int) -> int:
    env = os.environ.get(MAX_WORKERS_ENV)
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise ConfigError(f"{MAX_WORKERS_ENV} must be an integer, got {env!r}")
    else:
        cap = min(4, os.cpu_count() or 1)
    return max(1, min(cap, n_cells))


def run_cells(cells, out_dir: Path):
    """Run all cells (concurrently when more than one) in stable order.

    Returns (artifacts, failures); artifacts keep the cell order. Each cell
    owns its instance, stream, and output files, so scheduling cannot
    change any output byte.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = []
    results = [None] * len(cells)

    def _one(index_cell):
        index, cell = index_cell
        return index, run_cell(cell, out_dir)

    if len(cells) == 1:
        try:
            results[0] = run_cell(cells[0], out_dir)
        except Exception as exc:  # noqa: BLE001 - isolated per cell
            failures.append((cells[0].label(), exc))
    else:
        with ThreadPoolExecutor(max_workers=_max_workers(len(cells))) as pool:
            futures = {pool.submit(_one, (i, c)): c for i, c in enumerate(cells)}
            for future, cell in futures.items():
                try:
                    index, artifact = future.result()
                    results[index] = artifact
                except Exception as exc:  # noqa: BLE001
                    failures.append((cell.label(), exc))
    artifacts = [r for r in results if r is not None]
    for label, exc in failures:
        error_doc = {"label": label, "status": "failed", "error": repr(exc),
                     "traceback": traceback.format_exception(exc)}
        with open(out_dir / f"{label}.error.json", "w") as fh:
            json.dump(error_doc, fh, indent=2)
            fh.write("\n")
    return artifacts, failures


AGGREGATE_NAME = "sweep_aggregate.csv"


def write_aggregate(artifacts, out_dir: Path) -> Path:
    """Aggregate table keyed by cell: parameters plus oracle calls to each
    threshold. Seconds stay in the per-cell summaries (not reproducible)."""
    path = out_dir / AGGREGATE_NAME
    thresholds = [f"{tau:.0e}" for tau in SUMMARY_THRESHOLDS]
    header = ["label", "method", "seed", "n", "d", "r", "m", "kappa", "pfail",
              "best_objective_gap"] + [f"calls_to_{t}" for t in thresholds]
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for art in artifacts:
            s = art["summary"]
            cfg = s["config"]
            row = [
                s["label"], cfg["method"], str(cfg["seed"]), str(cfg["n"]), str(cfg["d"]),
                str(cfg["r"]), str(s["m"]), repr(float(cfg["kappa"])), repr(float(cfg["pfail"])),
                repr(float(s["best_objective_gap"])),
            ]
            for t in thresholds:
                hit = s["thresholds"][t]
                row.append("" if hit is None else str(hit["oracle_calls"]))
            fh.write(",".join(row) + "\n")
    return path


# ---------------------------------------------------------------------------
# Plotting

X_AXES = ("oracle_calls", "time")
Y_AXES = ("obj_gap", "image_dist")
_AXIS_LABELS = {
    "oracle_calls": "oracle calls",
    "time": "wall time (s)",
    "obj_gap": "objective gap",
    "image_dist": "image distance",
}


def load_trace(path: Path) -> dict:
    """Load one trace CSV (and its timing sidecar when present)."""
    import csv

    with open(path) as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path} does not carry the pinned trace schema")
        rows = list(reader)
    out = {
        "path": str(path),
        "method": rows[0]["method"] if rows else "",
        "kappa": rows[0]["kappa"] if rows else "",
        "pfail": rows[0]["pfail"] if rows else "",
        "n": rows[0]["n"] if rows else "",
        "r": rows[0]["r"] if rows else "",
        "oracle_calls": [int(r["oracle_calls"]) for r in rows],
        "obj_gap": [float(r["obj_gap"]) if r["obj_gap"] else None for r in rows],
        "image_dist": [float(r["image_dist"]) if r["image_dist"] else None for r in rows],
        "time": None,
    }
    sidecar = path.parent / (path.stem + ".timing.json")
    if sidecar.exists():
        with open(sidecar) as fh:
            out["time"] = json.load(fh)["time_sec"]
    return out


def _trace_label(trace: dict) -> str:
    label = trace["method"]
    if trace["kappa"]:
        label += f" k={float(trace['kappa']):g}"
    if trace["pfail"] and float(trace["pfail"]) > 0:
        label += f" pfail={float(trace['pfail']):g}"
    return label


def plot_traces(traces, x_axis: str, y_axis: str, out_path: Path) -> Path:
    """One log-y curve per trace; returns the written SVG path."""
    if x_axis not in X_AXES or y_axis not in Y_AXES:
        raise ValueError(f"axes must be {X_AXES} x {Y_AXES}")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    for trace in traces:
        xs = trace["oracle_calls"] if x_axis == "oracle_calls" else trace["time"]
        if xs is None:
            raise ValueError(f"{trace['path']} has no timing sidecar for the time axis")
        ys_raw = trace[y_axis]
        if all(v is None for v in ys_raw):
            raise ValueError(f"{trace['path']} has an empty {y_axis} column")
        ys = [v if (v is not None and v > 0) else np.nan for v in ys_raw]
        ax.plot(xs, ys, label=_trace_label(trace), linewidth=1.2)
    ax.set_yscale("log")
    ax.set_xlabel(_AXIS_LABELS[x_axis])
    ax.set_ylabel(_AXIS_LABELS[y_axis])
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path


# ---------------------------------------------------------------------------
# Structural checks

FD_MAX_REL_ERROR = 1e-4


def _evaluate_check_thresholds(report: dict) -> list[str]:
    """Hard pass/fail rules for the check report; returns failure messages."""
    failures = []
    fd = report["finite_difference"]
    if fd["max_rel_error"] > FD_MAX_REL_ERROR:
        failures.append(
            f"finite-difference error {fd['max_rel_error']:.3e} exceeds {FD_MAX_REL_ERROR:g}"
        )
    rank = report["constant_rank"]
    if not rank["constant"]:
        failures.append(f"Jacobian rank varies across sample points: {rank['ranks']}")
    if rank["ambiguous_points"]:
        failures.append(f"{rank['ambiguous_points']} rank measurement(s) are tolerance-sensitive")
    sharp = report["sharpness"]
    if not sharp["mu_hat"] > 0:
        failures.append(f"sharpness lower estimate is not positive: {sharp['mu_hat']:.3e}")
    return failures


def run_check(cell: ExperimentConfig, fd_points: int = 20, rank_points: int = 10,
              sharpness_samples: int = 200, radius_frac: float = 0.1) -> dict:
    """Run the structural diagnostics on the cell's instance."""
    m = cell.resolved_m()
    stream = RandomStream(cell.seed)
    inst = sensing.generate_instance(stream, cell.n, cell.d, cell.r, m, cell.kappa, cell.pfail)
    radius = radius_frac * float(np.linalg.norm(inst.X_star))

    fd_report = diagnostics.fd_check_random_points(
        inst, stream.substream("fd-check"), points=fd_points
    )
    rank_report = diagnostics.constant_rank_report(
        inst, stream.substream("rank-check"), points=rank_points, radius_frac=radius_frac
    )
    mu_hat, l_hat = diagnostics.estimate_sharpness(
        inst, stream.substream("sharpness"), samples=sharpness_samples, radius=radius
    )
    constants = None
    rate = None
    if mu_hat > 0:
        constants = diagnostics.derive_constants(
            mu_h=mu_hat, L_h=l_hat,
            mu_c=diagnostics.estimate_jacobian_floor(inst, inst.X_star),
            L_grad_c=1.0, L_c=1.0, curvature_C=1.0, radius_R=1.0,
        )
        if not inst.noise.any():
            oracle = sensing.make_oracle(inst)
            x0 = inst.X_star + uniform_in_ball(
                stream.substream("init"), cell.d, cell.r, cell.init_radius * float(np.linalg.norm(inst.X_star))
            )
            cfg = _solver_config(cell)
            _, record = solvers.gnp(oracle, x0, cell.T, cfg, record_aiming=True)
            # Image distances below sqrt(eps) * planted tensor norm carry no
            # digits; keep them out of the fit and the aiming monitor.
            distance_floor = 10.0 * np.sqrt(np.finfo(float).eps) * sensing.image_norm(inst, inst.X_star)
            rate = diagnostics.rate_report(record, constants, floor=distance_floor)

    report = {
        "header": {
            "surrogate": diagnostics.SURROGATE_NOTE,
            "instance": {"n": cell.n, "d": cell.d, "r": cell.r, "m": m,
                         "kappa": cell.kappa, "pfail": cell.pfail, "seed": cell.seed},
            "user_supplied_constants": ["L_grad_c", "L_c", "curvature_C", "radius_R"],
        },
        "finite_difference": fd_report,
        "constant_rank": rank_report,
        "sharpness": {"mu_hat": mu_hat, "L_hat": l_hat, "samples": sharpness_samples,
                      "radius": radius},
        "constants": None if constants is None else asdict(constants),
        "rate": rate,
    }
    report["failures"] = _evaluate_check_thresholds(report)
    report["passed"] = not report["failures"]
    return report


# ---------------------------------------------------------------------------
# Command line

def _default_out(options: dict, config_path: str) -> Path:
    if options.get("out"):
        return Path(options["out"])
    stem = options.get("preset") or Path(config_path).stem
    return Path("runs") / stem


def cmd_run(args) -> int:
    doc = load_config(args.config)
    cells, options = expand_config(doc, seed_override=args.seed)
    out_dir = Path(args.out) if args.out else _default_out(options, args.config)
    artifacts, failures = run_cells(cells, out_dir)
    for art in artifacts:
        gap = art["summary"]["best_objective_gap"]
        print(f"{art['label']}: best objective gap {gap:.3e}, "
              f"{art['summary']['oracle_calls']} oracle calls -> {art['trace_csv']}")
    plot_paths = []
    if options.get("plot") and artifacts:
        traces = [load_trace(Path(art["trace_csv"])) for art in artifacts]
        stem = options.get("preset") or "run"
        plot_paths.append(plot_traces(traces, "oracle_calls", "obj_gap",
                                      out_dir / f"{stem}_obj_gap_vs_oracle_calls.svg"))
        for p in plot_paths:
            print(f"plot -> {p}")
    for label, exc in failures:
        print(f"FAILED {label}: {exc}", file=sys.stderr)
    return EXIT_RUN_FAILURE if failures else EXIT_OK


def cmd_sweep(args) -> int:
    doc = load_config(args.config)
    cells, options = expand_config(doc)
    out_dir = Path(args.out) if args.out else _default_out(options, args.config)
    artifacts, failures = run_cells(cells, out_dir)
    aggregate = write_aggregate(artifacts, out_dir)
    print(f"{len(artifacts)}/{len(cells)} cells completed; aggregate -> {aggregate}")
    if options.get("plot") and artifacts:
        traces = [load_trace(Path(art["trace_csv"])) for art in artifacts]
        stem = options.get("preset") or "sweep"
        path = plot_traces(traces, "oracle_calls", "obj_gap",
                           out_dir / f"{stem}_obj_gap_vs_oracle_calls.svg")
        print(f"plot -> {path}")
    for label, exc in failures:
        print(f"FAILED {label}: {exc}", file=sys.stderr)
    return EXIT_RUN_FAILURE if failures else EXIT_OK


def cmd_check(args) -> int:
    doc = load_config(args.config)
    cells, options = expand_config(doc)
    if len(cells) != 1:
        raise ConfigError("check expects a configuration that resolves to a single cell")
    cell = cells[0]
    if cell.d * cell.r > 2000:
        raise ConfigError("check needs d*r <= 2000 to densify the Gram operator")
    report = run_check(cell)
    out_dir = Path(args.out) if args.out else _default_out(options, args.config)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "check.json"
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(report, indent=2, sort_keys=True))
    print(f"report -> {path}")
    if not report["passed"]:
        for failure in report["failures"]:
            print(f"CHECK FAILED: {failure}", file=sys.stderr)
        return EXIT_CHECK_FAILURE
    return EXIT_OK


def cmd_plot(args) -> int:
    in_dir = Path(args.indir)
    if not in_dir.is_dir():
        print(f"no such directory: {in_dir}", file=sys.stderr)
        return EXIT_RUN_FAILURE
    traces = []
    for path in sorted(in_dir.glob("*.csv")):
        if path.name == AGGREGATE_NAME:
            continue
        try:
            traces.append(load_trace(path))
        except ValueError:
            continue  # not a trace file
    if not traces:
        print(f"no trace CSVs found in {in_dir}; nothing to plot")
        return EXIT_OK
    out_path = in_dir / f"plot_{args.y}_vs_{args.x}.svg"
    try:
        plot_traces(traces, args.x, args.y, out_path)
    except ValueError as exc:
        print(f"cannot plot: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE
    print(f"plot -> {out_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gnpbench",
        description="Gauss-Newton preconditioned subgradient benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one configuration (or preset) and write artifacts")
    p_run.add_argument("--config", required=True, help="JSON config file; may name a preset")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the base seed")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a parameter grid and write an aggregate table")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(func=cmd_sweep)

    p_check = sub.add_parser("check", help="run structural diagnostics with hard thresholds")
    p_check.add_argument("--config", required=True)
    p_check.add_argument("--out", default=None)
    p_check.set_defaults(func=cmd_check)

    p_plot = sub.add_parser("plot", help="plot saved traces as SVG")
    p_plot.add_argument("--in", dest="indir", required=True, help="directory of trace CSVs")
    p_plot.add_argument("--x", choices=X_AXES, default="oracle_calls")
    p_plot.add_argument("--y", choices=Y_AXES, default="obj_gap")
    p_plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except solvers.SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
