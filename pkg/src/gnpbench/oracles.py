"""Contracts between problems and solvers.

A problem exposes a :class:`CompositeOracle`; a solver consumes it and fills
a :class:`RunRecord`. Solvers never see the raw subgradient of the outer
penalty, only its pullback and the Gram action, which keeps every update
computable on the small factor matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .linalg import SelfAdjointAction

__all__ = [
    "PullbackBundle",
    "CompositeOracle",
    "SolverConfig",
    "TraceRow",
    "RunRecord",
    "best_iterate",
    "CSV_HEADER",
    "SUMMARY_THRESHOLDS",
]

CSV_HEADER = (
    "method",
    "seed",
    "n",
    "d",
    "r",
    "m",
    "kappa",
    "pfail",
    "restart_k",
    "iter",
    "oracle_calls",
    "time_sec",
    "obj_gap",
    "image_dist",
    "step_size",
    "proj_norm_sq",
    "cg_iters",
    "flags",
)

SUMMARY_THRESHOLDS = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)


@dataclass(frozen=True)
class PullbackBundle:
    """Objective value, subgradient pullback, and Gram action at one point.

    ``g`` is the pullback of a subgradient of the outer penalty through the
    Jacobian of the inner map; ``gram`` applies the Gauss-Newton
    preconditioner at the same point.
    """

    h_value: float
    g: np.ndarray
    gram: SelfAdjointAction


@dataclass(frozen=True)
class CompositeOracle:
    """Capabilities a solver may consume for one composite problem.

    ``objective`` evaluates the composition at an iterate and ``pullback``
    returns the matching :class:`PullbackBundle` (its ``h_value`` equals the
    objective at the same point). ``optimal_value`` is present when the
    optimal objective is known, e.g. zero for noiseless synthetic problems.
    ``image_distance`` measures distance from the current image to the
    solution image when the problem can supply a surrogate for that set, and
    ``image_difference_pullback`` pulls the image difference back through the
    Jacobian for aiming diagnostics.
    """

    shape: tuple[int, int]
    objective: Callable[[np.ndarray], float]
    pullback: Callable[[np.ndarray], PullbackBundle]
    optimal_value: Optional[float] = None
    image_distance: Optional[Callable[[np.ndarray], float]] = None
    image_difference_pullback: Optional[Callable[[np.ndarray], np.ndarray]] = None


@dataclass
class SolverConfig:
    """Budgets and numerical knobs shared by all solvers.

    ``step_fraction`` is the fraction of the admissible stepsize bracket the
    Gauss-Newton update uses; admissible values live in [1/2, 1].
    ``critical_norm_floor`` stops a solver once the squared norm in the
    stepsize denominator falls below it, since the stepsize is undefined at
    an exactly critical point.
    """

    max_oracle_calls: Optional[int] = None
    time_budget: Optional[float] = None
    cg_tol: float = 1e-10
    cg_max_iter: Optional[int] = None
    step_fraction: float = 1.0
    target_objective_gap: Optional[float] = None
    critical_norm_floor: float = 1e-14

    def __post_init__(self):
        if not 0.5 <= self.step_fraction <= 1.0:
            raise ValueError("step_fraction must lie in [1/2, 1]")
        if self.cg_tol <= 0:
            raise ValueError("cg_tol must be positive")
        if self.critical_norm_floor < 0:
            raise ValueError("critical_norm_floor must be nonnegative")
        if self.max_oracle_calls is not None and self.max_oracle_calls < 1:
            raise ValueError("max_oracle_calls must be positive when given")
        if self.time_budget is not None and self.time_budget <= 0:
            raise ValueError("time_budget must be positive when given")
        if self.cg_max_iter is not None and self.cg_max_iter < 1:
            raise ValueError("cg_max_iter must be positive when given")


@dataclass
class TraceRow:
    """One oracle call: state columns plus, when a step was attempted, the
    step columns. Fields beyond the persisted CSV schema (``h_value``,
    ``cg_residual``, ``proj_norm_rel_gap``, ``aiming``) stay in memory for
    diagnostics and tests."""

    iteration: int
    oracle_calls: int
    time_sec: float
    h_value: float
    obj_gap: Optional[float] = None
    image_dist: Optional[float] = None
    step_size: Optional[float] = None
    proj_norm_sq: Optional[float] = None
    cg_iters: Optional[int] = None
    cg_residual: Optional[float] = None
    proj_norm_rel_gap: Optional[float] = None
    aiming: Optional[float] = None
    restart_k: Optional[int] = None
    flags: tuple[str, ...] = ()


def _fmt_float(v) -> str:
    return "" if v is None else repr(float(v))


def _fmt_int(v) -> str:
    return "" if v is None else str(int(v))


class RunRecord:
    """Per-iteration trace of one solver run plus run metadata.

    The persisted CSV schema is fixed (:data:`CSV_HEADER`). Wall-clock values
    are withheld from the CSV so rerunning a configuration reproduces the
    file byte for byte; timings remain available in memory, through
    :meth:`summary`, and in the timing sidecar the CLI writes.
    """

    def __init__(self, metadata=None):
        self.metadata = dict(metadata or {})
        self.rows: list[TraceRow] = []
        self.iterates: Optional[list[np.ndarray]] = None
        self.restart_history: list = []

    def append(self, row: TraceRow):
        if self.rows and row.oracle_calls <= self.rows[-1].oracle_calls:
            raise ValueError("oracle_calls must be strictly increasing")
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [getattr(row, name) for row in self.rows]

    def best_row_index(self) -> int:
        if not self.rows:
            raise ValueError("empty trace")
        values = self.column("h_value")
        best = min(values)
        return values.index(best)  # earliest on ties

    def summary(self, thresholds=SUMMARY_THRESHOLDS) -> dict:
        """Oracle calls and wall seconds to each objective-gap threshold."""
        out = {}
        for tau in thresholds:
            hit = next(
                (row for row in self.rows if row.obj_gap is not None and row.obj_gap <= tau),
                None,
            )
            out[f"{tau:.0e}"] = (
                None
                if hit is None
                else {"oracle_calls": hit.oracle_calls, "time_sec": hit.time_sec}
            )
        return out

    def to_csv(self, path):
        meta = self.metadata
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join(CSV_HEADER) + "\n")
            for row in self.rows:
                fh.write(
                    ",".join(
                        (
                            str(meta.get("method", "")),
                            _fmt_int(meta.get("seed")),
                            _fmt_int(meta.get("n")),
                            _fmt_int(meta.get("d")),
                            _fmt_int(meta.get("r")),
                            _fmt_int(meta.get("m")),
                            _fmt_float(meta.get("kappa")),
                            _fmt_float(meta.get("pfail")),
                            _fmt_int(row.restart_k),
                            str(row.iteration),
                            str(row.oracle_calls),
                            "",  # time_sec: withheld, see class docstring
                            _fmt_float(row.obj_gap),
                            _fmt_float(row.image_dist),
                            _fmt_float(row.step_size),
                            _fmt_float(row.proj_norm_sq),
                            _fmt_int(row.cg_iters),
                            "|".join(row.flags),
                        )
                    )
                    + "\n"
                )


def best_iterate(record: RunRecord, iterates) -> np.ndarray:
    """Stored iterate with the smallest recorded objective, earliest on ties."""
    if not record.rows:
        raise ValueError("empty trace")
    if len(iterates) != len(record.rows):
        raise ValueError("need one stored iterate per trace row")
    return iterates[record.best_row_index()]
