"""Subgradient solvers for composite problems.

``gnp`` preconditions the pulled-back subgradient with the pseudoinverse of
the Gauss-Newton operator (computed matrix-free by CG on the normal
equations) and uses a Polyak-type stepsize against the known optimal value.
``rgnp`` wraps it in a restart loop that only needs a lower bound on the
optimum. ``polyak_subgrad`` and ``scaled_sm`` are the unpreconditioned and
metric-scaled baselines.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from math import ceil, log
from typing import Optional

import numpy as np

from .linalg import cg_min_norm
from .oracles import CompositeOracle, PullbackBundle, RunRecord, SolverConfig, TraceRow

__all__ = [
    "SolverError",
    "StepInfo",
    "RestartState",
    "gnp_step",
    "gnp",
    "polyak_subgrad",
    "scaled_sm",
    "rgnp",
    "rpolyak",
    "predicted_iterations",
]

# How closely the two computable forms of the squared projected norm must
# agree before the step is trusted (they differ only through CG error).
PROJ_NORM_AGREEMENT = 1e-6


class SolverError(RuntimeError):
    """Unrecoverable numerical failure inside a solver step."""


@dataclass
class StepInfo:
    """What one step did: stepsize, its squared-norm denominator, and flags.

    ``proj_norm_sq`` is the squared projected-subgradient norm for the
    Gauss-Newton step, the squared subgradient norm for the plain Polyak
    step, and the scaled-metric quadratic form for the scaled step. Flags:
    ``step-skipped`` (objective at or below the reference, no step taken),
    ``near-critical`` (denominator under the configured floor, no step
    taken), ``cg-failed`` (CG missed its tolerance or the two projected-norm
    forms disagree; the step still uses their mean).
    """

    gamma: float
    proj_norm_sq: Optional[float]
    h_value: float
    cg_iters: Optional[int] = None
    cg_residual: Optional[float] = None
    proj_norm_rel_gap: Optional[float] = None
    flags: tuple[str, ...] = ()


@dataclass
class RestartState:
    """Outer-loop state of a restarted run: round index, the lower bound used
    during the round, and the round's best iterate with its objective."""

    k: int
    lower_bound: float
    incumbent: np.ndarray
    incumbent_value: float


@dataclass
class _Direction:
    d: np.ndarray
    denom: float
    cg_iters: Optional[int] = None
    cg_residual: Optional[float] = None
    rel_gap: Optional[float] = None
    flags: tuple[str, ...] = ()


def _gnp_direction(oracle, x, bundle: PullbackBundle, cfg: SolverConfig) -> _Direction:
    max_iter = cfg.cg_max_iter if cfg.cg_max_iter is not None else 4 * bundle.g.size
    sol = cg_min_norm(bundle.gram, bundle.g, tol=cfg.cg_tol, max_iter=max_iter)
    flags: tuple[str, ...] = ()
    if sol.rel_residual > cfg.cg_tol:
        flags += ("cg-failed",)
    # Two forms of the squared projected norm: <g, D> and <gram(D), D>.
    # They agree exactly at the CG limit; their residual gap measures how
    # much the solve can be trusted. The step uses their mean.
    primal = float(np.vdot(bundle.g, sol.solution))
    via_gram = float(np.vdot(bundle.gram(sol.solution), sol.solution))
    denom = 0.5 * (primal + via_gram)
    rel_gap = abs(primal - via_gram) / max(abs(primal), np.finfo(float).tiny)
    if rel_gap > PROJ_NORM_AGREEMENT and "cg-failed" not in flags:
        flags += ("cg-failed",)
    return _Direction(sol.solution, denom, sol.iterations, sol.rel_residual, rel_gap, flags)


def _polyak_direction(oracle, x, bundle: PullbackBundle, cfg: SolverConfig) -> _Direction:
    return _Direction(bundle.g, float(np.vdot(bundle.g, bundle.g)))


def _scaled_direction(oracle, x, bundle: PullbackBundle, cfg: SolverConfig) -> _Direction:
    metric = x.T @ x
    svals = np.linalg.svd(metric, compute_uv=False)
    if svals[-1] <= 1e-14 * max(svals[0], 1.0):
        raise SolverError(
            f"scaled metric is singular: sigma_min(X^T X) = {svals[-1]:.3e}"
            f" against sigma_max = {svals[0]:.3e}"
        )
    d = np.linalg.solve(metric, bundle.g.T).T
    return _Direction(d, float(np.vdot(bundle.g, d)))


def _apply_step(x, bundle, h_ref, theta, cfg, direction_fn, oracle):
    """Shared step rule: x - theta * (h - h_ref) / denom * direction."""
    gap = bundle.h_value - h_ref
    if gap <= 0.0:
        return x, StepInfo(0.0, None, bundle.h_value, flags=("step-skipped",)), None
    dirn = direction_fn(oracle, x, bundle, cfg)
    if dirn.denom < cfg.critical_norm_floor:
        info = StepInfo(
            0.0, max(dirn.denom, 0.0), bundle.h_value, dirn.cg_iters, dirn.cg_residual,
            dirn.rel_gap, dirn.flags + ("near-critical",),
        )
        return x, info, dirn.d
    gamma = theta * gap / dirn.denom
    info = StepInfo(
        gamma, dirn.denom, bundle.h_value, dirn.cg_iters, dirn.cg_residual,
        dirn.rel_gap, dirn.flags,
    )
    return x - gamma * dirn.d, info, dirn.d


def gnp_step(oracle: CompositeOracle, x, h_ref: float, cfg: SolverConfig | None = None):
    """One Gauss-Newton subgradient step against the reference value ``h_ref``.

    Computes the pullback bundle at ``x`` (one oracle call), solves the
    normal equations for the preconditioned direction, and steps by
    ``step_fraction * (h - h_ref)`` over the squared projected norm. Returns
    ``(x_next, StepInfo)``; the iterate is unchanged when the step is
    skipped (``h <= h_ref``) or the projected norm is under the critical
    floor.
    """
    cfg = cfg if cfg is not None else SolverConfig()
    x = np.asarray(x, dtype=float)
    bundle = oracle.pullback(x)
    x_next, info, _ = _apply_step(x, bundle, h_ref, cfg.step_fraction, cfg, _gnp_direction, oracle)
    return x_next, info


@dataclass
class _RunState:
    started: float
    calls: int = 0
    best_h: float = np.inf
    best_x: Optional[np.ndarray] = None
    stop: Optional[str] = None  # sticky stop reason, halts restart loops too


def _inner_run(oracle, x0, T, h_ref, theta, direction_fn, cfg, record, state,
               report_ref, gap_ref, restart_k=None, record_aiming=False):
    """Run up to ``T`` steps, one trace row per oracle call.

    Returns the best iterate of this segment with its objective. A skipped
    or near-critical step freezes the iterate, so the segment ends there:
    every further iteration would repeat verbatim.
    """
    x = np.array(x0, dtype=float)
    seg_best_h = np.inf
    seg_best_x = None
    t = 0
    while True:
        bundle = oracle.pullback(x)
        state.calls += 1
        h = float(bundle.h_value)
        elapsed = time.perf_counter() - state.started
        finite = np.isfinite(h)
        if finite and h < seg_best_h:
            seg_best_h = h
            seg_best_x = x.copy()
        if finite and h < state.best_h:
            state.best_h = h
            state.best_x = x.copy()
        obj_gap = (h - report_ref) if report_ref is not None else None
        idist = float(oracle.image_distance(x)) if oracle.image_distance is not None else None

        stop = None
        if not finite:
            stop = "non-finite"
        elif (
            cfg.target_objective_gap is not None
            and gap_ref is not None
            and h - gap_ref <= cfg.target_objective_gap
        ):
            stop = "target-reached"
        elif cfg.max_oracle_calls is not None and state.calls >= cfg.max_oracle_calls:
            stop = "oracle-budget"
        elif cfg.time_budget is not None and elapsed >= cfg.time_budget:
            stop = "time-budget"

        if stop is not None or t >= T:
            record.append(TraceRow(
                iteration=t, oracle_calls=state.calls, time_sec=elapsed, h_value=h,
                obj_gap=obj_gap, image_dist=idist, restart_k=restart_k,
                flags=(stop,) if stop else (),
            ))
            if record.iterates is not None:
                record.iterates.append(x.copy())
            if stop is not None and stop != "non-finite":
                # Budgets and the target are global; a diverged round is not
                # (the next restart resumes from the finite start point).
                state.stop = stop
            break

        x_next, info, direction = _apply_step(x, bundle, h_ref, theta, cfg, direction_fn, oracle)
        aiming = None
        if record_aiming and direction is not None and oracle.image_difference_pullback is not None:
            aiming = float(np.vdot(direction, oracle.image_difference_pullback(x)))
        record.append(TraceRow(
            iteration=t, oracle_calls=state.calls, time_sec=elapsed, h_value=h,
            obj_gap=obj_gap, image_dist=idist, step_size=info.gamma,
            proj_norm_sq=info.proj_norm_sq, cg_iters=info.cg_iters,
            cg_residual=info.cg_residual, proj_norm_rel_gap=info.proj_norm_rel_gap,
            aiming=aiming, restart_k=restart_k, flags=info.flags,
        ))
        if record.iterates is not None:
            record.iterates.append(x.copy())
        if "near-critical" in info.flags or "step-skipped" in info.flags:
            break
        x = x_next
        t += 1
    return seg_best_x, seg_best_h


def _prepare(oracle, method, metadata, keep_iterates, report_reference):
    meta = {"method": method}
    meta.update(metadata or {})
    record = RunRecord(meta)
    if keep_iterates:
        record.iterates = []
    report_ref = report_reference if report_reference is not None else oracle.optimal_value
    state = _RunState(started=time.perf_counter())
    return record, report_ref, state


def _single_run(oracle, x0, T, cfg, direction_fn, method, theta, *, metadata,
                keep_iterates, record_aiming, report_reference):
    if oracle.optimal_value is None:
        raise ValueError(f"{method} requires oracle.optimal_value")
    if T < 0:
        raise ValueError("T must be nonnegative")
    cfg = cfg if cfg is not None else SolverConfig()
    record, report_ref, state = _prepare(oracle, method, metadata, keep_iterates, report_reference)
    _inner_run(
        oracle, x0, T, h_ref=oracle.optimal_value, theta=theta, direction_fn=direction_fn,
        cfg=cfg, record=record, state=state, report_ref=report_ref,
        gap_ref=oracle.optimal_value, record_aiming=record_aiming,
    )
    return state.best_x, record


def gnp(oracle: CompositeOracle, x0, T: int, cfg: SolverConfig | None = None, *,
        metadata=None, keep_iterates=False, record_aiming=False, report_reference=None):
    """Gauss-Newton subgradient run with the known optimal value as stepsize
    reference. Returns the best iterate by objective and the full trace.

    The stepsize fraction comes from ``cfg.step_fraction`` (default 1, the
    top of the admissible bracket). Early exits on the target gap, oracle or
    time budget, and near-criticality are flagged in the trace.
    """
    cfg = cfg if cfg is not None else SolverConfig()
    return _single_run(
        oracle, x0, T, cfg, _gnp_direction, "gnp", cfg.step_fraction,
        metadata=metadata, keep_iterates=keep_iterates, record_aiming=record_aiming,
        report_reference=report_reference,
    )


def polyak_subgrad(oracle: CompositeOracle, x0, T: int, cfg: SolverConfig | None = None, *,
                   metadata=None, keep_iterates=False, report_reference=None):
    """Plain subgradient run with the Polyak stepsize
    ``(h - h*) / ||g||_F^2``. Trace bookkeeping matches ``gnp``."""
    return _single_run(
        oracle, x0, T, cfg, _polyak_direction, "polyak", 1.0,
        metadata=metadata, keep_iterates=keep_iterates, record_aiming=False,
        report_reference=report_reference,
    )


def scaled_sm(oracle: CompositeOracle, x0, T: int, cfg: SolverConfig | None = None, *,
              metadata=None, keep_iterates=False, report_reference=None):
    """Scaled subgradient run: direction ``g (X^T X)^{-1}`` with the Polyak
    stepsize in the scaled metric, ``(h - h*) / <g, g (X^T X)^{-1}>``.

    Intended for order-2 problems where the iterate Gram matrix is the
    natural metric; raises :class:`SolverError` if that matrix is singular
    beyond tolerance.
    """
    return _single_run(
        oracle, x0, T, cfg, _scaled_direction, "scaledsm", 1.0,
        metadata=metadata, keep_iterates=keep_iterates, record_aiming=False,
        report_reference=report_reference,
    )


def _restarted(oracle, x0, h0, T, K, cfg, direction_fn, method, *, metadata,
               keep_iterates, record_aiming, report_reference):
    if K < 1:
        raise ValueError("need at least one restart round")
    if T < 0:
        raise ValueError("T must be nonnegative")
    cfg = cfg if cfg is not None else SolverConfig()
    record, report_ref, state = _prepare(oracle, method, metadata, keep_iterates, report_reference)
    gap_ref = oracle.optimal_value if oracle.optimal_value is not None else report_ref

    h_k = float(h0)
    y = np.array(x0, dtype=float)
    for k in range(K):
        if state.stop is not None:
            break
        # Each round restarts from x0 with the current lower bound as the
        # stepsize reference and the conservative half of the bracket.
        seg_x, seg_h = _inner_run(
            oracle, x0, T, h_ref=h_k, theta=0.5, direction_fn=direction_fn, cfg=cfg,
            record=record, state=state, report_ref=report_ref, gap_ref=gap_ref,
            restart_k=k, record_aiming=record_aiming,
        )
        if seg_x is None:
            break
        y = seg_x
        record.restart_history.append(RestartState(k, h_k, seg_x, seg_h))
        h_k = 0.5 * (h_k + seg_h)
    return y, record


def rgnp(oracle: CompositeOracle, x0, h0: float, T: int, K: int,
         cfg: SolverConfig | None = None, *, metadata=None, keep_iterates=False,
         record_aiming=False, report_reference=None):
    """Restarted Gauss-Newton subgradient run for an unknown optimal value.

    ``h0`` is a lower bound on the optimum. Each of the ``K`` rounds reruns
    the Gauss-Newton method from ``x0`` for ``T`` steps with stepsize
    ``(h - h_k) / (2 * proj_norm_sq)``; the bound is then averaged with the
    round's best objective. Returns the final round's best iterate. Rounds
    whose objective never exceeds the current bound take zero-length steps
    and are flagged; since the iterate freezes, such a round ends at the
    first skipped step rather than burning its remaining budget.
    """
    return _restarted(
        oracle, x0, h0, T, K, cfg, _gnp_direction, "rgnp",
        metadata=metadata, keep_iterates=keep_iterates, record_aiming=record_aiming,
        report_reference=report_reference,
    )


def rpolyak(oracle: CompositeOracle, x0, h0: float, T: int, K: int,
            cfg: SolverConfig | None = None, *, metadata=None, keep_iterates=False,
            report_reference=None):
    """Restarted plain subgradient run: the same outer loop as ``rgnp`` with
    the unpreconditioned direction, stepsize ``(h - h_k) / (2 ||g||_F^2)``."""
    return _restarted(
        oracle, x0, h0, T, K, cfg, _polyak_direction, "rpolyak",
        metadata=metadata, keep_iterates=keep_iterates, record_aiming=False,
        report_reference=report_reference,
    )


def predicted_iterations(contraction: float, initial_distance: float,
                         image_lipschitz: float, tol: float) -> int:
    """Worst-case iteration count for the linear rate.

    Smallest integer T with ((1 + contraction) / 2)^T * initial_distance
    below ``tol / image_lipschitz``, i.e. the ceiling of
    log(initial_distance * image_lipschitz / tol) / log(2 / (1 + contraction)),
    clamped at zero when the start already satisfies the target.
    """
    if not 0.0 < contraction < 1.0:
        raise ValueError("contraction factor must lie in (0, 1)")
    if initial_distance <= 0 or image_lipschitz <= 0 or tol <= 0:
        raise ValueError("distances, Lipschitz constant, and tolerance must be positive")
    value = log(initial_distance * image_lipschitz / tol) / log(2.0 / (1.0 + contraction))
    return max(0, ceil(value))
