"""Empirical checks of the structure behind the linear convergence rate.

Finite-difference validation of the subgradient pullback, numerical rank of
the Jacobian near the planted factor (the constant-rank check), sampled
sharpness constants, and the derived rate constants with their predicted
iteration counts. Reports are plain dicts, JSON-ready for the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt
from typing import Optional

import numpy as np

from .linalg import RandomStream, uniform_in_ball
from .oracles import RunRecord
from .sensing import (
    TensorSensingInstance,
    gram_apply,
    image_distance,
    measure,
    objective,
    reference_optimal_value,
    subgradient_pullback,
)
from .solvers import predicted_iterations

__all__ = [
    "TheoryConstants",
    "KinkProximityError",
    "derive_constants",
    "fd_pullback_check",
    "fd_check_random_points",
    "dense_gram_matrix",
    "numerical_rank",
    "constant_rank_report",
    "estimate_jacobian_floor",
    "estimate_sharpness",
    "rate_report",
]

# The image-set surrogate used by every sampled diagnostic. Valid in the
# noiseless identifiable regime; reports carry this declaration.
SURROGATE_NOTE = "distances are measured to the planted tensor (noiseless identifiable regime)"


@dataclass(frozen=True)
class TheoryConstants:
    """Sharpness and regularity constants with the rate quantities they imply.

    ``mu_h``/``L_h`` bound the objective excess below/above by the image
    distance; ``mu_c`` lower-bounds the smallest nonzero Jacobian singular
    value. ``L_grad_c``, ``L_c``, ``curvature_C``, ``radius_R`` are local
    regularity constants with no reliable numerical estimator; they are
    user-supplied, and conclusions that depend on them (``delta``, ``eta``)
    are informational.
    """

    mu_h: float
    L_h: float
    mu_c: float
    L_grad_c: float
    L_c: float
    curvature_C: float
    radius_R: float
    c1: float
    c2: float
    c3: float
    delta: float
    eta: float
    predicted_T: Optional[int] = None


def derive_constants(mu_h, L_h, mu_c, L_grad_c, L_c, curvature_C, radius_R) -> TheoryConstants:
    """Derive the contraction factor and radii from the base constants.

    c1 = sqrt(1 - mu_h^2 / (2 L_h^2)) is the per-step contraction of the
    image distance; c2 scales its quadratic error term; c3 bounds the step
    length per unit of image distance; eta and delta are the tracking and
    initialization radii.
    """
    values = dict(mu_h=mu_h, L_h=L_h, mu_c=mu_c, L_grad_c=L_grad_c, L_c=L_c,
                  curvature_C=curvature_C, radius_R=radius_R)
    for name, v in values.items():
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")
    if mu_h > L_h:
        raise ValueError("mu_h cannot exceed L_h")
    c1 = sqrt(1.0 - mu_h**2 / (2.0 * L_h**2))
    c2 = 8.0 * L_grad_c * L_h**2 / (9.0 * mu_c**2 * mu_h**2)
    c3 = 4.0 * L_h / (3.0 * mu_c * mu_h)
    eta = min(radius_R, mu_h / (16.0 * L_h * L_c * curvature_C))
    delta = min(
        radius_R / 2.0,
        mu_h / (32.0 * L_h * L_c * curvature_C),
        (1.0 - c1) / (2.0 * c2 * L_c),
        eta * (1.0 - c1) / (4.0 * c3 * L_c),
    )
    return TheoryConstants(c1=c1, c2=c2, c3=c3, delta=delta, eta=eta, **values)


class KinkProximityError(ValueError):
    """A residual sits too close to zero for one-sided sign selection to be
    stable inside the finite-difference stencil."""


def _kink_margin(inst: TensorSensingInstance, x: np.ndarray, h_step: float) -> np.ndarray:
    # Upper bound on how much each residual can move when a single entry of
    # x changes by h_step: per measurement, n * (|<p, x_i>| + h |p|_inf)^(n-1) * |p|_inf,
    # maximized over columns, plus the same for q.
    n = inst.n
    px = np.abs(inst.P @ x)
    qx = np.abs(inst.Q @ x)
    p_inf = np.abs(inst.P).max(axis=1)
    q_inf = np.abs(inst.Q).max(axis=1)
    bp = n * ((px + h_step * p_inf[:, None]) ** (n - 1)).max(axis=1) * p_inf
    bq = n * ((qx + h_step * q_inf[:, None]) ** (n - 1)).max(axis=1) * q_inf
    return h_step * (bp + bq)


def fd_pullback_check(inst: TensorSensingInstance, x: np.ndarray, h_step: float = 1e-5) -> dict:
    """Compare the analytic pullback with central finite differences of the
    objective at a smooth point.

    Raises :class:`KinkProximityError` when any residual is within 1e-6 of
    zero or could change sign inside the stencil, since the sign selection
    would then differ between the two sides; callers resample the point.
    """
    x = np.asarray(x, dtype=float)
    resid = measure(inst, x) - inst.b
    margin = np.maximum(1e-6, 2.0 * _kink_margin(inst, x, h_step))
    near = np.abs(resid) <= margin
    if near.any():
        raise KinkProximityError(
            f"{int(near.sum())} residual(s) within the kink margin at h_step={h_step:g}; "
            "resample the point"
        )
    analytic = subgradient_pullback(inst, x).g
    fd = np.zeros_like(x)
    work = x.copy()
    for idx in np.ndindex(*x.shape):
        orig = work[idx]
        work[idx] = orig + h_step
        f_plus = objective(inst, work)
        work[idx] = orig - h_step
        f_minus = objective(inst, work)
        work[idx] = orig
        fd[idx] = (f_plus - f_minus) / (2.0 * h_step)
    rel_error = float(np.linalg.norm(fd - analytic) / np.linalg.norm(analytic))
    return {
        "max_rel_error": rel_error,
        "h_step": h_step,
        "min_abs_residual": float(np.abs(resid).min()),
    }


def fd_check_random_points(inst: TensorSensingInstance, stream: RandomStream,
                           points: int = 20, h_step: float = 1e-5,
                           radius_frac: float = 0.1, max_attempts: int = 50) -> dict:
    """Run :func:`fd_pullback_check` at ``points`` smooth random points near
    the planted factor, resampling any point rejected for kink proximity."""
    radius = radius_frac * float(np.linalg.norm(inst.X_star))
    errors = []
    resampled = 0
    for _ in range(points):
        for attempt in range(max_attempts):
            x = inst.X_star + uniform_in_ball(stream, inst.d, inst.r, radius)
            try:
                errors.append(fd_pullback_check(inst, x, h_step)["max_rel_error"])
                break
            except KinkProximityError:
                resampled += 1
        else:
            raise KinkProximityError(
                f"could not find a smooth point in {max_attempts} attempts"
            )
    return {
        "points": points,
        "h_step": h_step,
        "max_rel_error": max(errors),
        "resampled": resampled,
        "note": SURROGATE_NOTE,
    }


def dense_gram_matrix(inst: TensorSensingInstance, x: np.ndarray) -> np.ndarray:
    """Materialize the Gauss-Newton operator at ``x`` as a (d r) x (d r)
    symmetric matrix by applying it to coordinate directions."""
    x = np.asarray(x, dtype=float)
    unknowns = x.size
    if unknowns > 2000:
        raise ValueError("refusing to densify a Gram operator above 2000 unknowns")
    gram = np.empty((unknowns, unknowns))
    basis = np.zeros_like(x)
    for idx in range(unknowns):
        basis.flat[idx] = 1.0
        gram[:, idx] = gram_apply(x, basis, inst.n).ravel()
        basis.flat[idx] = 0.0
    return 0.5 * (gram + gram.T)


def numerical_rank(inst: TensorSensingInstance, x: np.ndarray, rel_tol: float = 1e-8) -> int:
    """Numerical rank of the Jacobian at ``x``: the number of eigenvalues of
    the densified Gram operator above ``rel_tol`` times its largest one."""
    evals = np.linalg.eigvalsh(dense_gram_matrix(inst, x))
    top = float(evals[-1])
    if top <= 0.0:
        return 0
    return int((evals > rel_tol * top).sum())


def constant_rank_report(inst: TensorSensingInstance, stream: RandomStream,
                         points: int = 10, radius_frac: float = 0.1,
                         rel_tol: float = 1e-8) -> dict:
    """Measure the Jacobian rank at random points near the planted factor.

    The dense eigenvalue computation is the authority; the two closed-form
    candidates, r(r+1)/2 and d*r - r(r-1)/2, are reported beside it for
    comparison. A point is ambiguous when the rank changes between
    tolerances 1e-10 and 1e-6 (poorly separated spectrum).
    """
    d, r = inst.d, inst.r
    radius = radius_frac * float(np.linalg.norm(inst.X_star))
    ranks = []
    ambiguous = 0
    for _ in range(points):
        x = inst.X_star + uniform_in_ball(stream, d, r, radius)
        ranks.append(numerical_rank(inst, x, rel_tol))
        if numerical_rank(inst, x, 1e-10) != numerical_rank(inst, x, 1e-6):
            ambiguous += 1
    constant = len(set(ranks)) == 1
    return {
        "points": points,
        "radius": radius,
        "rel_tol": rel_tol,
        "ranks": ranks,
        "constant": constant,
        "measured_rank": ranks[0] if constant else None,
        "ambiguous_points": ambiguous,
        "candidates": {
            "r(r+1)/2": r * (r + 1) // 2,
            "d*r - r(r-1)/2": d * r - r * (r - 1) // 2,
        },
        "note": SURROGATE_NOTE,
    }


def estimate_jacobian_floor(inst: TensorSensingInstance, x: np.ndarray,
                            rel_tol: float = 1e-8) -> float:
    """Half the smallest nonzero singular value of the Jacobian at ``x``,
    the usual lower-bound proxy for the Jacobian floor constant."""
    evals = np.linalg.eigvalsh(dense_gram_matrix(inst, x))
    top = float(evals[-1])
    if top <= 0.0:
        raise ValueError("Jacobian vanishes at this point")
    positive = evals[evals > rel_tol * top]
    return 0.5 * float(np.sqrt(positive[0]))


def estimate_sharpness(inst: TensorSensingInstance, stream: RandomStream,
                       samples: int, radius: float):
    """Sampled sharpness and Lipschitz constants of the penalty on the image.

    Draws points uniformly in the Frobenius ball of ``radius`` around the
    planted factor and returns the (min, max) of
    (objective - reference) / image_distance over samples with nonzero
    distance. The reference and the distance both use the planted solution,
    so the estimates are meaningful in the noiseless identifiable regime.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    ref = reference_optimal_value(inst)
    ratios = []
    for _ in range(samples):
        x = inst.X_star + uniform_in_ball(stream, inst.d, inst.r, radius)
        dist = image_distance(inst, x)
        if dist <= 1e-12:
            continue
        ratios.append((objective(inst, x) - ref) / dist)
    if not ratios:
        raise ValueError("all samples landed on the planted solution")
    return min(ratios), max(ratios)


def _geometric_factor(values, burn_in=0):
    """Least-squares slope of log(values) against the index, exponentiated.

    Exact on perfectly geometric sequences. Only the strictly positive
    prefix is used.
    """
    seq = []
    for v in values:
        if v is None or not np.isfinite(v) or v <= 0.0:
            break
        seq.append(float(v))
    seq = seq[burn_in:]
    if len(seq) < 2:
        return None
    t = np.arange(len(seq), dtype=float)
    slope = np.polyfit(t, np.log(seq), 1)[0]
    return float(np.exp(slope))


def rate_report(record: RunRecord, constants: TheoryConstants, *,
                burn_in: int = 0, floor: float = 1e-13) -> dict:
    """Compare a recorded trace against the theoretical contraction.

    Fits the geometric factor of the image-distance column, checks it
    against the theoretical contraction c1, compares the predicted iteration
    count with the observed one for the accuracy actually reached, and
    counts violations of the aiming inequality where the solver recorded the
    aiming inner product. Rows whose distance is at or below ``floor`` are
    excluded everywhere: the tensor-free distance loses all digits near
    sqrt(machine eps) times the planted tensor norm, so callers should pass
    a floor of that scale. Assumes a noiseless trace, where the objective
    gap column is the gap to the true optimum.
    """
    dists = [row.image_dist for row in record.rows]
    usable = []
    for v in dists:
        if v is None or not np.isfinite(v) or v <= floor:
            break
        usable.append(float(v))
    factor = _geometric_factor(usable, burn_in=burn_in)

    predicted = observed = None
    if len(usable) >= 2:
        a0, a_end = usable[0], usable[-1]
        eps = constants.L_h * a_end
        predicted = predicted_iterations(constants.c1, a0, constants.L_h, eps)
        observed = len(usable) - 1

    # Smallest quadratic coefficient c with a_{t+1} <= 0.999 a_t + c a_t^2
    # along the usable prefix; reported, never assumed.
    envelope_c = 0.0
    for a_now, a_next in zip(usable, usable[1:]):
        envelope_c = max(envelope_c, (a_next - 0.999 * a_now) / a_now**2)

    aiming_checked = 0
    aiming_violations = 0
    for row in record.rows:
        if row.aiming is None or row.obj_gap is None or row.image_dist is None:
            continue
        if row.image_dist <= floor:
            continue
        aiming_checked += 1
        bound = 0.75 * max(row.obj_gap, constants.mu_h * row.image_dist)
        if row.aiming < bound * (1.0 - 1e-9):
            aiming_violations += 1

    return {
        "empirical_factor": factor,
        "c1": constants.c1,
        "factor_within_c1": (factor is not None and factor <= constants.c1),
        "envelope_quadratic_coef": envelope_c,
        "predicted_iterations": predicted,
        "observed_iterations": observed,
        "prediction_consistent": (
            predicted is not None and observed is not None and predicted >= observed
        ),
        "aiming_checked": aiming_checked,
        "aiming_violations": aiming_violations,
        "usable_rows": len(usable),
        "note": SURROGATE_NOTE,
    }
