"""Low-rank symmetric tensor sensing instances and their composite oracle.

An instance plants a full-rank ``d x r`` factor whose columns span a rank-r
sum of n-fold outer powers. Measurements evaluate that tensor against pairs
of Gaussian probe vectors and are optionally corrupted by sparse Gaussian
noise; residuals are penalized with the l1 norm. Every operation here works
directly on the factor through inner-product identities, at O(m d r) or
O(d r^2) cost; no order-n tensor is ever materialized.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .linalg import RandomStream, SelfAdjointAction, as_stream, conditioned_factor, gaussian_matrix
from .oracles import CompositeOracle, PullbackBundle

__all__ = [
    "TensorSensingInstance",
    "generate_instance",
    "measure",
    "objective",
    "subgradient_pullback",
    "gram_apply",
    "gram_action",
    "image_distance",
    "image_norm",
    "pullback_of_image_difference",
    "reference_optimal_value",
    "make_oracle",
    "save_instance",
    "load_instance",
]

INSTANCE_FORMAT = "tensor-sensing-instance"
INSTANCE_VERSION = 1


@dataclass(frozen=True)
class TensorSensingInstance:
    """One generated sensing problem. Arrays are read-only after generation.

    ``b`` is exactly ``measure(X_star) + noise``; a noise entry is zero
    unless its Bernoulli(pfail) draw fired, in which case it is a standard
    normal draw.
    """

    n: int
    d: int
    r: int
    m: int
    kappa: float
    pfail: float
    seed: int
    X_star: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    b: np.ndarray
    noise: np.ndarray


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def generate_instance(stream, n: int, d: int, r: int, m: int, kappa: float = 1.0,
                      pfail: float = 0.0) -> TensorSensingInstance:
    """Generate an instance, fully determined by the stream's seed and the parameters.

    Each component (planted factor, probe vectors, noise) draws from its own
    labeled substream, so changing ``pfail`` does not perturb the probes and
    the instance does not depend on how far the caller advanced the stream.
    Noise normals are consumed lazily, only for measurements whose Bernoulli
    draw fired.
    """
    stream = as_stream(stream)
    if n < 2:
        raise ValueError("tensor order n must be at least 2")
    if not 1 <= r <= d:
        raise ValueError("need 1 <= r <= d")
    if m < 1:
        raise ValueError("need at least one measurement")
    if not 0.0 <= pfail < 0.5:
        raise ValueError("pfail must lie in [0, 1/2)")

    x_star = conditioned_factor(stream.substream("factor"), d, r, kappa)
    p = gaussian_matrix(stream.substream("p"), m, d)
    q = gaussian_matrix(stream.substream("q"), m, d)

    noise_gen = stream.substream("noise").gen
    fired = noise_gen.random(m) < pfail
    noise = np.zeros(m)
    if fired.any():
        noise[fired] = noise_gen.standard_normal(int(fired.sum()))

    clean = ((p @ x_star) ** n).sum(axis=1) - ((q @ x_star) ** n).sum(axis=1)
    b = clean + noise

    return TensorSensingInstance(
        n=n, d=d, r=r, m=m, kappa=float(kappa), pfail=float(pfail), seed=stream.seed,
        X_star=_freeze(x_star), P=_freeze(p), Q=_freeze(q), b=_freeze(b), noise=_freeze(noise),
    )


def _check_factor(inst: TensorSensingInstance, x: np.ndarray, name: str = "X") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (inst.d, inst.r):
        raise ValueError(f"{name} must have shape ({inst.d}, {inst.r}), got {x.shape}")
    return x


def measure(inst: TensorSensingInstance, x: np.ndarray) -> np.ndarray:
    """Apply the measurement operator to the tensor parameterized by ``x``.

    Entry j is sum_i (<p_j, x_i>^n - <q_j, x_i>^n), the closed form of
    evaluating the rank-one sum on the j-th probe pair.
    """
    x = _check_factor(inst, x)
    n = inst.n
    return ((inst.P @ x) ** n).sum(axis=1) - ((inst.Q @ x) ** n).sum(axis=1)


def objective(inst: TensorSensingInstance, x: np.ndarray) -> float:
    """l1 norm of the measurement residual."""
    return float(np.abs(measure(inst, x) - inst.b).sum())


def gram_apply(x: np.ndarray, z: np.ndarray, n: int) -> np.ndarray:
    """Apply the Gauss-Newton preconditioner of the tensor map at ``x`` to ``z``.

    Uses the Hadamard-power identity on the r x r Gram matrix of the factor,
    with the convention that the zeroth Hadamard power is the all-ones
    matrix (which makes the identity well defined at n = 2).
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if x.shape != z.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {z.shape}")
    xtx = x.T @ x
    ztx = z.T @ x
    had_nm2 = np.ones_like(xtx) if n == 2 else xtx ** (n - 2)
    return n * (n - 1) * x @ (had_nm2 * ztx) + n * z @ xtx ** (n - 1)


def gram_action(x: np.ndarray, n: int) -> SelfAdjointAction:
    x = np.array(x, dtype=float)
    x.setflags(write=False)
    return SelfAdjointAction(shape=x.shape, apply=lambda z: gram_apply(x, z, n))


def subgradient_pullback(inst: TensorSensingInstance, x: np.ndarray) -> PullbackBundle:
    """Objective value, pulled-back l1 subgradient, and Gram action at ``x``.

    The subgradient selection uses sign(0) = 0, the minimum-norm element of
    the subdifferential interval, so the pullback vanishes at exact
    solutions. Column i of the pullback is
    n * sum_j s_j (<p_j, x_i>^{n-1} p_j - <q_j, x_i>^{n-1} q_j).
    """
    x = _check_factor(inst, x)
    n = inst.n
    px = inst.P @ x
    qx = inst.Q @ x
    resid = (px**n).sum(axis=1) - (qx**n).sum(axis=1) - inst.b
    h_value = float(np.abs(resid).sum())
    s = np.sign(resid)
    g = n * (inst.P.T @ (s[:, None] * px ** (n - 1)) - inst.Q.T @ (s[:, None] * qx ** (n - 1)))
    return PullbackBundle(h_value=h_value, g=g, gram=gram_action(x, n))


def image_distance(inst: TensorSensingInstance, x: np.ndarray) -> float:
    """Frobenius distance between the tensors parameterized by ``x`` and the
    planted factor, computed tensor-free from factor Gram matrices.

    Near the solution the radicand can dip slightly negative by roundoff;
    it is clamped at zero, with a warning when it falls below -1e-9.
    """
    x = _check_factor(inst, x)
    n = inst.n
    x_star = inst.X_star
    radicand = (
        float(((x.T @ x) ** n).sum())
        - 2.0 * float(((x.T @ x_star) ** n).sum())
        + float(((x_star.T @ x_star) ** n).sum())
    )
    if radicand < -1e-9:
        warnings.warn(
            f"image distance radicand {radicand:.3e} is negative beyond roundoff; clamping to 0",
            stacklevel=2,
        )
    return float(np.sqrt(max(radicand, 0.0)))


def image_norm(inst: TensorSensingInstance, x: np.ndarray) -> float:
    """Frobenius norm of the tensor parameterized by ``x``, tensor-free."""
    x = _check_factor(inst, x)
    return float(np.sqrt(((x.T @ x) ** inst.n).sum()))


def pullback_of_image_difference(inst: TensorSensingInstance, x: np.ndarray) -> np.ndarray:
    """Pullback through the Jacobian at ``x`` of the tensor difference to the
    planted tensor. Column i is
    n * sum_j (<x_i, x_j>^{n-1} x_j - <x_i, x*_j>^{n-1} x*_j), which lets
    aiming diagnostics form tangent-space inner products tensor-free.
    """
    x = _check_factor(inst, x)
    n = inst.n
    x_star = inst.X_star
    return n * (x @ (x.T @ x) ** (n - 1) - x_star @ (x_star.T @ x) ** (n - 1))


def reference_optimal_value(inst: TensorSensingInstance) -> float:
    """Objective value at the planted factor, ``||noise||_1``.

    This is the exact optimal value in the noiseless case. With noise the
    true optimum is unknown; this value is a reference for reporting, while
    restarted solvers should be given the honest lower bound 0.
    """
    return float(np.abs(inst.noise).sum())


def make_oracle(inst: TensorSensingInstance) -> CompositeOracle:
    """Composite oracle for the instance.

    ``optimal_value`` is populated (with zero) only for noiseless instances;
    with noise the optimum is unknown and solvers that need it must use the
    restarted variants. The image distance uses the planted tensor as the
    solution-image surrogate.
    """
    h_star = 0.0 if not inst.noise.any() else None
    return CompositeOracle(
        shape=(inst.d, inst.r),
        objective=lambda x: objective(inst, x),
        pullback=lambda x: subgradient_pullback(inst, x),
        optimal_value=h_star,
        image_distance=lambda x: image_distance(inst, x),
        image_difference_pullback=lambda x: pullback_of_image_difference(inst, x),
    )


def save_instance(inst: TensorSensingInstance, path, include_arrays: bool = False):
    """Write the instance to a self-describing JSON file.

    Parameters plus the seed suffice to regenerate the exact instance within
    one implementation; ``include_arrays`` embeds the matrices for archival
    or cross-implementation use.
    """
    doc = {
        "format": INSTANCE_FORMAT,
        "version": INSTANCE_VERSION,
        "n": inst.n,
        "d": inst.d,
        "r": inst.r,
        "m": inst.m,
        "kappa": inst.kappa,
        "pfail": inst.pfail,
        "seed": inst.seed,
    }
    if include_arrays:
        doc["arrays"] = {
            "X_star": inst.X_star.tolist(),
            "P": inst.P.tolist(),
            "Q": inst.Q.tolist(),
            "b": inst.b.tolist(),
            "noise": inst.noise.tolist(),
        }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_instance(path) -> TensorSensingInstance:
    """Load an instance written by :func:`save_instance`.

    Embedded arrays take precedence (after a consistency check of the stored
    measurements); otherwise the instance is regenerated from the seed.
    """
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != INSTANCE_FORMAT:
        raise ValueError(f"not a {INSTANCE_FORMAT} file: {path}")
    params = dict(
        n=int(doc["n"]), d=int(doc["d"]), r=int(doc["r"]), m=int(doc["m"]),
        kappa=float(doc["kappa"]), pfail=float(doc["pfail"]),
    )
    if "arrays" not in doc:
        return generate_instance(RandomStream(int(doc["seed"])), **params)
    arrays = doc["arrays"]
    inst = TensorSensingInstance(
        seed=int(doc["seed"]),
        X_star=_freeze(np.asarray(arrays["X_star"], dtype=float)),
        P=_freeze(np.asarray(arrays["P"], dtype=float)),
        Q=_freeze(np.asarray(arrays["Q"], dtype=float)),
        b=_freeze(np.asarray(arrays["b"], dtype=float)),
        noise=_freeze(np.asarray(arrays["noise"], dtype=float)),
        **params,
    )
    expected = measure(inst, inst.X_star) + inst.noise
    if not np.allclose(expected, inst.b, rtol=1e-12, atol=1e-12):
        raise ValueError("stored measurements are inconsistent with the stored factor and noise")
    return inst
