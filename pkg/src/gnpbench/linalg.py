"""Dense linear algebra, seeded random streams, and a matrix-free CG solver.

Matrices are plain float64 numpy arrays throughout. Randomness flows through
:class:`RandomStream`, a thin wrapper over numpy's PCG64 generator that can
derive independent substreams from string labels. Draws are bit-reproducible
for a fixed seed within one numpy build; bit-exact equality across builds or
platforms is not guaranteed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

__all__ = [
    "RandomStream",
    "SelfAdjointAction",
    "CGResult",
    "gaussian_matrix",
    "conditioned_factor",
    "uniform_in_ball",
    "cg_min_norm",
    "singular_values",
    "self_adjoint_defect",
]


def _label_words(label: str) -> tuple[int, int]:
    # Stable 64 bits of the label, independent of PYTHONHASHSEED.
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return (
        int.from_bytes(digest[:4], "little"),
        int.from_bytes(digest[4:8], "little"),
    )


class RandomStream:
    """Deterministic pseudorandom stream (PCG64 behind numpy's Generator).

    The same seed always yields the same draw sequence. ``substream(label)``
    derives an independent stream from ``(seed, label path)`` alone; it does
    not depend on how far this stream has advanced, so components can draw
    from their own substreams without perturbing each other.
    """

    __slots__ = ("seed", "_path", "gen")

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = seed
        self._path = tuple(_path)
        self.gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(seed, spawn_key=self._path))
        )

    def substream(self, label: str) -> "RandomStream":
        return RandomStream(self.seed, self._path + _label_words(label))

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, path={self._path})"


def as_stream(source) -> RandomStream:
    """Coerce an integer seed or an existing stream to a RandomStream."""
    if isinstance(source, RandomStream):
        return source
    return RandomStream(source)


def gaussian_matrix(stream: RandomStream, rows: int, cols: int) -> np.ndarray:
    """Matrix of iid standard normal draws, advancing ``stream``."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be positive")
    return stream.gen.standard_normal((rows, cols))


def _random_orthonormal(stream: RandomStream, rows: int, cols: int) -> np.ndarray:
    # QR of a Gaussian matrix with sign-corrected diagonal, so the factor is
    # drawn Haar-like rather than biased by the QR sign convention.
    q, rr = np.linalg.qr(gaussian_matrix(stream, rows, cols))
    signs = np.sign(np.diag(rr))
    signs[signs == 0] = 1.0
    return q * signs


def conditioned_factor(stream: RandomStream, d: int, r: int, kappa: float) -> np.ndarray:
    """Random ``d x r`` factor with prescribed condition number ``kappa``.

    The factor is ``U diag(s) V^T`` with random orthonormal ``U`` (d x r) and
    ``V`` (r x r) and singular values log-spaced from 1 to ``kappa``. With
    ``r == 1`` there is a single singular value, so only ``kappa == 1`` is
    representable.
    """
    if not 1 <= r <= d:
        raise ValueError("need 1 <= r <= d")
    if kappa < 1.0:
        raise ValueError("kappa must be at least 1")
    if r == 1 and kappa != 1.0:
        raise ValueError("a rank-one factor always has condition number 1; pass kappa=1")
    left = _random_orthonormal(stream, d, r)
    right = _random_orthonormal(stream, r, r)
    sigma = np.logspace(0.0, np.log10(kappa), r)
    return (left * sigma) @ right.T


def uniform_in_ball(stream: RandomStream, rows: int, cols: int, radius: float) -> np.ndarray:
    """Uniform draw from the Frobenius-norm ball of the given radius."""
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    direction = gaussian_matrix(stream, rows, cols)
    norm = float(np.linalg.norm(direction))
    if norm == 0.0:  # probability-zero degenerate draw
        return np.zeros((rows, cols))
    scale = radius * float(stream.gen.random()) ** (1.0 / (rows * cols))
    return direction * (scale / norm)


@dataclass(frozen=True)
class SelfAdjointAction:
    """Symmetric positive-semidefinite operator given by its action on matrices.

    ``shape`` is the shape of the matrices the operator acts on; ``apply``
    maps such a matrix to another of the same shape. Symmetry and positive
    semidefiniteness are contracts of the constructor, checkable with
    :func:`self_adjoint_defect`.
    """

    shape: tuple[int, int]
    apply: Callable[[np.ndarray], np.ndarray]

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.apply(z)


def self_adjoint_defect(action: SelfAdjointAction, stream: RandomStream, probes: int = 20):
    """Probe an action for symmetry and positive semidefiniteness.

    Returns ``(sym_defect, quad_floor)``: the largest relative violation of
    ``<G(Z), W> = <Z, G(W)>`` over random probe pairs, and the smallest value
    of ``<G(Z), Z> / ||Z||^2`` seen (negative means a PSD violation of that
    magnitude).
    """
    rows, cols = action.shape
    sym_defect = 0.0
    quad_floor = np.inf
    for _ in range(probes):
        z = gaussian_matrix(stream, rows, cols)
        w = gaussian_matrix(stream, rows, cols)
        gz = action(z)
        gw = action(w)
        lhs = float(np.vdot(gz, w))
        rhs = float(np.vdot(z, gw))
        scale = max(abs(lhs), abs(rhs), np.finfo(float).tiny)
        sym_defect = max(sym_defect, abs(lhs - rhs) / scale)
        quad_floor = min(quad_floor, float(np.vdot(gz, z)) / float(np.vdot(z, z)))
    return sym_defect, quad_floor


class CGResult(NamedTuple):
    solution: np.ndarray
    iterations: int
    rel_residual: float


def cg_min_norm(action, g: np.ndarray, tol: float = 1e-10, max_iter: int | None = None) -> CGResult:
    """Minimum-Frobenius-norm solution of ``action(Z) = g`` by conjugate gradient.

    Assumes the system is consistent (``g`` numerically in the range of the
    operator). Starting from zero keeps every iterate inside the range, so
    the CG limit is the minimum-norm solution even when the operator is
    singular. Non-convergence is not an exception: the caller inspects
    ``rel_residual`` against its tolerance and decides how to proceed.

    Args:
        action: callable (or SelfAdjointAction) applying the PSD operator.
        g: right-hand side.
        tol: stop once ``||action(Z) - g||_F <= tol * ||g||_F``.
        max_iter: iteration cap; defaults to 4x the number of unknowns.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    g = np.asarray(g, dtype=float)
    if max_iter is None:
        max_iter = 4 * g.size
    z = np.zeros_like(g)
    g_norm = float(np.linalg.norm(g))
    if g_norm == 0.0:
        return CGResult(z, 0, 0.0)
    resid = g.copy()
    direction = resid.copy()
    rs = g_norm**2
    for k in range(1, max_iter + 1):
        applied = action(direction)
        curv = float(np.vdot(direction, applied))
        if curv <= 0.0:
            # The search direction has numerically left the range of the
            # operator; further progress is noise. Report what we achieved.
            return CGResult(z, k - 1, float(np.sqrt(rs)) / g_norm)
        alpha = rs / curv
        z = z + alpha * direction
        resid = resid - alpha * applied
        rs_next = float(np.vdot(resid, resid))
        if np.sqrt(rs_next) <= tol * g_norm:
            return CGResult(z, k, float(np.sqrt(rs_next)) / g_norm)
        direction = resid + (rs_next / rs) * direction
        rs = rs_next
    return CGResult(z, max_iter, float(np.sqrt(rs)) / g_norm)


def singular_values(a: np.ndarray) -> np.ndarray:
    """Singular values of ``a`` in nonincreasing order."""
    return np.linalg.svd(np.asarray(a, dtype=float), compute_uv=False)
