"""Brute-force reference implementations used as independent test oracles.

Everything here materializes the order-n tensors and Jacobians that the
package deliberately avoids forming, so agreement between the two routes is
meaningful. Keep sizes small: arrays grow as d**n.
"""

import numpy as np


def dense_tensor(x, n):
    """Materialize sum_i x_i^{(outer n)} as a d^n array."""
    d, r = x.shape
    out = np.zeros((d,) * n)
    for i in range(r):
        t = x[:, i]
        for _ in range(n - 1):
            t = np.multiply.outer(t, x[:, i])
        out += t
    return out


def tensor_eval(tensor, v):
    """Evaluate a symmetric order-n tensor on v^{(outer n)}."""
    out = tensor
    while out.ndim > 0:
        out = out @ v
    return float(out)


def measure_brute(inst, x):
    tensor = dense_tensor(x, inst.n)
    return np.array([
        tensor_eval(tensor, inst.P[j]) - tensor_eval(tensor, inst.Q[j])
        for j in range(inst.m)
    ])


def objective_brute(inst, x):
    return float(np.abs(measure_brute(inst, x) - inst.b).sum())


def explicit_jacobian(x, n):
    """Jacobian of the tensor map as a dense (d^n) x (d*r) matrix.

    Column (l, i) differentiates with respect to entry x[l, i]: the sum over
    positions of outer products with the basis vector e_l substituted in one
    slot. Column order matches x.ravel() (row-major).
    """
    d, r = x.shape
    jac = np.zeros((d**n, d * r))
    for l in range(d):
        basis = np.zeros(d)
        basis[l] = 1.0
        for i in range(r):
            col = np.zeros((d,) * n)
            for slot in range(n):
                factors = [x[:, i]] * n
                factors[slot] = basis
                t = factors[0]
                for f in factors[1:]:
                    t = np.multiply.outer(t, f)
                col += t
            jac[:, l * r + i] = col.ravel()
    return jac


def gram_brute(x, z, n):
    jac = explicit_jacobian(x, n)
    return (jac.T @ (jac @ z.ravel())).reshape(x.shape)


def image_distance_brute(inst, x):
    return float(np.linalg.norm(dense_tensor(x, inst.n) - dense_tensor(inst.X_star, inst.n)))


def image_diff_pullback_brute(inst, x):
    jac = explicit_jacobian(x, inst.n)
    diff = (dense_tensor(x, inst.n) - dense_tensor(inst.X_star, inst.n)).ravel()
    return (jac.T @ diff).reshape(x.shape)


def eig_pinv_solve(gram, rhs, rel_tol=1e-10):
    """Minimum-norm solution of a symmetric PSD system via eigendecomposition."""
    evals, evecs = np.linalg.eigh(gram)
    cutoff = rel_tol * evals.max()
    inv = np.where(evals > cutoff, 1.0 / np.where(evals > cutoff, evals, 1.0), 0.0)
    return evecs @ (inv * (evecs.T @ rhs))


def random_singular_psd(rng, size, rank):
    """Random PSD matrix of the given size and rank, with its eigenbasis."""
    basis, _ = np.linalg.qr(rng.standard_normal((size, size)))
    evals = np.concatenate([rng.uniform(0.1, 10.0, rank), np.zeros(size - rank)])
    return (basis * evals) @ basis.T, basis, evals
