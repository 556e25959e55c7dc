"""Independent brute-force oracles used to check the fast implementations.

Everything here is deliberately naive: explicit inverses, elementwise sums,
O(n*m) scans. None of it shares code with the package under test.
"""

import numpy as np


def dense_gpr_oracle(x, f, noise_diag, x_star, lam, jitter=1e-10):
    """GP posterior via an explicit dense inverse.

    Mirrors the solver's regularization decision procedure (jitter only when
    a Cholesky factorization of the plain matrix fails) but performs the
    linear algebra through `np.linalg.inv`, a different route entirely.
    """
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    x_star = np.asarray(x_star, dtype=float).reshape(-1, 2)
    f = np.asarray(f, dtype=float).reshape(-1)

    def kern(a, b):
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-lam * d2)

    A = kern(x, x) + np.diag(np.asarray(noise_diag, dtype=float))
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        A = A + jitter * np.eye(len(A))
    A_inv = np.linalg.inv(A)
    Ks = kern(x, x_star)
    Kss = kern(x_star, x_star)
    mu = Ks.T @ A_inv @ f
    sigma = Kss - Ks.T @ A_inv @ Ks
    return mu, np.diag(sigma).copy(), sigma


def weighted_mean_oracle(points, weights):
    """Plain summation weighted mean."""
    num = np.zeros(3)
    den = 0.0
    for p, w in zip(points, weights):
        num += w * np.asarray(p, dtype=float)
        den += w
    return num / den


def weighted_covariance_oracle(points, weights, center):
    """Plain summation weighted second moment about ``center``."""
    acc = np.zeros((3, 3))
    den = 0.0
    for p, w in zip(points, weights):
        d = np.asarray(p, dtype=float) - center
        acc += w * np.outer(d, d)
        den += w
    return acc / den


def structure_loss_exhaustive(points, positions, scales, hinge=False):
    """O(n*m) scan of min_k (||p - c_k|| - mean_scale_k)."""
    sbar = np.asarray(scales, dtype=float).mean(axis=1)
    terms = []
    for p in np.asarray(points, dtype=float):
        best = np.inf
        for c, s in zip(positions, sbar):
            v = np.linalg.norm(p - c) - s
            if v < best:
                best = v
        terms.append(max(best, 0.0) if hinge else best)
    return float(np.mean(terms))


def plane_distance(points, normal, offset):
    """Signed distances of points to the plane n.p = offset (n unit)."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    return np.asarray(points, dtype=float) @ n - offset


def random_gpr_problem(rng, n_max=64, m_max=81, extent=0.2):
    """A random well-posed regression instance inside one voxel footprint."""
    n = int(rng.integers(3, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    x = rng.uniform(0.0, extent, size=(n, 2))
    f = rng.normal(0.0, 0.2, size=n)
    noise = rng.uniform(1e-4, 0.3, size=n)
    x_star = rng.uniform(0.0, extent, size=(m, 2))
    lam = float(rng.uniform(0.5, 4.0))
    return x, f, noise, x_star, lam
