"""Independent oracles used to freeze expected values in the tests.

Everything here is deliberately brute force (fine grids, finite
differences, exhaustive enumeration) and shares no code path with the
implementations it checks.
"""

import numpy as np

from qbayes import _backend
from qbayes.models import Dataset, ModelSpec


def grid_posterior(spec: ModelSpec, dataset: Dataset, n_points: int = 100_000):
    """Flat-prior posterior on a fine midpoint grid (1D or 2D models).

    Returns (mean, std, evidence): evidence is the flat-prior marginal
    likelihood, i.e. the domain average of the full-data likelihood.
    """
    lo, hi = spec.lower, spec.upper
    c1, c2 = dataset.controls_arrays(spec)
    if spec.dim == 1:
        centers = lo[0] + (np.arange(n_points) + 0.5) * (hi[0] - lo[0]) / n_points
        pts = centers[:, None]
    elif spec.dim == 2:
        side = int(np.sqrt(n_points))
        g0 = lo[0] + (np.arange(side) + 0.5) * (hi[0] - lo[0]) / side
        g1 = lo[1] + (np.arange(side) + 0.5) * (hi[1] - lo[1]) / side
        pts = np.stack(np.meshgrid(g0, g1, indexing="ij"), axis=-1).reshape(-1, 2)
    else:
        raise ValueError("grid oracle supports 1D and 2D only")
    ll = _backend.loglike_sum(spec.code, spec.hyper_arr, pts, c1, c2, dataset.outcomes)
    shift = ll.max()
    w = np.exp(ll - shift)
    evidence = float(np.exp(shift) * w.mean())
    w = w / w.sum()
    mean = w @ pts
    var = w @ (pts - mean) ** 2
    return mean, np.sqrt(var), evidence


def fd_gradient(f, theta, h: float = 1e-6):
    """Central finite-difference gradient of a scalar function."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for d in range(theta.size):
        up = theta.copy()
        dn = theta.copy()
        up[d] += h
        dn[d] -= h
        g[d] = (f(up) - f(dn)) / (2.0 * h)
    return g


def fd_jacobian(f, x, h: float = 1e-6):
    """Finite-difference Jacobian of a vector map R^n -> R^n."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    jac = np.zeros((n, n))
    f0 = np.asarray(f(x))
    for d in range(n):
        up = x.copy()
        dn = x.copy()
        up[d] += h
        dn[d] -= h
        jac[:, d] = (np.asarray(f(up)) - np.asarray(f(dn))) / (2.0 * h)
    assert f0.size == n
    return jac


def harmonic_exact(theta0, p0, t):
    """Exact flow of H = theta^2/2 + p^2/2 (unit mass, unit frequency)."""
    c, s = np.cos(t), np.sin(t)
    return theta0 * c + p0 * s, p0 * c - theta0 * s


def batch_means_se(samples, n_batches: int = 20):
    """Standard error of a correlated chain mean via batch means."""
    samples = np.asarray(samples, dtype=np.float64)
    n = len(samples) // n_batches * n_batches
    if n < n_batches:
        raise ValueError("chain too short for batch means")
    means = samples[:n].reshape(n_batches, -1).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def binomial_band(p: float, n: int, k_sigma: float = 3.0):
    """(lo, hi) band for an empirical frequency of a Bernoulli(p) sample."""
    se = np.sqrt(p * (1.0 - p) / n)
    return p - k_sigma * se, p + k_sigma * se
