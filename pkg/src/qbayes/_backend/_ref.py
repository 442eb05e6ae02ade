"""Pure-numpy reference implementation of the likelihood kernels.

Every function here is also provided (bit-compatible up to summation
order) by the compiled extension ``qbayes._backend._core``; this module
is the fallback and the semantic reference the extension is tested
against.

Model kinds are integer codes (see ``qbayes._backend.KIND_*``).  Each
model maps a parameter vector ``theta`` (length ``dim``) plus two scalar
controls ``(c1, c2)`` to an outcome-1 probability:

====  ==============  ===========================================
code  kind            P(1 | theta; c1, c2)
====  ==============  ===========================================
0     precession      sin^2(omega * t)                (c1 = t)
1     multi-cosine    mean_d cos^2(omega_d * t / 2)   (c1 = t)
2     t1-decay        exp(-t / T1)                    (c1 = t)
3     hahn-echo-t2    1/2 + exp(-t / T2) / 2          (c1 = t)
4     hahn-echo-ab    A * exp(-t / T2) + B            (c1 = t)
5     ramsey-decay    1/2 + exp(-g t) cos(d t) / 2    (theta = (d, g), c1 = t)
6     ipe             sin^2((m phi + x) / 2)          (c1 = m, c2 = x)
====  ==============  ===========================================

Log-likelihoods of zero-probability outcomes are clamped at
``LOG_FLOOR`` so that downstream arithmetic stays finite while
Metropolis ratios still behave as exact rejection.
"""

import numpy as np

LOG_FLOOR = -1.0e9

KIND_PRECESSION = 0
KIND_MULTI_COS = 1
KIND_T1 = 2
KIND_HAHN_T2 = 3
KIND_HAHN_AB = 4
KIND_RAMSEY = 5
KIND_IPE = 6

# Chunk size (in theta x datum cells) for the summed evaluations, to keep
# temporaries bounded when both M and N are large.
_TILE = 4_000_000


def prob_one(kind, hyper, theta, c1, c2):
    """P(outcome=1 | theta; c1, c2), broadcasting over leading axes.

    ``theta`` carries the parameter vector on its last axis; ``c1``/``c2``
    broadcast against ``theta.shape[:-1]``.  Values are clipped to [0, 1]
    to absorb floating-point overshoot.
    """
    theta = np.asarray(theta, dtype=np.float64)
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    if kind == KIND_PRECESSION:
        p = np.sin(theta[..., 0] * c1) ** 2
    elif kind == KIND_MULTI_COS:
        p = np.mean(np.cos(theta * c1[..., None] / 2.0) ** 2, axis=-1)
    elif kind == KIND_T1:
        p = np.exp(-c1 / theta[..., 0])
    elif kind == KIND_HAHN_T2:
        p = 0.5 + 0.5 * np.exp(-c1 / theta[..., 0])
    elif kind == KIND_HAHN_AB:
        a, b = hyper[0], hyper[1]
        p = a * np.exp(-c1 / theta[..., 0]) + b
    elif kind == KIND_RAMSEY:
        p = 0.5 + 0.5 * np.exp(-theta[..., 1] * c1) * np.cos(theta[..., 0] * c1)
    elif kind == KIND_IPE:
        p = np.sin((theta[..., 0] * c1 + c2) / 2.0) ** 2
    else:
        raise ValueError(f"unknown model kind code {kind}")
    return np.clip(p, 0.0, 1.0)


def dprob_one(kind, hyper, theta, c1, c2):
    """Gradient of P(1) with respect to theta; last axis is the dimension."""
    theta = np.asarray(theta, dtype=np.float64)
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    if kind == KIND_PRECESSION:
        g = (c1 * np.sin(2.0 * theta[..., 0] * c1))[..., None]
    elif kind == KIND_MULTI_COS:
        dim = theta.shape[-1]
        g = -(c1[..., None] / (2.0 * dim)) * np.sin(theta * c1[..., None])
    elif kind == KIND_T1:
        t1 = theta[..., 0]
        g = (c1 / t1**2 * np.exp(-c1 / t1))[..., None]
    elif kind == KIND_HAHN_T2:
        t2 = theta[..., 0]
        g = (0.5 * c1 / t2**2 * np.exp(-c1 / t2))[..., None]
    elif kind == KIND_HAHN_AB:
        t2 = theta[..., 0]
        g = (hyper[0] * c1 / t2**2 * np.exp(-c1 / t2))[..., None]
    elif kind == KIND_RAMSEY:
        delta, gamma = theta[..., 0], theta[..., 1]
        env = np.exp(-gamma * c1)
        g = np.stack(
            [
                -0.5 * c1 * env * np.sin(delta * c1),
                -0.5 * c1 * env * np.cos(delta * c1),
            ],
            axis=-1,
        )
    elif kind == KIND_IPE:
        g = (0.5 * c1 * np.sin(theta[..., 0] * c1 + c2))[..., None]
    else:
        raise ValueError(f"unknown model kind code {kind}")
    return g


def d2prob_one(kind, hyper, theta, c1, c2):
    """Hessian of P(1) with respect to theta; last two axes are dim x dim."""
    theta = np.asarray(theta, dtype=np.float64)
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    dim = theta.shape[-1]
    base = np.broadcast_shapes(theta.shape[:-1], c1.shape)
    h = np.zeros(base + (dim, dim))
    if kind == KIND_PRECESSION:
        h[..., 0, 0] = 2.0 * c1**2 * np.cos(2.0 * theta[..., 0] * c1)
    elif kind == KIND_MULTI_COS:
        diag = -(c1[..., None] ** 2 / (2.0 * dim)) * np.cos(theta * c1[..., None])
        for d in range(dim):
            h[..., d, d] = diag[..., d]
    elif kind in (KIND_T1, KIND_HAHN_T2, KIND_HAHN_AB):
        if kind == KIND_T1:
            scale = 1.0
        elif kind == KIND_HAHN_T2:
            scale = 0.5
        else:
            scale = hyper[0]
        tc = theta[..., 0]
        h[..., 0, 0] = scale * np.exp(-c1 / tc) * (c1**2 / tc**4 - 2.0 * c1 / tc**3)
    elif kind == KIND_RAMSEY:
        delta, gamma = theta[..., 0], theta[..., 1]
        env = np.exp(-gamma * c1)
        h[..., 0, 0] = -0.5 * c1**2 * env * np.cos(delta * c1)
        h[..., 0, 1] = 0.5 * c1**2 * env * np.sin(delta * c1)
        h[..., 1, 0] = h[..., 0, 1]
        h[..., 1, 1] = 0.5 * c1**2 * env * np.cos(delta * c1)
    elif kind == KIND_IPE:
        h[..., 0, 0] = 0.5 * c1**2 * np.cos(theta[..., 0] * c1 + c2)
    else:
        raise ValueError(f"unknown model kind code {kind}")
    return h


def _log_prob_outcome(p1, outcomes):
    """Clamped log P(outcome); outcomes broadcast against p1."""
    p = np.where(outcomes == 1, p1, 1.0 - p1)
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    return np.where(p > 0.0, logp, LOG_FLOOR)


def loglike_terms(kind, hyper, theta, c1, c2, outcomes):
    """Per-datum log-likelihood vector at a single parameter point."""
    p1 = prob_one(kind, hyper, theta, c1, c2)
    return _log_prob_outcome(p1, outcomes)


def loglike_sum(kind, hyper, thetas, c1, c2, outcomes):
    """Summed log-likelihood over all data, per parameter row.

    Parameters
    ----------
    thetas : (M, dim) array
    c1, c2, outcomes : (N,) arrays

    Returns
    -------
    (M,) array of clamped log-likelihood sums.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    m = thetas.shape[0]
    n = c1.shape[0]
    out = np.zeros(m)
    step = max(1, _TILE // max(m, 1))
    for start in range(0, n, step):
        sl = slice(start, start + step)
        p1 = prob_one(kind, hyper, thetas[:, None, :], c1[sl][None, :], c2[sl][None, :])
        out += _log_prob_outcome(p1, outcomes[sl][None, :]).sum(axis=1)
    return out


def grad_loglike_sum(kind, hyper, thetas, c1, c2, outcomes):
    """Gradient of ``loglike_sum`` per parameter row: (M, dim).

    Where a datum has zero outcome probability the contribution is
    +/-inf; callers treat non-finite gradients as divergences.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    m, dim = thetas.shape
    n = c1.shape[0]
    out = np.zeros((m, dim))
    step = max(1, _TILE // max(m, 1))
    for start in range(0, n, step):
        sl = slice(start, start + step)
        tb = thetas[:, None, :]
        c1b = c1[sl][None, :]
        c2b = c2[sl][None, :]
        p1 = prob_one(kind, hyper, tb, c1b, c2b)
        dp1 = dprob_one(kind, hyper, tb, c1b, c2b)
        sign = np.where(outcomes[sl][None, :] == 1, 1.0, -1.0)
        p = np.where(outcomes[sl][None, :] == 1, p1, 1.0 - p1)
        with np.errstate(divide="ignore", invalid="ignore"):
            contrib = sign[..., None] * dp1 / p[..., None]
        out += contrib.sum(axis=1)
    return out


def loglike_sum_indexed(kind, hyper, thetas, c1, c2, outcomes, idx):
    """Per-row log-likelihood sums over row-specific datum subsets.

    ``idx`` has shape (M, m); row i sums the data indexed by idx[i].
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    p1 = prob_one(kind, hyper, thetas[:, None, :], c1[idx], c2[idx])
    return _log_prob_outcome(p1, outcomes[idx]).sum(axis=1)


def grad_loglike_terms_indexed(kind, hyper, thetas, c1, c2, outcomes, idx):
    """Per-datum gradients over row-specific subsets: (M, m, dim)."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    tb = thetas[:, None, :]
    p1 = prob_one(kind, hyper, tb, c1[idx], c2[idx])
    dp1 = dprob_one(kind, hyper, tb, c1[idx], c2[idx])
    sign = np.where(outcomes[idx] == 1, 1.0, -1.0)
    p = np.where(outcomes[idx] == 1, p1, 1.0 - p1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return sign[..., None] * dp1 / p[..., None]


def grad_loglike_terms(kind, hyper, theta, c1, c2, outcomes):
    """Per-datum gradient vectors at a single parameter point: (N, dim)."""
    theta = np.asarray(theta, dtype=np.float64)
    p1 = prob_one(kind, hyper, theta[None, :], c1, c2)
    dp1 = dprob_one(kind, hyper, theta[None, :], c1, c2)
    sign = np.where(outcomes == 1, 1.0, -1.0)
    p = np.where(outcomes == 1, p1, 1.0 - p1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return sign[..., None] * dp1 / p[..., None]


def hess_loglike_terms(kind, hyper, theta, c1, c2, outcomes):
    """Per-datum Hessians of the log-likelihood at one point: (N, dim, dim)."""
    theta = np.asarray(theta, dtype=np.float64)
    p1 = prob_one(kind, hyper, theta[None, :], c1, c2)
    dp1 = dprob_one(kind, hyper, theta[None, :], c1, c2)
    d2p1 = d2prob_one(kind, hyper, theta[None, :], c1, c2)
    sign = np.where(outcomes == 1, 1.0, -1.0)[..., None, None]
    p = np.where(outcomes == 1, p1, 1.0 - p1)[..., None, None]
    dp = np.where(outcomes[..., None] == 1, dp1, -dp1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return sign * d2p1 / p - dp[..., :, None] * dp[..., None, :] / p**2
