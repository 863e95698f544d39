"""Random-variate kernels and densities used by the Gibbs sweep.

All samplers take an explicit ``numpy.random.Generator``; nothing here
touches global random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import ndtr, ndtri

LOG_2PI = math.log(2.0 * math.pi)

# standardized bound beyond which inverse-CDF sampling loses precision
TAIL_CUTOFF = 5.0


class InvalidInterval(ValueError):
    pass


class NonSPDCovariance(np.linalg.LinAlgError):
    pass


class NonPositiveParameter(ValueError):
    pass


@dataclass(frozen=True)
class TruncationInterval:
    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        if not self.lower < self.upper:
            raise InvalidInterval(f"empty interval ({self.lower}, {self.upper})")

    def contains(self, x) -> np.ndarray:
        return (x > self.lower) & (x < self.upper)


def _tail_rejection(a, b, rng):
    """Standard normal on (a, b) with a >= TAIL_CUTOFF, via exponential proposals.

    Proposal is an exponential with rate ``alpha`` truncated to (a, b),
    accepted with probability ``exp(-(x - alpha)**2 / 2)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    alpha = 0.5 * (a + np.sqrt(a * a + 4.0))
    out = np.empty_like(a)
    todo = np.arange(a.size)
    while todo.size:
        al, lo, hi = alpha[todo], a[todo], b[todo]
        # truncated exponential on (lo, hi) by inversion
        span = np.where(np.isinf(hi), 1.0, -np.expm1(-al * (hi - lo)))
        u = rng.random(todo.size)
        x = lo - np.log1p(-u * span) / al
        accept = rng.random(todo.size) <= np.exp(-0.5 * (x - al) ** 2)
        out[todo[accept]] = x[accept]
        todo = todo[~accept]
    return out


def _std_truncnorm(a, b, rng):
    """Standard normal draws restricted to (a, b), elementwise."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    # mirror intervals lying in the lower half so every tail case is an upper tail
    flip = b <= 0.0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    u = rng.random(lo.shape)
    out = np.empty(lo.shape)

    upper = lo >= 0.0
    far = upper & (lo >= TAIL_CUTOFF)
    near = upper & ~far
    mid = ~upper

    if near.any():
        # invert the survival function, which keeps precision in the upper tail
        s_lo = ndtr(-lo[near])
        s_hi = ndtr(-hi[near])
        out[near] = -ndtri(s_hi + u[near] * (s_lo - s_hi))
    if mid.any():
        p_lo = ndtr(lo[mid])
        p_hi = ndtr(hi[mid])
        out[mid] = ndtri(p_lo + u[mid] * (p_hi - p_lo))
    if far.any():
        out[far] = _tail_rejection(lo[far], hi[far], rng)

    # rounding can land exactly on a bound; the support is open
    out = np.clip(out, np.nextafter(lo, np.inf), np.nextafter(hi, -np.inf))
    return np.where(flip, -out, out)


def rtruncnorm(mean, sd, lower, upper, rng: np.random.Generator) -> np.ndarray:
    """Vectorized N(mean, sd**2) draws restricted to the open interval (lower, upper).

    Arguments broadcast against each other. Uses inverse-CDF sampling
    unless the interval sits beyond ``TAIL_CUTOFF`` standard deviations,
    where an exponential rejection sampler takes over.
    """
    mean, sd, lower, upper = np.broadcast_arrays(
        np.asarray(mean, float), np.asarray(sd, float), np.asarray(lower, float), np.asarray(upper, float)
    )
    if np.any(sd <= 0):
        raise NonPositiveParameter("sd must be positive")
    if np.any(~(lower < upper)):
        raise InvalidInterval("empty truncation interval")
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    x = mean + sd * _std_truncnorm(a.ravel(), b.ravel(), rng).reshape(a.shape)
    # guard the affine map's rounding at the bounds
    return np.clip(x, np.nextafter(lower, np.inf), np.nextafter(upper, -np.inf))


def sample_truncated_normal(mean: float, sd: float, iv: TruncationInterval, rng: np.random.Generator) -> float:
    return float(rtruncnorm(mean, sd, iv.lower, iv.upper, rng))


def truncnorm_cdf(x, mean, sd, iv: TruncationInterval):
    """Analytic CDF of N(mean, sd**2) restricted to ``iv``."""
    a = ndtr((iv.lower - mean) / sd)
    b = ndtr((iv.upper - mean) / sd)
    z = ndtr((np.clip(x, iv.lower, iv.upper) - mean) / sd)
    return (z - a) / (b - a)


def cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises :class:`NonSPDCovariance` on failure."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NonSPDCovariance(str(exc)) from exc


def sample_mvn(mean, cov, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    L = cholesky(np.asarray(cov, dtype=float))
    return mean + L @ rng.standard_normal(mean.shape[-1])


def sample_mvn_precision(mean, precision, rng: np.random.Generator) -> np.ndarray:
    """Draws from MVN(mean, precision^-1) for a stack of precision matrices.

    ``precision`` has shape (..., k, k) and ``mean`` (..., k). With
    ``precision = L L^T`` the draw is ``mean + L^-T e``, which never forms
    the covariance explicitly.
    """
    mean = np.asarray(mean, dtype=float)
    L = cholesky(precision)
    e = rng.standard_normal(mean.shape)
    # solve L^T x = e, batched
    Lt = np.swapaxes(L, -1, -2)
    x = np.linalg.solve(Lt, e[..., None])[..., 0]
    return mean + x


def sample_dirichlet(alpha, rng: np.random.Generator) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise NonPositiveParameter("Dirichlet concentration must be positive")
    g = rng.standard_gamma(alpha)
    total = g.sum()
    if total <= 0.0:
        # every gamma draw underflowed; put the mass on the largest alpha
        g = (alpha == alpha.max()).astype(float)
        total = g.sum()
    p = g / total
    p[-1] = 1.0 - p[:-1].sum()
    return p


def sample_inverse_gamma(shape, scale, rng: np.random.Generator):
    """InverseGamma(shape, scale) draws; density proportional to x^(-shape-1) exp(-scale/x)."""
    shape = np.asarray(shape, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if np.any(shape <= 0) or np.any(scale <= 0):
        raise NonPositiveParameter("inverse-gamma parameters must be positive")
    out = scale / rng.standard_gamma(shape)
    return float(out) if out.ndim == 0 else out


def sample_categorical(probs, rng: np.random.Generator) -> int:
    probs = np.asarray(probs, dtype=float)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-10:
        raise NonPositiveParameter("probabilities must be non-negative and sum to 1")
    return int(sample_categorical_rows(probs[None, :], rng)[0])


def sample_categorical_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of an (n, k) probability matrix."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def mvn_logpdf(x, mean, cov) -> np.ndarray:
    """Exact MVN log-density through a Cholesky factorization.

    ``x`` may be a single vector or an (n, d) stack of rows.
    """
    x = np.asarray(x, dtype=float)
    diff = np.atleast_2d(x - np.asarray(mean, dtype=float))
    L = cholesky(np.asarray(cov, dtype=float))
    sol = linalg.solve_triangular(L, diff.T, lower=True)
    d = diff.shape[1]
    out = -0.5 * (d * LOG_2PI + (sol * sol).sum(axis=0)) - np.log(np.diag(L)).sum()
    return out[0] if x.ndim == 1 else out


def lowrank_mvn_logpdf(x, mean, loadings, psi) -> np.ndarray:
    """Log-density of MVN(mean, loadings @ loadings.T + diag(psi)).

    Works in the Q-dimensional factor space (Woodbury identity and the
    matrix determinant lemma), so cost is linear in the data dimension.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lam = np.asarray(loadings, dtype=float).reshape(x.shape[1], -1)
    psi = np.asarray(psi, dtype=float)
    diff = x - mean
    d = x.shape[1]
    w = lam / psi[:, None]
    M = np.eye(lam.shape[1]) + lam.T @ w
    Lm = cholesky(M)
    u = linalg.solve_triangular(Lm, (diff @ w).T, lower=True)
    quad = (diff * diff / psi).sum(axis=1) - (u * u).sum(axis=0)
    logdet = np.log(psi).sum() + 2.0 * np.log(np.diag(Lm)).sum()
    return -0.5 * (d * LOG_2PI + logdet + quad)
