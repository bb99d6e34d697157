"""Prior distributions.

Mixture-of-finite-mixtures partition prior (EPPF with V_N coefficients),
finite Indian buffet prior on cluster latent states, truncated Beta priors on
response rates and the alpha1 hyperprior.
"""
import logging
from functools import lru_cache
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import betainc, betaincinv, betaln, gammaln, logsumexp
from scipy.stats import beta as beta_dist
from scipy.stats import gamma as gamma_dist

from config import settings
from app.core.exceptions import NumericError, TruncationError
from app.models.schemas import AlphaPrior, PartitionPriorSpec, PKFamily, RatePriorSpec, StatePriorSpec

logger = logging.getLogger(__name__)

# tail terms this far below the running maximum are dropped
_VN_TAIL_NATS = 40.0
_MIN_TRUNCATED_MASS = 1e-14


# ============================================================================
# Partition prior
# ============================================================================

def log_pk(k: np.ndarray, family: PKFamily, param: float) -> np.ndarray:
    """log p_K(k) for k >= 1."""
    k = np.asarray(k, dtype=float)
    if family == PKFamily.GEOMETRIC:
        return (k - 1) * np.log1p(-param) + np.log(param)
    elif family == PKFamily.POISSON:
        # k - 1 ~ Poisson(param)
        return (k - 1) * np.log(param) - param - gammaln(k)
    else:
        raise ValueError(f"Unsupported p_K family: {family}")


@lru_cache(maxsize=None)
def _log_vn(t: int, N: int, gamma: float, family: str, param: float, max_terms: int) -> float:
    chunk = max(256, 2 * N)
    pieces = []
    running_max = -np.inf
    start = t
    while True:
        k = np.arange(start, start + chunk, dtype=float)
        terms = (
            gammaln(k + 1) - gammaln(k - t + 1)
            - (gammaln(gamma * k + N) - gammaln(gamma * k))
            + log_pk(k, PKFamily(family), param)
        )
        pieces.append(terms)
        running_max = max(running_max, float(terms.max()))
        if k[-1] > N and terms[-1] < running_max - _VN_TAIL_NATS and terms[-1] <= terms[-2]:
            break
        start += chunk
        if start - t > max_terms:
            raise NumericError(f"V_N({t}) series did not converge within {max_terms} terms")
    return float(logsumexp(np.concatenate(pieces)))


def log_Vn(t: int, N: int, spec: PartitionPriorSpec) -> float:
    """log V_N(t) = log sum_k k_(t) / (gamma k)^(N) p_K(k), cached per argument set."""
    if not 1 <= t <= N:
        raise ValueError(f"need 1 <= t <= N, got t={t}, N={N}")
    return _log_vn(
        int(t), int(N), float(spec.gamma), spec.pk_family.value, float(spec.pk_param),
        settings.vn_max_terms,
    )


def block_sizes(partition: Union[Sequence[Sequence[int]], np.ndarray]) -> np.ndarray:
    """Block sizes from either a label vector or a list of blocks."""
    if isinstance(partition, np.ndarray) or (
        len(partition) > 0 and np.isscalar(partition[0])
    ):
        _, counts = np.unique(np.asarray(partition), return_counts=True)
        return counts
    return np.asarray([len(block) for block in partition if len(block) > 0])


def log_eppf(partition, spec: PartitionPriorSpec) -> float:
    """log p(C) = log V_N(|C|) + sum over blocks of log gamma^(|block|)."""
    sizes = block_sizes(partition)
    N, t = int(sizes.sum()), len(sizes)
    g = spec.gamma
    return log_Vn(t, N, spec) + float(np.sum(gammaln(g + sizes) - gammaln(g)))


def log_new_cluster_ratio(t: int, N: int, spec: PartitionPriorSpec) -> float:
    """log V_N(t + 1) - log V_N(t)."""
    return log_Vn(t + 1, N, spec) - log_Vn(t, N, spec)


# ============================================================================
# Latent state prior
# ============================================================================

def log_prior_Hstar(
    Hstar: np.ndarray, spec: StatePriorSpec, alpha1: Optional[float] = None
) -> float:
    """Finite-IBP prior of cluster latent states with prevalences integrated out.

    Each column contributes B(s + a, T - s + alpha2) / B(a, alpha2) with
    a = alpha1 * alpha2 / M.
    """
    H = np.atleast_2d(np.asarray(Hstar))
    T, M = H.shape
    alpha1 = spec.alpha1 if alpha1 is None else alpha1
    a = alpha1 * spec.alpha2 / M
    s = H.sum(axis=0)
    return float(np.sum(betaln(s + a, T - s + spec.alpha2) - betaln(a, spec.alpha2)))


def log_prior_Hstar_ibp(Hstar: np.ndarray, alpha1: float) -> float:
    """Infinite-IBP prior over the active columns (up to left-ordering)."""
    H = np.atleast_2d(np.asarray(Hstar))
    T = H.shape[0]
    s = H.sum(axis=0)
    s = s[s > 0]
    harmonic = np.sum(1.0 / np.arange(1, T + 1))
    per_column = gammaln(T - s + 1) + gammaln(s) - gammaln(T + 1)
    return float(s.size * np.log(alpha1) - alpha1 * harmonic + per_column.sum())


def log_alpha_prior_on_beta(beta: np.ndarray, spec: StatePriorSpec) -> np.ndarray:
    """Hyperprior density of beta = alpha1 / (1 + alpha1), on the beta scale."""
    beta = np.asarray(beta, dtype=float)
    if spec.alpha_prior == AlphaPrior.BETA:
        return beta_dist.logpdf(beta, spec.a_beta, spec.b_beta)
    alpha = beta / (1 - beta)
    return gamma_dist.logpdf(alpha, spec.e0, scale=1.0 / spec.f0) - 2 * np.log1p(-beta)


def log_prior_alpha1(alpha1: float, spec: StatePriorSpec) -> float:
    """Hyperprior density of alpha1 on its own scale."""
    beta = alpha1 / (1 + alpha1)
    return float(log_alpha_prior_on_beta(beta, spec) - 2 * np.log1p(alpha1))


# ============================================================================
# Rate priors
# ============================================================================

def _griddy_truncated_beta(
    a: float, b: float, lower: float, upper: float, rng: np.random.Generator, n_grid: int = 1024
) -> float:
    width = (upper - lower) / n_grid
    grid = lower + width * (np.arange(n_grid) + 0.5)
    log_density = (a - 1) * np.log(grid) + (b - 1) * np.log1p(-grid)
    weights = np.exp(log_density - log_density.max())
    cell = rng.choice(n_grid, p=weights / weights.sum())
    return float(grid[cell] + (rng.random() - 0.5) * width)


def sample_truncated_beta(a, b, lower, upper, rng: np.random.Generator):
    """Beta(a, b) restricted to (lower, upper), by inverse CDF on the incomplete-beta scale.

    Broadcasts over array arguments. Intervals in the upper half are sampled
    through the reflected Beta(b, a) so that tail masses keep their precision.
    """
    a, b, lower, upper = np.broadcast_arrays(
        *(np.asarray(x, dtype=float) for x in (a, b, lower, upper))
    )
    if np.any(lower < 0) or np.any(upper > 1) or np.any(lower >= upper):
        raise ValueError("need 0 <= lower < upper <= 1")

    flip = lower > 0.5
    aa, bb = np.where(flip, b, a), np.where(flip, a, b)
    lo, hi = np.where(flip, 1 - upper, lower), np.where(flip, 1 - lower, upper)
    cdf_lo, cdf_hi = betainc(aa, bb, lo), betainc(aa, bb, hi)
    mass = cdf_hi - cdf_lo
    if np.any(~(mass >= _MIN_TRUNCATED_MASS)):
        raise TruncationError(
            f"truncated Beta has mass {float(np.min(mass)):.3g} on the requested interval"
        )

    u = rng.random(mass.shape) if mass.ndim else rng.random()
    x = np.clip(betaincinv(aa, bb, cdf_lo + u * mass), lo, hi)
    x = np.where(flip, 1 - x, x)
    x = np.clip(x, np.nextafter(lower, 1), np.nextafter(upper, 0))
    return float(x) if x.ndim == 0 else x


def sample_truncated_beta_guarded(a, b, lower, upper, rng: np.random.Generator) -> np.ndarray:
    """Elementwise truncated Beta draws, switching to a log-density grid where mass underflows."""
    a, b, lower, upper = np.broadcast_arrays(
        *(np.atleast_1d(np.asarray(x, dtype=float)) for x in (a, b, lower, upper))
    )
    try:
        return np.atleast_1d(sample_truncated_beta(a, b, lower, upper, rng))
    except TruncationError:
        pass

    out = np.empty(a.shape)
    for i in range(a.size):
        try:
            out.flat[i] = sample_truncated_beta(a.flat[i], b.flat[i], lower.flat[i], upper.flat[i], rng)
        except TruncationError:
            logger.warning(
                "Truncated Beta(%.3g, %.3g) on (%.3g, %.3g) underflowed; using grid sampler",
                a.flat[i], b.flat[i], lower.flat[i], upper.flat[i],
            )
            out.flat[i] = _griddy_truncated_beta(
                a.flat[i], b.flat[i], lower.flat[i], upper.flat[i], rng
            )
    return out


def log_rate_prior(rates, spec: RatePriorSpec) -> float:
    """Independent Beta densities on theta and psi restricted to psi < theta and the bounds."""
    hp = spec.expand(rates.L)
    ok = (
        (rates.psi < rates.theta)
        & (rates.theta > hp["theta_lower"])
        & (rates.psi < hp["psi_upper"])
    )
    if not np.all(ok):
        return -np.inf
    return float(
        np.sum(beta_dist.logpdf(rates.theta, hp["a_theta"], hp["b_theta"]))
        + np.sum(beta_dist.logpdf(rates.psi, hp["a_psi"], hp["b_psi"]))
    )
