"""Convergence diagnostics, posterior predictive checks and partition agreement."""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.core.exceptions import DataError
from app.models.schemas import Rule
from app.services.model import as_binary, build_gamma
from app.services.sampler import ChainOutput, Draw

logger = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.1
GEWEKE_THRESHOLD = 2.0
SLORD_THRESHOLD = 2.0


# ============================================================================
# Convergence
# ============================================================================

def gelman_rubin(chains: Sequence[Sequence[float]]) -> float:
    """Potential scale reduction factor of one scalar across chains.

    V = (n - 1)/n W + (m + 1)/(m n) B and R = sqrt(V / W). Chains are cut to
    the shortest length. Constant traces give 1.0 (with a warning) when the
    chains agree and inf when they do not.
    """
    if len(chains) < 2:
        raise DataError("Gelman-Rubin needs at least two chains")
    n = min(len(c) for c in chains)
    if n < 10:
        raise DataError(f"Gelman-Rubin needs at least 10 draws per chain, got {n}")
    data = np.asarray([np.asarray(c, dtype=float)[:n] for c in chains])
    m = data.shape[0]

    W = np.mean(np.var(data, axis=1, ddof=1))
    means = data.mean(axis=1)
    B = n / (m - 1.0) * np.sum((means - means.mean()) ** 2)
    if W == 0:
        if B == 0:
            logger.warning("Gelman-Rubin: all chains are constant and equal; R-hat set to 1")
            return 1.0
        return float("inf")
    V = W * (n - 1.0) / n + B * (m + 1.0) / (m * n)
    return float(np.sqrt(V / W))


def spectral_variance(x: np.ndarray, bandwidth: Optional[int] = None) -> float:
    """Variance of the sample mean from a Bartlett-window spectral density at zero."""
    x = np.asarray(x, dtype=float)
    n = x.size
    b = max(1, int(np.floor(0.04 * n))) if bandwidth is None else bandwidth
    centered = x - x.mean()
    s0 = np.dot(centered, centered) / n
    for k in range(1, min(b, n - 1) + 1):
        gamma_k = np.dot(centered[:-k], centered[k:]) / n
        s0 += 2 * (1 - k / (b + 1.0)) * gamma_k
    return float(max(s0, 0.0) / n)


@dataclass
class GewekeResult:
    z: float
    flagged: bool
    defined: bool = True


def geweke(trace: Sequence[float], first: float = 0.1, last: float = 0.5) -> GewekeResult:
    """Z-score comparing the means of the first 10% and last 50% of a trace."""
    x = np.asarray(trace, dtype=float)
    if x.size < 100:
        raise DataError(f"Geweke needs at least 100 draws, got {x.size}")
    a = x[: int(np.floor(first * x.size))]
    b = x[x.size - int(np.floor(last * x.size)):]
    variance = spectral_variance(a) + spectral_variance(b)
    if variance <= 0:
        logger.warning("Geweke: zero variance in a window, score undefined")
        return GewekeResult(z=float("nan"), flagged=True, defined=False)
    z = float((a.mean() - b.mean()) / np.sqrt(variance))
    return GewekeResult(z=z, flagged=abs(z) > GEWEKE_THRESHOLD)


def monitored_traces(output: ChainOutput) -> Dict[str, np.ndarray]:
    """Scalar traces fed to the convergence checks."""
    traces = {
        "log_post": output.trace("log_post"),
        "alpha1": output.trace("alpha1"),
        "t_tilde": output.trace("t_tilde"),
    }
    if output.draws:
        theta = np.asarray([d.theta for d in output.draws])
        psi = np.asarray([d.psi for d in output.draws])
        for l in range(theta.shape[1]):
            traces[f"theta_{l}"] = theta[:, l]
            traces[f"psi_{l}"] = psi[:, l]
    return traces


@dataclass
class ConvergenceRow:
    parameter: str
    rhat: Optional[float]
    rhat_flag: bool
    geweke_z: List[float] = field(default_factory=list)
    geweke_flag: bool = False


def convergence_report(outputs: Sequence[ChainOutput]) -> List[ConvergenceRow]:
    """R-hat (when there are several chains) and per-chain Geweke scores for every monitored scalar."""
    per_chain = [monitored_traces(o) for o in outputs]
    if not per_chain or not outputs[0].draws:
        raise DataError("no retained draws to diagnose")
    rows = []
    for name in per_chain[0]:
        traces = [t[name] for t in per_chain]
        rhat = None
        if len(traces) >= 2 and min(len(t) for t in traces) >= 10:
            rhat = gelman_rubin(traces)
        scores = [geweke(t) for t in traces if len(t) >= 100]
        rows.append(
            ConvergenceRow(
                parameter=name,
                rhat=rhat,
                rhat_flag=rhat is not None and not rhat <= RHAT_THRESHOLD,
                geweke_z=[s.z for s in scores],
                geweke_flag=any(s.flagged for s in scores),
            )
        )
    flagged = [r.parameter for r in rows if r.rhat_flag]
    if flagged:
        logger.warning("R-hat above %.2f for %d parameters: %s", RHAT_THRESHOLD, len(flagged), flagged[:10])
    return rows


# ============================================================================
# Posterior predictive checks
# ============================================================================

def ppc_replicate(draw: Draw, rng: np.random.Generator, rule: Rule = Rule.DINO) -> np.ndarray:
    """Replicate data set of the observed size from one posterior draw."""
    H = draw.Hstar[draw.Z]
    gamma = build_gamma(H, draw.Q, rule).astype(bool)
    lam = np.where(gamma, draw.theta[None, :], draw.psi[None, :])
    return (rng.random(lam.shape) < lam).astype(np.uint8)


def marginal_means(Y: np.ndarray) -> np.ndarray:
    return np.asarray(Y, dtype=float).mean(axis=0)


def pairwise_lor(Y: np.ndarray):
    """Log odds ratios of every feature pair with 0.5 added to each cell, and their standard errors."""
    Y = as_binary(Y, "Y").astype(np.int64)
    if Y.shape[0] < 2:
        raise DataError("pairwise log odds ratios need at least two subjects")
    N = Y.shape[0]
    n11 = Y.T @ Y
    ones = Y.sum(axis=0)
    n10 = ones[:, None] - n11
    n01 = ones[None, :] - n11
    n00 = N - n11 - n10 - n01
    a, b, c, d = (x + 0.5 for x in (n11, n10, n01, n00))
    lor = np.log(a) + np.log(d) - np.log(b) - np.log(c)
    se = np.sqrt(1 / a + 1 / b + 1 / c + 1 / d)
    return lor, se


@dataclass
class PPCReport:
    """Observed statistics against their posterior predictive distribution."""

    observed_means: np.ndarray
    mean_interval: np.ndarray
    mean_covered: np.ndarray
    mean_ppp: np.ndarray
    observed_lor: np.ndarray
    lor_interval: np.ndarray
    lor_covered: np.ndarray
    lor_ppp: np.ndarray
    slord: np.ndarray
    slord_flag: np.ndarray
    n_replicates: int

    def coverage(self) -> Dict[str, float]:
        iu = np.triu_indices(self.observed_lor.shape[0], k=1)
        return {
            "means": float(self.mean_covered.mean()),
            "lor": float(self.lor_covered[iu].mean()) if iu[0].size else float("nan"),
        }


def ppci_and_slord(
    observed_means: np.ndarray,
    replicate_means: np.ndarray,
    observed_lor: np.ndarray,
    replicate_lors: np.ndarray,
    level: float = 0.95,
) -> PPCReport:
    """Predictive intervals, coverage, tail probabilities and standardized LOR differences.

    Replicates stack along axis 0. A zero predictive sd leaves SLORD undefined
    (nan) and flagged.
    """
    replicate_means = np.asarray(replicate_means, dtype=float)
    replicate_lors = np.asarray(replicate_lors, dtype=float)
    R = replicate_means.shape[0]
    if R < 100:
        logger.warning("Only %d predictive replicates; intervals will be coarse", R)
    tail = (1 - level) / 2
    mean_interval = np.quantile(replicate_means, [tail, 1 - tail], axis=0)
    lor_interval = np.quantile(replicate_lors, [tail, 1 - tail], axis=0)

    sd = replicate_lors.std(axis=0, ddof=1) if R > 1 else np.zeros_like(observed_lor)
    with np.errstate(divide="ignore", invalid="ignore"):
        slord = np.where(sd > 0, (observed_lor - replicate_lors.mean(axis=0)) / sd, np.nan)
    slord_flag = ~(np.abs(slord) <= SLORD_THRESHOLD)
    return PPCReport(
        observed_means=observed_means,
        mean_interval=mean_interval,
        mean_covered=(mean_interval[0] <= observed_means) & (observed_means <= mean_interval[1]),
        mean_ppp=(replicate_means < observed_means[None, :]).mean(axis=0),
        observed_lor=observed_lor,
        lor_interval=lor_interval,
        lor_covered=(lor_interval[0] <= observed_lor) & (observed_lor <= lor_interval[1]),
        lor_ppp=(replicate_lors < observed_lor[None, :, :]).mean(axis=0),
        slord=slord,
        slord_flag=slord_flag,
        n_replicates=R,
    )


def posterior_predictive_check(
    Y: np.ndarray,
    outputs: Sequence[ChainOutput],
    rng: np.random.Generator,
    n_replicates: Optional[int] = None,
    rule: Rule = Rule.DINO,
) -> PPCReport:
    """One replicate per retained draw by default, cycling through draws when more are asked for."""
    Y = as_binary(Y, "Y")
    draws = [d for o in outputs for d in o.draws]
    if not draws:
        raise DataError("no retained draws for posterior predictive checks")
    R = len(draws) if n_replicates is None else n_replicates
    rep_means, rep_lors = [], []
    for r in range(R):
        Y_rep = ppc_replicate(draws[r % len(draws)], rng, rule)
        rep_means.append(marginal_means(Y_rep))
        rep_lors.append(pairwise_lor(Y_rep)[0])
    observed_lor, _ = pairwise_lor(Y)
    report = ppci_and_slord(marginal_means(Y), np.asarray(rep_means), observed_lor, np.asarray(rep_lors))
    cov = report.coverage()
    logger.info("PPC over %d replicates: mean coverage %.3f, LOR coverage %.3f", R, cov["means"], cov["lor"])
    return report


# ============================================================================
# Partition agreement
# ============================================================================

def contingency_table(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def adjusted_rand_index(a: Sequence[int], b: Sequence[int]) -> float:
    """Chance-corrected agreement of two partitions given as label vectors.

    Evaluated with exact integer pair counts; two partitions that both give
    a zero denominator (e.g. both all singletons) agree perfectly.
    """
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    if a.size != b.size:
        raise DataError(f"partitions cover {a.size} and {b.size} subjects")
    if a.size == 0:
        raise DataError("partitions are empty")
    table = contingency_table(a, b)
    index = sum(math.comb(int(n), 2) for n in table.ravel())
    rows = sum(math.comb(int(n), 2) for n in table.sum(axis=1))
    cols = sum(math.comb(int(n), 2) for n in table.sum(axis=0))
    total = math.comb(int(a.size), 2)
    expected = rows * cols / total if total else 0.0
    maximum = (rows + cols) / 2
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))
