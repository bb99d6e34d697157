"""Generative-model kernels for restricted latent class models.

Design matrices (DINO / DINA), response probabilities, the complete-data
likelihood from sufficient counts, and the cluster marginal likelihood g(C)
with latent states integrated out blockwise.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, reverse_cuthill_mckee
from scipy.special import logsumexp

from app.core.exceptions import CapacityError, DataError, DimensionError, RestrictionError
from app.models.schemas import Mode, PartitionPriorSpec, RatePriorSpec, Rule, StatePriorSpec

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, List]


@dataclass
class RateParams:
    """Per-feature true positive (theta) and false positive (psi) rates."""

    theta: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        self.psi = np.atleast_1d(np.asarray(self.psi, dtype=float))
        if self.theta.shape != self.psi.shape:
            raise DimensionError(
                f"theta has {self.theta.size} entries but psi has {self.psi.size}"
            )

    @property
    def L(self) -> int:
        return self.theta.size

    def validate(self) -> None:
        """Raise RestrictionError unless 0 < psi < theta < 1 for every feature."""
        bad = ~((0 < self.psi) & (self.psi < self.theta) & (self.theta < 1))
        if np.any(bad):
            raise RestrictionError(
                f"rates violate 0 < psi < theta < 1 at features {np.flatnonzero(bad).tolist()}"
            )

    def copy(self) -> "RateParams":
        return RateParams(self.theta.copy(), self.psi.copy())


def as_binary(values: ArrayLike, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D uint8 array, rejecting anything outside {0, 1}."""
    arr = np.atleast_2d(np.asarray(values))
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be two-dimensional")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise DataError(f"{name} contains entries other than 0/1")
    return arr.astype(np.uint8)


def pattern_matrix(M: int) -> np.ndarray:
    """All 2^M binary patterns; row k has state m set when bit m of k is set."""
    codes = np.arange(2 ** M, dtype=np.int64)
    return ((codes[:, None] >> np.arange(M)) & 1).astype(np.uint8)


# ============================================================================
# Design matrices
# ============================================================================

def _check_dims(H: np.ndarray, Q: np.ndarray) -> None:
    if H.shape[1] != Q.shape[0]:
        raise DimensionError(
            f"latent states have {H.shape[1]} columns but Q has {Q.shape[0]} rows"
        )


def build_gamma_dino(H: ArrayLike, Q: ArrayLike) -> np.ndarray:
    """OR gate: Gamma[j, l] = 1 iff some active state of row j loads on feature l."""
    H = np.atleast_2d(np.asarray(H))
    Q = np.atleast_2d(np.asarray(Q))
    _check_dims(H, Q)
    return (H.astype(np.int32) @ Q.astype(np.int32) > 0).astype(np.uint8)


def build_gamma_dina(H: ArrayLike, Q: ArrayLike) -> np.ndarray:
    """AND gate: Gamma[j, l] = 1 iff row j has every state that feature l requires."""
    H = np.atleast_2d(np.asarray(H))
    Q = np.atleast_2d(np.asarray(Q))
    _check_dims(H, Q)
    missing = (1 - H.astype(np.int32)) @ Q.astype(np.int32)
    return (missing == 0).astype(np.uint8)


def build_gamma(H: ArrayLike, Q: ArrayLike, rule: Rule = Rule.DINO) -> np.ndarray:
    """Dispatch on the gate rule."""
    if rule == Rule.DINO:
        return build_gamma_dino(H, Q)
    elif rule == Rule.DINA:
        return build_gamma_dina(H, Q)
    else:
        raise ValueError(f"Unsupported rule: {rule}")


def response_prob(gamma_entry: int, theta_l: float, psi_l: float) -> float:
    """Probability of a positive response given the ideal response."""
    if not 0 < psi_l < theta_l < 1:
        raise RestrictionError(f"need 0 < psi < theta < 1, got psi={psi_l}, theta={theta_l}")
    return float(theta_l) if gamma_entry else float(psi_l)


# ============================================================================
# Likelihoods
# ============================================================================

def sufficient_counts(Y_C: ArrayLike) -> tuple:
    """Per-feature counts of ones and zeros in a block of rows."""
    Y_C = np.atleast_2d(np.asarray(Y_C))
    n1 = Y_C.sum(axis=0).astype(np.int64)
    return n1, Y_C.shape[0] - n1


def cluster_counts(Y: np.ndarray, Z: np.ndarray, T: int) -> tuple:
    """(T x L) counts of ones and zeros for every cluster label in 0..T-1."""
    Y = np.asarray(Y)
    n1 = np.zeros((T, Y.shape[1]), dtype=np.int64)
    np.add.at(n1, np.asarray(Z), Y)
    sizes = np.bincount(np.asarray(Z), minlength=T)
    return n1, sizes[:, None] - n1


def loglik_from_counts(
    n1: np.ndarray, n0: np.ndarray, gamma: np.ndarray, rates: RateParams
) -> np.ndarray:
    """Sum over features of n1 log(lambda) + n0 log(1 - lambda); broadcasts over rows."""
    g = np.asarray(gamma).astype(bool)
    with np.errstate(divide="ignore"):
        log_lam1 = np.where(g, np.log(rates.theta), np.log(rates.psi))
        log_lam0 = np.where(g, np.log1p(-rates.theta), np.log1p(-rates.psi))
    # zero counts contribute nothing even where lambda is 0 or 1
    with np.errstate(invalid="ignore"):
        terms = np.where(n1 > 0, n1 * log_lam1, 0.0) + np.where(n0 > 0, n0 * log_lam0, 0.0)
    return terms.sum(axis=-1)


def cluster_loglik(
    Y_C: ArrayLike,
    eta_star: ArrayLike,
    Q: ArrayLike,
    rates: RateParams,
    rule: Rule = Rule.DINO,
) -> float:
    """Log-likelihood of the rows of one cluster sharing latent state eta_star."""
    Y_C = np.atleast_2d(np.asarray(Y_C))
    if Y_C.shape[0] == 0:
        raise DataError("cluster is empty")
    Q = np.atleast_2d(np.asarray(Q))
    if Y_C.shape[1] != Q.shape[1] or rates.L != Q.shape[1]:
        raise DimensionError("data, Q and rates disagree on the number of features")
    n1, n0 = sufficient_counts(Y_C)
    gamma = build_gamma(np.atleast_2d(eta_star), Q, rule)[0]
    return float(loglik_from_counts(n1, n0, gamma, rates))


def complete_loglik(
    Y: np.ndarray,
    Z: np.ndarray,
    Hstar: np.ndarray,
    Q: np.ndarray,
    rates: RateParams,
    rule: Rule = Rule.DINO,
) -> float:
    """Complete-data log-likelihood given cluster labels and cluster latent states."""
    Hstar = np.atleast_2d(Hstar)
    n1, n0 = cluster_counts(Y, Z, Hstar.shape[0])
    gamma = build_gamma(Hstar, Q, rule)
    return float(loglik_from_counts(n1, n0, gamma, rates).sum())


# ============================================================================
# Marginal likelihood with latent states integrated out
# ============================================================================

def rcm_state_blocks(Q: ArrayLike) -> List[np.ndarray]:
    """Group states whose Q rows overlap, directly or through a chain of rows.

    Blocks are the connected components of the support-overlap graph QQ^T,
    listed in reverse Cuthill-McKee order; merged row supports of distinct
    blocks are disjoint.
    """
    Q = np.atleast_2d(np.asarray(Q)).astype(np.int32)
    M = Q.shape[0]
    if M == 0:
        return []
    adjacency = csr_matrix(((Q @ Q.T) > 0).astype(np.int32))
    _, labels = connected_components(adjacency, directed=False)
    order = reverse_cuthill_mckee(adjacency, symmetric_mode=True)

    blocks: Dict[int, List[int]] = {}
    for state in order:
        blocks.setdefault(int(labels[state]), []).append(int(state))
    return [np.asarray(members, dtype=np.int64) for members in blocks.values()]


@dataclass
class _BlockTable:
    states: np.ndarray
    features: np.ndarray
    patterns: np.ndarray
    w1: np.ndarray
    w0: np.ndarray
    log_prior: np.ndarray


class MarginalLikelihood:
    """Enumeration tables for log g(C) under fixed (Q, rates, p, rule).

    States are split into blocks with disjoint feature supports; within a
    block all 2^k patterns are enumerated, across blocks the sum factorizes.
    Features loaded by no state contribute a pattern-free constant.
    """

    def __init__(
        self,
        Q: ArrayLike,
        rates: RateParams,
        p: ArrayLike,
        rule: Rule = Rule.DINO,
        max_block_states: int = 20,
    ):
        self.Q = np.atleast_2d(np.asarray(Q)).astype(np.uint8)
        self.M, self.L = self.Q.shape
        self.p = np.atleast_1d(np.asarray(p, dtype=float))
        self.rule = rule
        if self.p.size != self.M:
            raise DimensionError(f"p has {self.p.size} entries for {self.M} states")
        if rates.L != self.L:
            raise DimensionError(f"rates cover {rates.L} features, Q has {self.L}")

        with np.errstate(divide="ignore"):
            log_theta, log_psi = np.log(rates.theta), np.log(rates.psi)
            log1m_theta, log1m_psi = np.log1p(-rates.theta), np.log1p(-rates.psi)
            log_p, log1m_p = np.log(self.p), np.log1p(-self.p)

        covered = np.zeros(self.L, dtype=bool)
        self.blocks = rcm_state_blocks(self.Q)
        self._tables: List[_BlockTable] = []
        for states in self.blocks:
            if states.size > max_block_states:
                raise CapacityError(
                    f"a block of {states.size} overlapping states exceeds the enumeration "
                    f"cap of {max_block_states}; raise max_block_states or use a sparser Q"
                )
            features = np.flatnonzero(self.Q[states].any(axis=0))
            covered[features] = True
            patterns = pattern_matrix(states.size)
            gamma = build_gamma(patterns, self.Q[np.ix_(states, features)], rule).astype(bool)
            self._tables.append(
                _BlockTable(
                    states=states,
                    features=features,
                    patterns=patterns,
                    w1=np.where(gamma, log_theta[features], log_psi[features]),
                    w0=np.where(gamma, log1m_theta[features], log1m_psi[features]),
                    log_prior=np.where(patterns.astype(bool), log_p[states], log1m_p[states]).sum(axis=1),
                )
            )

        self._free = np.flatnonzero(~covered)
        if rule == Rule.DINO:
            self._free_w1, self._free_w0 = log_psi[self._free], log1m_psi[self._free]
        else:
            self._free_w1, self._free_w0 = log_theta[self._free], log1m_theta[self._free]

    def _block_scores(self, table: _BlockTable, N1: np.ndarray, N0: np.ndarray) -> np.ndarray:
        scores = table.w1 @ N1[:, table.features].T + table.w0 @ N0[:, table.features].T
        return scores + table.log_prior[:, None]

    def log_g_batch(self, N1: ArrayLike, N0: ArrayLike) -> np.ndarray:
        """log g for every row of the (T x L) count matrices."""
        N1 = np.atleast_2d(np.asarray(N1, dtype=float))
        N0 = np.atleast_2d(np.asarray(N0, dtype=float))
        total = N1[:, self._free] @ self._free_w1 + N0[:, self._free] @ self._free_w0
        for table in self._tables:
            if table.features.size == 0:
                continue
            total = total + logsumexp(self._block_scores(table, N1, N0), axis=0)
        return total

    def log_g(self, n1: ArrayLike, n0: ArrayLike) -> float:
        return float(self.log_g_batch(n1, n0)[0])

    def sample_states(self, N1: ArrayLike, N0: ArrayLike, rng: np.random.Generator) -> np.ndarray:
        """Draw each cluster's latent state from its full conditional, block by block."""
        N1 = np.atleast_2d(np.asarray(N1, dtype=float))
        N0 = np.atleast_2d(np.asarray(N0, dtype=float))
        T = N1.shape[0]
        H = np.zeros((T, self.M), dtype=np.uint8)
        for table in self._tables:
            if table.features.size == 0:
                scores = np.repeat(table.log_prior[:, None], T, axis=1)
            else:
                scores = self._block_scores(table, N1, N0)
            weights = np.exp(scores - scores.max(axis=0, keepdims=True))
            cumulative = np.cumsum(weights, axis=0)
            u = rng.random(T) * cumulative[-1]
            index = np.minimum((cumulative < u).sum(axis=0), len(table.patterns) - 1)
            H[:, table.states] = table.patterns[index]
        return H


def marginal_loglik_g(
    Y_C: ArrayLike,
    Q: ArrayLike,
    rates: RateParams,
    p: ArrayLike,
    rule: Rule = Rule.DINO,
    max_block_states: int = 20,
) -> float:
    """log g(C): cluster likelihood with the shared latent state summed out."""
    Y_C = np.atleast_2d(np.asarray(Y_C))
    n1, n0 = sufficient_counts(Y_C)
    kernel = MarginalLikelihood(Q, rates, p, rule, max_block_states)
    return kernel.log_g(n1, n0)


# ============================================================================
# Joint posterior
# ============================================================================

@dataclass
class Hyperparams:
    """Prior specifications plus the current alpha1."""

    alpha1: float
    partition_prior: PartitionPriorSpec
    state_prior: StatePriorSpec
    rate_prior: RatePriorSpec
    mode: Mode = Mode.FINITE


def joint_logpost_terms(
    Y: np.ndarray,
    Z: np.ndarray,
    Hstar: np.ndarray,
    Q: np.ndarray,
    rates: RateParams,
    hyper: Hyperparams,
    rule: Rule = Rule.DINO,
) -> Dict[str, float]:
    """Each additive term of the unnormalized joint log-density."""
    from app.services import priors

    Hstar = np.atleast_2d(Hstar)
    if hyper.mode == Mode.INFINITE:
        log_states = priors.log_prior_Hstar_ibp(Hstar, hyper.alpha1)
    else:
        log_states = priors.log_prior_Hstar(Hstar, hyper.state_prior, alpha1=hyper.alpha1)
    return {
        "loglik": complete_loglik(Y, Z, Hstar, Q, rates, rule),
        "rates": priors.log_rate_prior(rates, hyper.rate_prior),
        "states": log_states,
        "partition": priors.log_eppf(Z, hyper.partition_prior),
        "alpha1": priors.log_prior_alpha1(hyper.alpha1, hyper.state_prior),
    }


def joint_logpost(
    Y: np.ndarray,
    Z: np.ndarray,
    Hstar: np.ndarray,
    Q: np.ndarray,
    rates: RateParams,
    hyper: Hyperparams,
    rule: Rule = Rule.DINO,
    strict: bool = False,
) -> float:
    """Unnormalized joint log-density of data and all parameters.

    With strict=True a Q outside the identifiable constraint set is an error.
    """
    if strict:
        from app.core.exceptions import IdentifiabilityError
        from app.services.identifiability import q_in_constraint_set

        if not q_in_constraint_set(Q):
            raise IdentifiabilityError("Q is outside the identifiable constraint set")
    return float(sum(joint_logpost_terms(Y, Z, Hstar, Q, rates, hyper, rule).values()))
