"""Finite-M posterior sampler and multi-chain driver.

One iteration runs: split-merge, Gibbs over cluster labels, cluster latent
states, partner-state merging, response rates, alpha1, state prevalences,
constrained Q updates and the reset of unused Q rows. The infinite-M
slice sampler in ``slice_sampler`` reuses the rate, alpha1 and Q steps.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import betaln, gammaln
from tqdm import tqdm

from config import settings
from app.core.exceptions import IdentifiabilityError, NumericError
from app.models.schemas import ChainConfig, ChainRecord, Mode, PartitionPriorSpec, RatePriorSpec, Rule, StatePriorSpec
from app.services import priors
from app.services.identifiability import (
    check_C2,
    q_in_constraint_set,
    repair_q,
    singleton_owner,
)
from app.services.model import (
    Hyperparams,
    MarginalLikelihood,
    RateParams,
    as_binary,
    build_gamma,
    joint_logpost_terms,
)
from app.services.state import ClusterState, SubjectUnits, compact_labels

logger = logging.getLogger(__name__)

_P_EPS = 1e-12


# ============================================================================
# Chain state and output
# ============================================================================

@dataclass
class ChainState:
    """Everything that changes from one iteration to the next."""

    clusters: ClusterState
    Q: np.ndarray
    rates: RateParams
    alpha1: float
    p: np.ndarray
    units: SubjectUnits
    feature_mask: np.ndarray


@dataclass
class Draw:
    """One retained iteration."""

    iteration: int
    Z: np.ndarray
    Hstar: np.ndarray
    Q: np.ndarray
    theta: np.ndarray
    psi: np.ndarray
    alpha1: float
    p: np.ndarray
    log_post: float
    t_tilde: int
    identifiable: bool
    c2: Optional[bool] = None

    def to_record(self) -> ChainRecord:
        return ChainRecord(
            iteration=self.iteration,
            Z=self.Z.tolist(),
            Hstar=self.Hstar.tolist(),
            Q=self.Q.tolist(),
            theta=self.theta.tolist(),
            psi=self.psi.tolist(),
            alpha1=self.alpha1,
            p=self.p.tolist(),
            log_post=self.log_post,
            t_tilde=self.t_tilde,
            identifiable=self.identifiable,
            c2=self.c2,
        )

    @classmethod
    def from_record(cls, record: ChainRecord, L: int) -> "Draw":
        M = len(record.p)
        return cls(
            iteration=record.iteration,
            Z=np.asarray(record.Z, dtype=np.int64),
            Hstar=np.asarray(record.Hstar, dtype=np.uint8).reshape(len(record.Hstar), M),
            Q=np.asarray(record.Q, dtype=np.uint8).reshape(M, L),
            theta=np.asarray(record.theta, dtype=float),
            psi=np.asarray(record.psi, dtype=float),
            alpha1=record.alpha1,
            p=np.asarray(record.p, dtype=float),
            log_post=record.log_post,
            t_tilde=record.t_tilde,
            identifiable=record.identifiable,
            c2=record.c2,
        )


@dataclass
class ChainOutput:
    """Retained draws of one chain plus the metadata needed to reproduce it."""

    chain: int
    seed: int
    config_hash: str
    mode: Mode
    rule: Rule
    n_subjects: int
    n_features: int
    draws: List[Draw] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.draws)

    def trace(self, name: str) -> np.ndarray:
        """Scalar trace of a draw attribute (log_post, alpha1, t_tilde)."""
        return np.asarray([getattr(d, name) for d in self.draws], dtype=float)


# ============================================================================
# Random helpers
# ============================================================================

def chain_rng(seed: int, chain: int, n_chains: int) -> np.random.Generator:
    """Independent substream for one chain of a run."""
    streams = np.random.SeedSequence(seed).spawn(max(n_chains, chain + 1))
    return np.random.Generator(np.random.PCG64(streams[chain]))


def sample_log_weights(log_w: np.ndarray, rng: np.random.Generator) -> int:
    """Index drawn with probability proportional to exp(log_w)."""
    top = np.max(log_w)
    if not np.isfinite(top):
        raise NumericError("all reassignment weights are zero")
    cumulative = np.cumsum(np.exp(log_w - top))
    return int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))


def _log_rising(sizes, add: int, gamma: float):
    """log gamma^(n + add) - log gamma^(n)."""
    return gammaln(np.asarray(sizes) + add + gamma) - gammaln(np.asarray(sizes) + gamma)


# ============================================================================
# Initialization
# ============================================================================

def draw_initial_rows(
    n_rows: int, feature_mask: np.ndarray, p_init: float, rng: np.random.Generator
) -> np.ndarray:
    """Bernoulli(p_init) rows on features whose positive rate passes the threshold."""
    rows = rng.random((n_rows, feature_mask.size)) < p_init
    return (rows & feature_mask[None, :]).astype(np.uint8)


def draw_rates_from_prior(prior: RatePriorSpec, L: int, rng: np.random.Generator) -> RateParams:
    hp = prior.expand(L)
    psi = priors.sample_truncated_beta_guarded(hp["a_psi"], hp["b_psi"], 0.0, hp["psi_upper"], rng)
    theta = priors.sample_truncated_beta_guarded(
        hp["a_theta"], hp["b_theta"], np.maximum(psi, hp["theta_lower"]), 1.0, rng
    )
    return RateParams(theta, psi)


def init_state(Y: np.ndarray, config: ChainConfig, rng: np.random.Generator) -> ChainState:
    """Data-driven starting point.

    Q rows load on features whose positive rate exceeds tau1 with probability
    p_init and are then repaired into the constraint set; rates and
    prevalences come from their priors; the partition is one cluster or the
    supplied must-link partition.
    """
    Y = as_binary(Y, "Y")
    N, L = Y.shape
    M = config.m_dagger
    feature_mask = Y.mean(axis=0) > config.tau1

    if config.fixed_q is not None:
        Q = as_binary(config.fixed_q, "fixed Q")
        if Q.shape[1] != L:
            raise IdentifiabilityError(f"fixed Q has {Q.shape[1]} columns, data has {L} features")
        M = Q.shape[0]
        if not q_in_constraint_set(Q):
            if config.strict:
                raise IdentifiabilityError("fixed Q is outside the identifiable constraint set")
            logger.warning("Fixed Q is outside the identifiable constraint set")
    else:
        Q = repair_q(draw_initial_rows(M, feature_mask, config.p_init, rng), rng)

    rates = draw_rates_from_prior(config.rate_prior, L, rng)
    alpha1 = config.state_prior.alpha1
    a = alpha1 * config.state_prior.alpha2 / M
    p = np.clip(rng.beta(a, config.state_prior.alpha2, size=M), _P_EPS, 1 - _P_EPS)

    if config.partial_clusters is not None:
        Z = compact_labels(config.partial_clusters)
    else:
        Z = np.zeros(N, dtype=np.int64)
    T = int(Z.max()) + 1
    Hstar = (rng.random((T, M)) < p[None, :]).astype(np.uint8)
    clusters = ClusterState.from_labels(Y, Z, Hstar)
    units = SubjectUnits.build(Y, config.partial_clusters)
    logger.debug("Initialized chain: N=%d L=%d M=%d T=%d", N, L, M, T)
    return ChainState(
        clusters=clusters,
        Q=Q,
        rates=rates,
        alpha1=alpha1,
        p=p,
        units=units,
        feature_mask=feature_mask,
    )


# ============================================================================
# Partition updates
# ============================================================================

def gibbs_update_Z(
    state: ClusterState,
    kernel: MarginalLikelihood,
    spec: PartitionPriorSpec,
    rng: np.random.Generator,
    units: SubjectUnits,
) -> ClusterState:
    """One systematic sweep of urn reassignments over must-link units.

    A unit joins an existing cluster C with weight
    gamma^(|C|+s)/gamma^(|C|) * g(C + unit)/g(C), or opens a new cluster with
    weight V_N(t+1)/V_N(t) * gamma^(s) * g(unit).
    """
    N = state.N
    g = spec.gamma
    log_g = kernel.log_g_batch(state.n1, state.n0)
    unit_log_g = kernel.log_g_batch(units.n1, units.n0)
    for u in range(units.count):
        members = units.members[u]
        u1, u0, s = units.n1[u], units.n0[u], int(units.size[u])
        c = int(state.Z[members[0]])

        state.n1[c] -= u1
        state.n0[c] -= u0
        state.sizes[c] -= s
        if state.sizes[c] == 0:
            state.Z[members] = -1
            state.drop_cluster(c)
            log_g = np.delete(log_g, c)
        else:
            log_g[c] = kernel.log_g(state.n1[c], state.n0[c])

        T = state.T
        if T == 0:
            choice = 0
        else:
            candidate = kernel.log_g_batch(state.n1 + u1, state.n0 + u0)
            log_w = np.empty(T + 1)
            log_w[:T] = _log_rising(state.sizes, s, g) + candidate - log_g
            log_w[T] = (
                priors.log_new_cluster_ratio(T, N, spec)
                + gammaln(g + s) - gammaln(g)
                + unit_log_g[u]
            )
            choice = sample_log_weights(log_w, rng)

        if choice == T:
            eta = kernel.sample_states(u1[None, :], u0[None, :], rng)[0]
            state.add_cluster(u1.copy(), u0.copy(), s, eta)
            log_g = np.append(log_g, unit_log_g[u])
        else:
            state.n1[choice] += u1
            state.n0[choice] += u0
            state.sizes[choice] += s
            log_g[choice] = candidate[choice]
        state.Z[members] = choice
    return state


def _restricted_scan(
    S: np.ndarray,
    side: np.ndarray,
    counts: List[np.ndarray],
    units: SubjectUnits,
    kernel: MarginalLikelihood,
    gamma: float,
    rng: np.random.Generator,
    forced: Optional[np.ndarray] = None,
) -> float:
    """Gibbs scan over units S restricted to the two anchor clusters.

    counts = [n1_A, n0_A, size_A, n1_B, n0_B, size_B] is updated in place.
    Returns the log probability of the assignments made (or forced).
    """
    log_q = 0.0
    for idx, u in enumerate(S):
        u1, u0, s = units.n1[u], units.n0[u], int(units.size[u])
        k = int(side[idx])
        counts[3 * k] -= u1
        counts[3 * k + 1] -= u0
        counts[3 * k + 2] -= s

        n1 = np.vstack([counts[0], counts[3], counts[0] + u1, counts[3] + u1])
        n0 = np.vstack([counts[1], counts[4], counts[1] + u0, counts[4] + u0])
        lg = kernel.log_g_batch(n1, n0)
        log_w = np.array([
            _log_rising(counts[2], s, gamma) + lg[2] - lg[0],
            _log_rising(counts[5], s, gamma) + lg[3] - lg[1],
        ])
        log_p = log_w - np.logaddexp(log_w[0], log_w[1])
        if forced is None:
            k = int(rng.random() >= np.exp(log_p[0]))
        else:
            k = int(forced[idx])
        log_q += float(log_p[k])

        side[idx] = k
        counts[3 * k] += u1
        counts[3 * k + 1] += u0
        counts[3 * k + 2] += s
    return log_q


def split_merge_update(
    state: ClusterState,
    kernel: MarginalLikelihood,
    spec: PartitionPriorSpec,
    rng: np.random.Generator,
    units: SubjectUnits,
    scans: int = 5,
    refine: bool = True,
) -> ClusterState:
    """Split-merge Metropolis-Hastings move with restricted Gibbs launch states.

    Two anchor subjects are drawn uniformly. If they share a cluster a split
    is proposed, otherwise a merge; ``scans`` intermediate restricted scans
    build the launch state and one final restricted scan proposes (or scores)
    the split. With refine=True a full Gibbs sweep follows.
    """
    N = state.N
    if N < 2:
        return state
    i, j = rng.choice(N, size=2, replace=False)
    ui, uj = int(units.of[i]), int(units.of[j])
    if ui != uj:
        _split_merge_proposal(state, kernel, spec, rng, units, ui, uj, scans)
    if refine:
        state = gibbs_update_Z(state, kernel, spec, rng, units)
    return state


def _split_merge_proposal(state, kernel, spec, rng, units, ui, uj, scans) -> bool:
    g = spec.gamma
    N = state.N
    ci, cj = units.cluster_of(state.Z, ui), units.cluster_of(state.Z, uj)
    unit_clusters = np.array([units.cluster_of(state.Z, u) for u in range(units.count)])
    S = np.flatnonzero(np.isin(unit_clusters, (ci, cj)))
    S = S[(S != ui) & (S != uj)]

    side = rng.integers(0, 2, size=S.size)
    counts = [
        units.n1[ui].copy(), units.n0[ui].copy(), int(units.size[ui]),
        units.n1[uj].copy(), units.n0[uj].copy(), int(units.size[uj]),
    ]
    for idx, u in enumerate(S):
        k = int(side[idx])
        counts[3 * k] += units.n1[u]
        counts[3 * k + 1] += units.n0[u]
        counts[3 * k + 2] += int(units.size[u])
    for _ in range(scans):
        _restricted_scan(S, side, counts, units, kernel, g, rng)

    if ci == cj:
        log_q = _restricted_scan(S, side, counts, units, kernel, g, rng)
        T_split = state.T + 1
    else:
        original = (unit_clusters[S] == cj).astype(np.int64)
        log_q = _restricted_scan(S, side, counts, units, kernel, g, rng, forced=original)
        T_split = state.T

    lg = kernel.log_g_batch(
        np.vstack([counts[0], counts[3], counts[0] + counts[3]]),
        np.vstack([counts[1], counts[4], counts[1] + counts[4]]),
    )
    size_a, size_b = counts[2], counts[5]
    log_split_over_merge = (
        priors.log_Vn(T_split, N, spec) - priors.log_Vn(T_split - 1, N, spec)
        + gammaln(g + size_a) + gammaln(g + size_b)
        - gammaln(g + size_a + size_b) - gammaln(g)
        + lg[0] + lg[1] - lg[2]
    )

    if ci == cj:
        log_accept = log_split_over_merge - log_q
        if np.log(rng.random()) < log_accept:
            members_b = np.concatenate([units.members[uj]] + [units.members[u] for u, k in zip(S, side) if k == 1])
            state.n1[ci], state.n0[ci], state.sizes[ci] = counts[0], counts[1], size_a
            new = state.add_cluster(counts[3].copy(), counts[4].copy(), size_b, state.Hstar[ci])
            state.Z[members_b] = new
            logger.debug("split accepted: %d -> %d + %d", size_a + size_b, size_a, size_b)
            return True
        return False

    log_accept = log_q - log_split_over_merge
    if np.log(rng.random()) < log_accept:
        state.n1[ci] += state.n1[cj]
        state.n0[ci] += state.n0[cj]
        state.sizes[ci] += state.sizes[cj]
        state.Z[state.Z == cj] = ci
        state.sizes[cj] = 0
        state.drop_cluster(cj)
        logger.debug("merge accepted: %d + %d", size_a, size_b)
        return True
    return False


# ============================================================================
# Latent states
# ============================================================================

def update_Hstar(
    state: ClusterState, kernel: MarginalLikelihood, rng: np.random.Generator
) -> ClusterState:
    """Draw every cluster's latent state from its blockwise full conditional."""
    state.Hstar = kernel.sample_states(state.n1, state.n0, rng)
    return state


def merge_partner_states(
    state: ClusterState,
    Q: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    rule: Rule = Rule.DINO,
) -> Tuple[ClusterState, np.ndarray]:
    """Fold states that are switched on for exactly the same subjects into one.

    For identical active columns m < m' of H, Q_m becomes Q_m OR Q_m' and
    column m' is cleared; the freed row is rebuilt so Q stays in the
    constraint set. Gamma is unchanged under DINO. A merge whose freed rows
    cannot be rebuilt is skipped.
    """
    if rule != Rule.DINO:
        return state, Q
    rng = rng if rng is not None else np.random.default_rng(0)
    H = state.Hstar
    active = np.flatnonzero(H.any(axis=0))
    if active.size < 2:
        return state, Q
    _, group = np.unique(H[:, active].T, axis=0, return_inverse=True)
    group = np.asarray(group).ravel()
    if np.unique(group).size == active.size:
        return state, Q

    new_Q = Q.copy()
    new_H = H.copy()
    for label in np.unique(group):
        states = active[group == label]
        if states.size < 2:
            continue
        keep, drop = states[0], states[1:]
        new_Q[keep] = new_Q[np.concatenate([[keep], drop])].max(axis=0)
        new_Q[drop] = 0
        new_H[:, drop] = 0

    try:
        repaired = repair_q(new_Q, rng, frozen_rows=new_H.any(axis=0))
    except IdentifiabilityError:
        logger.debug("partner merge skipped: freed rows cannot be rebuilt")
        return state, Q
    state.Hstar = new_H
    return state, repaired


# ============================================================================
# Continuous parameters
# ============================================================================

def rate_posterior_params(state: ClusterState, gamma: np.ndarray, prior: RatePriorSpec) -> dict:
    """Beta parameters of the rate full conditionals from cluster-level counts."""
    g = np.asarray(gamma).astype(bool)
    hp = prior.expand(state.n1.shape[1])
    return {
        "a_theta": hp["a_theta"] + (state.n1 * g).sum(axis=0),
        "b_theta": hp["b_theta"] + (state.n0 * g).sum(axis=0),
        "a_psi": hp["a_psi"] + (state.n1 * ~g).sum(axis=0),
        "b_psi": hp["b_psi"] + (state.n0 * ~g).sum(axis=0),
        "theta_lower": hp["theta_lower"],
        "psi_upper": hp["psi_upper"],
    }


def update_rates(
    state: ClusterState,
    gamma: np.ndarray,
    prior: RatePriorSpec,
    rates: RateParams,
    rng: np.random.Generator,
) -> RateParams:
    """psi from its truncated Beta conditional below theta, then theta above the new psi."""
    post = rate_posterior_params(state, gamma, prior)
    psi = priors.sample_truncated_beta_guarded(
        post["a_psi"], post["b_psi"], 0.0, np.minimum(rates.theta, post["psi_upper"]), rng
    )
    theta = priors.sample_truncated_beta_guarded(
        post["a_theta"], post["b_theta"], np.maximum(psi, post["theta_lower"]), 1.0, rng
    )
    return RateParams(theta, psi)


def _alpha_grid(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def _draw_from_grid(log_density: np.ndarray, rng: np.random.Generator) -> float:
    n = log_density.size
    weights = np.exp(log_density - np.max(log_density))
    cumulative = np.cumsum(weights)
    cell = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
    cell = min(cell, n - 1)
    return (cell + rng.random()) / n


def alpha1_log_density(Hstar: np.ndarray, spec: StatePriorSpec, beta: np.ndarray) -> np.ndarray:
    """Unnormalized log density of beta = alpha1/(1+alpha1) given finite-M latent states."""
    H = np.atleast_2d(Hstar)
    T, M = H.shape
    alpha = beta / (1 - beta)
    a = alpha[:, None] * spec.alpha2 / M
    s = H.sum(axis=0)[None, :]
    loglik = (betaln(s + a, T - s + spec.alpha2) - betaln(a, spec.alpha2)).sum(axis=1)
    return priors.log_alpha_prior_on_beta(beta, spec) + loglik


def update_alpha1(
    Hstar: np.ndarray, spec: StatePriorSpec, rng: np.random.Generator, mode: Mode = Mode.FINITE
) -> float:
    """Grid draw of alpha1 through beta = alpha1/(1+alpha1) on (0, 1)."""
    beta = _alpha_grid(spec.grid_size)
    if mode == Mode.INFINITE:
        H = np.atleast_2d(Hstar)
        T = H.shape[0]
        n_active = int(H.any(axis=0).sum())
        alpha = beta / (1 - beta)
        harmonic = np.sum(1.0 / np.arange(1, T + 1))
        log_density = priors.log_alpha_prior_on_beta(beta, spec) + n_active * np.log(alpha) - alpha * harmonic
    else:
        log_density = alpha1_log_density(Hstar, spec, beta)
    b = _draw_from_grid(log_density, rng)
    b = min(max(b, _P_EPS), 1 - _P_EPS)
    return b / (1 - b)


def update_p(
    Hstar: np.ndarray, alpha1: float, M: int, rng: np.random.Generator, alpha2: float = 1.0
) -> np.ndarray:
    """p_m ~ Beta(s_m + alpha1 alpha2 / M, T - s_m + alpha2) independently."""
    H = np.atleast_2d(Hstar)
    T = H.shape[0]
    s = H.sum(axis=0)
    p = rng.beta(s + alpha1 * alpha2 / M, T - s + alpha2)
    return np.clip(p, _P_EPS, 1 - _P_EPS)


# ============================================================================
# Q updates
# ============================================================================

def _feature_gains(state: ClusterState, rates: RateParams) -> np.ndarray:
    """Per-cluster log-likelihood gain of Gamma=1 over Gamma=0 for each feature."""
    a1 = np.log(rates.theta) - np.log(rates.psi)
    a0 = np.log1p(-rates.theta) - np.log1p(-rates.psi)
    return state.n1 * a1[None, :] + state.n0 * a0[None, :]


def _flip_gain(h: np.ndarray, base: np.ndarray, current: int, gain: np.ndarray, rule: Rule) -> float:
    """Log-likelihood change from flipping one Q entry.

    ``base`` is the per-cluster column tally without the entry and ``h`` the
    state column it adds (1 - H under DINA).
    """
    if rule == Rule.DINO:
        g_cur = (base + current * h) > 0
        g_new = (base + (1 - current) * h) > 0
    else:
        g_cur = (base + current * h) == 0
        g_new = (base + (1 - current) * h) == 0
    return float((g_new.astype(float) - g_cur.astype(float)) @ gain)


def q_flip_log_odds(
    state: ClusterState, Q: np.ndarray, m: int, l: int, rates: RateParams, rule: Rule = Rule.DINO
) -> float:
    """log p(Q_ml flipped | rest) - log p(Q_ml current | rest)."""
    H = state.Hstar.astype(np.int64)
    h = H[:, m] if rule == Rule.DINO else 1 - H[:, m]
    tally = (H if rule == Rule.DINO else 1 - H) @ Q[:, l].astype(np.int64)
    current = int(Q[m, l])
    return _flip_gain(h, tally - current * h, current, _feature_gains(state, rates)[:, l], rule)


def _flip_protected(m: int, l: int, Q: np.ndarray, support: np.ndarray, owner: np.ndarray, n_single: np.ndarray) -> bool:
    """A flip that would leave the constraint set."""
    if Q[m, l] == 1 and support[m] <= 3:
        return True
    k = owner[l]
    return bool(k >= 0 and n_single[k] <= 2)


def update_Q(
    state: ClusterState,
    Q: np.ndarray,
    rates: RateParams,
    rng: np.random.Generator,
    rule: Rule = Rule.DINO,
) -> np.ndarray:
    """Metropolized Gibbs sweep over Q entries that can flip without leaving the constraint set.

    An entry is flipped with probability min(1, odds) where odds is the
    likelihood ratio of the flipped to the current value; entries whose flip
    would drop a row below three ones or remove one of a state's last two
    singleton columns are left alone.
    """
    Q = Q.copy()
    M, L = Q.shape
    H = state.Hstar.astype(np.int64)
    gains = _feature_gains(state, rates)
    support = Q.sum(axis=1).astype(np.int64)
    owner = singleton_owner(Q)
    n_single = np.bincount(owner[owner >= 0], minlength=M)
    if rule == Rule.DINO:
        tally = H @ Q.astype(np.int64)
    else:
        tally = (1 - H) @ Q.astype(np.int64)

    for l in range(L):
        gain = gains[:, l]
        for m in range(M):
            if _flip_protected(m, l, Q, support, owner, n_single):
                continue
            current = int(Q[m, l])
            h = H[:, m] if rule == Rule.DINO else 1 - H[:, m]
            base = tally[:, l] - current * h
            log_odds = _flip_gain(h, base, current, gain, rule)
            if log_odds < 0 and np.log(rng.random()) >= log_odds:
                continue

            Q[m, l] = 1 - current
            tally[:, l] = base + (1 - current) * h
            support[m] += 1 - 2 * current
            if owner[l] >= 0:
                n_single[owner[l]] -= 1
            column_sum = int(Q[:, l].sum())
            owner[l] = int(Q[:, l].argmax()) if column_sum == 1 else -1
            if owner[l] >= 0:
                n_single[owner[l]] += 1
    return Q


def reset_unused_rows(
    state: ClusterState,
    Q: np.ndarray,
    rng: np.random.Generator,
    feature_mask: Optional[np.ndarray] = None,
    p_init: float = 0.1,
) -> np.ndarray:
    """Redraw Q rows of states no subject uses, then repair them into the constraint set.

    Used rows are frozen, so Gamma (DINO) is unchanged. If the redrawn rows
    cannot be repaired the old Q is kept.
    """
    used = state.Hstar.any(axis=0)
    if used.all():
        return Q
    mask = np.ones(Q.shape[1], dtype=bool) if feature_mask is None else feature_mask
    new_Q = Q.copy()
    unused = np.flatnonzero(~used)
    new_Q[unused] = draw_initial_rows(unused.size, mask, p_init, rng)
    try:
        return repair_q(new_Q, rng, frozen_rows=used)
    except IdentifiabilityError:
        logger.debug("unused-row reset skipped: rows cannot be repaired")
        return Q


def state_order(Q: np.ndarray) -> np.ndarray:
    """Row order by decreasing lexicographic Q rows (decreasing binary code); stable."""
    Q = np.atleast_2d(Q).astype(np.int64)
    keys = tuple(-Q[:, l] for l in reversed(range(Q.shape[1])))
    return np.lexsort(keys) if keys else np.arange(Q.shape[0])


def count_distinct_states(Hstar: np.ndarray) -> int:
    """Number of distinct rows of H*, i.e. occupied latent classes."""
    H = np.atleast_2d(Hstar)
    if H.shape[1] == 0:
        return 1 if H.shape[0] else 0
    return int(np.unique(H, axis=0).shape[0])


def relabel_states(Q: np.ndarray, Hstar: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sort Q rows by decreasing binary code and permute H* columns to match."""
    order = state_order(Q)
    return Q[order], np.atleast_2d(Hstar)[:, order]


# ============================================================================
# Chain driver
# ============================================================================

class ChainRunner:
    """Runs one chain of the finite-M or slice sampler."""

    def __init__(self, Y: np.ndarray, config: ChainConfig, chain: int = 0, config_hash: str = ""):
        self.Y = as_binary(Y, "Y")
        self.config = config
        self.chain = chain
        self.config_hash = config_hash
        self.rng = chain_rng(config.seed, chain, config.n_chains)
        self.c2_max_states = settings.c2_max_states

    def _likelihood_rates(self, rates: RateParams) -> RateParams:
        if self.config.prior_only:
            half = np.full(rates.L, 0.5)
            return RateParams(half, half)
        return rates

    def _hyper(self, alpha1: float) -> Hyperparams:
        return Hyperparams(
            alpha1=alpha1,
            partition_prior=self.config.partition_prior,
            state_prior=self.config.state_prior,
            rate_prior=self.config.rate_prior,
            mode=self.config.mode,
        )

    def _kernel(self, st: ChainState) -> MarginalLikelihood:
        return MarginalLikelihood(
            st.Q, self._likelihood_rates(st.rates), st.p, self.config.rule,
            self.config.max_block_states,
        )

    def _partition_moves(self, st: ChainState, kernel: MarginalLikelihood) -> None:
        cfg = self.config
        for _ in range(cfg.split_merge_moves):
            st.clusters = split_merge_update(
                st.clusters, kernel, cfg.partition_prior, self.rng, st.units,
                scans=cfg.split_merge_scans, refine=False,
            )
        st.clusters = gibbs_update_Z(st.clusters, kernel, cfg.partition_prior, self.rng, st.units)

    def _update_rates_and_alpha(self, st: ChainState) -> None:
        cfg = self.config
        gamma = build_gamma(st.clusters.Hstar, st.Q, cfg.rule)
        source = st.clusters
        if cfg.prior_only:
            source = ClusterState(
                Z=st.clusters.Z,
                Hstar=st.clusters.Hstar,
                n1=np.zeros_like(st.clusters.n1),
                n0=np.zeros_like(st.clusters.n0),
                sizes=st.clusters.sizes,
            )
        st.rates = update_rates(source, gamma, cfg.rate_prior, st.rates, self.rng)
        if not cfg.fix_alpha1:
            st.alpha1 = update_alpha1(st.clusters.Hstar, cfg.state_prior, self.rng, cfg.mode)

    def finite_iteration(self, st: ChainState) -> None:
        cfg = self.config
        kernel = self._kernel(st)
        self._partition_moves(st, kernel)
        st.clusters = update_Hstar(st.clusters, kernel, self.rng)
        # prior-only runs hold Q fixed
        move_q = cfg.fixed_q is None and not cfg.prior_only
        if move_q:
            st.clusters, st.Q = merge_partner_states(st.clusters, st.Q, self.rng, cfg.rule)
        self._update_rates_and_alpha(st)
        st.p = update_p(st.clusters.Hstar, st.alpha1, st.Q.shape[0], self.rng, cfg.state_prior.alpha2)
        if move_q:
            st.Q = update_Q(st.clusters, st.Q, self._likelihood_rates(st.rates), self.rng, cfg.rule)
            if cfg.rule == Rule.DINO:
                st.Q = reset_unused_rows(st.clusters, st.Q, self.rng, st.feature_mask, cfg.p_init)

    def record(self, st: ChainState, iteration: int) -> Draw:
        cfg = self.config
        order = state_order(st.Q)
        Q = st.Q[order]
        Hstar = st.clusters.Hstar[:, order]
        p = st.p[order]
        identifiable = q_in_constraint_set(Q)
        if cfg.strict and not identifiable:
            raise IdentifiabilityError(f"iteration {iteration}: Q left the constraint set")
        terms = joint_logpost_terms(
            self.Y, st.clusters.Z, Hstar, Q, st.rates, self._hyper(st.alpha1), cfg.rule
        )
        if cfg.prior_only:
            terms.pop("loglik")
        log_post = sum(terms.values())
        c2 = None
        if identifiable and Q.shape[0] <= self.c2_max_states:
            c2 = check_C2(Q, st.rates, cfg.rule)
        return Draw(
            iteration=iteration,
            Z=st.clusters.Z.copy(),
            Hstar=Hstar.copy(),
            Q=Q.copy(),
            theta=st.rates.theta.copy(),
            psi=st.rates.psi.copy(),
            alpha1=float(st.alpha1),
            p=p.copy(),
            log_post=float(log_post),
            t_tilde=count_distinct_states(Hstar),
            identifiable=identifiable,
            c2=c2,
        )

    def run(self) -> ChainOutput:
        cfg = self.config
        N, L = self.Y.shape
        output = ChainOutput(
            chain=self.chain,
            seed=cfg.seed,
            config_hash=self.config_hash,
            mode=cfg.mode,
            rule=cfg.rule,
            n_subjects=N,
            n_features=L,
        )
        st = init_state(self.Y, cfg, self.rng)
        step = self.finite_iteration
        if cfg.mode == Mode.INFINITE:
            from app.services.slice_sampler import SliceSampler

            step = SliceSampler(self).iteration

        logger.info(
            "Chain %d: %d iterations (%d burn-in, thin %d), mode=%s, rule=%s",
            self.chain, cfg.iterations, cfg.burn_in, cfg.thin, cfg.mode.value, cfg.rule.value,
        )
        iterations = tqdm(
            range(1, cfg.iterations + 1),
            desc=f"chain {self.chain}",
            disable=not settings.show_progress,
        )
        for b in iterations:
            step(st)
            if b > cfg.burn_in and (b - cfg.burn_in) % cfg.thin == 0:
                output.draws.append(self.record(st, b))
        logger.info("Chain %d finished with %d retained draws", self.chain, len(output))
        return output


def run_chain(Y: np.ndarray, config: ChainConfig, chain: int = 0, config_hash: str = "") -> ChainOutput:
    """Run one chain on its own seed substream."""
    return ChainRunner(Y, config, chain, config_hash).run()


def _run_chain_args(args) -> ChainOutput:
    return run_chain(*args)


def run_chains(
    Y: np.ndarray, config: ChainConfig, config_hash: str = "", n_jobs: Optional[int] = None
) -> List[ChainOutput]:
    """Run config.n_chains independent chains, optionally in worker processes."""
    n_jobs = settings.n_jobs if n_jobs is None else n_jobs
    jobs = [(Y, config, c, config_hash) for c in range(config.n_chains)]
    if n_jobs > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, config.n_chains)) as pool:
            return list(pool.map(_run_chain_args, jobs))
    return [_run_chain_args(job) for job in jobs]
