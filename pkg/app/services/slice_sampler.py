"""Infinite-M slice sampler over the semi-ordered stick-breaking representation.

Active states carry unordered prevalences; inactive ones are represented by
decreasing sticks drawn below the previous one until a stick falls under the
slice variable. Only the states the slice exposes are instantiated, so the
number of latent states is learned rather than fixed.

Cluster labels are updated with the cluster latent states held fixed, since
the slice density 1 / p_min couples the states of all clusters; the
collapsed split-merge and urn moves of the finite sampler are not used here.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
from scipy.integrate import quad
from scipy.special import gammaln, logsumexp

from app.core.exceptions import ConfigError, IdentifiabilityError, StickSamplingError
from app.models.schemas import PartitionPriorSpec, Rule
from app.services import priors
from app.services.identifiability import repair_q
from app.services.model import RateParams, build_gamma, loglik_from_counts
from app.services.sampler import (
    ChainState,
    _log_rising,
    draw_initial_rows,
    sample_log_weights,
    update_Q,
)
from app.services.state import ClusterState, SubjectUnits

logger = logging.getLogger(__name__)

_P_EPS = 1e-12
_GRID_POINTS = 1024
_CONCAVITY_GRID = 64
_N_AUX = 3


@dataclass
class SliceState:
    """Active/inactive split of the instantiated states plus the slice variable."""

    m_plus: int = 0
    m_zero: int = 0
    s: Optional[float] = None


# ============================================================================
# Inactive stick density
# ============================================================================

def log_stick_density(x, alpha: float, T: int) -> np.ndarray:
    """Unnormalized log density of the next inactive stick.

    log f(x) = alpha * sum_{j=1..T} (1 - x)^j / j + (alpha - 1) log x + T log(1 - x).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    j = np.arange(1, T + 1, dtype=float)
    with np.errstate(divide="ignore"):
        series = ((1 - x)[:, None] ** j[None, :] / j[None, :]).sum(axis=1)
        return alpha * series + (alpha - 1) * np.log(x) + T * np.log1p(-x)


def dlog_stick_density(x, alpha: float, T: int) -> np.ndarray:
    """Derivative of log_stick_density in x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return -alpha * (1 - (1 - x) ** T) / x + (alpha - 1) / x - T / (1 - x)


def is_concave_on(h: Callable, lower: float, upper: float, n: int = _CONCAVITY_GRID) -> bool:
    """Second differences of h on an interior grid are non-positive."""
    grid = lower + (upper - lower) * (np.arange(n) + 0.5) / n
    values = h(grid)
    if not np.all(np.isfinite(values)):
        return False
    second = np.diff(values, 2)
    return bool(np.all(second <= 1e-9 * max(1.0, float(np.abs(values).max()))))


# ============================================================================
# Adaptive rejection sampling on a bounded interval
# ============================================================================

def _hull_breaks(x: np.ndarray, hx: np.ndarray, dx: np.ndarray, lower: float, upper: float) -> np.ndarray:
    z = np.empty(x.size + 1)
    z[0], z[-1] = lower, upper
    for i in range(1, x.size):
        slope_gap = dx[i - 1] - dx[i]
        if abs(slope_gap) < 1e-12:
            z[i] = 0.5 * (x[i - 1] + x[i])
        else:
            z[i] = (hx[i] - hx[i - 1] - x[i] * dx[i] + x[i - 1] * dx[i - 1]) / slope_gap
        z[i] = min(max(z[i], x[i - 1]), x[i])
    return z


def _segment_log_mass(x, hx, dx, z) -> np.ndarray:
    out = np.full(x.size, -np.inf)
    for i in range(x.size):
        width = z[i + 1] - z[i]
        if width <= 0:
            continue
        d = dx[i]
        u_lo = hx[i] + d * (z[i] - x[i])
        u_hi = hx[i] + d * (z[i + 1] - x[i])
        if abs(d * width) < 1e-10:
            out[i] = u_lo + np.log(width)
        elif d > 0:
            out[i] = u_hi + np.log(-np.expm1(-d * width) / d)
        else:
            out[i] = u_lo + np.log(np.expm1(d * width) / d)
    return out


def _sample_segment(lo: float, hi: float, d: float, rng: np.random.Generator) -> float:
    width = hi - lo
    u = rng.random()
    if abs(d * width) < 1e-10:
        return lo + u * width
    if d > 0:
        return hi + np.log1p(-(1 - u) * -np.expm1(-d * width)) / d
    return lo + np.log1p(u * np.expm1(d * width)) / d


def ars_sample(
    h: Callable,
    dh: Callable,
    lower: float,
    upper: float,
    rng: np.random.Generator,
    max_tries: int = 200,
) -> float:
    """One draw from exp(h) on [lower, upper] for concave h, using a tangent upper hull."""
    points = list(lower + (upper - lower) * np.array([0.1, 0.5, 0.9]))
    for _ in range(max_tries):
        x = np.unique(np.asarray(points))
        hx, dx = h(x), dh(x)
        if not (np.all(np.isfinite(hx)) and np.all(np.isfinite(dx))):
            break
        z = _hull_breaks(x, hx, dx, lower, upper)
        log_mass = _segment_log_mass(x, hx, dx, z)
        total = logsumexp(log_mass)
        if not np.isfinite(total):
            break
        i = int(rng.choice(x.size, p=np.exp(log_mass - total)))
        candidate = float(_sample_segment(z[i], z[i + 1], dx[i], rng))
        candidate = min(max(candidate, lower), upper)
        envelope = hx[i] + dx[i] * (candidate - x[i])
        if np.log(rng.random()) <= float(h(candidate)[0]) - envelope:
            return candidate
        points.append(candidate)
    raise StickSamplingError(f"adaptive rejection sampler failed on ({lower:.3g}, {upper:.3g})")


def griddy_sample(h: Callable, lower: float, upper: float, rng: np.random.Generator, n: int = _GRID_POINTS) -> float:
    """Draw from exp(h) on [lower, upper] by a piecewise-constant grid approximation."""
    width = (upper - lower) / n
    grid = lower + width * (np.arange(n) + 0.5)
    values = h(grid)
    finite = np.isfinite(values)
    if not finite.any():
        raise StickSamplingError(f"stick density vanishes on ({lower:.3g}, {upper:.3g})")
    weights = np.where(finite, np.exp(values - values[finite].max()), 0.0)
    cell = rng.choice(n, p=weights / weights.sum())
    return float(grid[cell] + (rng.random() - 0.5) * width)


def _mass_below(alpha: float, T: int, s: float, prev: float) -> float:
    """P(next stick < s | next stick < prev)."""
    def h(x):
        return log_stick_density(x, alpha, T)

    def h_log_scale(v):
        # density of v = log x, free of the x^(alpha - 1) singularity at zero
        v = np.atleast_1d(np.asarray(v, dtype=float))
        x = np.exp(v)
        j = np.arange(1, T + 1, dtype=float)
        series = ((1 - x)[:, None] ** j[None, :] / j[None, :]).sum(axis=1)
        with np.errstate(divide="ignore"):
            return alpha * series + alpha * v + T * np.log1p(-x)

    v_grid = np.linspace(np.log(s) - 20.0, np.log(s), 64)
    x_grid = np.linspace(s, prev, 66)[1:-1]
    ref = max(float(np.max(h_log_scale(v_grid))), float(np.max(h(x_grid))))
    if not np.isfinite(ref):
        raise StickSamplingError("stick density is not finite near the slice")
    try:
        below, _ = quad(lambda v: float(np.exp(h_log_scale(v)[0] - ref)), -np.inf, np.log(s), limit=200)
        above, _ = quad(lambda x: float(np.exp(h(x)[0] - ref)), s, prev, limit=200)
    except (ValueError, OverflowError, ZeroDivisionError) as exc:
        raise StickSamplingError(f"stick mass integration failed: {exc}") from exc
    total = below + above
    if not np.isfinite(total) or total <= 0:
        raise StickSamplingError("stick mass integration returned no mass")
    return below / total


def sample_inactive_stick(
    prev: float, s: float, alpha: float, T: int, rng: np.random.Generator
) -> Optional[float]:
    """Next decreasing stick below ``prev``; None once it falls under the slice ``s``."""
    if prev <= s:
        return None
    if rng.random() < _mass_below(alpha, T, s, prev):
        return None

    def h(x):
        return log_stick_density(x, alpha, T)

    def dh(x):
        return dlog_stick_density(x, alpha, T)

    upper = min(prev, 1 - _P_EPS)
    if is_concave_on(h, s, upper):
        try:
            return ars_sample(h, dh, s, upper, rng)
        except StickSamplingError:
            logger.debug("ARS failed on (%.3g, %.3g); using grid", s, upper)
    return griddy_sample(h, s, upper, rng)


def sample_inactive_sticks(
    s: float, alpha: float, T: int, limit: int, rng: np.random.Generator
) -> List[float]:
    """Decreasing sticks starting below 1 until one falls under s, at most ``limit``."""
    sticks: List[float] = []
    prev = 1.0
    while len(sticks) < limit:
        x = sample_inactive_stick(prev, s, alpha, T, rng)
        if x is None:
            break
        sticks.append(x)
        prev = x
    return sticks


# ============================================================================
# Cluster labels under the slice
# ============================================================================

def slice_min(Hstar: np.ndarray, p: np.ndarray) -> float:
    """Smallest prevalence among states some cluster uses, or 1 if none is used."""
    H = np.atleast_2d(Hstar)
    active = H.any(axis=0) if H.shape[0] else np.zeros(p.size, dtype=bool)
    return float(p[active].min()) if active.any() else 1.0


def log_unseen_row_ratio(s: float, alpha: float, T: int) -> float:
    """log P(a new row is zero on every stick below s), for T existing rows.

    Integrates the sticks below the slice out of the joint:
    -alpha * int_0^s (1 - x)^T dx.
    """
    return float(-alpha * -np.expm1((T + 1) * np.log1p(-s)) / (T + 1))


def gibbs_update_Z_sliced(
    state: ClusterState,
    Q: np.ndarray,
    p: np.ndarray,
    rates: RateParams,
    s: Optional[float],
    alpha: float,
    spec: PartitionPriorSpec,
    units: SubjectUnits,
    rng: np.random.Generator,
    n_aux: int = _N_AUX,
) -> ClusterState:
    """Urn sweep over must-link units with cluster latent states held fixed.

    Existing clusters keep their states and score a unit by its conditional
    likelihood. A new cluster is scored through ``n_aux`` candidate state
    rows drawn from Bernoulli(p) (a unit leaving a singleton cluster keeps
    its old row as the first candidate), each weighted by the change in the
    slice density 1 / p_min and by the probability that the new row is zero
    on the uninstantiated sticks below s.
    """
    N = state.N
    g = spec.gamma
    gamma_rows = build_gamma(state.Hstar, Q, Rule.DINO)
    for u in range(units.count):
        members = units.members[u]
        u1, u0, size = units.n1[u], units.n0[u], int(units.size[u])
        c = int(state.Z[members[0]])

        aux = (rng.random((n_aux, p.size)) < p[None, :]).astype(np.uint8)
        state.n1[c] -= u1
        state.n0[c] -= u0
        state.sizes[c] -= size
        if state.sizes[c] == 0:
            aux[0] = state.Hstar[c]
            state.Z[members] = -1
            state.drop_cluster(c)
            gamma_rows = np.delete(gamma_rows, c, axis=0)

        T = state.T
        log_w = np.empty(T + n_aux)
        log_w[:T] = _log_rising(state.sizes, size, g) + loglik_from_counts(u1, u0, gamma_rows, rates)
        aux_gamma = build_gamma(aux, Q, Rule.DINO)
        log_w[T:] = (
            priors.log_new_cluster_ratio(T, N, spec)
            + gammaln(g + size) - gammaln(g)
            - np.log(n_aux)
            + loglik_from_counts(u1, u0, aux_gamma, rates)
        )
        if s is not None:
            base_min = slice_min(state.Hstar, p)
            for a in range(n_aux):
                on = aux[a] > 0
                new_min = min(base_min, float(p[on].min())) if on.any() else base_min
                if s >= new_min:
                    log_w[T + a] = -np.inf
                else:
                    log_w[T + a] += np.log(base_min) - np.log(new_min)
            log_w[T:] += log_unseen_row_ratio(s, alpha, T)

        choice = sample_log_weights(log_w, rng)
        if choice >= T:
            a = choice - T
            state.add_cluster(u1.copy(), u0.copy(), size, aux[a])
            gamma_rows = np.vstack([gamma_rows, aux_gamma[a][None, :]])
            choice = T
        else:
            state.n1[choice] += u1
            state.n0[choice] += u0
            state.sizes[choice] += size
        state.Z[members] = choice
    return state


# ============================================================================
# Latent state updates under the slice
# ============================================================================

def update_Hstar_sliced(
    clusters: ClusterState,
    Q: np.ndarray,
    p: np.ndarray,
    rates: RateParams,
    s: Optional[float],
    rng: np.random.Generator,
    rule: Rule = Rule.DINO,
) -> ClusterState:
    """Elementwise full conditionals of H*, weighted by 1 / p_min over active states.

    With a slice s, any configuration whose smallest active prevalence is not
    above s has zero weight, so states with p_m < s stay switched off.
    """
    H = clusters.Hstar.copy()
    T, M = H.shape
    with np.errstate(divide="ignore"):
        log_p, log1m_p = np.log(p), np.log1p(-p)
    col_count = H.sum(axis=0).astype(np.int64)
    for t in range(T):
        col_count -= H[t]
        for m in range(M):
            rows = np.repeat(H[t][None, :], 2, axis=0)
            rows[0, m], rows[1, m] = 0, 1
            gamma = build_gamma(rows, Q, rule)
            log_w = np.array([log1m_p[m], log_p[m]]) + loglik_from_counts(
                clusters.n1[t], clusters.n0[t], gamma, rates
            )
            if s is not None:
                for v in (0, 1):
                    active = (col_count > 0) | (rows[v] > 0)
                    p_min = float(p[active].min()) if active.any() else 1.0
                    log_w[v] = log_w[v] - np.log(p_min) if s < p_min else -np.inf
            H[t, m] = sample_log_weights(log_w, rng)
        col_count += H[t]
    clusters.Hstar = H
    return clusters


# ============================================================================
# Driver
# ============================================================================

class SliceSampler:
    """One iteration of the infinite-M sampler, driven by a ChainRunner."""

    def __init__(self, runner):
        cfg = runner.config
        if cfg.rule != Rule.DINO:
            raise ConfigError("mode=infinite supports rule=dino only")
        if cfg.fixed_q is not None:
            raise ConfigError("a fixed Q fixes the number of states; use mode=finite")
        self.runner = runner
        self.config = cfg
        self.rng = runner.rng
        self.n_features = runner.Y.shape[1]
        self.state = SliceState(m_plus=cfg.m_dagger, m_zero=0, s=None)
        self._cap_warned = False
        self._pad_warned = False

    def _capacity(self, m_plus: int) -> int:
        # M* <= max_states and 2 M* < L
        return max(0, min(self.config.max_states, (self.n_features - 1) // 2) - m_plus)

    def _pad(self, st: ChainState, sticks: List[float]) -> int:
        """Append Q rows, prevalences and zero H* columns for the largest sticks that fit.

        Sticks are decreasing, so when the padded Q cannot be repaired into
        the constraint set the smallest sticks are dropped first, as with the
        capacity cap. Returns the number of sticks padded.
        """
        m_plus = st.Q.shape[0]
        for k in range(len(sticks), 0, -1):
            rows = draw_initial_rows(k, st.feature_mask, self.config.p_init, self.rng)
            candidate = np.vstack([st.Q, rows]).astype(np.uint8)
            frozen = np.zeros(candidate.shape[0], dtype=bool)
            frozen[:m_plus] = True
            try:
                st.Q = repair_q(candidate, self.rng, frozen_rows=frozen)
            except IdentifiabilityError as exc:
                logger.debug("Padding %d inactive states failed: %s", k, exc)
                continue
            if k < len(sticks) and not self._pad_warned:
                logger.warning("Q repair dropped %d of %d inactive sticks", len(sticks) - k, len(sticks))
                self._pad_warned = True
            st.p = np.concatenate([st.p, np.asarray(sticks[:k])])
            T = st.clusters.T
            st.clusters.Hstar = np.hstack(
                [st.clusters.Hstar, np.zeros((T, k), dtype=np.uint8)]
            )
            return k
        if sticks and not self._pad_warned:
            logger.warning("Q repair dropped all %d inactive sticks", len(sticks))
            self._pad_warned = True
        return 0

    def iteration(self, st: ChainState) -> None:
        runner, rng = self.runner, self.rng
        s = self.state.s
        rates = runner._likelihood_rates(st.rates)

        st.clusters = gibbs_update_Z_sliced(
            st.clusters, st.Q, st.p, rates, s, st.alpha1,
            self.config.partition_prior, st.units, rng,
        )
        st.clusters = update_Hstar_sliced(st.clusters, st.Q, st.p, rates, s, rng)
        runner._update_rates_and_alpha(st)
        if st.Q.shape[0] > 0 and not self.config.prior_only:
            st.Q = update_Q(st.clusters, st.Q, runner._likelihood_rates(st.rates), rng, Rule.DINO)

        active = st.clusters.Hstar.any(axis=0)
        st.Q = st.Q[active]
        st.clusters.Hstar = st.clusters.Hstar[:, active]
        T = st.clusters.T
        counts = st.clusters.Hstar.sum(axis=0)
        st.p = np.clip(rng.beta(counts, 1 + T - counts), _P_EPS, 1 - _P_EPS)
        m_plus = int(active.sum())

        s = float(rng.uniform(0, st.p.min())) if m_plus else float(rng.random())
        capacity = self._capacity(m_plus)
        try:
            sticks = sample_inactive_sticks(s, st.alpha1, T, capacity, rng)
        except StickSamplingError as exc:
            logger.warning("Inactive stick sampling failed, no padding this iteration: %s", exc)
            sticks = []
        if len(sticks) == capacity and not self._cap_warned:
            logger.warning("Instantiated states hit the cap of %d; inactive sticks truncated", m_plus + capacity)
            self._cap_warned = True
        self._pad(st, sticks)
        self.state = SliceState(m_plus=m_plus, m_zero=st.Q.shape[0] - m_plus, s=s)


def slice_sampler_step(runner, slice_state: SliceState, st: ChainState) -> SliceState:
    """Advance ``st`` by one infinite-M iteration starting from ``slice_state``."""
    sampler = SliceSampler(runner)
    sampler.state = slice_state
    sampler.iteration(st)
    return sampler.state
