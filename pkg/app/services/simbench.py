"""Simulation designs, data generators and replication studies."""
import itertools
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import IdentifiabilityError, RLCMError
from app.models.schemas import BenchRecord, BenchRow, ChainConfig, Method, Mode, Rule, SimDesign
from app.services.baselines import bayesian_lca, hclust_hamming
from app.services.diagnostics import adjusted_rand_index
from app.services.identifiability import q_in_constraint_set
from app.services.model import build_gamma, pattern_matrix
from app.services.sampler import run_chains
from app.services.summaries import ls_clustering

logger = logging.getLogger(__name__)

MAX_SWAPS = 100_000
MAX_REDRAWS = 10_000


# ============================================================================
# Population fractions
# ============================================================================

def rare_state_pi0() -> List[float]:
    """Weights 1/6 on the four patterns without state 3, 1/12 on the four with it."""
    return [1 / 6] * 4 + [1 / 12] * 4


def pattern_pi(kind: str, M: int = 3) -> List[float]:
    """'a' is uniform over the 2^M patterns; 'b' puts twice the weight on the first half."""
    K = 2 ** M
    if kind == "a":
        return [1.0 / K] * K
    elif kind == "b":
        weights = np.array([2.0] * (K // 2) + [1.0] * (K - K // 2))
        return (weights / weights.sum()).tolist()
    else:
        raise ValueError(f"Unsupported population fraction design: {kind}")


def resolve_pi0(label: str, M: int) -> List[float]:
    """Population fractions by name (rare_state, pi_a, pi_b) or as comma-separated weights."""
    key = label.strip().lower()
    if key == "rare_state":
        if M != 3:
            raise ValueError("the rare_state fractions are defined for M=3")
        return rare_state_pi0()
    if key in ("a", "pi_a"):
        return pattern_pi("a", M)
    if key in ("b", "pi_b"):
        return pattern_pi("b", M)
    weights = np.array([float(w) for w in key.split(",")])
    return (weights / weights.sum()).tolist()


# ============================================================================
# Generators
# ============================================================================

def gen_Q(M: int, L: int, s: float, rng: np.random.Generator, max_swaps: int = MAX_SWAPS) -> np.ndarray:
    """Bernoulli(s) Q, then random within-row swaps until it lies in the constraint set.

    Swaps keep every row's number of ones, so rows with fewer than three ones
    are redrawn first, outside the swap budget.
    """
    if 2 * M > L:
        raise IdentifiabilityError(f"cannot generate an identifiable Q with M={M}, L={L}")
    Q = (rng.random((M, L)) < s).astype(np.uint8)
    for _ in range(MAX_REDRAWS):
        short = np.flatnonzero(Q.sum(axis=1) < 3)
        if short.size == 0:
            break
        Q[short] = (rng.random((short.size, L)) < s).astype(np.uint8)
    if np.any(Q.sum(axis=1) < 3):
        raise IdentifiabilityError(f"rows kept fewer than three ones after {MAX_REDRAWS} redraws")

    for _ in range(max_swaps):
        if q_in_constraint_set(Q):
            return Q
        m = int(rng.integers(M))
        ones, zeros = np.flatnonzero(Q[m] == 1), np.flatnonzero(Q[m] == 0)
        if ones.size == 0 or zeros.size == 0:
            continue
        i, j = rng.choice(ones), rng.choice(zeros)
        Q[m, i], Q[m, j] = 0, 1
    if q_in_constraint_set(Q):
        return Q
    raise IdentifiabilityError(f"Q repair did not succeed within {max_swaps} swaps")


def design_Q(design: SimDesign, rng: np.random.Generator) -> np.ndarray:
    """Generating Q for a design, with all-zero columns appended for irrelevant features."""
    Q = gen_Q(design.M, design.L, design.s, rng)
    if design.n_irrelevant:
        Q = np.hstack([Q, np.zeros((design.M, design.n_irrelevant), dtype=np.uint8)])
    return Q


def gen_data(
    design: SimDesign, Q: np.ndarray, rng: np.random.Generator, rule: Rule = Rule.DINO
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Y, H, Z) with latent patterns drawn from pi0; Z is the index of each subject's pattern."""
    patterns = pattern_matrix(design.M)
    Z = rng.choice(patterns.shape[0], size=design.N, p=np.asarray(design.pi0))
    H = patterns[Z]
    gamma = build_gamma(H, Q, rule).astype(bool)
    lam = np.where(gamma, design.theta0, design.psi0)
    Y = (rng.random(lam.shape) < lam).astype(np.uint8)
    return Y, H, Z.astype(np.int64)


def replication_rng(seed: int, cell: int, replication: int) -> np.random.Generator:
    """Independent stream per (cell, replication)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(cell, replication)))


def expand_grid(
    L: Sequence[int],
    N: Sequence[int],
    theta0: Sequence[float],
    psi0: Sequence[float],
    pi0: Sequence[str],
    s: Sequence[float],
    M: int = 3,
    R: int = 1,
    seed: int = 0,
    n_irrelevant: int = 0,
) -> List[SimDesign]:
    """Every combination of the axes, in (L, N, theta0, psi0, pi0, s) order."""
    designs = []
    for l_, n_, t_, p_, pi_, s_ in itertools.product(L, N, theta0, psi0, pi0, s):
        designs.append(
            SimDesign(
                L=l_, N=n_, theta0=t_, psi0=p_, pi0=resolve_pi0(pi_, M), pi0_label=pi_,
                s=s_, M=M, R=R, seed=seed, n_irrelevant=n_irrelevant,
            )
        )
    return designs


# ============================================================================
# Replication study
# ============================================================================

def fit_method(
    method: Method,
    Y: np.ndarray,
    n_classes: int,
    chain_config: ChainConfig,
    rng: np.random.Generator,
    lca_classes: int = 8,
    lca_iterations: int = 2000,
) -> np.ndarray:
    """Partition estimate of one method on one data set."""
    if method == Method.RLCM:
        return ls_clustering(run_chains(Y, chain_config)).Z
    elif method == Method.SUBSET:
        L = Y.shape[1]
        config = chain_config.model_copy(
            update={
                "fixed_q": np.eye(L, dtype=int).tolist(),
                "m_dagger": L,
                "state_prior": chain_config.state_prior.model_copy(update={"M": L}),
                "mode": Mode.FINITE,
                "strict": False,
            }
        )
        return ls_clustering(run_chains(Y, config)).Z
    elif method == Method.HC:
        return hclust_hamming(Y, min(n_classes, Y.shape[0]))
    elif method == Method.LCA:
        return bayesian_lca(Y, lca_classes, lca_iterations, rng).labels
    else:
        raise ValueError(f"Unsupported method: {method}")


def run_replication(
    design: SimDesign,
    cell: int,
    replication: int,
    methods: Iterable[Method],
    chain_config: ChainConfig,
    lca_classes: int = 8,
    lca_iterations: int = 2000,
) -> List[BenchRecord]:
    rng = replication_rng(design.seed, cell, replication)
    records = []
    try:
        Q = design_Q(design, rng)
    except IdentifiabilityError as exc:
        logger.warning("Cell %d replication %d: no generating Q: %s", cell, replication, exc)
        for method in methods:
            key = dict(design.cell_key(), method=method, replication=replication)
            records.append(BenchRecord(**key, error=str(exc)))
        return records
    Y, _, Z_true = gen_data(design, Q, rng)
    n_classes = int(np.unique(Z_true).size)
    config = chain_config.model_copy(update={"seed": int(rng.integers(2 ** 31))})

    for method in methods:
        key = dict(design.cell_key(), method=method, replication=replication)
        try:
            Z_hat = fit_method(method, Y, n_classes, config, rng, lca_classes, lca_iterations)
            records.append(BenchRecord(**key, ari=adjusted_rand_index(Z_true, Z_hat)))
        except (RLCMError, ValueError) as exc:
            logger.warning("Cell %d replication %d method %s failed: %s", cell, replication, method.value, exc)
            records.append(BenchRecord(**key, error=str(exc)))
    return records


def aggregate_records(records: Iterable[BenchRecord]) -> List[BenchRow]:
    """Mean and sd of aRI per (cell, method), failures counted separately."""
    groups: Dict[tuple, List[BenchRecord]] = {}
    for record in records:
        key = (record.L, record.N, record.theta0, record.psi0, record.pi0, record.s, record.method)
        groups.setdefault(key, []).append(record)

    rows = []
    for (L, N, theta0, psi0, pi0, s, method), group in groups.items():
        values = np.array([r.ari for r in group if r.ari is not None])
        rows.append(
            BenchRow(
                L=L, N=N, theta0=theta0, psi0=psi0, pi0=pi0, s=s, method=method,
                n_ok=int(values.size),
                n_failed=len(group) - int(values.size),
                mean_ari=float(values.mean()) if values.size else None,
                sd_ari=float(values.std(ddof=1)) if values.size > 1 else None,
            )
        )
    return rows


def run_replication_study(
    designs: Sequence[SimDesign],
    methods: Sequence[Method],
    chain_config: ChainConfig,
    lca_classes: int = 8,
    lca_iterations: int = 2000,
    replications: Optional[int] = None,
) -> Tuple[List[BenchRecord], List[BenchRow]]:
    """Every method on R replications of every design; returns raw records and the aggregate table."""
    records: List[BenchRecord] = []
    for cell, design in enumerate(designs):
        R = design.R if replications is None else replications
        logger.info("Cell %d/%d %s: %d replications", cell + 1, len(designs), design.cell_key(), R)
        for r in range(R):
            records.extend(
                run_replication(design, cell, r, methods, chain_config, lca_classes, lca_iterations)
            )
    return records, aggregate_records(records)
