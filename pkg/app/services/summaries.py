"""Posterior summaries pooled over retained draws of one or more chains."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.exceptions import DataError
from app.services.sampler import ChainOutput, Draw
from app.services.state import compact_labels, labels_to_blocks

logger = logging.getLogger(__name__)

Outputs = Union[ChainOutput, Sequence[ChainOutput]]


def iter_draws(outputs: Outputs) -> Iterator[Tuple[int, Draw]]:
    """(chain, draw) pairs in (chain, iteration) order."""
    if isinstance(outputs, ChainOutput):
        outputs = [outputs]
    for output in sorted(outputs, key=lambda o: o.chain):
        for draw in output.draws:
            yield output.chain, draw


def _all_draws(outputs: Outputs) -> List[Tuple[int, Draw]]:
    draws = list(iter_draws(outputs))
    if not draws:
        raise DataError("no retained draws to summarize")
    return draws


def _one_hot(Z: np.ndarray) -> np.ndarray:
    Z = compact_labels(Z)
    A = np.zeros((Z.size, int(Z.max()) + 1))
    A[np.arange(Z.size), Z] = 1.0
    return A


# ============================================================================
# Partitions
# ============================================================================

def coclustering(outputs: Outputs) -> np.ndarray:
    """Fraction of retained draws in which each pair of subjects shares a cluster."""
    draws = _all_draws(outputs)
    N = draws[0][1].Z.size
    total = np.zeros((N, N))
    for _, draw in draws:
        A = _one_hot(draw.Z)
        total += A @ A.T
    return total / len(draws)


@dataclass
class LSClustering:
    """Least-squares partition and where it came from."""

    Z: np.ndarray
    loss: float
    chain: int
    iteration: int
    losses: np.ndarray = field(repr=False, default=None)


def ls_loss(Z: np.ndarray, pihat: np.ndarray) -> float:
    """Squared distance between a partition's co-membership matrix and pihat."""
    A = _one_hot(Z)
    return float(np.sum((A @ A.T - pihat) ** 2))


def ls_clustering(outputs: Outputs, pihat: Optional[np.ndarray] = None) -> LSClustering:
    """Retained draw closest to the co-clustering matrix; ties go to the earliest draw."""
    draws = _all_draws(outputs)
    if pihat is None:
        pihat = coclustering(outputs)
    losses = np.array([ls_loss(draw.Z, pihat) for _, draw in draws])
    best = int(np.argmin(losses))
    chain, draw = draws[best]
    logger.info("LS clustering: chain %d iteration %d, loss %.4f", chain, draw.iteration, losses[best])
    return LSClustering(
        Z=compact_labels(draw.Z),
        loss=float(losses[best]),
        chain=chain,
        iteration=draw.iteration,
        losses=losses,
    )


@dataclass
class ScientificPartition:
    """Clusters merged by identical latent states."""

    Z: np.ndarray
    states: np.ndarray

    @property
    def T_tilde(self) -> int:
        return self.states.shape[0]

    def blocks(self) -> List[np.ndarray]:
        return labels_to_blocks(self.Z)


def merge_scientific(Z: np.ndarray, Hstar: np.ndarray) -> ScientificPartition:
    """Merge clusters whose latent state vectors coincide."""
    Z = np.asarray(Z, dtype=np.int64)
    H = np.atleast_2d(np.asarray(Hstar))
    if Z.size and Z.max() >= H.shape[0]:
        raise DataError(f"labels reach {Z.max()} but Hstar has {H.shape[0]} rows")
    subject_states = H[Z]
    if H.shape[1] == 0:
        return ScientificPartition(Z=np.zeros(Z.size, dtype=np.int64), states=np.zeros((1, 0), dtype=H.dtype))
    _, labels = np.unique(subject_states, axis=0, return_inverse=True)
    labels = compact_labels(np.asarray(labels).ravel())
    states = np.stack([subject_states[np.flatnonzero(labels == k)[0]] for k in range(labels.max() + 1)])
    return ScientificPartition(Z=labels, states=states)


def partition_to_blocks(Z: np.ndarray) -> List[List[int]]:
    """Blocks of subject ids (0-based), ordered by first member."""
    return [block.tolist() for block in labels_to_blocks(Z)]


@dataclass
class CountSummary:
    """Empirical distribution of an integer-valued quantity."""

    values: np.ndarray
    pmf: Dict[int, float]
    median: float
    ci: Tuple[float, float]


def summarize_counts(values: Iterable[int], level: float = 0.95) -> CountSummary:
    values = np.asarray(list(values), dtype=np.int64)
    if values.size == 0:
        raise DataError("no values to summarize")
    support, counts = np.unique(values, return_counts=True)
    tail = (1 - level) / 2
    return CountSummary(
        values=values,
        pmf={int(k): float(c) / values.size for k, c in zip(support, counts)},
        median=float(np.median(values)),
        ci=(float(np.quantile(values, tail)), float(np.quantile(values, 1 - tail))),
    )


def posterior_T_tilde(outputs: Outputs, level: float = 0.95) -> CountSummary:
    """Posterior of the number of scientific clusters."""
    return summarize_counts((draw.t_tilde for _, draw in _all_draws(outputs)), level)


# ============================================================================
# Q and latent states
# ============================================================================

def coactivation(Q: np.ndarray) -> np.ndarray:
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    return Q.T @ Q


def select_Q_ls(outputs: Outputs) -> Tuple[np.ndarray, int, int]:
    """Q of the draw whose co-activation Q'Q is closest (Frobenius) to the posterior mean.

    Returns (Q, chain, iteration); ties go to the earliest draw.
    """
    draws = _all_draws(outputs)
    mats = [coactivation(draw.Q) for _, draw in draws]
    mean = np.mean(mats, axis=0)
    distances = np.array([np.linalg.norm(m - mean, "fro") for m in mats])
    best = int(np.argmin(distances))
    chain, draw = draws[best]
    logger.info("Selected Q from chain %d iteration %d (distance %.4f)", chain, draw.iteration, distances[best])
    return draw.Q.copy(), chain, draw.iteration


def _subject_states(draw: Draw, width: int) -> np.ndarray:
    H = draw.Hstar[draw.Z]
    if H.shape[1] < width:
        H = np.hstack([H, np.zeros((H.shape[0], width - H.shape[1]), dtype=H.dtype)])
    return H


@dataclass
class StateMarginals:
    """Per-subject probability that each latent state is active."""

    probabilities: np.ndarray
    conditioned: bool = False
    n_draws: int = 0


def state_marginals(outputs: Outputs, conditioned: bool = False) -> StateMarginals:
    """Empirical P(eta_im = 1) over retained draws.

    Columns follow the stored (relabeled) state order; draws with fewer states
    are padded with inactive columns. ``conditioned`` records that the draws
    come from a refit with a fixed Q.
    """
    draws = _all_draws(outputs)
    width = max(draw.Q.shape[0] for _, draw in draws)
    total = sum(_subject_states(draw, width).astype(float) for _, draw in draws)
    return StateMarginals(probabilities=total / len(draws), conditioned=conditioned, n_draws=len(draws))


def pattern_code(H: np.ndarray) -> np.ndarray:
    """Integer code of each row; state m is bit m."""
    H = np.atleast_2d(np.asarray(H, dtype=np.int64))
    return H @ (1 << np.arange(H.shape[1], dtype=np.int64))


def pattern_probabilities(outputs: Outputs, top: int = 3) -> List[List[Tuple[int, float]]]:
    """For each subject, the ``top`` most probable full latent patterns as (code, probability)."""
    draws = _all_draws(outputs)
    width = max(draw.Q.shape[0] for _, draw in draws)
    codes = np.stack([pattern_code(_subject_states(draw, width)) for _, draw in draws])
    result = []
    for i in range(codes.shape[1]):
        values, counts = np.unique(codes[:, i], return_counts=True)
        order = np.lexsort((values, -counts))[:top]
        result.append([(int(values[k]), counts[k] / len(draws)) for k in order])
    return result


def state_count_distribution(outputs: Outputs) -> np.ndarray:
    """N x (M_max + 1) posterior pmf of the number of active states per subject."""
    draws = _all_draws(outputs)
    width = max(draw.Q.shape[0] for _, draw in draws)
    N = draws[0][1].Z.size
    pmf = np.zeros((N, width + 1))
    for _, draw in draws:
        counts = _subject_states(draw, width).sum(axis=1)
        pmf[np.arange(N), counts] += 1
    return pmf / len(draws)
