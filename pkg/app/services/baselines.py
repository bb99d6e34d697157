"""Comparison clusterers: Hamming-distance hierarchical clustering and Bayesian LCA."""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

from app.core.exceptions import DataError
from app.services.model import as_binary
from app.services.state import compact_labels

logger = logging.getLogger(__name__)


def hclust_hamming(Y: np.ndarray, k: int) -> np.ndarray:
    """Complete-linkage clustering on Hamming distances, cut at k clusters."""
    Y = as_binary(Y, "Y")
    N = Y.shape[0]
    if not 1 <= k <= N:
        raise DataError(f"need 1 <= k <= N, got k={k}, N={N}")
    if N == 1:
        return np.zeros(1, dtype=np.int64)
    tree = linkage(pdist(Y.astype(bool), metric="hamming"), method="complete")
    labels = cut_tree(tree, n_clusters=k).ravel()
    return compact_labels(labels)


@dataclass
class LCAResult:
    """Plug-in partition of the unrestricted latent class model plus its trace."""

    labels: np.ndarray
    weights: np.ndarray
    probabilities: np.ndarray
    loglik: np.ndarray = field(repr=False, default=None)


def _lca_loglik_matrix(Y: np.ndarray, weights: np.ndarray, probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return (
        log_w[None, :]
        + Y @ np.log(probs).T
        + (1 - Y) @ np.log1p(-probs).T
    )


def bayesian_lca(
    Y: np.ndarray,
    K: int,
    iterations: int,
    rng: np.random.Generator,
    burn_in: Optional[int] = None,
) -> LCAResult:
    """Gibbs sampler for a K-class latent class model.

    Class weights get a symmetric Dirichlet(1) prior and response probabilities
    independent Beta(1, 1) priors. Subjects are labelled by the argmax of their
    class posterior under the retained draw with the highest log-likelihood.
    """
    Y = as_binary(Y, "Y").astype(float)
    N, L = Y.shape
    if K < 1:
        raise DataError(f"need K >= 1 classes, got {K}")
    if iterations < 1:
        raise DataError("LCA needs at least one iteration")
    burn_in = iterations // 2 if burn_in is None else burn_in

    z = rng.integers(0, K, size=N)
    best = (-np.inf, None, None)
    trace = []
    for it in range(iterations):
        onehot = np.zeros((N, K))
        onehot[np.arange(N), z] = 1.0
        sizes = onehot.sum(axis=0)
        ones = onehot.T @ Y
        weights = rng.dirichlet(1.0 + sizes)
        probs = np.clip(rng.beta(1.0 + ones, 1.0 + sizes[:, None] - ones), 1e-12, 1 - 1e-12)

        log_post = _lca_loglik_matrix(Y, weights, probs)
        norm = logsumexp(log_post, axis=1, keepdims=True)
        cumulative = np.cumsum(np.exp(log_post - norm), axis=1)
        u = rng.random(N)[:, None]
        z = np.minimum((cumulative < u).sum(axis=1), K - 1)

        if it >= burn_in:
            ll = float(norm.sum())
            trace.append(ll)
            if ll > best[0]:
                best = (ll, weights, probs)

    if best[1] is None:
        best = (float(norm.sum()), weights, probs)
    _, weights, probs = best
    labels = np.argmax(_lca_loglik_matrix(Y, weights, probs), axis=1)
    logger.debug("LCA with K=%d: %d occupied classes", K, np.unique(labels).size)
    return LCAResult(
        labels=compact_labels(labels),
        weights=weights,
        probabilities=probs,
        loglik=np.asarray(trace),
    )
