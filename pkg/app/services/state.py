"""Partition bookkeeping: cluster labels, latent states and sufficient counts."""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from app.core.exceptions import DataError, DimensionError
from app.services.model import cluster_counts


def compact_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel to 0..T-1 in order of first appearance."""
    labels = np.asarray(labels).ravel()
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inverse].astype(np.int64)


def labels_to_blocks(labels: np.ndarray) -> List[np.ndarray]:
    """Blocks of subject indices, ordered by first member."""
    labels = compact_labels(labels)
    return [np.flatnonzero(labels == k) for k in range(labels.max() + 1 if labels.size else 0)]


@dataclass
class ClusterState:
    """Cluster labels Z, cluster latent states H* and per-cluster counts.

    Rows of Hstar, n1, n0 and sizes are indexed by cluster label; every
    cluster is nonempty and labels are 0..T-1.
    """

    Z: np.ndarray
    Hstar: np.ndarray
    n1: np.ndarray
    n0: np.ndarray
    sizes: np.ndarray

    @classmethod
    def from_labels(
        cls, Y: np.ndarray, Z: np.ndarray, Hstar: Optional[np.ndarray] = None, M: int = 0
    ) -> "ClusterState":
        Y = np.asarray(Y)
        Z = compact_labels(Z)
        if Z.size != Y.shape[0]:
            raise DimensionError(f"{Z.size} labels for {Y.shape[0]} subjects")
        T = int(Z.max()) + 1
        if Hstar is None:
            Hstar = np.zeros((T, M), dtype=np.uint8)
        Hstar = np.atleast_2d(np.asarray(Hstar, dtype=np.uint8))
        if Hstar.shape[0] != T:
            raise DimensionError(f"Hstar has {Hstar.shape[0]} rows for {T} clusters")
        n1, n0 = cluster_counts(Y, Z, T)
        return cls(Z=Z, Hstar=Hstar.copy(), n1=n1, n0=n0, sizes=np.bincount(Z, minlength=T))

    @property
    def N(self) -> int:
        return self.Z.size

    @property
    def T(self) -> int:
        return self.sizes.size

    @property
    def M(self) -> int:
        return self.Hstar.shape[1]

    def H(self) -> np.ndarray:
        """Subject-level latent states."""
        return self.Hstar[self.Z]

    def blocks(self) -> List[np.ndarray]:
        return [np.flatnonzero(self.Z == k) for k in range(self.T)]

    def copy(self) -> "ClusterState":
        return ClusterState(
            Z=self.Z.copy(),
            Hstar=self.Hstar.copy(),
            n1=self.n1.copy(),
            n0=self.n0.copy(),
            sizes=self.sizes.copy(),
        )

    def check_counts(self, Y: np.ndarray) -> bool:
        """Incremental counts agree with a recount from (Y, Z)."""
        n1, n0 = cluster_counts(Y, self.Z, self.T)
        return (
            np.array_equal(n1, self.n1)
            and np.array_equal(n0, self.n0)
            and np.array_equal(np.bincount(self.Z, minlength=self.T), self.sizes)
            and bool(np.all(self.sizes > 0))
        )

    def add_cluster(self, n1: np.ndarray, n0: np.ndarray, size: int, eta: Optional[np.ndarray] = None) -> int:
        """Append an empty-labelled cluster with the given counts; returns its label."""
        row = np.zeros(self.M, dtype=np.uint8) if eta is None else np.asarray(eta, dtype=np.uint8)
        self.Hstar = np.vstack([self.Hstar, row[None, :]])
        self.n1 = np.vstack([self.n1, n1[None, :]])
        self.n0 = np.vstack([self.n0, n0[None, :]])
        self.sizes = np.append(self.sizes, size)
        return self.T - 1

    def drop_cluster(self, k: int) -> None:
        """Remove cluster k (which must hold no subject) and shift higher labels down."""
        if np.any(self.Z == k):
            raise DataError(f"cluster {k} still has members")
        self.Hstar = np.delete(self.Hstar, k, axis=0)
        self.n1 = np.delete(self.n1, k, axis=0)
        self.n0 = np.delete(self.n0, k, axis=0)
        self.sizes = np.delete(self.sizes, k)
        self.Z[self.Z > k] -= 1


@dataclass
class SubjectUnits:
    """Subjects grouped into must-link units that always move together."""

    of: np.ndarray
    members: List[np.ndarray] = field(default_factory=list)
    n1: np.ndarray = None
    n0: np.ndarray = None
    size: np.ndarray = None

    @classmethod
    def build(cls, Y: np.ndarray, partial: Optional[np.ndarray] = None) -> "SubjectUnits":
        """Singleton units, or the blocks of a must-link partition."""
        Y = np.asarray(Y)
        N = Y.shape[0]
        of = np.arange(N, dtype=np.int64) if partial is None else compact_labels(partial)
        if of.size != N:
            raise DimensionError(f"partial clustering has {of.size} labels for {N} subjects")
        U = int(of.max()) + 1
        n1, n0 = cluster_counts(Y, of, U)
        members = [np.flatnonzero(of == u) for u in range(U)]
        return cls(of=of, members=members, n1=n1, n0=n0, size=np.bincount(of, minlength=U))

    @property
    def count(self) -> int:
        return len(self.members)

    def cluster_of(self, Z: np.ndarray, u: int) -> int:
        return int(Z[self.members[u][0]])
