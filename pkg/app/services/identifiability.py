"""Identifiability rules for Q and the constraint set used by the sampler.

A Q matrix (M x L) is in the constraint set when every state owns at least
two singleton columns (columns equal to e_m) and loads on at least three
features overall; up to row and column permutations this is the block form
[I; I; Q~] with no empty row in Q~.
"""
import logging
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np

from config import settings
from app.core.exceptions import IdentifiabilityError
from app.models.schemas import Rule, ValidationResult
from app.services.model import RateParams, build_gamma, pattern_matrix

logger = logging.getLogger(__name__)


def singleton_owner(Q: np.ndarray) -> np.ndarray:
    """For each column, the state it is a singleton column of, or -1."""
    Q = np.atleast_2d(np.asarray(Q))
    if Q.shape[0] == 0:
        return np.full(Q.shape[1], -1, dtype=np.int64)
    single = Q.sum(axis=0) == 1
    return np.where(single, Q.argmax(axis=0), -1)


def singleton_counts(Q: np.ndarray) -> np.ndarray:
    """Number of singleton columns owned by each state."""
    Q = np.atleast_2d(np.asarray(Q))
    owner = singleton_owner(Q)
    return np.bincount(owner[owner >= 0], minlength=Q.shape[0])


def check_C1(Q: np.ndarray) -> bool:
    """Two identity blocks can be extracted: each state owns two singleton columns."""
    Q = np.atleast_2d(np.asarray(Q))
    M, L = Q.shape
    if 2 * M > L:
        return False
    return bool(np.all(singleton_counts(Q) >= 2))


def check_C3(Q: np.ndarray) -> bool:
    """Every state loads on at least three features."""
    Q = np.atleast_2d(np.asarray(Q))
    return bool(np.all(Q.sum(axis=1) >= 3))


def q_in_constraint_set(Q: np.ndarray) -> bool:
    """Membership in {P1 [I; I; Q~] P2 : every row of Q~ has a one}."""
    return check_C1(Q) and check_C3(Q)


def canonical_witness(Q: np.ndarray) -> np.ndarray:
    """Column order placing Q in the form [I, I, rest] (rows kept in place)."""
    Q = np.atleast_2d(np.asarray(Q))
    if not check_C1(Q):
        raise IdentifiabilityError("Q has no double identity block")
    M, L = Q.shape
    owner = singleton_owner(Q)
    first = np.empty(M, dtype=np.int64)
    second = np.empty(M, dtype=np.int64)
    for m in range(M):
        cols = np.flatnonzero(owner == m)
        first[m], second[m] = cols[0], cols[1]
    used = np.zeros(L, dtype=bool)
    used[first] = True
    used[second] = True
    return np.concatenate([first, second, np.flatnonzero(~used)])


def check_C2(
    Q: np.ndarray,
    rates: Optional[RateParams] = None,
    rule: Rule = Rule.DINO,
) -> bool:
    """Comparable distinct patterns must differ on the features beyond the identity blocks.

    Without rates the ideal responses are compared, which is equivalent
    whenever psi < theta on every feature.
    """
    Q = np.atleast_2d(np.asarray(Q))
    order = canonical_witness(Q)
    M = Q.shape[0]
    rest = order[2 * M:]
    if rest.size == 0:
        return False

    patterns = pattern_matrix(M)
    gamma = build_gamma(patterns, Q[:, rest], rule).astype(bool)
    if rates is None:
        profiles = gamma.astype(np.float64)
    else:
        profiles = np.where(gamma, rates.theta[rest], rates.psi[rest])

    _, groups = np.unique(profiles, axis=0, return_inverse=True)
    groups = np.asarray(groups).ravel()
    codes = np.arange(2 ** M)
    for group in np.unique(groups):
        members = codes[groups == group]
        for i, a in enumerate(members):
            for b in members[i + 1:]:
                if (a & b) == b or (a & b) == a:
                    return False
    return True


def repair_q(
    Q: np.ndarray,
    rng: np.random.Generator,
    frozen_rows: Optional[Union[Sequence[int], np.ndarray]] = None,
) -> np.ndarray:
    """Move Q into the constraint set, editing only rows that are not frozen.

    Frozen rows (and their first two singleton columns) are left untouched;
    new singleton columns for the other states are carved out of columns
    where every frozen row is zero, then rows short of three ones gain ones
    in unreserved columns.
    """
    Q = np.array(np.atleast_2d(Q), dtype=np.uint8, copy=True)
    M, L = Q.shape
    frozen = np.zeros(M, dtype=bool)
    if frozen_rows is not None:
        rows = np.asarray(frozen_rows)
        if rows.dtype == bool:
            frozen = rows.copy()
        else:
            frozen[rows.astype(np.int64)] = True
    repair = np.flatnonzero(~frozen)
    if repair.size == 0:
        return Q
    if 2 * M >= L:
        raise IdentifiabilityError(
            f"cannot place {M} states in the constraint set with L={L} features; need 2M < L"
        )

    owner = singleton_owner(Q)
    reserved = np.full(L, -1, dtype=np.int64)
    for m in range(M):
        cols = np.flatnonzero(owner == m)[:2]
        if frozen[m] and cols.size < 2:
            raise IdentifiabilityError(f"frozen state {m} owns fewer than two singleton columns")
        reserved[cols] = m

    free = (Q[frozen].sum(axis=0) == 0) & (reserved < 0)
    for m in repair:
        need = 2 - int(np.count_nonzero(reserved == m))
        if need <= 0:
            continue
        candidates = rng.permutation(np.flatnonzero(free))
        if candidates.size < need:
            raise IdentifiabilityError(
                f"no free columns left to give state {m} its singleton columns"
            )
        # emptier columns first
        ordered = candidates[np.argsort(Q[:, candidates].sum(axis=0), kind="stable")]
        chosen = ordered[:need]
        Q[:, chosen] = 0
        Q[m, chosen] = 1
        reserved[chosen] = m
        free[chosen] = False

    open_cols = np.flatnonzero(reserved < 0)
    for m in repair:
        deficit = 3 - int(Q[m].sum())
        if deficit <= 0:
            continue
        zeros = open_cols[Q[m, open_cols] == 0]
        if zeros.size < deficit:
            raise IdentifiabilityError(f"state {m} cannot reach three loaded features")
        Q[m, rng.choice(zeros, size=deficit, replace=False)] = 1
    return Q


class IdentifiabilityValidator:
    """Checks a Q matrix (and optionally rates) against the identifiability rules."""

    def __init__(self, c2_max_states: Optional[int] = None):
        """Initialize validator with rule definitions."""
        self.c2_max_states = c2_max_states if c2_max_states is not None else settings.c2_max_states
        self.rules = self._define_rules()

    def _define_rules(self) -> Dict[str, Any]:
        """Define validation rules."""
        return {
            "C1": {"description": "Each state owns two singleton columns"},
            "C3": {"description": "Each state loads on at least three features", "min_support": 3},
            "C2": {
                "description": "Comparable latent patterns differ beyond the identity blocks",
                "max_states": self.c2_max_states,
            },
        }

    def validate(
        self,
        Q: np.ndarray,
        rates: Optional[RateParams] = None,
        rule: Rule = Rule.DINO,
    ) -> ValidationResult:
        """Run C1, C3 and, for small M, C2."""
        Q = np.atleast_2d(np.asarray(Q))
        M, L = Q.shape
        errors, warnings, info, rules_checked = [], [], [], []

        rules_checked.append("C1")
        c1 = check_C1(Q)
        if not c1:
            short = np.flatnonzero(singleton_counts(Q) < 2).tolist()
            if 2 * M > L:
                errors.append(f"C1 fails: {M} states need at least {2 * M} features, have {L}")
            else:
                errors.append(f"C1 fails: states {short} own fewer than two singleton columns")

        rules_checked.append("C3")
        support = Q.sum(axis=1)
        if not check_C3(Q):
            thin = np.flatnonzero(support < self.rules["C3"]["min_support"]).tolist()
            errors.append(f"C3 fails: states {thin} load on fewer than three features")

        if not c1:
            warnings.append("C2 not checked: it needs the identity blocks from C1")
        elif M > self.c2_max_states:
            warnings.append(
                f"C2 not checked: M={M} exceeds the enumeration limit of {self.c2_max_states}"
            )
            logger.warning("Skipping C2 for M=%d (limit %d)", M, self.c2_max_states)
        else:
            rules_checked.append("C2")
            if not check_C2(Q, rates, rule):
                errors.append("C2 fails: two comparable latent patterns share a response profile")

        info.append(f"M={M}, L={L}, singleton columns per state={singleton_counts(Q).tolist()}")
        return ValidationResult(
            valid=len(errors) == 0,
            errors=errors,
            warnings=warnings,
            info=info,
            rules_checked=rules_checked,
        )
