"""Pydantic models for configuration, persisted chains and reports."""
import hashlib
import json
from enum import Enum
from typing import Any, Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Rule(str, Enum):
    """Gate composing the design matrix from latent states and Q."""
    DINO = "dino"
    DINA = "dina"


class Mode(str, Enum):
    """Finite truncation of latent states or the semi-ordered slice sampler."""
    FINITE = "finite"
    INFINITE = "infinite"


class PKFamily(str, Enum):
    """Prior family for the number of mixture components K."""
    GEOMETRIC = "geometric"
    POISSON = "poisson"


class AlphaPrior(str, Enum):
    """Hyperprior family for alpha1, evaluated on the beta = alpha/(1+alpha) grid."""
    BETA = "beta"
    GAMMA = "gamma"


class Method(str, Enum):
    """Clustering methods compared in replication studies."""
    RLCM = "rlcm"
    SUBSET = "subset"
    HC = "hc"
    LCA = "lca"


def _split_list(value: Any) -> Any:
    """Accept comma-separated strings where a list is expected."""
    if isinstance(value, str):
        parts = [part.strip() for part in value.split(",")]
        return [part for part in parts if part]
    if isinstance(value, (int, float)):
        return [value]
    return value


# ============================================================================
# Prior specifications
# ============================================================================

class PartitionPriorSpec(BaseModel):
    """Mixture-of-finite-mixtures partition prior."""
    model_config = ConfigDict(frozen=True)

    gamma: float = Field(1.0, gt=0, description="Dirichlet symmetry parameter")
    pk_family: PKFamily = Field(PKFamily.GEOMETRIC, description="Family of p_K")
    pk_param: float = Field(0.1, gt=0, description="Geometric success probability or Poisson rate")

    @model_validator(mode="after")
    def check_param(self) -> "PartitionPriorSpec":
        if self.pk_family == PKFamily.GEOMETRIC and not self.pk_param < 1:
            raise ValueError("geometric p_K needs success probability in (0, 1)")
        return self


class StatePriorSpec(BaseModel):
    """Finite Indian buffet prior on cluster latent states, with its alpha1 hyperprior."""
    model_config = ConfigDict(frozen=True)

    alpha1: float = Field(1.0, gt=0, description="Initial/fixed alpha1")
    alpha2: float = Field(1.0, gt=0)
    M: int = Field(5, ge=1, description="Truncation level")
    alpha_prior: AlphaPrior = AlphaPrior.BETA
    a_beta: float = Field(1.0, gt=0)
    b_beta: float = Field(1.0, gt=0)
    e0: float = Field(1.0, gt=0, description="Gamma shape when alpha_prior=gamma")
    f0: float = Field(1.0, gt=0, description="Gamma rate when alpha_prior=gamma")
    grid_size: int = Field(4096, ge=16)


class RatePriorSpec(BaseModel):
    """Per-feature Beta priors on true (theta) and false (psi) positive rates.

    Scalar or length-1 lists broadcast to every feature.
    """
    model_config = ConfigDict(frozen=True)

    a_theta: List[float] = Field(default_factory=lambda: [9.0])
    b_theta: List[float] = Field(default_factory=lambda: [1.0])
    a_psi: List[float] = Field(default_factory=lambda: [1.0])
    b_psi: List[float] = Field(default_factory=lambda: [9.0])
    theta_lower: Optional[List[float]] = None
    psi_upper: Optional[List[float]] = None

    @field_validator(
        "a_theta", "b_theta", "a_psi", "b_psi", "theta_lower", "psi_upper", mode="before"
    )
    @classmethod
    def split_lists(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("a_theta", "b_theta", "a_psi", "b_psi")
    @classmethod
    def check_positive(cls, v: List[float]) -> List[float]:
        if not v or any(x <= 0 for x in v):
            raise ValueError("Beta hyperparameters must be positive")
        return v

    def expand(self, L: int) -> Dict[str, Any]:
        """Broadcast every hyperparameter to length L."""
        def _vec(values: Optional[List[float]], default: float) -> np.ndarray:
            if values is None:
                return np.full(L, default)
            arr = np.asarray(values, dtype=float)
            if arr.size == 1:
                return np.full(L, arr[0])
            if arr.size != L:
                raise ValueError(f"expected 1 or {L} values, got {arr.size}")
            return arr

        return {
            "a_theta": _vec(self.a_theta, 1.0),
            "b_theta": _vec(self.b_theta, 1.0),
            "a_psi": _vec(self.a_psi, 1.0),
            "b_psi": _vec(self.b_psi, 1.0),
            "theta_lower": _vec(self.theta_lower, 0.0),
            "psi_upper": _vec(self.psi_upper, 1.0),
        }


# ============================================================================
# Sampler configuration
# ============================================================================

class ChainConfig(BaseModel):
    """Everything a chain needs besides the data."""

    iterations: int = Field(20000, ge=1)
    burn_in: int = Field(10000, ge=0)
    thin: int = Field(1, ge=1)
    n_chains: int = Field(3, ge=1)
    seed: int = Field(0, ge=0)
    m_dagger: int = Field(5, ge=1, description="Truncation level of latent states")
    rule: Rule = Rule.DINO
    mode: Mode = Mode.FINITE
    partial_clusters: Optional[List[int]] = Field(None, description="Must-link initial labels")
    split_merge_scans: int = Field(5, ge=0)
    split_merge_moves: int = Field(1, ge=0)
    partition_prior: PartitionPriorSpec = Field(default_factory=PartitionPriorSpec)
    state_prior: StatePriorSpec = Field(default_factory=StatePriorSpec)
    rate_prior: RatePriorSpec = Field(default_factory=RatePriorSpec)
    p_init: float = Field(0.1, gt=0, lt=1)
    tau1: float = Field(0.3, ge=0, lt=1)
    fixed_q: Optional[List[List[int]]] = None
    fix_alpha1: bool = False
    prior_only: bool = False
    strict: bool = False
    max_states: int = Field(20, ge=1, description="Cap on M* in infinite mode")
    max_block_states: int = Field(20, ge=1)

    @model_validator(mode="after")
    def check_schedule(self) -> "ChainConfig":
        if self.iterations <= self.burn_in:
            raise ValueError("iterations must exceed burn_in")
        if self.state_prior.M != self.m_dagger:
            self.state_prior = self.state_prior.model_copy(update={"M": self.m_dagger})
        return self

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


class RunConfig(BaseModel):
    """Flat key=value run configuration; unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")

    # Sampler
    iterations: int = 20000
    burn_in: int = 10000
    thin: int = 1
    chains: int = 3
    seed: int = 0
    m_dagger: int = 5
    rule: Rule = Rule.DINO
    mode: Mode = Mode.FINITE
    split_merge_scans: int = 5
    split_merge_moves: int = 1
    p_init: float = 0.1
    tau1: float = 0.3
    fix_alpha1: bool = False
    prior_only: bool = False
    strict: bool = False
    max_states: int = 20
    fixed_q: Optional[str] = None
    partial_clusters: Optional[str] = None

    # Partition prior
    gamma: float = 1.0
    pk_family: PKFamily = PKFamily.GEOMETRIC
    pk_param: float = 0.1

    # State prior
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha_prior: AlphaPrior = AlphaPrior.BETA
    a_beta: float = 1.0
    b_beta: float = 1.0
    e0: float = 1.0
    f0: float = 1.0
    alpha_grid_size: int = 4096

    # Rate prior
    a_theta: List[float] = Field(default_factory=lambda: [9.0])
    b_theta: List[float] = Field(default_factory=lambda: [1.0])
    a_psi: List[float] = Field(default_factory=lambda: [1.0])
    b_psi: List[float] = Field(default_factory=lambda: [9.0])
    theta_lower: Optional[List[float]] = None
    psi_upper: Optional[List[float]] = None

    # Simulation design
    sim_n: int = 50
    sim_l: int = 100
    sim_m: int = 3
    sim_theta0: float = 0.8
    sim_psi0: float = 0.15
    sim_s: float = 0.2
    sim_pi0: str = "rare_state"
    sim_irrelevant: int = 0

    # Replication study grid
    grid_l: List[int] = Field(default_factory=lambda: [100])
    grid_n: List[int] = Field(default_factory=lambda: [50])
    grid_theta0: List[float] = Field(default_factory=lambda: [0.8])
    grid_psi0: List[float] = Field(default_factory=lambda: [0.15])
    grid_pi0: List[str] = Field(default_factory=lambda: ["rare_state"])
    grid_s: List[float] = Field(default_factory=lambda: [0.2])
    bench_methods: List[Method] = Field(default_factory=lambda: [Method.RLCM, Method.HC, Method.LCA])
    bench_replications: int = 10
    lca_classes: int = 8
    lca_iterations: int = 2000
    ppc_replicates: Optional[int] = None

    @field_validator(
        "a_theta", "b_theta", "a_psi", "b_psi", "theta_lower", "psi_upper",
        "grid_l", "grid_n", "grid_theta0", "grid_psi0", "grid_pi0", "grid_s",
        "bench_methods", mode="before",
    )
    @classmethod
    def split_lists(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("fixed_q", "partial_clusters", mode="before")
    @classmethod
    def empty_path_is_none(cls, v: Any) -> Any:
        if isinstance(v, str) and not v.strip():
            return None
        return v

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def chain_config(
        self,
        fixed_q: Optional[List[List[int]]] = None,
        partial_clusters: Optional[List[int]] = None,
        max_block_states: int = 20,
    ) -> ChainConfig:
        """Build the nested sampler configuration."""
        return ChainConfig(
            iterations=self.iterations,
            burn_in=self.burn_in,
            thin=self.thin,
            n_chains=self.chains,
            seed=self.seed,
            m_dagger=len(fixed_q) if fixed_q is not None else self.m_dagger,
            rule=self.rule,
            mode=self.mode,
            partial_clusters=partial_clusters,
            split_merge_scans=self.split_merge_scans,
            split_merge_moves=self.split_merge_moves,
            partition_prior=PartitionPriorSpec(
                gamma=self.gamma, pk_family=self.pk_family, pk_param=self.pk_param
            ),
            state_prior=StatePriorSpec(
                alpha1=self.alpha1,
                alpha2=self.alpha2,
                M=len(fixed_q) if fixed_q is not None else self.m_dagger,
                alpha_prior=self.alpha_prior,
                a_beta=self.a_beta,
                b_beta=self.b_beta,
                e0=self.e0,
                f0=self.f0,
                grid_size=self.alpha_grid_size,
            ),
            rate_prior=RatePriorSpec(
                a_theta=self.a_theta,
                b_theta=self.b_theta,
                a_psi=self.a_psi,
                b_psi=self.b_psi,
                theta_lower=self.theta_lower,
                psi_upper=self.psi_upper,
            ),
            p_init=self.p_init,
            tau1=self.tau1,
            fixed_q=fixed_q,
            fix_alpha1=self.fix_alpha1,
            prior_only=self.prior_only,
            strict=self.strict,
            max_states=self.max_states,
            max_block_states=max_block_states,
        )


# ============================================================================
# Simulation designs and benchmark records
# ============================================================================

class SimDesign(BaseModel):
    """One cell of a simulation study."""

    L: int = Field(100, ge=1)
    N: int = Field(50, ge=1)
    theta0: float = Field(0.8, ge=0, le=1)
    psi0: float = Field(0.15, ge=0, le=1)
    pi0: List[float]
    pi0_label: str = "custom"
    s: float = Field(0.2, gt=0, lt=1)
    M: int = Field(3, ge=1)
    R: int = Field(1, ge=1)
    seed: int = 0
    n_irrelevant: int = Field(0, ge=0, description="Extra all-zero Q columns")

    @model_validator(mode="after")
    def check_pi0(self) -> "SimDesign":
        if len(self.pi0) != 2 ** self.M:
            raise ValueError(f"pi0 needs {2 ** self.M} entries for M={self.M}")
        if any(w < 0 for w in self.pi0) or abs(sum(self.pi0) - 1.0) > 1e-8:
            raise ValueError("pi0 must be a probability vector")
        return self

    def cell_key(self) -> Dict[str, Union[int, float, str]]:
        return {
            "L": self.L,
            "N": self.N,
            "theta0": self.theta0,
            "psi0": self.psi0,
            "pi0": self.pi0_label,
            "s": self.s,
        }


class BenchRecord(BaseModel):
    """One (cell, replication, method) outcome."""

    L: int
    N: int
    theta0: float
    psi0: float
    pi0: str
    s: float
    method: Method
    replication: int
    ari: Optional[float] = None
    error: Optional[str] = None


class BenchRow(BaseModel):
    """Aggregated aRI for one (cell, method)."""

    L: int
    N: int
    theta0: float
    psi0: float
    pi0: str
    s: float
    method: Method
    n_ok: int
    n_failed: int
    mean_ari: Optional[float] = None
    sd_ari: Optional[float] = None


# ============================================================================
# Persisted chains
# ============================================================================

class ChainHeader(BaseModel):
    """First line of a chain file."""

    format: str = "rlcm-chain"
    version: int = 1
    chain: int
    seed: int
    config_hash: str
    n_subjects: int
    n_features: int
    mode: Mode
    rule: Rule
    retained: int
    config: Dict[str, Any] = Field(default_factory=dict)


class ChainRecord(BaseModel):
    """One retained iteration."""

    iteration: int
    Z: List[int]
    Hstar: List[List[int]]
    Q: List[List[int]]
    theta: List[float]
    psi: List[float]
    alpha1: float
    p: List[float]
    log_post: float
    t_tilde: int
    identifiable: bool
    c2: Optional[bool] = None


# ============================================================================
# Validation
# ============================================================================

class ValidationResult(BaseModel):
    """Outcome of a rule-based check."""

    valid: bool
    errors: List[str] = Field(default_factory=list)
    warnings: List[str] = Field(default_factory=list)
    info: List[str] = Field(default_factory=list)
    rules_checked: List[str] = Field(default_factory=list)
