"""Services package initialization."""
from app.services.identifiability import IdentifiabilityValidator, q_in_constraint_set
from app.services.model import MarginalLikelihood, RateParams, build_gamma, joint_logpost
from app.services.sampler import ChainOutput, run_chain, run_chains
from app.services.summaries import coclustering, ls_clustering, merge_scientific, select_Q_ls
from app.services.diagnostics import adjusted_rand_index, convergence_report, posterior_predictive_check

__all__ = [
    "IdentifiabilityValidator",
    "q_in_constraint_set",
    "MarginalLikelihood",
    "RateParams",
    "build_gamma",
    "joint_logpost",
    "ChainOutput",
    "run_chain",
    "run_chains",
    "coclustering",
    "ls_clustering",
    "merge_scientific",
    "select_Q_ls",
    "adjusted_rand_index",
    "convergence_report",
    "posterior_predictive_check",
]
