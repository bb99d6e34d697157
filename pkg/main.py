"""Command-line entry point for fitting and evaluating restricted latent class models."""
import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from dotenv import dotenv_values
from pydantic import ValidationError

from config import settings
from app.core.exceptions import ConfigError, DimensionError, IdentifiabilityError, RLCMError
from app.core.logging import configure_logging
from app.models.schemas import Mode, Rule, RunConfig, SimDesign
from app.services.diagnostics import convergence_report, posterior_predictive_check
from app.services.exporter import (
    ResultExporter,
    read_binary_csv,
    read_chains,
    read_partial_clusters,
)
from app.services.identifiability import IdentifiabilityValidator
from app.services.sampler import run_chains
from app.services.simbench import design_Q, expand_grid, gen_data, resolve_pi0, run_replication_study
from app.services.summaries import (
    coclustering,
    ls_clustering,
    posterior_T_tilde,
    select_Q_ls,
    state_marginals,
)

logger = logging.getLogger(__name__)


class CLIArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ============================================================================
# Configuration
# ============================================================================

FLAG_KEYS = {
    "seed": "seed",
    "chains": "chains",
    "iterations": "iterations",
    "burn_in": "burn_in",
    "thin": "thin",
    "mode": "mode",
    "rule": "rule",
    "fixed_q": "fixed_q",
    "partial_clusters": "partial_clusters",
}


def load_run_config(path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Flat key=value file plus CLI overrides; unknown keys and bad values raise ConfigError."""
    values: Dict[str, Any] = {}
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"Config file not found: {path}")
        for key, value in dotenv_values(path).items():
            if value is None:
                raise ConfigError(f"Config key {key!r} has no value")
            values[key.strip().lower()] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return RunConfig.model_validate(values)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"Invalid configuration: {problems}") from exc


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {key: getattr(args, attr, None) for attr, key in FLAG_KEYS.items()}


def _exporter(args: argparse.Namespace) -> ResultExporter:
    return ResultExporter(args.out or settings.output_dir)


# ============================================================================
# Commands
# ============================================================================

def cmd_simulate(args: argparse.Namespace) -> int:
    run = load_run_config(args.config, _overrides(args))
    try:
        design = SimDesign(
            L=run.sim_l,
            N=run.sim_n,
            theta0=run.sim_theta0,
            psi0=run.sim_psi0,
            pi0=resolve_pi0(run.sim_pi0, run.sim_m),
            pi0_label=run.sim_pi0,
            s=run.sim_s,
            M=run.sim_m,
            seed=run.seed,
            n_irrelevant=run.sim_irrelevant,
        )
    except (ValidationError, ValueError) as exc:
        raise ConfigError(f"Invalid simulation design: {exc}") from exc
    rng = np.random.default_rng(run.seed)
    Q = design_Q(design, rng)
    Y, _, Z = gen_data(design, Q, rng, run.rule)
    paths = _exporter(args).write_simulation(Y, Z, Q)
    print(f"Simulated N={design.N} subjects, L={Q.shape[1]} features, M={design.M} states")
    for p in paths:
        print(f"  wrote {p}")
    return 0


def _chain_config(run: RunConfig, fixed_q=None, partial=None):
    try:
        return run.chain_config(fixed_q, partial, settings.max_block_states)
    except ValidationError as exc:
        raise ConfigError(f"Invalid sampler configuration: {exc}") from exc


def _fit_chain_config(run: RunConfig, Y: np.ndarray):
    fixed_q = None
    if run.fixed_q is not None:
        fixed_q = read_binary_csv(run.fixed_q, "fixed Q").tolist()
    partial = None
    if run.partial_clusters is not None:
        partial = read_partial_clusters(run.partial_clusters, Y.shape[0]).tolist()
    return _chain_config(run, fixed_q, partial)


def cmd_fit(args: argparse.Namespace) -> int:
    run = load_run_config(args.config, _overrides(args))
    Y = read_binary_csv(args.data, "data")
    chain_config = _fit_chain_config(run, Y)
    config_hash = run.config_hash()
    outputs = run_chains(Y, chain_config, config_hash)
    exporter = _exporter(args)
    dump = run.model_dump(mode="json")
    for output in outputs:
        path = exporter.write_chain(output, dump)
        print(f"Chain {output.chain}: {len(output)} retained draws -> {path}")
    return 0


def cmd_summarize(args: argparse.Namespace) -> int:
    outputs = read_chains(args.chains)
    pihat = coclustering(outputs)
    ls = ls_clustering(outputs, pihat)
    Q_sel, chain, iteration = select_Q_ls(outputs)
    t_tilde = posterior_T_tilde(outputs)

    marginals = state_marginals(outputs)
    if args.refit:
        if args.data is None:
            raise ConfigError("--refit needs --data")
        run = load_run_config(args.config, _overrides(args))
        Y = read_binary_csv(args.data, "data")
        refit_config = _chain_config(run, Q_sel.tolist(), ls.Z.tolist())
        marginals = state_marginals(run_chains(Y, refit_config, run.config_hash()), conditioned=True)

    _exporter(args).write_summary(pihat, ls.Z, Q_sel, marginals.probabilities, t_tilde.pmf)
    print(f"LS clustering: {int(ls.Z.max()) + 1} clusters (chain {ls.chain}, iteration {ls.iteration})")
    print(f"Selected Q: chain {chain}, iteration {iteration}, M={Q_sel.shape[0]}")
    print(f"Scientific clusters: median {t_tilde.median:g}, 95% CI ({t_tilde.ci[0]:g}, {t_tilde.ci[1]:g})")
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    outputs = read_chains(args.chains)
    rows = convergence_report(outputs)
    path = _exporter(args).write_convergence(rows)
    flagged = [r.parameter for r in rows if r.rhat_flag or r.geweke_flag]
    print(f"{len(rows)} parameters checked, {len(flagged)} flagged -> {path}")
    return 0


def cmd_ppc(args: argparse.Namespace) -> int:
    run = load_run_config(args.config, _overrides(args))
    Y = read_binary_csv(args.data, "data")
    outputs = read_chains(args.chains)
    if outputs[0].n_subjects != Y.shape[0] or outputs[0].n_features != Y.shape[1]:
        raise DimensionError(
            f"chains were fitted on {outputs[0].n_subjects} x {outputs[0].n_features} data, "
            f"got {Y.shape[0]} x {Y.shape[1]}"
        )
    rng = np.random.default_rng(run.seed)
    report = posterior_predictive_check(Y, outputs, rng, run.ppc_replicates, outputs[0].rule)
    paths = _exporter(args).write_ppc(report)
    coverage = report.coverage()
    print(f"Marginal means covered: {coverage['means']:.3f}; pairwise LORs covered: {coverage['lor']:.3f}")
    for p in paths:
        print(f"  wrote {p}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    run = load_run_config(args.config, _overrides(args))
    try:
        designs = expand_grid(
            run.grid_l, run.grid_n, run.grid_theta0, run.grid_psi0, run.grid_pi0, run.grid_s,
            M=run.sim_m, R=run.bench_replications, seed=run.seed, n_irrelevant=run.sim_irrelevant,
        )
    except (ValidationError, ValueError) as exc:
        raise ConfigError(f"Invalid replication grid: {exc}") from exc
    chain_config = _chain_config(run)
    records, rows = run_replication_study(
        designs, run.bench_methods, chain_config, run.lca_classes, run.lca_iterations
    )
    _exporter(args).write_bench(records, rows)
    for row in rows:
        mean = "n/a" if row.mean_ari is None else f"{row.mean_ari:.3f}"
        print(
            f"L={row.L} N={row.N} theta0={row.theta0} psi0={row.psi0} pi0={row.pi0} s={row.s} "
            f"{row.method.value}: aRI {mean} ({row.n_ok} ok, {row.n_failed} failed)"
        )
    return 0


def cmd_validate_q(args: argparse.Namespace) -> int:
    Q = read_binary_csv(args.q, "Q")
    result = IdentifiabilityValidator().validate(Q, rule=Rule(args.rule or Rule.DINO.value))
    print(f"Rules checked: {', '.join(result.rules_checked)}")
    for line in result.info:
        print(f"  info: {line}")
    for line in result.warnings:
        print(f"  warning: {line}")
    for line in result.errors:
        print(f"  error: {line}")
    if not result.valid:
        raise IdentifiabilityError("Q is outside the identifiable constraint set")
    print("Q is identifiable")
    return 0


# ============================================================================
# Parser
# ============================================================================

def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value run configuration file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--chains", type=int)
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--burn-in", dest="burn_in", type=int)
    parser.add_argument("--thin", type=int)
    parser.add_argument("--mode", choices=[m.value for m in Mode])
    parser.add_argument("--rule", choices=[r.value for r in Rule])
    parser.add_argument("--fixed-q", dest="fixed_q", help="CSV file holding a fixed Q matrix")
    parser.add_argument("--partial-clusters", dest="partial_clusters", help="must-link labels or blocks")
    parser.add_argument("--out", help=f"output directory (default {settings.output_dir})")


def build_parser() -> argparse.ArgumentParser:
    parser = CLIArgumentParser(prog="rlcm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CLIArgumentParser)

    p = sub.add_parser("simulate", help="generate a data set from a simulation design")
    _add_run_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the posterior sampler")
    p.add_argument("data", help="headerless 0/1 CSV, one subject per row")
    _add_run_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("summarize", help="co-clustering, LS partition, Q and state summaries")
    p.add_argument("chains", nargs="+", help="chain files")
    p.add_argument("--data", help="data file, needed with --refit")
    p.add_argument("--refit", action="store_true", help="state marginals from a refit at the selected Q and LS partition")
    _add_run_flags(p)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("diagnose", help="Gelman-Rubin and Geweke checks")
    p.add_argument("chains", nargs="+", help="chain files")
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ppc", help="posterior predictive checks")
    p.add_argument("data", help="data the chains were fitted on")
    p.add_argument("chains", nargs="+", help="chain files")
    _add_run_flags(p)
    p.set_defaults(func=cmd_ppc)

    p = sub.add_parser("bench", help="replication study over a grid of designs")
    _add_run_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate-q", help="identifiability report for a Q matrix")
    p.add_argument("q", help="CSV file holding Q")
    p.add_argument("--rule", choices=[r.value for r in Rule])
    p.set_defaults(func=cmd_validate_q)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging(settings.log_level)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RLCMError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        logger.error("Invalid input: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
