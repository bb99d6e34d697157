"""Tests for settings, logging and run configuration."""
import logging

import pytest
from pydantic import ValidationError

from app.core.exceptions import ConfigError
from app.core.logging import resolve_log_level
from app.models.schemas import (
    ChainConfig,
    Method,
    Mode,
    PartitionPriorSpec,
    RatePriorSpec,
    RunConfig,
    SimDesign,
)
from config import Settings
from main import load_run_config


class TestSettings:
    """Test suite for process-level settings."""

    def test_defaults(self):
        """Test default capacity limits."""
        settings = Settings(_env_file=None)
        assert settings.max_block_states == 20
        assert settings.c2_max_states == 12
        assert settings.log_level == "INFO"

    def test_environment_override(self, monkeypatch):
        """Test RLCM_ variables override defaults."""
        monkeypatch.setenv("RLCM_MAX_BLOCK_STATES", "8")
        monkeypatch.setenv("RLCM_OUTPUT_DIR", "/tmp/rlcm-out")
        settings = Settings(_env_file=None)
        assert settings.max_block_states == 8
        assert settings.output_dir == "/tmp/rlcm-out"

    def test_log_level_from_settings(self, monkeypatch):
        """Test the configured level is used when DEBUG is unset."""
        monkeypatch.delenv("DEBUG", raising=False)
        assert resolve_log_level("warning") == logging.WARNING
        assert resolve_log_level("nonsense") == logging.INFO

    def test_debug_environment_wins(self, monkeypatch):
        """Test DEBUG=true overrides the configured level."""
        monkeypatch.setenv("DEBUG", "true")
        assert resolve_log_level("ERROR") == logging.DEBUG


class TestChainConfig:
    """Test suite for sampler configuration validation."""

    def test_schedule(self):
        """Test the retained draw count and the burn-in check."""
        assert ChainConfig(iterations=100, burn_in=40, thin=3).n_retained == 20
        with pytest.raises(ValidationError):
            ChainConfig(iterations=10, burn_in=10)

    def test_truncation_synced(self):
        """Test the state prior follows the truncation level."""
        assert ChainConfig(iterations=10, burn_in=2, m_dagger=7).state_prior.M == 7

    def test_geometric_parameter(self):
        """Test a geometric success probability must be below one."""
        with pytest.raises(ValidationError):
            PartitionPriorSpec(pk_param=1.5)
        assert PartitionPriorSpec(pk_family="poisson", pk_param=3.0).pk_param == 3.0

    def test_rate_prior_broadcast(self):
        """Test scalar and comma-separated hyperparameters expand to every feature."""
        spec = RatePriorSpec(a_theta="2,3,4", b_theta=1.5)
        expanded = spec.expand(3)
        assert expanded["a_theta"].tolist() == [2.0, 3.0, 4.0]
        assert expanded["b_theta"].tolist() == [1.5, 1.5, 1.5]
        assert expanded["psi_upper"].tolist() == [1.0, 1.0, 1.0]
        with pytest.raises(ValueError):
            spec.expand(5)

    def test_rate_prior_positive(self):
        """Test non-positive Beta hyperparameters are rejected."""
        with pytest.raises(ValidationError):
            RatePriorSpec(a_psi=[0.0])


class TestRunConfig:
    """Test suite for the flat key=value run configuration."""

    def test_unknown_key(self):
        """Test unknown keys are rejected."""
        with pytest.raises(ValidationError):
            RunConfig(not_a_key=1)

    def test_chain_config(self):
        """Test the nested sampler configuration mirrors the flat keys."""
        run = RunConfig(iterations=50, burn_in=10, chains=2, m_dagger=4, mode="infinite", gamma=2.0)
        chain = run.chain_config()
        assert chain.n_chains == 2
        assert chain.mode == Mode.INFINITE
        assert chain.partition_prior.gamma == 2.0
        assert chain.state_prior.M == 4

    def test_fixed_q_sets_truncation(self):
        """Test a fixed Q sets the number of states."""
        run = RunConfig(iterations=50, burn_in=10, m_dagger=9)
        chain = run.chain_config(fixed_q=[[1, 1, 1, 0], [0, 0, 0, 1]])
        assert chain.m_dagger == 2
        assert chain.state_prior.M == 2

    def test_hash_is_stable(self):
        """Test equal configurations share a hash and different ones do not."""
        assert RunConfig(seed=1).config_hash() == RunConfig(seed=1).config_hash()
        assert RunConfig(seed=1).config_hash() != RunConfig(seed=2).config_hash()

    def test_file_and_overrides(self, tmp_path):
        """Test file values, list parsing and command-line overrides."""
        path = tmp_path / "run.env"
        path.write_text("ITERATIONS=300\nburn_in=100\ngrid_l=50,100\nbench_methods=hc,lca\n")
        run = load_run_config(str(path), {"iterations": 400, "seed": None})
        assert run.iterations == 400
        assert run.burn_in == 100
        assert run.grid_l == [50, 100]
        assert run.bench_methods == [Method.HC, Method.LCA]

    def test_file_errors(self, tmp_path):
        """Test missing files and bad values raise ConfigError."""
        with pytest.raises(ConfigError):
            load_run_config(str(tmp_path / "missing.env"))
        path = tmp_path / "run.env"
        path.write_text("iterations=many\n")
        with pytest.raises(ConfigError, match="iterations"):
            load_run_config(str(path))


class TestSimDesign:
    """Test suite for simulation design validation."""

    def test_pi0_length(self):
        """Test pi0 must have one entry per latent pattern."""
        with pytest.raises(ValidationError):
            SimDesign(M=3, pi0=[0.5, 0.5])

    def test_pi0_probability(self):
        """Test pi0 must sum to one."""
        with pytest.raises(ValidationError):
            SimDesign(M=1, pi0=[0.7, 0.7])
        assert SimDesign(M=1, pi0=[0.3, 0.7]).cell_key()["pi0"] == "custom"


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
