"""Tests for the partition, latent-state, alpha1 and rate priors."""
import numpy as np
import pytest
from scipy import stats
from scipy.integrate import quad
from scipy.special import betaln, gammaln, logsumexp

from app.core.exceptions import TruncationError
from app.models.schemas import AlphaPrior, PartitionPriorSpec, PKFamily, RatePriorSpec, StatePriorSpec
from app.services.model import RateParams
from app.services.priors import (
    block_sizes,
    log_alpha_prior_on_beta,
    log_eppf,
    log_new_cluster_ratio,
    log_pk,
    log_prior_alpha1,
    log_prior_Hstar,
    log_prior_Hstar_ibp,
    log_rate_prior,
    log_Vn,
    sample_truncated_beta,
    sample_truncated_beta_guarded,
)


def set_partitions(n):
    """Every partition of range(n) as a list of blocks."""
    if n == 0:
        yield []
        return
    for smaller in set_partitions(n - 1):
        for i in range(len(smaller)):
            yield smaller[:i] + [smaller[i] + [n - 1]] + smaller[i + 1:]
        yield smaller + [[n - 1]]


def direct_log_vn(t, N, gamma, p, k_max=5000):
    k = np.arange(t, k_max, dtype=float)
    terms = (
        gammaln(k + 1) - gammaln(k - t + 1)
        - (gammaln(gamma * k + N) - gammaln(gamma * k))
        + (k - 1) * np.log1p(-p) + np.log(p)
    )
    return float(logsumexp(terms))


class TestPartitionPrior:
    """Test suite for the mixture-of-finite-mixtures partition prior."""

    def setup_method(self):
        """Setup test fixtures."""
        self.spec = PartitionPriorSpec(gamma=1.0, pk_family=PKFamily.GEOMETRIC, pk_param=0.1)

    def test_pk_sums_to_one(self):
        """Test both p_K families are normalized."""
        k = np.arange(1, 2000)
        assert np.exp(log_pk(k, PKFamily.GEOMETRIC, 0.1)).sum() == pytest.approx(1.0, abs=1e-12)
        assert np.exp(log_pk(k, PKFamily.POISSON, 3.0)).sum() == pytest.approx(1.0, abs=1e-12)

    def test_single_subject(self):
        """Test V_1(1) = 1 / gamma."""
        spec = PartitionPriorSpec(gamma=2.5)
        assert log_Vn(1, 1, spec) == pytest.approx(-np.log(2.5), rel=1e-12)

    @pytest.mark.parametrize("N", [3, 10, 25, 50])
    def test_vn_matches_direct_sum(self, N):
        """Test V_N(t) against a long direct summation."""
        for t in range(1, N + 1, max(1, N // 7)):
            assert log_Vn(t, N, self.spec) == pytest.approx(direct_log_vn(t, N, 1.0, 0.1), rel=1e-12)

    def test_vn_geometric_half(self):
        """Test N=3 with Geometric(0.5) against direct summation."""
        spec = PartitionPriorSpec(gamma=1.0, pk_param=0.5)
        for t in (1, 2, 3):
            assert log_Vn(t, 3, spec) == pytest.approx(direct_log_vn(t, 3, 1.0, 0.5), rel=1e-12)

    def test_t_out_of_range(self):
        """Test t > N is rejected."""
        with pytest.raises(ValueError):
            log_Vn(4, 3, self.spec)

    def test_two_subjects_normalized(self):
        """Test the two partitions of two subjects have total probability one."""
        total = np.exp(log_eppf([[0, 1]], self.spec)) + np.exp(log_eppf([[0], [1]], self.spec))
        assert total == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("gamma,family,param", [(1.0, PKFamily.GEOMETRIC, 0.1), (0.5, PKFamily.POISSON, 2.0)])
    def test_eppf_normalized_over_bell_partitions(self, gamma, family, param):
        """Test EPPF over all 52 partitions of five subjects sums to one."""
        spec = PartitionPriorSpec(gamma=gamma, pk_family=family, pk_param=param)
        partitions = list(set_partitions(5))
        assert len(partitions) == 52
        total = np.exp(logsumexp([log_eppf(p, spec) for p in partitions]))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_eppf_label_invariance(self):
        """Test EPPF depends on block sizes only."""
        a = log_eppf(np.array([0, 0, 1, 2, 2]), self.spec)
        b = log_eppf(np.array([5, 3, 3, 1, 1]), self.spec)
        assert a == pytest.approx(b)

    def test_block_sizes_accepts_both_forms(self):
        """Test block sizes from labels and from blocks agree."""
        assert sorted(block_sizes(np.array([0, 1, 1]))) == [1, 2]
        assert sorted(block_sizes([[0], [1, 2]])) == [1, 2]

    def test_new_cluster_ratio(self):
        """Test the V ratio is a difference of log V values."""
        expected = log_Vn(3, 10, self.spec) - log_Vn(2, 10, self.spec)
        assert log_new_cluster_ratio(2, 10, self.spec) == pytest.approx(expected)


class TestStatePrior:
    """Test suite for the finite Indian buffet prior on cluster states."""

    def setup_method(self):
        """Setup test fixtures."""
        self.spec = StatePriorSpec(alpha1=1.5, alpha2=1.0, M=2)

    def test_matches_beta_bernoulli_integral(self):
        """Test against numeric integration of prod p^eta (1-p)^(1-eta) over the Beta prior."""
        H = np.array([[1, 0], [1, 1]])
        a = self.spec.alpha1 * self.spec.alpha2 / self.spec.M
        expected = 0.0
        for m in range(2):
            s = H[:, m].sum()
            integrand = lambda p: p ** s * (1 - p) ** (2 - s) * stats.beta.pdf(p, a, self.spec.alpha2)
            expected += np.log(quad(integrand, 0, 1, limit=200)[0])
        assert log_prior_Hstar(H, self.spec) == pytest.approx(expected, rel=1e-6)

    def test_alpha2_one_closed_form(self):
        """Test the alpha2 = 1 closed form."""
        H = np.array([[1, 0, 0], [1, 1, 0], [0, 0, 0]])
        spec = StatePriorSpec(alpha1=2.0, alpha2=1.0, M=3)
        a = 2.0 / 3
        s = H.sum(axis=0)
        T = 3
        expected = np.sum(np.log(a) + gammaln(s + a) + gammaln(T - s + 1) - gammaln(T + 1 + a))
        assert log_prior_Hstar(H, spec) == pytest.approx(expected, rel=1e-12)

    def test_permutation_invariance(self):
        """Test invariance under row and column permutations."""
        H = np.array([[1, 0, 1], [0, 0, 1], [1, 1, 1]])
        spec = StatePriorSpec(alpha1=1.0, M=3)
        base = log_prior_Hstar(H, spec)
        assert log_prior_Hstar(H[::-1], spec) == pytest.approx(base)
        assert log_prior_Hstar(H[:, [2, 0, 1]], spec) == pytest.approx(base)

    def test_ibp_prior_ignores_inactive_columns(self):
        """Test all-zero columns do not change the infinite-mode prior."""
        H = np.array([[1, 0], [1, 1]])
        padded = np.hstack([H, np.zeros((2, 3), dtype=int)])
        assert log_prior_Hstar_ibp(H, 1.2) == pytest.approx(log_prior_Hstar_ibp(padded, 1.2))

    def test_alpha_prior_change_of_variables(self):
        """Test the alpha1 density integrates to one on its own scale."""
        spec = StatePriorSpec(alpha_prior=AlphaPrior.BETA, a_beta=2.0, b_beta=3.0)
        total, _ = quad(lambda a: np.exp(log_prior_alpha1(a, spec)), 0, np.inf, limit=200)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_gamma_hyperprior_on_beta_scale(self):
        """Test the Gamma hyperprior transformed to beta integrates to one."""
        spec = StatePriorSpec(alpha_prior=AlphaPrior.GAMMA, e0=2.0, f0=1.0)
        total, _ = quad(lambda b: np.exp(log_alpha_prior_on_beta(b, spec)), 0, 1, limit=200)
        assert total == pytest.approx(1.0, abs=1e-6)


class TestRatePrior:
    """Test suite for truncated Beta rate priors."""

    def setup_method(self):
        """Setup test fixtures."""
        self.rng = np.random.default_rng(42)

    def test_draws_stay_in_interval(self):
        """Test truncated draws fall strictly inside the interval."""
        x = sample_truncated_beta(np.full(1000, 2.0), 3.0, 0.2, 0.3, self.rng)
        assert np.all((x > 0.2) & (x < 0.3))

    def test_unrestricted_matches_beta(self):
        """Test (0, 1) truncation reproduces the Beta distribution."""
        x = sample_truncated_beta(np.full(20000, 2.0), 5.0, 0.0, 1.0, self.rng)
        assert stats.kstest(x, stats.beta(2.0, 5.0).cdf).pvalue > 0.01

    def test_high_theta_regime_mean(self):
        """Test Beta(9, 1) truncated to (0.5, 1) has the exact truncated mean."""
        x = sample_truncated_beta(np.full(50000, 9.0), 1.0, 0.5, 1.0, self.rng)
        dist = stats.beta(9.0, 1.0)
        exact = quad(lambda t: t * dist.pdf(t), 0.5, 1)[0] / (1 - dist.cdf(0.5))
        assert exact > 0.9 - 1e-3
        assert x.mean() == pytest.approx(exact, abs=3e-3)

    def test_degenerate_interval_raises(self):
        """Test an interval without numeric mass is an explicit error."""
        with pytest.raises(TruncationError):
            sample_truncated_beta(500.0, 1.0, 0.0, 1e-6, self.rng)

    def test_guarded_falls_back_to_grid(self):
        """Test the guarded sampler still returns an in-range draw."""
        x = sample_truncated_beta_guarded(500.0, 1.0, 0.0, 1e-6, self.rng)
        assert 0.0 <= x[0] <= 1e-6

    def test_bad_interval(self):
        """Test lower >= upper is rejected."""
        with pytest.raises(ValueError):
            sample_truncated_beta(1.0, 1.0, 0.5, 0.5, self.rng)

    def test_rate_prior_support(self):
        """Test rate prior is -inf outside psi < theta."""
        spec = RatePriorSpec()
        assert log_rate_prior(RateParams([0.3], [0.4]), spec) == -np.inf
        expected = stats.beta.logpdf(0.8, 9, 1) + stats.beta.logpdf(0.1, 1, 9)
        assert log_rate_prior(RateParams([0.8], [0.1]), spec) == pytest.approx(expected)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
