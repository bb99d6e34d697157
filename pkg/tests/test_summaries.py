"""Tests for posterior summaries over retained draws."""
import numpy as np
import pytest

from app.core.exceptions import DataError
from app.models.schemas import Mode, Rule
from app.services.sampler import ChainOutput, Draw
from app.services.summaries import (
    coclustering,
    ls_clustering,
    ls_loss,
    merge_scientific,
    partition_to_blocks,
    pattern_probabilities,
    posterior_T_tilde,
    select_Q_ls,
    state_count_distribution,
    state_marginals,
)


def make_draw(Z, Hstar=None, Q=None, iteration=1, t_tilde=1, theta=None, psi=None, log_post=0.0):
    Z = np.asarray(Z, dtype=np.int64)
    T = int(Z.max()) + 1
    Q = np.eye(2, 5, dtype=np.uint8) if Q is None else np.asarray(Q, dtype=np.uint8)
    M, L = Q.shape
    Hstar = np.zeros((T, M), dtype=np.uint8) if Hstar is None else np.asarray(Hstar, dtype=np.uint8)
    return Draw(
        iteration=iteration,
        Z=Z,
        Hstar=Hstar,
        Q=Q,
        theta=np.full(L, 0.8) if theta is None else np.asarray(theta, dtype=float),
        psi=np.full(L, 0.2) if psi is None else np.asarray(psi, dtype=float),
        alpha1=1.0,
        p=np.full(M, 0.5),
        log_post=log_post,
        t_tilde=t_tilde,
        identifiable=True,
    )


def make_output(draws, chain=0):
    first = draws[0]
    output = ChainOutput(
        chain=chain,
        seed=0,
        config_hash="test",
        mode=Mode.FINITE,
        rule=Rule.DINO,
        n_subjects=first.Z.size,
        n_features=first.Q.shape[1],
    )
    output.draws = list(draws)
    return output


class TestCoclustering:
    """Test suite for posterior co-clustering probabilities."""

    def test_single_cluster(self):
        """Test one draw with one cluster gives an all-ones matrix."""
        pihat = coclustering(make_output([make_draw([0, 0, 0])]))
        assert np.array_equal(pihat, np.ones((3, 3)))

    def test_together_and_apart(self):
        """Test a pair together in one of two draws gets 0.5."""
        pihat = coclustering(make_output([make_draw([0, 0]), make_draw([0, 1], iteration=2)]))
        assert pihat[0, 1] == 0.5
        assert np.array_equal(np.diag(pihat), [1.0, 1.0])

    def test_matches_pairwise_count(self):
        """Test pooled chains against a direct pairwise count."""
        rng = np.random.default_rng(0)
        outputs = [
            make_output([make_draw(rng.integers(0, 3, size=8), iteration=b) for b in range(10)], chain=c)
            for c in range(3)
        ]
        all_Z = [d.Z for o in outputs for d in o.draws]
        expected = np.zeros((8, 8))
        for Z in all_Z:
            for i in range(8):
                for j in range(8):
                    expected[i, j] += Z[i] == Z[j]
        expected /= len(all_Z)
        assert np.allclose(coclustering(outputs), expected)

    def test_no_draws(self):
        """Test an empty chain is an error."""
        output = make_output([make_draw([0])])
        output.draws = []
        with pytest.raises(DataError):
            coclustering(output)


class TestLSClustering:
    """Test suite for least-squares partition selection."""

    def test_hand_fixture(self):
        """Test three draws on three subjects against hand-computed losses."""
        draws = [
            make_draw([0, 0, 1], iteration=1),
            make_draw([0, 0, 1], iteration=2),
            make_draw([0, 1, 2], iteration=3),
        ]
        result = ls_clustering(make_output(draws))
        assert result.Z.tolist() == [0, 0, 1]
        assert result.iteration == 1
        assert result.loss == pytest.approx(2 / 9)
        assert result.losses[2] == pytest.approx(8 / 9)

    def test_minimum_loss(self):
        """Test the returned loss is no larger than any retained draw's loss."""
        rng = np.random.default_rng(1)
        output = make_output([make_draw(rng.integers(0, 3, size=6), iteration=b) for b in range(15)])
        pihat = coclustering(output)
        result = ls_clustering(output, pihat)
        assert all(result.loss <= ls_loss(d.Z, pihat) + 1e-12 for d in output.draws)

    def test_label_invariance(self):
        """Test relabeled clusters give the same loss."""
        pihat = np.full((3, 3), 0.5)
        assert ls_loss(np.array([0, 0, 1]), pihat) == pytest.approx(ls_loss(np.array([4, 4, 2]), pihat))


class TestScientificPartition:
    """Test suite for merging clusters by latent state."""

    def test_distinct_states_unchanged(self):
        """Test clusters with distinct states stay apart."""
        result = merge_scientific(np.array([0, 1, 1, 2]), np.array([[1, 0], [0, 1], [1, 1]]))
        assert result.Z.tolist() == [0, 1, 1, 2]
        assert result.T_tilde == 3

    def test_shared_state_merged(self):
        """Test two clusters with one state become one block."""
        result = merge_scientific(np.array([0, 1, 2, 2]), np.array([[1, 0], [0, 1], [1, 0]]))
        assert result.Z.tolist() == [0, 1, 0, 0]
        assert result.T_tilde == 2
        assert result.states.tolist() == [[1, 0], [0, 1]]

    def test_refinement(self):
        """Test subjects sharing a cluster always share a scientific cluster."""
        rng = np.random.default_rng(2)
        for _ in range(30):
            Z = rng.integers(0, 5, size=12)
            Z = np.unique(Z, return_inverse=True)[1]
            Hstar = rng.integers(0, 2, size=(Z.max() + 1, 2))
            merged = merge_scientific(Z, Hstar).Z
            same = Z[:, None] == Z[None, :]
            assert np.all((merged[:, None] == merged[None, :]) | ~same)
            assert merged.max() + 1 <= Z.max() + 1

    def test_blocks(self):
        """Test block listing by first member."""
        assert partition_to_blocks(np.array([1, 0, 1])) == [[0, 2], [1]]


class TestCounts:
    """Test suite for scientific cluster counts."""

    def test_T_tilde_distribution(self):
        """Test pmf, median and interval of T-tilde."""
        draws = [make_draw([0, 1], iteration=b, t_tilde=t) for b, t in enumerate([2, 2, 3, 3, 3])]
        summary = posterior_T_tilde(make_output(draws))
        assert summary.pmf == {2: pytest.approx(0.4), 3: pytest.approx(0.6)}
        assert summary.median == 3.0
        values = np.array([2, 2, 3, 3, 3])
        assert summary.ci == (np.quantile(values, 0.025), np.quantile(values, 0.975))

    def test_constant_T_tilde(self):
        """Test a constant count gives a degenerate pmf."""
        draws = [make_draw([0, 0], iteration=b, t_tilde=1) for b in range(4)]
        assert posterior_T_tilde(make_output(draws)).pmf == {1: 1.0}


class TestSelectQ:
    """Test suite for least-squares Q selection."""

    def setup_method(self):
        """Setup test fixtures."""
        self.Qs = [
            np.array([[1, 1, 0, 0], [0, 0, 1, 1]]),
            np.array([[1, 1, 1, 0], [0, 0, 1, 1]]),
            np.array([[1, 0, 0, 0], [0, 1, 1, 1]]),
        ]

    def test_single_draw(self):
        """Test one draw returns its own Q."""
        Q, chain, iteration = select_Q_ls(make_output([make_draw([0], Q=self.Qs[0], iteration=7)]))
        assert np.array_equal(Q, self.Qs[0])
        assert (chain, iteration) == (0, 7)

    def test_hand_norms(self):
        """Test the argmin of Frobenius distances to the mean co-activation matrix."""
        output = make_output([make_draw([0], Q=Q, iteration=b + 1) for b, Q in enumerate(self.Qs)])
        mats = [Q.T @ Q for Q in self.Qs]
        mean = sum(mats) / 3
        expected = int(np.argmin([np.sqrt(((m - mean) ** 2).sum()) for m in mats]))
        Q, _, iteration = select_Q_ls(output)
        assert iteration == expected + 1
        assert np.array_equal(Q, self.Qs[expected])

    def test_row_permutation_invariance(self):
        """Test permuting the states of a draw does not change the choice."""
        base = make_output([make_draw([0], Q=Q, iteration=b + 1) for b, Q in enumerate(self.Qs)])
        swapped = make_output([make_draw([0], Q=Q[::-1], iteration=b + 1) for b, Q in enumerate(self.Qs)])
        assert select_Q_ls(base)[2] == select_Q_ls(swapped)[2]


class TestStateMarginals:
    """Test suite for subject-level state probabilities."""

    def test_direct_frequencies(self):
        """Test marginals against a direct count of active states."""
        draws = [
            make_draw([0, 0, 1], Hstar=[[1, 0], [0, 0]], iteration=1),
            make_draw([0, 1, 1], Hstar=[[1, 0], [1, 0]], iteration=2),
        ]
        result = state_marginals(make_output(draws))
        assert result.probabilities.tolist() == [[1.0, 0.0], [1.0, 0.0], [0.5, 0.0]]
        assert result.n_draws == 2
        assert not result.conditioned

    def test_conditioning_recorded(self):
        """Test the conditioning flag is kept."""
        result = state_marginals(make_output([make_draw([0])]), conditioned=True)
        assert result.conditioned

    def test_padding_for_fewer_states(self):
        """Test draws with fewer states count missing states as inactive."""
        draws = [
            make_draw([0, 0], Hstar=[[1]], Q=[[1, 1, 1]], iteration=1),
            make_draw([0, 0], Hstar=[[1, 1]], Q=[[1, 1, 0], [0, 0, 1]], iteration=2),
        ]
        result = state_marginals(make_output(draws))
        assert result.probabilities.tolist() == [[1.0, 0.5], [1.0, 0.5]]

    def test_patterns_and_counts(self):
        """Test per-subject pattern probabilities and active-state counts."""
        draws = [
            make_draw([0, 1], Hstar=[[1, 0], [1, 1]], iteration=1),
            make_draw([0, 1], Hstar=[[1, 0], [0, 0]], iteration=2),
        ]
        output = make_output(draws)
        patterns = pattern_probabilities(output)
        assert patterns[0] == [(1, 1.0)]
        assert sorted(patterns[1]) == [(0, 0.5), (3, 0.5)]
        counts = state_count_distribution(output)
        assert counts.tolist() == [[0.0, 1.0, 0.0], [0.5, 0.0, 0.5]]


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
