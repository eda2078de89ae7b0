import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compocc.errors import (
    DictionaryMismatch,
    InsufficientData,
    InvalidFeature,
    InvalidParameter,
    InvalidWeights,
)
from compocc.synth import oracle_mixture_log_likelihood
from compocc.vmf import (
    Dictionary,
    cosine_similarity,
    dictionary_sha256,
    learn_dictionary,
    mixture_log_likelihood,
    read_dictionary,
    sample_uniform_sphere,
    sample_vmf,
    vmf_log_kernel,
    write_dictionary,
)


def basis_dictionary(k=3, c=4, s=10.0):
    means = np.zeros((k, c))
    for i in range(k):
        means[i, i] = 1.0
    return Dictionary(means, s)


class TestDictionary:
    def test_requires_unit_means(self):
        with pytest.raises(InvalidParameter):
            Dictionary(np.array([[1.0, 1.0]]), 1.0)

    def test_rejects_negative_concentration(self):
        with pytest.raises(InvalidParameter):
            Dictionary(np.array([[1.0, 0.0]]), -1.0)

    def test_zero_concentration_allowed(self):
        assert Dictionary(np.array([[1.0, 0.0]]), 0.0).concentration == 0.0

    def test_serialization_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        d = Dictionary(sample_uniform_sphere(6, rng, size=4), 17.5)
        path = tmp_path / "d.cdic"
        write_dictionary(d, path)
        back = read_dictionary(path)
        assert back.concentration == d.concentration
        np.testing.assert_allclose(back.means, d.means, atol=1e-7)
        assert dictionary_sha256(back) == dictionary_sha256(
            Dictionary(d.means.astype(np.float32), d.concentration)
        )


class TestKernel:
    def test_aligned_gives_concentration(self):
        d = basis_dictionary(s=10.0)
        f = np.zeros(4)
        f[1] = 1.0
        assert vmf_log_kernel(f, 1, d) == pytest.approx(10.0)

    def test_orthogonal_gives_zero(self):
        d = basis_dictionary(s=25.0)
        f = np.zeros(4)
        f[3] = 1.0
        assert vmf_log_kernel(f, 0, d) == pytest.approx(0.0, abs=1e-12)

    def test_zero_concentration_uniform_limit(self):
        d = basis_dictionary(s=0.0)
        rng = np.random.default_rng(1)
        for _ in range(5):
            f = sample_uniform_sphere(4, rng)
            assert vmf_log_kernel(f, 0, d) == 0.0

    def test_bounded_by_concentration(self):
        rng = np.random.default_rng(2)
        d = Dictionary(sample_uniform_sphere(5, rng, size=3), 7.0)
        for _ in range(20):
            v = vmf_log_kernel(sample_uniform_sphere(5, rng), 2, d)
            assert -7.0 - 1e-9 <= v <= 7.0 + 1e-9

    def test_component_out_of_range(self):
        d = basis_dictionary()
        with pytest.raises(InvalidParameter):
            vmf_log_kernel(np.array([1.0, 0, 0, 0]), 3, d)


class TestCosine:
    def test_identical(self):
        v = np.array([0.6, 0.8])
        assert cosine_similarity(v, v) == pytest.approx(1.0)

    def test_opposite(self):
        v = np.array([0.6, 0.8])
        assert cosine_similarity(v, -v) == pytest.approx(-1.0)

    def test_orthogonal(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_requires_unit(self):
        with pytest.raises(InvalidFeature):
            cosine_similarity(np.array([2.0, 0.0]), np.array([1.0, 0.0]))


class TestMixtureLogLikelihood:
    def test_one_hot_collapses_to_kernel(self):
        rng = np.random.default_rng(3)
        d = Dictionary(sample_uniform_sphere(6, rng, size=4), 30.0)
        f = sample_uniform_sphere(6, rng)
        w = np.array([0.0, 0.0, 1.0, 0.0])
        assert mixture_log_likelihood(f, w, d) == vmf_log_kernel(f, 2, d)

    def test_zero_concentration_gives_zero(self):
        d = basis_dictionary(s=0.0)
        w = np.array([0.2, 0.5, 0.3])
        f = np.array([1.0, 0.0, 0.0, 0.0])
        assert mixture_log_likelihood(f, w, d) == pytest.approx(0.0, abs=1e-9)

    def test_matches_oracle_frozen(self):
        # fixture K=4, C=8; expected value computed by the plain-loop oracle
        rng = np.random.default_rng(42)
        d = Dictionary(sample_uniform_sphere(8, rng, size=4), 20.0)
        w = rng.dirichlet(np.ones(4))
        f = sample_uniform_sphere(8, rng)
        value = mixture_log_likelihood(f, w, d)
        assert value == pytest.approx(1.3580954049882465, abs=1e-9)
        assert value == pytest.approx(oracle_mixture_log_likelihood(f, w, d), abs=1e-9)

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            d = Dictionary(sample_uniform_sphere(8, rng, size=4), float(rng.uniform(0, 40)))
            w = rng.dirichlet(np.full(4, 0.5))
            f = sample_uniform_sphere(8, rng)
            assert mixture_log_likelihood(f, w, d) == pytest.approx(
                oracle_mixture_log_likelihood(f, w, d), abs=1e-9
            )

    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        means = sample_uniform_sphere(6, rng, size=5)
        w = rng.dirichlet(np.ones(5))
        f = sample_uniform_sphere(6, rng)
        perm = rng.permutation(5)
        a = mixture_log_likelihood(f, w, Dictionary(means, 12.0))
        b = mixture_log_likelihood(f, w[perm], Dictionary(means[perm], 12.0))
        assert a == pytest.approx(b, rel=1e-12)

    def test_offset_added_once(self):
        rng = np.random.default_rng(6)
        d = Dictionary(sample_uniform_sphere(5, rng, size=3), 9.0)
        w = np.array([0.3, 0.3, 0.4])
        f = sample_uniform_sphere(5, rng)
        base = mixture_log_likelihood(f, w, d)
        assert mixture_log_likelihood(f, w, d, offset=-2.5) == pytest.approx(base - 2.5)

    def test_invalid_weights(self):
        d = basis_dictionary()
        f = np.array([1.0, 0, 0, 0])
        with pytest.raises(InvalidWeights):
            mixture_log_likelihood(f, np.array([0.5, 0.5, 0.5]), d)
        with pytest.raises(InvalidWeights):
            mixture_log_likelihood(f, np.array([-0.2, 0.6, 0.6]), d)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 50.0))
    def test_logsumexp_bounds(self, seed, s):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 6))
        d = Dictionary(sample_uniform_sphere(5, rng, size=k), s)
        w = rng.dirichlet(np.ones(k))
        f = sample_uniform_sphere(5, rng)
        value = mixture_log_likelihood(f, w, d)
        with np.errstate(divide="ignore"):
            terms = np.log(w) + s * (d.means @ f)
        top = terms[np.isfinite(terms)].max()
        assert top - 1e-9 <= value <= top + np.log(k) + 1e-9


class TestLearnDictionary:
    def test_single_cluster_is_normalized_mean(self):
        rng = np.random.default_rng(7)
        x = sample_vmf(sample_uniform_sphere(6, rng), 30.0, rng, size=50)
        d = learn_dictionary(x, 1, 10.0, seed=0)
        expected = x.mean(axis=0)
        expected /= np.linalg.norm(expected)
        np.testing.assert_allclose(d.means[0], expected, atol=1e-12)

    def test_recovers_separated_directions(self):
        rng = np.random.default_rng(8)
        truth = np.linalg.qr(rng.standard_normal((8, 8)))[0][:3]
        x = np.concatenate(
            [sample_vmf(mu, 50.0, np.random.default_rng(i), size=200) for i, mu in enumerate(truth)]
        )
        d = learn_dictionary(x, 3, 50.0, seed=1)
        match = np.abs(d.means @ truth.T).max(axis=0)
        assert (match >= 0.99).all()

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(9)
        x = sample_uniform_sphere(5, rng, size=60)
        a = learn_dictionary(x, 4, 10.0, seed=3)
        b = learn_dictionary(x, 4, 10.0, seed=3)
        assert np.array_equal(a.means, b.means)

    def test_objective_monotone(self):
        rng = np.random.default_rng(10)
        x = sample_uniform_sphere(6, rng, size=120)
        history = []
        learn_dictionary(x, 5, 15.0, seed=2, history=history)
        assert len(history) >= 1
        diffs = np.diff(history)
        assert (diffs >= -1e-9).all()

    def test_insufficient_data(self):
        x = np.tile(np.array([[1.0, 0.0, 0.0]]), (10, 1))
        with pytest.raises(InsufficientData):
            learn_dictionary(x, 2, 10.0)
        with pytest.raises(InsufficientData):
            learn_dictionary(np.eye(3), 4, 10.0)

    def test_requires_positive_concentration(self):
        with pytest.raises(InvalidParameter):
            learn_dictionary(np.eye(3), 2, 0.0)


class TestSampleVmf:
    def test_uniform_limit_small_resultant(self):
        mu = np.zeros(8)
        mu[0] = 1.0
        x = sample_vmf(mu, 0.0, 123, size=10_000)
        assert np.linalg.norm(x.mean(axis=0)) < 0.05

    def test_concentration_limit(self):
        rng = np.random.default_rng(11)
        mu = sample_uniform_sphere(6, rng)
        x = sample_vmf(mu, 1e6, 5, size=200)
        assert (x @ mu).min() >= 0.999

    def test_seed_reproducible(self):
        mu = np.zeros(5)
        mu[2] = 1.0
        assert np.array_equal(sample_vmf(mu, 4.0, 77), sample_vmf(mu, 4.0, 77))

    def test_unit_norm_output(self):
        rng = np.random.default_rng(12)
        mu = sample_uniform_sphere(7, rng)
        x = sample_vmf(mu, 3.0, rng, size=500)
        np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("s", [1.0, 10.0, 100.0])
    def test_empirical_mean_direction(self, s):
        mu = np.zeros(8)
        mu[3] = 1.0
        x = sample_vmf(mu, s, int(s) + 1, size=100_000)
        mean = x.mean(axis=0)
        assert mean @ mu / np.linalg.norm(mean) >= 0.99
