import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdvgp.densities import (
    GaussianDensity,
    InducingTrial,
    LatentTrial,
    kl_gaussian,
    kl_inducing,
    kl_latent_sum,
    log_pdf,
    sample_reparam,
)
from rdvgp.errors import ConfigError

from conftest import random_orthonormal, random_spd


def test_standard_normal_log_pdf():
    assert log_pdf(GaussianDensity([0.0], var=[1.0]), [0.0]) == pytest.approx(-0.918939, abs=1e-6)


def test_diagonal_log_pdf_by_hand():
    g = GaussianDensity([0.3, -1.0], var=[1.0, 4.0])
    expected = -np.log(2 * np.pi) - 0.5 * np.log(4.0) - 1.0
    assert log_pdf(g, [1.3, 1.0]) == pytest.approx(expected, abs=1e-14)


def test_full_and_diagonal_agree(rng):
    v = rng.uniform(0.5, 2.0, 3)
    x = rng.normal(size=3)
    a = log_pdf(GaussianDensity(np.zeros(3), var=v), x)
    b = log_pdf(GaussianDensity(np.zeros(3), cov=np.diag(v)), x)
    assert a == pytest.approx(b, abs=1e-12)


def test_log_pdf_peaks_at_mean(rng):
    g = GaussianDensity(rng.normal(size=3), cov=random_spd(rng, 3))
    top = log_pdf(g, g.mean)
    for _ in range(20):
        assert log_pdf(g, g.mean + 0.1 * rng.normal(size=3)) < top


def test_density_needs_one_covariance():
    with pytest.raises(ConfigError):
        GaussianDensity([0.0])
    with pytest.raises(ConfigError):
        GaussianDensity([0.0], cov=[[1.0]], var=[1.0])
    with pytest.raises(ConfigError):
        GaussianDensity([0.0, 1.0], var=[1.0])


def test_reparam_basics(rng):
    mean = rng.normal(size=3)
    L = np.linalg.cholesky(random_spd(rng, 3))
    np.testing.assert_array_equal(sample_reparam(mean, L, np.zeros(3)), mean)
    eps = rng.normal(size=3)
    np.testing.assert_allclose(sample_reparam(mean, np.eye(3), eps), mean + eps)
    a = sample_reparam(mean, L, eps)
    b = sample_reparam(mean, L, eps.copy())
    assert a.tobytes() == b.tobytes()


def test_reparam_covariance(rng):
    L = np.linalg.cholesky(random_spd(rng, 3))
    eps = rng.standard_normal((1_000_000, 3))
    x = sample_reparam(np.zeros(3), L, eps)
    C = np.cov(x, rowvar=False)
    assert np.linalg.norm(C - L @ L.T) / np.linalg.norm(L @ L.T) < 0.02


def test_kl_identical_is_zero(rng):
    g = GaussianDensity(rng.normal(size=3), cov=random_spd(rng, 3))
    assert kl_gaussian(g, g) == pytest.approx(0.0, abs=1e-12)


def test_kl_unit_shift():
    assert kl_gaussian(GaussianDensity([1.0], var=[1.0]), GaussianDensity([0.0], var=[1.0])) == pytest.approx(0.5)


def test_kl_matches_monte_carlo(rng):
    q = GaussianDensity(rng.normal(size=3), cov=random_spd(rng, 3, 0.3))
    p = GaussianDensity(rng.normal(size=3), cov=random_spd(rng, 3, 0.5))
    x = sample_reparam(q.mean, np.linalg.cholesky(q.cov), rng.standard_normal((200_000, 3)))
    Lq, Lp = np.linalg.cholesky(q.cov), np.linalg.cholesky(p.cov)

    def lp(L, mu):
        a = np.linalg.solve(L, (x - mu).T)
        return -0.5 * (3 * np.log(2 * np.pi) + 2 * np.sum(np.log(np.diag(L))) + np.sum(a * a, axis=0))

    mc = np.mean(lp(Lq, q.mean) - lp(Lp, p.mean))
    assert kl_gaussian(q, p) == pytest.approx(mc, rel=0.02)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), delta=st.floats(1e-3, 3.0))
def test_kl_nonnegative_and_grows_with_shift(seed, delta):
    r = np.random.default_rng(seed)
    q = GaussianDensity(r.normal(size=2), cov=random_spd(r, 2))
    p = GaussianDensity(r.normal(size=2), cov=random_spd(r, 2))
    assert kl_gaussian(q, p) >= -1e-10
    shifted = GaussianDensity(p.mean + delta, cov=p.cov)
    assert kl_gaussian(shifted, p) > kl_gaussian(p, p)


def _latent_instance(rng, n=4, d_s=3, d_z=2):
    W = random_orthonormal(rng, d_s, d_z)
    means = rng.normal(size=(n, d_s))
    input_var = rng.uniform(0.05, 0.5, size=(n, d_s))
    trial = LatentTrial(rng.normal(size=(n, d_z)), rng.uniform(0.05, 0.5, size=(n, d_z)))
    return trial, W, means, input_var


def test_latent_kl_zero_at_prior():
    W = np.eye(3)[:, :2]
    means = np.array([[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]])
    input_var = np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]])
    trial = LatentTrial(means @ W, input_var[:, :2])
    assert kl_latent_sum(trial, W, means, input_var) == pytest.approx(0.0, abs=1e-14)


def test_latent_kl_matches_generic(rng):
    trial, W, means, input_var = _latent_instance(rng)
    total = sum(
        kl_gaussian(GaussianDensity(trial.mean[i], var=trial.var[i]),
                    GaussianDensity(W.T @ means[i], cov=W.T @ np.diag(input_var[i]) @ W))
        for i in range(means.shape[0])
    )
    assert kl_latent_sum(trial, W, means, input_var) == pytest.approx(total, abs=1e-12)
    one = LatentTrial(trial.mean[:1], trial.var[:1])
    single = kl_gaussian(GaussianDensity(trial.mean[0], var=trial.var[0]),
                         GaussianDensity(W.T @ means[0], cov=W.T @ np.diag(input_var[0]) @ W))
    assert kl_latent_sum(one, W, means[:1], input_var[:1]) == pytest.approx(single, abs=1e-12)


def test_inducing_kl_hand_values():
    assert kl_inducing(InducingTrial(np.zeros(3), np.ones(3)), C=np.eye(3)) == pytest.approx(0.0, abs=1e-14)
    assert kl_inducing(InducingTrial(np.array([1.0]), np.array([1.0])), C=np.eye(1)) == pytest.approx(0.5)


def test_inducing_kl_matches_generic(rng):
    C = random_spd(rng, 5)
    t = InducingTrial(rng.normal(size=5), rng.uniform(0.1, 2.0, 5))
    ref = kl_gaussian(GaussianDensity(t.mean, var=t.var), GaussianDensity(np.zeros(5), cov=C))
    assert kl_inducing(t, C=C) == pytest.approx(ref, abs=1e-12)
    assert kl_inducing(t, chol=np.linalg.cholesky(C)) == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ConfigError):
        kl_inducing(t)
