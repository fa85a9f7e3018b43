import json
from dataclasses import replace

import numpy as np
import pytest

from rdvgp.data import TrainingSet
from rdvgp.densities import InducingTrial, LatentTrial
from rdvgp.errors import ConfigError, TrainingError
from rdvgp.kernels import KernelParams
from rdvgp.model import RDVGPModel
from rdvgp.optim import AdamConfig
from rdvgp.trainer import (
    TrainConfig,
    _train_restart,
    ard_relevance,
    ard_select,
    elbo_estimate,
    farthest_point,
    init_params,
    init_W,
    train,
)


def toy_data(rng, n=30, d_s=3, fn=None, sd=0.05):
    S = rng.uniform(0, 1, (n, d_s))
    fn = fn or (lambda S: np.sin(4 * S[:, 0]))
    return TrainingSet(S, fn(S)[:, None], np.full((n, d_s), sd**2))


def small_config(**kw):
    base = dict(restarts=1, iterations=300, m=6, d_z=2, adam=AdamConfig(step_size=1e-2), seed=0, check_every=100)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(m=50).validate(30, 3)
    with pytest.raises(ConfigError):
        small_config(d_z=4).validate(30, 3)
    with pytest.raises(ConfigError):
        small_config(restarts=0).validate(30, 3)
    with pytest.raises(ConfigError):
        small_config(w_init="diagonal").validate(30, 3)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"iterations": 5, "learning_rate": 1})


def test_config_round_trip():
    cfg = small_config(d_z="auto")
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_sparse_init_is_signed_permutation(rng):
    W = init_W(4, 4, "sparse", rng)
    assert np.all(np.sort(np.abs(W), axis=None)[-4:] == 1)
    np.testing.assert_array_equal(np.abs(W).sum(axis=0), 1)
    np.testing.assert_array_equal(np.abs(W).sum(axis=1), 1)


@pytest.mark.parametrize("mode", ["random", "sparse"])
def test_init_W_orthonormal(rng, mode):
    for d_s, d_z in [(3, 1), (5, 3), (4, 4)]:
        W = init_W(d_s, d_z, mode, rng)
        np.testing.assert_allclose(W.T @ W, np.eye(d_z), atol=1e-12)


def test_init_params_contract(rng):
    data = toy_data(rng)
    model = init_params(data, small_config(), rng)
    np.testing.assert_allclose(model.W.T @ model.W, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(model.latent_trial.mean, data.S @ model.W)
    np.testing.assert_allclose(model.latent_trial.var, np.einsum("ka,nk->na", model.W**2, data.input_var))
    sd = np.std(data.Y[:, 0])
    assert model.kernels[0].amplitude == pytest.approx(sd)
    assert model.noise_std[0] == pytest.approx(0.1 * sd)
    assert model.m == 6
    assert all(any(np.allclose(z, p) for p in model.latent_trial.mean) for z in model.inducing_inputs)
    with pytest.raises(ConfigError):
        init_params(data, small_config(m=31), rng)


def test_farthest_point_covers_better_than_random():
    wins = 0
    for seed in range(20):
        r = np.random.default_rng(seed)
        P = r.normal(size=(60, 2))

        def cover(sub):
            return np.max(np.min(np.sum((P[:, None] - sub[None]) ** 2, axis=-1), axis=1))

        wins += cover(farthest_point(P, 8)) <= cover(P[r.choice(60, 8, replace=False)])
    assert wins >= 15


def test_training_is_deterministic(rng):
    data = toy_data(rng)
    a, _ = train(data, small_config())
    b, _ = train(data, small_config())
    assert a.to_json() == b.to_json()


def test_training_improves_elbo(rng):
    data = toy_data(rng)
    cfg = small_config(restarts=2, iterations=1000)
    cache = {}
    for r in range(2):
        rec, model = _train_restart(data, cfg, r, 2, cache)
        assert rec.status == "ok"
        start = init_params(data, cfg, np.random.default_rng(np.random.SeedSequence([cfg.seed, r])), restart=r, d_z=2)
        assert elbo_estimate(model, data) > elbo_estimate(start, data)
        trace = rec.elbo_trace
        early, late = np.mean(trace[:100]), np.mean(trace[-100:])
        assert late >= early - 0.01 * abs(early)


def test_report_contents(rng):
    data = toy_data(rng)
    model, report = train(data, small_config(restarts=2))
    d = json.loads(report.to_json())
    assert len(d["restarts"]) == 2
    assert d["selected_restart"] in (0, 1)
    assert len(d["ard_relevance"]) == 2
    for rec in d["restarts"]:
        assert len(rec["elbo_trace"]) <= 2000
        assert rec["max_orthogonality_error"] <= 1e-8
        assert "jitter_events" in rec
    assert model.fingerprint["data_sha256"]


def test_all_restarts_aborted(rng):
    data = toy_data(rng)
    bad = small_config(adam=AdamConfig(step_size=1e6), iterations=200)
    with pytest.raises(TrainingError) as info:
        train(data, bad)
    assert info.value.restarts and all(r["status"] == "aborted" for r in info.value.restarts)


def _model_with_lengthscales(ell, d_s=3):
    rng = np.random.default_rng(0)
    n, d_z = 10, len(ell)
    S = rng.uniform(0, 1, (n, d_s))
    W = np.eye(d_s)[:, :d_z]
    return RDVGPModel(
        W, [KernelParams.create(1.0, ell)], [0.1], rng.uniform(0, 1, (4, d_z)),
        [InducingTrial(np.zeros(4), np.ones(4))], S, np.full((n, d_s), 1e-3),
        LatentTrial(S @ W, np.full((n, d_z), 1e-3)),
    )


def test_ard_prunes_irrelevant_directions():
    model = _model_with_lengthscales([0.05, 500.0, 0.2])
    pruned, k, rel = ard_select(model)
    assert k == 2
    assert pruned.d_z == 2 and pruned.kernels[0].lengthscales.shape == (2,)
    np.testing.assert_array_equal(pruned.W, model.W[:, [0, 2]])
    np.testing.assert_allclose(rel, ard_relevance(model))


def test_ard_direction_kept_if_any_output_needs_it():
    # the third direction is negligible next to the first for output 0 but
    # not for output 1, whose lengthscales are all long
    model = _model_with_lengthscales([0.01, 500.0, 5.0])
    model = replace(
        model,
        kernels=(model.kernels[0], KernelParams.create(1.0, [2.0, 500.0, 5.0])),
        noise_std=np.array([0.1, 0.1]),
        inducing_trials=model.inducing_trials * 2,
    )
    per = ard_relevance(model, per_output=True)
    assert per.shape == (2, 3)
    np.testing.assert_allclose(ard_relevance(model), per.max(axis=0))
    pruned, k, _ = ard_select(model)
    assert k == 2
    np.testing.assert_array_equal(pruned.W, model.W[:, [0, 2]])


def test_ard_fallback_keeps_one():
    model = _model_with_lengthscales([1e9, 1e10, 1e9])
    pruned, k, _ = ard_select(model)
    assert k == 1 and pruned.d_z == 1


def test_ard_constant_output(rng):
    data = toy_data(rng, fn=lambda S: np.full(S.shape[0], 2.0))
    _, report = train(data, small_config(d_z="auto", iterations=1500, retrain_iterations=0))
    assert report.retained_d_z == 1


@pytest.mark.slow
def test_ard_recovers_relevant_axis(rng):
    data = toy_data(rng, n=60, fn=lambda S: np.sin(6 * S[:, 0]))
    cfg = small_config(d_z="auto", iterations=3000, restarts=2, m=10, retrain_iterations=500)
    model, report = train(data, cfg)
    assert report.retained_d_z == 1
    assert abs(model.W[0, 0]) > 0.9
