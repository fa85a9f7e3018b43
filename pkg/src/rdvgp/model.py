"""Sparse reduced-dimension variational GP.

Inputs are projected by an orthonormal ``W`` onto a latent space, the latent
inputs carry Gaussian uncertainty, and each output is a sparse GP over the
latent space with ``m`` inducing inputs shared between outputs.
"""

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _backend
from .data import InputSpec
from .densities import (
    LOG_2PI,
    GaussianDensity,
    InducingTrial,
    LatentTrial,
    kl_inducing,
    kl_latent_sum,
)
from .errors import ConfigError, NumericalError
from .kernels import KernelParams, cholesky_jitter_jax, gram, ladder_cholesky, stabilized_cholesky

FORMAT_VERSION = 1


@dataclass(frozen=True)
class RDVGPModel:
    """Hyperparameters and variational parameters of a trained surrogate.

    ``latent_trial`` is only needed while training and may be ``None`` for a
    model restored for prediction.
    """

    W: np.ndarray
    kernels: tuple
    noise_std: np.ndarray
    inducing_inputs: np.ndarray
    inducing_trials: tuple
    train_means: np.ndarray
    train_input_var: np.ndarray
    latent_trial: Optional[LatentTrial] = None
    input_spec: Optional[InputSpec] = None
    fingerprint: dict = field(default_factory=dict)

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "noise_std", np.atleast_1d(np.asarray(self.noise_std, dtype=float)))
        object.__setattr__(self, "inducing_inputs", np.atleast_2d(np.asarray(self.inducing_inputs, dtype=float)))
        object.__setattr__(self, "kernels", tuple(self.kernels))
        object.__setattr__(self, "inducing_trials", tuple(self.inducing_trials))
        d_s, d_z = W.shape
        if d_z > d_s:
            raise ConfigError("latent dimension exceeds input dimension")
        if len(self.kernels) != self.d_y or len(self.inducing_trials) != self.d_y:
            raise ConfigError("need one kernel and one inducing trial per output")
        if self.inducing_inputs.shape[1] != d_z:
            raise ConfigError("inducing inputs must live in the latent space")
        for k in self.kernels:
            if np.asarray(k.lengthscales).shape[-1] != d_z:
                raise ConfigError("kernel lengthscale count must equal d_z")
        if np.any(self.noise_std <= 0):
            raise ConfigError("noise standard deviations must be positive")

    @property
    def d_s(self):
        return self.W.shape[0]

    @property
    def d_z(self):
        return self.W.shape[1]

    @property
    def d_y(self):
        return self.noise_std.shape[0]

    @property
    def m(self):
        return self.inducing_inputs.shape[0]

    def input_var_at(self, s_bar):
        if self.input_spec is None:
            raise ConfigError("model has no input spec; pass input_var explicitly")
        return self.input_spec.var_at(s_bar)

    def with_inducing(self, j, trial):
        trials = list(self.inducing_trials)
        trials[j] = trial
        return replace(self, inducing_trials=tuple(trials))

    # serialisation ----------------------------------------------------

    def to_dict(self):
        d = {
            "format": FORMAT_VERSION,
            "d_s": self.d_s,
            "d_z": self.d_z,
            "d_y": self.d_y,
            "m": self.m,
            "W": self.W.ravel().tolist(),
            "kernels": [
                {"amplitude": float(k.amplitude), "lengthscales": np.asarray(k.lengthscales).tolist()}
                for k in self.kernels
            ],
            "noise_std": self.noise_std.tolist(),
            "inducing_inputs": self.inducing_inputs.ravel().tolist(),
            "inducing_trials": [
                {"mean": np.asarray(t.mean).tolist(), "var": np.asarray(t.var).tolist()}
                for t in self.inducing_trials
            ],
            "train_means": self.train_means.tolist(),
            "train_input_var": self.train_input_var.tolist(),
            "input_spec": self.input_spec.to_dict() if self.input_spec is not None else None,
            "fingerprint": self.fingerprint,
        }
        if self.latent_trial is not None:
            d["latent_trial"] = {
                "mean": np.asarray(self.latent_trial.mean).tolist(),
                "var": np.asarray(self.latent_trial.var).tolist(),
            }
        return d

    @classmethod
    def from_dict(cls, d):
        d_s, d_z, m = d["d_s"], d["d_z"], d["m"]
        lt = d.get("latent_trial")
        return cls(
            W=np.asarray(d["W"], dtype=float).reshape(d_s, d_z),
            kernels=[KernelParams(float(k["amplitude"]), np.asarray(k["lengthscales"], dtype=float)) for k in d["kernels"]],
            noise_std=np.asarray(d["noise_std"], dtype=float),
            inducing_inputs=np.asarray(d["inducing_inputs"], dtype=float).reshape(m, d_z),
            inducing_trials=[
                InducingTrial(np.asarray(t["mean"], dtype=float), np.asarray(t["var"], dtype=float))
                for t in d["inducing_trials"]
            ],
            train_means=np.asarray(d["train_means"], dtype=float).reshape(-1, d_s),
            train_input_var=np.asarray(d["train_input_var"], dtype=float).reshape(-1, d_s),
            latent_trial=None
            if lt is None
            else LatentTrial(np.asarray(lt["mean"], dtype=float), np.asarray(lt["var"], dtype=float)),
            input_spec=InputSpec.from_dict(d["input_spec"]) if d.get("input_spec") else None,
            fingerprint=d.get("fingerprint", {}),
        )

    def to_json(self):
        # repr-based float output round-trips every double exactly
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# projections ------------------------------------------------------------


def project(W, s):
    """Latent coordinates ``W^T s`` (works row-wise on a matrix)."""
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != W.shape[0]:
        raise ConfigError("project: input dimension does not match W")
    return s @ W


def latent_prior(W, s_bar, input_var):
    """Density of ``z = W^T s`` for ``s ~ N(s_bar, diag(input_var))``."""
    s_bar = np.atleast_1d(np.asarray(s_bar, dtype=float))
    v = np.broadcast_to(np.asarray(input_var, dtype=float), s_bar.shape)
    return GaussianDensity(W.T @ s_bar, cov=(W.T * v) @ W)


def pseudo_inverse_map(W, z):
    """Map latent coordinates back through the Moore-Penrose inverse of ``W^T``.

    Diagnostic only: components of the input orthogonal to ``span(W)`` are
    not recoverable.
    """
    return np.asarray(z, dtype=float) @ np.linalg.pinv(W)


# ELBO -------------------------------------------------------------------


def _chol(K):
    if _backend.is_jax(K):
        return cholesky_jitter_jax(K)
    return ladder_cholesky(K)


def elbo_hat_core(y, Z, Zu, kernel, noise_std, trial, L):
    """Expected log-likelihood for one latent sample ``Z`` given ``L = chol(C_uu)``."""
    be = _backend.namespace(y, Z, Zu, L, trial.mean, trial.var, noise_std)
    xp = be.np
    n = Z.shape[0]
    Kuf = gram(Zu, Z, kernel)
    A = be.solve_triangular(L, Kuf, lower=True)
    B = be.solve_triangular(L, A, lower=True, trans=True)
    mean = B.T @ trial.mean
    s2 = noise_std**2
    r = y - mean
    fit = -0.5 * n * (LOG_2PI + xp.log(s2)) - 0.5 * xp.sum(r * r) / s2
    trace_nystrom = n * kernel.amplitude**2 - xp.sum(A * A)
    trace_trial = xp.sum(trial.var[:, None] * B * B)
    return fit - 0.5 * (trace_nystrom + trace_trial) / s2


def elbo_core(Y, Z_samples, W, means, input_var, Zu, kernels, noise_std, inducing, latent, with_jitter=False):
    """Monte Carlo ELBO over a stack of latent samples (n_l, n, d_z).

    Each output's ``C_uu`` is factorised once and the samples are processed
    as one flattened batch, which equals the average of
    :func:`elbo_hat_core` over samples.  The latent KL enters once
    regardless of the number of outputs.
    """
    xp = _backend.namespace(Y, W, Zu, noise_std).np
    Zs = xp.stack(list(Z_samples)) if isinstance(Z_samples, (list, tuple)) else Z_samples
    n_l, n = Zs.shape[0], Zs.shape[1]
    flat = Zs.reshape(n_l * n, Zs.shape[2])
    total = 0.0
    jitters = []
    for j, (kernel, trial) in enumerate(zip(kernels, inducing)):
        L, jit = _chol(gram(Zu, Zu, kernel))
        jitters.append(jit)
        y = xp.tile(Y[:, j], n_l)
        exp_term = elbo_hat_core(y, flat, Zu, kernel, noise_std[j], trial, L)
        total = total + exp_term / n_l - kl_inducing(trial, chol=L)
    total = total - kl_latent_sum(latent, W, means, input_var)
    if with_jitter:
        return total, xp.max(xp.asarray(jitters))
    return total


def elbo_hat(y, Z, model, j):
    """Expected log-likelihood of output ``j`` under one latent sample ``Z``."""
    kernel = model.kernels[j]
    L, _ = _chol(gram(model.inducing_inputs, model.inducing_inputs, kernel))
    return float(
        elbo_hat_core(
            np.asarray(y, dtype=float), np.asarray(Z, dtype=float), model.inducing_inputs,
            kernel, model.noise_std[j], model.inducing_trials[j], L,
        )
    )


def elbo(model, data, Z_samples):
    """ELBO of ``model`` on ``data`` averaged over the given latent samples."""
    if len(Z_samples) < 1:
        raise ConfigError("elbo needs at least one latent sample")
    if model.latent_trial is None:
        raise ConfigError("model carries no latent trial")
    return float(
        elbo_core(
            data.Y, [np.asarray(Z, dtype=float) for Z in Z_samples], model.W, data.S, data.input_var,
            model.inducing_inputs, model.kernels, model.noise_std, model.inducing_trials, model.latent_trial,
        )
    )


def sample_latent(trial, eps):
    """Reparameterised draw ``mu + sqrt(var) * eps`` (eps may be stacked)."""
    xp = _backend.namespace(trial.mean, trial.var, eps).np
    return trial.mean + xp.sqrt(trial.var) * eps


# prediction -------------------------------------------------------------


class Predictor:
    """Conditional predictive density of one output at latent inputs.

    Factorises ``C_uu`` once (O(m^3)); every query then costs O(n* m^2).
    The inducing covariance may be a diagonal vector or a full matrix.
    """

    def __init__(self, Zu, kernel, trial):
        self.Zu = np.asarray(Zu, dtype=float)
        self.kernel = kernel
        m = self.Zu.shape[0]
        self.L, self.jitter = ladder_cholesky(gram(self.Zu, self.Zu, kernel))
        solve = _backend._Numpy.solve_triangular
        Linv = solve(self.L, np.eye(m), lower=True)
        Kinv = Linv.T @ Linv
        self.alpha = Kinv @ np.asarray(trial.mean, dtype=float)
        var = np.asarray(trial.var, dtype=float)
        S = np.diag(var) if var.ndim == 1 else var
        # var(x) = k_xx - k_xu (Kinv - Kinv S Kinv) k_ux
        Q = Kinv - Kinv @ S @ Kinv
        self.Q = 0.5 * (Q + Q.T)

    def moments(self, Zs, full_cov=False):
        Zs = np.atleast_2d(np.asarray(Zs, dtype=float))
        Ks = gram(Zs, self.Zu, self.kernel)
        mean = Ks @ self.alpha
        KQ = Ks @ self.Q
        if full_cov:
            return mean, gram(Zs, Zs, self.kernel) - KQ @ Ks.T
        var = self.kernel.amplitude**2 - np.einsum("ij,ij->i", KQ, Ks)
        return mean, var


def predictors(model):
    """One cached :class:`Predictor` per output."""
    cache = getattr(model, "_predictors", None)
    if cache is None:
        cache = tuple(Predictor(model.inducing_inputs, k, t) for k, t in zip(model.kernels, model.inducing_trials))
        object.__setattr__(model, "_predictors", cache)
    return cache


def predictive_conditional(model, Zstar, j, full_cov=True):
    """Predictive density of output ``j`` at fixed latent inputs ``Zstar``."""
    mean, cov = predictors(model)[j].moments(Zstar, full_cov=full_cov)
    if full_cov:
        return GaussianDensity(mean, cov=cov)
    return GaussianDensity(mean, var=np.maximum(cov, 0.0))


@dataclass
class MarginalPrediction:
    mean: float
    variance: float
    samples: np.ndarray
    cond_means: np.ndarray
    cond_vars: np.ndarray


def latent_draws(model, s_bar, eps, input_var=None):
    """Latent samples ``W^T s_bar + chol(W^T Sigma W) eps`` for standard-normal
    ``eps`` of shape (n_mc, d_z)."""
    s_bar = np.atleast_1d(np.asarray(s_bar, dtype=float))
    v = model.input_var_at(s_bar) if input_var is None else np.broadcast_to(input_var, s_bar.shape)
    cov = (model.W.T * v) @ model.W
    if np.all(cov == 0):
        return np.broadcast_to(model.W.T @ s_bar, eps.shape).copy()
    Lz, _ = stabilized_cholesky(cov)
    return model.W.T @ s_bar + eps @ Lz.T


def marginal_predictive(model, s_bar, j, n_mc, rng, input_var=None):
    """Moments of output ``j`` with the input uncertainty marginalised.

    Draws ``n_mc`` latent inputs from the projected input density, combines
    conditional moments by the laws of total expectation and variance
    (unbiased variance of the conditional means) and draws one output
    sample per latent sample.
    """
    if n_mc < 2:
        raise ConfigError("n_mc must be at least 2")
    eps = rng.standard_normal((n_mc, model.d_z))
    Z = latent_draws(model, s_bar, eps, input_var)
    mu, var = predictors(model)[j].moments(Z)
    var = np.maximum(var, 0.0)
    total_mean = float(np.mean(mu))
    total_var = float(np.var(mu, ddof=1) + np.mean(var))
    samples = mu + np.sqrt(var) * rng.standard_normal(n_mc)
    return MarginalPrediction(total_mean, total_var, samples, mu, var)


def marginal_moments_batch(model, S_bar, eps, input_var=None):
    """Total means and variances (p, d_y) for p mean inputs sharing latent
    noise ``eps`` (n_mc, d_z) -- common random numbers across candidates."""
    S_bar = np.atleast_2d(np.asarray(S_bar, dtype=float))
    p, n_mc = S_bar.shape[0], eps.shape[0]
    Z = np.empty((p, n_mc, model.d_z))
    for i, s in enumerate(S_bar):
        v = None if input_var is None else input_var[i]
        Z[i] = latent_draws(model, s, eps, v)
    flat = Z.reshape(-1, model.d_z)
    means = np.empty((p, model.d_y))
    variances = np.empty((p, model.d_y))
    for j, pred in enumerate(predictors(model)):
        mu, var = pred.moments(flat)
        mu = mu.reshape(p, n_mc)
        var = np.maximum(var, 0.0).reshape(p, n_mc)
        means[:, j] = mu.mean(axis=1)
        variances[:, j] = mu.var(axis=1, ddof=1) + var.mean(axis=1)
    return means, variances


# closed-form inducing optimum ---------------------------------------------


def optimal_inducing(Zu, kernel, noise_std, Z, y, diagonal=True):
    """Stationary point of the ELBO in the inducing trial for fixed latent inputs.

    The mean is ``C_uu (C_uu + C_uf C_fu / s2)^{-1} C_uf y / s2``.  The full
    optimal covariance is ``C_uu (C_uu + C_uf C_fu / s2)^{-1} C_uu``; under
    the diagonal restriction the optimum has precision
    ``diag(C_uu^{-1}) + diag(C_uu^{-1} C_uf C_fu C_uu^{-1}) / s2``.
    """
    Kuu = gram(Zu, Zu, kernel)
    Kuf = gram(Zu, Z, kernel)
    s2 = noise_std**2
    m = Kuu.shape[0]
    L, jit = stabilized_cholesky(Kuu)
    Kuu_j = L @ L.T
    Sigma_inv = Kuu_j + Kuf @ Kuf.T / s2
    Ls, _ = stabilized_cholesky(Sigma_inv)
    solve = _backend._Numpy.solve_triangular

    def sinv(B):
        return solve(Ls, solve(Ls, B, lower=True), lower=True, trans=True)

    mean = Kuu_j @ sinv(Kuf @ y) / s2
    if not diagonal:
        return InducingTrial(mean, Kuu_j @ sinv(Kuu_j))
    Linv = solve(L, np.eye(m), lower=True)
    Kinv = Linv.T @ Linv
    B = Kinv @ Kuf
    prec = np.diag(Kinv) + np.sum(B * B, axis=1) / s2
    return InducingTrial(mean, 1.0 / prec)
