"""Gaussian densities: log-pdf, reparameterised draws and closed-form KLs."""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import _backend
from .errors import ConfigError, NumericalError
from .kernels import stabilized_cholesky

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianDensity:
    """Multivariate normal with either a full covariance or a diagonal.

    Exactly one of ``cov`` (d x d) and ``var`` (d,) is set.
    """

    mean: np.ndarray
    cov: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "mean", mean)
        if (self.cov is None) == (self.var is None):
            raise ConfigError("GaussianDensity needs exactly one of cov or var")
        d = mean.shape[0]
        if self.cov is not None:
            cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
            if cov.shape != (d, d):
                raise ConfigError(f"covariance shape {cov.shape} does not match mean ({d},)")
            object.__setattr__(self, "cov", cov)
        else:
            var = np.atleast_1d(np.asarray(self.var, dtype=float))
            if var.shape != (d,):
                raise ConfigError(f"variance shape {var.shape} does not match mean ({d},)")
            if np.any(var < 0):
                raise ConfigError("diagonal variances must be non-negative")
            object.__setattr__(self, "var", var)

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def is_diagonal(self):
        return self.var is not None

    def covariance(self):
        return np.diag(self.var) if self.is_diagonal else self.cov

    def factor(self):
        """Lower-triangular square root of the covariance."""
        if self.is_diagonal:
            return np.diag(np.sqrt(self.var))
        return stabilized_cholesky(self.cov)[0]


class LatentTrial(NamedTuple):
    """Per-training-point latent Gaussians: ``mean`` and ``var`` are (n, d_z)."""

    mean: np.ndarray
    var: np.ndarray


class InducingTrial(NamedTuple):
    """Gaussian over inducing outputs: ``mean`` (m,), ``var`` (m,) diagonal."""

    mean: np.ndarray
    var: np.ndarray


def log_pdf(g, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != g.mean.shape:
        raise ConfigError("log_pdf: point and mean differ in dimension")
    r = x - g.mean
    d = g.dim
    if g.is_diagonal:
        if np.any(g.var <= 0):
            raise NumericalError("zero variance in diagonal density")
        return float(-0.5 * (d * LOG_2PI + np.sum(np.log(g.var)) + np.sum(r * r / g.var)))
    L, _ = stabilized_cholesky(g.cov)
    a = _backend._Numpy.solve_triangular(L, r, lower=True)
    return float(-0.5 * (d * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + a @ a))


def sample_reparam(mean, cov_factor, eps):
    """``mean + cov_factor @ eps``.

    ``cov_factor`` may be a lower-triangular matrix or, for diagonal
    densities, the vector of standard deviations.  ``eps`` may carry leading
    batch dimensions.
    """
    xp = _backend.namespace(mean, cov_factor, eps).np
    if cov_factor.ndim == 1:
        return mean + cov_factor * eps
    return mean + xp.einsum("ij,...j->...i", cov_factor, eps)


def kl_gaussian(q, p):
    """KL(q || p) between two :class:`GaussianDensity` values."""
    if q.dim != p.dim:
        raise ConfigError("kl_gaussian: dimension mismatch")
    Lp, _ = _exact_cholesky(p.covariance())
    Sq = q.covariance()
    if q.is_diagonal:
        logdet_q = float(np.sum(np.log(q.var)))
    else:
        logdet_q = 2.0 * float(np.sum(np.log(np.diag(_exact_cholesky(Sq)[0]))))
    logdet_p = 2.0 * float(np.sum(np.log(np.diag(Lp))))
    solve = _backend._Numpy.solve_triangular
    A = solve(Lp, Sq, lower=True)
    trace = float(np.trace(solve(Lp, A.T, lower=True)))
    a = solve(Lp, p.mean - q.mean, lower=True)
    return 0.5 * (logdet_p - logdet_q - q.dim + trace + float(a @ a))


def _exact_cholesky(A):
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance is not positive definite") from exc


def latent_prior_moments(W, means, input_var):
    """Means ``W^T s_i`` (n, d_z) and covariances ``W^T diag(v_i) W`` (n, d_z, d_z)."""
    xp = _backend.namespace(W, means, input_var).np
    prior_mean = means @ W
    prior_cov = xp.einsum("ka,nk,kb->nab", W, input_var, W)
    return prior_mean, prior_cov


def kl_latent_sum(trial, W, means, input_var):
    """Sum over training points of KL(q(z_i) || N(W^T s_i, W^T Sigma_i W)).

    ``input_var`` is the (n, d_s) array of per-point diagonal input variances.
    Runs on numpy or under jax.
    """
    xp = _backend.namespace(trial.mean, trial.var, W, means, input_var).np
    d_z = W.shape[1]
    prior_mean, P = latent_prior_moments(W, means, input_var)
    try:
        L = xp.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("projected input covariance is singular") from exc
    logdet_p = 2.0 * xp.sum(xp.log(xp.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    logdet_q = xp.sum(xp.log(trial.var), axis=-1)
    eye = xp.broadcast_to(xp.eye(d_z), P.shape)
    Pinv = xp.linalg.solve(P, eye)
    trace = xp.sum(xp.diagonal(Pinv, axis1=-2, axis2=-1) * trial.var, axis=-1)
    r = prior_mean - trial.mean
    quad = xp.einsum("na,nab,nb->n", r, Pinv, r)
    return 0.5 * xp.sum(logdet_p - logdet_q - d_z + trace + quad)


def kl_inducing(trial, C=None, chol=None):
    """KL(q(f~) || N(0, C)) for a diagonal inducing trial.

    Pass either the covariance ``C`` or its lower Cholesky factor ``chol``
    (already jittered, as used elsewhere in the same evaluation).
    """
    if chol is None:
        if C is None:
            raise ConfigError("kl_inducing needs C or chol")
        if _backend.is_jax(C):
            from .kernels import cholesky_jitter_jax

            chol = cholesky_jitter_jax(C)[0]
        else:
            chol = stabilized_cholesky(np.asarray(C, dtype=float))[0]
    be = _backend.namespace(chol, trial.mean, trial.var)
    xp = be.np
    m = chol.shape[0]
    Linv = be.solve_triangular(chol, xp.eye(m), lower=True)
    logdet_c = 2.0 * xp.sum(xp.log(xp.diagonal(chol)))
    logdet_q = xp.sum(xp.log(trial.var))
    trace = xp.sum(xp.sum(Linv * Linv, axis=0) * trial.var)
    a = Linv @ trial.mean
    return 0.5 * (logdet_c - logdet_q - m + trace + xp.sum(a * a))
