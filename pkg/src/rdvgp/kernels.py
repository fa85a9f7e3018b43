"""Squared-exponential covariance and guarded Cholesky factorisation.

The lengthscale enters linearly: ``exp(-(x - x')**2 / (2 * ell))``, so ``ell``
carries squared input units.
"""

import logging
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist

from . import _backend
from ._backend import jax, jnp
from .errors import ConfigError, NumericalError

log = logging.getLogger(__name__)

JITTER_START = 1e-8
JITTER_STOP = 1e-2


class KernelParams(NamedTuple):
    """Amplitude ``sigma_f`` and per-dimension lengthscales.

    A NamedTuple so it passes through jax transformations as a pytree.
    """

    amplitude: float
    lengthscales: np.ndarray

    @classmethod
    def create(cls, amplitude, lengthscales):
        ell = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        if not amplitude > 0 or not np.all(ell > 0):
            raise ConfigError("kernel amplitude and lengthscales must be positive")
        return cls(float(amplitude), ell)

    @classmethod
    def from_log(cls, log_amplitude, log_lengthscales):
        xp = _backend.namespace(log_amplitude, log_lengthscales).np
        return cls(xp.exp(log_amplitude), xp.exp(log_lengthscales))

    @property
    def dim(self):
        return self.lengthscales.shape[-1]


def _check_dims(X, X2, params):
    d = params.lengthscales.shape[-1]
    if X.shape[-1] != d or X2.shape[-1] != d:
        raise ConfigError(
            f"dimension mismatch: inputs have {X.shape[-1]} and {X2.shape[-1]} "
            f"columns, kernel has {d} lengthscales"
        )


def sq_exp(x, x2, params):
    """Kernel value between two vectors."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape:
        raise ConfigError("sq_exp: vectors differ in dimension")
    return float(gram(x[None, :], x2[None, :], params)[0, 0])


def gram(X, X2, params):
    """Covariance matrix between the rows of ``X`` and ``X2``.

    Works on numpy arrays and inside jax traces alike.
    """
    backend = _backend.namespace(X, X2, params.amplitude, params.lengthscales)
    xp = backend.np
    if X.ndim != 2 or X2.ndim != 2:
        raise ConfigError("gram expects two 2-D arrays")
    _check_dims(X, X2, params)
    if backend is _backend._Numpy:
        scale = np.sqrt(2.0 * np.asarray(params.lengthscales, dtype=float))
        r = cdist(np.asarray(X, dtype=float) / scale, np.asarray(X2, dtype=float) / scale, "sqeuclidean")
        return params.amplitude**2 * np.exp(-r)
    diff = X[:, None, :] - X2[None, :, :]
    r = xp.sum(diff * diff / (2.0 * params.lengthscales), axis=-1)
    return params.amplitude**2 * xp.exp(-r)


def stabilized_cholesky(A, max_jitter=JITTER_STOP):
    """Lower Cholesky factor of ``A + jitter * I``.

    Tries the bare matrix first, then jitter from ``1e-8 * mean(diag A)``
    upwards by factors of ten to ``max_jitter * mean(diag A)``.

    Returns ``(L, jitter)``.  Raises :class:`NumericalError` when even the
    largest jitter fails.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ConfigError("stabilized_cholesky expects a square matrix")
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(A)))
    if not np.isfinite(scale) or scale <= 0:
        raise NumericalError("matrix has non-positive mean diagonal", mean_diag=scale)
    eye = np.eye(A.shape[0])
    jitter = JITTER_START * scale
    while jitter <= max_jitter * scale * (1 + 1e-12):
        try:
            L = np.linalg.cholesky(A + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
            continue
        log.debug("cholesky needed jitter %.3e (mean diag %.3e)", jitter, scale)
        return L, jitter
    eig = np.linalg.eigvalsh(0.5 * (A + A.T))
    raise NumericalError(
        "matrix not positive definite after jitter escalation",
        min_eigenvalue=float(eig[0]),
        max_eigenvalue=float(eig[-1]),
        max_jitter=jitter / 10.0,
    )


def _ladder_jitter(lam, scale, xp):
    need = 1e-9 * scale - lam
    rung = xp.ceil(xp.log10(xp.maximum(need, 1e-300) / (JITTER_START * scale)))
    rung = xp.clip(rung, 0.0, np.log10(JITTER_STOP / JITTER_START))
    return xp.where(need <= 0.0, 0.0, JITTER_START * scale * 10.0**rung)


def ladder_cholesky(A):
    """Numpy twin of :func:`cholesky_jitter_jax`.

    Models trained under jax must be evaluated with the same jitter, since
    the fitted inducing covariance is only meaningful relative to the
    factorised matrix.  Returns ``(L, jitter)``.
    """
    A = np.asarray(A, dtype=float)
    scale = float(np.mean(np.diag(A)))
    if not np.isfinite(scale) or scale <= 0:
        raise NumericalError("matrix has non-positive mean diagonal", mean_diag=scale)
    lam = float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])
    jitter = float(_ladder_jitter(lam, scale, np))
    try:
        return np.linalg.cholesky(A + jitter * np.eye(A.shape[0])), jitter
    except np.linalg.LinAlgError:
        raise NumericalError("matrix not positive definite at the largest jitter", min_eigenvalue=lam) from None


def cholesky_jitter_jax(A):
    """Differentiable jitter-escalated Cholesky for use under ``jax.jit``.

    Trial-and-error is not traceable, so the escalation level is picked from
    the smallest eigenvalue instead: the first rung of the same ladder (zero,
    then ``1e-8 .. 1e-2`` times the mean diagonal) that lifts the spectrum to
    at least ``1e-9 * mean(diag A)``.  The jitter is treated as a constant
    for differentiation.  Returns ``(L, jitter)``; ``L`` is NaN when the top
    rung is insufficient.
    """
    n = A.shape[-1]
    scale = jax.lax.stop_gradient(jnp.mean(jnp.diagonal(A)))
    lam = jax.lax.stop_gradient(jnp.linalg.eigvalsh(0.5 * (A + A.T))[0])
    jitter = _ladder_jitter(lam, scale, jnp)
    L = jnp.linalg.cholesky(A + jitter * jnp.eye(n, dtype=A.dtype))
    return L, jitter
