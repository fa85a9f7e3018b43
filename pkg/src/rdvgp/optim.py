"""ADAM for Euclidean parameters and Cayley-ADAM on the Stiefel manifold.

Both steps minimise; callers maximising an objective pass its negated
gradient.  The update functions are pure and traceable by jax.
"""

import logging
from typing import NamedTuple

import numpy as np

from ._backend import jax, jnp
from .errors import NumericalError

log = logging.getLogger(__name__)


class AdamConfig(NamedTuple):
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamState(NamedTuple):
    m: jnp.ndarray
    v: jnp.ndarray
    t: jnp.ndarray


def adam_init(params):
    z = jnp.zeros_like(jnp.asarray(params))
    return AdamState(z, z, jnp.zeros((), dtype=jnp.int64))


def adam_update(state, params, grad, cfg=AdamConfig()):
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    new = params - cfg.step_size * m_hat / (jnp.sqrt(v_hat) + cfg.eps)
    return new, AdamState(m, v, t)


def adam_step(state, params, grad, cfg=AdamConfig()):
    """One bias-corrected ADAM step on a flat parameter vector.

    Returns ``(new_params, new_state)``.
    """
    grad = jnp.asarray(grad)
    if not bool(jnp.all(jnp.isfinite(grad))):
        raise NumericalError("non-finite gradient in ADAM step")
    return adam_update(state, jnp.asarray(params), grad, cfg)


class CayleyConfig(NamedTuple):
    """``iterations=0`` solves the Cayley system exactly; a positive count
    uses that many fixed-point sweeps instead."""

    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    q: float = 0.5
    iterations: int = 0


class CayleyState(NamedTuple):
    M: jnp.ndarray
    v: jnp.ndarray
    t: jnp.ndarray


def cayley_init(W):
    W = jnp.asarray(W)
    return CayleyState(jnp.zeros_like(W), jnp.ones((), dtype=W.dtype), jnp.zeros((), dtype=jnp.int64))


def cayley_adam_update(state, X, G, cfg=CayleyConfig()):
    """Momentum step along a Cayley retraction; ``X`` has orthonormal columns."""
    t = state.t + 1
    M = cfg.beta1 * state.M + (1.0 - cfg.beta1) * G
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * jnp.sum(G * G)
    v_hat = v / (1.0 - cfg.beta2**t)
    r = (1.0 - cfg.beta1**t) * jnp.sqrt(v_hat + cfg.eps)
    W_hat = M @ X.T - 0.5 * X @ (X.T @ M @ X.T)
    A = (W_hat - W_hat.T) / r
    M = r * A @ X
    alpha = jnp.minimum(cfg.step_size, 2.0 * cfg.q / (jnp.linalg.norm(A) + cfg.eps))
    n = X.shape[0]
    if cfg.iterations > 0:
        Y = X - alpha * M
        for _ in range(cfg.iterations):
            Y = X - 0.5 * alpha * A @ (X + Y)
    else:
        eye = jnp.eye(n, dtype=X.dtype)
        Y = jnp.linalg.solve(eye + 0.5 * alpha * A, X - 0.5 * alpha * A @ X)
    return Y, CayleyState(M, v, t)


def orthogonality_error(W):
    k = W.shape[1]
    return jnp.linalg.norm(W.T @ W - jnp.eye(k, dtype=W.dtype))


def reorthonormalise(W):
    """Closest-sign QR re-orthonormalisation."""
    Q, R = np.linalg.qr(np.asarray(W))
    return Q * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))


def cayley_adam_step(state, W, euclid_grad, cfg=CayleyConfig(), drift_tol=1e-6):
    """Public single step with the orthogonality guard.

    Returns ``(new_W, new_state)``.  When the retraction drifts more than
    ``drift_tol`` from the manifold the result is re-orthonormalised by QR
    and a warning is logged.
    """
    W = jnp.asarray(W)
    grad = jnp.asarray(euclid_grad)
    if not bool(jnp.all(jnp.isfinite(grad))):
        raise NumericalError("non-finite gradient in Cayley-ADAM step")
    new, st = cayley_adam_update(state, W, grad, cfg)
    err = float(orthogonality_error(new))
    if err > drift_tol:
        log.warning("Stiefel drift %.2e after Cayley step; re-orthonormalising", err)
        new = jnp.asarray(reorthonormalise(new))
    return new, st
