"""Array-namespace dispatch so the same formulas run on numpy or under jax."""

import numpy as np
import scipy.linalg

import jax
import jax.numpy as jnp
import jax.scipy.linalg

jax.config.update("jax_enable_x64", True)


def is_jax(*arrays):
    # tracers register as jax.Array subclasses
    return any(isinstance(a, jax.Array) for a in arrays)


class _Numpy:
    np = np

    @staticmethod
    def solve_triangular(L, B, lower=True, trans=False):
        return scipy.linalg.solve_triangular(L, B, lower=lower, trans=1 if trans else 0)


class _Jax:
    np = jnp

    @staticmethod
    def solve_triangular(L, B, lower=True, trans=False):
        return jax.scipy.linalg.solve_triangular(L, B, lower=lower, trans=1 if trans else 0)


def namespace(*arrays):
    return _Jax if is_jax(*arrays) else _Numpy
