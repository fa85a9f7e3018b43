"""Standard GP regression with deterministic inputs (the comparison baseline)."""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _backend
from ._backend import jax, jnp
from .densities import LOG_2PI, GaussianDensity
from .errors import ConfigError, NumericalError, TrainingError
from .kernels import KernelParams, cholesky_jitter_jax, gram, stabilized_cholesky
from .optim import AdamConfig, adam_init, adam_update

log = logging.getLogger(__name__)


class GPHyperparams(NamedTuple):
    kernel: KernelParams
    noise_std: float

    def to_dict(self):
        return {
            "amplitude": float(self.kernel.amplitude),
            "lengthscales": np.asarray(self.kernel.lengthscales).tolist(),
            "noise_std": float(self.noise_std),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(KernelParams.create(d["amplitude"], d["lengthscales"]), float(d["noise_std"]))


@dataclass
class OptimizerConfig:
    iterations: int = 2000
    restarts: int = 5
    step_size: float = 1e-2
    seed: int = 0


@dataclass
class FitResult:
    hyperparams: GPHyperparams
    objective: float
    restarts: list = field(default_factory=list)


def _single_output(data):
    if data.d_y != 1:
        raise ConfigError("baseline GP handles one output at a time; use data.output(j)")
    return data.S, data.Y[:, 0]


def _lml(S, y, amplitude, lengthscales, noise_std):
    be = _backend.namespace(S, y, amplitude, lengthscales, noise_std)
    xp = be.np
    n = S.shape[0]
    K = gram(S, S, KernelParams(amplitude, lengthscales)) + noise_std**2 * xp.eye(n)
    if be is _backend._Jax:
        L, _ = cholesky_jitter_jax(K)
    else:
        L, _ = stabilized_cholesky(K)
    a = be.solve_triangular(L, y, lower=True)
    return -0.5 * n * LOG_2PI - xp.sum(xp.log(xp.diagonal(L))) - 0.5 * xp.sum(a * a)


def log_marginal_likelihood(data, hp):
    S, y = _single_output(data)
    return float(_lml(S, y, hp.kernel.amplitude, np.asarray(hp.kernel.lengthscales), hp.noise_std))


def initial_hyperparams(S, y):
    """Data-driven starting point: ``std(y)``, squared median distance, ``0.1 std(y)``."""
    sd = float(np.std(y)) or 1.0
    diff = S[:, None, :] - S[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))[np.triu_indices(S.shape[0], 1)]
    med = float(np.median(dist)) if dist.size else 1.0
    med = med if med > 0 else 1.0
    return GPHyperparams(KernelParams.create(sd, np.full(S.shape[1], med**2)), 0.1 * sd)


def _pack(hp):
    return jnp.concatenate(
        [
            jnp.log(jnp.atleast_1d(hp.kernel.amplitude)),
            jnp.log(jnp.asarray(hp.kernel.lengthscales)),
            jnp.log(jnp.atleast_1d(hp.noise_std)),
        ]
    )


def _unpack(x):
    x = np.asarray(x)
    return GPHyperparams(KernelParams(float(np.exp(x[0])), np.exp(x[1:-1])), float(np.exp(x[-1])))


def _make_runner(S, y, iterations, adam):
    S = jnp.asarray(S)
    y = jnp.asarray(y)

    def objective(x):
        return _lml(S, y, jnp.exp(x[0]), jnp.exp(x[1:-1]), jnp.exp(x[-1]))

    vg = jax.value_and_grad(objective)

    def body(carry, _):
        x, st, best_x, best_f = carry
        f, g = vg(x)
        improved = jnp.isfinite(f) & (f > best_f)
        best_x = jnp.where(improved, x, best_x)
        best_f = jnp.where(improved, f, best_f)
        x, st = adam_update(st, x, -g, adam)
        return (x, st, best_x, best_f), f

    @jax.jit
    def run(x0):
        carry = (x0, adam_init(x0), x0, jnp.asarray(-jnp.inf))
        (x, st, best_x, best_f), trace = jax.lax.scan(body, carry, None, length=iterations)
        f_last = objective(x)
        better = jnp.isfinite(f_last) & (f_last > best_f)
        return jnp.where(better, x, best_x), jnp.where(better, f_last, best_f), trace

    return run, jax.jit(objective)


def fit(data, opt=None):
    """Maximise the log marginal likelihood with ADAM on log-parameters.

    Restart 0 starts from :func:`initial_hyperparams`; later restarts perturb
    it log-normally.  The best iterate of each restart is kept (the
    objective is deterministic), and the best restart is returned.
    """
    opt = opt or OptimizerConfig()
    S, y = _single_output(data)
    if S.shape[0] < 2:
        raise ConfigError("fit needs at least two data points")
    if opt.restarts < 1 or opt.iterations < 1:
        raise ConfigError("restarts and iterations must be positive")
    run, objective = _make_runner(S, y, opt.iterations, AdamConfig(step_size=opt.step_size))
    base = np.asarray(_pack(initial_hyperparams(S, y)))
    rng = np.random.default_rng(np.random.SeedSequence([opt.seed, 0x6770]))
    records = []
    best = None
    for r in range(opt.restarts):
        x0 = base if r == 0 else base + rng.normal(scale=1.0, size=base.shape)
        f0 = float(objective(jnp.asarray(x0)))
        x, f, _ = run(jnp.asarray(x0))
        f = float(f)
        ok = np.isfinite(f)
        records.append({"restart": r, "initial": f0, "final": f, "ok": bool(ok)})
        if ok and (best is None or f > best[1]):
            best = (np.asarray(x), f)
    if best is None:
        raise TrainingError("all baseline GP restarts failed", records)
    return FitResult(_unpack(best[0]), best[1], records)


class _Posterior:
    """Cached factorisation of ``C_SS + noise^2 I`` for repeated queries."""

    def __init__(self, hp, data):
        S, y = _single_output(data)
        self.S = S
        self.hp = hp
        K = gram(S, S, hp.kernel) + hp.noise_std**2 * np.eye(S.shape[0])
        self.L, self.jitter = stabilized_cholesky(K)
        solve = _backend._Numpy.solve_triangular
        self.alpha = solve(self.L, solve(self.L, y, lower=True), lower=True, trans=True)

    def moments(self, Xs, full_cov=False):
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        Ks = gram(Xs, self.S, self.hp.kernel)
        mean = Ks @ self.alpha
        V = _backend._Numpy.solve_triangular(self.L, Ks.T, lower=True)
        if full_cov:
            return mean, gram(Xs, Xs, self.hp.kernel) - V.T @ V
        var = self.hp.kernel.amplitude**2 - np.sum(V * V, axis=0)
        return mean, np.maximum(var, 0.0)


def posterior(hp, data, Xstar, full_cov=True):
    """Predictive density of the latent function at the rows of ``Xstar``."""
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    if Xstar.shape[1] != data.d_s:
        raise ConfigError("test inputs do not match training dimension")
    mean, cov = _Posterior(hp, data).moments(Xstar, full_cov=full_cov)
    if full_cov:
        return GaussianDensity(mean, cov=cov)
    return GaussianDensity(mean, var=cov)


def mc_marginal(hp, data, input_density, n_mc, rng):
    """Samples of f* with the random input marginalised by Monte Carlo.

    Each draw takes ``s ~ input_density`` and then one ``f*`` from the
    posterior at ``s``.
    """
    if n_mc < 1:
        raise ConfigError("n_mc must be positive")
    post = _Posterior(hp, data)
    eps = rng.standard_normal((n_mc, input_density.dim))
    if input_density.is_diagonal:
        S = input_density.mean + eps * np.sqrt(input_density.var)
    else:
        S = input_density.mean + eps @ input_density.factor().T
    mean, var = post.moments(S)
    return mean + np.sqrt(var) * rng.standard_normal(n_mc)


@dataclass
class BaselineModel:
    """One fitted standard GP per output, with the data needed to predict."""

    hyperparams: list
    data: object
    input_spec: object = None

    @property
    def d_y(self):
        return len(self.hyperparams)

    def marginal_samples(self, s_bar, n_mc, rng, input_var=None):
        """``(n_mc, d_y)`` draws of the input-marginalised predictive at ``s_bar``."""
        s_bar = np.asarray(s_bar, dtype=float)
        if input_var is None:
            if self.input_spec is None:
                raise ConfigError("input variance needed: model carries no input spec")
            input_var = self.input_spec.var_at(s_bar)
        density = GaussianDensity(s_bar, var=np.asarray(input_var, dtype=float))
        return np.stack(
            [mc_marginal(hp, self.data.output(j), density, n_mc, rng) for j, hp in enumerate(self.hyperparams)],
            axis=1,
        )

    def to_dict(self):
        return {
            "kind": "gp_baseline",
            "hyperparams": [hp.to_dict() for hp in self.hyperparams],
            "S": self.data.S.tolist(),
            "Y": self.data.Y.tolist(),
            "input_spec": self.input_spec.to_dict() if self.input_spec is not None else None,
        }

    @classmethod
    def from_dict(cls, d):
        from .data import InputSpec, TrainingSet

        S = np.asarray(d["S"], dtype=float)
        Y = np.asarray(d["Y"], dtype=float)
        return cls(
            [GPHyperparams.from_dict(h) for h in d["hyperparams"]],
            TrainingSet(S, Y, np.zeros_like(S)),
            InputSpec.from_dict(d["input_spec"]) if d.get("input_spec") else None,
        )


def fit_all(data, opt=None, spec=None):
    """Fit every output independently.  Returns ``(BaselineModel, [FitResult])``."""
    results = [fit(data.output(j), opt) for j in range(data.d_y)]
    return BaselineModel([r.hyperparams for r in results], data, spec), results
