"""Stochastic-gradient ELBO maximisation with restarts and ARD pruning.

Euclidean parameters (log-kernel, log-noise, inducing inputs and trials,
latent trials) are updated with ADAM; the projection ``W`` with Cayley-ADAM so
it stays on the Stiefel manifold.  Each restart runs as a sequence of jitted
``lax.scan`` chunks; between chunks the traces are checked for non-finite
values and orthogonality drift.
"""

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Union

import numpy as np
from jax.flatten_util import ravel_pytree

from ._backend import jax, jnp
from .densities import InducingTrial, LatentTrial
from .errors import ConfigError, NumericalError, TrainingError
from .kernels import KernelParams
from .model import RDVGPModel, elbo_core, optimal_inducing
from .optim import (
    AdamConfig,
    CayleyConfig,
    adam_init,
    adam_update,
    cayley_adam_update,
    cayley_init,
    orthogonality_error,
    reorthonormalise,
)

log = logging.getLogger(__name__)

# below this the kernel correlation across one input standard deviation exceeds 0.99995
RELEVANCE_FLOOR = 1e-4

W_INIT_MODES = ("random", "sparse", "mixed")
MAX_TRACE_POINTS = 2000
DRIFT_TOL = 1e-6


@dataclass
class TrainConfig:
    restarts: int = 3
    iterations: int = 5000
    mc_samples: int = 1
    d_z: Union[int, str] = "auto"
    m: int = 25
    adam: AdamConfig = AdamConfig()
    cayley: CayleyConfig = CayleyConfig()
    seed: int = 0
    w_init: str = "mixed"
    ard_threshold: float = 1e-2
    latent_var_scale: float = 1.0
    retrain_iterations: Optional[int] = None
    smoothing: int = 100
    check_every: int = 100

    def __post_init__(self):
        if isinstance(self.adam, dict):
            self.adam = AdamConfig(**self.adam)
        if isinstance(self.cayley, dict):
            self.cayley = CayleyConfig(**self.cayley)

    def validate(self, n, d_s):
        if self.restarts < 1 or self.iterations < 1 or self.mc_samples < 1:
            raise ConfigError("restarts, iterations and mc_samples must be positive")
        if not 1 <= self.m <= n:
            raise ConfigError(f"need 1 <= m <= n, got m={self.m}, n={n}")
        if self.d_z != "auto" and not (isinstance(self.d_z, int) and 1 <= self.d_z <= d_s):
            raise ConfigError(f"d_z must be 'auto' or an integer in [1, {d_s}]")
        if self.w_init not in W_INIT_MODES:
            raise ConfigError(f"w_init must be one of {W_INIT_MODES}")
        if not 0 < self.latent_var_scale <= 1:
            raise ConfigError("latent_var_scale must lie in (0, 1]")
        if self.smoothing < 1 or self.check_every < 1:
            raise ConfigError("smoothing and check_every must be positive")

    def candidate_dz(self, d_s):
        return d_s if self.d_z == "auto" else int(self.d_z)

    def to_dict(self):
        d = asdict(self)
        d["adam"] = self.adam._asdict()
        d["cayley"] = self.cayley._asdict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        try:
            return cls(**known)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class RestartRecord:
    restart: int
    w_init: str
    status: str = "ok"
    reason: str = ""
    elbo_trace: np.ndarray = None
    smoothed_final: float = float("nan")
    initial_elbo: float = float("nan")
    wall_time: float = 0.0
    jitter_iterations: int = 0
    max_jitter: float = 0.0
    max_orthogonality_error: float = 0.0
    orthogonality_samples: np.ndarray = None
    drift_events: list = field(default_factory=list)

    def to_dict(self):
        trace = self.elbo_trace if self.elbo_trace is not None else np.empty(0)
        idx = downsample_index(len(trace))
        return {
            "restart": self.restart,
            "w_init": self.w_init,
            "status": self.status,
            "reason": self.reason,
            "elbo_trace": {"iteration": idx.tolist(), "elbo": trace[idx].tolist()},
            "smoothed_final_elbo": self.smoothed_final,
            "initial_elbo": self.initial_elbo,
            "wall_time": self.wall_time,
            "jitter_events": {"iterations": self.jitter_iterations, "max_jitter": self.max_jitter},
            "max_orthogonality_error": self.max_orthogonality_error,
            "drift_events": self.drift_events,
        }


@dataclass
class TrainReport:
    restarts: list
    selected: int
    candidate_d_z: int
    retained_d_z: int
    ard_relevance: list
    config: dict

    def to_dict(self):
        return {
            "restarts": [r.to_dict() for r in self.restarts],
            "selected_restart": self.selected,
            "candidate_d_z": self.candidate_d_z,
            "retained_d_z": self.retained_d_z,
            "ard_relevance": self.ard_relevance,
            "config": self.config,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def downsample_index(n, limit=MAX_TRACE_POINTS):
    if n <= limit:
        return np.arange(n)
    return np.unique(np.round(np.linspace(0, n - 1, limit)).astype(int))


def data_fingerprint(data):
    h = hashlib.sha256()
    for a in (data.S, data.Y, data.input_var):
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


# initialisation -----------------------------------------------------------


def init_W(d_s, d_z, mode, rng):
    """Orthonormal ``d_s x d_z`` start: QR of a Gaussian matrix ("random") or
    distinct signed coordinate axes ("sparse")."""
    if mode == "random":
        return reorthonormalise(rng.standard_normal((d_s, d_z)))
    if mode == "sparse":
        W = np.zeros((d_s, d_z))
        rows = rng.permutation(d_s)[:d_z]
        W[rows, np.arange(d_z)] = rng.choice([-1.0, 1.0], size=d_z)
        return W
    raise ConfigError(f"unknown W initialisation {mode!r}")


def farthest_point(points, m):
    """Greedy farthest-point subset, seeded with the point nearest the centroid."""
    points = np.asarray(points, dtype=float)
    if m > points.shape[0]:
        raise ConfigError("cannot select more inducing inputs than points")
    chosen = [int(np.argmin(np.sum((points - points.mean(axis=0)) ** 2, axis=1)))]
    dist = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(m - 1):
        k = int(np.argmax(dist))
        chosen.append(k)
        dist = np.minimum(dist, np.sum((points - points[k]) ** 2, axis=1))
    return points[chosen]


def _median_sq_distance(Z):
    diff = Z[:, None, :] - Z[None, :, :]
    d2 = np.sum(diff * diff, axis=-1)[np.triu_indices(Z.shape[0], 1)]
    med = float(np.median(np.sqrt(d2))) if d2.size else 1.0
    return med**2 if med > 0 else 1.0


def w_mode_for_restart(mode, r):
    if mode == "mixed":
        return "sparse" if r % 2 == 0 else "random"
    return mode


def init_params(data, config, rng, restart=0, d_z=None, W=None):
    """Starting model for one restart.

    Inducing trials start at the closed-form optimum for the initial kernel
    and latent means rather than at the prior, so the means are on the scale
    of the data from the first iteration.
    """
    config.validate(data.n, data.d_s)
    d_z = config.candidate_dz(data.d_s) if d_z is None else d_z
    if np.any(data.input_var <= 0):
        raise ConfigError("training requires strictly positive input variances")
    if W is None:
        W = init_W(data.d_s, d_z, w_mode_for_restart(config.w_init, restart), rng)
    lat_mean = data.S @ W
    lat_var = config.latent_var_scale * np.einsum("ka,nk->na", W * W, data.input_var)
    Zu = farthest_point(lat_mean, config.m)
    ell = _median_sq_distance(lat_mean)
    kernels, noise, trials = [], [], []
    for j in range(data.d_y):
        y = data.Y[:, j]
        sd = float(np.std(y)) or 1.0
        k = KernelParams.create(sd, np.full(d_z, ell))
        kernels.append(k)
        noise.append(0.1 * sd)
        trials.append(optimal_inducing(Zu, k, 0.1 * sd, lat_mean, y))
    return RDVGPModel(
        W=W,
        kernels=kernels,
        noise_std=np.asarray(noise),
        inducing_inputs=Zu,
        inducing_trials=trials,
        train_means=data.S,
        train_input_var=data.input_var,
        latent_trial=LatentTrial(lat_mean, lat_var),
    )


# parameter packing --------------------------------------------------------


def params_from_model(model):
    """Unconstrained Euclidean parameters (logs of positive quantities)."""
    return {
        "log_amp": jnp.log(jnp.asarray([k.amplitude for k in model.kernels], dtype=float)),
        "log_ls": jnp.log(jnp.stack([jnp.asarray(k.lengthscales, dtype=float) for k in model.kernels])),
        "log_noise": jnp.log(jnp.asarray(model.noise_std)),
        "mu_u": jnp.stack([jnp.asarray(t.mean, dtype=float) for t in model.inducing_trials]),
        "log_var_u": jnp.log(jnp.stack([jnp.asarray(t.var, dtype=float) for t in model.inducing_trials])),
        "Zu": jnp.asarray(model.inducing_inputs),
        "lat_mean": jnp.asarray(model.latent_trial.mean),
        "log_lat_var": jnp.log(jnp.asarray(model.latent_trial.var)),
    }


def model_from_params(template, params, W, **extra):
    p = {k: np.asarray(v) for k, v in params.items()}
    d_y = p["log_amp"].shape[0]
    return replace(
        template,
        W=np.asarray(W),
        kernels=tuple(KernelParams(float(np.exp(p["log_amp"][j])), np.exp(p["log_ls"][j])) for j in range(d_y)),
        noise_std=np.exp(p["log_noise"]),
        inducing_inputs=p["Zu"],
        inducing_trials=tuple(InducingTrial(p["mu_u"][j], np.exp(p["log_var_u"][j])) for j in range(d_y)),
        latent_trial=LatentTrial(p["lat_mean"], np.exp(p["log_lat_var"])),
        **extra,
    )


def make_objective(data):
    """ELBO as a jax function of ``(params, W, eps)``.

    ``eps`` holds standard-normal draws of shape (n_l, n, d_z); the latent
    samples are ``lat_mean + sqrt(lat_var) * eps[k]``.  Returns the ELBO and
    the largest Cholesky jitter used.
    """
    Y = jnp.asarray(data.Y)
    S = jnp.asarray(data.S)
    V = jnp.asarray(data.input_var)

    def objective(params, W, eps):
        d_y = params["log_amp"].shape[0]
        kernels = [KernelParams(jnp.exp(params["log_amp"][j]), jnp.exp(params["log_ls"][j])) for j in range(d_y)]
        inducing = [InducingTrial(params["mu_u"][j], jnp.exp(params["log_var_u"][j])) for j in range(d_y)]
        lat_var = jnp.exp(params["log_lat_var"])
        latent = LatentTrial(params["lat_mean"], lat_var)
        sd = jnp.sqrt(lat_var)
        Zs = params["lat_mean"] + sd * eps
        return elbo_core(
            Y, Zs, W, S, V, params["Zu"], kernels, jnp.exp(params["log_noise"]), inducing, latent, with_jitter=True
        )

    return objective


def _make_chunk_runner(objective, unravel, adam, cayley, n_l, n, d_z, length):
    def loss(flat, W, eps):
        val, jit = objective(unravel(flat), W, eps)
        return -val, (val, jit)

    grad_fn = jax.value_and_grad(loss, argnums=(0, 1), has_aux=True)

    def body(carry, key):
        flat, W, ast, cst, bad = carry
        eps = jax.random.normal(key, (n_l, n, d_z), dtype=flat.dtype)
        (_, (val, jit)), (g, gW) = grad_fn(flat, W, eps)
        finite = jnp.isfinite(val) & jnp.all(jnp.isfinite(g)) & jnp.all(jnp.isfinite(gW))
        new_flat, new_ast = adam_update(ast, flat, g, adam)
        new_W, new_cst = cayley_adam_update(cst, W, gW, cayley)
        keep = finite & ~bad

        def pick(a, b):
            return jax.tree_util.tree_map(lambda x, y: jnp.where(keep, x, y), a, b)

        carry = (
            pick(new_flat, flat),
            pick(new_W, W),
            pick(new_ast, ast),
            pick(new_cst, cst),
            bad | ~finite,
        )
        return carry, (val, jit, orthogonality_error(carry[1]))

    @jax.jit
    def run(carry, keys):
        return jax.lax.scan(body, carry, keys)

    return run


def _smoothed(trace, window):
    return float(np.mean(trace[-min(window, len(trace)):]))


def elbo_estimate(model, data, n_samples=64, seed=0):
    """ELBO averaged over ``n_samples`` independent latent draws."""
    objective = make_objective(data)
    params = params_from_model(model)
    key = jax.random.PRNGKey(seed)
    eps = jax.random.normal(key, (n_samples, data.n, model.d_z))
    val, _ = jax.jit(objective)(params, jnp.asarray(model.W), eps)
    return float(val)


def _train_restart(data, config, r, d_z, objective_cache, iterations=None, W=None):
    rec = RestartRecord(restart=r, w_init=w_mode_for_restart(config.w_init, r) if W is None else "retained")
    t0 = time.perf_counter()
    iterations = config.iterations if iterations is None else iterations
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, r]))
    try:
        start = init_params(data, config, rng, restart=r, d_z=d_z, W=W)
    except NumericalError as exc:
        rec.status, rec.reason = "aborted", f"initialisation failed: {exc}"
        return rec, None
    params = params_from_model(start)
    flat, unravel = ravel_pytree(params)
    runners = objective_cache.setdefault("runners", {})
    objective = objective_cache.setdefault("objective", make_objective(data))

    def runner(length):
        key = (d_z, flat.shape[0], length)
        if key not in runners:
            runners[key] = _make_chunk_runner(
                objective, unravel, config.adam, config.cayley, config.mc_samples, data.n, d_z, length
            )
        return runners[key]

    W = jnp.asarray(start.W)
    carry = (flat, W, adam_init(flat), cayley_init(W), jnp.asarray(False))
    base_key = jax.random.fold_in(jax.random.PRNGKey(config.seed), r)
    elbos, jitters, orth = [], [], []
    done = 0
    chunk = 0
    while done < iterations:
        length = min(config.check_every, iterations - done)
        keys = jax.random.split(jax.random.fold_in(base_key, chunk), length)
        carry, (val, jit, err) = runner(length)(carry, keys)
        val, jit, err = np.asarray(val), np.asarray(jit), np.asarray(err)
        if bool(carry[4]):
            bad = int(np.argmax(~np.isfinite(val))) if not np.all(np.isfinite(val)) else 0
            rec.status = "aborted"
            rec.reason = f"non-finite ELBO or gradient near iteration {done + bad}"
            log.warning("restart %d aborted: %s", r, rec.reason)
            elbos.append(val[np.isfinite(val)])
            break
        elbos.append(val)
        jitters.append(jit)
        orth.append(err)
        done += length
        chunk += 1
        if err[-1] > DRIFT_TOL:
            log.warning("restart %d: Stiefel drift %.2e at iteration %d; re-orthonormalising", r, err[-1], done)
            rec.drift_events.append({"iteration": done, "error": float(err[-1])})
            W_fixed = jnp.asarray(reorthonormalise(carry[1]))
            carry = (carry[0], W_fixed) + carry[2:]
    rec.wall_time = time.perf_counter() - t0
    rec.elbo_trace = np.concatenate(elbos) if elbos else np.empty(0)
    if jitters:
        jit_all = np.concatenate(jitters)
        rec.jitter_iterations = int(np.sum(jit_all > 0))
        rec.max_jitter = float(jit_all.max())
        rec.orthogonality_samples = np.concatenate(orth)
        rec.max_orthogonality_error = float(rec.orthogonality_samples.max())
    if rec.status != "ok":
        return rec, None
    rec.smoothed_final = _smoothed(rec.elbo_trace, config.smoothing)
    model = model_from_params(start, unravel(carry[0]), carry[1])
    rec.initial_elbo = float(rec.elbo_trace[0])
    return rec, model


def ard_relevance(model, per_output=False):
    """Relevance of each latent direction: the input variance projected onto
    it divided by a lengthscale.  By default the shortest lengthscale any
    output assigns the direction; ``per_output=True`` gives the
    ``d_y x d_z`` matrix instead."""
    prior_var = np.mean(np.einsum("ka,nk->na", model.W * model.W, model.train_input_var), axis=0)
    ls = np.stack([np.asarray(k.lengthscales) for k in model.kernels])
    rel = prior_var / ls
    return rel if per_output else rel.max(axis=0)


def ard_select(model, threshold=1e-2, data=None):
    """Drop latent directions that no output finds relevant.

    A direction survives if, for at least one output, its relevance is at
    least ``threshold`` times that output's largest relevance and above
    ``RELEVANCE_FLOOR``.  Lengthscales of different outputs are not on a
    common scale, hence the per-output comparison.  Returns
    ``(pruned_model, retained_d_z, relevance)``; at least one direction is
    always kept.

    Inducing inputs spread out in the full latent space can coincide once
    directions are removed, so the pruned model gets fresh inducing inputs
    (farthest-point selection over the pruned latent means) with inducing
    trials at their closed-form optimum.  ``data`` supplies the outputs for
    that step; without it the inducing inputs are only column-sliced.
    """
    per = ard_relevance(model, per_output=True)
    rel = per.max(axis=0)
    ok = (per >= threshold * per.max(axis=1, keepdims=True)) & (per >= RELEVANCE_FLOOR)
    keep = np.flatnonzero(ok.any(axis=0))
    if keep.size == 0:
        keep = np.array([int(np.argmax(rel))])
    if keep.size == model.d_z:
        return model, model.d_z, rel
    lt = model.latent_trial
    kernels = tuple(KernelParams(k.amplitude, np.asarray(k.lengthscales)[keep]) for k in model.kernels)
    lat = None if lt is None else LatentTrial(lt.mean[:, keep], lt.var[:, keep])
    Zu = model.inducing_inputs[:, keep]
    trials = model.inducing_trials
    if data is not None and lat is not None:
        Zu = farthest_point(lat.mean, model.m)
        trials = tuple(
            optimal_inducing(Zu, k, model.noise_std[j], lat.mean, data.Y[:, j]) for j, k in enumerate(kernels)
        )
    pruned = replace(
        model, W=model.W[:, keep], kernels=kernels, inducing_inputs=Zu, inducing_trials=trials, latent_trial=lat
    )
    return pruned, int(keep.size), rel


def _run_restarts(data, config, d_z, first, cache, iterations=None, W=None):
    """``W``, if given, is the starting projection of the first restart."""
    records, models = [], []
    for r in range(first, first + config.restarts):
        rec, model = _train_restart(data, config, r, d_z, cache, iterations, W if r == first else None)
        records.append(rec)
        models.append(model)
    ok = [i for i, rec in enumerate(records) if rec.status == "ok"]
    if not ok:
        raise TrainingError("all restarts aborted", [rec.to_dict() for rec in records])
    best = max(ok, key=lambda i: records[i].smoothed_final)
    return records, models[best], first + best


def train(data, config=None, spec=None):
    """Run all restarts and return ``(model, TrainReport)``.

    The restart with the highest smoothed final ELBO wins.  With
    ``d_z="auto"`` the model is first trained at ``d_z = d_s``; if
    :func:`ard_select` drops directions, a fresh set of restarts is trained
    at the retained dimension, the first of them starting from the retained
    directions.  Fine-tuning the pruned model instead tends
    to stay in the basin where the dropped inputs were explained by shifting
    the latent means, which predicts poorly at new designs.
    """
    config = config or TrainConfig()
    config.validate(data.n, data.d_s)
    d_z = config.candidate_dz(data.d_s)
    cache = {}
    records, model, best = _run_restarts(data, config, d_z, 0, cache)
    retained = d_z
    if config.d_z == "auto":
        model, retained, rel = ard_select(model, config.ard_threshold, data)
        iters = config.iterations if config.retrain_iterations is None else config.retrain_iterations
        if retained < d_z and iters > 0:
            more, model, best = _run_restarts(data, config, retained, config.restarts, cache, iters, model.W)
            records += more
    else:
        rel = ard_relevance(model)
    fingerprint = {"data_sha256": data_fingerprint(data), "config": config.to_dict(), "restart": best}
    model = replace(model, fingerprint=fingerprint, input_spec=spec)
    report = TrainReport(records, best, d_z, retained, np.asarray(rel).tolist(), config.to_dict())
    return model, report
