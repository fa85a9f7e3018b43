"""Latin hypercube designs, training-set generation and Monte Carlo moments.

"Slice" here means sweeping the design-variable means with the immutable
means held fixed; it is unrelated to MCMC slice sampling.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import TrainingSet
from .errors import ConfigError, EvaluationError

log = logging.getLogger(__name__)


def lhs(dim, n, rng):
    """McKay Latin hypercube: one uniform draw per stratum per dimension."""
    if n < 1 or dim < 1:
        raise ConfigError("lhs needs n >= 1 and dim >= 1")
    u = rng.random((n, dim))
    strata = np.stack([rng.permutation(n) for _ in range(dim)], axis=1)
    return (strata + u) / n


def build_training_box(spec):
    """Per-dimension sampling interval, padded by two standard deviations.

    Returns ``(lo, hi)`` arrays of length ``d_s``.  With a mean-dependent
    spread the padding uses the spread at the corresponding bound.
    """
    lo_mean, hi_mean = spec.lower_mean(), spec.upper_mean()
    lo = lo_mean - 2.0 * spec.std_at(lo_mean)
    hi = hi_mean + 2.0 * spec.std_at(hi_mean)
    return lo, hi


def box_around(spec, centre_design):
    """Two-standard-deviation box around one mean design (immutable inputs at
    their means); used for supplementary samples near a candidate optimum."""
    c = spec.full_mean(np.atleast_1d(centre_design))
    sd = spec.std_at(c)
    return c - 2.0 * sd, c + 2.0 * sd


@dataclass
class DatasetReport:
    requested: int
    evaluated: int
    failures: list = field(default_factory=list)

    def to_dict(self):
        return {"requested": self.requested, "evaluated": self.evaluated, "failures": self.failures}


def _evaluate_rows(model, S):
    """Evaluate row by row, collecting failures.  Returns (Y, ok_mask, failures)."""
    vectorised = getattr(model, "evaluate", None)
    if vectorised is not None and getattr(model, "vectorised", False):
        return np.atleast_2d(vectorised(S)).reshape(S.shape[0], -1), np.ones(S.shape[0], bool), []

    def one(i):
        try:
            return i, np.atleast_1d(np.asarray(model(S[i]), dtype=float)), None
        except EvaluationError as exc:
            return i, None, {"row": i, "error": str(exc), "stderr": exc.stderr}

    if getattr(model, "thread_safe", False):
        with ThreadPoolExecutor() as pool:
            results = list(pool.map(one, range(S.shape[0])))
    else:
        results = [one(i) for i in range(S.shape[0])]
    results.sort(key=lambda r: r[0])
    Y = np.full((S.shape[0], model.d_y), np.nan)
    ok = np.zeros(S.shape[0], bool)
    failures = []
    for i, y, err in results:
        if err is not None:
            failures.append(err)
            continue
        if y.shape != (model.d_y,) or not np.all(np.isfinite(y)):
            failures.append({"row": i, "error": f"bad output {y!r}", "stderr": None})
            continue
        Y[i] = y
        ok[i] = True
    return Y, ok, failures


def generate_dataset(spec, model, n, rng, box=None):
    """LHS design mapped into the training box and evaluated by ``model``.

    Rows whose evaluation fails are dropped and listed in the report.
    Returns ``(TrainingSet, DatasetReport)``.
    """
    if n < 1:
        raise ConfigError("n must be positive")
    if model.d_s != spec.d_s:
        raise ConfigError(f"model expects {model.d_s} inputs, spec has {spec.d_s}")
    lo, hi = build_training_box(spec) if box is None else box
    S = lo + (hi - lo) * lhs(spec.d_s, n, rng)
    Y, ok, failures = _evaluate_rows(model, S)
    if failures:
        log.warning("%d of %d evaluations failed and were excluded", len(failures), n)
    data = TrainingSet.from_spec(S[ok], Y[ok], spec)
    return data, DatasetReport(n, int(ok.sum()), failures)


@dataclass
class Moments:
    mean: np.ndarray
    variance: np.ndarray
    mean_se: np.ndarray
    variance_se: np.ndarray
    samples: np.ndarray = None


def _draw_inputs(density, n_mc, rng):
    eps = rng.standard_normal((n_mc, density.dim))
    if density.is_diagonal:
        return density.mean + eps * np.sqrt(density.var)
    return density.mean + eps @ density.factor().T


def mc_moments(model, density, n_mc, rng, keep_samples=False):
    """Plain Monte Carlo mean and unbiased variance of every output.

    Standard errors: ``sqrt(var / n)`` for the mean and
    ``sqrt((m4 - var^2 (n-3)/(n-1)) / n)`` for the variance.
    """
    if n_mc < 2:
        raise ConfigError("n_mc must be at least 2")
    S = _draw_inputs(density, n_mc, rng)
    Y, ok, failures = _evaluate_rows(model, S)
    if failures:
        raise EvaluationError(f"{len(failures)} evaluations failed during MC sampling", row=failures[0]["row"])
    mean = Y.mean(axis=0)
    var = Y.var(axis=0, ddof=1)
    m4 = np.mean((Y - mean) ** 4, axis=0)
    var_se = np.sqrt(np.maximum(m4 - var**2 * (n_mc - 3) / (n_mc - 1), 0.0) / n_mc)
    return Moments(mean, var, np.sqrt(var / n_mc), var_se, Y if keep_samples else None)


@dataclass
class SliceTable:
    """Per grid point marginal statistics, ``(n_grid, d_y)`` arrays."""

    grid: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    samples: list = None

    def rows(self):
        for k, g in enumerate(self.grid):
            yield np.atleast_1d(g), self.mean[k], self.variance[k]


def slice_eval(source, grid, spec, n_mc, rng, keep_samples=False):
    """Sweep design means over ``grid`` with immutable means fixed.

    ``source`` is either a trained surrogate (uses its marginal predictive)
    or a black-box model (plain Monte Carlo).  Grid entries are design
    vectors (or scalars when there is one design variable).
    """
    from .model import RDVGPModel, marginal_predictive

    grid = np.asarray(grid, dtype=float)
    G = grid.reshape(len(grid), -1)
    if G.shape[1] != spec.d_d:
        raise ConfigError("grid points must have one entry per design variable")
    if np.any(G < spec.design_lower - 1e-12) or np.any(G > spec.design_upper + 1e-12):
        raise ConfigError("grid leaves the design bounds")
    means, variances, samples = [], [], []
    for g in G:
        s_bar = spec.full_mean(g)
        if isinstance(source, RDVGPModel):
            preds = [marginal_predictive(source, s_bar, j, n_mc, rng, input_var=spec.var_at(s_bar)) for j in range(source.d_y)]
            means.append([p.mean for p in preds])
            variances.append([p.variance for p in preds])
            if keep_samples:
                samples.append(np.stack([p.samples for p in preds], axis=1))
        else:
            mom = mc_moments(source, spec.density_at(s_bar), n_mc, rng, keep_samples=keep_samples)
            means.append(mom.mean)
            variances.append(mom.variance)
            if keep_samples:
                samples.append(mom.samples)
    return SliceTable(grid, np.asarray(means), np.asarray(variances), samples if keep_samples else None)
