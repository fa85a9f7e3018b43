"""Robust design optimisation over the design-variable means.

The cost is ``(1 - alpha) E[J] / mu_bar + alpha sqrt(Var[J]) / sigma_bar``;
each constraint output ``H`` must satisfy ``E[H] + beta sqrt(Var[H]) <= 0``
and, when a cap is given, ``sqrt(Var[H]) <= cap``.  Moments come either from
a trained surrogate or from plain Monte Carlo on the black box.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class RDOProblem:
    spec: object
    alpha: float = 0.25
    mu_bar: float = 1.0
    sigma_bar: float = 1.0
    objective: int = 0
    constraints: tuple = ()
    beta: tuple = ()
    sigma_caps: tuple = ()

    def __post_init__(self):
        self.constraints = tuple(int(c) for c in self.constraints)
        self.beta = tuple(float(b) for b in self.beta) if self.beta else (0.0,) * len(self.constraints)
        self.sigma_caps = tuple(self.sigma_caps) if self.sigma_caps else (None,) * len(self.constraints)
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.sigma_bar == 0 or self.mu_bar == 0:
            raise ConfigError("normalisers must be non-zero")
        if len(self.beta) != len(self.constraints) or len(self.sigma_caps) != len(self.constraints):
            raise ConfigError("need one beta and one std cap (or null) per constraint")
        if any(b < 0 for b in self.beta):
            raise ConfigError("feasibility indices must be non-negative")
        if any(c is not None and c <= 0 for c in self.sigma_caps):
            raise ConfigError("std caps must be positive")

    @property
    def lower(self):
        return self.spec.design_lower

    @property
    def upper(self):
        return self.spec.design_upper


@dataclass
class RDOResult:
    design: np.ndarray
    cost: float
    margins: np.ndarray
    feasible: bool
    evaluator: dict
    trace: list = field(default_factory=list)

    def to_dict(self):
        return {
            "design": np.asarray(self.design).tolist(),
            "cost": self.cost,
            "margins": np.asarray(self.margins).tolist(),
            "feasible": self.feasible,
            "evaluator": self.evaluator,
        }

    def trace_rows(self):
        return [("generation", "best_cost", "best_violation", "feasible_count") + tuple(
            f"design_{i + 1}" for i in range(len(self.design)))] + [
            (t["generation"], t["best_cost"], t["best_violation"], t["feasible_count"], *t["best_design"])
            for t in self.trace
        ]


# evaluators ---------------------------------------------------------------


class SurrogateEvaluator:
    """Marginal moments from a trained surrogate.

    Every call to :meth:`moments` draws one block of latent noise shared by
    all candidates in the batch (common random numbers).
    """

    kind = "surrogate"

    def __init__(self, model, spec, n_mc=512):
        from .model import marginal_moments_batch

        if n_mc < 2:
            raise ConfigError("n_mc must be at least 2")
        self.model = model
        self.spec = spec
        self.n_mc = int(n_mc)
        self.calls = 0
        self._batch = marginal_moments_batch

    def moments(self, designs, rng):
        designs = np.atleast_2d(np.asarray(designs, dtype=float))
        S_bar = self.spec.full_mean(designs)
        eps = rng.standard_normal((self.n_mc, self.model.d_z))
        var = np.stack([self.spec.var_at(s) for s in S_bar])
        self.calls += designs.shape[0]
        return self._batch(self.model, S_bar, eps, var)

    def stats(self):
        return {"kind": self.kind, "calls": self.calls, "n_mc": self.n_mc}


class OracleEvaluator:
    """Plain Monte Carlo moments of the black box, common noise per batch."""

    kind = "oracle"

    def __init__(self, model, spec, n_mc=10_000):
        if n_mc < 2:
            raise ConfigError("n_mc must be at least 2")
        self.model = model
        self.spec = spec
        self.n_mc = int(n_mc)
        self.calls = 0

    def moments(self, designs, rng):
        designs = np.atleast_2d(np.asarray(designs, dtype=float))
        S_bar = self.spec.full_mean(designs)
        eps = rng.standard_normal((self.n_mc, self.spec.d_s))
        means = np.empty((designs.shape[0], self.model.d_y))
        variances = np.empty_like(means)
        for i, s in enumerate(S_bar):
            Y = self.model.evaluate(s + eps * self.spec.std_at(s))
            means[i] = Y.mean(axis=0)
            variances[i] = Y.var(axis=0, ddof=1)
        self.calls += designs.shape[0]
        return means, variances

    def stats(self):
        return {"kind": self.kind, "calls": self.calls, "n_mc": self.n_mc}


# cost and constraints -----------------------------------------------------


def cost_from_moments(means, variances, problem):
    j = problem.objective
    return (1.0 - problem.alpha) * means[..., j] / problem.mu_bar + problem.alpha * np.sqrt(
        np.maximum(variances[..., j], 0.0)
    ) / problem.sigma_bar


def margins_from_moments(means, variances, problem):
    """(p, k) array of constraint margins; feasible iff all are <= 0.

    Per constraint: ``E + beta sd`` followed by ``sd - cap`` when a cap is set.
    """
    means = np.atleast_2d(means)
    variances = np.atleast_2d(variances)
    cols = []
    for c, b, cap in zip(problem.constraints, problem.beta, problem.sigma_caps):
        sd = np.sqrt(np.maximum(variances[:, c], 0.0))
        cols.append(means[:, c] + b * sd)
        if cap is not None:
            cols.append(sd - cap)
    if not cols:
        return np.zeros((means.shape[0], 0))
    return np.stack(cols, axis=1)


def _check_bounds(designs, problem):
    if np.any(designs < problem.lower - 1e-12) or np.any(designs > problem.upper + 1e-12):
        raise ConfigError("design outside bounds")


def robust_cost(evaluator, design, problem, rng):
    design = np.atleast_2d(np.asarray(design, dtype=float))
    _check_bounds(design, problem)
    means, variances = evaluator.moments(design, rng)
    return float(cost_from_moments(means, variances, problem)[0])


def constraint_margins(evaluator, design, problem, rng):
    design = np.atleast_2d(np.asarray(design, dtype=float))
    _check_bounds(design, problem)
    means, variances = evaluator.moments(design, rng)
    return margins_from_moments(means, variances, problem)[0]


def compute_normalisers(data, objective=0):
    """Mean and (sample) standard deviation of the objective observations."""
    y = data.Y[:, objective]
    if y.shape[0] < 2:
        raise ConfigError("normalisers need at least two observations")
    mu = float(np.mean(y))
    sd = float(np.std(y, ddof=1))
    if sd == 0:
        log.warning("objective observations are constant; using sigma_bar = 1")
        sd = 1.0
    if mu == 0:
        log.warning("objective observations average to zero; using mu_bar = 1")
        mu = 1.0
    return mu, sd


# search -------------------------------------------------------------------


def _evaluate(evaluator, designs, problem, rng):
    means, variances = evaluator.moments(designs, rng)
    cost = cost_from_moments(means, variances, problem)
    margins = margins_from_moments(means, variances, problem)
    violation = np.sum(np.maximum(margins, 0.0), axis=1)
    return cost, margins, violation


def _better(cost_a, viol_a, cost_b, viol_b):
    """Feasibility-first comparison: is candidate a preferred over b?"""
    if viol_a == 0 and viol_b == 0:
        return cost_a < cost_b
    if viol_a == 0 or viol_b == 0:
        return viol_a == 0
    return viol_a < viol_b


def _rank_best(cost, violation):
    feasible = violation == 0
    if np.any(feasible):
        idx = np.flatnonzero(feasible)
        return int(idx[np.argmin(cost[idx])])
    return int(np.argmin(violation))


def grid_search(evaluator, problem, n_grid, rng):
    """Exhaustive search on a regular grid (one design variable only)."""
    if problem.spec.d_d != 1:
        raise ConfigError("grid search supports a single design variable")
    grid = np.linspace(problem.lower[0], problem.upper[0], n_grid)[:, None]
    cost, margins, violation = _evaluate(evaluator, grid, problem, rng)
    best = _rank_best(cost, violation)
    return RDOResult(
        design=grid[best],
        cost=float(cost[best]),
        margins=margins[best],
        feasible=bool(violation[best] == 0),
        evaluator=evaluator.stats(),
        trace=[],
    ), (grid[:, 0], cost, margins)


@dataclass
class GAConfig:
    population: int = 50
    generations: int = 60
    crossover_prob: float = 0.9
    eta_c: float = 15.0
    mutation_prob: Optional[float] = None
    eta_m: float = 20.0
    tournament: int = 2

    def __post_init__(self):
        if self.population < 50:
            raise ConfigError("population must be at least 50")
        if self.generations < 1:
            raise ConfigError("generations must be positive")
        if self.tournament < 2:
            raise ConfigError("tournament size must be at least 2")


def _sbx(a, b, lo, hi, eta, rng):
    """Simulated binary crossover, bounded variant."""
    c1, c2 = a.copy(), b.copy()
    for i in range(a.shape[0]):
        if rng.random() > 0.5 or abs(a[i] - b[i]) < 1e-14:
            continue
        x1, x2 = min(a[i], b[i]), max(a[i], b[i])
        u = rng.random()
        out = []
        for bound, sign in ((x1 - lo[i], -1.0), (hi[i] - x2, 1.0)):
            beta = 1.0 + 2.0 * bound / (x2 - x1)
            alpha = 2.0 - beta ** (-(eta + 1.0))
            if u <= 1.0 / alpha:
                bq = (u * alpha) ** (1.0 / (eta + 1.0))
            else:
                bq = (1.0 / (2.0 - u * alpha)) ** (1.0 / (eta + 1.0))
            out.append(0.5 * ((x1 + x2) + sign * bq * (x2 - x1)))
        y1, y2 = np.clip(out, lo[i], hi[i])
        if rng.random() < 0.5:
            y1, y2 = y2, y1
        c1[i], c2[i] = y1, y2
    return c1, c2


def _poly_mutation(x, lo, hi, eta, prob, rng):
    x = x.copy()
    for i in range(x.shape[0]):
        if rng.random() >= prob:
            continue
        span = hi[i] - lo[i]
        d1, d2 = (x[i] - lo[i]) / span, (hi[i] - x[i]) / span
        u = rng.random()
        p = 1.0 / (eta + 1.0)
        if u < 0.5:
            dq = (2 * u + (1 - 2 * u) * (1 - d1) ** (eta + 1)) ** p - 1.0
        else:
            dq = 1.0 - (2 * (1 - u) + 2 * (u - 0.5) * (1 - d2) ** (eta + 1)) ** p
        x[i] = x[i] + dq * span
    return np.clip(x, lo, hi)


def solve_ga(evaluator, problem, ga=None, rng=None, initial=None):
    """Real-coded genetic algorithm with feasibility-first tournaments.

    The whole population (including the carried-over elite) is re-evaluated
    every generation with fresh common random numbers; the returned design
    is the best of the final generation.
    """
    ga = ga or GAConfig()
    rng = rng or np.random.default_rng(0)
    lo, hi = problem.lower, problem.upper
    d = lo.shape[0]
    pm = ga.mutation_prob if ga.mutation_prob is not None else 1.0 / d
    pop = lo + (hi - lo) * rng.random((ga.population, d))
    if initial is not None:
        init = np.clip(np.atleast_2d(np.asarray(initial, dtype=float)), lo, hi)
        pop[: init.shape[0]] = init[: ga.population]
    trace = []
    for gen in range(ga.generations):
        _check_bounds(pop, problem)
        cost, margins, viol = _evaluate(evaluator, pop, problem, rng)
        best = _rank_best(cost, viol)
        trace.append(
            {
                "generation": gen,
                "best_cost": float(cost[best]),
                "best_violation": float(viol[best]),
                "feasible_count": int(np.sum(viol == 0)),
                "best_design": pop[best].tolist(),
            }
        )
        if gen == ga.generations - 1:
            break

        def select():
            idx = rng.choice(ga.population, size=ga.tournament, replace=False)
            win = idx[0]
            for k in idx[1:]:
                if _better(cost[k], viol[k], cost[win], viol[win]):
                    win = k
            return pop[win]

        children = [pop[best].copy()]
        while len(children) < ga.population:
            a, b = select(), select()
            if rng.random() < ga.crossover_prob:
                a, b = _sbx(a, b, lo, hi, ga.eta_c, rng)
            children.append(_poly_mutation(a, lo, hi, ga.eta_m, pm, rng))
            if len(children) < ga.population:
                children.append(_poly_mutation(b, lo, hi, ga.eta_m, pm, rng))
        pop = np.asarray(children)
    feasible = bool(viol[best] == 0)
    if not feasible:
        log.warning("no feasible design found; returning the least-violating one")
    return RDOResult(
        design=pop[best].copy(),
        cost=float(cost[best]),
        margins=margins[best],
        feasible=feasible,
        evaluator=evaluator.stats(),
        trace=trace,
    )


def oracle_optimum(evaluator, problem, rng, n_grid=201, ga=None):
    """Grid search followed by a GA seeded with the grid optimum."""
    grid_res, _ = grid_search(evaluator, problem, n_grid, rng)
    return solve_ga(evaluator, problem, ga, rng, initial=grid_res.design), grid_res
