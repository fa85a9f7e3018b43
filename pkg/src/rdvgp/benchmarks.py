"""Analytic test problems, the Monte Carlo oracle and an external-model adapter."""

import csv
import io
import logging
import shlex
import subprocess
from dataclasses import dataclass

import numpy as np

from .data import InputSpec
from .errors import ConfigError, EvaluationError
from .sampling import mc_moments

log = logging.getLogger(__name__)

ORACLE_SAMPLES = 10_000


class BlackBoxModel:
    """Deterministic map from ``d_s`` inputs to ``d_y`` outputs.

    Subclasses implement ``__call__`` for one input vector.  Setting
    ``vectorised`` and providing ``evaluate`` lets callers pass whole
    matrices.
    """

    d_s = 1
    d_y = 1
    thread_safe = True
    vectorised = False

    def __call__(self, s):
        raise NotImplementedError

    def evaluate(self, S):
        return np.stack([np.atleast_1d(self(s)) for s in np.atleast_2d(S)])


def eval_1d(s):
    """Multimodal scalar objective ``-0.5 s sin(3 pi s^2) + 0.25 s``."""
    s = np.asarray(s, dtype=float)
    return -0.5 * s * np.sin(3.0 * np.pi * s**2) + 0.25 * s


def std_1d(s_bar):
    """Mean-dependent input spread ``0.05 - 0.025 s_bar``."""
    return 0.05 - 0.025 * np.asarray(s_bar, dtype=float)


def eval_3d(s):
    """Objective and constraint of the three-input example; returns (..., 2)."""
    s = np.asarray(s, dtype=float)
    s1, s2, s3 = s[..., 0], s[..., 1], s[..., 2]
    J = (s2 * s1 - 2.0) ** 2 * np.sin(12.0 * s1 - 4.0) + 8.0 * s1 + s3
    H = -np.cos(2.0 * np.pi * s1) - s3 - 0.7
    return np.stack([J, H], axis=-1)


class OneDimensional(BlackBoxModel):
    d_s, d_y = 1, 1
    vectorised = True

    def __call__(self, s):
        return np.atleast_1d(eval_1d(np.asarray(s, dtype=float).reshape(-1)[0]))

    def evaluate(self, S):
        return eval_1d(np.asarray(S, dtype=float).reshape(-1, 1))


class ThreeDimensional(BlackBoxModel):
    d_s, d_y = 3, 2
    vectorised = True

    def __call__(self, s):
        return eval_3d(np.asarray(s, dtype=float).reshape(3))

    def evaluate(self, S):
        return eval_3d(np.atleast_2d(np.asarray(S, dtype=float)))


def spec_1d():
    # std = 0.05 - 0.025 * s_bar
    return InputSpec(design_lower=[0.0], design_upper=[1.0], design_std=[0.05], std_slope=[[-0.025]])


def spec_3d(sigma1, sigma2):
    return InputSpec(
        design_lower=[0.0],
        design_upper=[1.0],
        design_std=[sigma1],
        fixed_mean=[6.0, 0.0],
        fixed_std=[sigma2, 0.1],
    )


@dataclass
class Benchmark:
    name: str
    model: BlackBoxModel
    spec: InputSpec


def get_benchmark(name, **params):
    if name in ("1d", "one_dimensional"):
        return Benchmark("1d", OneDimensional(), spec_1d())
    if name in ("3d", "three_dimensional"):
        try:
            return Benchmark("3d", ThreeDimensional(), spec_3d(params["sigma1"], params["sigma2"]))
        except KeyError as exc:
            raise ConfigError(f"3d benchmark needs parameter {exc}") from None
    raise ConfigError(f"unknown benchmark {name!r}")


@dataclass
class OracleCurve:
    grid: np.ndarray
    mean: np.ndarray
    variance: np.ndarray


def oracle_curve(model, spec, grid, n_mc=ORACLE_SAMPLES, rng=None, common_noise=True):
    """Monte Carlo moments of every output along a design-mean grid.

    With ``common_noise`` one standard-normal block is shared by all grid
    points, which keeps the curve smooth in the design mean.
    """
    rng = rng or np.random.default_rng(0)
    grid = np.asarray(grid, dtype=float)
    G = grid.reshape(len(grid), -1)
    means = np.empty((len(G), model.d_y))
    variances = np.empty_like(means)
    eps = rng.standard_normal((n_mc, spec.d_s)) if common_noise else None
    for k, g in enumerate(G):
        s_bar = spec.full_mean(g)
        if common_noise:
            S = s_bar + eps * spec.std_at(s_bar)
            Y = model.evaluate(S)
            means[k] = Y.mean(axis=0)
            variances[k] = Y.var(axis=0, ddof=1)
        else:
            mom = mc_moments(model, spec.density_at(s_bar), n_mc, rng)
            means[k], variances[k] = mom.mean, mom.variance
    return OracleCurve(grid, means, variances)


class ExternalModel(BlackBoxModel):
    """Runs an external executable once per input row.

    Protocol: the input row is written as one CSV line (17 significant
    digits) to the process's standard input; the process prints ``d_y``
    comma-separated numbers on standard output and exits with status 0.
    """

    vectorised = False

    def __init__(self, command, d_s, d_y, timeout=60.0, thread_safe=False, cwd=None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ConfigError("external model command is empty")
        self.d_s = int(d_s)
        self.d_y = int(d_y)
        self.timeout = timeout
        self.thread_safe = thread_safe
        self.cwd = cwd

    def __call__(self, s):
        s = np.asarray(s, dtype=float).reshape(-1)
        if s.shape[0] != self.d_s:
            raise ConfigError(f"external model expects {self.d_s} inputs")
        line = ",".join(format(v, ".17g") for v in s) + "\n"
        try:
            proc = subprocess.run(
                self.command, input=line, capture_output=True, text=True,
                timeout=self.timeout, cwd=self.cwd,
            )
        except subprocess.TimeoutExpired as exc:
            raise EvaluationError(f"external model timed out after {self.timeout}s", row=line.strip()) from exc
        except OSError as exc:
            raise EvaluationError(f"could not start external model: {exc}", row=line.strip()) from exc
        if proc.returncode != 0:
            raise EvaluationError(
                f"external model exited with status {proc.returncode}", row=line.strip(), stderr=proc.stderr
            )
        try:
            rows = [r for r in csv.reader(io.StringIO(proc.stdout.strip())) if r]
            out = np.array([float(v) for v in rows[-1]], dtype=float)
        except (ValueError, IndexError) as exc:
            raise EvaluationError(f"malformed external output {proc.stdout!r}", row=line.strip(), stderr=proc.stderr) from exc
        if out.shape != (self.d_y,):
            raise EvaluationError(
                f"external model returned {out.size} values, expected {self.d_y}", row=line.strip(), stderr=proc.stderr
            )
        return out


def external_model(config):
    """Build an :class:`ExternalModel` from ``{"command", "d_s", "d_y", ...}``."""
    try:
        return ExternalModel(
            config["command"], config["d_s"], config["d_y"],
            timeout=config.get("timeout", 60.0),
            thread_safe=config.get("thread_safe", False),
            cwd=config.get("cwd"),
        )
    except KeyError as exc:
        raise ConfigError(f"external model config missing {exc}") from None
