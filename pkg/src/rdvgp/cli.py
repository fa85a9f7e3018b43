"""Command-line front end: sample, train, validate and rdo.

Each command reads a JSON config, writes CSV/JSON outputs into ``--out``
and a ``<command>.manifest.json`` describing the run.  Exit codes: 0
success, 2 configuration error, 3 data-generation error, 4 training error.
"""

import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .errors import ConfigError, EvaluationError, MetricUndefinedError, NumericalError, TrainingError

log = logging.getLogger("rdvgp")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAIN = 4


class CommandFailed(Exception):
    def __init__(self, code, message, details=None):
        super().__init__(message)
        self.code = code
        self.details = details


# helpers ------------------------------------------------------------------


def _load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _versions():
    import jax
    import scipy

    return {
        "rdvgp": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "jax": jax.__version__,
    }


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be at least 1")
    os.environ["XLA_FLAGS"] = (
        os.environ.get("XLA_FLAGS", "") + f" --xla_cpu_multi_thread_eigen={'false' if n == 1 else 'true'}"
        f" intra_op_parallelism_threads={n}"
    ).strip()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


def _seed(cfg, seed):
    value = seed if seed is not None else cfg.get("seed", 0)
    try:
        value = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"seed must be an integer, got {value!r}") from None
    if not 0 <= value < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return value


def _streams(seed, count):
    """Independent generators spawned from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def _source(cfg):
    """Black box and input spec named by ``cfg``: a built-in benchmark or an external command."""
    from .benchmarks import external_model, get_benchmark
    from .data import InputSpec

    if "benchmark" in cfg:
        b = cfg["benchmark"]
        if isinstance(b, str):
            b = {"name": b}
        params = {k: v for k, v in b.items() if k != "name"}
        if "name" not in b:
            raise ConfigError("benchmark needs a name")
        bm = get_benchmark(b["name"], **params)
        return bm.model, bm.spec
    if "external" in cfg:
        if "input_spec" not in cfg:
            raise ConfigError("external model needs an input_spec")
        spec = InputSpec.from_dict(cfg["input_spec"])
        model = external_model(cfg["external"])
        if model.d_s != spec.d_s:
            raise ConfigError("external model d_s does not match input_spec")
        return model, spec
    raise ConfigError("config must name a 'benchmark' or an 'external' model")


def _load_model(path):
    from .gp_baseline import BaselineModel
    from .model import RDVGPModel

    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"model file {path} not found")
    d = json.loads(p.read_text())
    if d.get("kind") == "gp_baseline":
        return BaselineModel.from_dict(d)
    return RDVGPModel.from_dict(d)


class _Run:
    """Collects outputs in memory and writes them, with a manifest, at the end."""

    def __init__(self, command, cfg, seed, out, inputs):
        self.command = command
        self.cfg = cfg
        self.seed = seed
        self.out = Path(out)
        self.inputs = [str(i) for i in inputs]
        self.files = {}
        self.t0 = time.perf_counter()

    @property
    def manifest_name(self):
        return f"{self.command}.manifest.json"

    def json(self, name, obj):
        if isinstance(obj, dict):
            obj = {**obj, "manifest": self.manifest_name}
        self.files[name] = json.dumps(obj, indent=1, sort_keys=True) + "\n"

    def text(self, name, text):
        self.files[name] = text

    def csv(self, name, rows):
        lines = []
        for row in rows:
            lines.append(",".join(_fmt(v) for v in row))
        self.files[name] = "\n".join(lines) + "\n"

    def commit(self):
        self.out.mkdir(parents=True, exist_ok=True)
        for name, content in self.files.items():
            (self.out / name).write_text(content)
        manifest = {
            "command": self.command,
            "config_sha256": _config_hash(self.cfg),
            "config": self.cfg,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": sorted(self.files),
            "versions": _versions(),
            "wall_time_s": time.perf_counter() - self.t0,
        }
        (self.out / self.manifest_name).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        for name in sorted(self.files):
            click.echo(str(self.out / name))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


# commands -------------------------------------------------------------------

common = [
    click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON configuration file."),
    click.option("--seed", type=int, default=None, help="Overrides the config seed."),
    click.option("--threads", type=int, default=None, help="Thread count; 1 gives the bit-exact path."),
    click.option("--out", type=click.Path(file_okay=False), default=".", show_default=True, help="Output directory."),
]


def with_common(f):
    for opt in reversed(common):
        f = opt(f)
    return f


@click.group()
@click.version_option(__version__, prog_name="rdvgp")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Reduced-dimension variational GP surrogates for robust design."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@with_common
def sample(config_path, seed, threads, out):
    """Draw an LHS training set from a benchmark or external model.

    Config keys: benchmark|external (+input_spec), n, seed, drop_failed.
    """
    from .data import write_dataset
    from .sampling import generate_dataset

    cfg = _load_config(config_path)
    _set_threads(threads)
    seed = _seed(cfg, seed)
    model, spec = _source(cfg)
    n = int(cfg.get("n", 100))
    run = _Run("sample", cfg, seed, out, [config_path])
    data, report = generate_dataset(spec, model, n, np.random.default_rng(seed))
    if report.failures and not cfg.get("drop_failed", False):
        raise CommandFailed(EXIT_DATA, f"{len(report.failures)} of {n} evaluations failed", report.to_dict())
    if data.n == 0:
        raise CommandFailed(EXIT_DATA, "every evaluation failed", report.to_dict())
    run.out.mkdir(parents=True, exist_ok=True)
    path = write_dataset(
        run.out / "dataset.csv", data, spec, seed, extra={"manifest": run.manifest_name, "report": report.to_dict()}
    )
    run.files["dataset.csv"] = path.read_text()
    run.files["dataset.json"] = path.with_suffix(".json").read_text()
    run.commit()


@cli.command()
@click.argument("dataset", type=click.Path(dir_okay=False))
@with_common
@click.option("--baseline-gp", is_flag=True, help="Fit standard GPs (one per output) instead.")
def train(dataset, config_path, seed, threads, out, baseline_gp):
    """Train a surrogate on DATASET (CSV with JSON sidecar).

    The config is a training configuration (see TrainConfig); with
    --baseline-gp it may hold iterations, restarts and step_size.
    """
    from .data import read_dataset

    cfg = _load_config(config_path)
    _set_threads(threads)
    seed = _seed(cfg, seed)
    if not Path(dataset).is_file():
        raise ConfigError(f"dataset {dataset} not found")
    data, spec, _ = read_dataset(dataset)
    run = _Run("train", cfg, seed, out, [dataset, config_path])
    if baseline_gp:
        from .gp_baseline import OptimizerConfig, fit_all

        known = {"iterations", "restarts", "step_size"}
        extra = set(cfg) - known - {"seed"}
        if extra:
            raise ConfigError(f"unknown baseline options {sorted(extra)}")
        opt = OptimizerConfig(**{k: cfg[k] for k in known if k in cfg}, seed=seed)
        model, results = fit_all(data, opt, spec)
        run.json("model.json", model.to_dict())
        run.json("train_report.json", {"outputs": [{"objective": r.objective, "restarts": r.restarts} for r in results]})
    else:
        from .model import RDVGPModel  # noqa: F401  (keeps import errors out of training time)
        from .trainer import TrainConfig
        from .trainer import train as run_training

        tc = TrainConfig.from_dict({**cfg, "seed": seed})
        tc.validate(data.n, data.d_s)
        model, report = run_training(data, tc, spec=spec)
        run.text("model.json", model.to_json() + "\n")
        run.json("train_report.json", report.to_dict())
    run.commit()


def _surrogate_stats(model, spec, designs, n_mc, rng, keep_samples=False):
    """Marginal means/variances (and optionally samples) of a surrogate at design means."""
    from .gp_baseline import BaselineModel
    from .sampling import slice_eval

    if not isinstance(model, BaselineModel):
        return slice_eval(model, designs, spec, n_mc, rng, keep_samples=keep_samples)
    from .sampling import SliceTable

    means, variances, samples = [], [], []
    for g in np.asarray(designs, dtype=float).reshape(len(designs), -1):
        s_bar = spec.full_mean(g)
        draws = model.marginal_samples(s_bar, n_mc, rng, spec.var_at(s_bar))
        means.append(draws.mean(axis=0))
        variances.append(draws.var(axis=0, ddof=1))
        samples.append(draws)
    return SliceTable(np.asarray(designs), np.asarray(means), np.asarray(variances), samples if keep_samples else None)


@cli.command()
@click.argument("model_path", type=click.Path(dir_okay=False))
@with_common
def validate(model_path, config_path, seed, threads, out):
    """Compare a trained surrogate with the Monte Carlo oracle.

    Config keys: benchmark|external, n_v, n_mc, oracle_n_mc, slice_points,
    mmd_designs, seed.
    """
    from .benchmarks import oracle_curve
    from .metrics import ValidationRecord, metrics_report, mmd
    from .sampling import lhs

    cfg = _load_config(config_path)
    _set_threads(threads)
    seed = _seed(cfg, seed)
    n_v = int(cfg.get("n_v", 30))
    if n_v < 2:
        raise MetricUndefinedError("n_v must be at least 2 for coefficients of determination")
    n_mc = int(cfg.get("n_mc", 10_000))
    oracle_mc = int(cfg.get("oracle_n_mc", 10_000))
    n_slice = int(cfg.get("slice_points", 101))
    bb, spec = _source(cfg)
    model = _load_model(model_path)
    run = _Run("validate", cfg, seed, out, [model_path, config_path])
    rngs = _streams(seed, 6)

    lo, hi = spec.design_lower, spec.design_upper
    designs = lo + (hi - lo) * lhs(spec.d_d, n_v, rngs[0])
    oracle = oracle_curve(bb, spec, designs, oracle_mc, rngs[1])
    sur = _surrogate_stats(model, spec, designs, n_mc, rngs[2])
    records = [
        ValidationRecord(oracle.mean[:, j], oracle.variance[:, j], sur.mean[:, j], sur.variance[:, j])
        for j in range(bb.d_y)
    ]
    mmd_values = []
    for g in cfg.get("mmd_designs", []):
        g = np.atleast_1d(np.asarray(g, dtype=float))
        o = oracle_curve(bb, spec, g[None, :], oracle_mc, rngs[3])
        s_bar = spec.full_mean(g)
        truth = bb.evaluate(s_bar + rngs[3].standard_normal((oracle_mc, spec.d_s)) * spec.std_at(s_bar))
        pred = _surrogate_stats(model, spec, g[None, :], n_mc, rngs[4], keep_samples=True).samples[0]
        mmd_values.append(
            {"design": g.tolist(), "mmd": [mmd(truth[:, j], pred[:, j]) for j in range(bb.d_y)], "oracle_mean": o.mean[0].tolist()}
        )
    report = metrics_report(records, mmd_values=mmd_values or None)
    report["n_v"] = n_v
    run.json("metrics.json", report)

    if spec.d_d == 1:
        grid = np.linspace(lo[0], hi[0], n_slice)[:, None]
        o = oracle_curve(bb, spec, grid, oracle_mc, rngs[5])
        s = _surrogate_stats(model, spec, grid, n_mc, rngs[5])
        header = ["design_1"]
        for j in range(bb.d_y):
            header += [f"oracle_mean_{j + 1}", f"oracle_var_{j + 1}", f"surrogate_mean_{j + 1}", f"surrogate_var_{j + 1}"]
        rows = [header]
        for k in range(n_slice):
            row = [float(grid[k, 0])]
            for j in range(bb.d_y):
                row += [o.mean[k, j], o.variance[k, j], s.mean[k, j], s.variance[k, j]]
            rows.append(row)
        run.csv("slice.csv", rows)
    run.commit()


def _rdo_problem(cfg, spec):
    from .data import read_dataset
    from .rdo import RDOProblem, compute_normalisers

    p = dict(cfg.get("problem", {}))
    source = p.pop("normalise_from", None)
    if source is not None:
        data, _, _ = read_dataset(source)
        mu, sd = compute_normalisers(data, int(p.get("objective", 0)))
        p.setdefault("mu_bar", mu)
        p.setdefault("sigma_bar", sd)
    allowed = {"alpha", "mu_bar", "sigma_bar", "objective", "constraints", "beta", "sigma_caps"}
    unknown = set(p) - allowed
    if unknown:
        raise ConfigError(f"unknown problem keys {sorted(unknown)}")
    return RDOProblem(spec=spec, **p)


@cli.command()
@click.argument("model_path", required=False, type=click.Path(dir_okay=False))
@with_common
@click.option("--oracle", is_flag=True, help="Optimise the Monte Carlo oracle instead of a surrogate.")
def rdo(model_path, config_path, seed, threads, out, oracle):
    """Solve the robust design problem on MODEL_PATH or, with --oracle, the black box.

    Config keys: benchmark|external, problem {alpha, objective, constraints,
    beta, sigma_caps, mu_bar, sigma_bar | normalise_from}, n_mc,
    oracle_n_mc, n_grid, ga, seed.
    """
    from .model import RDVGPModel
    from .rdo import GAConfig, OracleEvaluator, SurrogateEvaluator, oracle_optimum, solve_ga

    cfg = _load_config(config_path)
    _set_threads(threads)
    seed = _seed(cfg, seed)
    ga = GAConfig(**cfg.get("ga", {}))
    rng = np.random.default_rng(seed)
    if oracle:
        bb, spec = _source(cfg)
        problem = _rdo_problem(cfg, spec)
        evaluator = OracleEvaluator(bb, spec, int(cfg.get("oracle_n_mc", 10_000)))
        run = _Run("rdo", cfg, seed, out, [config_path])
        if spec.d_d == 1:
            result, _ = oracle_optimum(evaluator, problem, rng, int(cfg.get("n_grid", 201)), ga)
        else:
            result = solve_ga(evaluator, problem, ga, rng)
    else:
        if model_path is None:
            raise ConfigError("rdo needs a model file unless --oracle is given")
        model = _load_model(model_path)
        if not isinstance(model, RDVGPModel):
            raise ConfigError("rdo needs an RDVGP model file")
        spec = model.input_spec if model.input_spec is not None else _source(cfg)[1]
        problem = _rdo_problem(cfg, spec)
        evaluator = SurrogateEvaluator(model, spec, int(cfg.get("n_mc", 512)))
        run = _Run("rdo", cfg, seed, out, [model_path, config_path])
        result = solve_ga(evaluator, problem, ga, rng)
    if not result.feasible:
        log.warning("no feasible design found; the result is flagged infeasible")
    run.json("rdo_result.json", result.to_dict())
    run.csv("ga_trace.csv", result.trace_rows())
    run.commit()


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="rdvgp", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except CommandFailed as exc:
        click.echo(f"error: {exc}", err=True)
        if exc.details:
            click.echo(json.dumps(exc.details, indent=1, default=str), err=True)
        return exc.code
    except (ConfigError, MetricUndefinedError) as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except EvaluationError as exc:
        click.echo(f"evaluation error: {exc}", err=True)
        if exc.stderr:
            click.echo(exc.stderr, err=True)
        return EXIT_DATA
    except TrainingError as exc:
        click.echo(f"training error: {exc}", err=True)
        click.echo(json.dumps(list(exc.restarts), indent=1, default=str), err=True)
        return EXIT_TRAIN
    except NumericalError as exc:
        click.echo(f"numerical error: {exc}", err=True)
        return EXIT_TRAIN
    return 0


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
