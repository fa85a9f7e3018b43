"""Training sets, input specifications and their on-disk formats."""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError


def _vec(x):
    return np.atleast_1d(np.asarray(x, dtype=float)).copy()


@dataclass(frozen=True)
class InputSpec:
    """Design and immutable input variables with their Gaussian spread.

    Design variables have mean bounds ``[design_lower, design_upper]``;
    immutable variables have fixed means.  Standard deviations are
    ``base_std + std_slope @ s_bar`` when ``std_slope`` is given (a d_s x d_s
    matrix), otherwise constant.  Inputs are ordered design first.
    """

    design_lower: np.ndarray
    design_upper: np.ndarray
    design_std: np.ndarray
    fixed_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fixed_std: np.ndarray = field(default_factory=lambda: np.zeros(0))
    std_slope: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("design_lower", "design_upper", "design_std", "fixed_mean", "fixed_std"):
            object.__setattr__(self, name, _vec(getattr(self, name)) if np.size(getattr(self, name)) else np.zeros(0))
        d_d = self.design_lower.shape[0]
        if self.design_upper.shape[0] != d_d or self.design_std.shape[0] != d_d:
            raise ConfigError("design bounds and std must share one length")
        if self.fixed_std.shape[0] != self.fixed_mean.shape[0]:
            raise ConfigError("immutable means and std must share one length")
        if not (np.all(np.isfinite(self.design_lower)) and np.all(np.isfinite(self.design_upper))):
            raise ConfigError("design bounds must be finite")
        if np.any(self.design_lower >= self.design_upper):
            raise ConfigError("design lower bounds must be below upper bounds")
        if np.any(self.design_std < 0) or np.any(self.fixed_std < 0):
            raise ConfigError("standard deviations must be non-negative")
        if self.std_slope is not None:
            slope = np.atleast_2d(np.asarray(self.std_slope, dtype=float))
            if slope.shape != (self.d_s, self.d_s):
                raise ConfigError(f"std_slope must be {self.d_s}x{self.d_s}")
            object.__setattr__(self, "std_slope", slope)

    @property
    def d_d(self):
        return self.design_lower.shape[0]

    @property
    def d_f(self):
        return self.fixed_mean.shape[0]

    @property
    def d_s(self):
        return self.d_d + self.d_f

    @property
    def base_std(self):
        return np.concatenate([self.design_std, self.fixed_std])

    def full_mean(self, design):
        """Append the immutable means to design-variable means (rows or a vector)."""
        design = np.asarray(design, dtype=float)
        if design.shape[-1] != self.d_d:
            raise ConfigError(f"expected {self.d_d} design values, got {design.shape[-1]}")
        fixed = np.broadcast_to(self.fixed_mean, design.shape[:-1] + (self.d_f,))
        return np.concatenate([design, fixed], axis=-1)

    def std_at(self, s_bar):
        s_bar = np.asarray(s_bar, dtype=float)
        std = np.broadcast_to(self.base_std, s_bar.shape).copy()
        if self.std_slope is not None:
            std = std + s_bar @ self.std_slope.T
        return np.maximum(std, 0.0)

    def var_at(self, s_bar):
        return self.std_at(s_bar) ** 2

    def density_at(self, s_bar):
        from .densities import GaussianDensity

        s_bar = _vec(s_bar)
        return GaussianDensity(s_bar, var=self.var_at(s_bar))

    def lower_mean(self):
        return self.full_mean(self.design_lower)

    def upper_mean(self):
        return self.full_mean(self.design_upper)

    def to_dict(self):
        out = {
            "design_lower": self.design_lower.tolist(),
            "design_upper": self.design_upper.tolist(),
            "design_std": self.design_std.tolist(),
            "fixed_mean": self.fixed_mean.tolist(),
            "fixed_std": self.fixed_std.tolist(),
        }
        if self.std_slope is not None:
            out["std_slope"] = self.std_slope.tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                design_lower=d["design_lower"],
                design_upper=d["design_upper"],
                design_std=d["design_std"],
                fixed_mean=d.get("fixed_mean", []),
                fixed_std=d.get("fixed_std", []),
                std_slope=d.get("std_slope"),
            )
        except KeyError as exc:
            raise ConfigError(f"input spec missing field {exc}") from None


@dataclass(frozen=True)
class TrainingSet:
    """Inputs ``S`` (n, d_s), observations ``Y`` (n, d_y) and per-point
    diagonal input variances ``input_var`` (n, d_s)."""

    S: np.ndarray
    Y: np.ndarray
    input_var: np.ndarray

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        V = np.asarray(self.input_var, dtype=float)
        V = np.broadcast_to(V, S.shape).copy() if V.ndim < 2 else V
        if Y.shape[0] != S.shape[0] or V.shape != S.shape:
            raise ConfigError("training set arrays have inconsistent shapes")
        if np.any(V < 0):
            raise ConfigError("input variances must be non-negative")
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "input_var", V)

    @classmethod
    def from_spec(cls, S, Y, spec):
        S = np.atleast_2d(np.asarray(S, dtype=float))
        return cls(S, Y, spec.var_at(S))

    @property
    def n(self):
        return self.S.shape[0]

    @property
    def d_s(self):
        return self.S.shape[1]

    @property
    def d_y(self):
        return self.Y.shape[1]

    def output(self, j):
        """Single-output view keeping only column ``j`` of ``Y``."""
        return TrainingSet(self.S, self.Y[:, [j]], self.input_var)

    def subset(self, idx):
        idx = np.asarray(idx)
        return TrainingSet(self.S[idx], self.Y[idx], self.input_var[idx])

    def concat(self, other):
        return TrainingSet(
            np.vstack([self.S, other.S]),
            np.vstack([self.Y, other.Y]),
            np.vstack([self.input_var, other.input_var]),
        )


def write_dataset(path, data, spec=None, seed=None, extra=None):
    """Write ``data`` as CSV (17 significant digits) plus a JSON sidecar."""
    path = Path(path)
    header = [f"s_{i + 1}" for i in range(data.d_s)] + [f"y_{j + 1}" for j in range(data.d_y)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s, y in zip(data.S, data.Y):
            w.writerow([format(v, ".17g") for v in np.concatenate([s, y])])
    sidecar = {
        "d_s": data.d_s,
        "d_y": data.d_y,
        "n": data.n,
        "seed": seed,
        "input_spec": spec.to_dict() if spec is not None else None,
        "input_var": data.input_var.tolist(),
    }
    if extra:
        sidecar.update(extra)
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".json")


def read_dataset(path):
    """Read a dataset CSV and its sidecar.  Returns ``(TrainingSet, spec, sidecar)``."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    d_s = sum(1 for h in header if h.startswith("s_"))
    d_y = sum(1 for h in header if h.startswith("y_"))
    if d_s + d_y != len(header) or d_s == 0 or d_y == 0:
        raise ConfigError(f"{path}: header must be s_1..s_d, y_1..y_k")
    arr = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(-1, d_s + d_y)
    S, Y = arr[:, :d_s], arr[:, d_s:]
    side = {}
    spec = None
    sp = sidecar_path(path)
    if sp.exists():
        side = json.loads(sp.read_text())
        if side.get("input_spec"):
            spec = InputSpec.from_dict(side["input_spec"])
    if "input_var" in side and side["input_var"] is not None and len(side["input_var"]) == len(S):
        var = np.asarray(side["input_var"], dtype=float)
    elif spec is not None:
        var = spec.var_at(S)
    else:
        var = np.zeros_like(S)
    return TrainingSet(S, Y, var), spec, side
