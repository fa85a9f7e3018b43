"""Validation metrics: coefficients of determination and maximum mean discrepancy."""

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, MetricUndefinedError

MMD_BLOCK = 2048


@dataclass
class ValidationRecord:
    """Oracle and surrogate moments of one output at ``n_v`` validation means."""

    oracle_mean: np.ndarray
    oracle_var: np.ndarray
    surrogate_mean: np.ndarray
    surrogate_var: np.ndarray
    oracle_samples: Optional[list] = None
    surrogate_samples: Optional[list] = None

    def __post_init__(self):
        for name in ("oracle_mean", "oracle_var", "surrogate_mean", "surrogate_var"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        n = self.oracle_mean.shape[0]
        if any(getattr(self, k).shape != (n,) for k in ("oracle_var", "surrogate_mean", "surrogate_var")):
            raise ConfigError("validation record fields must have equal length")
        if np.any(self.oracle_var < 0) or np.any(self.surrogate_var < 0):
            raise ConfigError("variances must be non-negative")
        for name in ("oracle_samples", "surrogate_samples"):
            s = getattr(self, name)
            if s is not None and len(s) != n:
                raise ConfigError(f"{name} must hold one sample set per validation point")

    @property
    def n_v(self):
        return self.oracle_mean.shape[0]


def _cod(truth, pred):
    truth = np.asarray(truth, dtype=float)
    if truth.shape[0] < 2:
        raise MetricUndefinedError("coefficient of determination needs at least two validation points")
    denom = np.sum((truth - truth.mean()) ** 2)
    if denom == 0:
        raise MetricUndefinedError("oracle values are constant; coefficient of determination is undefined")
    return float(1.0 - np.sum((truth - pred) ** 2) / denom)


def cod_mean(record):
    """``1 - sum (E_oracle - E_surrogate)^2 / sum (E_oracle - mean E_oracle)^2``."""
    return _cod(record.oracle_mean, record.surrogate_mean)


def cod_var(record):
    """As :func:`cod_mean` with variances in place of means."""
    return _cod(record.oracle_var, record.surrogate_var)


def _as_points(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ConfigError("mmd needs non-empty sample sets")
    return x


def _kernel_mean(a, b):
    """Mean of ``exp(-|a_i - b_j|^2 / 2)`` over all pairs, accumulated in blocks."""
    total = 0.0
    b2 = np.sum(b * b, axis=1)
    for i in range(0, a.shape[0], MMD_BLOCK):
        blk = a[i : i + MMD_BLOCK]
        d2 = np.sum(blk * blk, axis=1)[:, None] + b2[None, :] - 2.0 * blk @ b.T
        total += float(np.sum(np.exp(-0.5 * np.maximum(d2, 0.0))))
    return total / (a.shape[0] * b.shape[0])


def mmd(samples_p, samples_q):
    """Biased (V-statistic) squared MMD under a unit Gaussian kernel."""
    p = _as_points(samples_p)
    q = _as_points(samples_q)
    if p.shape[1] != q.shape[1]:
        raise ConfigError("sample sets differ in dimension")
    value = _kernel_mean(p, p) - 2.0 * _kernel_mean(p, q) + _kernel_mean(q, q)
    return max(value, 0.0)


def gaussian_mmd(mu1, var1, mu2, var2):
    """Population squared MMD between two 1-D Gaussians under the unit kernel."""

    def cross(m_a, v_a, m_b, v_b):
        s = 1.0 + v_a + v_b
        return np.exp(-0.5 * (m_a - m_b) ** 2 / s) / np.sqrt(s)

    return float(cross(mu1, var1, mu1, var1) - 2.0 * cross(mu1, var1, mu2, var2) + cross(mu2, var2, mu2, var2))


def metrics_report(records, names=None, mmd_values=None):
    """JSON-ready dictionary of COD values per output and any MMD values."""
    names = names or [f"y_{j + 1}" for j in range(len(records))]
    out = {"outputs": {}}
    for name, rec in zip(names, records):
        out["outputs"][name] = {
            "n_v": rec.n_v,
            "r2_mean": cod_mean(rec),
            "r2_var": cod_var(rec),
        }
    if mmd_values:
        out["mmd"] = mmd_values
    return out


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
