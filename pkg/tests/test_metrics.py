import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rdvgp.errors import ConfigError, MetricUndefinedError
from rdvgp.metrics import ValidationRecord, cod_mean, cod_var, gaussian_mmd, metrics_report, mmd, write_report


def record(om, ov, sm, sv):
    return ValidationRecord(np.asarray(om), np.asarray(ov), np.asarray(sm), np.asarray(sv))


def test_perfect_and_constant_predictions(rng):
    om, ov = rng.normal(size=10), rng.uniform(0.1, 1, 10)
    rec = record(om, ov, om, ov)
    assert cod_mean(rec) == 1.0 and cod_var(rec) == 1.0
    flat = record(om, ov, np.full(10, om.mean()), np.full(10, ov.mean()))
    assert cod_mean(flat) == pytest.approx(0.0, abs=1e-12)
    assert cod_var(flat) == pytest.approx(0.0, abs=1e-12)


def test_cod_asymmetric(rng):
    a, b = rng.normal(size=8), rng.normal(size=8)
    v = np.ones(8)
    assert cod_mean(record(a, v, b, v)) != cod_mean(record(b, v, a, v))


@settings(max_examples=50, deadline=None)
@given(a=arrays(float, 6, elements=st.floats(-10, 10)), b=arrays(float, 6, elements=st.floats(-10, 10)))
def test_cod_at_most_one(a, b):
    if np.ptp(a) < 1e-6:
        return
    v = np.ones(6)
    value = cod_mean(record(a, v, b, v))
    assert value <= 1.0
    if not np.allclose(a, b):
        assert value < 1.0


def test_cod_undefined_cases():
    with pytest.raises(MetricUndefinedError):
        cod_mean(record([1.0], [1.0], [1.0], [1.0]))
    with pytest.raises(MetricUndefinedError):
        cod_var(record([1.0, 2.0], [0.5, 0.5], [1.0, 2.0], [0.4, 0.6]))


def test_record_validation():
    with pytest.raises(ConfigError):
        record([1.0, 2.0], [1.0], [1.0, 2.0], [1.0, 2.0])
    with pytest.raises(ConfigError):
        record([1.0], [-1.0], [1.0], [1.0])


def test_mmd_identical_sets_zero(rng):
    x = rng.normal(size=(300, 2))
    assert mmd(x, x.copy()) == pytest.approx(0.0, abs=1e-12)


def test_mmd_same_distribution_small(rng):
    assert mmd(rng.normal(size=10_000), rng.normal(size=10_000)) < 0.01


def test_mmd_matches_population_value(rng):
    est = mmd(rng.normal(size=10_000), rng.normal(3.0, 1.0, size=10_000))
    ref = gaussian_mmd(0.0, 1.0, 3.0, 1.0)
    assert est == pytest.approx(ref, rel=0.05)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), shift=st.floats(-2, 2))
def test_mmd_nonnegative_symmetric(seed, shift):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=50), r.normal(shift, 1.0, size=70)
    assert mmd(a, b) >= 0.0
    assert mmd(a, b) == pytest.approx(mmd(b, a), abs=1e-12)


def test_mmd_blocks_agree(rng, monkeypatch):
    import rdvgp.metrics as M

    a, b = rng.normal(size=500), rng.normal(0.5, 1, size=400)
    whole = mmd(a, b)
    monkeypatch.setattr(M, "MMD_BLOCK", 37)
    assert mmd(a, b) == pytest.approx(whole, rel=1e-10)


def test_mmd_input_checks(rng):
    with pytest.raises(ConfigError):
        mmd(np.zeros((0, 1)), np.zeros((3, 1)))
    with pytest.raises(ConfigError):
        mmd(np.zeros((3, 1)), np.zeros((3, 2)))


def test_report_written(tmp_path, rng):
    om = rng.normal(size=5)
    rep = metrics_report([record(om, np.abs(om) + 0.1, om + 0.01, np.abs(om) + 0.1)], ["J"], [{"mmd": 0.1}])
    write_report(tmp_path / "r.json", rep)
    import json

    back = json.loads((tmp_path / "r.json").read_text())
    assert set(back["outputs"]["J"]) == {"n_v", "r2_mean", "r2_var"}
    assert back["mmd"] == [{"mmd": 0.1}]
