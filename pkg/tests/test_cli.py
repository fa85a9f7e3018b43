import csv
import json

import numpy as np
import pytest

from rdvgp import cli
from rdvgp.benchmarks import oracle_curve


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset(workdir):
    cfg = write(workdir / "sample.json", {"benchmark": {"name": "1d"}, "n": 5, "seed": 7})
    assert cli.main(["sample", "--config", cfg, "--out", str(workdir / "data")]) == 0
    return workdir / "data" / "dataset.csv"


TRAIN = {"restarts": 1, "iterations": 300, "m": 5, "d_z": 1, "adam": {"step_size": 0.01}}


@pytest.fixture(scope="module")
def trained(workdir, dataset):
    cfg = write(workdir / "train.json", TRAIN)
    assert cli.main(["train", str(dataset), "--config", cfg, "--seed", "3", "--out", str(workdir / "model")]) == 0
    return workdir / "model" / "model.json"


def test_sample_outputs(workdir, dataset):
    rows = list(csv.reader(dataset.open()))
    assert len(rows) == 6
    assert (workdir / "data" / "dataset.json").is_file()
    manifest = json.loads((workdir / "data" / "sample.manifest.json").read_text())
    assert manifest["seed"] == 7 and len(manifest["config_sha256"]) == 64


def test_sample_rerun_identical(workdir, dataset):
    cfg = str(workdir / "sample.json")
    assert cli.main(["sample", "--config", cfg, "--out", str(workdir / "data2")]) == 0
    assert (workdir / "data2" / "dataset.csv").read_bytes() == dataset.read_bytes()


def test_sample_three_dimensional(tmp_path):
    cfg = write(tmp_path / "c.json", {"benchmark": {"name": "3d", "sigma1": 0.05, "sigma2": 0.5}, "n": 100})
    assert cli.main(["sample", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rows = list(csv.reader((tmp_path / "o" / "dataset.csv").open()))
    assert len(rows) == 101 and all(len(r) == 5 for r in rows)


def test_missing_config_leaves_no_outputs(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["sample", "--config", str(tmp_path / "nope.json"), "--out", str(out)]) == 2
    assert not out.exists() or not any(out.iterdir())


def test_sample_failures_exit_data_error(tmp_path):
    script = tmp_path / "fail.py"
    script.write_text("import sys\nsys.exit(1)\n")
    import sys

    cfg = write(tmp_path / "c.json", {
        "external": {"command": [sys.executable, str(script)], "d_s": 1, "d_y": 1},
        "input_spec": {"design_lower": [0.0], "design_upper": [1.0], "design_std": [0.1]},
        "n": 3,
    })
    assert cli.main(["sample", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_train_outputs_and_determinism(workdir, dataset, trained):
    model = json.loads(trained.read_text())
    assert len(model["inducing_inputs"]) == 5
    report = json.loads((workdir / "model" / "train_report.json").read_text())
    assert "restarts" in report
    out2 = workdir / "model2"
    assert cli.main(["train", str(dataset), "--config", str(workdir / "train.json"), "--seed", "3", "--out", str(out2)]) == 0
    assert (out2 / "model.json").read_bytes() == trained.read_bytes()


def test_train_m_larger_than_n(workdir, dataset, tmp_path):
    cfg = write(tmp_path / "c.json", {**TRAIN, "m": 9})
    assert cli.main(["train", str(dataset), "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_train_baseline(workdir, dataset, tmp_path):
    cfg = write(tmp_path / "c.json", {"iterations": 200, "restarts": 1})
    assert cli.main(["train", str(dataset), "--baseline-gp", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "model.json").read_text())["kind"] == "gp_baseline"


def test_validate_report(workdir, trained, tmp_path):
    cfg = write(tmp_path / "v.json", {"benchmark": "1d", "n_v": 10, "n_mc": 500, "oracle_n_mc": 500,
                                      "slice_points": 11, "mmd_designs": [[0.5]]})
    assert cli.main(["validate", str(trained), "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert {"r2_mean", "r2_var"} <= set(report["outputs"]["y_1"])
    assert len(report["mmd"]) == 1
    assert len(list(csv.reader((tmp_path / "o" / "slice.csv").open()))) == 12


def test_validate_single_point(trained, tmp_path):
    cfg = write(tmp_path / "v.json", {"benchmark": "1d", "n_v": 1})
    assert cli.main(["validate", str(trained), "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_validate_oracle_as_surrogate(trained, tmp_path, monkeypatch):
    seed, n_mc = 5, 400

    def as_oracle(model, spec, designs, n, rng, keep_samples=False):
        # replay the oracle's own stream so the two tables coincide
        from rdvgp.benchmarks import OneDimensional

        return oracle_curve(OneDimensional(), spec, designs, n, cli._streams(seed, 6)[1])

    monkeypatch.setattr(cli, "_surrogate_stats", as_oracle)
    cfg = write(tmp_path / "v.json", {"benchmark": "1d", "n_v": 8, "n_mc": n_mc, "oracle_n_mc": n_mc, "slice_points": 3})
    assert cli.main(["validate", str(trained), "--config", cfg, "--seed", str(seed), "--out", str(tmp_path / "o")]) == 0
    out = json.loads((tmp_path / "o" / "metrics.json").read_text())["outputs"]["y_1"]
    assert out["r2_mean"] == pytest.approx(1.0, abs=1e-9)
    assert out["r2_var"] == pytest.approx(1.0, abs=1e-9)


def test_rdo_surrogate_and_oracle(workdir, trained, dataset, tmp_path):
    cfg = write(tmp_path / "r.json", {"benchmark": "1d", "problem": {"alpha": 0.25, "normalise_from": str(dataset)},
                                      "n_mc": 128, "oracle_n_mc": 500, "n_grid": 21, "ga": {"generations": 5}})
    for k in range(2):
        assert cli.main(["rdo", str(trained), "--config", cfg, "--seed", "1", "--out", str(tmp_path / f"s{k}")]) == 0
    a = json.loads((tmp_path / "s0" / "rdo_result.json").read_text())
    b = json.loads((tmp_path / "s1" / "rdo_result.json").read_text())
    a.pop("manifest"), b.pop("manifest")
    assert a == b
    assert 0.0 <= a["design"][0] <= 1.0
    assert len(list(csv.reader((tmp_path / "s0" / "ga_trace.csv").open()))) == 6
    assert cli.main(["rdo", "--oracle", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "rdo_result.json").read_text())["evaluator"]["kind"] == "oracle"


def test_rdo_needs_model(tmp_path):
    cfg = write(tmp_path / "r.json", {"benchmark": "1d"})
    assert cli.main(["rdo", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_unknown_problem_key(trained, tmp_path):
    cfg = write(tmp_path / "r.json", {"benchmark": "1d", "problem": {"gamma": 1}})
    assert cli.main(["rdo", str(trained), "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_usage_error():
    assert cli.main(["train"]) == 2
