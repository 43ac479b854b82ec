import csv
import json

import numpy as np
import pytest

from hurdlegee.cli import EXIT_ERROR, EXIT_OK, EXIT_SOFT, main
from hurdlegee.data import DEFAULT_COVARIATES, ingest_csv
from hurdlegee.simulation import TimeTruth, TruthSpec, generate_dataset

# the CLI reads the default column schema, so synthetic files carry every default covariate
BETA = (0.5, -0.4, 0.2, -0.2, -0.3, 0.1, 0.0)
assert len(BETA) == len(DEFAULT_COVARIATES)


def truth(n=30, **kw):
    return TruthSpec(n, {1: TimeTruth(0.3, BETA), 2: TimeTruth(0.1, tuple(0.5 * b for b in BETA))},
                     correlation="exchangeable", rho=0.2, **kw)


def write_truth(path, n=30, **kw):
    path.write_text(truth(n, **kw).to_json(), encoding="utf-8")
    return path


@pytest.fixture
def dataset_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text(generate_dataset(truth(80), 2).to_csv(), encoding="utf-8")
    return p


def test_exit_codes_are_stable():
    assert (EXIT_OK, EXIT_ERROR, EXIT_SOFT) == (0, 1, 2)


def test_usage_errors_exit_one(capsys):
    assert main([]) == EXIT_ERROR
    assert main(["fit", "--family", "Z"]) == EXIT_ERROR
    assert main(["--version"]) == EXIT_OK
    capsys.readouterr()


def test_simulate_same_seed_same_bytes(tmp_path):
    spec = write_truth(tmp_path / "truth.json")
    a, b, c = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
    assert main(["simulate", "--spec", str(spec), "--seed", "4", "--out", str(a)]) == EXIT_OK
    assert main(["simulate", "--spec", str(spec), "--seed", "4", "--out", str(b)]) == EXIT_OK
    assert main(["simulate", "--spec", str(spec), "--seed", "5", "--out", str(c)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()
    manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "simulate"


def test_simulate_full_cohort_size(tmp_path):
    spec = write_truth(tmp_path / "truth.json", n=606, visit_prob=0.9, missing_rate=0.1)
    out = tmp_path / "cohort.csv"
    assert main(["simulate", "--spec", str(spec), "--out", str(out)]) == EXIT_OK
    d = ingest_csv(out)
    assert d.n_clusters == 606
    assert set(np.unique(d.time)) == {1, 2}


def test_simulate_invalid_spec(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_clusters": 5, "times": {"1": {"alpha": 0, "beta": [0] * 7}},
                               "correlation": "exchangeable", "rho": -0.5}), encoding="utf-8")
    assert main(["simulate", "--spec", str(bad), "--out", str(tmp_path / "x.csv")]) == EXIT_ERROR
    assert main(["simulate", "--spec", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x.csv")]) == EXIT_ERROR
    assert "error:" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


def test_fit_writes_artifacts_and_manifest(tmp_path, dataset_csv, capsys):
    out = tmp_path / "out"
    rc = main(["fit", "--family", "A", "--corr", "2", "--times", "1,2", "--input", str(dataset_csv),
               "--out", str(out), "--boot", "3", "--boot-mode", "estimates", "--seed", "7", "--jobs", "1",
               "--latex"])
    assert rc in (EXIT_OK, EXIT_SOFT)
    names = {p.name for p in out.iterdir()}
    assert {"A.2.1.fit.json", "A.2.2.fit.json", "A.2.1.presence.csv", "A.2.1.presence.json", "report.md",
            "report.tex", "bootstrap.json", "manifest.json"} <= names
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "fit"
    assert manifest["options"]["seed"] == 7 and manifest["options"]["corr"] == "2"
    with open(out / "A.2.1.presence.csv", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variable"] for r in rows][:2] == ["dental_age", "Total_mgF"]
    # the report command renders the same tables again
    again = tmp_path / "again.md"
    assert main(["report", "--dir", str(out), "--output", str(again)]) == EXIT_OK
    assert again.read_bytes() == (out / "report.md").read_bytes()
    capsys.readouterr()


def test_fit_rerun_is_bit_exact(tmp_path, dataset_csv, capsys):
    outs = []
    for k in range(2):
        out = tmp_path / f"o{k}"
        main(["fit", "--family", "B", "--corr", "1", "--times", "1", "--input", str(dataset_csv),
              "--out", str(out), "--boot", "2", "--seed", "3", "--jobs", "1"])
        outs.append(out)
    for name in ("B.1.1.severity.csv", "B.1.1.fit.json", "report.md"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    capsys.readouterr()


def test_fit_empty_dataset(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    header = generate_dataset(truth(2), 0).to_csv().splitlines()[0]
    empty.write_text(header + "\n", encoding="utf-8")
    assert main(["fit", "--input", str(empty), "--out", str(tmp_path / "o"), "--boot", "0"]) == EXIT_ERROR
    assert "error:" in capsys.readouterr().err


def test_fit_needs_input_and_out(capsys):
    assert main(["fit", "--family", "A"]) == EXIT_ERROR
    assert "--input" in capsys.readouterr().err


def test_config_precedence(tmp_path, dataset_csv, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"family": "B", "corr": [1], "times": [1], "input": str(dataset_csv),
                               "out": str(tmp_path / "cfg_out"), "boot": 0, "seed": 11}), encoding="utf-8")
    # the flag overrides the config value of the same key
    assert main(["fit", "--config", str(cfg), "--seed", "12"]) in (EXIT_OK, EXIT_SOFT)
    opts = json.loads((tmp_path / "cfg_out" / "manifest.json").read_text(encoding="utf-8"))["options"]
    assert opts["family"] == "B" and opts["seed"] == 12 and opts["times"] == "1"
    assert (tmp_path / "cfg_out" / "B.1.1.severity.csv").exists()
    capsys.readouterr()


def test_config_unknown_keys(tmp_path, dataset_csv, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"famly": "B", "input": str(dataset_csv), "out": str(tmp_path / "o")}),
                   encoding="utf-8")
    assert main(["fit", "--config", str(cfg)]) == EXIT_ERROR
    assert "famly" in capsys.readouterr().err
    cfg.write_text("{not json", encoding="utf-8")
    assert main(["fit", "--config", str(cfg)]) == EXIT_ERROR


def test_fit_soft_nonconvergence_exit_two(tmp_path, dataset_csv, capsys):
    # one Fisher step cannot meet the tolerance, yet every artifact is written
    out = tmp_path / "o"
    rc = main(["fit", "--family", "A", "--corr", "1", "--times", "1", "--input", str(dataset_csv),
               "--out", str(out), "--boot", "0", "--max-iter", "1"])
    assert rc == EXIT_SOFT
    assert (out / "A.1.1.presence.csv").exists() and (out / "manifest.json").exists()
    assert "warning:" in capsys.readouterr().err


def test_distribution_counts(tmp_path, dataset_csv, capsys):
    out = tmp_path / "dist.csv"
    assert main(["distribution", "--input", str(dataset_csv), "--out", str(out)]) == EXIT_OK
    with open(out, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    d = ingest_csv(dataset_csv)
    assert sum(int(r["count"]) for r in rows) == len(d)
    zeros_t1 = sum(int(r["count"]) for r in rows if r["time"] == "1" and r["fri"] == "0")
    assert zeros_t1 == int(np.sum((d.time == 1) & (d.fri == 0)))
    assert main(["distribution", "--input", str(dataset_csv)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("time,zone,fri,count")
