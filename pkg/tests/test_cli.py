import csv
import hashlib
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from mcfkit.cli import ConfigError, apply_override, default_config, load_config, main, run

SMALL = ["simulate.n=400", "simulate.months=3", "fit.n_trees=12", "fit.centering_trees=10",
         "support.n_trees=12", "pseudo.n_trees=12", "pseudo.horizon=3",
         "simulate.horizon=3", "effects.export_weights=2", "cluster.k_max=3",
         "cluster.n_init=2"]


def _digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim") / "out"
    assert run("simulate", overrides=SMALL, out=str(out)) == 0
    return out


def test_simulate_writes_every_stage(sim):
    for stage in ("data", "describe", "support", "pseudo", "fit", "effects", "policy",
                  "cluster"):
        manifest = json.loads((sim / stage / "manifest.json").read_text())
        assert manifest["stage"] == stage and manifest["outputs"]
        for name, digest in manifest["outputs"].items():
            assert hashlib.sha256((sim / stage / name).read_bytes()).hexdigest() == digest
    for table in sim.rglob("*.csv"):
        with open(table, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows and rows[0], table
        assert all(len(r) == len(rows[0]) for r in rows), table
    assert not list(sim.rglob(".*partial"))


def test_effects_table_has_contrasts(sim):
    with open(sim / "effects" / "effects.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {"ATE", "ATET(1)", "ATET(2)"} <= {r["estimand"] for r in rows}
    assert {r["contrast"] for r in rows} == {"1-0", "2-0"}      # against the reference arm


def test_simulate_is_byte_identical(sim, tmp_path):
    again = tmp_path / "again"
    assert run("simulate", overrides=SMALL, out=str(again)) == 0
    assert _digest(sim) == _digest(again)


def test_effects_without_forest_names_missing_stage(tmp_path, capsys):
    out = tmp_path / "o"
    code = run("effects", out=str(out), overrides=["paths.data=\"x.csv\""])
    err = capsys.readouterr().err
    assert code == 2
    assert "fit" in err and "forest.json" in err


def test_rerun_stage_on_existing_output(sim, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(sim, out)
    cfg = ["paths.data=" + json.dumps(str(out / "data" / "data.csv")),
           "paths.schema=" + json.dumps(str(out / "data" / "schema.json")),
           "paths.truth=" + json.dumps(str(out / "data" / "truth.csv"))]
    before = _digest(out / "cluster")
    assert run("cluster", overrides=SMALL + cfg, out=str(out)) == 0
    assert _digest(out / "cluster") == before


def test_failed_stage_leaves_previous_artifacts(sim, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(sim, out)
    before = _digest(out / "effects")
    bad = SMALL + ['effects.bgate=[{"z": "nope", "balancing": []}]']
    assert run("effects", overrides=bad, out=str(out)) == 2
    assert _digest(out / "effects") == before
    assert not list(out.rglob(".*partial"))


@pytest.mark.parametrize("override,field", [
    ("fit.n_trees=\"many\"", "fit.n_trees"),
    ("fit.unknown=1", "fit.unknown"),
    ("policy.depth=9", "policy.depth"),
    ("fit.fractions=[0.5,0.5,0.5]", "fit.fractions"),
    ("novalue", "novalue"),
])
def test_config_errors_name_the_field(override, field, tmp_path, capsys):
    assert run("describe", overrides=[override], out=str(tmp_path)) == 2
    assert field in capsys.readouterr().err


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"fit": {"n_trees": 7}, "seed": 3}))
    cfg = load_config(path, ["fit.min_leaf=4"], seed=9, out="o")
    assert cfg["fit"]["n_trees"] == 7 and cfg["fit"]["min_leaf"] == 4
    assert cfg["seed"] == 9 and cfg["paths"]["out"] == "o"
    with pytest.raises(ConfigError):
        apply_override(default_config(), "fit.n_trees")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.json")


def test_malformed_data_is_a_data_error(tmp_path, capsys):
    (tmp_path / "d.csv").write_text("id,x0,d,y\n1,0.5,0,1.0\n2,abc,1,2.0\n")
    (tmp_path / "s.json").write_text(json.dumps({"columns": [
        {"name": "id", "roles": ["id"]},
        {"name": "x0", "kind": "continuous", "roles": ["confounder", "heterogeneity"]},
        {"name": "d", "kind": "unordered", "roles": ["treatment"], "n_categories": 2},
        {"name": "y", "roles": ["outcome"]}]}))
    code = run("describe", out=str(tmp_path / "o"), overrides=[
        "paths.data=" + json.dumps(str(tmp_path / "d.csv")),
        "paths.schema=" + json.dumps(str(tmp_path / "s.json"))])
    assert code == 3
    assert "line 3" in capsys.readouterr().err


def test_verify_passes(tmp_path, capsys):
    code = main(["verify", "--out", str(tmp_path), "--set", "verify.policy_instances=10",
                 "--set", "verify.trim_fixtures=10"])
    assert code == 0
    assert "FAILED" not in capsys.readouterr().out
    assert (tmp_path / "verify" / "report.csv").exists()


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mcfkit.cli", "--version"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
