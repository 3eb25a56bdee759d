import json

import pytest
from click.testing import CliRunner

from jangmass.cli import main


def _run(args):
    return CliRunner().invoke(main, args, catch_exceptions=False)


@pytest.fixture(scope="module")
def hyperboloid_runs(tmp_path_factory):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path_factory.mktemp(f"run_{tag}")
        res = _run(["pipeline", "--family", "hyperboloid", "--out", str(out)])
        outs.append((res, out))
    return outs


def test_hyperboloid_pipeline_succeeds(hyperboloid_runs):
    res, out = hyperboloid_runs[0]
    assert res.exit_code == 0, res.output
    chain = json.loads((out / "mass_chain.json").read_text())
    assert chain["passed"]
    assert chain["E"] == 0.0 and chain["alpha"] == 0.0
    assert abs(chain["A"]) < 1e-6
    assert abs(chain["M_conf"]) < 1e-6
    # the graph mass comes from the regularized solve on the coarse default grid
    assert abs(chain["M_bar"]) < 0.01
    assert "margin_PMT" in res.output


def test_manifest_lists_existing_artifacts(hyperboloid_runs):
    _, out = hyperboloid_runs[0]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["success"] is True
    assert manifest["family"] == "hyperboloid"
    for name in manifest["artifacts"]:
        assert (out / name).is_file(), name
    names = set(manifest["artifacts"])
    assert {"barriers.csv", "solution.csv", "mass_chain.json"} <= names
    assert any(n.endswith(".png") for n in names)


def test_repeated_runs_are_bitwise_identical(hyperboloid_runs):
    (_, a), (_, b) = hyperboloid_runs
    csvs = sorted(p.name for p in a.glob("*.csv"))
    assert csvs
    for name in csvs:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_csv_uses_full_precision(hyperboloid_runs):
    _, out = hyperboloid_runs[0]
    header, first = (out / "barriers.csv").read_text().splitlines()[:2]
    assert header == "r,k_plus,k_minus,phi_plus,phi_minus,f_gap"
    assert max(len(x.lstrip("-").replace(".", "")) for x in first.split(",")) >= 16


def test_barriers_recover_mass_coefficient(tmp_path):
    res = _run(["barriers", "--family", "wang_m_sigma", "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    doc = json.loads((tmp_path / "barriers.json").read_text())
    assert doc["fitted_alpha"] == pytest.approx(1.0, rel=0.03)
    assert (tmp_path / "barriers.png").is_file()


def test_config_file_is_honoured(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": "wang_mp", "stages": ["constraints"], "label": "mp"}))
    out = tmp_path / "out"
    res = _run(["pipeline", "--config", str(cfg), "--out", str(out)])
    assert res.exit_code == 0, res.output
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["stages"] == {"constraints": "ok"}
    assert "mass_vector.csv" in manifest["artifacts"]


@pytest.mark.parametrize(
    "content",
    [
        "{not json",
        json.dumps({"data": "no_such_family"}),
        json.dumps({"data": "hyperboloid", "unknown_key": 1}),
        json.dumps({"data": "hyperboloid", "grids": {"R": -5}}),
        json.dumps({"data": "hyperboloid", "stages": ["solve"]}),
        json.dumps({"data": {"m": [{"l": 0, "m": 0, "component": "bogus", "value": 1.0}]}}),
    ],
)
def test_malformed_config_exits_with_usage_error(tmp_path, content):
    cfg = tmp_path / "bad.json"
    cfg.write_text(content)
    res = CliRunner().invoke(main, ["pipeline", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert res.exit_code == 2
    assert "malformed config" in res.output


def test_missing_config_file_is_usage_error(tmp_path):
    res = CliRunner().invoke(main, ["solve", "--config", str(tmp_path / "none.json")])
    assert res.exit_code == 2


def test_stage_failure_exits_with_one(tmp_path):
    cfg = tmp_path / "inline.json"
    spec = {"m": [{"l": 0, "m": 0, "component": "sigma", "value": 3.5449077018110318}]}
    cfg.write_text(json.dumps({"data": spec, "stages": ["convergence"]}))
    out = tmp_path / "out"
    res = CliRunner().invoke(main, ["pipeline", "--config", str(cfg), "--out", str(out)])
    assert res.exit_code == 1
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["success"] is False
    assert "convergence" in manifest["error"]
    assert manifest["stages"]["convergence"].startswith("failed")


def test_version_flag():
    res = CliRunner().invoke(main, ["--version"])
    assert res.exit_code == 0
