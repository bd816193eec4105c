import csv
import json
from pathlib import Path

import numpy as np
import pytest

from wc4dvar.criteria import SingularCriterionError
from wc4dvar.harness import cli
from wc4dvar.harness.config import ConfigError, config_hash, load_config, resolve
from wc4dvar.harness.svg import histogram_svg

CONFIGS = Path(__file__).resolve().parents[1] / "src" / "wc4dvar" / "configs"


def write_cfg(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def small_heat(**sections):
    cfg = {"version": 1, "seed": 3, "model": {"name": "heat1d", "params": {"n_sensors": 8}}}
    cfg.update(sections)
    return cfg


def test_shipped_configs_validate():
    names = sorted(p.name for p in CONFIGS.glob("*.json"))
    assert "heat1d_desk.json" in names and "ad2d_desk.json" in names
    for p in CONFIGS.glob("*.json"):
        cfg = load_config(p)
        assert cfg["version"] == 1


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        resolve({"version": 1, "seed": 0, "model": {"name": "heat1d"}, "bogus": 1})
    with pytest.raises(ConfigError):
        resolve({"version": 1, "seed": 0, "model": {"name": "heat1d", "params": {"n_cell": 3}}})
    with pytest.raises(ConfigError):
        resolve({"version": 2, "seed": 0, "model": {"name": "heat1d"}})


def test_defaults_overrides_and_scale():
    raw = {"version": 1, "seed": 0, "model": {"name": "heat1d"}, "place_sensors": {"k": [3]}}
    cfg = resolve(raw, seed=9, scale="paper")
    assert cfg["seed"] == 9
    assert cfg["place_sensors"]["k"] == [3]
    assert cfg["place_sensors"]["methods"] == ["gks", "raf", "greedy", "exhaustive"]
    assert cfg["model"]["params"]["n_cells"] == 400
    assert config_hash(cfg) != config_hash(resolve(raw))
    assert config_hash(resolve(raw)) == config_hash(resolve(json.loads(json.dumps(raw))))


def test_cli_config_errors_exit_2(tmp_path):
    assert cli.main(["assimilate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    bad = write_cfg(tmp_path, {"version": 1, "seed": 0, "model": {"name": "nope"}})
    assert cli.main(["assimilate", "--config", bad, "--out", str(tmp_path / "o")]) == 2
    heat = write_cfg(tmp_path, small_heat(), "heat.json")
    assert cli.main(["gap-study", "--config", heat, "--out", str(tmp_path / "o")]) == 2


def test_cli_budget_refusal_exit_4(tmp_path):
    cfg = small_heat(place_sensors={"k": [4], "methods": ["exhaustive"], "exhaustive_budget": 10,
                                    "random_designs": 50})
    assert cli.main(["place-sensors", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 4


def test_refused_exhaustive_is_recorded_when_others_run(tmp_path):
    cfg = small_heat(place_sensors={"k": [4], "methods": ["greedy", "exhaustive"], "exhaustive_budget": 10,
                                    "random_designs": 50})
    out = tmp_path / "o"
    assert cli.main(["place-sensors", "--config", write_cfg(tmp_path, cfg), "--out", str(out)]) == 0
    rec = json.loads((out / "result.json").read_text())
    assert "refused" in rec["outputs"]["selections"]["4"]["exhaustive"]


def test_cli_numerical_failure_exit_3(tmp_path, monkeypatch):
    def boom(cfg):
        raise SingularCriterionError("singular")

    monkeypatch.setitem(cli.COMMANDS, "assimilate", boom)
    path = write_cfg(tmp_path, small_heat())
    assert cli.main(["assimilate", "--config", path, "--out", str(tmp_path / "o")]) == 3


def test_outputs_and_reload(tmp_path):
    cfg = small_heat(place_sensors={"k": [3], "methods": ["gks", "raf", "greedy", "exhaustive"],
                                    "random_designs": 300, "bins": 10})
    path = write_cfg(tmp_path, cfg)
    out = tmp_path / "run"
    assert cli.main(["place-sensors", "--config", path, "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["config.json", "hist_k3.svg", "result.json", "table_designs.csv", "timings.json"]
    resolved = load_config(path)
    rec = cli.load_result(out / "result.json", resolved)
    assert rec["config_hash"] == config_hash(resolved)
    assert "timings" not in json.dumps(rec["outputs"])
    sel = rec["outputs"]["selections"]["3"]
    assert sel["exhaustive"]["percentile_all"] == 100.0 or sel["exhaustive"]["value"] >= sel["greedy"]["value"]
    assert sel["raf"]["transpose_applications"] == 0
    with (out / "table_designs.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert {r["config_hash"] for r in rows} == {config_hash(resolved)}
    assert all("," not in r["value"] and float(r["value"]) > 0 for r in rows)
    svg = (out / "hist_k3.svg").read_text()
    assert config_hash(resolved) in svg and svg.startswith("<svg")
    other = resolve(cfg, seed=4)
    with pytest.raises(ConfigError):
        cli.load_result(out / "result.json", other)


def test_reruns_are_bitwise_identical(tmp_path):
    cfg = small_heat(estimate_eig={"variants": ["preconditioned", "saddle_II"], "samples": [2, 4],
                                   "methods": ["slq", "xnystrace"]})
    path = write_cfg(tmp_path, cfg)
    for run in ("a", "b"):
        assert cli.main(["estimate-eig", "--config", path, "--out", str(tmp_path / run)]) == 0
    for name in ("result.json", "table_estimates.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_assimilate_record(tmp_path):
    path = write_cfg(tmp_path, small_heat())
    out = tmp_path / "o"
    assert cli.main(["assimilate", "--config", path, "--out", str(out)]) == 0
    rec = json.loads((out / "result.json").read_text())["outputs"]
    assert rec["forecast_prior"]["converged"] and rec["none"]["converged"]
    assert rec["forecast_prior"]["iterations"] < rec["none"]["iterations"]
    assert rec["rhs_form_difference"] < 1e-10
    assert rec["forecast_prior"]["cost"] == pytest.approx(rec["none"]["cost"], rel=1e-6)


def test_histogram_svg_is_deterministic():
    vals = np.random.default_rng(0).normal(size=500)
    a = histogram_svg(vals, {"gks": 2.5, "raf": 1.0}, "t & <title>", bins=12, note="h")
    b = histogram_svg(vals.copy(), {"gks": 2.5, "raf": 1.0}, "t & <title>", bins=12, note="h")
    assert a == b
    assert a.count("stroke-dasharray") == 2
    assert "&amp; &lt;title&gt;" in a
    assert a.count("<rect") <= 12 + 1
