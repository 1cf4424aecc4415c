import copy
import json
from importlib.resources import files

import numpy as np
import pytest

from mvcn.cli import main
from mvcn.errors import ConfigError
from mvcn.harness import (closed_forms, load_config, parse_config, replay, resolve_threads, run_study,
                          table_csv, write_record)
from mvcn.model import LinearMeanField

LINEAR = {"name": "linear", "params": {"a": -0.5, "c": 0.3, "s0": 0.2, "s1": 0.4}}
TANH = {"name": "tanh", "params": {"a": -0.5, "c": 0.8, "kappa": 2.0, "s0": 0.3, "s1": 0.4,
                                   "rho0": 0.3, "rho1": 0.3}}

SMALL = {
    "simulate": {"schema": 1, "study": "simulate", "model": TANH, "grid": {"T": 1.0, "K": 16},
                 "N": 32, "seed": 3, "simulate": {"dump_noise": True, "export_paths": True}},
    "poc": {"schema": 1, "study": "poc", "model": LINEAR, "grid": {"T": 1.0, "K": 8}, "N": 16,
            "seed": 3, "poc": {"N_ladder": [16, 64], "N_ref": 512, "reps": 4}},
    "tangent": {"schema": 1, "study": "tangent", "model": TANH, "grid": {"T": 1.0, "K": 12}, "N": 16,
                "seed": 3, "tangent": {"functions": ["sin"], "moment_N": [16, 32], "moment_s": 4}},
    "ibp": {"schema": 1, "study": "ibp", "model": LINEAR, "grid": {"T": 1.0, "K": 8}, "N": 8, "seed": 3,
            "ibp": {"spatial_samples": 200, "measure_reps": 3, "n_pilots": 2, "fd": False}},
}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def test_parse_config_defaults_and_overrides():
    cfg = parse_config(SMALL["ibp"], seed_override=99)
    assert cfg.seed == 99 and cfg.to_json()["seed"] == 99
    assert cfg.knobs["rel_tol"] == 0.05 and cfg.knobs["n_pilots"] == 2
    assert cfg.grid.dt == 1 / 8


@pytest.mark.parametrize("edit", [
    lambda d: d.update(extra=1),
    lambda d: d["ibp"].update(bogus=1),
    lambda d: d.update(schema=2),
    lambda d: d.update(study="fit"),
    lambda d: d["grid"].update(K=0),
    lambda d: d["grid"].update(dt=0.1),
    lambda d: d.update(N=2.5),
    lambda d: d.update(seed=-1),
    lambda d: d["model"].update(name="cubic"),
    lambda d: d["model"]["params"].pop("a"),
    lambda d: d.update(init={"kind": "point", "at": [1, 2]}),
    lambda d: d["ibp"].update(functions=["cosh"]),
    lambda d: d["ibp"].update(spatial=False, measure=False),
    lambda d: d["ibp"].update(v=[0.0, 1.0]),
])
def test_invalid_configs_are_refused(edit):
    doc = copy.deepcopy(SMALL["ibp"])
    edit(doc)
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_poc_needs_one_dimension():
    doc = copy.deepcopy(SMALL["poc"])
    doc["model"] = {"name": "constant", "params": {"s0": [[1, 0], [0, 1]], "s1": [[1, 0], [0, 1]]}}
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_thread_resolution(monkeypatch):
    monkeypatch.delenv("MVCN_THREADS", raising=False)
    assert resolve_threads(None) == 1
    monkeypatch.setenv("MVCN_THREADS", "3")
    assert resolve_threads(None) == 3 and resolve_threads(2) == 2
    monkeypatch.setenv("MVCN_THREADS", "many")
    with pytest.raises(ConfigError):
        resolve_threads(None)
    with pytest.raises(ConfigError):
        resolve_threads(0)


def test_csv_tables_keep_full_precision():
    text = table_csv([{"x": 0.1, "ok": True, "n": 3}])
    assert text == "x,ok,n\n0.10000000000000001,true,3\n"
    assert float(text.splitlines()[1].split(",")[0]) == 0.1


def test_closed_forms_for_linear_model():
    cf = closed_forms(LinearMeanField(-0.5, 0.3, 0.2, 0.4), 1.0)
    assert cf["w"][0, 0] == pytest.approx(np.exp(-0.5))
    assert cf["D0"][0, 0] == pytest.approx(0.2 * np.exp(-0.2))
    # Gamma' = -0.2 Gamma + 0.3 e^{-0.5 t}, Gamma(0) = 0
    assert cf["Gamma"][0, 0] == pytest.approx((np.exp(-0.2) - np.exp(-0.5)))


@pytest.mark.parametrize("study", sorted(SMALL))
def test_replay_is_bit_exact_across_thread_counts(study, tmp_path):
    rec = run_study(parse_config(SMALL[study]), threads=1, out_dir=tmp_path)
    write_record(rec, tmp_path)
    for threads in (1, 4):
        _, same = replay(tmp_path / "record.json", threads=threads, out_dir=tmp_path / f"r{threads}")
        assert same and all(same.values()), same


def test_simulate_writes_noise_and_paths(tmp_path):
    rec = run_study(parse_config(SMALL["simulate"]), out_dir=tmp_path)
    write_record(rec, tmp_path)
    assert (tmp_path / "noise.bin").exists() and (tmp_path / "tables" / "paths.csv").exists()
    doc = json.loads((tmp_path / "record.json").read_text())
    assert doc["status"] == "pass" and doc["tables"]["terminal"] == "tables/terminal.csv"
    assert load_config(tmp_path / "record.json").seed == 3


def test_cli_exit_codes(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", SMALL["tangent"])
    assert main(["tangent", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert main(["replay", "--config", str(tmp_path / "o" / "record.json"), "--threads", "2"]) == 0
    assert main(["ibp", "--config", cfg]) == 3
    assert main(["tangent", "--config", str(tmp_path / "missing.json")]) == 4
    (tmp_path / "bad.json").write_text("{")
    assert main(["tangent", "--config", str(tmp_path / "bad.json")]) == 3
    capsys.readouterr()
    assert main(["tangent", "--config", cfg, "--seed", "5"]) == 0
    assert "moment_spread" in json.loads(capsys.readouterr().out)


def test_cli_replay_detects_tampering(tmp_path):
    cfg = write_json(tmp_path / "c.json", SMALL["simulate"])
    out = tmp_path / "o"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    table = out / "tables" / "terminal.csv"
    table.write_text(table.read_text().replace("0", "1", 1))
    assert main(["replay", "--config", str(out / "record.json")]) == 2


@pytest.mark.parametrize("name", ["degenerate_s0", "degenerate_s1"])
def test_degenerate_fixtures_are_refused_with_a_record(name, tmp_path):
    cfg = str(files("mvcn") / "fixtures" / f"{name}.json")
    assert main(["ibp", "--config", cfg, "--out", str(tmp_path)]) == 3
    doc = json.loads((tmp_path / "record.json").read_text())
    assert doc["status"] == "refused" and "ellipticity" in doc["reason"].lower()


def test_every_fixture_parses():
    for path in (files("mvcn") / "fixtures").iterdir():
        if path.name.endswith(".json"):
            assert parse_config(json.loads(path.read_text())).seed == 20240601
