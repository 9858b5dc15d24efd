import csv
import json
import math

import numpy as np
import pytest
import yaml

from qmeasure import coleman_hepp as ch
from qmeasure import measurement
from qmeasure.cli import main, run
from qmeasure.config import ConfigError, config_from_dict, expand_grid, load, loads
from qmeasure.linalg import random_hermitian


def write_config(tmp_path, kind, section, name="cfg.yaml", **top):
    doc = {"schema": "qmeasure-config/1", "kind": kind, **top, kind: section}
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return path


def read_rows(out_dir):
    with (out_dir / "results.csv").open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def read_summary(out_dir):
    return json.loads((out_dir / "summary.json").read_text(encoding="utf-8"))


def invoke(kind, cfg, out, *extra):
    return main([kind, "--config", str(cfg), "--out", str(out), *extra])


SIMULATE = {"model": "random", "n": 2, "dim_k": 4, "energies": [0.0, 0.7],
            "amplitudes": [0.6, [0.0, 0.8]], "times": {"start": 0.0, "stop": 2.0, "num": 10}}


class TestSimulate:
    def test_end_to_end_against_library(self, tmp_path):
        cfg = write_config(tmp_path, "simulate", SIMULATE, seed=5)
        assert invoke("simulate", cfg, tmp_path / "out") == 0
        rows = read_rows(tmp_path / "out")
        assert len(rows) == 10

        rng = np.random.default_rng(5)
        base = measurement.random_model(rng, 2, 4, 2, 1.0)
        model = measurement.build_coupled(measurement.SystemModel([0.0, 0.7], [0.6, 0.8j]),
                                     base.apparatus, base.couplings)
        obs = random_hermitian(rng, 2)
        for row, t in zip(rows, np.linspace(0, 2, 10)):
            assert float(row["t"]) == pytest.approx(t, abs=1e-15)
            f = measurement.f_coefficients(model, t)
            w = measurement.pointer_probabilities(model, f)
            assert [float(row["w_0"]), float(row["w_1"])] == pytest.approx(w, abs=1e-14)
            assert float(row["expectation"]) == pytest.approx(measurement.expectation(model, f, obs),
                                                              abs=1e-14)
            assert complex(float(row["F_0_1_1_re"]), float(row["F_0_1_1_im"])) == pytest.approx(
                f.values[0, 1, 1], abs=1e-14)
        summary = read_summary(tmp_path / "out")
        assert summary["rows"] == 10 and summary["passed"] and summary["error"] is None

    def test_coleman_hepp(self, tmp_path):
        section = {"model": "coleman-hepp", "n_spins": 40, "angles": [0.0, 1.0],
                   "observable": "sigma_x", "times": [0.0, ch.readout_time(1.0, 0.9)]}
        cfg = write_config(tmp_path, "simulate", section)
        assert invoke("simulate", cfg, tmp_path / "out") == 0
        first, readout = read_rows(tmp_path / "out")
        assert float(first["w_0"]) == pytest.approx(1.0)
        eta = ch.eta_sweep([40], (0.0, 1.0), ch.readout_time(1.0, 0.9))[0][1]
        assert float(readout["diag_deficit"]) == pytest.approx(eta, rel=1e-12)
        assert float(readout["bijective"]) == 1.0
        assert float(readout["w_1"]) == pytest.approx(0.5 * (1 - eta), rel=1e-12)

    def test_empty_time_grid(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "simulate", {**SIMULATE, "times": []})
        assert invoke("simulate", cfg, tmp_path / "out") == 2
        assert "simulate.times: grid is empty" in capsys.readouterr().err
        cfg = write_config(tmp_path, "simulate", {**SIMULATE, "times": {"start": 0, "stop": 1, "num": 0}})
        assert invoke("simulate", cfg, tmp_path / "out") == 2


class TestChSweep:
    def test_fit(self, tmp_path):
        section = {"n_spins": {"start": 20, "stop": 200, "step": 20}, "angles": [0.0, 1.0],
                   "p_up": 0.9}
        cfg = write_config(tmp_path, "ch-sweep", section)
        assert invoke("ch-sweep", cfg, tmp_path / "out") == 0
        rows = read_rows(tmp_path / "out")
        assert [int(r["N"]) for r in rows] == list(range(20, 201, 20))
        summary = read_summary(tmp_path / "out")
        assert summary["c_hat"] > 0 and summary["r_squared"] >= 0.99

    def test_non_bijective_keeps_partial_rows(self, tmp_path, capsys):
        # the readout fixed at t=0 cannot separate the levels
        cfg = write_config(tmp_path, "ch-sweep", {"n_spins": [10, 20], "angles": [0.0, 1.0],
                                                  "t_star": 0.0})
        assert invoke("ch-sweep", cfg, tmp_path / "out") == 1
        summary = read_summary(tmp_path / "out")
        assert "not bijective" in summary["error"] and summary["rows"] == 0
        assert "PointerMapError" in capsys.readouterr().err


class TestReliability:
    def test_fixed_ratio(self, tmp_path):
        cfg = write_config(tmp_path, "reliability", {"pairs": [[100, 5], [400, 10], [1600, 20]]})
        assert invoke("reliability", cfg, tmp_path / "out") == 0
        rows = read_rows(tmp_path / "out")
        for r in rows:
            assert float(r["misread_probability"]) == pytest.approx(
                ch.reliability_probe(int(r["N"]), int(r["n"])), rel=1e-15)
        assert read_summary(tmp_path / "out")["spread_factor"] < 3


class TestApproximant:
    def test_worked_example(self, tmp_path):
        cfg = write_config(tmp_path, "approximant", {"epsilon": 0.25, "grid_dim": 8,
                                                     "max_denominator": 16})
        assert invoke("approximant", cfg, tmp_path / "out") == 0
        rows = read_rows(tmp_path / "out")
        assert [r["readout"] for r in rows] == ["1/8", "3/8", "5/8", "7/8"]
        assert [int(r["eigenvalue_count"]) for r in rows] == [2, 2, 2, 2]
        summary = read_summary(tmp_path / "out")
        assert summary["error_norm"] == 0.125
        assert summary["tradeoff"] == {"levels": 4, "reliable": True, "risk_exponent": 62500.0}


class TestVerify:
    @pytest.mark.parametrize("section,code", [
        ({"model": "ideal"}, 0),
        ({"model": "ideal", "fault": "sum-rule"}, 1),
        ({"model": "ideal", "fault": "hermitian"}, 1),
        ({"model": "random", "n": 3, "dim_k": 5}, 0),
        ({"model": "coleman-hepp", "n_spins": 8}, 0),
    ])
    def test_exit_codes(self, tmp_path, capsys, section, code):
        cfg = write_config(tmp_path, "verify", section)
        assert invoke("verify", cfg, tmp_path / "out") == code
        out = capsys.readouterr().out
        assert ("[FAIL]" in out) == (code == 1)

    def test_sum_rule_fault_is_named(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "verify", {"model": "ideal", "fault": "sum-rule"})
        invoke("verify", cfg, tmp_path / "out")
        failed = [line for line in capsys.readouterr().out.splitlines() if line.startswith("[FAIL]")]
        assert any("sum rule" in line for line in failed)

    def test_coleman_hepp_equivalence_check(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "verify", {"model": "coleman-hepp", "n_spins": 8})
        invoke("verify", cfg, tmp_path / "out")
        assert "[PASS] structured F equals dense F" in capsys.readouterr().out


class TestDeterminism:
    @pytest.mark.parametrize("kind,section", [
        ("simulate", {"model": "random", "n": 3, "dim_k": 6, "times": [0.0, 0.5, 1.7]}),
        ("approximant", {"epsilon": 0.1, "proxy": "random", "grid_dim": 32, "range": [-1, 1]}),
    ])
    def test_identical_csv(self, tmp_path, kind, section):
        cfg = write_config(tmp_path, kind, section, seed=123)
        assert invoke(kind, cfg, tmp_path / "a") == 0
        assert invoke(kind, cfg, tmp_path / "b") == 0
        assert (tmp_path / "a" / "results.csv").read_bytes() == \
            (tmp_path / "b" / "results.csv").read_bytes()

    def test_seed_override(self, tmp_path):
        section = {"model": "random", "n": 2, "dim_k": 3, "times": [1.0]}
        cfg = write_config(tmp_path, "simulate", section, seed=1)
        invoke("simulate", cfg, tmp_path / "a")
        invoke("simulate", cfg, tmp_path / "b", "--seed", "2")
        assert read_summary(tmp_path / "b")["seed"] == 2
        assert (tmp_path / "a" / "results.csv").read_bytes() != \
            (tmp_path / "b" / "results.csv").read_bytes()

    def test_threads_do_not_change_output(self, tmp_path):
        cfg = write_config(tmp_path, "ch-sweep", {"n_spins": {"start": 10, "stop": 300, "step": 10}})
        invoke("ch-sweep", cfg, tmp_path / "a", "--threads", "1")
        invoke("ch-sweep", cfg, tmp_path / "b", "--threads", "4")
        assert (tmp_path / "a" / "results.csv").read_bytes() == \
            (tmp_path / "b" / "results.csv").read_bytes()


class TestConfig:
    @pytest.mark.parametrize("kind,section", [
        ("simulate", SIMULATE),
        ("simulate", {"model": "coleman-hepp", "n_spins": 5, "times": [1.0]}),
        ("ch-sweep", {"n_spins": [5, 10], "t_star": 1.5}),
        ("reliability", {"pairs": [[10, 2]], "p": 0.3}),
        ("approximant", {"epsilon": 0.3}),
        ("verify", {"model": "coleman-hepp"}),
        ("verify", {"model": "random", "nu": 1}),
    ])
    def test_round_trip(self, kind, section):
        cfg = config_from_dict({"kind": kind, kind: section, "seed": 9})
        again = loads(cfg.dumps())
        assert again == cfg
        assert again.dumps() == cfg.dumps()
        assert again.digest() == cfg.digest()

    def test_defaults_filled(self):
        cfg = config_from_dict({"kind": "ch-sweep", "ch-sweep": {"n_spins": [4]}})
        assert cfg.params == {"n_spins": [4], "angles": [0.0, 1.0], "p_up": 0.9,
                              "energies": [0.0, 0.0]}

    def test_grids(self):
        assert expand_grid({"start": 20, "stop": 200, "step": 20}) == list(range(20, 201, 20))
        assert expand_grid({"start": 0.0, "stop": 1.0, "num": 5}) == [0, 0.25, 0.5, 0.75, 1.0]
        assert expand_grid({"start": 2.0, "stop": 3.0, "num": 1}) == [2.0]

    def test_yaml_error_has_position(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("kind: simulate\nsimulate: {times: [1, 2\n", encoding="utf-8")
        with pytest.raises(ConfigError, match=r"bad.yaml: YAML error at line \d+, column \d+"):
            load(path)

    @pytest.mark.parametrize("raw,message", [
        ({"kind": "nope"}, "kind: expected one of"),
        ({"schema": "other/2", "kind": "verify"}, "unsupported schema"),
        ({"kind": "simulate", "simulate": {"n": 1, "times": [0]}}, r"simulate.n: must be >= 2"),
        ({"kind": "simulate", "simulate": {"n": 3, "observable": "sigma_x", "times": [0]}},
         "simulate.observable"),
        ({"kind": "simulate", "simulate": {"amplitudes": [1, 1], "times": [0]}}, "normalized"),
        ({"kind": "ch-sweep", "ch-sweep": {"n_spins": [0, 5]}}, "n_spins: spin counts"),
        ({"kind": "ch-sweep", "ch-sweep": {"n_spins": [5], "p_up": 0}}, "p_up"),
        ({"kind": "reliability", "reliability": {"pairs": [[10, 0]]}}, "bad pair"),
        ({"kind": "approximant", "approximant": {"epsilon": -1}}, "epsilon: must be positive"),
        ({"kind": "approximant", "approximant": {}}, "epsilon: required"),
        ({"kind": "verify", "verify": {"model": "coleman-hepp", "n_spins": 13}}, "12 spins"),
        ({"kind": "verify", "seed": -1}, "seed: must be >= 0"),
        ({"kind": "verify", "threads": "many"}, "threads: expected an integer"),
    ])
    def test_field_diagnostics(self, raw, message):
        with pytest.raises(ConfigError, match=message):
            config_from_dict(raw)

    def test_kind_must_match_subcommand(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "reliability", {"pairs": [[10, 2]]})
        assert invoke("verify", cfg, tmp_path / "out") == 2
        assert "subcommand is 'verify'" in capsys.readouterr().err

    def test_missing_file(self, tmp_path, capsys):
        assert invoke("verify", tmp_path / "missing.yaml", tmp_path / "out") == 2
        assert "cannot read config" in capsys.readouterr().err

    def test_bad_flags(self, tmp_path):
        cfg = write_config(tmp_path, "verify", {"model": "ideal"})
        assert invoke("verify", cfg, tmp_path / "out", "--threads", "0") == 2
        with pytest.raises(SystemExit) as exc:
            main(["verify"])
        assert exc.value.code == 2

    def test_output_from_config(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = write_config(tmp_path, "verify", {"model": "ideal"}, output="here")
        assert main(["verify", "--config", str(cfg)]) == 0
        assert (tmp_path / "here" / "summary.json").exists()

    def test_run_api(self, tmp_path):
        cfg = config_from_dict({"kind": "reliability", "reliability": {"pairs": [[100, 2]]}})
        result = run(cfg, tmp_path)
        assert result.rows[0][3] == pytest.approx(ch.reliability_probe(100, 2))
        assert math.isfinite(read_summary(tmp_path)["wall_time_s"])
