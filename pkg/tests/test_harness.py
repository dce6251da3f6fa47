import csv
import io
import re

import numpy as np
import pytest

from bridgesim.harness import ConfigError, load_config, run_compare, run_figure, run_mh, run_simulate, run_tables
from bridgesim.harness.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from bridgesim.harness.config import parse_matrix, read_config_file
from bridgesim.harness.runners import figure_config, read_weights_csv, write_weights_csv
from bridgesim.harness import svg
from bridgesim.sde_core import read_paths_csv
from bridgesim.weights import LogWeight

LINEAR = {
    "model": "linear", "model_B": "-1", "model_sigma": "0.5", "u": "0.2", "v": "1", "T": "1",
    "aux": "custom", "aux_B": "-1", "aux_sigma": "0.5", "h": "0.01",
}


def linear_cfg(tmp_path, **extra):
    return load_config(None, {**LINEAR, "out": str(tmp_path), **extra})


class TestConfig:
    def test_defaults_follow_example(self):
        cfg = load_config()
        assert cfg.model == "ou" and cfg.sigma == 0.1 and cfg.T == 3.0
        np.testing.assert_array_equal(cfg.u, [0.1])

    def test_file_and_overrides(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("# double well\nmodel = ou-sine\nh = 1e-2  # coarse\nproposal = guided, residual\npaths=7\n")
        cfg = load_config(f, {"paths": 9, "sigma-policy": "constant-end"})
        assert cfg.model == "ou-sine" and cfg.h == 0.01 and cfg.paths == 9
        assert cfg.proposal == ("guided", "residual")
        assert cfg.v[0] == 2.0

    def test_matrix_syntax(self):
        np.testing.assert_array_equal(parse_matrix("0, 1; -1 -1"), [[0, 1], [-1, -1]])
        with pytest.raises(ValueError):
            parse_matrix("1, 2; 3")

    @pytest.mark.parametrize("values, field", [
        ({"h": "0"}, "h"),
        ({"paths": "0"}, "paths"),
        ({"model": "heston"}, "model"),
        ({"proposal": "magic"}, "proposal"),
        ({"sigma_policy": "interpolate"}, "t0"),
        ({"sigma_policy": "interpolate", "t0": "3"}, "t0"),
        ({"aux": "custom"}, "aux_B"),
        ({"u": "1, 2"}, "u"),
        ({"threads": "0"}, "threads"),
        ({"h": "abc"}, "h"),
        ({"colour": "red"}, "colour"),
    ])
    def test_errors_name_field(self, values, field):
        with pytest.raises(ConfigError) as info:
            load_config(None, values)
        assert info.value.field == field

    def test_bad_line(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("h 0.1\n")
        with pytest.raises(ConfigError):
            read_config_file(f)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.txt")


class TestWeightsCsv:
    def test_roundtrip_with_empty_columns(self):
        lw = LogWeight({"log_ptilde": -1.25, "g_integral": np.array([0.1, 1 / 3])})
        fh = io.StringIO()
        write_weights_csv(fh, [4, 5], lw)
        fh.seek(0)
        assert fh.readline().strip() == "path_id,log_total,log_psi1,log_psi2,log_const,g_integral"
        fh.seek(0)
        got = read_weights_csv(fh)
        np.testing.assert_array_equal(got["g_integral"], [0.1, 1 / 3])
        np.testing.assert_array_equal(got["log_const"], [-1.25, -1.25])
        np.testing.assert_array_equal(got["log_total"], lw.total)
        assert np.all(np.isnan(got["log_psi1"]))

    def test_no_weight(self):
        fh = io.StringIO()
        write_weights_csv(fh, [0], None)
        assert fh.getvalue().splitlines()[1] == "0,,,,,"


class TestSimulate:
    def test_files_roundtrip(self, tmp_path):
        cfg = load_config(None, {"h": "0.01", "paths": "4", "proposal": "guided,residual", "out": str(tmp_path)})
        result = run_simulate(cfg, log=lambda *_: None)
        assert set(result) == {"guided", "residual"}
        with open(tmp_path / "residual_paths.csv") as fh:
            ids, grid, states = read_paths_csv(fh)
        np.testing.assert_array_equal(ids, np.arange(4))
        assert states.shape == (4, 301, 1) and grid[-1] == 3.0
        with open(tmp_path / "residual_weights.csv") as fh:
            w = read_weights_csv(fh)
        np.testing.assert_allclose(w["log_total"], w["log_psi1"] + w["log_psi2"] + w["log_const"], rtol=1e-12)
        assert np.all(np.isnan(w["g_integral"]))

    def test_threads_do_not_change_output(self, tmp_path):
        outs = []
        for threads in (1, 3):
            d = tmp_path / str(threads)
            cfg = load_config(None, {"model": "ou-sine", "h": "0.01", "paths": "7", "threads": threads,
                                     "out": str(d)})
            run_simulate(cfg, log=lambda *_: None)
            outs.append(((d / "guided_paths.csv").read_bytes(), (d / "guided_weights.csv").read_bytes()))
        assert outs[0] == outs[1]

    def test_unweighted_proposal(self, tmp_path):
        cfg = load_config(None, {"h": "0.01", "paths": "2", "proposal": "delyon-hu-1", "out": str(tmp_path)})
        assert run_simulate(cfg, log=lambda *_: None) == {"delyon-hu-1": None}

    def test_interpolate_policy_with_lna(self, tmp_path):
        cfg = load_config(None, {"model": "sine", "h": "0.01", "paths": "3", "aux": "lna",
                                 "sigma_policy": "interpolate", "t0": "0.5", "out": str(tmp_path)})
        ess = run_simulate(cfg, log=lambda *_: None)["guided"]
        assert 1.0 <= ess <= 3.0


class TestCompare:
    def test_matching_linear_gives_full_ess(self, tmp_path):
        cfg = linear_cfg(tmp_path, proposal="guided,adj-residual-v2", paths=50, seed=3)
        rows = run_compare(cfg, log=lambda *_: None)
        assert rows[0]["ess"] == 50.0
        with open(tmp_path / "compare.csv") as fh:
            assert [r["proposal"] for r in csv.DictReader(fh)] == ["guided", "adj-residual-v2"]

    def test_example_one_ordering(self, tmp_path):
        cfg = load_config(None, {"h": "0.01", "paths": "300", "proposal": "guided,residual", "out": str(tmp_path)})
        g, r = run_compare(cfg, log=lambda *_: None)
        assert g["reference"] == "exact"
        assert g["mean_path_sup_distance"] < r["mean_path_sup_distance"]

    def test_needs_two(self, tmp_path):
        with pytest.raises(ConfigError):
            run_compare(linear_cfg(tmp_path, proposal="guided"))

    def test_rejects_duplicates(self, tmp_path):
        cfg = linear_cfg(tmp_path, proposal="delyon-hu-0,delyon-hu-0")
        with pytest.raises(ConfigError):
            run_compare(cfg)

    def test_rejects_unweighted(self, tmp_path):
        with pytest.raises(ConfigError):
            run_compare(linear_cfg(tmp_path, proposal="guided,lna-residual"))


class TestMH:
    def test_matching_linear_always_accepts(self, tmp_path):
        res = run_mh(linear_cfg(tmp_path, thin=10), n_iterations=200, log=lambda *_: None)
        assert res.acceptance_rate == 1.0
        with open(tmp_path / "mh_paths.csv") as fh:
            ids, _, states = read_paths_csv(fh)
        assert states.shape[0] == 21

    def test_example_one_rate_in_unit_interval(self, tmp_path):
        cfg = load_config(None, {"h": "0.01", "out": str(tmp_path)})
        res = run_mh(cfg, n_iterations=300, log=lambda *_: None)
        assert 0.0 < res.acceptance_rate < 1.0
        with open(tmp_path / "mh_trace.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 301 and rows[0]["accepted"] == ""

    def test_zero_iterations(self, tmp_path):
        with pytest.raises(ConfigError):
            run_mh(linear_cfg(tmp_path), n_iterations=0)


def test_tables_closed_and_ode_agree(tmp_path):
    base = {"model": "linear", "model_B": "0, 1; -1, -1", "model_sigma": "1, 0; 0, 1",
            "u": "0, 0", "v": "1, 0", "T": "1", "aux": "custom", "aux_B": "0, 1; -1, -1",
            "aux_sigma": "1, 0; 0, 1", "h": "0.001"}
    closed = run_tables(load_config(None, {**base, "out": str(tmp_path / "c")}), log=lambda *_: None)
    ode = run_tables(load_config(None, {**base, "tables": "ode", "out": str(tmp_path / "o")}), log=lambda *_: None)
    assert np.abs(closed.K - ode.K).max() <= 1e-6
    header = (tmp_path / "c" / "tables.csv").read_text().splitlines()[0]
    assert header == "t,K_00,K_01,K_10,K_11,v_0,v_1"


class TestFigure:
    def test_ou_deterministic_and_structured(self, tmp_path):
        texts = []
        for k in range(2):
            cfg = figure_config("ou", overrides={"out": str(tmp_path / str(k)), "h": "0.01"})
            texts.append(run_figure("ou", cfg, log=lambda *_: None).read_text())
        assert texts[0] == texts[1]
        # flow plus three panels of five paths
        assert texts[0].count("<polyline") == 16
        assert 'viewBox="0 0 1200 800"' in texts[0]
        for name in ("flow", "guided", "residual", "reference"):
            a = (tmp_path / "0" / f"figure_ou_{name}.csv").read_bytes()
            assert a == (tmp_path / "1" / f"figure_ou_{name}.csv").read_bytes()

    def test_unknown_figure(self):
        with pytest.raises(ConfigError):
            figure_config("heatmap")

    def test_figure_model_is_fixed(self):
        with pytest.raises(ConfigError):
            figure_config("ou", overrides={"model": "sine"})


def test_svg_ticks_and_polylines():
    p = svg.Panel("demo & test", np.linspace(0, 2, 5))
    p.add([1.0, 2.0, 3.0, 2.0, 1.0])
    text = svg.render([p])
    assert text.startswith('<svg xmlns="http://www.w3.org/2000/svg" width="600" height="400"')
    assert "demo &amp; test" in text
    labels = re.findall(r">([-0-9.e]+)</text>", text)
    assert labels == ["0", "2", "1", "3"]
    assert text.count("<polyline") == 1


class TestCli:
    def test_success(self, tmp_path, capsys):
        assert main(["simulate", "--h", "0.01", "--paths", "3", "--out", str(tmp_path)]) == EXIT_OK
        assert "ESS" in capsys.readouterr().out

    def test_config_error(self, tmp_path, capsys):
        code = main(["simulate", "--sigma-policy", "interpolate", "--paths", "1", "--out", str(tmp_path)])
        assert code == EXIT_CONFIG
        assert "t0" in capsys.readouterr().err

    def test_set_override(self, tmp_path):
        assert main(["tables", "--set", "model=sine", "--set", "h=0.1", "--out", str(tmp_path)]) == EXIT_OK
        assert (tmp_path / "tables.csv").exists()

    def test_numerical_error(self, tmp_path):
        code = main(["simulate", "--set", "sigma=1e-300", "--set", "v=5", "--h", "0.01",
                     "--paths", "1", "--out", str(tmp_path)])
        assert code == EXIT_NUMERIC

    def test_closed_tables_for_lna_is_config_error(self, tmp_path):
        code = main(["tables", "--aux", "lna", "--set", "tables=closed", "--h", "0.01", "--out", str(tmp_path)])
        assert code == EXIT_CONFIG
