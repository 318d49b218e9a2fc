"""Config parsing, result records, and the command-line surface."""

import json
import math
import os

import numpy as np
import pytest

from mimofbl import cli, records
from mimofbl.config import (
    ConfigError,
    ExperimentSpec,
    canonical_json,
    dbm_to_watts,
    parse_config,
    parse_config_dict,
)
from mimofbl.records import (
    ResultRecord,
    emit_plot_data,
    read_records,
    write_records,
)

MINIMAL_AVAIL = {"scenario": "availability", "L": 4, "K": 10, "M": 100,
                 "n": 300, "f": 4, "b": 160, "power_dbm": 10.0,
                 "noise_dbm": -94.0, "delta_deg": 25.0, "eps_target": 1e-5,
                 "seed": 7}


class TestParseConfig:
    def test_minimal_availability_resolves_network(self):
        spec = parse_config_dict(dict(MINIMAL_AVAIL))
        assert spec.scenario == "availability"
        assert spec.seed == 7
        cfg = spec.network_config()
        assert cfg.rho_ul == pytest.approx(0.01, rel=1e-12)
        assert cfg.sigma2_ul == pytest.approx(10.0 ** -12.4, rel=1e-12)
        assert cfg.pilot_length == 40
        assert cfg.data_uses == 130
        # defaults filled in for the keys the dict omits
        assert spec["reuse_factors"] == [1, 2, 4, 8]
        assert spec["num_placements"] == 500

    def test_dbm_conversion_happens_once_at_parse(self):
        assert dbm_to_watts(10.0) == pytest.approx(0.01)
        assert dbm_to_watts(-94.0) == pytest.approx(10.0 ** -12.4)
        spec = parse_config_dict({**MINIMAL_AVAIL, "power_dbm": 23.0})
        assert spec.network_config().rho_ul == pytest.approx(0.1995262315)

    def test_unknown_key_is_an_error_naming_it(self):
        with pytest.raises(ConfigError, match="rho_watts"):
            parse_config_dict({**MINIMAL_AVAIL, "rho_watts": 0.5})

    def test_multiple_unknown_keys_all_listed(self):
        with pytest.raises(ConfigError, match="aaa.*zzz"):
            parse_config_dict({**MINIMAL_AVAIL, "zzz": 1, "aaa": 2})

    def test_odd_block_split_names_the_keys(self):
        with pytest.raises(ConfigError, match="'n'.*even"):
            parse_config_dict({**MINIMAL_AVAIL, "n": 301})

    def test_pilots_consume_block(self):
        # n=42 splits evenly for f in {1,2,4} but f=8 needs 80 pilots
        with pytest.raises(ConfigError, match="no data uses"):
            parse_config_dict({**MINIMAL_AVAIL, "n": 42})

    def test_block_split_checked_per_reuse_factor(self):
        # f=8 gives 80 pilots; n=100 leaves 20 uses, fine for all entries
        parse_config_dict({**MINIMAL_AVAIL, "n": 100,
                           "reuse_factors": [1, 2, 8]})
        with pytest.raises(ConfigError, match="f'=8"):
            parse_config_dict({**MINIMAL_AVAIL, "n": 80,
                               "reuse_factors": [1, 8]})

    def test_round_trip_parse_of_echo(self):
        spec = parse_config_dict(dict(MINIMAL_AVAIL))
        again = parse_config_dict(spec.echo())
        assert again == spec

    def test_round_trip_all_scenarios(self):
        base = [{"scenario": "single-ue", "seed": 1},
                {"scenario": "two-ue-angle", "seed": 2},
                {"scenario": "asymptotic", "seed": 3},
                {"scenario": "availability", "seed": 4},
                {"scenario": "kernel-validate", "seed": 5}]
        for raw in base:
            spec = parse_config_dict(raw)
            assert parse_config_dict(spec.echo()) == spec

    def test_hash_stable_under_key_order(self):
        a = parse_config_dict(dict(MINIMAL_AVAIL))
        shuffled = dict(reversed(list(MINIMAL_AVAIL.items())))
        b = parse_config_dict(shuffled)
        assert a.config_hash() == b.config_hash()

    def test_hash_tracks_values(self):
        a = parse_config_dict(dict(MINIMAL_AVAIL))
        b = parse_config_dict({**MINIMAL_AVAIL, "seed": 8})
        assert a.config_hash() != b.config_hash()

    def test_scenario_from_override(self):
        raw = {k: v for k, v in MINIMAL_AVAIL.items() if k != "scenario"}
        spec = parse_config_dict(raw, "availability")
        assert spec.scenario == "availability"

    def test_scenario_mismatch_rejected(self):
        with pytest.raises(ConfigError, match="single-ue"):
            parse_config_dict(dict(MINIMAL_AVAIL), "single-ue")

    def test_missing_scenario_and_unknown_scenario(self):
        with pytest.raises(ConfigError, match="no scenario"):
            parse_config_dict({"seed": 1})
        with pytest.raises(ConfigError, match="unknown scenario"):
            parse_config_dict({"scenario": "fig9", "seed": 1})

    def test_root_must_be_object(self):
        with pytest.raises(ConfigError, match="object"):
            parse_config_dict([1, 2, 3])

    def test_seed_required_and_bounded(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config_dict({"scenario": "kernel-validate"})
        with pytest.raises(ConfigError, match="64"):
            parse_config_dict({"scenario": "kernel-validate", "seed": -1})
        with pytest.raises(ConfigError, match="64"):
            parse_config_dict({"scenario": "kernel-validate",
                               "seed": 2 ** 64})
        parse_config_dict({"scenario": "kernel-validate",
                           "seed": 2 ** 64 - 1})

    def test_bool_is_not_an_int(self):
        with pytest.raises(ConfigError, match="'n' must be an integer"):
            parse_config_dict({**MINIMAL_AVAIL, "n": True})

    def test_type_errors(self):
        with pytest.raises(ConfigError, match="'power_dbm'"):
            parse_config_dict({**MINIMAL_AVAIL, "power_dbm": "high"})
        with pytest.raises(ConfigError, match="'correlation'"):
            parse_config_dict({**MINIMAL_AVAIL, "correlation": 3})
        with pytest.raises(ConfigError, match="'reuse_factors'"):
            parse_config_dict({**MINIMAL_AVAIL, "reuse_factors": [1, 2.5]})
        with pytest.raises(ConfigError, match="finite"):
            parse_config_dict({**MINIMAL_AVAIL, "power_dbm": math.inf})

    def test_enum_and_range_checks(self):
        with pytest.raises(ConfigError, match="'correlation' must be one"):
            parse_config_dict({**MINIMAL_AVAIL, "correlation": "kronecker"})
        with pytest.raises(ConfigError, match="positive"):
            parse_config_dict({**MINIMAL_AVAIL, "K": 0})
        with pytest.raises(ConfigError, match="ascending"):
            parse_config_dict({**MINIMAL_AVAIL, "reuse_factors": [4, 2]})
        with pytest.raises(ConfigError, match="eps_target"):
            parse_config_dict({**MINIMAL_AVAIL, "eps_target": 1.5})

    def test_two_ue_angle_grid_checks(self):
        raw = {"scenario": "two-ue-angle", "seed": 1,
               "angle_min_deg": 50.0, "angle_max_deg": 10.0}
        with pytest.raises(ConfigError, match="angle_max_deg"):
            parse_config_dict(raw)
        parse_config_dict({**raw, "angle_points": 1})

    def test_single_ue_rate_below_one(self):
        with pytest.raises(ConfigError, match="'b'"):
            parse_config_dict({"scenario": "single-ue", "seed": 1,
                               "n": 50, "b": 50})

    def test_inconsistent_deployment_wrapped(self):
        # passes the key checks, fails NetworkConfig validation
        with pytest.raises(ConfigError, match="inconsistent"):
            parse_config_dict({**MINIMAL_AVAIL, "L": 3})

    def test_file_round_trip_and_errors(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(MINIMAL_AVAIL))
        spec = parse_config(str(path))
        assert spec == parse_config_dict(dict(MINIMAL_AVAIL))
        with pytest.raises(ConfigError, match="cannot read"):
            parse_config(str(tmp_path / "nope.json"))
        bad = tmp_path / "bad.json"
        bad.write_text("{oops")
        with pytest.raises(ConfigError, match="not valid JSON"):
            parse_config(str(bad))


def make_record(value=0.5, **kw):
    base = dict(scenario="availability", config_hash="h", axes={"m": 4},
                method="saddlepoint", value=value)
    base.update(kw)
    return ResultRecord(**base)


class TestResultRecord:
    def test_rejects_values_outside_unit_interval(self):
        with pytest.raises(ValueError, match="probability"):
            make_record(value=1.5)
        with pytest.raises(ValueError, match="probability"):
            make_record(value=-0.1)
        with pytest.raises(ValueError, match="probability"):
            make_record(value=math.nan)
        make_record(value=0.0)
        make_record(value=1.0)

    def test_ci_must_come_paired_and_bracket(self):
        with pytest.raises(ValueError):
            make_record(ci_low=0.1)
        with pytest.raises(ValueError):
            make_record(ci_high=0.9)
        with pytest.raises(ValueError, match="bracket"):
            make_record(value=0.5, ci_low=0.6, ci_high=0.9)
        with pytest.raises(ValueError, match="bracket"):
            make_record(value=0.5, ci_low=0.1, ci_high=0.4)
        make_record(value=0.5, ci_low=0.5, ci_high=0.5)

    def test_axes_keys_must_be_strings(self):
        with pytest.raises(ValueError):
            make_record(axes={4: "m"})

    def test_json_round_trip(self):
        rec = make_record(value=0.25, ci_low=0.2, ci_high=0.3,
                          s_used=1.25, zeta_used=-0.5, wall_time_s=2.0)
        assert ResultRecord.from_json(rec.to_json()) == rec

    def test_file_round_trip(self, tmp_path):
        recs = [make_record(value=v) for v in (0.1, 0.2, 0.3)]
        path = str(tmp_path / "records.jsonl")
        write_records(recs, path)
        assert read_records(path) == recs


def avail_records(pilot_lengths=(20, 40), value=0.5):
    keys = [("ul", "mmse"), ("dl", "mmse"), ("ul", "mr"), ("dl", "mr"),
            ("dl-perfect", "mmse")]
    out = []
    for npil in pilot_lengths:
        for direction, comb in keys:
            out.append(ResultRecord(
                scenario="availability", config_hash="h",
                axes={"pilot_length": npil, "combiner": comb,
                      "direction": direction},
                method="availability", value=value))
    return out


class TestEmitPlotData:
    def test_availability_header_and_order(self):
        text = emit_plot_data(avail_records(), "availability")
        lines = text.splitlines()
        assert lines[0] == ("np,eta_ul_mmse,eta_dl_mmse,eta_ul_mr,"
                            "eta_dl_mr,eta_dl_mmse_perfect_csi")
        assert [ln.split(",")[0] for ln in lines[1:]] == ["20", "40"]
        assert text.endswith("\n")

    def test_availability_ignores_foreign_records(self):
        recs = avail_records()
        recs.append(ResultRecord(
            scenario="availability", config_hash="h",
            axes={"pilot_length": 20, "combiner": "mr",
                  "direction": "dl-perfect"},
            method="availability", value=0.5))
        recs.append(make_record())  # no direction axis at all
        text = emit_plot_data(recs, "availability")
        assert len(text.splitlines()) == 3

    def test_empty_records_error(self):
        with pytest.raises(ValueError, match="no records"):
            emit_plot_data([], "availability")

    def test_unknown_figure_error(self):
        with pytest.raises(ValueError, match="unknown figure"):
            emit_plot_data(avail_records(), "fig99")

    def test_gaps_are_errors_listing_the_hole(self):
        recs = [r for r in avail_records()
                if not (r.axes["pilot_length"] == 40
                        and r.axes["combiner"] == "mr"
                        and r.axes["direction"] == "ul")]
        with pytest.raises(ValueError, match="gaps.*40.*eta_ul_mr"):
            emit_plot_data(recs, "availability")

    def test_duplicate_series_at_a_point_rejected(self):
        recs = avail_records() + avail_records(pilot_lengths=(20,))
        with pytest.raises(ValueError, match="duplicate"):
            emit_plot_data(recs, "availability")

    def test_single_ue_asymptote_column_optional(self):
        def point(m, with_asym):
            methods = ["rcus-mc", "saddlepoint", "normal", "outage"]
            if with_asym:
                methods.append("normal-asymptotic")
            return [ResultRecord(scenario="single-ue", config_hash="h",
                                 axes={"m": m}, method=meth, value=0.25)
                    for meth in methods]

        full = point(1, True) + point(4, True)
        text = emit_plot_data(full, "single-ue")
        assert text.splitlines()[0].endswith("eps_normal_asym")
        partial = point(1, True) + point(4, False)
        text = emit_plot_data(partial, "single-ue")
        assert "eps_normal_asym" not in text.splitlines()[0]

    def test_values_carry_nine_significant_digits(self):
        recs = avail_records(pilot_lengths=(20,), value=1 / 3)
        text = emit_plot_data(recs, "availability")
        assert "0.333333333" in text


class TestCli:
    AVAIL = {"scenario": "availability", "seed": 3, "L": 4, "K": 2,
             "M": 8, "n": 24, "f": 1, "b": 12, "eps_target": 0.5,
             "reuse_factors": [1, 2], "num_placements": 2,
             "num_fading": 40, "num_hardening": 60}
    KV = {"scenario": "kernel-validate", "seed": 11, "n": 60,
          "num_channels": 3, "mc_samples": 4000}

    def write(self, tmp_path, raw, name="cfg.json"):
        path = tmp_path / name
        path.write_text(json.dumps(raw))
        return str(path)

    def test_availability_run_end_to_end(self, tmp_path):
        cfg = self.write(tmp_path, self.AVAIL)
        out = str(tmp_path / "out")
        assert cli.main([cfg, "--out", out]) == 0
        names = sorted(os.listdir(out))
        assert names == ["availability.csv", "availability.png",
                         "records.jsonl", "run_manifest.json"]

        recs = read_records(os.path.join(out, "records.jsonl"))
        # one record per (pilot length, combiner, direction) combination
        seen = {(r.axes["pilot_length"], r.axes["combiner"],
                 r.axes["direction"]) for r in recs}
        assert len(seen) == len(recs)
        combos = {(npil, comb, d) for npil in (2, 4) for comb in ("mr", "mmse")
                  for d in ("ul", "dl", "dl-perfect")}
        assert seen == combos
        for rec in recs:
            assert 0.0 <= rec.value <= 1.0
            assert rec.ci_low <= rec.value <= rec.ci_high
            assert rec.method == "availability"

        manifest = json.loads(
            open(os.path.join(out, "run_manifest.json")).read())
        spec = parse_config(cfg)
        assert manifest["config_hash"] == spec.config_hash()
        assert manifest["config"] == spec.echo()
        assert manifest["num_records"] == len(recs)
        assert set(manifest["versions"]) == {"python", "numpy", "scipy",
                                             "mimofbl"}
        assert "availability.csv" in manifest["outputs"]

    def test_rerun_reproduces_csv_bytes(self, tmp_path):
        cfg = self.write(tmp_path, self.AVAIL)
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        assert cli.main([cfg, "--out", out1, "--no-plots"]) == 0
        assert cli.main([cfg, "--out", out2, "--no-plots"]) == 0
        a = open(os.path.join(out1, "availability.csv"), "rb").read()
        b = open(os.path.join(out2, "availability.csv"), "rb").read()
        assert a == b

    def test_no_plots_flag(self, tmp_path):
        cfg = self.write(tmp_path, self.KV)
        out = str(tmp_path / "out")
        assert cli.main([cfg, "--out", out, "--no-plots"]) == 0
        assert not [n for n in os.listdir(out) if n.endswith(".png")]

    def test_kernel_validate_tables(self, tmp_path):
        cfg = self.write(tmp_path, self.KV)
        out = str(tmp_path / "out")
        assert cli.main([cfg, "--out", out]) == 0
        cgf = open(os.path.join(out, "cgf_check.csv")).read().splitlines()
        assert cgf[0].split(",") == ["channel", "zeta", "kappa", "kappa_d1",
                                     "fd_d1", "rel_err_d1", "kappa_d2",
                                     "fd_d2", "rel_err_d2"]
        # five interior points per channel
        assert len(cgf) == 1 + 5 * self.KV["num_channels"]
        for line in cgf[1:]:
            rel1, rel2 = float(line.split(",")[5]), float(line.split(",")[8])
            assert rel1 < 1e-5 and rel2 < 1e-3

        bound = open(os.path.join(out, "bound_check.csv")).read().splitlines()
        assert bound[0].split(",")[:2] == ["channel", "s"]
        assert len(bound) == 1 + self.KV["num_channels"]
        inside = [int(line.split(",")[-1]) for line in bound[1:]]
        assert sum(inside) >= self.KV["num_channels"] - 1

    def test_out_dir_falls_back_to_config_key(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = self.write(tmp_path, {**self.KV, "out_dir": "from_key"})
        assert cli.main([cfg, "--no-plots"]) == 0
        assert (tmp_path / "from_key" / "records.jsonl").exists()

    def test_config_errors_exit_two(self, tmp_path, capsys):
        bad = self.write(tmp_path, {**self.AVAIL, "rho_watts": 0.5})
        assert cli.main([bad]) == 2
        assert "rho_watts" in capsys.readouterr().err

        notjson = tmp_path / "bad.json"
        notjson.write_text("{nope")
        assert cli.main([str(notjson)]) == 2
        assert cli.main([str(tmp_path / "missing.json")]) == 2

        good = self.write(tmp_path, self.KV)
        assert cli.main([good, "--scenario", "availability"]) == 2
        assert cli.main([good, "--threads", "0"]) == 2

    def test_numeric_failure_exits_three(self, tmp_path, capsys,
                                         monkeypatch):
        cfg = self.write(tmp_path, self.KV)

        def boom(spec, threads):
            raise FloatingPointError("tail evaluation overflowed")

        monkeypatch.setitem(cli._RUNNERS, "kernel-validate", boom)
        assert cli.main([cfg, "--out", str(tmp_path / "out")]) == 3
        assert "numeric failure" in capsys.readouterr().err

    def test_single_ue_run_end_to_end(self, tmp_path):
        cfg = self.write(tmp_path, {
            "scenario": "single-ue", "seed": 9, "n": 60, "b": 30,
            "antenna_grid": [1, 4], "num_fading": 100,
            "mc_samples_per_draw": 30})
        out = str(tmp_path / "out")
        assert cli.main([cfg, "--out", out, "--no-plots"]) == 0
        lines = open(os.path.join(out, "single_ue.csv")).read().splitlines()
        assert lines[0] == ("M,eps_rcus_mc,eps_saddle,eps_normal,"
                            "eps_outage,eps_normal_asym")
        assert len(lines) == 3
        first = [float(x) for x in lines[1].split(",")]
        assert first[0] == 1.0
        assert all(0.0 <= v <= 1.0 for v in first[1:])

    def test_two_ue_angle_run_end_to_end(self, tmp_path):
        cfg = self.write(tmp_path, {
            "scenario": "two-ue-angle", "seed": 5, "M": 8, "n": 20,
            "b": 12, "angle_points": 2, "angle_min_deg": 20.0,
            "angle_max_deg": 60.0, "num_fading": 30, "num_hardening": 40})
        out = str(tmp_path / "out")
        assert cli.main([cfg, "--out", out, "--no-plots"]) == 0
        lines = open(os.path.join(out, "two_ue_angle.csv")
                     ).read().splitlines()
        assert lines[0] == "phi2_deg,eps_ul_mr,eps_ul_mmse,eps_dl_mr,eps_dl_mmse"
        assert len(lines) == 3

    def test_asymptotic_run_end_to_end(self, tmp_path):
        cfg = self.write(tmp_path, {
            "scenario": "asymptotic", "seed": 5, "n": 20, "b": 12,
            "antenna_grid": [4, 8], "num_fading": 30, "num_hardening": 40})
        out = str(tmp_path / "out")
        assert cli.main([cfg, "--out", out, "--no-plots"]) == 0
        lines = open(os.path.join(out, "asymptotic.csv")).read().splitlines()
        assert lines[0] == ("M,eps_ul_mr,eps_ul_mmse,eps_dl_mr,"
                            "eps_dl_mmse,eps_mr_prediction")
        recs = read_records(os.path.join(out, "records.jsonl"))
        pred = [r for r in recs if r.method == "asymptotic-prediction"]
        assert len(pred) == 2
