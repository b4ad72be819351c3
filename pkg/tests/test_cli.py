"""Config grammar, campaign driver, CSV/manifest emission, thread-count
determinism, failure isolation, and plot-script generation."""

import csv
import hashlib
import json
import math
import os
import py_compile

import pytest

from dhlab.cli import (CSV_COLUMNS, ConfigError, ExperimentConfig, FieldConfig,
                       config_digest, emit_config, emit_plots, main,
                       parse_config, run, validate_config)

GOOD = """\
# demo campaign
[experiment]
kind = solve
d = 2
ns = [8, 12]
seeds = [0, 1]
boundary = x1
box = 2.2

[field]
kind = random
p0 = 4.0
q0 = 4.0
"""


class TestConfigGrammar:
    def test_parse_good(self):
        config = parse_config(GOOD)
        assert config.kind == "solve" and config.ns == (8, 12)
        assert config.seeds == (0, 1) and config.field.p0 == 4.0

    def test_round_trip_fixed_point(self):
        config = parse_config(GOOD)
        echoed = emit_config(config)
        assert parse_config(echoed) == config
        assert emit_config(parse_config(echoed)) == echoed
        assert config_digest(parse_config(echoed)) == config_digest(config)

    def test_inf_exponents_round_trip(self):
        config = parse_config("[experiment]\nkind = harnack\np = inf\n")
        assert math.isinf(config.p)
        assert "p = inf" in emit_config(config)
        assert parse_config(emit_config(config)) == config

    def test_quoted_strings_and_comments(self):
        config = parse_config(
            '[experiment]\nkind = "cutoff"  # trailing comment\n')
        assert config.kind == "cutoff"

    def test_q_below_one_names_key_and_line(self):
        text = "[experiment]\nkind = harnack\nq = 0.5\n"
        with pytest.raises(ConfigError, match=r"q \(line 3\): must be > 1"):
            parse_config(text)

    def test_unknown_key_names_line(self):
        with pytest.raises(ConfigError, match=r"line 2: unknown key 'frob'"):
            parse_config("[experiment]\nfrob = 1\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match=r"line 1: unknown section"):
            parse_config("[mystery]\n")

    def test_key_outside_section(self):
        with pytest.raises(ConfigError, match=r"line 1: key outside"):
            parse_config("kind = solve\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match=r"line 3: duplicate key"):
            parse_config("[experiment]\nd = 2\nd = 3\n")

    def test_type_mismatch(self):
        with pytest.raises(ConfigError, match=r"line 2: d.*not an integer"):
            parse_config("[experiment]\nd = two\n")

    def test_array_required(self):
        with pytest.raises(ConfigError, match=r"expected an array"):
            parse_config("[experiment]\nns = 8\n")
        with pytest.raises(ConfigError, match=r"must not be empty"):
            parse_config("[experiment]\nns = []\n")

    def test_malformed_assignment(self):
        with pytest.raises(ConfigError, match=r"line 2: expected key = value"):
            parse_config("[experiment]\njust words\n")


class TestValidation:
    def test_bound_alias(self):
        config = validate_config(ExperimentConfig(kind="bound"))
        assert config.kind == "bound2d"

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="unknown kind"):
            validate_config(ExperimentConfig(kind="warp"))

    def test_meshed_dimensions(self):
        with pytest.raises(ConfigError, match="d in \\{2, 3\\}"):
            validate_config(ExperimentConfig(kind="solve", d=4))
        validate_config(ExperimentConfig(kind="exponents", d=4))  # allowed

    def test_boundary_name(self):
        with pytest.raises(ConfigError, match="unknown boundary"):
            validate_config(ExperimentConfig(kind="solve", boundary="spiral"))

    def test_annulus_ordering(self):
        with pytest.raises(ConfigError, match="rho"):
            validate_config(ExperimentConfig(kind="cutoff", rho=1.0, sigma=0.5))

    def test_direction_range(self):
        with pytest.raises(ConfigError, match="direction"):
            validate_config(ExperimentConfig(kind="corrector", direction=2))

    def test_thread_count(self):
        with pytest.raises(ConfigError, match="thread count"):
            validate_config(ExperimentConfig(kind="solve", threads=0))

    def test_field_kind(self):
        with pytest.raises(ConfigError, match="unknown field kind"):
            validate_config(ExperimentConfig(
                kind="solve", field=FieldConfig(kind="plasma")))

    def test_block_divides_torus(self):
        with pytest.raises(ConfigError, match="block 3 does not divide"):
            validate_config(ExperimentConfig(
                kind="corrector", sizes=(8,), field=FieldConfig(block=3)))


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestCampaigns:
    def test_exponents_campaign(self, tmp_path):
        config_path = tmp_path / "exp.cfg"
        config_path.write_text(
            "[experiment]\nkind = exponents\nd = 3\np = inf\nq = inf\n")
        out = tmp_path / "out"
        code = main(["exponents", "--config", str(config_path),
                     "--out", str(out)])
        assert code == 0
        rows = read_rows(out / "exponents.csv")
        assert set(CSV_COLUMNS) == set(rows[0].keys())
        vals = {r["key"]: r["value"] for r in rows}
        # d = 3, p = q = inf: delta 1/2, p* 1, q* 6, kappa 3
        assert float(vals["delta"]) == 0.5 and float(vals["p_star"]) == 1.0
        assert float(vals["q_star"]) == 6.0 and float(vals["kappa"]) == 3.0
        assert vals["sharp_ok"] == "true"

    def test_subcommand_fills_missing_kind(self, tmp_path):
        config_path = tmp_path / "exp.cfg"
        config_path.write_text("[experiment]\nd = 2\n")
        out = tmp_path / "out"
        assert main(["exponents", "--config", str(config_path),
                     "--out", str(out)]) == 0
        assert (out / "exponents.csv").is_file()

    def test_kind_mismatch_rejected(self, tmp_path, capsys):
        config_path = tmp_path / "exp.cfg"
        config_path.write_text("[experiment]\nkind = solve\n")
        assert main(["cutoff", "--config", str(config_path)]) == 1
        assert "does not match" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["solve", "--config", str(tmp_path / "nope.cfg")]) == 1
        assert "dhlab: error" in capsys.readouterr().err

    def test_no_output_directory(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("DHL_OUT", raising=False)
        config_path = tmp_path / "exp.cfg"
        config_path.write_text("[experiment]\nkind = exponents\n")
        assert main(["exponents", "--config", str(config_path)]) == 1
        assert "no output directory" in capsys.readouterr().err

    def test_out_via_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DHL_OUT", str(tmp_path / "root"))
        config_path = tmp_path / "exp.cfg"
        config_path.write_text("[experiment]\nkind = exponents\n")
        assert main(["exponents", "--config", str(config_path)]) == 0
        assert (tmp_path / "root" / "exponents" / "exponents.csv").is_file()

    def test_solve_campaign_artifacts(self, tmp_path):
        out = tmp_path / "out"
        code = run(parse_config(GOOD), out_dir=str(out))
        assert code == 0
        rows = read_rows(out / "solve.csv")
        # 2 mesh sizes x 2 seeds x 4 keys
        assert len(rows) == 16
        assert (out / "config.txt").read_text() == emit_config(
            validate_config(parse_config(GOOD)))
        # binaries for the largest mesh, first seed
        assert (out / "solve_n12_seed0.dhf").is_file()
        assert (out / "solve_n12_seed0.dhs").is_file()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["failures"] == 0
        listed = {f["path"] for f in manifest["files"]}
        on_disk = {name for name in os.listdir(out) if name != "manifest.json"}
        assert listed == on_disk
        for entry in manifest["files"]:
            blob = (out / entry["path"]).read_bytes()
            assert hashlib.sha256(blob).hexdigest() == entry["sha256"]
            assert len(blob) == entry["bytes"]

    def test_thread_count_does_not_change_bytes(self, tmp_path):
        outs = []
        for threads in (1, 4):
            out = tmp_path / f"t{threads}"
            assert run(parse_config(GOOD), out_dir=str(out),
                       threads=threads) == 0
            outs.append(out)
        for name in os.listdir(outs[0]):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_corrector_campaign_rows(self, tmp_path):
        text = ("[experiment]\nkind = corrector\nsizes = [4, 8]\n"
                "seeds = [0]\n\n[field]\np0 = 4.0\nq0 = 4.0\n")
        out = tmp_path / "out"
        assert run(parse_config(text), out_dir=str(out)) == 0
        rows = read_rows(out / "corrector.csv")
        keys = {r["key"] for r in rows}
        assert {"linf_e0", "l1_e0", "a_eff_00", "energy_window_max"} <= keys
        assert (out / "corrector_L8_seed0.dhf").is_file()

    def test_corrector_requires_random_field(self, tmp_path):
        text = ("[experiment]\nkind = corrector\n\n[field]\nkind = constant\n")
        with pytest.raises(ConfigError, match="random fields"):
            run(parse_config(text), out_dir=str(tmp_path / "o"))

    def test_degenerate_job_isolated_exit_2(self, tmp_path):
        # a zero coefficient field makes every operator row vanish; the job
        # fails, the campaign completes, and the failure is recorded
        text = ("[experiment]\nkind = solve\nns = [8]\nseeds = [0]\n\n"
                "[field]\nkind = constant\nvalue = 0.0\n")
        out = tmp_path / "out"
        assert run(parse_config(text), out_dir=str(out)) == 2
        rows = read_rows(out / "solve.csv")
        errors = [r for r in rows if r["flag"] == "error"]
        assert len(errors) == 1 and "NotCoerciveError" in errors[0]["value"]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["failures"] == 1

    def test_seed_offset_changes_random_rows(self, tmp_path):
        config = parse_config(GOOD)
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert run(config, out_dir=str(a), seed_offset=0) == 0
        assert run(config, out_dir=str(b), seed_offset=17) == 0
        va = [r["value"] for r in read_rows(a / "solve.csv")
              if r["key"] == "energy"]
        vb = [r["value"] for r in read_rows(b / "solve.csv")
              if r["key"] == "energy"]
        assert va != vb

    def test_sweep_campaign(self, tmp_path):
        text = ("[experiment]\nkind = sweep\nalphas = [0.0, -1.0]\n"
                "ns = [16, 24]\n")
        out = tmp_path / "out"
        assert run(parse_config(text), out_dir=str(out)) == 0
        rows = read_rows(out / "sweep.csv")
        verdicts = [r for r in rows if r["key"].startswith("verdict")]
        assert len(verdicts) == 2
        assert all(v["value"] == "stable" for v in verdicts)


class TestPlotScripts:
    def test_empty_directory_emits_nothing(self, tmp_path):
        assert emit_plots(str(tmp_path)) == []

    def test_missing_directory_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            emit_plots(str(tmp_path / "absent"))

    def test_corrector_scripts_compile(self, tmp_path):
        text = ("[experiment]\nkind = corrector\nsizes = [4]\nseeds = [0]\n\n"
                "[field]\np0 = 4.0\nq0 = 4.0\n")
        out = tmp_path / "out"
        run(parse_config(text), out_dir=str(out))
        written = emit_plots(str(out))
        assert [os.path.basename(p) for p in written] == ["plot_sublinearity_e0.py"]
        py_compile.compile(written[0], doraise=True)
        # the manifest is refreshed to include the plot script
        manifest = json.loads((out / "manifest.json").read_text())
        assert "plot_sublinearity_e0.py" in {f["path"] for f in manifest["files"]}

    def test_harnack_and_sweep_scripts(self, tmp_path):
        (tmp_path / "harnack.csv").write_text(",".join(CSV_COLUMNS) + "\n")
        (tmp_path / "sweep.csv").write_text(",".join(CSV_COLUMNS) + "\n")
        written = sorted(os.path.basename(p) for p in emit_plots(str(tmp_path)))
        assert written == ["plot_cemp_vs_lambda.py", "plot_sweep_heatmap.py"]
        for name in written:
            py_compile.compile(str(tmp_path / name), doraise=True)

    def test_plots_subcommand(self, tmp_path, monkeypatch):
        monkeypatch.delenv("DHL_OUT", raising=False)
        (tmp_path / "sweep.csv").write_text(",".join(CSV_COLUMNS) + "\n")
        assert main(["plots", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "plot_sweep_heatmap.py").is_file()
        assert main(["plots"]) == 1  # no directory given anywhere
