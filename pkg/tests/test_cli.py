import json
import textwrap
from pathlib import Path

import numpy as np
import pytest
import yaml

from cavity_bistability.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_PARTIAL, main, run_experiment
from cavity_bistability.config import ConfigError, parse_config
from cavity_bistability.io import read_csv

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SWEEP = textwrap.dedent("""
    physical:
      gamma31: 0.5
      gamma32: 0.5
      cooperativity: 6
      n_atoms: 1000
      omega_c: 0.3
      delta_p: 0.1
    experiment:
      type: sweep
      sweep: {parameter: epsilon_sq, start: 0.0, stop: 150.0, points: 61}
    output: {stem: fig2a}
""")


def write(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestParse:
    def test_cooperativity_resolves_g(self):
        cfg = parse_config(SWEEP.replace("cooperativity: 6", "cooperativity: 8"))
        assert cfg.params.g == pytest.approx(0.12649, abs=1e-5)

    def test_dephasing_defaults_to_zero(self):
        cfg = parse_config(SWEEP)
        assert cfg.params.deph2 == 0 and cfg.params.deph3 == 0

    @pytest.mark.parametrize("edit, path", [
        (("cooperativity: 6", "cooperativity: 6\n  g: 0.1"), "physical"),
        (("cooperativity: 6", ""), "physical"),
        (("points: 61", "points: 1"), "experiment.sweep.points"),
        (("gamma31: 0.5", "gamma_31: 0.5"), "physical.gamma_31"),
        (("n_atoms: 1000", "n_atoms: 1000\n  kappa: 1.0"), "physical.kappa"),
        (("n_atoms: 1000", "n_atoms: -3"), "physical.n_atoms"),
        (("stem: fig2a", "stem: ../x"), "output.stem"),
        (("type: sweep", "type: sweeep"), "experiment"),
        (("start: 0.0", "start: -1.0"), "experiment.sweep"),
    ])
    def test_errors_name_the_key(self, edit, path):
        with pytest.raises(ConfigError) as exc:
            parse_config(SWEEP.replace(*edit))
        assert f"{path}:" in str(exc.value) or str(exc.value).startswith(path)

    def test_lenient_drops_unknown_keys(self, caplog):
        cfg = parse_config(SWEEP.replace("points: 61", "points: 61, colour: red"), strict=False)
        assert cfg.experiment.sweep.points == 61
        assert "experiment.sweep.colour" in caplog.text

    def test_lenient_still_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            parse_config(SWEEP.replace("points: 61", "points: 1, colour: red"), strict=False)

    def test_resolved_round_trip(self):
        cfg = parse_config(SWEEP)
        again = parse_config(json.loads(json.dumps(cfg.resolved())))
        assert again.resolved() == cfg.resolved() and again.params == cfg.params

    def test_subcommand_must_match(self):
        with pytest.raises(ConfigError):
            parse_config(SWEEP, experiment="grid")
        assert parse_config(SWEEP.replace("  type: sweep\n", ""), experiment="sweep").kind == "sweep"

    @pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.stem)
    def test_shipped_examples_parse(self, path):
        data = yaml.safe_load(path.read_text())
        cfg = parse_config(path.read_text(), experiment=data["experiment"]["type"])
        assert cfg.kind == data["experiment"]["type"]


class TestRun:
    def test_fig2a_end_to_end(self, tmp_path):
        cfg = write(tmp_path, SWEEP)
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "out")]) == EXIT_OK
        out = tmp_path / "out"
        assert {p.name for p in out.iterdir()} == {"fig2a_curve.csv", "fig2a_regions.csv", "fig2a_manifest.json"}
        header, rows = read_csv(out / "fig2a_curve.csv")
        assert header == ["epsilon_sq", "n_up", "n_down", "relative_gap"] and len(rows) == 61
        m = json.loads((out / "fig2a_manifest.json").read_text())
        assert m["exit_code"] == 0 and m["version"] and m["wall_time_s"] >= 0
        assert m["config"]["physical"]["g"] == pytest.approx(np.sqrt(6 * 2 / 1000))
        assert m["numerics"]["gap_threshold"] == 0.01 and m["summary"]["width"] > 0

    def test_manifest_rerun_is_bit_identical(self, tmp_path):
        cfg = write(tmp_path, SWEEP)
        main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "a")])
        manifest = tmp_path / "a" / "fig2a_manifest.json"
        assert main(["sweep", "--seed-from-manifest", str(manifest), "--out", str(tmp_path / "b")]) == EXIT_OK
        for name in ("fig2a_curve.csv", "fig2a_regions.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_parse_failure_exit_code(self, tmp_path, capsys):
        cfg = write(tmp_path, SWEEP.replace("points: 61", "points: 1"))
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "experiment.sweep.points" in capsys.readouterr().err
        assert main(["sweep", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG

    def test_numerical_failure_exit_code(self, tmp_path):
        text = SWEEP + "numerics: {newton_tol: 1.0e-300, t_max: 1.0e-3, t_max_extended: 2.0e-3}\n"
        cfg = write(tmp_path, text)
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_NUMERICAL
        m = json.loads((tmp_path / "fig2a_manifest.json").read_text())
        assert m["exit_code"] == EXIT_NUMERICAL and "SweepError" in m["error"]

    def test_partial_grid_keeps_missing_cells(self, tmp_path):
        text = textwrap.dedent("""
            physical: {gamma31: 0.5, gamma32: 0.5, cooperativity: 5, n_atoms: 1000}
            experiment:
              type: grid
              sweep: {parameter: omega_c, start: 0.0, stop: 1.0, points: 11}
              rows: {parameter: epsilon, start: 3.0, stop: 5.0, points: 2}
              cols: {parameter: delta_p, start: 0.1, stop: 0.1, points: 1}
            numerics: {newton_tol: 1.0e-300, t_max: 1.0e-3, t_max_extended: 2.0e-3}
            output: {stem: g}
        """)
        cfg = write(tmp_path, text)
        assert main(["grid", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_PARTIAL
        header, rows = read_csv(tmp_path / "g_grid.csv")
        assert header == ["epsilon", "delta_p", "width"] and [r[2] for r in rows] == ["nan", "nan"]

    def test_detect_not_bistable_is_numerical_failure(self, tmp_path):
        text = (CONFIGS / "fig6_detect.yaml").read_text().replace("target: 0.0135", "target: 0.05")
        cfg = parse_config(text, experiment="detect")
        res = run_experiment(cfg, tmp_path)
        assert res.exit_code == EXIT_NUMERICAL and "nearest bistable interval" in res.error

    def test_steady_lists_all_roots(self, tmp_path):
        cfg = parse_config((CONFIGS / "steady_two_level.yaml").read_text(), experiment="steady")
        res = run_experiment(cfg, tmp_path)
        assert res.exit_code == EXIT_OK and res.summary["roots"] == 3
        _, rows = read_csv(tmp_path / "two_level_steady.csv")
        assert [r[-1] for r in rows] == ["stable", "unstable", "stable"]

    def test_evolve_and_detect_outputs(self, tmp_path):
        cfg = parse_config((CONFIGS / "evolve_eit.yaml").read_text(), experiment="evolve")
        assert run_experiment(cfg, tmp_path).exit_code == EXIT_OK
        header, rows = read_csv(tmp_path / "eit_pulse_trajectory.csv")
        assert header[:4] == ["t", "re_alpha", "im_alpha", "n"] and len(rows) == 801
        cfg = parse_config((CONFIGS / "fig7_detect.yaml").read_text(), experiment="detect")
        res = run_experiment(cfg, tmp_path)
        assert res.exit_code == EXIT_OK
        names = {p.name for p in res.outputs}
        assert {"fig7_fwhm0.1_trajectory.csv", "fig7_fwhm0.2_verdict.json", "fig7_speed_limit.csv",
                "fig7_manifest.json"} <= names
        verdict = json.loads((tmp_path / "fig7_fwhm0.2_verdict.json").read_text())
        assert set(verdict) >= {"n_before", "n_after", "latched", "schedule", "preparation", "params"}

    def test_jobs_must_be_positive(self, tmp_path):
        assert main(["sweep", "--config", str(write(tmp_path, SWEEP)), "--jobs", "0"]) == EXIT_CONFIG
