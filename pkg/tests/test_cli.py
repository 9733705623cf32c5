import subprocess
import sys

import pytest

from jumpfilter.cli import (EXIT_CFL, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, ConfigError,
                            ExperimentConfig, load_config, main, parse_config_text)


def run_cli(tmp_path, *args, name="out"):
    out = tmp_path / name
    code = main(list(args) + ["--out", str(out)])
    return code, out


# configuration ----------------------------------------------------------------


def test_parse_config_text_handles_comments():
    raw = parse_config_text("# header\nsim.T = 0.5  # horizon\n\nmodel.rho=0.25\n")
    assert raw == {"sim.T": "0.5", "model.rho": "0.25"}


@pytest.mark.parametrize("text", ["sim.T 0.5", "T = 0.5", " = 1"])
def test_parse_config_text_rejects_bad_lines(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_config_coercion_and_defaults():
    cfg = ExperimentConfig.from_mapping({"run.seeds": "1,2,3", "grid.radius": "auto",
                                         "filter.check_refinement": "no", "model.rho": "0.25"})
    assert cfg.run_seeds == (1, 2, 3)
    assert cfg.grid_radius is None
    assert cfg.filter_check_refinement is False
    assert cfg.coefficients().params["rho"] == 0.25


@pytest.mark.parametrize("raw", [{"sim.bogus": "1"}, {"model.family": "nope"}, {"sim.dt": "-1"},
                                 {"run.seeds": ""}, {"sim.T": "abc"}, {"filter.method": "kalman"}])
def test_config_errors(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping(raw)


def test_resolved_config_round_trips(tmp_path):
    cfg = ExperimentConfig.from_mapping({"model.rho": "0.25", "sim.T": "0.3"})
    cfg.write_resolved(tmp_path / "config.resolved")
    again = load_config(tmp_path / "config.resolved")
    assert again.resolved() == cfg.resolved()
    assert "model.cut" in cfg.resolved()


# commands ----------------------------------------------------------------------


def test_validate_exit_codes(tmp_path):
    code, out = run_cli(tmp_path, "validate")
    assert code == EXIT_OK
    assert (out / "assumptions.txt").exists()
    assert (out / "config.resolved").exists()
    code, _ = run_cli(tmp_path, "validate", "--set", "model.family=linear", "--set", "model.slope=2",
                      "--set", "model.L=1", name="bad")
    assert code == EXIT_VALIDATION


def test_config_error_exit_codes(tmp_path):
    assert run_cli(tmp_path, "validate", "--set", "sim.nope=1")[0] == EXIT_CONFIG
    assert run_cli(tmp_path, "validate", "--config", str(tmp_path / "missing.cfg"))[0] == EXIT_CONFIG
    assert run_cli(tmp_path, "simulate", "zakai")[0] == EXIT_CONFIG
    assert run_cli(tmp_path, "validate", "--set", "model.wrong_param=1")[0] == EXIT_CONFIG


def test_filter_radius_too_small(tmp_path):
    code, _ = run_cli(tmp_path, "filter", "zakai", "--set", "grid.radius=1.0", "--set", "sim.T=0.01")
    assert code == EXIT_CONFIG


def test_cfl_exit_code(tmp_path):
    code, _ = run_cli(tmp_path, "filter", "zakai", "--set", "model.family=heat", "--set", "grid.h=0.01",
                      "--set", "sim.dt=0.001", "--set", "sim.T=0.01")
    assert code == EXIT_CFL


def test_blowup_exit_code(tmp_path):
    code, _ = run_cli(tmp_path, "simulate", "--set", "model.family=linear", "--set", "model.slope=2000",
                      "--set", "sim.T=10", "--set", "sim.dt=0.1")
    assert code == EXIT_NUMERICAL


def test_simulate_is_deterministic(tmp_path):
    args = ["simulate", "--seed", "5", "--set", "sim.T=0.1", "--set", "sim.dt=0.001", "--set", "sim.paths=2"]
    code_a, a = run_cli(tmp_path, *args, name="a")
    code_b, b = run_cli(tmp_path, *args, name="b")
    assert code_a == code_b == EXIT_OK
    files = sorted(p.name for p in a.iterdir())
    assert "path_seed5_path1.csv" in files and "noise_seed5_path0.bin" in files
    for name in files:
        if name == "config.resolved":
            continue
        assert (a / name).read_bytes() == (b / name).read_bytes()
    # resolved configs differ only in the output directory
    strip = lambda p: [ln for ln in p.read_text().splitlines() if not ln.startswith("run.out")]  # noqa: E731
    assert strip(a / "config.resolved") == strip(b / "config.resolved")
    header = (a / "jumps_seed5_path0.csv").read_text().splitlines()[0]
    assert header == "source,time,atom,mark"


def test_filter_both_writes_comparison(tmp_path, capsys):
    code, out = run_cli(tmp_path, "filter", "both", "--seed", "2", "--set", "sim.T=0.1",
                        "--set", "sim.dt=0.001", "--set", "grid.h=0.05", "--set", "filter.particles=500",
                        "--set", "filter.output_dt=0.05")
    assert code == EXIT_OK
    for name in ("zakai_seed2.csv", "particle_seed2.csv", "comparison_seed2.csv", "comparison_summary.txt"):
        assert (out / name).exists()
    assert "seed 2:" in capsys.readouterr().out


def test_estimates_and_mollify_demo(tmp_path):
    code, out = run_cli(tmp_path, "estimates", "--set", "estimates.h=0.02", "--threads", "2")
    assert code == EXIT_OK
    assert (out / "estimates.csv").exists() and (out / "norm_ladder.csv").exists()
    code, out = run_cli(tmp_path, "mollify-demo", name="demo")
    assert code == EXIT_OK
    assert "semigroup" in (out / "kernel_identities.txt").read_text()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "jumpfilter.cli", "validate", "--out", str(tmp_path / "m")],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_OK
    assert "pass" in proc.stdout
