"""End-to-end tests for the command line driver.

Each test drives the click entry point through CliRunner against a
temporary artifact directory and asserts on exit codes, emitted files,
and the numbers in report.json.
"""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from boltzray.cli import PRESETS, load_config, main
from boltzray.fieldio import read_field


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(main, list(args), catch_exceptions=False)


def report_of(out):
    return json.loads((out / "report.json").read_text())


# ---------------------------------------------------------------------------
# Configuration resolution
# ---------------------------------------------------------------------------

def test_every_preset_resolves_against_the_schema():
    for name in PRESETS:
        cfg = load_config(name, None, None)
        assert cfg["lattice"]["n_t"] >= 2


def test_config_file_overrides_preset(tmp_path):
    path = tmp_path / "cfg.ini"
    path.write_text("[lattice]\nn_t = 14\n")
    cfg = load_config("pure-transport", str(path), None)
    assert cfg["lattice"]["n_t"] == 14
    assert cfg["quadrature"]["degree"] == 2      # preset value retained


def test_cli_seed_wins_over_config(tmp_path):
    path = tmp_path / "cfg.ini"
    path.write_text("[run]\nseed = 3\n")
    assert load_config(None, str(path), 11)["run"]["seed"] == 11
    assert load_config(None, str(path), None)["run"]["seed"] == 3


# ---------------------------------------------------------------------------
# Exit codes
# ---------------------------------------------------------------------------

def test_missing_preset_and_config_exits_2(runner, tmp_path):
    result = invoke(runner, "forward", "--out", str(tmp_path))
    assert result.exit_code == 2
    assert "--preset" in result.output


def test_unknown_preset_exits_2_listing_names(runner, tmp_path):
    result = invoke(runner, "forward", "--preset", "nope",
                    "--out", str(tmp_path))
    assert result.exit_code == 2
    assert "pure-transport" in result.output


def test_unknown_section_and_key_exit_2_named(runner, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[latice]\nn_t = 12\n")
    result = invoke(runner, "forward", "--config", str(bad),
                    "--out", str(tmp_path / "o"))
    assert result.exit_code == 2
    assert "latice" in result.output

    bad.write_text("[lattice]\nn_s = 12\n")
    result = invoke(runner, "forward", "--config", str(bad),
                    "--out", str(tmp_path / "o"))
    assert result.exit_code == 2
    assert "lattice.n_s" in result.output


def test_unparseable_value_exits_2_named(runner, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[lattice]\nn_t = twelve\n")
    result = invoke(runner, "forward", "--config", str(bad),
                    "--out", str(tmp_path / "o"))
    assert result.exit_code == 2
    assert "lattice.n_t" in result.output


def test_reconstruct_without_measurement_exits_2(runner, tmp_path):
    result = invoke(runner, "reconstruct", "--preset", "spacelike-quick",
                    "--out", str(tmp_path))
    assert result.exit_code == 2
    assert "ut" in result.output


def test_exhausted_iteration_budget_exits_3(runner, tmp_path):
    assert invoke(runner, "forward", "--preset", "spacelike-quick",
                  "--out", str(tmp_path)).exit_code == 0
    strict = tmp_path / "strict.ini"
    strict.write_text("[pipeline]\nmax_iter = 1\ntol = 1e-10\n")
    result = invoke(runner, "reconstruct", "--preset", "spacelike-quick",
                    "--config", str(strict), "--out", str(tmp_path))
    assert result.exit_code == 3
    assert "divergence" in result.output


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_forward_pure_transport_identity_checked_in_run(runner, tmp_path):
    result = invoke(runner, "forward", "--preset", "pure-transport",
                    "--out", str(tmp_path))
    assert result.exit_code == 0
    report = report_of(tmp_path)
    assert report["measurement_identity_error"] <= 1e-12
    for stem in ("f", "u", "ut"):
        assert (tmp_path / f"{stem}.f64").exists()
        assert (tmp_path / f"{stem}.json").exists()


def test_forward_absorbing_identity_and_artifact_roundtrip(runner, tmp_path):
    assert invoke(runner, "forward", "--preset", "absorbing",
                  "--out", str(tmp_path)).exit_code == 0
    report = report_of(tmp_path)
    assert report["measurement_identity_error"] <= 1e-12
    uT = read_field(tmp_path / "ut")
    assert uT.base_time == uT.lattice.t_final
    assert uT.values.shape == uT.lattice.spatial_shape + (uT.quadrature.n_dir,)


def test_forward_scattering_runs_sweeps_without_identity(runner, tmp_path):
    assert invoke(runner, "forward", "--preset", "scattering-small",
                  "--out", str(tmp_path)).exit_code == 0
    report = report_of(tmp_path)
    assert report["solve"]["converged"]
    assert report["solve"]["iterations"] > 1
    assert "measurement_identity_error" not in report


def test_forward_artifacts_are_byte_reproducible(runner, tmp_path):
    noisy = tmp_path / "noise.ini"
    noisy.write_text("[run]\nnoise_level = 0.01\n")
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert invoke(runner, "forward", "--preset", "absorbing",
                      "--config", str(noisy), "--seed", "7",
                      "--out", str(out)).exit_code == 0
    for name in ("f.f64", "u.f64", "ut.f64", "f.json", "report.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_forward_noise_depends_on_seed_only(runner, tmp_path):
    noisy = tmp_path / "noise.ini"
    noisy.write_text("[run]\nnoise_level = 0.01\n")
    values = {}
    for seed in (7, 8):
        out = tmp_path / f"s{seed}"
        assert invoke(runner, "forward", "--preset", "absorbing",
                      "--config", str(noisy), "--seed", str(seed),
                      "--out", str(out)).exit_code == 0
        values[seed] = read_field(out / "ut").values
    assert not np.array_equal(values[7], values[8])


# ---------------------------------------------------------------------------
# transform / backproject / reconstruct
# ---------------------------------------------------------------------------

def test_transform_emits_ray_data(runner, tmp_path):
    assert invoke(runner, "transform", "--preset", "absorbing",
                  "--out", str(tmp_path)).exit_code == 0
    rays = read_field(tmp_path / "rays")
    assert rays.base_time == 0.0
    report = report_of(tmp_path)
    assert report["ray_norm"] > 0.0
    assert report["source_norm"] > 0.0


def test_backproject_reports_error_and_stability(runner, tmp_path):
    assert invoke(runner, "backproject", "--preset", "backproject-reference",
                  "--out", str(tmp_path)).exit_code == 0
    report = report_of(tmp_path)
    # One-shot backprojection: same shape as the space-like part but not
    # yet iterated to convergence.
    assert report["error_vs_spacelike_part"] < 1.0
    assert np.isfinite(report["stability_quotient"])
    assert (tmp_path / "recovered.f64").exists()


def test_forward_then_reconstruct_recovers_spacelike_part(runner, tmp_path):
    assert invoke(runner, "forward", "--preset", "spacelike-quick",
                  "--out", str(tmp_path)).exit_code == 0
    result = invoke(runner, "reconstruct", "--preset", "spacelike-quick",
                    "--out", str(tmp_path))
    assert result.exit_code == 0
    report = report_of(tmp_path)
    assert report["converged"]
    assert report["error_vs_truth"] <= 0.12
    history = report["residual_history"]
    assert history[0] == 1.0 and history[-1] <= 3e-2

    lines = (tmp_path / "errors.csv").read_text().splitlines()
    assert lines[0] == "iteration,residual"
    assert len(lines) == len(history) + 1
    assert float(lines[-1].split(",")[1]) == history[-1]


def test_reconstruct_rejects_mismatched_measurement(runner, tmp_path):
    assert invoke(runner, "forward", "--preset", "spacelike-quick",
                  "--out", str(tmp_path)).exit_code == 0
    other = tmp_path / "other.ini"
    other.write_text("[lattice]\nn_x = 8\n")
    result = invoke(runner, "reconstruct", "--preset", "spacelike-quick",
                    "--config", str(other), "--out", str(tmp_path))
    assert result.exit_code == 2
    assert "lattice" in result.output


# ---------------------------------------------------------------------------
# cmb-demo
# ---------------------------------------------------------------------------

def test_cmb_free_wave_recovers_cauchy_data(runner, tmp_path):
    result = invoke(runner, "cmb-demo", "--preset", "cmb-free-wave",
                    "--out", str(tmp_path))
    assert result.exit_code == 0
    report = report_of(tmp_path)
    assert report["converged"]
    assert report["recovery_error"] <= 0.10
    history = report["residual_history"]
    assert history[0] == 1.0
    assert all(b <= a * (1.0 + 1e-12) for a, b in zip(history, history[1:]))
    recovered = read_field(tmp_path / "recovered_cauchy")
    assert recovered.f1.shape == recovered.lattice.spatial_shape


def test_cmb_zero_data_yields_zero_recovery(runner, tmp_path):
    assert invoke(runner, "cmb-demo", "--preset", "cmb-zero-data",
                  "--out", str(tmp_path)).exit_code == 0
    report = report_of(tmp_path)
    assert report["measurement_is_zero"]
    assert report["iterations"] == 0
    recovered = read_field(tmp_path / "recovered_cauchy")
    assert np.all(recovered.f1 == 0.0) and np.all(recovered.f2 == 0.0)


def test_cmb_dense_oracle_agrees_with_direct_least_squares(runner, tmp_path):
    result = invoke(runner, "cmb-demo", "--preset", "cmb-dense-oracle",
                    "--out", str(tmp_path))
    assert result.exit_code == 0
    oracle = report_of(tmp_path)["dense_oracle"]
    assert oracle["agreement"] <= 1e-8
    assert oracle["rank"] < oracle["columns"]    # constant-f1 direction


# ---------------------------------------------------------------------------
# selfcheck
# ---------------------------------------------------------------------------

def test_selfcheck_passes_clean(runner):
    result = invoke(runner, "selfcheck")
    assert result.exit_code == 0
    assert "all checks passed" in result.output
    assert "FAIL" not in result.output


def test_selfcheck_catches_perturbed_convention_constant(runner):
    result = invoke(runner, "selfcheck", "--c-conv-scale", "1.1")
    assert result.exit_code == 1
    lines = [l for l in result.output.splitlines() if "FAIL" in l]
    assert lines and all("multiplier-vs-composition" in l
                         for l in lines if "FAILED" not in l)


def test_selfcheck_catches_reduced_quadrature_degree(runner):
    result = invoke(runner, "selfcheck", "--degree", "4")
    assert result.exit_code == 1
    assert "quadrature-exactness" in [
        l.split()[0] for l in result.output.splitlines() if " FAIL" in l]


def test_selfcheck_threads_option_runs(runner):
    assert invoke(runner, "selfcheck", "--threads", "2").exit_code == 0
