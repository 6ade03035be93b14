from MultiscaleLDP.CLI import EXIT_ERROR, EXIT_FINDINGS, EXIT_OK, run_experiment_cli
from MultiscaleLDP.Noise import ControlPath
from MultiscaleLDP.Output import write_manifest
from numpy.testing import assert_allclose
import hashlib
import polars as pl
import pytest

CONFIG = """\
name: cli
grid: {n_interior: 6}
slow: {kind: linear, diffusivity: 1.0}
coupling: {kind: linear, c_slow: 0.0, c_fast: 1.0}
fast: {kind: linear_ou, lambda2: 1.0, b: 1.0}
noise:
  n_modes: 2
  g1: {sigma: 1.0}
  g2: {sigma: 1.0}
initial:
  x0: {kind: sine, mode: 1}
scales: {T: 0.25, epsilons: [0.5]}
control: {n_segments: 5}
skeleton: {dt: 0.005}
ensemble: {n_paths: 4}
checks: {n_pairs: 20, radius: 2.0}
compactness: {M: [4.0], n_samples: 3}
"""


@pytest.fixture
def config_file(tmp_path):
    fn = tmp_path / "cli.yaml"
    fn.write_text(CONFIG)
    return fn


def run(subcommand, config_file, out, *extra):
    return run_experiment_cli([subcommand, "--config", str(config_file), "--out", str(out), "-q", *extra])


def test_check_conditions(config_file, tmp_path):
    out = tmp_path / "out"
    assert run("check-conditions", config_file, out) == EXIT_OK
    frame = pl.read_csv(out / "conditions.csv")
    assert frame["n_violations"].sum() == 0
    manifest = (out / "manifest.txt").read_text().splitlines()
    assert "subcommand: check-conditions" in manifest
    assert f"config_sha256: {hashlib.sha256(CONFIG.encode()).hexdigest()}" in manifest
    assert "seed: 0" in manifest
    assert "artifact: conditions.csv" in manifest


def test_runs_are_reproducible(config_file, tmp_path):
    for name in ("a", "b"):
        assert run("simulate", config_file, tmp_path / name, "--seed", "5") == EXIT_OK
    for artifact in ("trajectory.csv", "ensemble.csv", "manifest.txt"):
        assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()
    assert "seed: 5" in (tmp_path / "a" / "manifest.txt").read_text()


def test_skeleton_with_control_file(config_file, tmp_path):
    phi = ControlPath.constant(0.25, 5, [1.0, -0.5])
    phi.to_csv(tmp_path / "phi.csv")
    out = tmp_path / "out"
    assert run("skeleton", config_file, out, "--phi", str(tmp_path / "phi.csv")) == EXIT_OK
    skeleton = pl.read_csv(out / "skeleton.csv")
    assert skeleton["t"][-1] == pytest.approx(0.25)
    assert {"x_h", "x_v", "x_1", "x_6"} <= set(skeleton.columns)
    assert_allclose(ControlPath.from_csv(out / "control.csv").coefficients, phi.coefficients)


def test_findings_exit_code(config_file, tmp_path):
    config_file.write_text(CONFIG.replace("n_samples: 3}", "n_samples: 3, C: 1.0e-6}"))
    out = tmp_path / "out"
    assert run("compactness", config_file, out) == EXIT_FINDINGS
    assert any(line.startswith("finding: M=4") for line in (out / "manifest.txt").read_text().splitlines())


def test_config_error(config_file, tmp_path, capsys):
    config_file.write_text(CONFIG.replace("diffusivity: 1.0", "diffusivity: -1.0"))
    assert run("skeleton", config_file, tmp_path / "out") == EXIT_ERROR
    assert f"{config_file}:3:" in capsys.readouterr().err


def test_non_numeric_epsilon(config_file, tmp_path, capsys):
    config_file.write_text(CONFIG.replace("epsilons: [0.5]", "epsilons: [abc]"))
    assert run("rate", config_file, tmp_path / "out") == EXIT_ERROR
    err = capsys.readouterr().err
    assert err.startswith(f"{config_file}:12:")
    assert "ValueError" not in err


def test_undecodable_config(config_file, tmp_path, capsys):
    config_file.write_bytes(b"\xff\xfe" + CONFIG.encode())
    assert run("rate", config_file, tmp_path / "out") == EXIT_ERROR
    assert capsys.readouterr().err.startswith(f"{config_file}:1:")


@pytest.mark.parametrize(
    "argv",
    [
        ["explode", "--config", "x.yaml"],
        ["rate"],
        ["rate", "--config", "x.yaml", "-q", "-v"],
    ],
)
def test_usage_errors(argv, capsys):
    assert run_experiment_cli(argv) == EXIT_ERROR
    assert "multiscale-ldp" in capsys.readouterr().err


def test_negative_seed_override(config_file, tmp_path, capsys):
    assert run("skeleton", config_file, tmp_path / "out", "--seed", "-1") == EXIT_ERROR
    assert "--seed" in capsys.readouterr().err


def test_manifest_is_deterministic(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    for name in ("a", "b"):
        write_manifest(tmp_path / name, "rate", b"seed: 1\n", 1, ["rate.csv"], ["target not reached"])
    first = (tmp_path / "a" / "manifest.txt").read_text()
    assert first == (tmp_path / "b" / "manifest.txt").read_text()
    assert first.endswith("finding: target not reached\n")
