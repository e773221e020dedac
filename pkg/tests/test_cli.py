import csv

import pytest
import yaml
from click.testing import CliRunner
from numpy.testing import assert_allclose

from cassi_tools.cassi_model import SensingOperator, apply_phi_t, forward, unshift_cube
from cassi_tools.cli import cli, handle_errors
from cassi_tools.data_io import DatasetManifest, load_cube, synth_dataset
from cassi_tools.errors import ConfigError, DomainError, StageError, UsageError
from cassi_tools.training import baseline_psnr

TINY_MODEL = ["--channels", "4", "--blocks", "1", "1", "1", "--kernel-size", "3"]


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(cli, [str(a) for a in args], catch_exceptions=False)


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_synth(runner, tmp_path):
    result = invoke(runner, "synth", "--out", tmp_path / "data", "--scenes", 2, "--height", 8, "--width", 8)
    assert result.exit_code == 0
    manifest = DatasetManifest.load(tmp_path / "data" / "manifest.yaml")
    assert len(list(manifest.iter_cubes())) == 2


def test_simulate_is_seeded(runner, tmp_path, dataset):
    for out, seed in (("a", 42), ("b", 42), ("c", 5)):
        result = invoke(runner, "simulate", "--manifest", dataset, "--out", tmp_path / out,
                        "--noise-bits", 11, "--seed", seed)
        assert result.exit_code == 0, result.output
    name = "scene_000.meas.hsc"
    assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "c" / name).read_bytes()


def test_data_dir_from_environment(runner, tmp_path, dataset):
    result = runner.invoke(cli, ["simulate", "--out", str(tmp_path / "meas")],
                           env={"CASSI_DATA_DIR": str(dataset.parent)})
    assert result.exit_code == 0, result.output
    assert (tmp_path / "meas" / "scene_002.meas.hsc").exists()


def test_no_manifest_is_a_config_error(runner, tmp_path, monkeypatch):
    monkeypatch.delenv("CASSI_DATA_DIR", raising=False)
    result = runner.invoke(cli, ["simulate", "--out", str(tmp_path / "meas")])
    assert result.exit_code == 2
    assert "CASSI_DATA_DIR" in result.output


def test_missing_mask_exits_2(runner, tmp_path, dataset):
    doc = yaml.safe_load(dataset.read_text())
    doc["entries"] = [e for e in doc["entries"] if e["kind"] != "mask"]
    dataset.write_text(yaml.safe_dump(doc))
    result = runner.invoke(cli, ["simulate", "--manifest", str(dataset), "--out", str(tmp_path / "m")])
    assert result.exit_code == 2
    assert "mask" in result.output


def test_invalid_framework_exits_2(runner, tmp_path, dataset):
    result = runner.invoke(cli, ["reconstruct", "--manifest", str(dataset), "--out", str(tmp_path),
                                 "--framework", "fista"])
    assert result.exit_code == 2


def test_classical_admm_tv_beats_initialization(runner, tmp_path, dataset):
    out = tmp_path / "recon"
    result = invoke(runner, "reconstruct", "--manifest", dataset, "--out", out, "--framework", "admm",
                    "--denoiser", "tv", "--stages", 30, "--tau", 0.1, "--lam", 0.005, "--role", "val", "--png")
    assert result.exit_code == 0, result.output
    manifest = DatasetManifest.load(dataset)
    cubes = [cube for _, cube in manifest.iter_cubes("val")]
    rows = read_rows(out / "metrics.csv")
    assert [row["scene"] for row in rows] == ["scene_002"]
    assert float(rows[0]["psnr"]) > baseline_psnr(cubes, manifest.mask_for("val"))
    assert (out / "scene_002.png").exists()
    stages = read_rows(out / "stages.csv")
    assert len(stages) == 30
    assert {"alpha", "beta", "gamma", "primal_residual", "x_psnr", "z_ssim"} <= set(stages[0])


def test_zero_stages_returns_initialization(runner, tmp_path, dataset):
    out = tmp_path / "recon"
    result = invoke(runner, "reconstruct", "--manifest", dataset, "--out", out, "--framework", "admm",
                    "--denoiser", "soft", "--stages", 0, "--role", "val")
    assert result.exit_code == 0, result.output
    manifest = DatasetManifest.load(dataset)
    cube = dict(manifest.iter_cubes("val"))["scene_002"]
    mask = manifest.mask_for("val")
    expected = unshift_cube(apply_phi_t(forward(cube, mask), SensingOperator.from_mask(mask, cube.bands)))
    assert_allclose(load_cube(out / "scene_002.recon.hsc").data, expected.data, atol=1e-12)


def test_gamma_zero_reproduces_hqs(runner, tmp_path, dataset):
    common = ["--manifest", dataset, "--denoiser", "soft", "--stages", 5, "--tau", 0.5, "--lam", 0.01]
    invoke(runner, "reconstruct", *common, "--out", tmp_path / "r2", "--framework", "r2admm", "--gamma", 0)
    invoke(runner, "reconstruct", *common, "--out", tmp_path / "hqs", "--framework", "hqs")
    for name in ("scene_000", "scene_002"):
        a = load_cube(tmp_path / "r2" / f"{name}.recon.hsc").data
        b = load_cube(tmp_path / "hqs" / f"{name}.recon.hsc").data
        assert abs(a - b).max() < 1e-12


def test_reconstruct_from_measurements(runner, tmp_path, dataset):
    invoke(runner, "simulate", "--manifest", dataset, "--out", tmp_path / "meas", "--noise-bits", 11)
    result = invoke(runner, "reconstruct", "--manifest", dataset, "--measurements", tmp_path / "meas",
                    "--out", tmp_path / "recon", "--framework", "gap", "--denoiser", "tv", "--stages", 5)
    assert result.exit_code == 0, result.output
    assert len(read_rows(tmp_path / "recon" / "metrics.csv")) == 3


def test_cmformer_needs_checkpoint(runner, tmp_path, dataset):
    result = runner.invoke(cli, ["reconstruct", "--manifest", str(dataset), "--out", str(tmp_path),
                                 "--denoiser", "cmformer"])
    assert result.exit_code == 2
    assert "checkpoint" in result.output


def test_config_file_and_flag_precedence(runner, tmp_path, dataset):
    config = tmp_path / "run.yaml"
    config.write_text(yaml.safe_dump({"solver": {"framework": "admm", "denoiser": "soft", "stages": 7}}))
    result = invoke(runner, "reconstruct", "--manifest", dataset, "--out", tmp_path / "r",
                    "--config", config, "--stages", 2, "--role", "val")
    assert result.exit_code == 0, result.output
    assert len(read_rows(tmp_path / "r" / "stages.csv")) == 2


def test_train_then_reconstruct(runner, tmp_path, dataset):
    run = tmp_path / "run"
    result = invoke(runner, "train", "--manifest", dataset, "--out", run, "--epochs", 1,
                    "--steps-per-epoch", 1, "--crop", 8, "--precision", "float64", *TINY_MODEL)
    assert result.exit_code == 0, result.output
    assert "best" in result.output
    assert [row["epoch"] for row in read_rows(run / "train_log.csv")] == ["0"]

    result = invoke(runner, "reconstruct", "--manifest", dataset, "--checkpoint", run / "best.hsc",
                    "--out", tmp_path / "recon", "--role", "val")
    assert result.exit_code == 0, result.output
    assert (tmp_path / "recon" / "scene_002.recon.hsc").exists()

    result = runner.invoke(cli, ["reconstruct", "--manifest", str(dataset), "--checkpoint",
                                 str(run / "best.hsc"), "--out", str(tmp_path / "x"), "--stages", "3"])
    assert result.exit_code == 2
    assert "stages" in result.output


def test_train_zero_epochs(runner, tmp_path, dataset):
    result = invoke(runner, "train", "--manifest", dataset, "--out", tmp_path / "run", "--epochs", 0,
                    "--crop", 8, *TINY_MODEL)
    assert result.exit_code == 0, result.output
    assert (tmp_path / "run" / "last.hsc").exists()
    assert (tmp_path / "run" / "last.hsc.yaml").exists()


def test_reconstruct_rejects_band_mismatch(runner, tmp_path, dataset):
    result = invoke(runner, "train", "--manifest", dataset, "--out", tmp_path / "run", "--epochs", 0,
                    "--crop", 8, *TINY_MODEL)
    assert result.exit_code == 0, result.output
    other = synth_dataset(tmp_path / "three", seed=7, scenes=2, height=16, width=16, bands=3)
    result = runner.invoke(cli, ["reconstruct", "--manifest", str(other), "--checkpoint",
                                 str(tmp_path / "run" / "last.hsc"), "--out", str(tmp_path / "recon")])
    assert result.exit_code == 2
    assert "bands=2" in result.output
    assert "bands=3" in result.output


def test_train_rejects_bad_crop(runner, tmp_path, dataset):
    result = runner.invoke(cli, ["train", "--manifest", str(dataset), "--out", str(tmp_path / "run"),
                                 "--crop", "10"])
    assert result.exit_code == 2


def test_verify_adjoint(runner):
    result = invoke(runner, "verify", "adjoint")
    assert result.exit_code == 0
    assert "all checks passed" in result.output


def test_info(runner):
    result = invoke(runner, "info", "--bands", 4, "--channels", 8, "--stages", 2)
    assert result.exit_code == 0
    for component in ("initial", "estimator", "denoisers.1", "gammas", "total"):
        assert component in result.output


def info_total(runner, *args):
    result = invoke(runner, "info", "--bands", 4, "--channels", 8, *args)
    assert result.exit_code == 0
    row = next(line for line in result.output.splitlines() if "total" in line)
    return int("".join(ch for ch in row.split("total", 1)[1] if ch.isdigit()))


def test_info_without_cabs(runner):
    assert 0 < info_total(runner, "--no-cab") < info_total(runner)


def test_version(runner):
    result = invoke(runner, "--version")
    assert result.exit_code == 0
    assert "cassi" in result.output


@pytest.mark.parametrize("error, code", [
    (UsageError("bad invocation"), 2),
    (ConfigError("bad key"), 2),
    (StageError(1, UsageError("bad invocation")), 2),
    (DomainError("alpha must be > 0"), 1),
])
def test_exit_codes(error, code):
    @handle_errors
    def fail():
        raise error

    with pytest.raises(SystemExit) as exit_info:
        fail()
    assert exit_info.value.code == code
