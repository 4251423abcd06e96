"""End-to-end checks of the command-line entry point.

Everything runs through cli.main(argv) in-process so exit codes, artifacts,
and manifests can be asserted directly.  Runs use the mini model and a
handful of steps to stay fast.
"""

import json
import os

import numpy as np
import pytest

from ditlab.cli import main
from ditlab.diffcore import load_tensors
from ditlab.trainer import read_loss_log


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    """One tiny trained checkpoint shared by the sample/sweep tests."""
    out = tmp_path_factory.mktemp("cli-train")
    code = main([
        "train", "--model", "mini", "--steps", "10", "--batch-size", "4",
        "--checkpoint-every", "5", "--seed", "3", "--out-dir", str(out),
    ])
    assert code == 0
    ckpts = sorted(out.glob("*/checkpoints/step-000010.ntc"))
    assert len(ckpts) == 1
    return ckpts[0]


def _manifest(run_root):
    paths = sorted(run_root.glob("*/manifest.json"))
    assert paths, f"no manifest under {run_root}"
    with open(paths[-1]) as fh:
        return json.load(fh), paths[-1].parent


class TestRunLayout:
    def test_run_dir_named_after_subcommand(self, tmp_path):
        assert main(["schedule", "--t-max", "10", "--out-dir", str(tmp_path)]) == 0
        (run_dir,) = tmp_path.iterdir()
        assert run_dir.name.endswith("-schedule")

    def test_env_var_sets_default_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DITLAB_RUNS", str(tmp_path / "elsewhere"))
        assert main(["schedule", "--t-max", "10"]) == 0
        assert list((tmp_path / "elsewhere").glob("*-schedule/schedule.csv"))

    def test_manifest_records_run(self, tmp_path):
        assert main(["schedule", "--t-max", "10", "--out-dir", str(tmp_path)]) == 0
        manifest, run_dir = _manifest(tmp_path)
        assert manifest["subcommand"] == "schedule"
        assert manifest["config"]["t_max"] == 10
        assert manifest["wall_clock_seconds"] >= 0
        assert manifest["version"]
        for artifact in manifest["artifacts"]:
            assert os.path.exists(artifact)

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0


class TestTrain:
    def test_writes_loss_log_and_checkpoints(self, ckpt):
        run_dir = ckpt.parent.parent
        log = read_loss_log(run_dir / "loss.csv")
        assert len(log["step"]) == 10
        assert np.all(np.isfinite(log["loss_simple"]))
        manifest, _ = _manifest(run_dir.parent)
        assert manifest["seeds"] == {"train": 3, "data": 0}

    def test_flags_override_config_file(self, tmp_path):
        config = tmp_path / "train.json"
        config.write_text(json.dumps({"steps": 2, "batch_size": 4, "seed": 11}))
        out = tmp_path / "runs"
        assert main([
            "train", "--config", str(config), "--steps", "3",
            "--out-dir", str(out),
        ]) == 0
        manifest, run_dir = _manifest(out)
        # flag wins over file; untouched file keys survive
        assert manifest["config"]["train"]["steps"] == 3
        assert manifest["config"]["train"]["batch_size"] == 4
        assert manifest["seeds"]["train"] == 11
        assert len(read_loss_log(run_dir / "loss.csv")["step"]) == 3

    def test_unknown_config_key_is_a_usage_error(self, tmp_path, capsys):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"stepz": 2}))
        assert main(["train", "--config", str(config)]) == 2
        err = capsys.readouterr().err
        assert "stepz" in err and "valid keys" in err

    def test_invalid_setting_is_a_usage_error(self, tmp_path, capsys):
        assert main([
            "train", "--steps", "1", "--learning-rate", "-1",
            "--out-dir", str(tmp_path),
        ]) == 2
        assert capsys.readouterr().err.startswith("error:")


class TestSample:
    def test_seed_determines_bytes(self, ckpt, tmp_path):
        argv = ["sample", "--ckpt", str(ckpt), "--count", "3", "--steps", "4",
                "--seed", "5"]
        assert main(argv + ["--out", str(tmp_path / "a")]) == 0
        assert main(argv + ["--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "samples.ntc").read_bytes()
        b = (tmp_path / "b" / "samples.ntc").read_bytes()
        assert a == b

    def test_different_seed_changes_samples(self, ckpt, tmp_path):
        base = ["sample", "--ckpt", str(ckpt), "--count", "2", "--steps", "4"]
        assert main(base + ["--seed", "5", "--out", str(tmp_path / "a")]) == 0
        assert main(base + ["--seed", "6", "--out", str(tmp_path / "b")]) == 0
        arrays_a, _ = load_tensors(tmp_path / "a" / "samples.ntc")
        arrays_b, _ = load_tensors(tmp_path / "b" / "samples.ntc")
        assert not np.array_equal(arrays_a["samples"], arrays_b["samples"])

    def test_unguided_touches_model_once_per_step(self, ckpt, tmp_path):
        assert main([
            "sample", "--ckpt", str(ckpt), "--count", "2", "--steps", "6",
            "--class", "1", "--cfg-scale", "1.0", "--out", str(tmp_path / "s"),
        ]) == 0
        _, meta = load_tensors(tmp_path / "s" / "samples.ntc")
        assert meta["model_evals_per_image"] == 6

    def test_guided_doubles_evals(self, ckpt, tmp_path):
        assert main([
            "sample", "--ckpt", str(ckpt), "--count", "2", "--steps", "6",
            "--class", "1", "--cfg-scale", "2.5", "--out", str(tmp_path / "s"),
        ]) == 0
        _, meta = load_tensors(tmp_path / "s" / "samples.ntc")
        assert meta["model_evals_per_image"] == 12

    def test_previews_written(self, ckpt, tmp_path):
        assert main([
            "sample", "--ckpt", str(ckpt), "--count", "3", "--steps", "2",
            "--previews", "2", "--out", str(tmp_path / "s"),
        ]) == 0
        previews = sorted((tmp_path / "s").glob("sample-*.ppm"))
        assert len(previews) == 2
        assert previews[0].read_bytes().startswith(b"P6\n")

    def test_guidance_without_class_is_a_usage_error(self, ckpt, capsys):
        assert main([
            "sample", "--ckpt", str(ckpt), "--count", "1", "--cfg-scale", "2.0",
        ]) == 2
        assert "guidance" in capsys.readouterr().err

    def test_missing_checkpoint_is_a_usage_error(self, tmp_path, capsys):
        assert main([
            "sample", "--ckpt", str(tmp_path / "none.ntc"), "--count", "1",
        ]) == 2
        assert "error:" in capsys.readouterr().err


class TestFlops:
    def test_xl2_at_256px_matches_published_cost(self, tmp_path, capsys):
        assert main([
            "flops", "--model", "XL/2", "--image-size", "256",
            "--out-dir", str(tmp_path),
        ]) == 0
        report = json.loads(next(tmp_path.glob("*/flops.json")).read_text())
        assert report["gflops"] == pytest.approx(118.64, rel=0.01)
        assert "118.6" in capsys.readouterr().out

    def test_latent_size_flag(self, tmp_path):
        assert main([
            "flops", "--model", "S/8", "--latent-size", "32",
            "--out-dir", str(tmp_path),
        ]) == 0
        report = json.loads(next(tmp_path.glob("*/flops.json")).read_text())
        assert report["model"]["input"] == 32

    def test_conflicting_size_flags_rejected(self, tmp_path, capsys):
        assert main([
            "flops", "--model", "S/8", "--latent-size", "32",
            "--image-size", "256", "--out-dir", str(tmp_path),
        ]) == 2
        assert "not both" in capsys.readouterr().err


class TestConformance:
    def test_all_rows_pass(self, tmp_path, capsys):
        assert main(["conformance", "--out-dir", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        csv_path = next(tmp_path.glob("*/conformance.csv"))
        rows = csv_path.read_text().strip().splitlines()
        assert rows[0].startswith("label,")
        assert len(rows) > 30
        assert all(row.endswith("True") for row in rows[1:])


class TestGradcheck:
    def test_single_variant_passes(self, tmp_path, capsys):
        assert main([
            "gradcheck", "--variant", "adaln-zero", "--per-tensor", "1",
            "--out-dir", str(tmp_path),
        ]) == 0
        assert "PASS" in capsys.readouterr().out
        report = json.loads(next(tmp_path.glob("*/gradcheck.json")).read_text())
        assert report["results"][0]["max_rel_err"] < 1e-4

    def test_unattainable_tolerance_fails(self, tmp_path, capsys):
        assert main([
            "gradcheck", "--variant", "adaln", "--per-tensor", "1",
            "--tolerance", "1e-18", "--out-dir", str(tmp_path),
        ]) == 1
        assert "FAIL" in capsys.readouterr().out


class TestSchedule:
    def test_respaced_csv(self, tmp_path):
        assert main([
            "schedule", "--t-max", "100", "--steps", "10",
            "--out-dir", str(tmp_path),
        ]) == 0
        rows = next(tmp_path.glob("*/schedule.csv")).read_text().strip().splitlines()
        assert rows[0] == "t,beta,alpha_bar,posterior_variance"
        assert len(rows) == 11


class TestSweep:
    @pytest.mark.filterwarnings("ignore:covariance")
    def test_checkpoint_sweep(self, ckpt, tmp_path):
        assert main([
            "sweep", "--ckpt", str(ckpt), "--steps-list", "2,4",
            "--count", "8", "--reference-count", "16",
            "--out-dir", str(tmp_path),
        ]) == 0
        rows = next(tmp_path.glob("*/sweep.csv")).read_text().strip().splitlines()
        assert len(rows) == 3  # header + 1 model x 2 step counts
        header = rows[0].split(",")
        assert header[:4] == ["model", "variant", "patch", "num_steps"]
        for row in rows[1:]:
            assert row.endswith("ok")

    @pytest.mark.filterwarnings("ignore:covariance")
    def test_grid_only_rows_have_no_metric(self, tmp_path):
        assert main([
            "sweep", "--grid", "S/8,B/8", "--steps-list", "8",
            "--reference-count", "32", "--out-dir", str(tmp_path),
        ]) == 0
        rows = next(tmp_path.glob("*/sweep.csv")).read_text().strip().splitlines()
        assert len(rows) == 3
        for row in rows[1:]:
            cells = row.split(",")
            assert cells[5] == ""  # metric column empty
            assert cells[-1] == "missing-checkpoint"
            assert float(cells[6]) > 0  # sampling cost still computed

    def test_nothing_to_sweep_is_a_usage_error(self, capsys):
        assert main(["sweep"]) == 2
        assert "--ckpt" in capsys.readouterr().err


class TestArgparseErrors:
    def test_unknown_subcommand_exits_nonzero(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code != 0

    def test_missing_required_flag_exits_nonzero(self):
        with pytest.raises(SystemExit) as exc:
            main(["sample"])  # --ckpt is required
        assert exc.value.code != 0
