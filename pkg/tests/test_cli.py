import subprocess
import sys

import numpy as np
import pytest

from cyclereg.cli import cli
from cyclereg.io import read_json


def run_cli(*argv) -> int:
    return cli(list(argv))


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_synth")
    code = run_cli("synth", "--out", str(root), "--pairs", "3", "--dims", "32",
                   "--magnitude", "4", "--smoothness", "5", "--seed", "3")
    assert code == 0
    return root


class TestSynth:
    def test_layout(self, synth_dir):
        assert (synth_dir / "manifest.json").exists()
        dirs = sorted(p.name for p in synth_dir.iterdir() if p.is_dir())
        assert dirs == ["pair_000", "pair_001", "pair_002"]


class TestEvaluate:
    def test_identity_reproduces_generator_metrics(self, synth_dir, tmp_path):
        out = tmp_path / "metrics"
        code = run_cli("evaluate", "--data", str(synth_dir / "manifest.json"),
                       "--identity", "--out", str(out))
        assert code == 0
        summary = read_json(out / "summary.json")
        manifest = read_json(synth_dir / "manifest.json")
        want_dice = float(np.mean(manifest["phantom"]["initial_mean_dice"]))
        want_epe = float(np.mean(manifest["phantom"]["initial_mean_epe_vox"]))
        assert summary["dice_mean"] == pytest.approx(want_dice, abs=1e-6)
        assert summary["epe_mean_mm"] == pytest.approx(want_epe, abs=1e-5)
        assert summary["sd_log_jacobian"] == pytest.approx(0.0, abs=1e-9)

    def test_missing_fields_dir_is_usage_error(self, synth_dir, tmp_path):
        code = run_cli("evaluate", "--data", str(synth_dir / "manifest.json"),
                       "--out", str(tmp_path / "m"))
        assert code == 1

    def test_missing_manifest_is_data_error(self, tmp_path):
        code = run_cli("evaluate", "--data", str(tmp_path / "nope.json"),
                       "--identity", "--out", str(tmp_path / "m"))
        assert code == 2


@pytest.fixture(scope="module")
def run_dir(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    code = run_cli("train", "--data", str(synth_dir / "manifest.json"),
                   "--out", str(out), "--seed", "0",
                   "--set", "schedule.stages=1",
                   "--set", "schedule.iterations_per_stage=10",
                   "--set", "augment.max_translation=3.0")
    assert code == 0
    return out


class TestTrainPipeline:
    def test_smoke_run_writes_expected_artifacts(self, run_dir):
        assert (run_dir / "resolved_config.yaml").exists()
        checkpoints = list((run_dir / "checkpoints").glob("*.ckpt"))
        assert len(checkpoints) == 1
        stores = sorted(p.name for p in (run_dir / "labels").glob("stage_*"))
        assert stores == ["stage_00", "stage_01"]  # 2 label-store versions
        assert (run_dir / "report.json").exists()
        assert not (run_dir / ".lock").exists()

    def test_infer_then_evaluate_beats_identity(self, synth_dir, run_dir, tmp_path):
        fields = tmp_path / "fields"
        code = run_cli("infer", "--data", str(synth_dir / "manifest.json"),
                       "--checkpoint", str(run_dir / "checkpoints" / "stage_01.ckpt"),
                       "--out", str(fields))
        assert code == 0
        assert len(list(fields.glob("*.nii.gz"))) == 3
        out = tmp_path / "metrics"
        code = run_cli("evaluate", "--data", str(synth_dir / "manifest.json"),
                       "--fields", str(fields), "--out", str(out))
        assert code == 0
        summary = read_json(out / "summary.json")
        manifest = read_json(synth_dir / "manifest.json")
        initial = float(np.mean(manifest["phantom"]["initial_mean_dice"]))
        assert summary["dice_mean"] > initial

    def test_pseudo_labels_subcommand(self, synth_dir, tmp_path):
        out = tmp_path / "labels"
        code = run_cli("pseudo-labels", "--data", str(synth_dir / "manifest.json"),
                       "--out", str(out), "--seed", "0")
        assert code == 0
        assert (out / "stage_00" / "manifest.json").exists()

    def test_plot_outputs_monotone_curves(self, synth_dir, run_dir, tmp_path):
        metrics_a = tmp_path / "eval_a"
        run_cli("evaluate", "--data", str(synth_dir / "manifest.json"),
                "--identity", "--out", str(metrics_a))
        plots = tmp_path / "plots"
        code = run_cli("plot", "--metrics", str(metrics_a / "metrics.csv"),
                       "--labels", "stage 0", "--out", str(plots))
        assert code == 0
        assert (plots / "cumulative_dice.png").exists()
        curve = np.loadtxt(plots / "cumulative_dice_stage_0.txt")
        assert curve.shape == (101, 2)
        assert np.all(np.diff(curve[:, 1]) <= 1e-12)

    def test_lock_file_guards_run_dir(self, synth_dir, run_dir):
        (run_dir / ".lock").write_text("999999")
        try:
            code = run_cli("train", "--data", str(synth_dir / "manifest.json"),
                           "--out", str(run_dir), "--resume",
                           "--set", "schedule.stages=1",
                           "--set", "schedule.iterations_per_stage=10")
            assert code == 2
        finally:
            (run_dir / ".lock").unlink()


class TestEntryPoints:
    def test_usage_error_exit_code(self):
        assert run_cli("train") == 1          # missing required args
        assert run_cli("no-such-command") == 1

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "cyclereg", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "cyclical self-training" in proc.stdout

    def test_bad_override_is_usage_error(self, synth_dir, tmp_path):
        code = run_cli("train", "--data", str(synth_dir / "manifest.json"),
                       "--out", str(tmp_path / "r"), "--set", "schedule.bogus=1")
        assert code == 1
