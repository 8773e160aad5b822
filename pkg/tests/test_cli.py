import numpy as np
import pytest
from typer.testing import CliRunner

from jsenet.checkpoint import save_checkpoint
from jsenet.cli import app
from jsenet.geometry import PointCloud
from jsenet.labels import read_sepm
from jsenet.model import JSENet
from jsenet.ply import write_cloud

runner = CliRunner()


@pytest.fixture
def uniform_cloud(tmp_path):
    path = tmp_path / "uniform.ply"
    rng = np.random.default_rng(0)
    write_cloud(path, PointCloud(rng.random((40, 3)) * 0.1, labels=np.full(40, 2)))
    return path


def test_prepare_edges_on_uniform_cloud(tmp_path, uniform_cloud):
    out = tmp_path / "uniform.sepm"
    result = runner.invoke(app, ["prepare-edges", str(uniform_cloud), str(out), "--num-classes", "3"])
    assert result.exit_code == 0, result.output
    labels = read_sepm(out)
    assert len(labels) == 40 and labels.num_classes == 3
    assert not labels.bits.any()


def test_missing_input_exits_with_two(tmp_path):
    result = runner.invoke(app, ["prepare-edges", str(tmp_path / "none.ply"), str(tmp_path / "x.sepm")])
    assert result.exit_code == 2


def test_unknown_flag_exits_with_two(uniform_cloud, tmp_path):
    result = runner.invoke(app, ["prepare-edges", str(uniform_cloud), str(tmp_path / "x.sepm"), "--colour", "red"])
    assert result.exit_code == 2


def test_label_beyond_class_count_exits_with_one(uniform_cloud, tmp_path):
    result = runner.invoke(app, ["prepare-edges", str(uniform_cloud), str(tmp_path / "x.sepm"), "--num-classes", "2"])
    assert result.exit_code == 1


def test_selftest_against_golden(fixtures_dir, tmp_path):
    report = tmp_path / "report.txt"
    result = runner.invoke(
        app,
        ["selftest", str(fixtures_dir / "plane_200.ply"), "--golden", str(fixtures_dir / "selftest_golden.txt"),
         "--report", str(report)],
    )
    assert result.exit_code == 0, result.output
    assert report.read_text() == (fixtures_dir / "selftest_golden.txt").read_text()


def test_summary_from_config(tmp_path):
    config = tmp_path / "tiny.cfg"
    config.write_text("num_classes = 3\nfirst_features_dim = 4\nside_width = 4\nfusion_width = 4\n")
    result = runner.invoke(app, ["summary", "--config", str(config)])
    assert result.exit_code == 0, result.output
    assert "theta" in result.output and "gamma" in result.output


def test_eval_seg_writes_report(tmp_path):
    positions = np.random.default_rng(1).random((4, 3))
    write_cloud(tmp_path / "gt.ply", PointCloud(positions, labels=np.array([0, 0, 1, 1])))
    write_cloud(tmp_path / "pred.ply", PointCloud(positions, labels=np.array([0, 0, 0, 1])))
    result = runner.invoke(
        app,
        ["eval-seg", "--pred", str(tmp_path / "pred.ply"), "--gt", str(tmp_path / "gt.ply"), "--num-classes", "2",
         "--report", str(tmp_path / "seg.txt")],
    )
    assert result.exit_code == 0, result.output
    assert "miou = 0.5833" in (tmp_path / "seg.txt").read_text()


def test_eval_seg_needs_matching_lists(tmp_path, uniform_cloud):
    result = runner.invoke(
        app, ["eval-seg", "--pred", str(uniform_cloud), "--pred", str(uniform_cloud), "--gt", str(uniform_cloud),
              "--num-classes", "3"],
    )
    assert result.exit_code == 2


@pytest.mark.parametrize("threads", ["many", "0"])
def test_bad_thread_count_exits_with_two(tmp_path, uniform_cloud, monkeypatch, threads):
    monkeypatch.setenv("JSENET_THREADS", threads)
    result = runner.invoke(
        app, ["eval-seg", "--pred", str(uniform_cloud), "--gt", str(uniform_cloud), "--num-classes", "3"],
    )
    assert result.exit_code == 2
    assert "JSENET_THREADS" in result.output


def test_infer_then_eval_edge(tmp_path, block_cloud, tiny_config):
    checkpoint = save_checkpoint(tmp_path / "model.jsec", JSENet(tiny_config))
    write_cloud(tmp_path / "scene.ply", block_cloud)
    result = runner.invoke(
        app, ["infer", str(checkpoint), str(tmp_path / "scene.ply"), str(tmp_path / "pred.ply"),
              "--sepm", str(tmp_path / "pred.sepm")],
    )
    assert result.exit_code == 0, result.output
    assert len(read_sepm(tmp_path / "pred.sepm")) == len(block_cloud)
    result = runner.invoke(
        app,
        ["eval-edge", "--pred", str(tmp_path / "pred.ply"), "--gt", str(tmp_path / "scene.ply"),
         "--radius", "0.05", "--boundary", "--report", str(tmp_path / "edge.txt")],
    )
    assert result.exit_code == 0, result.output
    text = (tmp_path / "edge.txt").read_text()
    assert "mmf = " in text and "boundary_f = " in text


def test_train_with_flags(tmp_path, block_cloud):
    write_cloud(tmp_path / "scene.ply", block_cloud)
    result = runner.invoke(
        app,
        ["train", str(tmp_path / "scene.ply"), "--out-dir", str(tmp_path / "run"), "--num-classes", "3",
         "--first-features-dim", "4", "--side-width", "4", "--fusion-width", "4", "--sphere-radius", "0.5",
         "--stage1-epochs", "1", "--stage2-epochs", "1", "--steps-per-epoch", "1", "--checkpoint-every", "1",
         "--no-augment"],
    )
    assert result.exit_code == 0, result.output
    assert (tmp_path / "run" / "model.jsec").exists()
    saved = (tmp_path / "run" / "model.cfg").read_text()
    assert "first_features_dim = 4" in saved and "fusion_width = 4" in saved
