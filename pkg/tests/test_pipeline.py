import csv

import numpy as np
import pytest

import jsenet.pipeline as pipeline
from jsenet.checkpoint import load_checkpoint, model_tensors, read_tensors, section_digest
from jsenet.errors import ContractError, InputError, TrainingDivergedError
from jsenet.geometry import PointCloud, project_nearest, sample_sphere
from jsenet.labels import SemanticEdgeLabels, generate_edge_labels
from jsenet.losses import LossComponents
from jsenet.metrics import miou, mf_ods
from jsenet.model import JSENet
from jsenet.pipeline import (
    LOG_COLUMNS,
    Prediction,
    Trainer,
    VoteAccumulator,
    compute_losses,
    draw_center,
    infer_voting,
    make_batch,
    parallel_map,
    predict_sphere,
    prepare_scene,
    read_prediction,
    sphere_grid,
    train,
    write_prediction,
)
from jsenet.ply import write_cloud
from jsenet.synthetic import toy_scene
from jsenet.tensor import Tensor


@pytest.fixture
def scene(block_cloud, tiny_config):
    return prepare_scene(block_cloud, tiny_config, "blocks")


def test_parallel_map_keeps_order():
    assert parallel_map(lambda x: x * x, list(range(10)), threads=3) == [x * x for x in range(10)]


def test_prepare_scene_merges_edges(scene, block_cloud):
    assert len(scene.cloud) <= len(block_cloud)
    assert len(scene.edges) == len(scene.cloud)
    assert scene.edges.bits.any()
    assert scene.original is block_cloud


def test_prepare_scene_rejects_bad_input(tiny_config):
    with pytest.raises(InputError):
        prepare_scene(PointCloud.empty(), tiny_config)
    with pytest.raises(InputError, match="num_classes"):
        prepare_scene(PointCloud(np.zeros((2, 3)), labels=np.array([0, 3])), tiny_config)
    with pytest.raises(InputError):
        prepare_scene(PointCloud(np.zeros((2, 3)), labels=np.array([0, 1])), tiny_config,
                      edges=SemanticEdgeLabels(np.zeros(3), 3))


def test_draw_center_keeps_dense_spheres(scene, tiny_config):
    rng = np.random.default_rng(0)
    for _ in range(5):
        center = draw_center(scene, rng, tiny_config)
        assert len(sample_sphere(scene.cloud, center, tiny_config.sphere_radius)) >= pipeline.MIN_SPHERE_POINTS


def test_draw_center_falls_back_to_a_point(tiny_config, caplog):
    sparse = prepare_scene(PointCloud(np.array([[0.0, 0, 0], [5.0, 5, 5]]), labels=np.array([0, 1])), tiny_config)
    center = draw_center(sparse, np.random.default_rng(1), tiny_config)
    assert any(np.array_equal(center, p) for p in sparse.cloud.positions)
    assert "No dense sphere" in caplog.text


def test_loss_terms_per_stage(scene, tiny_config):
    model = JSENet(tiny_config)
    batch = make_batch(model, scene, np.random.default_rng(2))
    first = compute_losses(model.forward(batch.inputs, refine=False), batch, 1, tiny_config)
    assert [len(first.seg), len(first.edge), len(first.bce), len(first.dual)] == [3, 1, 3, 0]
    second = compute_losses(model.forward(batch.inputs, refine=True), batch, 2, tiny_config)
    assert [len(second.seg), len(second.edge), len(second.bce), len(second.dual)] == [1, 1, 0, 2]
    no_dual = compute_losses(model.forward(batch.inputs), batch, 2, tiny_config.replace(use_dual_loss=False))
    assert not no_dual.dual


@pytest.mark.parametrize(
    "changes, counts",
    [
        ({"streams": "ss_only"}, [1, 0, 0, 0]),
        ({"streams": "sed_only"}, [2, 1, 3, 0]),
        ({"streams": "sed_only", "enhanced_features": False, "side_supervision": "none"}, [0, 1, 0, 0]),
    ],
)
def test_stage_one_terms_follow_the_built_streams(scene, tiny_config, changes, counts):
    config = tiny_config.replace(use_jrm=False, **changes)
    model = JSENet(config)
    batch = make_batch(model, scene, np.random.default_rng(2))
    parts = compute_losses(model.forward(batch.inputs), batch, 1, config)
    assert [len(parts.seg), len(parts.edge), len(parts.bce), len(parts.dual)] == counts


def test_single_stream_training_runs_stage_one_only(tmp_path, scene, tiny_config):
    config = tiny_config.replace(streams="sed_only", use_jrm=False)
    before = {name: p.data.copy() for name, p in JSENet(config).named_parameters()}
    result = train(config, [scene], tmp_path)
    assert set(result.best_loss) == {1}
    after = read_tensors(result.checkpoint)
    np.testing.assert_array_equal(after["theta/classifier/weight"], before["theta/classifier/weight"])
    assert not np.array_equal(after["phi/fuse/weight"], before["phi/fuse/weight"])


def test_short_training_writes_log_and_checkpoints(tmp_path, scene, tiny_config):
    result = train(tiny_config, [scene], tmp_path)
    assert result.steps == 4
    assert set(result.best_loss) == {1, 2}
    for name in ("stage1.jsec", "stage2.jsec", "model.jsec", "stage1_epoch0001.jsec", "stage2_epoch0001.jsec"):
        assert (tmp_path / name).exists()
    with (tmp_path / "loss_log.csv").open(newline="") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == LOG_COLUMNS
    assert [row[2] for row in rows[1:]] == ["1", "1", "2", "2"]
    assert all(np.isfinite(float(v)) for row in rows[1:] for v in row)
    assert load_checkpoint(result.checkpoint).config == tiny_config


def test_stage_two_leaves_streams_untouched(tmp_path, scene, tiny_config):
    model = JSENet(tiny_config)
    Trainer(model, [scene], tmp_path / "one").run((1,))
    before = model_tensors(model)
    Trainer(model, [scene], tmp_path / "two").run((2,))
    after = model_tensors(model)
    for prefix in ("theta/", "phi/"):
        assert section_digest(after, prefix) == section_digest(before, prefix)
    assert section_digest(after, "gamma/") != section_digest(before, "gamma/")


def test_training_is_reproducible(tmp_path, scene, tiny_config):
    train(tiny_config, [scene], tmp_path / "a")
    train(tiny_config, [scene], tmp_path / "b")
    assert (tmp_path / "a" / "model.jsec").read_bytes() == (tmp_path / "b" / "model.jsec").read_bytes()


def test_stage_two_from_a_stage_one_checkpoint_matches_the_full_run(tmp_path, scene, tiny_config):
    config = tiny_config.replace(steps_per_epoch=3)
    train(config, [scene], tmp_path / "full")
    resumed = load_checkpoint(tmp_path / "full" / "stage1.jsec", config).train()
    train(config, [scene], tmp_path / "resumed", model=resumed, stages=(2,))
    full = read_tensors(tmp_path / "full" / "model.jsec")
    again = read_tensors(tmp_path / "resumed" / "model.jsec")
    assert section_digest(again, "gamma/") == section_digest(full, "gamma/")
    assert (tmp_path / "full" / "model.jsec").read_bytes() == (tmp_path / "resumed" / "model.jsec").read_bytes()


def test_stage_two_skipped_without_refinement(tmp_path, scene, tiny_config):
    result = train(tiny_config.replace(use_jrm=False), [scene], tmp_path)
    assert set(result.best_loss) == {1}
    assert not (tmp_path / "stage2.jsec").exists()


def test_divergence_dumps_state(tmp_path, scene, tiny_config, monkeypatch):
    monkeypatch.setattr(pipeline, "compute_losses", lambda *args: LossComponents(seg=[Tensor(np.nan)]))
    with pytest.raises(TrainingDivergedError) as info:
        train(tiny_config, [scene], tmp_path)
    assert info.value.dump_path.endswith("diverged_step0.jsec")
    assert "sphere/center" in read_tensors(info.value.dump_path)


def test_training_class_count_mismatch(tmp_path, scene, tiny_config):
    with pytest.raises(InputError):
        Trainer(JSENet(tiny_config.replace(num_classes=4)), [scene], tmp_path)


# --- Voting ---

def _votes(seed: int, n: int = 10, k: int = 2):
    rng = np.random.default_rng(seed)
    spheres = []
    for i in range(6):
        rows = np.sort(rng.choice(n, size=5, replace=False))
        probs = rng.random((5, k))
        spheres.append((np.array([i * 0.1, 0.0, 0.0]), rows, probs / probs.sum(axis=1, keepdims=True), rng.random((5, k))))
    spheres.append((np.array([9.0, 0.0, 0.0]), np.arange(n), np.full((n, k), 1.0 / k), np.zeros((n, k))))
    return spheres


def test_votes_are_averaged():
    votes = VoteAccumulator(10, 2)
    spheres = _votes(0)
    for sphere in spheres:
        votes.add(*sphere)
    probs, edges = votes.finalize()
    sums, counts = np.zeros((10, 2)), np.zeros(10)
    for _, rows, p, _ in spheres:
        sums[rows] += p
        counts[rows] += 1
    np.testing.assert_allclose(probs, sums / counts[:, None], atol=1e-15)
    np.testing.assert_array_equal(votes.counts, counts)
    assert edges.shape == (10, 2)


def test_vote_order_does_not_matter():
    spheres = _votes(1)
    forward, backward = VoteAccumulator(10, 2), VoteAccumulator(10, 2)
    for sphere in spheres:
        forward.add(*sphere)
    for sphere in reversed(spheres):
        backward.add(*sphere)
    for a, b in zip(forward.finalize(), backward.finalize()):
        np.testing.assert_array_equal(a, b)


def test_repeated_sphere_is_counted_once():
    spheres = _votes(2)
    votes = VoteAccumulator(10, 2)
    for sphere in spheres + spheres[:2]:
        votes.add(*sphere)
    once = VoteAccumulator(10, 2)
    for sphere in spheres:
        once.add(*sphere)
    np.testing.assert_array_equal(votes.finalize()[0], once.finalize()[0])


def test_conflicting_votes_for_one_center():
    votes = VoteAccumulator(3, 1)
    votes.add(np.zeros(3), np.array([0]), np.ones((1, 1)), np.zeros((1, 1)))
    with pytest.raises(ContractError, match="conflicting"):
        votes.add(np.zeros(3), np.array([0]), np.zeros((1, 1)), np.zeros((1, 1)))


def test_unvisited_points_are_an_error():
    votes = VoteAccumulator(3, 1)
    votes.add(np.zeros(3), np.array([0, 1]), np.ones((2, 1)), np.zeros((2, 1)))
    with pytest.raises(ContractError, match="never visited"):
        votes.finalize()


def test_sphere_grid_covers_every_point():
    cloud = toy_scene(seed=0)
    centers = sphere_grid(cloud, 0.5)
    d2 = np.sum((cloud.positions[:, None] - centers[None]) ** 2, axis=2)
    assert (d2.min(axis=1) <= 0.25).all()


def test_single_sphere_voting_equals_direct_prediction(scene, tiny_config):
    model = JSENet(tiny_config)
    center = scene.cloud.positions.mean(axis=0)
    prediction = infer_voting(model, scene, centers=center[None])
    sphere = sample_sphere(scene.cloud, center, tiny_config.sphere_radius)
    assert len(sphere) == len(scene.cloud)
    probs, edges = predict_sphere(model, sphere)
    full_probs = np.zeros_like(probs)
    full_probs[sphere.source_indices] = probs
    nearest = project_nearest(scene.cloud, scene.original, np.arange(len(scene.cloud)))
    np.testing.assert_array_equal(prediction.probs, full_probs[nearest])


def test_grid_voting_covers_original_points(scene, tiny_config):
    prediction = infer_voting(JSENet(tiny_config), scene, threads=2)
    assert prediction.probs.shape == (len(scene.original), 3)
    np.testing.assert_allclose(prediction.probs.sum(axis=1), 1.0, atol=1e-9)
    assert prediction.edges.min() >= 0.0 and prediction.edges.max() <= 1.0


def test_uncovered_points_get_extra_spheres(scene, tiny_config, caplog):
    far = scene.cloud.positions.max(axis=0) + 10.0
    prediction = infer_voting(JSENet(tiny_config), scene, centers=far[None])
    assert np.isfinite(prediction.probs).all()
    assert "not covered" in caplog.text


def test_prediction_file(tmp_path):
    rng = np.random.default_rng(3)
    probs = rng.random((12, 3))
    probs /= probs.sum(axis=1, keepdims=True)
    prediction = Prediction(PointCloud(rng.random((12, 3))), probs, rng.random((12, 3)))
    write_prediction(tmp_path / "p.ply", prediction)
    back = read_prediction(tmp_path / "p.ply")
    np.testing.assert_array_equal(back.cloud.labels, prediction.labels)
    np.testing.assert_allclose(back.probs, probs, atol=1e-6)
    np.testing.assert_allclose(back.edges, prediction.edges, atol=1e-6)


def test_plain_cloud_is_not_a_prediction(tmp_path):
    write_cloud(tmp_path / "c.ply", PointCloud(np.zeros((2, 3))))
    with pytest.raises(InputError):
        read_prediction(tmp_path / "c.ply")


def test_edge_labels_threshold():
    prediction = Prediction(PointCloud(np.zeros((2, 3))), np.full((2, 2), 0.5), np.array([[0.6, 0.2], [0.5, 0.9]]))
    assert prediction.edge_labels().bits.tolist() == [1, 3]
    assert prediction.edge_labels(0.95).bits.tolist() == [0, 0]


@pytest.mark.slow
def test_toy_scene_is_learned(tmp_path, tiny_config):
    config = tiny_config.replace(
        first_features_dim=16, side_width=8, fusion_width=8, sphere_radius=1.2, stage1_epochs=30,
        stage2_epochs=20, steps_per_epoch=30, lr_drop_every=20, checkpoint_every=10,
    )
    scene = prepare_scene(toy_scene(seed=0), config, "toy")
    result = train(config, [scene], tmp_path)
    assert result.steps <= 2000
    assert result.best_loss[2] <= result.best_loss[1]
    with (tmp_path / "loss_log.csv").open(newline="") as handle:
        first = next(csv.DictReader(handle))
    assert float(first["total"]) >= 10 * result.best_loss[1]

    prediction = infer_voting(load_checkpoint(result.checkpoint), scene)
    assert miou(prediction.labels, scene.original.labels, 3)[1] >= 0.95
    gt = generate_edge_labels(scene.original, config.edge_radius, 3)
    assert mf_ods([prediction.edges], [gt], 3).mmf >= 0.5
