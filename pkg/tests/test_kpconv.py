import numpy as np
import pytest

from jsenet import tensor as T
from jsenet.errors import ContractError
from jsenet.geometry import PointCloud, grid_subsample, neighbor_groups
from jsenet.kpconv import (
    KERNEL_POINTS,
    KPConv,
    KPEncoder,
    build_encoder,
    build_pyramid,
    conv_geometry,
    kernel_influence,
    kernel_points,
    nearest_upsample,
)
from jsenet.synthetic import toy_scene
from jsenet.tensor import Tensor


def _cloud(seed: int, n: int = 20) -> PointCloud:
    return PointCloud(np.random.default_rng(seed).uniform(0.0, 0.2, size=(n, 3)))


def _geometry(cloud: PointCloud, radius: float = 0.1):
    return conv_geometry(cloud.positions, cloud.positions, neighbor_groups(cloud, radius), radius)


def test_kernel_has_a_center_and_a_shell():
    assert KERNEL_POINTS.shape == (15, 3)
    np.testing.assert_array_equal(KERNEL_POINTS[0], 0.0)
    np.testing.assert_allclose(np.linalg.norm(KERNEL_POINTS[1:], axis=1), 0.66)


def test_kernel_generation_is_seeded():
    np.testing.assert_array_equal(kernel_points(seed=3), kernel_points(seed=3))
    assert not np.array_equal(kernel_points(seed=3), kernel_points(seed=4))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_kernel_shell_points_are_spread_out(seed):
    shell = kernel_points(seed=seed)[1:]
    d = np.linalg.norm(shell[:, None] - shell[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    # 14 points on a unit sphere can keep a chord of about 0.93 between neighbors.
    assert d.min() >= 0.85 * 0.66
    # Repulsion leaves no net pull towards any side of the kernel.
    assert np.linalg.norm(shell.sum(axis=0)) < 0.05


def test_kernel_shell_needs_two_points():
    with pytest.raises(ContractError):
        kernel_points(num_shell=1)


def test_padded_neighbors_have_no_influence():
    support = np.zeros((1, 3))
    influence = kernel_influence(np.zeros((1, 3)), support, np.array([[0, 1]]), 0.1)
    assert influence[0, 0, 0] == 1.0
    assert not influence[0, 1].any()


def test_zero_features_give_zero_output():
    cloud = _cloud(0)
    conv = KPConv(np.random.default_rng(1), 4, 6)
    assert not conv(Tensor(np.zeros((20, 4))), _geometry(cloud)).data.any()


def test_identity_center_kernel():
    cloud = PointCloud(np.zeros((1, 3)))
    conv = KPConv(np.random.default_rng(2), 3, 3)
    conv.weights.data[0] = np.eye(3)
    features = np.array([[0.5, -1.0, 2.0]])
    np.testing.assert_allclose(conv(Tensor(features), _geometry(cloud)).data, features)


def test_point_without_neighbors_gives_zero_row():
    support = PointCloud(np.zeros((2, 3)))
    queries = PointCloud(np.array([[0.0, 0, 0], [5.0, 5.0, 5.0]]))
    geometry = conv_geometry(queries.positions, support.positions, neighbor_groups(support, 0.1, queries), 0.1)
    assert geometry.empty_rows == 1
    out = KPConv(np.random.default_rng(3), 2, 2)(Tensor(np.ones((2, 2))), geometry).data
    assert not out[1].any()


def test_convolution_is_translation_invariant():
    cloud = _cloud(6, 40)
    moved = PointCloud(cloud.positions + np.array([3.0, -2.0, 0.5]))
    conv = KPConv(np.random.default_rng(7), 3, 4)
    features = Tensor(np.random.default_rng(8).normal(size=(40, 3)))
    out = conv(features, _geometry(cloud)).data
    np.testing.assert_allclose(conv(features, _geometry(moved)).data, out, atol=1e-9)


def test_convolution_commutes_with_reordering():
    cloud = _cloud(4)
    conv = KPConv(np.random.default_rng(5), 3, 4)
    features = np.random.default_rng(6).normal(size=(20, 3))
    order = np.random.default_rng(7).permutation(20)
    direct = conv(Tensor(features), _geometry(cloud)).data
    permuted = conv(Tensor(features[order]), _geometry(cloud.subset(order))).data
    np.testing.assert_allclose(permuted, direct[order], atol=1e-12)


def test_gradients_reach_features_and_weights():
    cloud = _cloud(8)
    conv = KPConv(np.random.default_rng(9), 3, 2)
    features = Tensor(np.random.default_rng(10).normal(size=(20, 3)), requires_grad=True)
    with T.Tape() as tape:
        tape.backward(T.sum(conv(features, _geometry(cloud))))
    assert features.grad.any() and conv.weights.grad.any()


def test_pyramid_schedule_and_counts():
    cloud = grid_subsample(toy_scene(seed=0), 0.04).cloud
    pyramid = build_pyramid(cloud, 0.04)
    assert pyramid.cells == [0.04, 0.08, 0.16, 0.32, 0.64]
    counts = [len(c) for c in pyramid.clouds]
    assert counts == sorted(counts, reverse=True)
    assert pyramid.radii[0] == pytest.approx(0.1)


def test_pyramid_maps_every_point_to_an_ancestor():
    cloud = grid_subsample(_cloud(11, 200), 0.01).cloud
    pyramid = build_pyramid(cloud, 0.01, num_stages=3)
    for stage in range(3):
        mapping = pyramid.to_full(stage)
        assert len(mapping) == len(cloud)
        assert mapping.max() < len(pyramid.clouds[stage])


def test_empty_pyramid_is_rejected():
    with pytest.raises(ContractError):
        build_pyramid(PointCloud.empty())


def test_nearest_upsample_identity_and_broadcast():
    coarse = Tensor(np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(nearest_upsample(coarse, np.arange(3)).data, coarse.data)
    one = Tensor(np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(nearest_upsample(one, np.zeros(4, dtype=int)).data, np.tile([1.0, 2.0], (4, 1)))


def test_nearest_upsample_rejects_unmapped_point():
    with pytest.raises(ContractError):
        nearest_upsample(Tensor(np.zeros((2, 1))), np.array([0, 2]))


def test_encoder_on_toy_scene_is_finite():
    cloud = grid_subsample(toy_scene(seed=1), 0.04).cloud
    encoder = KPEncoder(np.random.default_rng(0), 5, [4, 8, 16, 32, 64])
    features = Tensor(np.random.default_rng(1).random((len(cloud), 5)))
    encoded = build_encoder(encoder, cloud, features)
    assert [f.shape[1] for f in encoded.features] == [4, 8, 16, 32, 64]
    for stage, f in enumerate(encoded.features):
        assert f.shape[0] == len(encoded.pyramid.clouds[stage])
        assert np.isfinite(f.data).all()
