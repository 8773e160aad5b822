import numpy as np
import pytest

from jsenet import tensor as T
from jsenet.errors import ContractError, DegenerateGroupError, DimensionError
from jsenet.tensor import BatchNormState, IndexGroups, MomentumOptimizer, Tape, Tensor


def test_softmax_of_equal_scores_is_uniform():
    np.testing.assert_array_equal(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    s = T.softmax_rows(Tensor(rng.normal(size=(20, 7)) * 10)).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_leaky_relu_definition():
    np.testing.assert_allclose(T.leaky_relu(Tensor([-1.0, 2.0])).data, [-0.1, 2.0])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-12)


def test_matmul_shape_mismatch_names_op():
    with pytest.raises(DimensionError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_backward_of_sum_is_ones():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        tape.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_sigmoid_gradient_at_zero():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with Tape() as tape:
        tape.backward(T.sum(T.sigmoid(x)))
    assert x.grad[0] == pytest.approx(0.25)


def test_backward_clears_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.mul(x, x))
        assert len(tape) == 2
        tape.backward(loss)
        assert len(tape) == 0


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = T.mul(x, 2.0)
        with pytest.raises(ContractError):
            tape.backward(out)


def test_backward_rejects_empty_tape():
    with Tape() as tape:
        with pytest.raises(ContractError):
            tape.backward(Tensor(1.0, requires_grad=True))


def test_composite_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)

    def loss():
        return T.sum(T.log(T.sigmoid(T.matmul(T.leaky_relu(x), w))))

    with Tape() as tape:
        tape.backward(loss())
    numeric = np.zeros_like(w.data)
    with T.no_grad():
        for idx in np.ndindex(*w.shape):
            saved = w.data[idx]
            w.data[idx] = saved + 1e-5
            plus = loss().item()
            w.data[idx] = saved - 1e-5
            minus = loss().item()
            w.data[idx] = saved
            numeric[idx] = (plus - minus) / 2e-5
    np.testing.assert_allclose(w.grad, numeric, rtol=1e-6, atol=1e-9)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape, T.no_grad():
        y = T.mul(x, 3.0)
    assert len(tape) == 0
    assert not y.requires_grad


def test_scatter_then_gather_identity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 2))
    index = np.arange(5)
    out = T.gather_rows(T.scatter_add_rows(Tensor(x), index, 5), index)
    np.testing.assert_array_equal(out.data, x)


def test_mean_over_index_groups_rejects_empty_group():
    groups = IndexGroups.from_lists([[0, 1], []])
    with pytest.raises(DegenerateGroupError):
        T.mean_over_index_groups(Tensor(np.ones((2, 1))), groups)


def test_mean_over_index_groups_values():
    groups = IndexGroups.from_lists([[0, 1], [2], [0, 2]])
    out = T.mean_over_index_groups(Tensor(np.array([[1.0], [3.0], [5.0]])), groups)
    np.testing.assert_array_equal(out.data, [[2.0], [5.0], [3.0]])


def test_log_is_clamped():
    out = T.log(Tensor(np.array([0.0, 1.0]))).data
    np.testing.assert_allclose(out, np.log([1e-7, 1 - 1e-7]))


def test_batch_norm_updates_running_stats_in_training_only():
    x = Tensor(np.array([[1.0], [3.0]]))
    state = BatchNormState(1)
    out = T.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), state, training=True)
    assert out.data[:, 0] == pytest.approx([-1.0, 1.0], abs=1e-5)
    # The first batch replaces the initial statistics outright.
    assert state.running_mean[0] == pytest.approx(2.0)
    assert state.running_var[0] == pytest.approx(2.0)
    assert state.count == 1
    before = state.running_mean.copy()
    T.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), state, training=False)
    np.testing.assert_array_equal(state.running_mean, before)
    assert state.count == 1


def test_batch_norm_running_stats_average_then_decay():
    state = BatchNormState(1, decay=0.9)
    for value in (0.0, 3.0, 6.0):
        state.update(np.array([value]), np.ones(1))
    assert state.running_mean[0] == pytest.approx(3.0)
    for _ in range(20):
        state.update(np.array([10.0]), np.ones(1))
    # Past the warm-up each update keeps 0.9 of the old value.
    expected = 10.0 - (10.0 - state.running_mean[0]) * 0.9
    state.update(np.array([10.0]), np.ones(1))
    assert state.running_mean[0] == pytest.approx(expected)


def test_optimizer_first_and_second_step():
    p = Tensor(np.zeros(1), requires_grad=True)
    opt = MomentumOptimizer([p], lr=0.01, momentum=0.98)
    opt.step([np.ones(1)])
    assert p.data[0] == pytest.approx(-0.01)
    opt.step([np.ones(1)])
    assert p.data[0] == pytest.approx(-0.01 - 0.0198)


def test_optimizer_quadratic_descent():
    p = Tensor(np.ones(1), requires_grad=True)
    opt = MomentumOptimizer([p], lr=0.01, momentum=0.98)
    for _ in range(50):
        opt.step([p.data.copy()])
    assert abs(p.data[0]) < 0.5


def test_optimizer_shape_mismatch():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ContractError):
        MomentumOptimizer([p]).step([np.zeros(3)])


def test_seeded_trajectories_are_identical():
    def run():
        rng = np.random.default_rng(9)
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        x = rng.normal(size=(5, 3))
        opt = MomentumOptimizer([w])
        for _ in range(5):
            opt.zero_grad()
            with Tape() as tape:
                tape.backward(T.sum(T.sigmoid(T.matmul(Tensor(x), w))))
            opt.step()
        return w.data

    np.testing.assert_array_equal(run(), run())


def test_precision_context_restores_dtype():
    with T.precision(np.float32):
        assert Tensor([1.0]).data.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64
