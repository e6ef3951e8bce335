import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sitcom import nn


def small_map_spec(memory=True):
    return nn.NetworkSpec.for_map(rep_size=8, hidden_size=4, has_memory=memory, channels=(2, 2), size=7)


def jitter_biases(params, rng):
    # zero biases put ReLU units exactly on their kink when an input is silent
    for k, w in params.weights.items():
        if k.endswith(".b"):
            w += rng.normal(scale=0.1, size=w.shape)
    return params


def random_batch(spec, rng, n=4):
    x = rng.normal(size=(n, *spec.input_shape))
    actions = rng.integers(0, 5, size=n)
    targets = rng.normal(size=n)
    if spec.has_memory:
        h = rng.normal(scale=0.5, size=(n, spec.hidden_size))
        c = rng.normal(scale=0.5, size=(n, spec.hidden_size))
        return nn.Batch(x, actions, targets, h, c)
    return nn.Batch(x, actions, targets)


def test_param_shapes_map_and_vector():
    spec = nn.NetworkSpec.for_map(16, 32, has_memory=True)
    shapes = spec.param_shapes()
    assert shapes["conv0.w"] == (3, 3, 3, 8)
    assert shapes["conv1.w"] == (3, 3, 8, 8)
    assert shapes["enc.w"] == (5 * 5 * 8, 16)
    assert shapes["lstm.wh"] == (32, 128)
    assert shapes["head.w"] == (32, 5)
    flat = nn.NetworkSpec.for_vector(14, 8, 32).param_shapes()
    assert flat["enc.w"] == (14, 8) and "lstm.wx" not in flat


def test_spec_validation():
    with pytest.raises(ValueError):
        nn.NetworkSpec.for_vector(4, rep_size=12)
    with pytest.raises(ValueError):
        nn.NetworkSpec((9, 9, 3), conv_stack=())
    spec = small_map_spec()
    assert nn.NetworkSpec.from_dict(spec.to_dict()) == spec


def test_init_bounds_and_zero_biases():
    spec = nn.NetworkSpec.for_map(16, 32, has_memory=True)
    params = nn.init_params(spec, np.random.default_rng(0))
    for name, w in params.weights.items():
        if name.endswith(".b"):
            assert not w.any()
        else:
            bound = 1 / np.sqrt(nn.fan_in(name, w.shape))
            assert np.abs(w).max() <= bound
            assert np.abs(w).max() > 0.8 * bound
    assert params.step == 0 and params.all_finite()


def test_init_is_seeded():
    spec = small_map_spec()
    a = nn.init_params(spec, np.random.default_rng(3))
    b = nn.init_params(spec, np.random.default_rng(3))
    assert a.equals(b)


def test_forward_shapes_and_memory_advance():
    spec = nn.NetworkSpec.for_vector(14, 16, 32, has_memory=True)
    params = nn.init_params(spec, np.random.default_rng(0))
    x = np.ones(14)
    q, mem = nn.forward(spec, params, x, nn.zero_memory(spec))
    assert q.shape == (5,)
    assert mem.h.shape == (32,) and np.abs(mem.h).sum() > 0
    q2, _ = nn.forward(spec, params, x, mem)
    assert not np.allclose(q, q2)


def test_forward_rejects_wrong_shape():
    spec = small_map_spec()
    params = nn.init_params(spec, np.random.default_rng(0))
    with pytest.raises(ValueError, match="shape"):
        nn.forward(spec, params, np.zeros((9, 9, 3)))


def test_single_record_forward_matches_batch():
    spec = small_map_spec()
    params = nn.init_params(spec, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    batch = random_batch(spec, rng, n=3)
    q_batch, *_ = nn._forward_batch(spec, params.weights, batch.inputs, batch.h, batch.c)
    for i in range(3):
        q, _ = nn.forward(spec, params, batch.inputs[i], nn.MemoryState(batch.h[i], batch.c[i]))
        np.testing.assert_allclose(q, q_batch[i], rtol=1e-12, atol=1e-14)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 5, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    y, _ = nn._conv_forward(x, w, b)
    ref = np.zeros((2, 3, 3, 4))
    for n in range(2):
        for i in range(3):
            for j in range(3):
                ref[n, i, j] = np.tensordot(x[n, i : i + 3, j : j + 3], w, axes=3) + b
    np.testing.assert_allclose(y, ref, rtol=1e-12)


@pytest.mark.parametrize("memory", [False, True])
def test_gradients_match_finite_differences_map(memory):
    spec = small_map_spec(memory)
    rng = np.random.default_rng(10)
    params = jitter_biases(nn.init_params(spec, rng), rng)
    assert nn.finite_diff_check(spec, params, random_batch(spec, rng)) < 1e-4


@pytest.mark.parametrize("memory", [False, True])
def test_gradients_match_finite_differences_vector(memory):
    spec = nn.NetworkSpec.for_vector(6, rep_size=8, hidden_size=4, has_memory=memory)
    rng = np.random.default_rng(11)
    params = jitter_biases(nn.init_params(spec, rng), rng)
    assert nn.finite_diff_check(spec, params, random_batch(spec, rng, n=5)) < 1e-4


def test_checker_detects_wrong_gradient():
    spec = nn.NetworkSpec.for_vector(6, rep_size=8, hidden_size=4)
    rng = np.random.default_rng(0)
    params = nn.init_params(spec, rng)
    batch = random_batch(spec, rng)
    _, grads = nn.loss_and_grads(spec, params, batch)
    grads["head.b"] = grads["head.b"] * 1.5
    assert nn.finite_diff_check(spec, params, batch, grads=grads) > 0.1


def test_loss_is_mean_squared_error_on_taken_actions():
    spec = nn.NetworkSpec.for_vector(3, 8, 4)
    params = nn.init_params(spec, np.random.default_rng(0))
    x = np.eye(3)
    actions = np.array([0, 2, 4])
    targets = np.array([1.0, -1.0, 0.5])
    loss, _ = nn.loss_and_grads(spec, params, nn.Batch(x, actions, targets))
    q = np.array([nn.forward(spec, params, xi)[0] for xi in x])
    assert loss == pytest.approx(np.mean((q[[0, 1, 2], actions] - targets) ** 2), rel=1e-12)


def test_loss_and_grads_errors():
    spec = nn.NetworkSpec.for_vector(3, 8, 4, has_memory=True)
    params = nn.init_params(spec, np.random.default_rng(0))
    with pytest.raises(ValueError, match="memory"):
        nn.loss_and_grads(spec, params, nn.Batch(np.zeros((1, 3)), np.array([0]), np.array([0.0])))
    with pytest.raises(ValueError, match="empty"):
        nn.loss_and_grads(spec, params, nn.Batch(np.zeros((0, 3)), np.array([], int), np.array([])))
    h = np.zeros((1, 4))
    with pytest.raises(ValueError, match="non-finite"):
        nn.loss_and_grads(spec, params, nn.Batch(np.zeros((1, 3)), np.array([0]), np.array([np.nan]), h, h))


def test_first_adam_step_is_signed_learning_rate():
    spec = nn.NetworkSpec.for_vector(3, 8, 4)
    params = nn.init_params(spec, np.random.default_rng(0))
    grads = {k: np.random.default_rng(1).normal(size=w.shape) for k, w in params.weights.items()}
    new = nn.adam_step(params, grads, lr=0.01)
    for k in params.weights:
        delta = new.weights[k] - params.weights[k]
        np.testing.assert_allclose(delta, -0.01 * np.sign(grads[k]), atol=1e-6)
    assert new.step == 1 and params.step == 0


def test_adam_moment_recursion():
    spec = nn.NetworkSpec.for_vector(3, 8, 4)
    params = nn.init_params(spec, np.random.default_rng(0))
    g = {k: np.full(w.shape, 2.0) for k, w in params.weights.items()}
    p1 = nn.adam_step(params, g, 1e-3)
    p2 = nn.adam_step(p1, g, 1e-3)
    np.testing.assert_allclose(p2.m["head.w"], 0.9 * 0.2 + 0.2)
    np.testing.assert_allclose(p2.v["head.w"], 0.999 * 0.004 + 0.004)
    with pytest.raises(ValueError):
        nn.adam_step(params, g, -1.0)


def test_zero_learning_rate_leaves_weights():
    spec = small_map_spec()
    params = nn.init_params(spec, np.random.default_rng(0))
    _, grads = nn.loss_and_grads(spec, params, random_batch(spec, np.random.default_rng(1)))
    new = nn.adam_step(params, grads, 0.0)
    for k in params.weights:
        assert np.array_equal(new.weights[k], params.weights[k])


def test_regression_to_constant_converges():
    spec = nn.NetworkSpec.for_vector(4, 8, 8)
    params = nn.init_params(spec, np.random.default_rng(0))
    batch = nn.Batch(np.array([[1.0, 0, 1, 0]]), np.array([3]), np.array([0.7]))
    for _ in range(300):
        _, grads = nn.loss_and_grads(spec, params, batch)
        params = nn.adam_step(params, grads, 1e-2)
    q, _ = nn.forward(spec, params, batch.inputs[0])
    assert abs(q[3] - 0.7) < 1e-2


@settings(max_examples=15)
@given(seed=st.integers(0, 2**31 - 1), memory=st.booleans(), n=st.integers(1, 4))
def test_gradients_on_random_vector_specs(seed, memory, n):
    rng = np.random.default_rng(seed)
    spec = nn.NetworkSpec.for_vector(int(rng.integers(1, 6)), rep_size=8, hidden_size=int(rng.integers(1, 4)), has_memory=memory)
    params = jitter_biases(nn.init_params(spec, rng), rng)
    assert nn.finite_diff_check(spec, params, random_batch(spec, rng, n)) < 1e-4


@settings(max_examples=20)
@given(seed=st.integers(0, 2**31 - 1))
def test_updates_stay_finite(seed):
    rng = np.random.default_rng(seed)
    spec = nn.NetworkSpec.for_vector(5, 8, 4, has_memory=True)
    params = nn.init_params(spec, rng)
    batch = random_batch(spec, rng, 6)._replace(targets=rng.normal(scale=100, size=6))
    for _ in range(5):
        _, grads = nn.loss_and_grads(spec, params, batch)
        params = nn.adam_step(params, grads, 1e-3)
    assert params.all_finite()
