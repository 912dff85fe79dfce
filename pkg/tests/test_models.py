import numpy as np
import pytest

from mixednet.autodiff import Graph, check_gradients
from mixednet.errors import ConfigError, DimensionError
from mixednet.models import (
    ARCHITECTURES, WindowBatch, build_params, forward_graph, gru_final_state, gru_forward,
    linear_forward, mlp_forward, parameter_count, predict,
)


def make_batch(rng, B=5, F=3, M=2):
    return WindowBatch(rng.normal(size=(B, 30, F)), rng.normal(size=(B, M)), rng.normal(size=B),
                       np.arange(B))


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def test_window_length_enforced():
    with pytest.raises(DimensionError):
        WindowBatch(np.zeros((2, 29, 3)), np.zeros((2, 2)), np.zeros(2), np.zeros(2))
    with pytest.raises(DimensionError):
        WindowBatch(np.zeros((2, 30, 3)), np.zeros((3, 2)), np.zeros(2), np.zeros(2))


def test_linear_zero_inputs_give_zero():
    p = build_params("linear", 3, 2)
    b = WindowBatch(np.zeros((4, 30, 3)), np.zeros((4, 2)), np.zeros(4), np.arange(4))
    assert np.array_equal(linear_forward(b, p), np.zeros((4, 1)))


def test_linear_mean_invariance():
    rng = np.random.default_rng(0)
    p = build_params("linear", 3, 2, seed=1)
    v = rng.normal(size=3)
    meta = rng.normal(size=(1, 2))
    const = WindowBatch(np.tile(v, (1, 30, 1)), meta, [0.0], [0])
    single = np.hstack([v[None], meta]) @ p.arrays["W"] + p.arrays["c"]
    assert np.allclose(linear_forward(const, p), single, atol=1e-14)


def test_linear_matches_hand_computation():
    rng = np.random.default_rng(2)
    p = build_params("linear", 3, 2, seed=3)
    p.arrays["c"][:] = 0.7
    b = make_batch(rng)
    x = np.hstack([b.series.mean(axis=1), b.meta])
    assert np.allclose(linear_forward(b, p), x @ p.arrays["W"] + 0.7, atol=1e-13)


def test_mlp_zero_weights_give_final_bias():
    p = build_params("mlp", 3, 2)
    for k in p.arrays:
        p.arrays[k][:] = 0.0
    p.arrays["c_out"][:] = 1.25
    b = make_batch(np.random.default_rng(0))
    assert np.array_equal(mlp_forward(b, p), np.full((5, 1), 1.25))


def test_mlp_hand_unrolled():
    rng = np.random.default_rng(4)
    p = build_params("mlp", 1, 2, hidden=2, meta_hidden=2, seed=5)
    for k in p.arrays:
        p.arrays[k] = rng.normal(size=p.arrays[k].shape)
    b = make_batch(rng, B=3, F=1)
    w = p.arrays
    expected = []
    for i in range(3):
        steps = [relu(b.series[i, t] @ w["W_step"] + w["c_step"][0]) for t in range(30)]
        pooled = np.mean(steps, axis=0)
        meta = relu(b.meta[i] @ w["W_meta"] + w["c_meta"][0])
        merged = relu(np.concatenate([pooled, meta]) @ w["W_merge"] + w["c_merge"][0])
        expected.append(merged @ w["W_out"] + w["c_out"][0])
    assert np.allclose(mlp_forward(b, p), np.array(expected), atol=1e-12)


def test_gru_hand_unrolled():
    rng = np.random.default_rng(6)
    p = build_params("gru", 2, 2, hidden=3, meta_hidden=2, seed=7)
    for k in p.arrays:
        p.arrays[k] = rng.normal(scale=0.5, size=p.arrays[k].shape)
    b = make_batch(rng, B=2, F=2)
    w = p.arrays
    out = []
    for i in range(2):
        h = np.zeros(3)
        for t in range(30):
            x = b.series[i, t]
            z = sigmoid(x @ w["W_z"] + h @ w["U_z"] + w["c_z"][0])
            r = sigmoid(x @ w["W_r"] + h @ w["U_r"] + w["c_r"][0])
            cand = np.tanh(x @ w["W_h"] + (r * h) @ w["U_h"] + w["c_h"][0])
            h = (1 - z) * h + z * cand
        meta = relu(b.meta[i] @ w["W_meta"] + w["c_meta"][0])
        merged = relu(np.concatenate([h, meta]) @ w["W_merge"] + w["c_merge"][0])
        dense = relu(merged @ w["W_dense"] + w["c_dense"][0])
        out.append(dense @ w["W_out"] + w["c_out"][0])
    assert np.allclose(gru_forward(b, p), np.array(out), atol=1e-12)


def test_gru_zero_input_weights_keep_zero_state():
    rng = np.random.default_rng(8)
    p = build_params("gru", 3, 2, hidden=4, seed=9)
    for k in ("W_z", "W_r", "W_h", "c_z", "c_r", "c_h"):
        p.arrays[k][:] = 0.0
    b = make_batch(rng)
    g = Graph()
    h = gru_final_state(g, p.bind(g, requires_grad=False), b.series * 100)
    assert np.array_equal(h.values, np.zeros((5, 4)))


def test_gru_is_stateful():
    rng = np.random.default_rng(10)
    p = build_params("gru", 3, 2, hidden=4, seed=11)
    v = rng.normal(size=3)
    g = Graph()
    w = p.bind(g, requires_grad=False)
    one = gru_final_state(g, w, v.reshape(1, 1, 3)).values
    thirty = gru_final_state(g, w, np.tile(v, (1, 30, 1))).values
    assert not np.allclose(one, thirty)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_eval_mode_is_deterministic(arch):
    rng = np.random.default_rng(12)
    p = build_params(arch, 3, 2, seed=13)
    b = make_batch(rng)
    assert np.array_equal(predict(p, b), predict(p, b))


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_architectures_are_substitutable(arch):
    b = make_batch(np.random.default_rng(14), B=7)
    assert predict(build_params(arch, 3, 2), b).shape == (7, 1)


@pytest.mark.parametrize("arch", ["mlp", "gru"])
def test_training_mode_uses_dropout(arch):
    b = make_batch(np.random.default_rng(15), B=16)
    p = build_params(arch, 3, 2, seed=1)
    a = predict(p, b, training=True, rng=np.random.default_rng(0))
    assert not np.allclose(a, predict(p, b))
    with pytest.raises(ConfigError):
        predict(p, b, training=True)


def test_feature_count_mismatch():
    p = build_params("linear", 4, 2)
    with pytest.raises(DimensionError):
        linear_forward(make_batch(np.random.default_rng(0)), p)


def test_init_is_seed_deterministic():
    a, b, c = (build_params("gru", 3, 2, seed=s) for s in (5, 5, 6))
    assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
    assert any(not np.array_equal(a.arrays[k], c.arrays[k]) for k in a.arrays)


def test_init_bounds_and_zero_biases():
    p = build_params("gru", 3, 2, hidden=16, seed=0)
    for k, v in p.arrays.items():
        if k[0] in "WU":
            assert np.all(np.abs(v) <= 1 / np.sqrt(v.shape[0]))
        else:
            assert np.all(v == 0)


def test_gru_parameter_count_closed_form():
    # cell 3*(16*3 + 16*16 + 16) = 960; meta 2*8+8 = 24; merge 24*16+16 = 400;
    # dense 16*16+16 = 272; head 17
    assert parameter_count("gru", 3, 2, 16, 8) == 1673
    assert build_params("gru", 3, 2, hidden=16).n_parameters == 1673


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_parameter_count_matches_arrays(arch):
    for F, M, H, Hm in [(1, 1, 1, 1), (3, 2, 32, 8), (5, 4, 7, 3)]:
        assert build_params(arch, F, M, H, meta_hidden=Hm).n_parameters == parameter_count(arch, F, M, H, Hm)


@pytest.mark.parametrize("bad", [dict(n_features=0), dict(n_meta=-1), dict(hidden=0)])
def test_non_positive_dims_rejected(bad):
    kw = dict(arch="mlp", n_features=3, n_meta=2, hidden=4) | bad
    with pytest.raises(ConfigError):
        build_params(**kw)


def test_unknown_architecture():
    with pytest.raises(ConfigError):
        build_params("lstm", 3, 2)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_mse_gradients_on_four_window_batch(arch):
    rng = np.random.default_rng(16)
    b = make_batch(rng, B=4, F=2)
    p = build_params(arch, 2, 2, hidden=4, meta_hidden=3, seed=17)
    arrays = {k: v + rng.normal(0, 0.1, v.shape) for k, v in p.arrays.items()}

    def loss(g, leaves):
        out = forward_graph(g, leaves, arch, b, training=True, rng=np.random.default_rng(3))
        return g.sum(g.square(g.sub(out, g.constant(b.targets.reshape(-1, 1)))))

    assert max(check_gradients(loss, arrays).values()) < 1e-5
