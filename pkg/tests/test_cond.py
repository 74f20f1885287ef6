import numpy as np

from scanworld import cond
from scanworld.tensor import Tensor, tsum


def test_noise_embedding_distinct_endpoints():
    p = cond.init_noise_embed(np.random.default_rng(0), 16)
    e0 = cond.embed_noise_level(np.array(0.0), p).data
    e1 = cond.embed_noise_level(np.array(1.0), p).data
    cos = e0 @ e1 / (np.linalg.norm(e0) * np.linalg.norm(e1))
    assert cos < 0.99


def test_noise_embedding_deterministic():
    p = cond.init_noise_embed(np.random.default_rng(1), 8)
    a = cond.embed_noise_level(np.array(0.37), p).data
    b = cond.embed_noise_level(np.array(0.37), p).data
    np.testing.assert_array_equal(a, b)


def test_noise_embedding_continuous():
    p = cond.init_noise_embed(np.random.default_rng(2), 32)
    a = cond.embed_noise_level(np.array(0.5), p).data

    def diff(delta):
        return np.abs(cond.embed_noise_level(np.array(0.5 + delta), p).data - a).max()

    assert diff(1e-4) < 0.05
    # first-order continuity: the perturbation shrinks with delta
    assert diff(1e-5) < 0.3 * diff(1e-4) + 1e-6


def test_action_embedding_discrete_rows():
    p = cond.init_action_embed(np.random.default_rng(3), 8, "discrete", num_actions=4)
    out = cond.embed_actions(np.array([[0, 3], [1, 1]]), p)
    assert out.shape == (2, 2, 8)
    np.testing.assert_array_equal(out.data[0, 1], p.table.data[3])
    np.testing.assert_array_equal(out.data[1, 0], out.data[1, 1])


def test_action_embedding_continuous_mlp():
    p = cond.init_action_embed(np.random.default_rng(4), 8, "continuous", action_dim=2)
    out = cond.embed_actions(np.array([[[0.1, 0.2]], [[0.5, -0.5]]], np.float32), p)
    assert out.shape == (2, 1, 8)
    assert not np.array_equal(out.data[0, 0], out.data[1, 0])


def test_adaln_zero_init_is_plain_layernorm():
    rng = np.random.default_rng(5)
    mod = cond.init_modulation(6)
    x = Tensor(rng.standard_normal((1, 3, 4, 6)).astype(np.float32))
    c = Tensor(rng.standard_normal((1, 3, 6)).astype(np.float32))
    h, alpha = cond.adaln_modulate(x, c, mod)
    from scanworld.tensor import layernorm
    np.testing.assert_allclose(h.data, layernorm(x).data, atol=1e-7)
    np.testing.assert_array_equal(alpha.data, np.zeros_like(alpha.data))


def test_adaln_zero_cond_behaves_as_layernorm_path():
    rng = np.random.default_rng(6)
    mod = cond.init_modulation(6)
    mod.w_gamma.data[...] = rng.standard_normal((6, 6)) * 0.1  # trained-ish weights
    x = Tensor(rng.standard_normal((1, 2, 3, 6)).astype(np.float32))
    c = Tensor(np.zeros((1, 2, 6), np.float32))
    h, _ = cond.adaln_modulate(x, c, mod)
    from scanworld.tensor import layernorm
    np.testing.assert_allclose(h.data, layernorm(x).data, atol=1e-7)  # silu(0) = 0


def test_adaln_frame_locality():
    rng = np.random.default_rng(7)
    mod = cond.init_modulation(6)
    for t in mod.tensors().values():
        t.data[...] = rng.standard_normal(t.shape) * 0.2
    x = Tensor(rng.standard_normal((1, 3, 4, 6)).astype(np.float32))
    c1 = rng.standard_normal((1, 3, 6)).astype(np.float32)
    c2 = c1.copy()
    c2[0, 1] += 1.0  # only frame 1 differs
    h1, a1 = cond.adaln_modulate(x, Tensor(c1), mod)
    h2, a2 = cond.adaln_modulate(x, Tensor(c2), mod)
    np.testing.assert_array_equal(h1.data[0, 0], h2.data[0, 0])
    np.testing.assert_array_equal(h1.data[0, 2], h2.data[0, 2])
    assert not np.array_equal(h1.data[0, 1], h2.data[0, 1])
    np.testing.assert_array_equal(a1.data[0, 2], a2.data[0, 2])


def test_different_actions_give_different_modulation():
    rng = np.random.default_rng(8)
    noise_p = cond.init_noise_embed(rng, 8)
    act_p = cond.init_action_embed(rng, 8, "discrete", num_actions=4)
    t = np.full((1, 2), 0.5, np.float32)
    c1 = cond.condition_vector(t, np.array([[0, 1]]), noise_p, act_p)
    c2 = cond.condition_vector(t, np.array([[0, 2]]), noise_p, act_p)
    np.testing.assert_array_equal(c1.data[0, 0], c2.data[0, 0])
    assert not np.array_equal(c1.data[0, 1], c2.data[0, 1])


def test_condition_vector_grad_reaches_action_table():
    rng = np.random.default_rng(9)
    noise_p = cond.init_noise_embed(rng, 8)
    act_p = cond.init_action_embed(rng, 8, "discrete", num_actions=3)
    c = cond.condition_vector(np.full((1, 2), 0.3, np.float32),
                              np.array([[1, 1]]), noise_p, act_p)
    tsum(c).backward()
    assert np.abs(act_p.table.grad[1]).sum() > 0
    np.testing.assert_array_equal(act_p.table.grad[0], 0)
