import numpy as np
import pytest

from scanworld import diffusion
from scanworld.net import Model, ModelConfig, frame_index_features
from scanworld.reference import reference_forward
from scanworld.scanorder import ConfigurationError
from scanworld.tensor import Tensor


TINY = dict(frame_size=8, channels=1, patch_size=4, dim=8, layers=2, heads=2,
            ssm_state=3, window=2, scan_chunk=3, num_actions=4)


def randomize(model, scale=0.2, seed=0):
    """Give every parameter (incl. zero-init mods/head) nonzero values."""
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        t.data[...] = (rng.standard_normal(t.shape) * scale).astype(np.float32)
    return model


def rand_inputs(cfg, b, t_frames, seed=0):
    rng = np.random.default_rng(seed)
    noisy = rng.standard_normal((b, t_frames, cfg.frame_size, cfg.frame_size,
                                 cfg.channels)).astype(np.float32)
    t = rng.uniform(0, 1, (b, t_frames)).astype(np.float32)
    actions = rng.integers(0, cfg.num_actions, (b, t_frames))
    return noisy, t, actions


def test_patchify_shapes():
    cfg = ModelConfig(frame_size=16, patch_size=4, dim=8, layers=1, heads=2)
    assert cfg.tokens_per_side == 4 and cfg.tokens_per_frame == 16
    cfg_one = ModelConfig(frame_size=8, patch_size=8, dim=8, layers=1, heads=2,
                          block_schedule=[[1, 1]])
    assert cfg_one.tokens_per_frame == 1  # one token per frame


def test_patchify_divisibility_error():
    with pytest.raises(ConfigurationError):
        ModelConfig(frame_size=16, patch_size=5)


def test_block_schedule_must_divide():
    with pytest.raises(ConfigurationError):
        ModelConfig(frame_size=16, patch_size=4, block_schedule=[[3, 1]])


def test_patchify_linear_roundtrip():
    cfg = ModelConfig(frame_size=8, channels=1, patch_size=4, dim=16, layers=1,
                      heads=2, ssm_state=3, window=2)
    m = Model(cfg, seed=0)
    pd, d = cfg.patch_dim, cfg.dim
    # identity embed, transposed-identity head: tokens reconstruct pixels
    m.patch_w.data[...] = 0
    m.patch_w.data[:pd, :pd] = np.eye(pd)
    m.patch_b.data[...] = 0
    rng = np.random.default_rng(1)
    frames = rng.standard_normal((1, 2, 8, 8, 1)).astype(np.float32)
    tokens = m._patchify(Tensor(frames))
    head = np.zeros((d, pd), np.float32)
    head[:pd, :pd] = np.eye(pd)
    from scanworld.tensor import matmul
    recon = m._unpatchify(matmul(tokens, Tensor(head)))
    np.testing.assert_allclose(recon.data, frames, atol=1e-6)


def test_zero_init_output_is_zero():
    cfg = ModelConfig(**TINY)
    m = Model(cfg, seed=0)
    noisy, t, actions = rand_inputs(cfg, 2, 3)
    out = m.forward(noisy, t, actions)
    np.testing.assert_array_equal(out.data, np.zeros_like(noisy))


def test_init_output_invariant_to_actions():
    cfg = ModelConfig(**TINY)
    m = Model(cfg, seed=0)
    # head nonzero, modulations still zero: actions cannot reach the output
    m.head_w.data[...] = np.random.default_rng(2).standard_normal(m.head_w.shape) * 0.1
    noisy, t, actions = rand_inputs(cfg, 1, 4)
    out1 = m.forward(noisy, t, actions)
    out2 = m.forward(noisy, t, (actions + 1) % cfg.num_actions)
    np.testing.assert_array_equal(out1.data, out2.data)


def test_forward_causality_exact():
    cfg = ModelConfig(**TINY)
    m = randomize(Model(cfg, seed=0), seed=3)
    noisy, t, actions = rand_inputs(cfg, 1, 5, seed=4)
    base = m.forward(noisy, t, actions).data
    bumped = noisy.copy()
    bumped[:, 3:] += 1.0
    out = m.forward(bumped, t, actions).data
    np.testing.assert_array_equal(base[:, :3], out[:, :3])
    assert not np.array_equal(base[:, 3:], out[:, 3:])


@pytest.mark.parametrize("mask_mode", ["window", "full", "chunked"])
def test_forward_matches_reference(mask_mode):
    cfg = ModelConfig(mask_mode=mask_mode, attn_chunk=2, **TINY)
    m = randomize(Model(cfg, seed=0), seed=5)
    noisy, t, actions = rand_inputs(cfg, 2, 4, seed=6)
    ours = m.forward(noisy, t, actions).data
    ref = reference_forward(m.param_arrays(), cfg, noisy, t, actions)
    assert np.abs(ours - ref).max() <= 1e-5


def test_forward_matches_reference_no_ssm():
    cfg = ModelConfig(use_ssm=False, **TINY)
    m = randomize(Model(cfg, seed=1), seed=7)
    noisy, t, actions = rand_inputs(cfg, 1, 3, seed=8)
    ours = m.forward(noisy, t, actions).data
    ref = reference_forward(m.param_arrays(), cfg, noisy, t, actions)
    assert np.abs(ours - ref).max() <= 1e-5


def test_describe_is_config_pure():
    cfg = ModelConfig(**TINY)
    d1 = Model(cfg, seed=0).describe()
    d2 = Model(cfg, seed=99).describe()
    assert d1 == d2
    manual = sum(t.size for t in Model(cfg, seed=0).params.values())
    assert d1["total_params"] == manual


def test_config_json_roundtrip():
    cfg = ModelConfig(**TINY, block_schedule=[[2, 2], [1, 1]])
    again = ModelConfig.from_json(cfg.to_json())
    assert again == cfg


def test_streaming_matches_batch_on_clean_frames():
    cfg = ModelConfig(**TINY)
    m = randomize(Model(cfg, seed=0), seed=9)
    rng = np.random.default_rng(10)
    t_frames = 6
    frames = rng.standard_normal((t_frames, 8, 8, 1)).astype(np.float32)
    actions = rng.integers(0, 4, t_frames)
    t = np.zeros((1, t_frames), np.float32)
    batch = m.forward(frames[None], t, actions[None]).data[0]
    ssm_states, kv_caches = m.new_stream_state()
    for i in range(t_frames):
        eps = m.forward_frame(frames[i], 0.0, int(actions[i]), i,
                              ssm_states, kv_caches, commit=True)
        assert np.abs(eps - batch[i]).max() <= 1e-5, f"frame {i}"


def test_streaming_no_commit_leaves_state_untouched():
    cfg = ModelConfig(**TINY)
    m = randomize(Model(cfg, seed=0), seed=11)
    rng = np.random.default_rng(12)
    frame = rng.standard_normal((8, 8, 1)).astype(np.float32)
    ssm_states, kv_caches = m.new_stream_state()
    m.forward_frame(frame, 0.0, 1, 0, ssm_states, kv_caches, commit=True)
    snapshot = [s.copy() for s in ssm_states]
    seen = [c.frames_seen for c in kv_caches]
    out1 = m.forward_frame(frame * 2, 0.7, 2, 1, ssm_states, kv_caches, commit=False)
    for s, snap in zip(ssm_states, snapshot):
        np.testing.assert_array_equal(s, snap)
    assert [c.frames_seen for c in kv_caches] == seen
    out2 = m.forward_frame(frame * 2, 0.7, 2, 1, ssm_states, kv_caches, commit=False)
    np.testing.assert_array_equal(out1, out2)


def test_gradcheck_against_reference_fd():
    cfg = ModelConfig(**TINY)
    m = randomize(Model(cfg, seed=0), scale=0.15, seed=13)
    noisy, t, actions = rand_inputs(cfg, 1, 3, seed=14)
    rng = np.random.default_rng(15)
    eps_target = rng.standard_normal(noisy.shape).astype(np.float32)
    nv = diffusion.NoiseVector(t=t[0], clean_prefix_len=0)

    out = m.forward(noisy, t, actions)
    diffusion.loss(out.reshape(out.shape), eps_target[0], nv).backward() \
        if False else None
    loss_t = diffusion.loss(out, eps_target, [nv])
    loss_t.backward()

    def loss_fd(params):
        ref = reference_forward(params, cfg, noisy, t, actions)
        return np.mean((ref[0] - eps_target[0]) ** 2)

    h = 1e-3
    checked = 0
    names = sorted(m.params)
    for name in names:
        tns = m.params[name]
        flat_idx = rng.integers(0, tns.size)
        arrays = {k: v.data.astype(np.float64).copy() for k, v in m.params.items()}
        orig = arrays[name].reshape(-1)[flat_idx]
        arrays[name].reshape(-1)[flat_idx] = orig + h
        fp = loss_fd(arrays)
        arrays[name].reshape(-1)[flat_idx] = orig - h
        fm = loss_fd(arrays)
        fd = (fp - fm) / (2 * h)
        ad = tns.grad.reshape(-1)[flat_idx]
        err = abs(fd - ad) / max(abs(fd), abs(ad), 0.1)
        assert err <= 1e-3, f"{name}[{flat_idx}]: fd={fd:.6g} ad={ad:.6g}"
        checked += 1
    assert checked == len(names)


def test_frame_index_features_distinguish_far_indices():
    f = frame_index_features(np.array([0, 1, 100, 500]), 16)
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.abs(f[i] - f[j]).max() > 1e-3
