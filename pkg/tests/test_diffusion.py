import numpy as np
import pytest

from scanworld import diffusion as df
from scanworld.tensor import ContractError, Tensor


def test_schedule_endpoints_and_identity():
    assert df.NoiseSchedule.alpha(0.0) == 1.0
    assert df.NoiseSchedule.sigma(0.0) == 0.0
    assert df.NoiseSchedule.alpha(1.0) == pytest.approx(0.0, abs=1e-12)
    assert df.NoiseSchedule.sigma(1.0) == pytest.approx(1.0)


def test_schedule_variance_preserving():
    t = np.linspace(0, 1, 101)
    total = df.NoiseSchedule.alpha(t) ** 2 + df.NoiseSchedule.sigma(t) ** 2
    np.testing.assert_allclose(total, 1.0, atol=1e-6)


def test_noise_vector_p0_never_prefixes():
    rng = np.random.default_rng(0)
    assert all(df.sample_noise_vector(8, rng, 0.0).clean_prefix_len == 0 for _ in range(200))


def test_noise_vector_p1_prefix_set():
    rng = np.random.default_rng(1)
    seen = set()
    for _ in range(200):
        nv = df.sample_noise_vector(4, rng, 1.0)
        seen.add(nv.clean_prefix_len)
        assert np.all(nv.t[:nv.clean_prefix_len] == 0)
        assert np.all(nv.t[nv.clean_prefix_len:] > 0)
    assert seen == {2, 3}


def test_noise_vector_monte_carlo_rate():
    rng = np.random.default_rng(2)
    draws = [df.sample_noise_vector(8, rng, 0.5).clean_prefix_len > 0 for _ in range(100_000)]
    assert abs(np.mean(draws) - 0.5) <= 0.01


def test_noise_vector_t1_contract_error():
    rng = np.random.default_rng(3)
    with pytest.raises(ContractError):
        for _ in range(64):  # prefix mode will be sampled quickly at p=1
            df.sample_noise_vector(1, rng, 1.0)


def test_noise_frames_identity_at_t0():
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((3, 2, 2)).astype(np.float32)
    eps = rng.standard_normal((3, 2, 2)).astype(np.float32)
    nv = df.NoiseVector(t=np.zeros(3, np.float32), clean_prefix_len=3)
    np.testing.assert_array_equal(df.noise_frames(x0, nv, eps), x0)


def test_noise_frames_pure_noise_at_t1():
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((2, 4)).astype(np.float32)
    eps = rng.standard_normal((2, 4)).astype(np.float32)
    nv = df.NoiseVector(t=np.ones(2, np.float32), clean_prefix_len=0)
    np.testing.assert_allclose(df.noise_frames(x0, nv, eps), eps, atol=1e-6)


def test_noise_frames_half_mix():
    t_half = 0.5  # cosine schedule: alpha = sigma = sqrt(1/2) at t = 1/2
    nv = df.NoiseVector(t=np.array([t_half], np.float32), clean_prefix_len=0)
    out = df.noise_frames(np.ones((1, 2), np.float32), nv, -np.ones((1, 2), np.float32))
    np.testing.assert_allclose(out, 0.0, atol=1e-6)


def test_loss_perfect_prediction_is_zero():
    rng = np.random.default_rng(6)
    eps = rng.standard_normal((4, 2, 2)).astype(np.float32)
    nv = df.NoiseVector(t=np.full(4, 0.5, np.float32), clean_prefix_len=0)
    assert df.loss(Tensor(eps), eps, nv).item() == 0.0


def test_loss_constant_offset():
    rng = np.random.default_rng(7)
    eps = rng.standard_normal((4, 3)).astype(np.float32)
    nv = df.NoiseVector(t=np.full(4, 0.5, np.float32), clean_prefix_len=0)
    out = df.loss(Tensor(eps + 1.0), eps, nv)
    assert out.item() == pytest.approx(1.0, rel=1e-5)


def test_loss_prefix_masks_to_single_frame():
    rng = np.random.default_rng(8)
    eps = rng.standard_normal((4, 5)).astype(np.float32)
    pred = rng.standard_normal((4, 5)).astype(np.float32)
    t = np.full(4, 0.5, np.float32)
    t[:3] = 0
    nv = df.NoiseVector(t=t, clean_prefix_len=3)
    expected = np.mean((pred[3] - eps[3]) ** 2)
    assert df.loss(Tensor(pred), eps, nv).item() == pytest.approx(expected, rel=1e-5)


def test_loss_all_clean_rejected():
    nv = df.NoiseVector(t=np.zeros(3, np.float32), clean_prefix_len=3)
    with pytest.raises(ContractError):
        df.loss(Tensor(np.zeros((3, 2))), np.zeros((3, 2), np.float32), nv)


def test_loss_prefix_target_gradient_is_zero():
    rng = np.random.default_rng(9)
    eps = rng.standard_normal((4, 5)).astype(np.float32)
    pred = Tensor(rng.standard_normal((4, 5)).astype(np.float32), requires_grad=True)
    t = np.full(4, 0.5, np.float32)
    t[:2] = 0
    nv = df.NoiseVector(t=t, clean_prefix_len=2)
    df.loss(pred, eps, nv).backward()
    np.testing.assert_array_equal(pred.grad[:2], 0.0)
    assert np.abs(pred.grad[2:]).max() > 0


def test_loss_batched():
    rng = np.random.default_rng(10)
    eps = rng.standard_normal((2, 4, 3)).astype(np.float32)
    pred = eps.copy()
    pred[0] += 1.0  # offset only in row 0
    nvs = [df.NoiseVector(t=np.full(4, 0.5, np.float32), clean_prefix_len=0),
           df.NoiseVector(t=np.array([0, 0, 0.5, 0.5], np.float32), clean_prefix_len=2)]
    # row 0: 4 noisy frames each MSE 1; row 1: 2 noisy frames each MSE 0
    out = df.loss(Tensor(pred), eps, nvs)
    assert out.item() == pytest.approx(4.0 / 6.0, rel=1e-5)


def test_sampler_single_step_closed_form():
    rng = np.random.default_rng(11)
    x0 = rng.standard_normal((2, 2)).astype(np.float64)

    captured = {}

    def denoise(x_t, t):
        captured["x"], captured["t"] = x_t.copy(), t
        return (x_t - df.NoiseSchedule.alpha(t) * x0) / df.NoiseSchedule.sigma(t)

    out = df.ddim_sample(denoise, (2, 2), steps=1, rng=np.random.default_rng(0))
    assert captured["t"] == pytest.approx(df.T_MAX)
    a, s = df.NoiseSchedule.alpha(df.T_MAX), df.NoiseSchedule.sigma(df.T_MAX)
    eps_hat = (captured["x"] - a * x0) / s
    expected = (captured["x"] - s * eps_hat) / a
    np.testing.assert_allclose(out, expected, atol=1e-4)


@pytest.mark.parametrize("steps", [1, 3, 20])
def test_sampler_ideal_denoiser_recovers_x0(steps):
    rng = np.random.default_rng(12)
    x0 = rng.standard_normal((3, 3)).astype(np.float64)

    def ideal(x_t, t):
        return (x_t.astype(np.float64) - df.NoiseSchedule.alpha(t) * x0) / df.NoiseSchedule.sigma(t)

    out = df.ddim_sample(ideal, (3, 3), steps=steps, rng=np.random.default_rng(1))
    assert np.abs(out - x0).max() <= 1e-4


def test_sampler_deterministic():
    def denoise(x_t, t):
        return x_t * 0.5

    a = df.ddim_sample(denoise, (4,), steps=5, rng=np.random.default_rng(42))
    b = df.ddim_sample(denoise, (4,), steps=5, rng=np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)


def test_sampler_rejects_zero_steps():
    with pytest.raises(ContractError):
        df.ddim_sample(lambda x, t: x, (2,), steps=0, rng=np.random.default_rng(0))
