"""Noise schedule, per-frame noising, masked training loss, DDIM sampling.

Each frame i carries its own diffusion time t_i in [0, 1]; a training
sequence either noises every frame independently or keeps a random-length
prefix perfectly clean (t=0) and noises only the tail. The loss is the mean
squared eps-prediction error over the noised frames alone.

The variance-preserving cosine schedule alpha(t) = cos(pi t / 2),
sigma(t) = sin(pi t / 2) is used throughout. Sampling runs a deterministic
DDIM update; the grid starts at T_MAX = 0.999 because alpha(1) vanishes and
the x0 estimate (x_t - sigma * eps) / alpha is undefined exactly at t = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Tensor, mul, scale, tsum

T_EPS = 1e-3   # training times are drawn from [T_EPS, 1] to avoid sigma=0
T_MAX = 0.999  # sampling grid start


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int = 20

    @staticmethod
    def alpha(t):
        return np.cos(0.5 * np.pi * np.asarray(t, np.float64))

    @staticmethod
    def sigma(t):
        return np.sin(0.5 * np.pi * np.asarray(t, np.float64))


@dataclass
class NoiseVector:
    """Per-frame diffusion times with a clean-prefix structure."""

    t: np.ndarray          # [T] float32, t[i] == 0 for i < clean_prefix_len
    clean_prefix_len: int

    @property
    def num_frames(self) -> int:
        return len(self.t)

    def noisy_mask(self) -> np.ndarray:
        m = np.ones(self.num_frames, np.float32)
        m[:self.clean_prefix_len] = 0.0
        return m


def sample_noise_vector(t_frames: int, rng: np.random.Generator, p: float) -> NoiseVector:
    """Diffusion forcing with probability 1-p; otherwise clean-prefix mode
    with prefix length uniform over {ceil(T/2), ..., T-1}."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"prefix probability must lie in [0, 1], got {p}")
    prefix = 0
    if rng.uniform() < p:
        if t_frames < 2:
            raise ContractError(f"prefix mode needs T >= 2, got T={t_frames}")
        lo = -(-t_frames // 2)  # ceil(T/2)
        prefix = int(rng.integers(lo, t_frames))
    t = rng.uniform(T_EPS, 1.0, size=t_frames).astype(np.float32)
    t[:prefix] = 0.0
    return NoiseVector(t=t, clean_prefix_len=prefix)


def noise_frames(x0: np.ndarray, nv: NoiseVector, eps: np.ndarray) -> np.ndarray:
    """Per-frame affine mixing x_t = alpha(t_i) x0 + sigma(t_i) eps.

    x0, eps: [T, ...] with matching shapes; prefix frames pass through
    unchanged (alpha(0) = 1 and sigma(0) = 0 exactly).
    """
    if x0.shape != eps.shape:
        raise ContractError(f"eps shape {eps.shape} must match x0 {x0.shape}")
    bshape = (len(nv.t),) + (1,) * (x0.ndim - 1)
    a = NoiseSchedule.alpha(nv.t).reshape(bshape)
    s = NoiseSchedule.sigma(nv.t).reshape(bshape)
    return (a * x0.astype(np.float64) + s * eps.astype(np.float64)).astype(np.float32)


def loss(pred_eps: Tensor, eps: np.ndarray, nvs) -> Tensor:
    """MSE over non-prefix frames only; prefix frames contribute zero.

    pred_eps: [B, T, ...] (or [T, ...] with a single NoiseVector);
    nvs: NoiseVector or a sequence of them, one per batch row.
    """
    if isinstance(nvs, NoiseVector):
        nvs = [nvs]
        pred = pred_eps.reshape((1,) + pred_eps.shape)
        eps = eps.reshape((1,) + eps.shape)
    else:
        pred = pred_eps
    if pred.shape != eps.shape:
        raise ContractError(f"pred shape {pred.shape} must match eps {eps.shape}")
    mask_rows = np.stack([nv.noisy_mask() for nv in nvs])
    noisy_frames = float(mask_rows.sum())
    if noisy_frames == 0:
        raise ContractError("all frames are clean; nothing to train on")
    per_frame = int(np.prod(pred.shape[2:]))
    mask = mask_rows.reshape(mask_rows.shape + (1,) * (pred.ndim - 2))
    diff = pred - Tensor(eps)
    sq = mul(diff, diff)
    return scale(tsum(mul(sq, Tensor(mask))), 1.0 / (noisy_frames * per_frame))


def ddim_sample(denoise_fn, shape, steps: int, rng: np.random.Generator,
                return_trace: bool = False):
    """Deterministic DDIM from t=T_MAX down to t=0 for one frame.

    denoise_fn(x_t float32 [shape], t float) -> eps_hat [shape]. Updates are
    computed in float64; the returned clean frame is float32.
    """
    if steps < 1:
        raise ContractError(f"need at least one sampling step, got {steps}")
    ts = np.linspace(T_MAX, 0.0, steps + 1)
    x = rng.standard_normal(shape).astype(np.float32)
    trace = [x.copy()] if return_trace else None
    for s in range(steps):
        t_cur, t_next = ts[s], ts[s + 1]
        eps_hat = np.asarray(denoise_fn(x, float(t_cur)), np.float64)
        a_cur, s_cur = NoiseSchedule.alpha(t_cur), NoiseSchedule.sigma(t_cur)
        a_next, s_next = NoiseSchedule.alpha(t_next), NoiseSchedule.sigma(t_next)
        x0_hat = (x.astype(np.float64) - s_cur * eps_hat) / a_cur
        x = (a_next * x0_hat + s_next * eps_hat).astype(np.float32)
        if return_trace:
            trace.append(x.copy())
    return (x, trace) if return_trace else x
