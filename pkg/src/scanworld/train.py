"""Training loop: diffusion forcing with the clean-prefix scheme.

Every step samples one NoiseVector per sequence (so prefixes are per-video,
not per-frame), noises the tail frames, and minimizes the masked
eps-prediction MSE with Adam under global-norm gradient clipping. fit()
supports a two-stage length curriculum, writes line-delimited JSON metrics,
and emits checkpoints on a fixed cadence. Identical seeds and data give
bit-identical metric traces and checkpoint bytes.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import diffusion, serialize
from .mazeworld import Dataset
from .net import Model, ModelConfig
from .tensor import ContractError, Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4
    seq_len: int = 64
    lr: float = 6e-4
    warmup_steps: int = 200
    total_steps: int = 2000
    prefix_prob: float = 0.5
    seed: int = 0
    ckpt_every: int = 1000
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    lr_min_ratio: float = 0.1
    curriculum: list | None = None   # [{"seq_len": T, "steps": N}, ...]

    def __post_init__(self):
        if self.seq_len < 2:
            raise ContractError(f"seq_len must be >= 2, got {self.seq_len}")
        if not 0.0 <= self.prefix_prob <= 1.0:
            raise ContractError(f"prefix_prob must lie in [0, 1], got {self.prefix_prob}")

    def stages(self):
        if self.curriculum:
            return [(int(s["seq_len"]), int(s["steps"])) for s in self.curriculum]
        return [(self.seq_len, self.total_steps)]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Adam:
    """Adam with decoupled weight decay; state mirrors parameter shapes."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.95, weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2 = beta1, beta2
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, lr: float, grad_scale: float = 1.0, eps: float = 1e-8):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1 - b1 ** self.step_count
        bc2 = 1 - b2 ** self.step_count
        for k, t in self.params.items():
            g = t.grad * np.float32(grad_scale)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + eps)
            if self.weight_decay:
                update = update + self.weight_decay * t.data
            t.data[...] = t.data - np.float32(lr) * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        out["step_count"] = np.array([self.step_count], np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.step_count = int(arrays["step_count"][0])
        for k in self.m:
            self.m[k] = arrays[f"m/{k}"].astype(np.float32).copy()
            self.v[k] = arrays[f"v/{k}"].astype(np.float32).copy()


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if total <= cfg.warmup_steps:
        return cfg.lr
    frac = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
    floor = cfg.lr * cfg.lr_min_ratio
    return floor + (cfg.lr - floor) * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0)))


def grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for t in params.values():
        g = t._grad
        if g is not None:
            total += float(np.sum(g.astype(np.float64) ** 2))
    return math.sqrt(total)


def train_step(model: Model, optimizer: Adam, batch, cfg: TrainConfig,
               rng: np.random.Generator, lr: float) -> dict:
    """One optimization step; returns {'loss', 'grad_norm'} scalars."""
    frames, actions = batch
    b, t_frames = frames.shape[0], frames.shape[1]
    if np.shape(actions)[:2] != (b, t_frames):
        raise ContractError(
            f"actions {np.shape(actions)} do not align with frames {frames.shape[:2]}")
    nvs = [diffusion.sample_noise_vector(t_frames, rng, cfg.prefix_prob) for _ in range(b)]
    eps = rng.standard_normal(frames.shape).astype(np.float32)
    noisy = np.stack([diffusion.noise_frames(frames[i], nvs[i], eps[i]) for i in range(b)])
    t_mat = np.stack([nv.t for nv in nvs])

    for t in model.params.values():
        t.zero_grad()
    pred = model.forward(noisy, t_mat, actions)
    loss = diffusion.loss(pred, eps, nvs)
    loss_val = loss.item()
    if not math.isfinite(loss_val):
        raise TrainingDiverged(
            f"non-finite loss {loss_val} at optimizer step {optimizer.step_count + 1} "
            f"(train seed {cfg.seed})")
    loss.backward()
    norm = grad_norm(model.params)
    scale = 1.0 if norm <= cfg.grad_clip or norm == 0 else cfg.grad_clip / norm
    optimizer.step(lr, grad_scale=scale)
    return {"loss": loss_val, "grad_norm": norm}


def fit(model: Model, dataset: Dataset, cfg: TrainConfig, out_dir: str,
        resume: str | None = None, log_every: int = 25) -> list[str]:
    """Run the stages, stream metrics to metrics.jsonl, emit checkpoints.

    Returns the list of checkpoint paths (last entry is the final model).
    """
    os.makedirs(out_dir, exist_ok=True)
    optimizer = Adam(model.params, cfg.beta1, cfg.beta2, cfg.weight_decay)
    start_step = 0
    if resume:
        _, params, opt_arrays, meta = serialize.load_checkpoint(resume)
        model.load_param_arrays(params)
        if opt_arrays:
            optimizer.load_state_arrays(opt_arrays)
        start_step = int(meta.get("step", 0))

    rng = np.random.default_rng(cfg.seed)
    stages = cfg.stages()
    total = sum(steps for _, steps in stages)
    paths: list[str] = []
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    t0 = time.perf_counter()
    step = start_step

    def save(tag=None):
        name = tag or f"ckpt_{step:07d}.swb"
        path = os.path.join(out_dir, name)
        serialize.save_checkpoint(path, model, step=step,
                                  optimizer_arrays=optimizer.state_arrays(),
                                  extra_meta={"train_config": asdict(cfg)})
        paths.append(path)
        return path

    boundaries = np.cumsum([steps for _, steps in stages])
    with open(metrics_path, "a") as metrics:
        if total == 0:
            save("model_final.swb")
            return paths
        while step < total:
            stage_idx = int(np.searchsorted(boundaries, step, side="right"))
            seq_len = stages[stage_idx][0]
            lr = lr_at(step, total, cfg)
            batch = dataset.sample_batch(rng, cfg.batch_size, seq_len)
            out = train_step(model, optimizer, batch, cfg, rng, lr)
            step += 1
            if step % log_every == 0 or step == 1 or step == total:
                rec = {"step": step, "stage": stage_idx, "seq_len": seq_len,
                       "loss": round(out["loss"], 6),
                       "grad_norm": round(out["grad_norm"], 6),
                       "lr": lr, "wall_time": round(time.perf_counter() - t0, 3)}
                metrics.write(json.dumps(rec) + "\n")
                metrics.flush()
            if cfg.ckpt_every and step % cfg.ckpt_every == 0 and step < total:
                save()
            if step in boundaries[:-1]:
                save(f"stage_{stage_idx}_final.swb")
        save("model_final.swb")
    return paths


# --- wall-time benchmarks used by the training-cost scaling criterion ---


def time_train_step(cfg: ModelConfig, t_frames: int, batch: int, reps: int = 3,
                    seed: int = 0) -> float:
    """Median seconds per optimization step on synthetic batches."""
    model = Model(cfg, seed=seed)
    tc = TrainConfig(batch_size=batch, seq_len=t_frames, warmup_steps=0,
                     total_steps=reps, ckpt_every=0)
    optimizer = Adam(model.params, tc.beta1, tc.beta2, tc.weight_decay)
    rng = np.random.default_rng(seed)
    shape = (batch, t_frames, cfg.frame_size, cfg.frame_size, cfg.channels)
    frames = rng.uniform(-1, 1, shape).astype(np.float32)
    actions = rng.integers(0, cfg.num_actions, (batch, t_frames))
    times = []
    for r in range(reps + 1):
        t0 = time.perf_counter()
        train_step(model, optimizer, (frames, actions), tc, rng, lr=1e-4)
        if r > 0:  # first rep warms caches
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def time_full_attention_layer(dim: int, heads: int, tokens_per_frame: int,
                              t_frames: int, batch: int, reps: int = 3,
                              seed: int = 0) -> float:
    """Median seconds for forward+backward of one full-causal attention layer."""
    from . import attn as attn_mod
    from .tensor import tsum

    rng = np.random.default_rng(seed)
    w = attn_mod.init_attn_weights(rng, dim, heads)
    mask = attn_mod.build_mask(t_frames, tokens_per_frame, k=0, mode="full")
    x = rng.standard_normal((batch, t_frames, tokens_per_frame, dim)).astype(np.float32)
    times = []
    for r in range(reps + 1):
        for t in w.tensors().values():
            t.zero_grad()
        t0 = time.perf_counter()
        out = attn_mod.attend(Tensor(x, requires_grad=True), w, mask)
        tsum(out).backward()
        if r > 0:
            times.append(time.perf_counter() - t0)
    return float(np.median(times))
