"""Noise-level and action conditioning injected via adaptive normalization.

Each frame gets one condition vector: a sinusoidal-feature MLP embedding of
its diffusion time plus an embedding of its action (learned table for
discrete actions, small MLP for continuous ones). The vector modulates every
sub-block through zero-initialized scale/shift/gate projections, so at init
each sub-block is exactly the identity plus nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, index_select, layernorm, matmul, mul, reshape, silu


def sinusoidal_features(values: np.ndarray, dim: int, min_freq: float = 1.0,
                        max_freq: float = 1000.0) -> np.ndarray:
    """[sin, cos] features of scalar inputs at log-spaced frequencies.

    values: any shape; returns shape + (dim,), float32. Noise levels use the
    default band; integer frame indices use a low band (min_freq ~1e-4) so
    arbitrarily long rollouts stay distinguishable.
    """
    half = dim // 2
    freqs = np.exp(np.linspace(np.log(min_freq), np.log(max_freq), half))
    ang = np.asarray(values, np.float64)[..., None] * freqs
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros(feats.shape[:-1] + (1,))], axis=-1)
    return feats.astype(np.float32)


@dataclass
class NoiseEmbedParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def init_noise_embed(rng: np.random.Generator, dim: int) -> NoiseEmbedParams:
    std = dim ** -0.5
    return NoiseEmbedParams(
        w1=Tensor(rng.standard_normal((dim, dim)) * std, requires_grad=True),
        b1=Tensor(np.zeros(dim), requires_grad=True),
        w2=Tensor(rng.standard_normal((dim, dim)) * std, requires_grad=True),
        b2=Tensor(np.zeros(dim), requires_grad=True),
    )


def embed_noise_level(t: np.ndarray, p: NoiseEmbedParams) -> Tensor:
    """Sinusoidal features of t in [0, 1] through a 2-layer MLP.

    t: scalar or any shape; returns t.shape + (D,).
    """
    dim = p.w1.shape[0]
    t = np.asarray(t, np.float32)
    feats = Tensor(sinusoidal_features(t, dim).reshape(-1, dim))
    h = silu(add(matmul(feats, p.w1), p.b1))
    out = add(matmul(h, p.w2), p.b2)
    return reshape(out, t.shape + (dim,))


@dataclass
class ActionEmbedParams:
    kind: str                      # "discrete" | "continuous"
    table: Tensor | None = None    # [num_actions, D]
    w1: Tensor | None = None       # continuous MLP
    b1: Tensor | None = None
    w2: Tensor | None = None
    b2: Tensor | None = None

    def tensors(self):
        if self.kind == "discrete":
            return {"table": self.table}
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def init_action_embed(rng: np.random.Generator, dim: int, kind: str,
                      num_actions: int = 0, action_dim: int = 0) -> ActionEmbedParams:
    if kind == "discrete":
        return ActionEmbedParams(
            kind=kind,
            table=Tensor(rng.standard_normal((num_actions, dim)) * 0.02, requires_grad=True))
    if kind == "continuous":
        std = action_dim ** -0.5
        return ActionEmbedParams(
            kind=kind,
            w1=Tensor(rng.standard_normal((action_dim, dim)) * std, requires_grad=True),
            b1=Tensor(np.zeros(dim), requires_grad=True),
            w2=Tensor(rng.standard_normal((dim, dim)) * dim ** -0.5, requires_grad=True),
            b2=Tensor(np.zeros(dim), requires_grad=True))
    raise ValueError(f"unknown action kind {kind!r}")


def embed_actions(actions: np.ndarray, p: ActionEmbedParams) -> Tensor:
    """Discrete ids [..] -> table rows; continuous vectors [.., adim] -> MLP."""
    if p.kind == "discrete":
        ids = np.asarray(actions, np.int64)
        flat = index_select(p.table, ids.reshape(-1), axis=0)
        return reshape(flat, ids.shape + (p.table.shape[1],))
    x = Tensor(np.asarray(actions, np.float32))
    h = silu(add(matmul(x, p.w1), p.b1))
    return add(matmul(h, p.w2), p.b2)


def condition_vector(t: np.ndarray, actions: np.ndarray, noise_p: NoiseEmbedParams,
                     act_p: ActionEmbedParams) -> Tensor:
    """Per-frame conditioning: noise-level embedding + action embedding."""
    return add(embed_noise_level(t, noise_p), embed_actions(actions, act_p))


@dataclass
class ModulationParams:
    """Zero-initialized scale/shift/gate projections for one sub-block."""

    w_gamma: Tensor
    b_gamma: Tensor
    w_beta: Tensor
    b_beta: Tensor
    w_alpha: Tensor
    b_alpha: Tensor

    def tensors(self):
        return {"w_gamma": self.w_gamma, "b_gamma": self.b_gamma,
                "w_beta": self.w_beta, "b_beta": self.b_beta,
                "w_alpha": self.w_alpha, "b_alpha": self.b_alpha}


def init_modulation(dim: int) -> ModulationParams:
    zero_mat = lambda: Tensor(np.zeros((dim, dim), np.float32), requires_grad=True)
    zero_vec = lambda: Tensor(np.zeros(dim, np.float32), requires_grad=True)
    return ModulationParams(w_gamma=zero_mat(), b_gamma=zero_vec(),
                            w_beta=zero_mat(), b_beta=zero_vec(),
                            w_alpha=zero_mat(), b_alpha=zero_vec())


def adaln_modulate(x: Tensor, cond: Tensor, mod: ModulationParams):
    """(layernorm(x) * (1 + gamma) + beta, alpha) for a frame-wise cond.

    x: [.., T, tpf, D]; cond: [.., T, D], broadcast over the frame's tokens
    and never across frames. The caller wires the residual:
    x + alpha * f(modulated).
    """
    c = silu(cond)
    expand = cond.shape[:-1] + (1, cond.shape[-1])
    gamma = reshape(add(matmul(c, mod.w_gamma), mod.b_gamma), expand)
    beta = reshape(add(matmul(c, mod.w_beta), mod.b_beta), expand)
    alpha = reshape(add(matmul(c, mod.w_alpha), mod.b_alpha), expand)
    h = add(mul(layernorm(x), add(gamma, Tensor(np.float32(1.0)))), beta)
    return h, alpha
