"""Full denoiser: patchify -> hybrid blocks -> unpatchify.

Each block applies, in order, a block-wise SSM scan, frame-local attention,
and an MLP, every sub-block wrapped in AdaLN modulation with a residual
gate. Across frames the network is strictly causal: the SSM scans run
spatial-major/time-minor, attention is masked to a window of previous
frames, and conditioning is per frame.

Two forward paths share the same weights: forward() processes whole clips
for training, forward_frame() advances one frame of a streaming rollout
against fixed-size SSM states and rolling KV caches.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import attn as attn_mod
from . import cond as cond_mod
from . import ssm as ssm_mod
from .scanorder import BlockScanConfig, ConfigurationError, build_permutation, gather, scatter
from .tensor import Tensor, add, layernorm, matmul, mul, no_grad, reshape, silu, swapaxes


@dataclass
class ModelConfig:
    frame_size: int = 16
    channels: int = 3
    patch_size: int = 4
    dim: int = 64
    layers: int = 3
    heads: int = 2
    ssm_state: int = 16
    block_schedule: list | None = None   # per-layer [b_h, b_w]; None = default cycle
    window: int = 10                     # attention window k in frames
    mask_mode: str = "window"            # window | chunked | full
    attn_chunk: int = 5
    use_ssm: bool = True
    scan_chunk: int = 16
    action_kind: str = "discrete"
    num_actions: int = 4
    action_dim: int = 0
    mlp_ratio: int = 4
    sample_steps: int = 20
    schedule: str = "cosine"

    def __post_init__(self):
        if self.frame_size % self.patch_size:
            raise ConfigurationError(
                f"patch size {self.patch_size} must divide frame size {self.frame_size}")
        if self.dim % self.heads:
            raise ConfigurationError(f"heads {self.heads} must divide dim {self.dim}")
        for b_h, b_w in self.resolved_block_schedule():
            side = self.tokens_per_side
            if side % b_h or side % b_w:
                raise ConfigurationError(
                    f"block ({b_h}, {b_w}) must divide the {side}x{side} token grid")

    @property
    def tokens_per_side(self) -> int:
        return self.frame_size // self.patch_size

    @property
    def tokens_per_frame(self) -> int:
        return self.tokens_per_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def resolved_block_schedule(self):
        if self.block_schedule is not None:
            return [tuple(b) for b in self.block_schedule]
        side = self.tokens_per_side
        cycle = [(side, side), (max(1, side // 2), max(1, side // 2)), (1, 1)]
        return [cycle[i % len(cycle)] for i in range(self.layers)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, s: str) -> "ModelConfig":
        return cls.from_dict(json.loads(s))


@dataclass
class LayerParams:
    ssm: ssm_mod.SSMParams | None
    attn: attn_mod.AttnWeights
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    mod_ssm: cond_mod.ModulationParams | None
    mod_attn: cond_mod.ModulationParams
    mod_mlp: cond_mod.ModulationParams


def frame_index_features(indices, dim: int) -> np.ndarray:
    """Sinusoidal features of absolute frame indices (low-frequency band)."""
    return cond_mod.sinusoidal_features(np.asarray(indices, np.float64), dim,
                                        min_freq=1e-4, max_freq=1.0)


class Model:
    """Denoiser eps_theta(x_t, t, actions) plus its streaming form."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.dim
        pd = cfg.patch_dim

        self.patch_w = Tensor(rng.standard_normal((pd, d)) * pd ** -0.5, requires_grad=True)
        self.patch_b = Tensor(np.zeros(d), requires_grad=True)
        self.pos_spatial = Tensor(rng.standard_normal((cfg.tokens_per_frame, d)) * 0.02,
                                  requires_grad=True)
        self.noise_emb = cond_mod.init_noise_embed(rng, d)
        self.act_emb = cond_mod.init_action_embed(
            rng, d, cfg.action_kind, num_actions=cfg.num_actions, action_dim=cfg.action_dim)

        self.layers: list[LayerParams] = []
        hidden = cfg.mlp_ratio * d
        for _ in range(cfg.layers):
            self.layers.append(LayerParams(
                ssm=ssm_mod.init_ssm_params(rng, d, cfg.ssm_state) if cfg.use_ssm else None,
                attn=attn_mod.init_attn_weights(rng, d, cfg.heads),
                mlp_w1=Tensor(rng.standard_normal((d, hidden)) * d ** -0.5, requires_grad=True),
                mlp_b1=Tensor(np.zeros(hidden), requires_grad=True),
                mlp_w2=Tensor(rng.standard_normal((hidden, d)) * hidden ** -0.5,
                              requires_grad=True),
                mlp_b2=Tensor(np.zeros(d), requires_grad=True),
                mod_ssm=cond_mod.init_modulation(d) if cfg.use_ssm else None,
                mod_attn=cond_mod.init_modulation(d),
                mod_mlp=cond_mod.init_modulation(d),
            ))
        self.head_w = Tensor(np.zeros((d, pd), np.float32), requires_grad=True)
        self.head_b = Tensor(np.zeros(pd, np.float32), requires_grad=True)

        self.params: dict[str, Tensor] = {}
        self._register()
        self._perm_cache: dict = {}

    def _register(self):
        p = self.params
        p["patch.w"], p["patch.b"] = self.patch_w, self.patch_b
        p["pos_spatial"] = self.pos_spatial
        for k, v in self.noise_emb.tensors().items():
            p[f"noise.{k}"] = v
        for k, v in self.act_emb.tensors().items():
            p[f"act.{k}"] = v
        for i, lay in enumerate(self.layers):
            if lay.ssm is not None:
                for k, v in lay.ssm.tensors().items():
                    p[f"layers.{i}.ssm.{k}"] = v
            for k, v in lay.attn.tensors().items():
                p[f"layers.{i}.attn.{k}"] = v
            p[f"layers.{i}.mlp.w1"] = lay.mlp_w1
            p[f"layers.{i}.mlp.b1"] = lay.mlp_b1
            p[f"layers.{i}.mlp.w2"] = lay.mlp_w2
            p[f"layers.{i}.mlp.b2"] = lay.mlp_b2
            mods = {"mod_attn": lay.mod_attn, "mod_mlp": lay.mod_mlp}
            if lay.mod_ssm is not None:
                mods["mod_ssm"] = lay.mod_ssm
            for mname, mod in mods.items():
                for k, v in mod.tensors().items():
                    p[f"layers.{i}.{mname}.{k}"] = v
        p["head.w"], p["head.b"] = self.head_w, self.head_b

    def describe(self) -> dict:
        """Parameter counts, a pure function of the config."""
        per_layer: dict[str, int] = {}
        total = 0
        for name, t in self.params.items():
            total += t.size
            if name.startswith("layers.0."):
                part = name.split(".")[2]
                per_layer[part] = per_layer.get(part, 0) + t.size
        return {"total_params": int(total),
                "per_layer": {k: int(v) for k, v in sorted(per_layer.items())},
                "layers": self.cfg.layers,
                "dim": self.cfg.dim}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing {sorted(missing)[:4]} "
                           f"extra {sorted(extra)[:4]}")
        for name, t in self.params.items():
            if t.data.shape != arrays[name].shape:
                raise ConfigurationError(
                    f"param {name}: shape {arrays[name].shape} != {t.data.shape}")
            t.data[...] = arrays[name]

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    # --- shared pieces ---

    def _perm(self, b_h: int, b_w: int, t_frames: int):
        key = (b_h, b_w, t_frames)
        if key not in self._perm_cache:
            side = self.cfg.tokens_per_side
            self._perm_cache[key] = build_permutation(
                BlockScanConfig(b_h=b_h, b_w=b_w, H=side, W=side, T=t_frames))
        return self._perm_cache[key]

    def _patchify(self, frames: Tensor) -> Tensor:
        cfg = self.cfg
        b, t = frames.shape[0], frames.shape[1]
        side, ps, c = cfg.tokens_per_side, cfg.patch_size, cfg.channels
        x = reshape(frames, (b, t, side, ps, side, ps, c))
        x = swapaxes(x, 3, 4)
        x = reshape(x, (b, t, cfg.tokens_per_frame, cfg.patch_dim))
        return add(matmul(x, self.patch_w), self.patch_b)

    def _unpatchify(self, tokens: Tensor) -> Tensor:
        cfg = self.cfg
        b, t = tokens.shape[0], tokens.shape[1]
        side, ps, c = cfg.tokens_per_side, cfg.patch_size, cfg.channels
        x = reshape(tokens, (b, t, side, side, ps, ps, c))
        x = swapaxes(x, 3, 4)
        return reshape(x, (b, t, side * ps, side * ps, c))

    def _mlp(self, x: Tensor, lay: LayerParams) -> Tensor:
        h = silu(add(matmul(x, lay.mlp_w1), lay.mlp_b1))
        return add(matmul(h, lay.mlp_w2), lay.mlp_b2)

    # --- training-mode forward ---

    def forward(self, noisy: np.ndarray, t: np.ndarray, actions: np.ndarray,
                frame_offset: int = 0) -> Tensor:
        """eps_hat for a whole clip.

        noisy: [B, T, hp, wp, C]; t: [B, T] diffusion times; actions: [B, T]
        ids (or [B, T, adim]). Strictly causal across frames.
        """
        cfg = self.cfg
        b, t_frames = noisy.shape[0], noisy.shape[1]
        side = cfg.tokens_per_side
        x = self._patchify(Tensor(np.asarray(noisy, np.float32)))
        x = add(x, self.pos_spatial)
        fidx = frame_index_features(np.arange(t_frames) + frame_offset, cfg.dim)
        x = add(x, Tensor(fidx.reshape(t_frames, 1, cfg.dim)))
        c = cond_mod.condition_vector(np.asarray(t, np.float32), actions,
                                      self.noise_emb, self.act_emb)

        for li, lay in enumerate(self.layers):
            if lay.ssm is not None:
                h, gate = cond_mod.adaln_modulate(x, c, lay.mod_ssm)
                b_h, b_w = cfg.resolved_block_schedule()[li]
                perm = self._perm(b_h, b_w, t_frames)
                blocked = gather(reshape(h, (b, t_frames, side, side, cfg.dim)), perm)
                y, _ = ssm_mod.scan_chunked(blocked, lay.ssm, None, cfg.scan_chunk)
                y = reshape(scatter(y, perm), (b, t_frames, cfg.tokens_per_frame, cfg.dim))
                x = add(x, mul(gate, y))

            h, gate = cond_mod.adaln_modulate(x, c, lay.mod_attn)
            if cfg.mask_mode == "full":
                mask = attn_mod.build_mask(t_frames, cfg.tokens_per_frame, cfg.window,
                                           mode="full")
                y = attn_mod.attend(h, lay.attn, mask)
            else:
                y = attn_mod.attend_windowed(h, lay.attn, cfg.window,
                                             mode=cfg.mask_mode, chunk=cfg.attn_chunk)
            x = add(x, mul(gate, y))

            h, gate = cond_mod.adaln_modulate(x, c, lay.mod_mlp)
            x = add(x, mul(gate, self._mlp(h, lay)))

        x = layernorm(x)
        eps_tokens = add(matmul(x, self.head_w), self.head_b)
        return self._unpatchify(eps_tokens)

    # --- streaming forward ---

    def new_stream_state(self):
        """Fresh per-layer SSM states and KV caches for a streaming rollout."""
        cfg = self.cfg
        ssm_states, kv_caches = [], []
        cap = attn_mod.cache_capacity(cfg.mask_mode, cfg.window, cfg.attn_chunk)
        for li in range(cfg.layers):
            if cfg.use_ssm:
                b_h, b_w = cfg.resolved_block_schedule()[li]
                nb = (cfg.tokens_per_side // b_h) * (cfg.tokens_per_side // b_w)
                ssm_states.append(np.zeros((nb, cfg.dim, cfg.ssm_state), np.float32))
            else:
                ssm_states.append(np.zeros((0, cfg.dim, cfg.ssm_state), np.float32))
            kv_caches.append(attn_mod.KVCache(cap, cfg.tokens_per_frame, cfg.dim))
        return ssm_states, kv_caches

    def forward_frame(self, frame: np.ndarray, t: float, action, frame_index: int,
                      ssm_states: list, kv_caches: list, commit: bool) -> np.ndarray:
        """eps_hat for one frame against cached history.

        frame: [hp, wp, C]. When commit is set, SSM states are advanced in
        place and the frame's K/V enter the caches; otherwise all state is
        left untouched (used for intermediate denoising steps).
        """
        cfg = self.cfg
        side = cfg.tokens_per_side
        with no_grad():
            x = self._patchify(Tensor(np.asarray(frame, np.float32)[None, None]))
            x = add(x, self.pos_spatial)
            fidx = frame_index_features(np.array([frame_index]), cfg.dim)
            x = add(x, Tensor(fidx.reshape(1, 1, cfg.dim)))
            acts = np.array([[action]]) if cfg.action_kind == "discrete" \
                else np.asarray(action, np.float32).reshape(1, 1, -1)
            c = cond_mod.condition_vector(np.full((1, 1), t, np.float32), acts,
                                          self.noise_emb, self.act_emb)

            for li, lay in enumerate(self.layers):
                if lay.ssm is not None:
                    h, gate = cond_mod.adaln_modulate(x, c, lay.mod_ssm)
                    b_h, b_w = cfg.resolved_block_schedule()[li]
                    perm = self._perm(b_h, b_w, 1)
                    nb = perm.config.num_blocks
                    tpb = perm.config.tokens_per_frame_block
                    flat = h.data.reshape(cfg.tokens_per_frame, cfg.dim)
                    blocked = flat[perm.gather_index].reshape(nb, tpb, cfg.dim)
                    y_blk, h_new = ssm_mod.scan_frame_streaming(ssm_states[li], blocked, lay.ssm)
                    if commit:
                        ssm_states[li][...] = h_new
                    y = y_blk.reshape(nb * tpb, cfg.dim)[perm.scatter_index]
                    y = Tensor(y.reshape(1, 1, cfg.tokens_per_frame, cfg.dim))
                    x = add(x, mul(gate, y))

                h, gate = cond_mod.adaln_modulate(x, c, lay.mod_attn)
                y = attn_mod.attend_streaming(
                    h.data.reshape(cfg.tokens_per_frame, cfg.dim), kv_caches[li], lay.attn,
                    frame_index=frame_index, k=cfg.window, mode=cfg.mask_mode,
                    chunk=cfg.attn_chunk, commit=commit)
                x = add(x, mul(gate, Tensor(y.reshape(1, 1, cfg.tokens_per_frame, cfg.dim))))

                h, gate = cond_mod.adaln_modulate(x, c, lay.mod_mlp)
                x = add(x, mul(gate, self._mlp(h, lay)))

            x = layernorm(x)
            eps_tokens = add(matmul(x, self.head_w), self.head_b)
            return self._unpatchify(eps_tokens).data[0, 0]
