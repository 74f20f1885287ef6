"""Straight-line float64 reimplementation of the denoiser forward pass.

Independent oracle for the main network: plain loops, dense masked
attention, token-by-token SSM recurrences, no float32 casts and no shared
code with the graph path. Only suitable for tiny configs; used by tests to
cross-check the vectorized forward and as the function under finite
differences for gradient checks.
"""

from __future__ import annotations

import numpy as np


def _softplus(x):
    return np.logaddexp(0.0, x)


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _layernorm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _sin_features(values, dim, min_freq, max_freq):
    half = dim // 2
    freqs = np.exp(np.linspace(np.log(min_freq), np.log(max_freq), half))
    ang = np.asarray(values, np.float64)[..., None] * freqs
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros(feats.shape[:-1] + (1,))], axis=-1)
    return feats


def _modulation(cond_act, p, prefix):
    gamma = cond_act @ p[f"{prefix}.w_gamma"] + p[f"{prefix}.b_gamma"]
    beta = cond_act @ p[f"{prefix}.w_beta"] + p[f"{prefix}.b_beta"]
    alpha = cond_act @ p[f"{prefix}.w_alpha"] + p[f"{prefix}.b_alpha"]
    return gamma, beta, alpha


def _ssm_block_scan(tokens, p, prefix):
    """tokens [S, D] in scan order; returns [S, D]. Explicit recurrence."""
    s_len, dim = tokens.shape
    n = p[f"{prefix}.w_b"].shape[1]
    a = -np.exp(p[f"{prefix}.a_log"])
    h = np.zeros((dim, n))
    out = np.empty_like(tokens)
    for s in range(s_len):
        x = tokens[s]
        delta = _softplus(x @ p[f"{prefix}.w_delta"] + p[f"{prefix}.b_delta"])
        bvec = x @ p[f"{prefix}.w_b"]
        cvec = x @ p[f"{prefix}.w_c"]
        h = np.exp(delta * a)[:, None] * h + (delta * x)[:, None] * bvec[None, :]
        out[s] = h @ cvec + p[f"{prefix}.d_skip"] * x
    return out


def _dense_attention(x, p, prefix, heads, frame_of, k, mode, chunk):
    """x [L, D] tokens of one sequence; explicit per-head masked attention."""
    l_tokens, dim = x.shape
    hd = dim // heads
    q = x @ p[f"{prefix}.wq"]
    kk = x @ p[f"{prefix}.wk"]
    v = x @ p[f"{prefix}.wv"]
    out = np.zeros_like(x)
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(l_tokens):
            fi = frame_of[i]
            scores = np.full(l_tokens, -np.inf)
            for j in range(l_tokens):
                fj = frame_of[j]
                if mode == "window":
                    ok = fi - k <= fj <= fi
                elif mode == "full":
                    ok = fj <= fi
                else:  # chunked
                    ok = (fi // chunk) - 1 <= (fj // chunk) <= (fi // chunk)
                if ok:
                    scores[j] = (q[i, sl] @ kk[j, sl]) / np.sqrt(hd)
            e = np.exp(scores - scores.max())
            w = e / e.sum()
            out[i, sl] = w @ v[:, sl]
    return out @ p[f"{prefix}.wo"]


def reference_forward(params: dict[str, np.ndarray], cfg, noisy, t, actions,
                      frame_offset: int = 0) -> np.ndarray:
    """eps_hat in float64 for [B, T, hp, wp, C] inputs."""
    p = {k: np.asarray(v, np.float64) for k, v in params.items()}
    b, t_frames = noisy.shape[0], noisy.shape[1]
    side = cfg.tokens_per_side
    ps, ch, d = cfg.patch_size, cfg.channels, cfg.dim
    tpf = cfg.tokens_per_frame
    schedule = cfg.resolved_block_schedule()

    out = np.empty((b, t_frames, cfg.frame_size, cfg.frame_size, ch))
    frame_of = np.repeat(np.arange(t_frames), tpf)

    for bi in range(b):
        # patchify + positions
        tokens = np.empty((t_frames, tpf, d))
        for fi in range(t_frames):
            for hh in range(side):
                for ww in range(side):
                    patch = noisy[bi, fi, hh * ps:(hh + 1) * ps, ww * ps:(ww + 1) * ps, :]
                    tok = patch.astype(np.float64).reshape(-1) @ p["patch.w"] + p["patch.b"]
                    tok = tok + p["pos_spatial"][hh * side + ww]
                    tok = tok + _sin_features(fi + frame_offset, d, 1e-4, 1.0)
                    tokens[fi, hh * side + ww] = tok

        # conditioning per frame
        cond = np.empty((t_frames, d))
        for fi in range(t_frames):
            feats = _sin_features(float(t[bi, fi]), d, 1.0, 1000.0)
            nh = _silu(feats @ p["noise.w1"] + p["noise.b1"]) @ p["noise.w2"] + p["noise.b2"]
            if cfg.action_kind == "discrete":
                ah = p["act.table"][int(actions[bi, fi])]
            else:
                av = np.asarray(actions[bi, fi], np.float64)
                ah = _silu(av @ p["act.w1"] + p["act.b1"]) @ p["act.w2"] + p["act.b2"]
            cond[fi] = nh + ah
        cond_act = _silu(cond)

        x = tokens
        for li in range(cfg.layers):
            if cfg.use_ssm:
                gamma, beta, alpha = _modulation(cond_act, p, f"layers.{li}.mod_ssm")
                h = _layernorm(x) * (1 + gamma[:, None, :]) + beta[:, None, :]
                b_h, b_w = schedule[li]
                y = np.zeros_like(h)
                for bh0 in range(0, side, b_h):
                    for bw0 in range(0, side, b_w):
                        order = [(fi, hh, ww)
                                 for fi in range(t_frames)
                                 for hh in range(bh0, bh0 + b_h)
                                 for ww in range(bw0, bw0 + b_w)]
                        seq = np.stack([h[fi, hh * side + ww] for fi, hh, ww in order])
                        res = _ssm_block_scan(seq, p, f"layers.{li}.ssm")
                        for idx, (fi, hh, ww) in enumerate(order):
                            y[fi, hh * side + ww] = res[idx]
                x = x + alpha[:, None, :] * y

            gamma, beta, alpha = _modulation(cond_act, p, f"layers.{li}.mod_attn")
            h = _layernorm(x) * (1 + gamma[:, None, :]) + beta[:, None, :]
            y = _dense_attention(h.reshape(t_frames * tpf, d), p, f"layers.{li}.attn",
                                 cfg.heads, frame_of, cfg.window, cfg.mask_mode,
                                 cfg.attn_chunk)
            x = x + alpha[:, None, :] * y.reshape(t_frames, tpf, d)

            gamma, beta, alpha = _modulation(cond_act, p, f"layers.{li}.mod_mlp")
            h = _layernorm(x) * (1 + gamma[:, None, :]) + beta[:, None, :]
            y = _silu(h @ p[f"layers.{li}.mlp.w1"] + p[f"layers.{li}.mlp.b1"])
            y = y @ p[f"layers.{li}.mlp.w2"] + p[f"layers.{li}.mlp.b2"]
            x = x + alpha[:, None, :] * y

        x = _layernorm(x)
        eps_tok = x @ p["head.w"] + p["head.b"]
        for fi in range(t_frames):
            for hh in range(side):
                for ww in range(side):
                    patch = eps_tok[fi, hh * side + ww].reshape(ps, ps, ch)
                    out[bi, fi, hh * ps:(hh + 1) * ps, ww * ps:(ww + 1) * ps, :] = patch
    return out
