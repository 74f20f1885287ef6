"""Frame-local attention: bidirectional inside a frame, causal across frames.

Token (i, p) may attend token (j, q) iff frame j lies in [i - k, i]. Three
mask modes exist:
  * "window"  - the plain frame window above (default);
  * "chunked" - frames grouped in chunks of `chunk`; bidirectional within a
    chunk, plus full attention to the previous chunk (effective window 2c);
  * "full"    - causal over all previous frames (baseline only).

attend() is the dense reference path. attend_windowed() computes the same
thing in O(T) by gathering only the visible key frames per query frame and
is what the network uses during training. attend_streaming() serves one new
frame at a time from a rolling KVCache.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (ContractError, DimensionError, Tensor, index_select,
                     make_node, matmul, reshape, scale, softmax_lastdim,
                     swapaxes)

NEG_INF = np.float32(-np.inf)


@dataclass
class AttnWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    def tensors(self):
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


def init_attn_weights(rng: np.random.Generator, dim: int, heads: int) -> AttnWeights:
    if dim % heads:
        raise DimensionError(f"heads {heads} must divide model dim {dim}")
    std = dim ** -0.5
    mk = lambda: Tensor(rng.standard_normal((dim, dim)) * std, requires_grad=True)
    return AttnWeights(wq=mk(), wk=mk(), wv=mk(), wo=mk(), heads=heads)


def visible_frames(i: int, mode: str, k: int, chunk: int):
    """Inclusive frame range [lo, hi] visible to queries of frame i in training."""
    if mode == "window":
        return max(0, i - k), i
    if mode == "chunked":
        start = (i // chunk) * chunk
        return max(0, start - chunk), start + chunk - 1
    if mode == "full":
        return 0, i
    raise ValueError(f"unknown mask mode {mode!r}")


def streaming_visible(i: int, mode: str, k: int, chunk: int):
    """Visible *previous* frames [lo, i-1] when generating frame i."""
    lo, _ = visible_frames(i, mode, k, chunk)
    return lo, i - 1


def cache_capacity(mode: str, k: int, chunk: int):
    """Frames the rolling cache must hold; None means unbounded (baseline)."""
    if mode == "window":
        return k
    if mode == "chunked":
        return 2 * chunk - 1
    if mode == "full":
        return None
    raise ValueError(f"unknown mask mode {mode!r}")


def build_mask(t_frames: int, tokens_per_frame: int, k: int,
               mode: str = "window", chunk: int = 5) -> np.ndarray:
    """Additive (0 / -inf) token-level mask of extent [T*tpf, T*tpf]."""
    if k < 0:
        raise ContractError(f"window k must be >= 0, got {k}")
    i = np.arange(t_frames)
    lo = np.empty(t_frames, np.int64)
    hi = np.empty(t_frames, np.int64)
    for fi in range(t_frames):
        lo[fi], hi[fi] = visible_frames(fi, mode, k, chunk)
    j = i[None, :]
    allowed = (j >= lo[:, None]) & (j <= hi[:, None]) & (j < t_frames)
    allowed = np.repeat(np.repeat(allowed, tokens_per_frame, 0), tokens_per_frame, 1)
    return np.where(allowed, np.float32(0.0), NEG_INF)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [.., L, D] -> [.., heads, L, hd]
    lead = x.shape[:-2]
    l, d = x.shape[-2], x.shape[-1]
    hd = d // heads
    return swapaxes(reshape(x, lead + (l, heads, hd)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    # [.., heads, L, hd] -> [.., L, D]
    lead = x.shape[:-3]
    h, l, hd = x.shape[-3], x.shape[-2], x.shape[-1]
    return reshape(swapaxes(x, -2, -3), lead + (l, h * hd))


def attend(x: Tensor, weights: AttnWeights, mask: np.ndarray) -> Tensor:
    """Dense multi-head attention over all tokens with an additive mask.

    x: [B, T, tpf, D]; mask: [T*tpf, T*tpf]. Reference path; O(T^2).
    """
    b, t, tpf, d = x.shape
    if d % weights.heads:
        raise DimensionError(f"heads {weights.heads} must divide model dim {d}")
    hd = d // weights.heads
    flat = reshape(x, (b, t * tpf, d))
    q = _split_heads(matmul(flat, weights.wq), weights.heads)
    kk = _split_heads(matmul(flat, weights.wk), weights.heads)
    v = _split_heads(matmul(flat, weights.wv), weights.heads)
    scores = scale(matmul(q, swapaxes(kk, -1, -2)), hd ** -0.5)
    attnp = softmax_lastdim(scores, additive_mask=mask)
    out = matmul(_merge_heads(matmul(attnp, v)), weights.wo)
    return reshape(out, (b, t, tpf, d))


def gather_frame_windows(x: Tensor, k: int) -> Tensor:
    """[B, T, tpf, D] -> [B, T, k+1, tpf, D]; slot j holds frame i-k+j (zeros
    before the sequence start). Backward scatters via shifted slice adds."""
    b, t, tpf, d = x.shape
    out = np.zeros((b, t, k + 1, tpf, d), np.float32)
    for j in range(k + 1):
        back = k - j
        if back < t:
            out[:, back:, j] = x.data[:, :t - back]

    def backward(g):
        acc = np.zeros_like(x.data)
        for j in range(k + 1):
            back = k - j
            if back < t:
                acc[:, :t - back] += g[:, back:, j]
        x._accumulate(acc)

    return make_node(out, (x,), backward)


def window_validity_mask(t_frames: int, tokens_per_frame: int, k: int) -> np.ndarray:
    """Additive mask [T, 1, 1, (k+1)*tpf]; -inf where slot j precedes frame 0."""
    i = np.arange(t_frames)[:, None]
    j = np.arange(k + 1)[None, :]
    valid = (i - k + j) >= 0
    valid = np.repeat(valid, tokens_per_frame, axis=1).reshape(t_frames, 1, 1, -1)
    return np.where(valid, np.float32(0.0), NEG_INF)


def attend_windowed(x: Tensor, weights: AttnWeights, k: int,
                    mode: str = "window", chunk: int = 5) -> Tensor:
    """Frame-local attention in O(T): per query frame, gather the k+1 visible
    key frames and attend inside that strip. Matches attend() with the
    corresponding build_mask()."""
    b, t, tpf, d = x.shape
    heads = weights.heads
    hd = d // heads
    flat = reshape(x, (b, t * tpf, d))
    q_all = reshape(matmul(flat, weights.wq), (b, t, tpf, d))
    k_all = reshape(matmul(flat, weights.wk), (b, t, tpf, d))
    v_all = reshape(matmul(flat, weights.wv), (b, t, tpf, d))

    if mode == "window":
        win = k + 1
        k_win = gather_frame_windows(k_all, k)
        v_win = gather_frame_windows(v_all, k)
        add_mask = window_validity_mask(t, tpf, k)
    elif mode == "chunked":
        win = 2 * chunk
        idx = np.empty((t, win), np.int64)
        valid = np.empty((t, win), bool)
        for i in range(t):
            start = (i // chunk) * chunk - chunk
            cols = start + np.arange(win)
            idx[i] = np.clip(cols, 0, t - 1)
            valid[i] = (cols >= 0) & (cols < t)
        k_win = reshape(index_select(k_all, idx.reshape(-1), axis=1), (b, t, win, tpf, d))
        v_win = reshape(index_select(v_all, idx.reshape(-1), axis=1), (b, t, win, tpf, d))
        add_mask = np.where(np.repeat(valid, tpf, 1).reshape(t, 1, 1, win * tpf),
                            np.float32(0.0), NEG_INF)
    else:
        raise ValueError(f"attend_windowed does not support mode {mode!r}")

    # [B, T, heads, tpf, hd] queries against [B, T, heads, win*tpf, hd] keys
    q = swapaxes(reshape(q_all, (b, t, tpf, heads, hd)), -2, -3)
    k_win = swapaxes(reshape(k_win, (b, t, win * tpf, heads, hd)), -2, -3)
    v_win = swapaxes(reshape(v_win, (b, t, win * tpf, heads, hd)), -2, -3)
    scores = scale(matmul(q, swapaxes(k_win, -1, -2)), hd ** -0.5)
    attnp = softmax_lastdim(scores, additive_mask=add_mask)
    out = reshape(swapaxes(matmul(attnp, v_win), -2, -3), (b, t * tpf, d))
    return reshape(matmul(out, weights.wo), (b, t, tpf, d))


class KVCache:
    """Rolling per-layer cache of the last `capacity` frames' keys/values.

    FIFO by frame; buffers are allocated at capacity up front so the byte
    size never changes. capacity None keeps everything (full-causal
    baseline), growing without bound.
    """

    def __init__(self, capacity: int | None, tokens_per_frame: int, dim: int):
        self.capacity = capacity
        self.tokens_per_frame = tokens_per_frame
        self.dim = dim
        self.frames_seen = 0
        if capacity is None:
            self._k_list: list[np.ndarray] = []
            self._v_list: list[np.ndarray] = []
        else:
            self.k_buf = np.zeros((max(capacity, 1), tokens_per_frame, dim), np.float32)
            self.v_buf = np.zeros((max(capacity, 1), tokens_per_frame, dim), np.float32)

    def append(self, k_frame: np.ndarray, v_frame: np.ndarray):
        if k_frame.shape != (self.tokens_per_frame, self.dim):
            raise ContractError(
                f"cache expects frames of shape {(self.tokens_per_frame, self.dim)}, "
                f"got {k_frame.shape}")
        if self.capacity is None:
            self._k_list.append(k_frame.astype(np.float32))
            self._v_list.append(v_frame.astype(np.float32))
        elif self.capacity > 0:
            slot = self.frames_seen % self.capacity
            self.k_buf[slot] = k_frame
            self.v_buf[slot] = v_frame
        self.frames_seen += 1

    def get_frames(self, lo: int, hi: int):
        """Stacked (K, V) for cached frames lo..hi inclusive, oldest first."""
        lo = max(lo, 0)
        if self.capacity is not None:
            lo = max(lo, self.frames_seen - self.capacity)
        hi = min(hi, self.frames_seen - 1)
        if hi < lo:
            return (np.zeros((0, self.tokens_per_frame, self.dim), np.float32),) * 2
        ids = np.arange(lo, hi + 1)
        if self.capacity is None:
            return (np.stack([self._k_list[i] for i in ids]),
                    np.stack([self._v_list[i] for i in ids]))
        slots = ids % self.capacity
        return self.k_buf[slots], self.v_buf[slots]

    def state_arrays(self) -> dict[str, np.ndarray]:
        if self.capacity is None:
            kb = np.stack(self._k_list) if self._k_list else np.zeros(
                (0, self.tokens_per_frame, self.dim), np.float32)
            vb = np.stack(self._v_list) if self._v_list else kb.copy()
            return {"k": kb, "v": vb}
        return {"k": self.k_buf, "v": self.v_buf}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], frames_seen: int):
        if self.capacity is None:
            self._k_list = [a.copy() for a in arrays["k"]]
            self._v_list = [a.copy() for a in arrays["v"]]
        else:
            self.k_buf = arrays["k"].astype(np.float32).copy()
            self.v_buf = arrays["v"].astype(np.float32).copy()
        self.frames_seen = frames_seen


def attend_streaming(x_frame: np.ndarray, cache: KVCache, weights: AttnWeights,
                     frame_index: int, k: int, mode: str = "window",
                     chunk: int = 5, commit: bool = True):
    """Attention for one new frame against the cache; equals attend() on the
    visible history restricted to the new frame's queries.

    x_frame: [tpf, D]. Returns y [tpf, D]; appends the frame's K/V to the
    cache when commit is set.
    """
    tpf, d = x_frame.shape
    if tpf != cache.tokens_per_frame or d != cache.dim:
        raise ContractError(
            f"frame shape {x_frame.shape} does not match cache "
            f"({cache.tokens_per_frame}, {cache.dim})")
    heads = weights.heads
    hd = d // heads
    x64 = x_frame.astype(np.float64)
    q = (x64 @ weights.wq.data.astype(np.float64)).astype(np.float32)
    k_new = (x64 @ weights.wk.data.astype(np.float64)).astype(np.float32)
    v_new = (x64 @ weights.wv.data.astype(np.float64)).astype(np.float32)

    lo, hi = streaming_visible(frame_index, mode, k, chunk)
    k_hist, v_hist = cache.get_frames(lo, hi)
    keys = np.concatenate([k_hist.reshape(-1, d), k_new], axis=0)
    vals = np.concatenate([v_hist.reshape(-1, d), v_new], axis=0)

    # cast structure mirrors the graph ops (f32 between every stage) so
    # streaming output matches batch attend() to rounding noise
    qh = q.reshape(tpf, heads, hd).transpose(1, 0, 2).astype(np.float64)
    kh = keys.reshape(-1, heads, hd).transpose(1, 0, 2).astype(np.float64)
    vh = vals.reshape(-1, heads, hd).transpose(1, 0, 2).astype(np.float64)
    scores = (qh @ kh.transpose(0, 2, 1)).astype(np.float32) * np.float32(hd ** -0.5)
    z = scores.astype(np.float64)
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    attnp = (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)
    ctx = (attnp.astype(np.float64) @ vh).astype(np.float32)
    ctx = ctx.transpose(1, 0, 2).reshape(tpf, d)
    y = (ctx.astype(np.float64) @ weights.wo.data.astype(np.float64)).astype(np.float32)

    if commit:
        cache.append(k_new, v_new)
    return y
