"""Selective state-space layer scanned independently per spatial block.

Per token the layer projects its input x into a positive step size delta
(per channel), an input vector B and an output vector C (state dim N). The
per-channel decay is a learned constant A = -exp(a_log) < 0, discretized by
zero-order hold: abar = exp(delta * A) in (0, 1), bbar = delta * B. The
recurrence per channel d is

    h[d, :] = abar[d] * h[d, :] + bbar[d, :] * x[d]
    y[d]    = sum_n C[n] * h[d, n] + d_skip[d] * x[d]

Three execution paths share this math:
  * step / scan_sequential - plain numpy recurrence, used for streaming
    inference and as the oracle for the chunked path;
  * scan_chunked - training path; within-chunk work is batched matrix
    products, state is carried across chunks, and the backward pass
    recomputes per-chunk quantities from checkpointed chunk-boundary states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (ContractError, Tensor, add, make_node, matmul, neg,
                     softplus, texp)


@dataclass
class SSMParams:
    w_delta: Tensor   # [D, D]
    b_delta: Tensor   # [D]
    w_b: Tensor       # [D, N]
    w_c: Tensor       # [D, N]
    a_log: Tensor     # [D], A = -exp(a_log)
    d_skip: Tensor    # [D]

    @property
    def dim(self) -> int:
        return self.w_delta.shape[0]

    @property
    def state_dim(self) -> int:
        return self.w_b.shape[1]

    def tensors(self):
        return {"w_delta": self.w_delta, "b_delta": self.b_delta, "w_b": self.w_b,
                "w_c": self.w_c, "a_log": self.a_log, "d_skip": self.d_skip}


def init_ssm_params(rng: np.random.Generator, dim: int, state_dim: int,
                    dt_min: float = 1e-3, dt_max: float = 0.1) -> SSMParams:
    """Mamba-style init: log-uniform step sizes, decays spread over [1, 16]."""
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=dim))
    b_delta = np.log(np.expm1(dt))  # softplus inverse
    return SSMParams(
        w_delta=Tensor(rng.standard_normal((dim, dim)) * (dim ** -0.5) * 0.5, requires_grad=True),
        b_delta=Tensor(b_delta, requires_grad=True),
        w_b=Tensor(rng.standard_normal((dim, state_dim)) * (dim ** -0.5), requires_grad=True),
        w_c=Tensor(rng.standard_normal((dim, state_dim)) * (dim ** -0.5), requires_grad=True),
        a_log=Tensor(np.log(rng.uniform(1.0, 16.0, size=dim)), requires_grad=True),
        d_skip=Tensor(np.ones(dim), requires_grad=True),
    )


@dataclass
class SSMState:
    """Fixed-size recurrent state: one [channels, N] matrix per spatial block."""

    h: np.ndarray  # [num_blocks, channels, N] float32

    @classmethod
    def zeros(cls, num_blocks: int, dim: int, state_dim: int) -> "SSMState":
        return cls(h=np.zeros((num_blocks, dim, state_dim), dtype=np.float32))

    def copy(self) -> "SSMState":
        return SSMState(h=self.h.copy())


def discretize(delta: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Zero-order hold for the decay, first-order for the input matrix.

    delta [.., D] positive, a [D] negative, b [.., N].
    Returns abar [.., D] in (0, 1] and bbar [.., D, N] = delta outer b.
    """
    abar = np.exp(delta * a)
    bbar = delta[..., :, None] * b[..., None, :]
    return abar, bbar


def _project(x64: np.ndarray, p: SSMParams):
    """Per-token (delta, B, C) from x, in float64."""
    wd = p.w_delta.data.astype(np.float64)
    raw = x64 @ wd + p.b_delta.data.astype(np.float64)
    delta = np.log1p(np.exp(-np.abs(raw))) + np.maximum(raw, 0)  # softplus
    bm = x64 @ p.w_b.data.astype(np.float64)
    cm = x64 @ p.w_c.data.astype(np.float64)
    return delta, bm, cm


def step(state: SSMState, x_token: np.ndarray, params: SSMParams, block: int):
    """One recurrence step for a single token of one block. O(D*N)."""
    if not (0 <= block < state.h.shape[0]):
        raise ContractError(f"block id {block} out of range [0, {state.h.shape[0]})")
    x64 = np.asarray(x_token, dtype=np.float64)
    delta, bm, cm = _project(x64[None, :], params)
    a = -np.exp(params.a_log.data.astype(np.float64))
    abar, bbar = discretize(delta[0], a, bm[0])
    h = state.h[block].astype(np.float64)
    h = abar[:, None] * h + bbar * x64[:, None]
    y = h @ cm[0] + params.d_skip.data.astype(np.float64) * x64
    out = state.copy()
    out.h[block] = h.astype(np.float32)
    return y.astype(np.float32), out


def scan_sequential(x: np.ndarray, params: SSMParams, init: np.ndarray):
    """Fold the recurrence over a blocked sequence.

    x [.., S, D], init [.., D, N]; returns (y [.., S, D] f32, final f32).
    Loops over positions; leading dims stay vectorized. Internal math is
    float64, mirroring the chunked path.
    """
    x64 = np.asarray(x, dtype=np.float64)
    delta, bm, cm = _project(x64, params)
    a = -np.exp(params.a_log.data.astype(np.float64))
    d_skip = params.d_skip.data.astype(np.float64)
    abar = np.exp(delta * a)
    h = np.asarray(init, dtype=np.float64).copy()
    y = np.empty_like(x64)
    s_len = x64.shape[-2]
    for s in range(s_len):
        h *= abar[..., s, :, None]
        h += (delta[..., s, :, None] * x64[..., s, :, None]) * bm[..., s, None, :]
        y[..., s, :] = (h @ cm[..., s, :, None])[..., 0] + d_skip * x64[..., s, :]
    return y.astype(np.float32), h.astype(np.float32)


def scan_frame_streaming(h: np.ndarray, frame_tokens: np.ndarray, params: SSMParams):
    """Advance all blocks over one frame's tokens (streaming inference).

    h [num_blocks, D, N] f32, frame_tokens [num_blocks, tokens_per_block, D].
    Returns (y same shape as frame_tokens, h' f32). The caller decides
    whether to commit h'.
    """
    y, h_new = scan_sequential(frame_tokens, params, h)
    return y, h_new


def scan_chunked(x: Tensor, params: SSMParams, init: Tensor | None, chunk: int):
    """Differentiable chunked scan over [.., S, D] blocked sequences.

    Numerically equivalent to scan_sequential; intra-chunk work is batched,
    inter-chunk state is a short sequential pass. Returns (y: Tensor,
    final_state: ndarray). Gradients flow to x, every SSMParams tensor, and
    init; none flow through the returned final state.
    """
    if chunk < 1:
        raise ContractError(f"chunk must be >= 1, got {chunk}")
    delta = softplus(add(matmul(x, params.w_delta), params.b_delta))
    bm = matmul(x, params.w_b)
    cm = matmul(x, params.w_c)
    a = neg(texp(params.a_log))
    if init is None:
        lead = x.shape[:-2]
        init = Tensor(np.zeros(lead + (params.dim, params.state_dim), np.float32))
    return _scan_core(x, delta, bm, cm, a, params.d_skip, init, chunk)


def _scan_core(x: Tensor, delta: Tensor, bm: Tensor, cm: Tensor, a: Tensor,
               d_skip: Tensor, h0: Tensor, chunk: int):
    lead = x.shape[:-2]
    s_len, dim = x.shape[-2], x.shape[-1]
    n = bm.shape[-1]
    r = int(np.prod(lead)) if lead else 1
    c = int(chunk)
    nc = -(-s_len // c)
    pad = nc * c - s_len

    def fold(arr, width):
        out = arr.reshape((r, s_len, width)).astype(np.float64)
        if pad:
            out = np.concatenate([out, np.zeros((r, pad, width))], axis=1)
        return out.reshape(r, nc, c, width)

    x4 = fold(x.data, dim)
    dl4 = fold(delta.data, dim)
    b4 = fold(bm.data, n)
    c4 = fold(cm.data, n)
    a64 = a.data.astype(np.float64)
    dsk64 = d_skip.data.astype(np.float64)
    h_init = h0.data.reshape(r, dim, n).astype(np.float64)
    tril = np.tril(np.ones((c, c), dtype=bool))

    def chunk_pieces():
        lc = np.cumsum(dl4 * a64, axis=2)                       # [r, nc, c, D]
        e_end = np.exp(lc[:, :, -1, :])                         # [r, nc, D]
        f = np.exp(lc[:, :, -1:, :] - lc)                       # [r, nc, c, D]
        v = dl4 * x4                                            # [r, nc, c, D]
        g = np.matmul(c4, np.swapaxes(b4, -1, -2))              # [r, nc, c, c]
        diff = np.minimum(lc[:, :, :, None, :] - lc[:, :, None, :, :], 0.0)
        m = np.exp(diff) * tril[None, None, :, :, None]         # [r, nc, c, c, D]
        return lc, e_end, f, v, g, m

    lc, e_end, f, v, g, m = chunk_pieces()

    # intra-chunk outputs: y[s] = sum_{j<=s} G[s,j] M[s,j] v[j]
    w_full = g[..., None] * m                                   # [r, nc, c, c, D]
    y_intra = np.einsum("rkijd,rkjd->rkid", w_full, v, optimize=True)

    # carry state across chunks
    u = np.einsum("rkjd,rkjn->rkdn", f * v, b4, optimize=True)  # [r, nc, D, N]
    h_in = np.empty((r, nc + 1, dim, n))
    h_in[:, 0] = h_init
    for i in range(nc):
        h_in[:, i + 1] = e_end[:, i, :, None] * h_in[:, i] + u[:, i]

    o = np.matmul(c4, np.swapaxes(h_in[:, :nc], -1, -2))        # [r, nc, c, D]
    exp_lc = np.exp(lc)
    y_inter = exp_lc * o
    y4 = y_intra + y_inter + dsk64 * x4
    y_flat = y4.reshape(r, nc * c, dim)[:, :s_len, :]
    y_data = y_flat.reshape(lead + (s_len, dim)).astype(np.float32)
    final = h_in[:, nc].reshape(lead + (dim, n)).astype(np.float32)

    def backward(gy):
        gy4 = fold(gy, dim)
        # recompute forward pieces from the checkpointed boundary states
        lc, e_end, f, v, g, m = chunk_pieces()
        exp_lc = np.exp(lc)
        o = np.matmul(c4, np.swapaxes(h_in[:, :nc], -1, -2))
        w_full = g[..., None] * m

        g_lc = gy4 * exp_lc * o                                  # via y_inter scale
        go = gy4 * exp_lc
        gc4 = np.matmul(go, h_in[:, :nc])                        # [r, nc, c, N]
        gh_from_y = np.matmul(np.swapaxes(go, -1, -2), c4)       # [r, nc, D, N]

        gw = gy4[:, :, :, None, :] * v[:, :, None, :, :]         # [r, nc, c, c, D]
        gg = np.einsum("rkijd,rkijd->rkij", gw, m, optimize=True)
        gm = gw * g[..., None]
        gv = np.einsum("rkid,rkijd->rkjd", gy4, w_full, optimize=True)
        gmm = gm * m
        g_lc += gmm.sum(axis=3)
        g_lc -= gmm.sum(axis=2)
        gb4 = np.matmul(np.swapaxes(gg, -1, -2), c4)             # [r, nc, c, N]
        gc4 += np.matmul(gg, b4)

        # adjoint chain through chunk-boundary states
        gh_next = np.empty((r, nc, dim, n))
        gh = np.zeros((r, dim, n))
        for i in range(nc - 1, -1, -1):
            gh_next[:, i] = gh
            gh = gh_from_y[:, i] + e_end[:, i, :, None] * gh
        gh0_full = gh

        ge_end = (gh_next * h_in[:, :nc]).sum(axis=-1)           # [r, nc, D]
        g_lc[:, :, -1, :] += ge_end * e_end
        p_term = np.matmul(b4, np.swapaxes(gh_next, -1, -2))     # [r, nc, c, D]
        gf = p_term * v
        g_lc[:, :, -1, :] += (gf * f).sum(axis=2)
        g_lc -= gf * f
        gv += p_term * f
        gb4 += np.matmul(f * v, gh_next)

        gl = np.flip(np.cumsum(np.flip(g_lc, axis=2), axis=2), axis=2)
        gdelta4 = gl * a64 + gv * x4
        gx4 = gv * dl4 + gy4 * dsk64
        ga = (gl * dl4).reshape(-1, dim).sum(axis=0)
        gdsk = (gy4 * x4).reshape(-1, dim).sum(axis=0)

        def unfold(arr4, width, shape):
            return arr4.reshape(r, nc * c, width)[:, :s_len, :].reshape(shape)

        x._accumulate(unfold(gx4, dim, x.shape))
        delta._accumulate(unfold(gdelta4, dim, delta.shape))
        bm._accumulate(unfold(gb4, n, bm.shape))
        cm._accumulate(unfold(gc4, n, cm.shape))
        a._accumulate(ga)
        d_skip._accumulate(gdsk)
        h0._accumulate(gh0_full.reshape(h0.shape))

    y = make_node(y_data, (x, delta, bm, cm, a, d_skip, h0), backward)
    return y, final
