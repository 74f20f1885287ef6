"""Block-wise reordering of spatio-temporal tokens for the SSM scan.

The frame token grid is split spatially into (b_h, b_w) blocks. Each block is
scanned independently across the whole clip in spatial-major/time-minor order:
every token of frame t comes before any token of frame t+1, and two temporally
adjacent tokens at the same (h, w) sit exactly b_h*b_w scan positions apart.
Within a frame, a block's tokens are laid out row-major (h outer, w inner).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, take_perm


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class BlockScanConfig:
    b_h: int
    b_w: int
    H: int
    W: int
    T: int

    def __post_init__(self):
        if not (1 <= self.b_h <= self.H and 1 <= self.b_w <= self.W):
            raise ConfigurationError(
                f"block size ({self.b_h}, {self.b_w}) outside grid ({self.H}, {self.W})")
        if self.H % self.b_h or self.W % self.b_w:
            raise ConfigurationError(
                f"block size ({self.b_h}, {self.b_w}) must divide grid ({self.H}, {self.W})")
        if self.T < 1:
            raise ConfigurationError(f"need at least one frame, got T={self.T}")

    @property
    def num_blocks(self) -> int:
        return (self.H // self.b_h) * (self.W // self.b_w)

    @property
    def block_len(self) -> int:
        """Tokens per block over the whole clip."""
        return self.b_h * self.b_w * self.T

    @property
    def tokens_per_frame_block(self) -> int:
        return self.b_h * self.b_w


@dataclass(frozen=True)
class ScanPermutation:
    """Bijection between grid order (t, h, w) and blocked scan order."""

    config: BlockScanConfig
    gather_index: np.ndarray   # flat [num_blocks * block_len], source index t*H*W + h*W + w
    scatter_index: np.ndarray  # exact inverse permutation

    def block_of(self, h: int, w: int) -> int:
        c = self.config
        return (h // c.b_h) * (c.W // c.b_w) + (w // c.b_w)

    def scan_position(self, t: int, h: int, w: int) -> tuple[int, int]:
        """(block id, position within that block's scan) for a grid token."""
        c = self.config
        pos = t * c.tokens_per_frame_block + (h % c.b_h) * c.b_w + (w % c.b_w)
        return self.block_of(h, w), pos


def build_permutation(cfg: BlockScanConfig) -> ScanPermutation:
    t = np.arange(cfg.T)
    h = np.arange(cfg.H)
    w = np.arange(cfg.W)
    tt, hh, ww = np.meshgrid(t, h, w, indexing="ij")
    block = (hh // cfg.b_h) * (cfg.W // cfg.b_w) + (ww // cfg.b_w)
    pos = tt * cfg.tokens_per_frame_block + (hh % cfg.b_h) * cfg.b_w + (ww % cfg.b_w)
    src = (tt * cfg.H * cfg.W + hh * cfg.W + ww).reshape(-1)
    dest = (block * cfg.block_len + pos).reshape(-1)
    gather = np.empty(cfg.T * cfg.H * cfg.W, dtype=np.int64)
    gather[dest] = src
    scatter = np.argsort(gather)
    return ScanPermutation(config=cfg, gather_index=gather, scatter_index=scatter)


def gather(x: Tensor, p: ScanPermutation) -> Tensor:
    """[.., T, H, W, D] grid -> [.., num_blocks, block_len, D] blocked sequence."""
    c = p.config
    if x.shape[-4:-1] != (c.T, c.H, c.W):
        raise ConfigurationError(f"grid extents {x.shape} do not match scan config {c}")
    lead = x.shape[:-4]
    d = x.shape[-1]
    flat = x.reshape(lead + (c.T * c.H * c.W, d))
    seq = take_perm(flat, p.gather_index, p.scatter_index, axis=len(lead))
    return seq.reshape(lead + (c.num_blocks, c.block_len, d))


def scatter(y: Tensor, p: ScanPermutation) -> Tensor:
    """Inverse of gather: blocked sequence back to the [.., T, H, W, D] grid."""
    c = p.config
    if y.shape[-3:-1] != (c.num_blocks, c.block_len):
        raise ConfigurationError(f"blocked extents {y.shape} do not match scan config {c}")
    lead = y.shape[:-3]
    d = y.shape[-1]
    flat = y.reshape(lead + (c.num_blocks * c.block_len, d))
    grid = take_perm(flat, p.scatter_index, p.gather_index, axis=len(lead))
    return grid.reshape(lead + (c.T, c.H, c.W, d))
