import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scanworld import scanorder as so
from scanworld.tensor import Tensor


def enumerate_positions(cfg):
    """Brute-force oracle: list of (block, pos) -> (t, h, w) by definition."""
    table = {}
    for h in range(cfg.H):
        for w in range(cfg.W):
            for t in range(cfg.T):
                block = (h // cfg.b_h) * (cfg.W // cfg.b_w) + (w // cfg.b_w)
                pos = t * cfg.b_h * cfg.b_w + (h % cfg.b_h) * cfg.b_w + (w % cfg.b_w)
                table[(block, pos)] = (t, h, w)
    return table


def test_degenerate_single_token():
    cfg = so.BlockScanConfig(b_h=1, b_w=1, H=1, W=1, T=1)
    p = so.build_permutation(cfg)
    assert p.gather_index.tolist() == [0]
    assert p.scatter_index.tolist() == [0]


def test_single_block_2x2x2():
    cfg = so.BlockScanConfig(b_h=2, b_w=2, H=2, W=2, T=2)
    p = so.build_permutation(cfg)
    assert cfg.num_blocks == 1 and cfg.block_len == 8
    # token (t=1, h=0, w=0) lands at scan position 4
    assert p.scan_position(1, 0, 0) == (0, 4)
    oracle = enumerate_positions(cfg)
    for (block, pos), (t, h, w) in oracle.items():
        assert p.gather_index[block * cfg.block_len + pos] == t * 4 + h * 2 + w


def test_unit_blocks_are_per_site_time_series():
    cfg = so.BlockScanConfig(b_h=1, b_w=1, H=2, W=2, T=2)
    p = so.build_permutation(cfg)
    assert cfg.num_blocks == 4 and cfg.block_len == 2
    oracle = enumerate_positions(cfg)
    for (block, pos), (t, h, w) in oracle.items():
        assert p.scan_position(t, h, w) == (block, pos)
        # each block is one (h, w) site across time
        assert pos == t


def test_non_divisible_block_rejected():
    with pytest.raises(so.ConfigurationError):
        so.BlockScanConfig(b_h=3, b_w=1, H=4, W=4, T=1)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4]), st.integers(1, 5))
def test_bijectivity(b_h, b_w, t):
    cfg = so.BlockScanConfig(b_h=b_h, b_w=b_w, H=4, W=4, T=t)
    p = so.build_permutation(cfg)
    n = cfg.T * cfg.H * cfg.W
    assert sorted(p.gather_index.tolist()) == list(range(n))
    np.testing.assert_array_equal(p.gather_index[p.scatter_index], np.arange(n))
    np.testing.assert_array_equal(p.scatter_index[p.gather_index], np.arange(n))


def test_causal_order_within_block():
    cfg = so.BlockScanConfig(b_h=2, b_w=4, H=4, W=4, T=6)
    p = so.build_permutation(cfg)
    for h1 in range(4):
        for w1 in range(4):
            for h2 in range(4):
                for w2 in range(4):
                    b1, pos1 = p.scan_position(1, h1, w1)
                    b2, pos2 = p.scan_position(3, h2, w2)
                    if b1 == b2:
                        assert pos1 < pos2  # earlier frame => earlier scan slot


def test_temporal_adjacency_distance():
    cfg = so.BlockScanConfig(b_h=2, b_w=2, H=4, W=4, T=3)
    p = so.build_permutation(cfg)
    for t in range(2):
        for h in range(4):
            for w in range(4):
                b1, pos1 = p.scan_position(t, h, w)
                b2, pos2 = p.scan_position(t + 1, h, w)
                assert b1 == b2 and pos2 - pos1 == 4


def test_gather_scatter_roundtrip():
    rng = np.random.default_rng(0)
    cfg = so.BlockScanConfig(b_h=2, b_w=1, H=4, W=2, T=3)
    p = so.build_permutation(cfg)
    x = Tensor(rng.standard_normal((2, 3, 4, 2, 5)).astype(np.float32))
    back = so.scatter(so.gather(x, p), p)
    np.testing.assert_array_equal(back.data, x.data)


def test_gather_constant_grid():
    cfg = so.BlockScanConfig(b_h=2, b_w=2, H=2, W=2, T=2)
    p = so.build_permutation(cfg)
    x = Tensor(np.full((2, 2, 2, 3), 7.0, np.float32))
    np.testing.assert_array_equal(so.gather(x, p).data, np.full((1, 8, 3), 7.0, np.float32))


def test_gather_matches_hand_enumeration():
    cfg = so.BlockScanConfig(b_h=2, b_w=2, H=2, W=2, T=2)
    p = so.build_permutation(cfg)
    x = np.arange(8, dtype=np.float32).reshape(2, 2, 2, 1)  # value = t*4 + h*2 + w
    seq = so.gather(Tensor(x), p).data.reshape(-1)
    oracle = enumerate_positions(cfg)
    expected = [oracle[(0, pos)] for pos in range(8)]
    expected = [t * 4 + h * 2 + w for (t, h, w) in expected]
    np.testing.assert_array_equal(seq, np.array(expected, np.float32))


def test_cross_block_independence():
    rng = np.random.default_rng(1)
    cfg = so.BlockScanConfig(b_h=2, b_w=2, H=4, W=4, T=2)
    p = so.build_permutation(cfg)
    x = rng.standard_normal((2, 4, 4, 3)).astype(np.float32)
    seq0 = so.gather(Tensor(x), p).data
    x2 = x.copy()
    x2[:, 2:, :, :] += 1.0  # perturb blocks whose h >= 2
    seq1 = so.gather(Tensor(x2), p).data
    # block 0 covers h in [0, 2), w in [0, 2): untouched by the perturbation
    np.testing.assert_array_equal(seq0[0], seq1[0])
    assert not np.array_equal(seq0[2], seq1[2])


def test_gradient_flows_through_roundtrip():
    rng = np.random.default_rng(2)
    cfg = so.BlockScanConfig(b_h=1, b_w=2, H=2, W=2, T=2)
    p = so.build_permutation(cfg)
    x = Tensor(rng.standard_normal((2, 2, 2, 3)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 4, 3)).astype(np.float32))
    from scanworld.tensor import tsum, mul
    tsum(mul(so.gather(x, p), w)).backward()
    # permutation is linear: grad of sum(gather(x) * w) is scatter of w
    expected = so.scatter(Tensor(w.data), p).data
    np.testing.assert_allclose(x.grad, expected, rtol=1e-6)


def test_extent_mismatch_raises():
    cfg = so.BlockScanConfig(b_h=1, b_w=1, H=2, W=2, T=2)
    p = so.build_permutation(cfg)
    with pytest.raises(so.ConfigurationError):
        so.gather(Tensor(np.zeros((3, 2, 2, 1))), p)
