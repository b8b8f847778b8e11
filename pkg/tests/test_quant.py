import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpal.errors import ConfigMismatch, DimMismatch, LengthMismatch, NonPsdHessian, PartitionMismatch
from qpal.quant.bitpack import pack_bits, unpack_bits
from qpal.quant.engine import decode_codes, dequantize, encode_matrix, make_coder, quantize_matrix
from qpal.quant.ldlq import block_ldlq, factor_hessian
from qpal.quant.rtn import nuq_rtn, vq_rtn
from qpal.quant.trellis import TrellisConfig, _viterbi_pass, bits_to_windows, tcq_decode, tcq_encode
from qpal.tensor_store import Scheme, stream_lengths

TOY = TrellisConfig(L=4, V=1, s=2, T=4, tlut_bits=0)
ALL_BITS = np.array(list(itertools.product([0, 1], repeat=TOY.n_bits)), dtype=np.uint8)


def exhaustive(x, lut, cfg=TOY, bits=ALL_BITS):
    errs = np.array([np.sum((x - tcq_decode(b, cfg, lut)) ** 2) for b in bits])
    return errs


# --- round to nearest -------------------------------------------------------


def test_nuq_rtn_exact_codeword():
    lut = np.array([-1.5, -0.5, 0.5, 1.5])
    r = nuq_rtn(0.5, lut)
    assert r.code == 2 and r.sq_error == 0.0 and r.code_bits(2) == "10"


def test_nuq_rtn_one_bit():
    c = np.sqrt(2 / np.pi)
    r = nuq_rtn(0.1, np.array([-c, c]))
    assert r.code == 1
    assert abs(r.sq_error - (0.1 - c) ** 2) < 1e-12
    assert abs(r.sq_error - 0.4870) < 1e-4


def test_rtn_ties_go_to_lower_index():
    assert nuq_rtn(0.0, np.array([-1.0, 1.0])).code == 0
    assert vq_rtn([0.0, 0.0], np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])).code == 0


def test_vq_rtn_matches_argmin():
    rng = np.random.default_rng(0)
    lut = rng.standard_normal((16, 2))
    for _ in range(50):
        v = rng.standard_normal(2)
        r = vq_rtn(v, lut)
        d = np.sum((lut - v) ** 2, axis=1)
        assert r.code == int(np.argmin(d)) and abs(r.sq_error - d.min()) < 1e-12


# --- bit packing ------------------------------------------------------------


def test_pack_lsb_first():
    assert pack_bits([0b10110], 5) == bytes([0x16])
    assert pack_bits([1, 0, 1], 1) == bytes([0b101])
    assert pack_bits([], 3) == b""


def test_pack_heterogeneous_widths():
    data = pack_bits([3, 1, 100], [2, 1, 7])
    assert int.from_bytes(data, "little") == 3 | (1 << 2) | (100 << 3)
    assert list(unpack_bits(data, [2, 1, 7])) == [3, 1, 100]


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 20), st.integers(0, 300), st.integers(0, 2**32 - 1))
def test_pack_round_trip(width, n, seed):
    codes = np.random.default_rng(seed).integers(0, 1 << width, n)
    data = pack_bits(codes, width)
    assert len(data) == -(-n * width // 8)
    assert np.array_equal(unpack_bits(data, width, n), codes)


def test_unpack_length_mismatch():
    with pytest.raises(LengthMismatch):
        unpack_bits(b"\0\0", 3, 2)


# --- trellis ----------------------------------------------------------------


def test_toy_viterbi_matches_exhaustive():
    rng = np.random.default_rng(0)
    equal = 0
    for _ in range(100):
        lut = rng.standard_normal((16, 1))
        x = rng.standard_normal(4)
        path = tcq_encode(x, TOY, lut)
        best = exhaustive(x, lut).min()
        assert path.sq_error >= best - 1e-12
        assert abs(np.sum((x - tcq_decode(path.bits, TOY, lut)) ** 2) - path.sq_error) < 1e-12
        equal += abs(path.sq_error - best) <= 1e-12
    assert equal >= 99


def test_fixed_wrap_state_is_exactly_optimal():
    rng = np.random.default_rng(1)
    n_state = 1 << (TOY.L - TOY.s)
    for _ in range(30):
        lut = rng.standard_normal((16, 1))
        x = rng.standard_normal((4, 1))
        errs = exhaustive(x.ravel(), lut)
        lead = ALL_BITS[:, 0] * 2 + ALL_BITS[:, 1]  # the pinned overlap bits
        for wrap in range(n_state):
            back = np.zeros((TOY.steps, n_state), np.int32)
            cur, nxt, mins = np.empty(16), np.empty(16), np.empty(n_state)
            _, cost = _viterbi_pass(x, lut, TOY.L, TOY.s, wrap, back, cur, nxt, mins)
            assert abs(cost + np.sum(x**2) - errs[lead == wrap].min()) < 1e-12


def test_decodable_input_has_zero_error(toy_trellis):
    rng = np.random.default_rng(11)
    lut = rng.standard_normal((16, 1))
    x = tcq_decode(ALL_BITS[123], TOY, lut)
    assert tcq_encode(x, TOY, lut).sq_error == 0.0
    cfg = TrellisConfig(16, 2, 4, 256, 9)
    bits = rng.integers(0, 2, cfg.n_bits).astype(np.uint8)
    x = tcq_decode(bits, cfg, toy_trellis.entries)
    assert tcq_encode(x, cfg, toy_trellis.entries).sq_error == 0.0


def test_decode_all_zero_bits():
    lut = np.arange(16, dtype=np.float64)[:, None]
    assert np.array_equal(tcq_decode(np.zeros(8, np.uint8), TOY, lut), np.zeros(4))


def test_wrap_window_reads_leading_bits():
    # step 3 window covers bits 6,7,0,1
    bits = np.array([1, 0, 0, 0, 0, 0, 1, 1], np.uint8)
    w = bits_to_windows(bits, TOY)
    assert w[3] == 0b1110
    assert w[0] == 0b1000


def test_decode_of_encode_is_bit_exact(toy_trellis):
    cfg = TrellisConfig(16, 2, 4, 256, 9)
    x = np.random.default_rng(2).standard_normal(256)
    p = tcq_encode(x, cfg, toy_trellis.entries)
    assert np.array_equal(tcq_decode(p.bits, cfg, toy_trellis.entries), p.reconstruction)
    assert p.bits.size == 512


def test_trellis_errors(toy_trellis):
    cfg = TrellisConfig(16, 2, 4, 256, 9)
    with pytest.raises(LengthMismatch):
        tcq_encode(np.zeros(100), cfg, toy_trellis.entries)
    with pytest.raises(LengthMismatch):
        tcq_decode(np.zeros(100, np.uint8), cfg, toy_trellis.entries)
    with pytest.raises(ConfigMismatch):
        tcq_encode(np.zeros(256), cfg, np.zeros((1024, 2)))


def test_tcq_two_bit_distortion_near_target(tlut9):
    z = np.random.default_rng(3).standard_normal((64, 256))
    _, rec = encode_matrix(z, "tcq", 8, tlut9)
    assert abs(np.mean((z - rec) ** 2) / 0.07101 - 1) < 0.06


# --- matrix engine ------------------------------------------------------------


@pytest.mark.parametrize("scheme,x4,fixture", [("nuq", 8, "nuq2"), ("vq", 8, "vq2"), ("tcq", 8, "toy_trellis"), ("half-tcq", 9, "toy_trellis")])
def test_engine_round_trip(request, scheme, x4, fixture):
    cb = request.getfixturevalue(fixture)
    z = np.random.default_rng(4).standard_normal((64, 32))
    codes, rec = encode_matrix(z, scheme, x4, cb)
    q = quantize_matrix(z, scheme, x4, cb, seed=5, scales=np.full(32, 2.0))
    assert sum(stream_lengths(q.scheme, x4, 64, 32)) == len(q.packed)
    assert len(q.packed) * 8 - 64 * 32 * x4 / 4 < 16
    assert np.array_equal(decode_codes(q, cb), rec)
    assert np.allclose(dequantize(q, cb), 2 * rec, atol=1e-6)
    assert q.rotation_seed == 5 and q.codebook_id == cb.codebook_id


def test_nuq_codeword_matrix_is_exact(nuq2):
    idx = np.random.default_rng(12).integers(0, 4, (16, 8))
    z = nuq2.entries.astype(np.float64)[idx]
    codes, rec = encode_matrix(z, "nuq", 8, nuq2)
    assert np.array_equal(codes, idx) and np.array_equal(rec, z)


def test_engine_deterministic(nuq2, toy_trellis):
    z = np.random.default_rng(6).standard_normal((32, 16))
    for scheme, cb in (("nuq", nuq2), ("tcq", toy_trellis)):
        a = quantize_matrix(z, scheme, 8, cb, threads=1)
        b = quantize_matrix(z, scheme, 8, cb, threads=4)
        assert a.packed == b.packed


def test_half_tcq_row_split(toy_trellis):
    coder = make_coder("half-tcq", 11, toy_trellis, 512, 64)
    assert coder._cfg(0).s == 5 and coder._cfg(255).s == 5
    assert coder._cfg(256).s == 6 and coder._cfg(511).s == 6
    z = np.random.default_rng(7).standard_normal((512, 64))
    q = quantize_matrix(z, "half-tcq", 11, toy_trellis)
    lo, hi = stream_lengths(Scheme.HALF_TCQ, 11, 512, 64)
    assert (lo, hi) == (256 * 64 * 5 // 16, 256 * 64 * 6 // 16)
    assert len(q.packed) == lo + hi


def test_partition_mismatch(vq2, toy_trellis):
    with pytest.raises(PartitionMismatch):
        encode_matrix(np.zeros((3, 4)), "vq", 8, vq2)
    with pytest.raises(PartitionMismatch):
        encode_matrix(np.zeros((24, 16)), "tcq", 8, toy_trellis)
    with pytest.raises(PartitionMismatch):
        encode_matrix(np.zeros((16, 16)), "half-tcq", 9, toy_trellis)


def test_codebook_mismatch(nuq2, vq2):
    with pytest.raises(ConfigMismatch):
        encode_matrix(np.zeros((4, 4)), "nuq", 12, nuq2)
    with pytest.raises(ConfigMismatch):
        encode_matrix(np.zeros((4, 4)), "tcq", 8, vq2)


# --- block LDLQ ---------------------------------------------------------------


@pytest.mark.parametrize("scheme,x4,fixture", [("nuq", 8, "nuq2"), ("vq", 8, "vq2"), ("tcq", 8, "toy_trellis"), ("half-tcq", 9, "toy_trellis")])
def test_ldlq_identity_hessian_equals_data_free(request, scheme, x4, fixture):
    cb = request.getfixturevalue(fixture)
    z = np.random.default_rng(8).standard_normal((64, 16))
    a = quantize_matrix(z, scheme, x4, cb, seed=1)
    b = block_ldlq(z, np.eye(64), scheme, x4, cb, seed=1)
    assert a.packed == b.packed


def weighted_error(z, rec, h):
    e = rec - z
    return float(np.trace(e.T @ h @ e))


def damped_hessian(rng, n, rank):
    a = rng.standard_normal((n, rank))
    h = a @ a.T / rank
    return h + 0.01 * np.mean(np.diag(h)) * np.eye(n)


def test_ldlq_beats_rtn_monte_carlo(nuq2):
    rng = np.random.default_rng(9)
    wins = 0
    for t in range(200):
        z = rng.standard_normal((16, 4))
        h = damped_hessian(rng, 16, int(rng.integers(1, 33)))
        q = block_ldlq(z, h, "nuq", 8, nuq2)
        rec = decode_codes(q, nuq2)
        _, rtn = encode_matrix(z, "nuq", 8, nuq2)
        wins += weighted_error(z, rec, h) <= weighted_error(z, rtn, h) + 1e-12
    assert wins >= 180


def test_ldlq_singular_hessian_is_finite(nuq2):
    rng = np.random.default_rng(10)
    a = rng.standard_normal((16, 3))
    h = a @ a.T  # rank 3
    q = block_ldlq(rng.standard_normal((16, 4)), h, "nuq", 8, nuq2)
    assert np.all(np.isfinite(decode_codes(q, nuq2)))
    f = factor_hessian(h)
    assert np.all(np.isfinite(f.L_unit_lower)) and np.all(np.isfinite(f.D))


@pytest.mark.parametrize("block", [1, 2, 16])
def test_factor_reconstructs(block):
    rng = np.random.default_rng(block)
    a = rng.standard_normal((32, 40))
    h = a @ a.T / 40
    f = factor_hessian(h, block)
    assert np.max(np.abs(f.reconstruct() - h)) < 1e-6
    lo = f.L_unit_lower
    assert np.allclose(np.diag(lo), 1)
    for i in range(0, 32, block):
        assert np.all(lo[i : i + block, i:] == np.eye(block, 32 - i))
    d_off = f.D.copy()
    for i in range(0, 32, block):
        d_off[i : i + block, i : i + block] = 0
    assert np.all(d_off == 0)


def test_ldlq_errors(nuq2):
    with pytest.raises(DimMismatch):
        block_ldlq(np.zeros((8, 2)), np.eye(4), "nuq", 8, nuq2)
    with pytest.raises(DimMismatch):
        factor_hessian(np.zeros((3, 4)))
    h = np.eye(4)
    h[0, 0] = -1
    with pytest.raises(NonPsdHessian):
        factor_hessian(h)
    with pytest.raises(NonPsdHessian):
        factor_hessian(np.array([[1.0, 0.5], [0.0, 1.0]]))
