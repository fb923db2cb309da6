import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bomasim import bnn
from bomasim.bnn import (
    ACC_WIDTH,
    DESK_DIMS,
    FormatError,
    LayerShapeError,
    NetworkParams,
    generate_params,
    hidden_operand,
    input_operand,
    load_params,
    masked_activation,
    masked_argmax,
    masked_forward,
    masked_infer,
    masked_word_mux,
    params_bytes,
    params_from_bytes,
    save_params,
    schedule,
    simulate_schedule,
    unmasked_cycles,
    unmasked_infer,
    unmasked_layer_sums,
)
from bomasim.arith import masked_add_sub
from bomasim.masked import MaskedBit, MaskedWord, WidthMismatch, mask, mask_word, to_signed, unmask
from bomasim.trivium import TriviumBank, ZeroPrng, lane_iv, seed

MOD = 1 << ACC_WIDTH


def _signed(x):
    return to_signed(np.asarray(x, dtype=np.int64), ACC_WIDTH)


def _masked_sums(values, rng):
    v = np.asarray(values, dtype=np.int64) % MOD
    m = rng.integers(0, MOD, v.shape).astype(np.uint32)
    return MaskedWord(ACC_WIDTH, m, m ^ v.astype(np.uint32))


# ------------------------------------------------------------------ unmasked

def test_zero_image_all_positive_weights():
    p = generate_params(DESK_DIMS, 0)
    p.weights[0][:] = 1
    p.biases[0][:] = 0
    sums = unmasked_layer_sums(p, np.zeros(16, np.uint8))
    assert not sums[0].any()
    assert ((sums[0] >= 0) == 1).all()


def test_unmasked_matches_dense_oracle():
    rng = np.random.default_rng(5)
    p = generate_params((12, 101, 3), 3)
    for img in rng.integers(0, 256, (5, 12)):
        h = np.array([sum(int(img[i]) * (1 if p.weights[0][j, i] else -1) for i in range(12)) + p.biases[0][j]
                      for j in range(101)])
        a = (h >= 0).astype(int)
        o = [sum(1 if a[i] == p.weights[1][j, i] else -1 for i in range(101)) + p.biases[1][j] for j in range(3)]
        assert unmasked_infer(p, img)[0] == int(np.argmax(o))


def test_default_topology_cycle_counts():
    p = generate_params(seed=0)
    ops = 784 * 1010 + 1010 * 1010 * 2 + 1010 * 10
    assert ops == 2_842_140
    assert abs(unmasked_cycles(p) - 2.85e6) / 2.85e6 < 0.01


# ------------------------------------------------------------------ gadgets

def test_word_mux_exhaustive_4bit():
    for new, old, m_new, m_old, s, ms, r in itertools.product(range(16), range(16), (0, 9), (0, 6), (0, 1), (0, 1),
                                                              (0, 5, 15)):
        sel = mask(s, ms)
        out = masked_word_mux(sel, mask_word(new, m_new, 4), mask_word(old, m_old, 4), [(r >> k) & 1 for k in range(4)])
        assert unmask(out) == (new if s else old)


def test_word_mux_select_zero_keeps_old_exactly_when_mask_free():
    old = mask_word(11, 3, 4)
    out = masked_word_mux(MaskedBit(0, 0), mask_word(4, 7, 4), old, [0, 0, 0, 0])
    assert out == old


def test_word_mux_width_mismatch():
    with pytest.raises(WidthMismatch):
        masked_word_mux(MaskedBit(0, 1), MaskedWord(4, 0, 0), MaskedWord(5, 0, 0), [0] * 5)


def test_input_operand_full_sweep():
    pix = np.arange(256, dtype=np.uint32)[:, None, None]
    w = np.array([0, 1])[None, :, None]
    r = np.arange(512, dtype=np.uint32)[None, None, :]
    r_bits = (r[..., None] >> np.arange(9)) & 1
    op = input_operand(pix, w, r_bits)
    got = _signed(unmask(op))
    expect = np.where(w == 1, pix.astype(np.int64), -pix.astype(np.int64))
    assert np.array_equal(got, np.broadcast_to(expect, got.shape))


def test_input_operand_zero_pixel_and_example():
    for w in (0, 1):
        assert unmask(input_operand(0, w, [1, 0, 1, 1, 0, 0, 1, 0, 1])) == 0
    acc = mask_word(100, 0x5A5A5, ACC_WIDTH)
    acc = masked_add_sub(acc, input_operand(37, 0, [1] * 9), 0, seed(bytes(10), bytes(10)))
    assert unmask(acc) == 63


def test_hidden_mac_examples_and_oracle():
    z = ZeroPrng()
    acc = mask_word(10, 0, ACC_WIDTH)
    assert unmask(masked_add_sub(acc, hidden_operand(mask(1, 0), 1), 0, z)) == 11
    assert unmask(masked_add_sub(acc, hidden_operand(mask(0, 1), 1), 0, z)) == 9
    rng = np.random.default_rng(8)
    n = 1000
    a, w, ma = (rng.integers(0, 2, n).astype(np.uint32) for _ in range(3))
    acc_v = rng.integers(-1000, 1000, n)
    accw = _masked_sums(acc_v, rng)
    out = masked_add_sub(accw, hidden_operand(mask(a, ma), w), 0, rng.integers(0, 2, (n, 60)))
    assert np.array_equal(_signed(unmask(out)), acc_v + np.where(a == w, 1, -1))


@pytest.mark.parametrize("value,act", [(5, 1), (-3, 0), (0, 1), (-1, 0), (2**19 - 1, 1)])
def test_activation_sign(value, act):
    for m in (0, 0xABCDE):
        assert unmask(masked_activation(mask_word(value % MOD, m, ACC_WIDTH))) == act


# ------------------------------------------------------------------ argmax

def _argmax(values, rng, rand=None):
    sums = _masked_sums(np.atleast_2d(values), rng)
    idx = masked_argmax(sums, rand or ZeroPrng())
    return unmask(idx)


def test_argmax_examples():
    rng = np.random.default_rng(0)
    assert _argmax([9] + [0] * 9, rng)[0] == 0
    assert _argmax([3] * 10, rng)[0] == 0
    assert _argmax([1, 5, 5, 2, 0, 0, 0, 0, 0, -7], rng)[0] == 1


def test_argmax_random_against_oracle():
    rng = np.random.default_rng(11)
    values = rng.integers(-(2**18), 2**18, (10_000, 10))
    values[:100, 3] = values[:100, 7]  # some exact ties
    bank = TriviumBank(bytes(10), [lane_iv(i) for i in range(10_000)])
    got = _argmax(values, rng, bank)
    assert np.array_equal(got, np.argmax(values, axis=1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-(2**17), 2**17), min_size=10, max_size=10), st.integers(-(2**17), 2**17))
def test_argmax_shift_invariance(values, shift):
    rng = np.random.default_rng(0)
    base = _argmax(values, rng)[0]
    assert _argmax([v + shift for v in values], rng)[0] == base == int(np.argmax(values))


# ------------------------------------------------------------------ engine

def test_masked_matches_unmasked_desk():
    rng = np.random.default_rng(1)
    for s in range(3):
        p = generate_params(DESK_DIMS, s)
        imgs = rng.integers(0, 256, (200, 16), dtype=np.uint8)
        bank = TriviumBank(s.to_bytes(10, "little"), [lane_iv(i) for i in range(200)])
        index, sums = masked_forward(p, imgs, bank)
        assert np.array_equal(unmask(index), np.argmax(unmasked_layer_sums(p, imgs)[-1], axis=1))
        assert np.array_equal(_signed(unmask(sums)), unmasked_layer_sums(p, imgs)[-1])


def test_masked_infer_single_image():
    p = generate_params(DESK_DIMS, 9)
    img = np.arange(16, dtype=np.uint8) * 13
    res = masked_infer(p, img, seed(bytes(10), lane_iv(3)))
    assert unmask(res.index) == unmasked_infer(p, img)[0]
    assert res.cycles == schedule(p).total_cycles
    assert res.fresh_bits > 0


def test_zero_prng_leaves_share0_zero_and_share1_plain():
    p = generate_params(DESK_DIMS, 2)
    imgs = np.random.default_rng(2).integers(0, 256, (20, 16), dtype=np.uint8)
    rec = bnn.Recorder()
    index, sums = masked_forward(p, imgs, ZeroPrng(), rec)
    plain = unmasked_layer_sums(p, imgs)
    for layer, ref in zip(rec.layers, plain):
        assert not np.any(layer.sums.s0) and not np.any(layer.acts.s0)
        assert np.array_equal(_signed(layer.sums.s1), ref)
        for op in layer.ops:
            assert not any(np.any(getattr(op, f)) for f in ("a0", "b0", "c0", "s0", "r0", "r1", "r2"))
    assert not np.any(index.s0)
    assert all(not np.any(m.s0) for m in rec.argmax_max)


# ------------------------------------------------------------------ schedule

def test_default_schedule_latency_ratio_and_stalls():
    p = generate_params(seed=0)
    s = schedule(p)
    ratio = s.total_cycles / unmasked_cycles(p)
    assert 1.03 <= ratio <= 1.05
    assert s.stalls[:3] == [0, 0, 0] and s.stalls[3] > 0
    assert s.input_layer_cycles == 784 * 1010
    assert s.ready_delay == 101


def test_analytic_schedule_matches_simulation_exactly():
    for dims in (DESK_DIMS, (20, 202, 101, 7), (5, 101, 1)):
        p = generate_params(dims, 0)
        a, b = schedule(p), simulate_schedule(p)
        assert a.total_cycles == b.total_cycles and a.stalls == b.stalls
        assert all(np.array_equal(x, y) for x, y in zip(a.issue, b.issue))
        assert np.array_equal(a.compare_issue, b.compare_issue)


def test_schedule_respects_dependencies():
    p = generate_params((8, 101, 202, 5), 1)
    s = schedule(p)
    R = s.ready_delay
    flat = np.concatenate([i.reshape(-1) for i in s.issue] + [s.compare_issue])
    assert len(np.unique(flat)) == flat.size  # one issue per cycle
    for k, iss in enumerate(s.issue):
        assert (np.diff(iss, axis=1) >= R).all()
        if k:
            assert (iss.min(axis=0) >= s.issue[k - 1][:, -1] + R).all()


def test_layer_shape_error():
    with pytest.raises(LayerShapeError):
        generate_params((16, 100, 4))
    with pytest.raises(LayerShapeError):
        generate_params((16, 101, 16))
    p = generate_params(DESK_DIMS, 0)
    with pytest.raises(LayerShapeError):
        NetworkParams([16, 101, 4], [p.weights[0][:, :8], p.weights[1]], p.biases)


# ------------------------------------------------------------------ parameter files

def test_params_round_trip_byte_exact(tmp_path):
    p = generate_params((16, 202, 4), 7)
    path = tmp_path / "p.bmnp"
    save_params(p, path)
    q = load_params(path)
    assert q.dims == p.dims and q.depth == p.depth
    assert all(np.array_equal(a, b) for a, b in zip(p.weights, q.weights))
    assert all(np.array_equal(a, b) for a, b in zip(p.biases, q.biases))
    assert params_bytes(q) == path.read_bytes()


def test_params_layout():
    p = generate_params(DESK_DIMS, 0)
    data = params_bytes(p)
    assert data[:4] == b"BMNP"
    assert data[4:8] == b"\x01\x00\x02\x00"
    assert np.frombuffer(data[8:24], "<u4").tolist() == [16, 101, 4, 101]
    assert len(data) == 24 + (16 * 101 + 7) // 8 + 4 * 101 + (101 * 4 + 7) // 8 + 4 * 4


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: b"BMNQ" + d[4:], "magic"),
    (lambda d: d[:4] + b"\x02\x00" + d[6:], "version"),
    (lambda d: d[:-1], "truncated"),
    (lambda d: d[:10], "truncated"),
    (lambda d: d + b"\x00", "trailing"),
    (lambda d: d[:8] + b"\x10\x00\x00\x00\x64\x00\x00\x00" + d[16:], "multiple"),
    (lambda d: d[:20] + bytes(4) + d[24:], "depth"),
])
def test_params_corruption(mutate, msg):
    data = params_bytes(generate_params(DESK_DIMS, 0))
    with pytest.raises(FormatError, match=msg):
        params_from_bytes(mutate(data))
