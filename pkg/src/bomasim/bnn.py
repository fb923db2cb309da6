"""Binarized network inference: unmasked reference, masked engine, scheduler.

Weights are bits (1 means +1, 0 means -1). The input layer adds or subtracts
raw pixels; later layers add +1 or -1 per input according to
``XNOR(activation, weight)``; a node's activation is 1 iff its sum is >= 0.
The class is the arg-max of the output sums, ties keeping the lower index.

The masked engine is vectorised over a batch of images and all nodes of a
layer, and works on share words throughout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .arith import STAGE_CYCLES, AddRecord, masked_add_sub
from .masked import MaskedBit, MaskedWord, WidthMismatch

ACC_WIDTH = 20
PIXEL_WIDTH = 9
INDEX_WIDTH = 4
CONTROL_CYCLES = 2
MUX_CYCLES = 5
DEFAULT_DIMS = (784, 1010, 1010, 1010, 10)
DESK_DIMS = (16, 101, 4)
DEFAULT_DEPTH = 101

_MAGIC = b"BMNP"
_VERSION = 1


class LayerShapeError(ValueError):
    pass


class FormatError(ValueError):
    pass


def adder_ready_delay(width: int = ACC_WIDTH) -> int:
    """Cycles between issuing an add and issuing one that consumes its result."""
    return STAGE_CYCLES * width + 1


def check_dims(dims, depth: int = DEFAULT_DEPTH):
    dims = [int(d) for d in dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise LayerShapeError(f"need at least input and output sizes, all positive: {dims}")
    for i, w in enumerate(dims[1:-1], start=1):
        if w % depth:
            raise LayerShapeError(f"hidden layer {i} width {w} is not a multiple of {depth}")
    if dims[-1] >= 1 << INDEX_WIDTH:
        raise LayerShapeError(f"output layer of {dims[-1]} nodes exceeds the {INDEX_WIDTH}-bit index")
    return dims


@dataclass
class NetworkParams:
    dims: list[int]
    weights: list[np.ndarray]  # per layer (n_out, n_in) of 0/1
    biases: list[np.ndarray]  # per layer (n_out,) signed
    depth: int = DEFAULT_DEPTH

    def __post_init__(self):
        self.dims = check_dims(self.dims, self.depth)
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[k + 1], self.dims[k]) or b.shape != (self.dims[k + 1],):
                raise LayerShapeError(f"layer {k} arrays do not match dims {self.dims}")

    @property
    def input_count(self):
        return self.dims[0]

    @property
    def hidden_layers(self):
        return self.dims[1:-1]

    @property
    def output_count(self):
        return self.dims[-1]


def generate_params(dims=DEFAULT_DIMS, seed: int = 0, depth: int = DEFAULT_DEPTH) -> NetworkParams:
    dims = check_dims(dims, depth)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.integers(0, 2, (n_out, n_in), dtype=np.uint8))
        biases.append(rng.integers(-16, 17, n_out).astype(np.int32))
    return NetworkParams(dims, weights, biases, depth)


def save_params(p: NetworkParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_bytes(p))


def params_bytes(p: NetworkParams) -> bytes:
    out = [_MAGIC, struct.pack("<HH", _VERSION, len(p.weights)),
           struct.pack(f"<{len(p.dims)}I", *p.dims), struct.pack("<I", p.depth)]
    for w, b in zip(p.weights, p.biases):
        out.append(np.packbits(w.reshape(-1), bitorder="little").tobytes())
        out.append(b.astype("<i4").tobytes())
    return b"".join(out)


def load_params(path) -> NetworkParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())


def params_from_bytes(data: bytes) -> NetworkParams:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"parameter file truncated at byte {pos} (wanted {n} more)")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    if take(4) != _MAGIC:
        raise FormatError("not a BMNP parameter file (bad magic)")
    version, layers = struct.unpack("<HH", take(4))
    if version != _VERSION:
        raise FormatError(f"unsupported BMNP version {version}")
    dims = list(struct.unpack(f"<{layers + 1}I", take(4 * (layers + 1))))
    (depth,) = struct.unpack("<I", take(4))
    if depth == 0:
        raise FormatError("scheduler depth must be positive")
    try:
        check_dims(dims, depth)  # before sizing any payload from corrupt dims
    except LayerShapeError as exc:
        raise FormatError(str(exc)) from None
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        nbits = n_in * n_out
        raw = np.frombuffer(take((nbits + 7) // 8), dtype=np.uint8)
        weights.append(np.unpackbits(raw, bitorder="little")[:nbits].reshape(n_out, n_in))
        biases.append(np.frombuffer(take(4 * n_out), dtype="<i4").astype(np.int32))
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after parameter data")
    return NetworkParams(dims, weights, biases, depth)


def load_image(path, input_count: int) -> np.ndarray:
    data = np.fromfile(path, dtype=np.uint8)
    if data.size != input_count:
        raise FormatError(f"image has {data.size} bytes, expected {input_count}")
    return data


# --------------------------------------------------------------------------- unmasked

def unmasked_layer_sums(p: NetworkParams, images) -> list[np.ndarray]:
    """Plain integer sums of every layer, shape (batch, n_out) each."""
    x = np.atleast_2d(np.asarray(images, dtype=np.int64))
    sums = []
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        signs = 2 * w.astype(np.int64) - 1
        if k == 0:
            s = x @ signs.T + b
        else:
            # XNOR(act, w) -> +1, else -1, which is the product of the +-1 forms
            s = (2 * x - 1) @ signs.T + b
        sums.append(s)
        x = (s >= 0).astype(np.int64)
    return sums


def unmasked_cycles(p: NetworkParams) -> int:
    ops = sum(n_in * n_out + CONTROL_CYCLES for n_in, n_out in zip(p.dims[:-1], p.dims[1:]))
    return ops + p.output_count


def unmasked_infer(p: NetworkParams, img) -> tuple[int, int]:
    sums = unmasked_layer_sums(p, img)[-1][0]
    return int(np.argmax(sums)), unmasked_cycles(p)


# --------------------------------------------------------------------------- schedule

@dataclass
class Schedule:
    issue: list[np.ndarray]  # per layer, issue cycle of (node, input)
    compare_issue: np.ndarray  # arg-max subtractions, nodes 1..n-1
    total_cycles: int
    stalls: list[int]
    ready_delay: int
    group_period: list[list[int]] = field(default_factory=list)

    @property
    def input_layer_cycles(self) -> int:
        first = self.issue[0]
        return int(first.max() - first.min() + 1)


def _groups(n_out: int, depth: int):
    return [(s, min(depth, n_out - s)) for s in range(0, n_out, depth)]


def schedule(p: NetworkParams, width: int = ACC_WIDTH) -> Schedule:
    """Closed-form issue plan for the shared pipelined adder.

    Nodes are processed in groups of ``depth``. Inside a group one round
    issues each node's next addition back to back; rounds are spaced by the
    larger of the group size and the adder's ready delay, so groups of full
    depth never stall.
    """
    R = adder_ready_delay(width)
    t = 0
    issues, stalls, periods = [], [], []
    act_ready = None
    for n_in, n_out in zip(p.dims[:-1], p.dims[1:]):
        issue = np.empty((n_out, n_in), dtype=np.int64)
        rounds = np.arange(n_in)
        layer_periods = []
        for start, size in _groups(n_out, p.depth):
            period = max(size, R)
            begin = t
            if act_ready is not None:
                begin = max(begin, int((act_ready - rounds * period).max()))
            issue[start:start + size] = begin + rounds[None, :] * period + np.arange(size)[:, None]
            t = begin + (n_in - 1) * period + size
            layer_periods.append(period)
        stalls.append(int(issue.max() - issue.min() + 1 - issue.size))
        issues.append(issue)
        periods.append(layer_periods)
        act_ready = issue[:, -1] + R
        t += CONTROL_CYCLES
    node_ready = act_ready
    cmp = np.empty(max(len(node_ready) - 1, 0), dtype=np.int64)
    free = t
    prev_done = node_ready[0]
    for k in range(1, len(node_ready)):
        cmp[k - 1] = max(free, prev_done, node_ready[k])
        free = cmp[k - 1] + 1
        prev_done = cmp[k - 1] + R + MUX_CYCLES
    total = int(prev_done if len(cmp) else max(t, node_ready[0]))
    return Schedule(issues, cmp, total, stalls, R, periods)


def simulate_schedule(p: NetworkParams, width: int = ACC_WIDTH) -> Schedule:
    """Greedy in-order issue, one operation at a time, as an independent check."""
    R = adder_ready_delay(width)
    t = 0
    issues, stalls = [], []
    act_ready = None
    for n_in, n_out in zip(p.dims[:-1], p.dims[1:]):
        issue = np.empty((n_out, n_in), dtype=np.int64)
        node_ready = [0] * n_out
        for start, size in _groups(n_out, p.depth):
            for i in range(n_in):
                need = 0 if act_ready is None else int(act_ready[i])
                for j in range(start, start + size):
                    at = max(t, node_ready[j], need)
                    issue[j, i] = at
                    node_ready[j] = at + R
                    t = at + 1
        stalls.append(int(issue.max() - issue.min() + 1 - issue.size))
        issues.append(issue)
        act_ready = np.array(node_ready)
        t += CONTROL_CYCLES
    cmp = []
    prev_done = int(act_ready[0])
    for k in range(1, len(act_ready)):
        at = max(t, prev_done, int(act_ready[k]))
        cmp.append(at)
        t = at + 1
        prev_done = at + R + MUX_CYCLES
    total = prev_done if cmp else max(t, int(act_ready[0]))
    return Schedule(issues, np.array(cmp, dtype=np.int64), int(total), stalls, R)


# --------------------------------------------------------------------------- masked engine

def masked_word_mux(sel: MaskedBit, new: MaskedWord, old: MaskedWord, rand) -> MaskedWord:
    """Per bit ``old ^ TG(sel, old ^ new, r)``; ``rand`` holds one bit per position."""
    if new.width != old.width:
        raise WidthMismatch(f"widths differ: {new.width} vs {old.width}")
    n = old.width
    full = (1 << n) - 1
    r = _word(rand, n)
    g0 = (sel.s0 & 1) * full
    g1 = (sel.s1 & 1) * full
    x0, x1 = old.s0 ^ new.s0, old.s1 ^ new.s1
    t1 = r ^ (g0 & x0) ^ (g0 & x1) ^ (g1 & x0) ^ (g1 & x1)
    return MaskedWord(n, old.s0 ^ r, old.s1 ^ t1)


def _word(bits, n):
    bits = np.asarray(bits, dtype=np.uint32)[..., :n]
    out = (bits << np.arange(n, dtype=np.uint32)).sum(axis=-1, dtype=np.uint32)
    return int(out) if out.ndim == 0 else out


def masked_activation(acc: MaskedWord) -> MaskedBit:
    top = acc.width - 1
    return MaskedBit((acc.s0 >> top) & 1, ((acc.s1 >> top) & 1) ^ 1)


def input_operand(pixel, weight, r_bits) -> MaskedWord:
    """Masked-LUT output for one pixel: shares of +pixel or -pixel, sign-extended to 20 bits.

    For each of the 9 operand bits the LUT reads (a_k, (-a)_k, weight, r_k)
    and emits (r_k, selected_k ^ r_k).
    """
    pix = np.asarray(pixel, dtype=np.uint32)
    m9 = (1 << PIXEL_WIDTH) - 1
    a, na = pix & m9, (np.uint32(0) - pix) & m9
    sel = np.where(np.asarray(weight) == 1, a, na).astype(np.uint32)
    r = np.asarray(_word(r_bits, PIXEL_WIDTH), dtype=np.uint32)
    return MaskedWord(ACC_WIDTH, _sign_extend(r), _sign_extend(sel ^ r))


def _sign_extend(x, width=PIXEL_WIDTH, to=ACC_WIDTH):
    x = np.asarray(x, dtype=np.uint32)
    high = ((1 << to) - 1) ^ ((1 << width) - 1)
    return x | np.where((x >> (width - 1)) & 1, np.uint32(high), np.uint32(0))


def hidden_operand(act: MaskedBit, weight) -> MaskedWord:
    """+1 or -1 as shares: bit 0 is the constant (0, 1), bits 1.. repeat NOT XNOR(act, w)."""
    upper = ((1 << ACC_WIDTH) - 1) ^ 1
    s0 = (np.asarray(act.s0, dtype=np.uint32) & 1) * np.uint32(upper)
    s1 = ((np.asarray(act.s1, dtype=np.uint32) ^ np.asarray(weight, dtype=np.uint32)) & 1) * np.uint32(upper) | np.uint32(1)
    return MaskedWord(ACC_WIDTH, s0, s1)


@dataclass
class LayerRecord:
    bias: MaskedWord  # remasked bias words, (batch, n_out)
    ops: list[AddRecord]  # one per input position, arrays (batch, n_out)
    acts: MaskedBit | None  # activations written after the layer
    sums: MaskedWord


@dataclass
class Recorder:
    """Collects every share word the engine produces, for leakage modelling."""
    layers: list[LayerRecord] = field(default_factory=list)
    argmax_ops: list[AddRecord] = field(default_factory=list)
    argmax_max: list[MaskedWord] = field(default_factory=list)
    argmax_index: list[MaskedWord] = field(default_factory=list)


@dataclass
class InferenceResult:
    index: MaskedWord  # class index shares, width 4
    cycles: int
    fresh_bits: int
    output_sums: MaskedWord | None = None


def _bits(rand, shape):
    return rand.bits(shape)


def masked_forward(p: NetworkParams, images, rand, recorder: Recorder | None = None) -> tuple[MaskedWord, MaskedWord]:
    """Run the masked datapath on a batch; returns (index shares, output sums).

    ``rand`` provides ``bits(shape)`` with the batch axis first (a single
    :class:`~bomasim.trivium.Trivium` with batch 1, or a lane bank).
    """
    x = np.atleast_2d(np.asarray(images, dtype=np.uint8))
    B = x.shape[0]
    act = None
    full = (1 << ACC_WIDTH) - 1
    for k, (w, bias) in enumerate(zip(p.weights, p.biases)):
        n_out, n_in = w.shape
        m = _word(_bits(rand, (B, n_out, ACC_WIDTH)), ACC_WIDTH)
        bword = np.uint32(0) + (bias.astype(np.int64) & full).astype(np.uint32)
        acc = MaskedWord(ACC_WIDTH, m, m ^ bword)
        rec = LayerRecord(acc, [], None, acc) if recorder is not None else None
        ops = rec.ops if rec is not None else None
        for i in range(n_in):
            if k == 0:
                r9 = _bits(rand, (B, n_out, PIXEL_WIDTH))
                operand = input_operand(x[:, i, None], w[None, :, i], r9)
            else:
                operand = hidden_operand(MaskedBit(act.s0[:, i, None], act.s1[:, i, None]), w[None, :, i])
            acc = masked_add_sub(acc, operand, 0, _bits(rand, (B, n_out, 3 * ACC_WIDTH)), ops)
        act = masked_activation(acc)
        if rec is not None:
            rec.acts, rec.sums = act, acc
            recorder.layers.append(rec)
    index = masked_argmax(acc, rand, recorder)
    return index, acc


def masked_argmax(sums: MaskedWord, rand, recorder: Recorder | None = None) -> MaskedWord:
    """Index of the largest sum (earliest on ties) via subtract-and-test and masked muxes."""
    B, n = np.shape(sums.s0)
    best = MaskedWord(ACC_WIDTH, sums.s0[:, 0], sums.s1[:, 0])
    zero = np.zeros(B, dtype=np.uint32)
    index = MaskedWord(INDEX_WIDTH, zero, zero)
    for k in range(1, n):
        node = MaskedWord(ACC_WIDTH, sums.s0[:, k], sums.s1[:, k])
        ops = recorder.argmax_ops if recorder is not None else None
        diff = masked_add_sub(best, node, 1, _bits(rand, (B, 3 * ACC_WIDTH)), ops)
        sel = MaskedBit((diff.s0 >> (ACC_WIDTH - 1)) & 1, (diff.s1 >> (ACC_WIDTH - 1)) & 1)
        best = masked_word_mux(sel, node, best, _bits(rand, (B, ACC_WIDTH)))
        index = masked_word_mux(sel, MaskedWord(INDEX_WIDTH, zero, zero + np.uint32(k)), index,
                                _bits(rand, (B, INDEX_WIDTH)))
        if recorder is not None:
            recorder.argmax_max.append(best)
            recorder.argmax_index.append(index)
    return index


def masked_infer(p: NetworkParams, img, prng) -> InferenceResult:
    start = prng.bits_emitted
    index, sums = masked_forward(p, np.asarray(img)[None], prng)
    one = MaskedWord(INDEX_WIDTH, int(index.s0[0]), int(index.s1[0]))
    out = MaskedWord(ACC_WIDTH, sums.s0[0], sums.s1[0])
    return InferenceResult(one, schedule(p).total_cycles, prng.bits_emitted - start, out)
