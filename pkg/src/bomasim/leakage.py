"""Synthetic power traces from simulated switching activity.

One sample per clock cycle::

    sample = alpha_reg * (register bits flipped) + alpha_glitch * (wire toggles) + N(0, sigma)

Traces follow the fixed-versus-random protocol: a coin decides per trace
whether the engine sees the fixed image or a fresh uniform one. Each trace has
its own TRIVIUM lane (IV = trace index). Noise, random images and routing
jitter are drawn per fixed-size batch, so results do not depend on how many
worker processes are used.
"""
from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import bnn
from .arith import STAGE_CYCLES
from .bnn import ACC_WIDTH, MUX_CYCLES, PIXEL_WIDTH, FormatError, NetworkParams, Recorder
from .cells import FA_PORTS, TRICHINA_LATENCY, gate_array, masked_full_adder_circuit, ripple_adder
from .circuit import BatchSimulator, pipeline_activity
from .trivium import TriviumBank, ZeroPrng, lane_iv

DESIGNS = ("unmasked", "masked", "gate_array")
FIXED_PIXEL = 0x5A
GATE_ARRAY_SIZE = 32
GATE_ARRAY_CYCLES = TRICHINA_LATENCY + 2
BATCH = {"unmasked": 128, "masked": 32, "gate_array": 8192}

_MAGIC = b"BMNT"
_VERSION = 1
FLAG_PRNG = 1
FLAG_BALANCED = 2


@dataclass(frozen=True)
class LeakageModelConfig:
    alpha_reg: float = 1.0
    alpha_glitch: float = 0.5
    noise_sigma: float = 2.0
    samples_per_cycle: int = 1
    jitter: int = 3

    def __post_init__(self):
        if self.alpha_reg < 0 or self.alpha_glitch < 0:
            raise ValueError("leakage weights must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.samples_per_cycle != 1:
            raise ValueError("only one sample per cycle is modelled")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TraceSet:
    labels: np.ndarray  # uint8, 0 = fixed, 1 = random
    samples: np.ndarray  # float32 (n_traces, n_samples)
    metadata: dict = field(default_factory=dict)
    flags: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2 or len(self.labels) != self.samples.shape[0]:
            raise ValueError("labels length must equal the number of traces")

    @property
    def n_traces(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def windows(self) -> list[tuple[int, int]]:
        return [tuple(w) for w in self.metadata.get("windows", [])]


def save_traces(ts: TraceSet, path) -> None:
    meta = json.dumps(ts.metadata, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HIIHI", _VERSION, ts.n_traces, ts.n_samples, ts.flags, len(meta)))
        fh.write(meta)
        fh.write(ts.labels.tobytes())
        fh.write(ts.samples.astype("<f4").tobytes())


def load_traces(path) -> TraceSet:
    with open(path, "rb") as fh:
        data = fh.read()
    head = 4 + struct.calcsize("<HIIHI")
    if len(data) < 4 or data[:4] != _MAGIC:
        raise FormatError("not a BMNT trace file (bad magic)")
    if len(data) < 6:
        raise FormatError("trace file truncated in header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported BMNT version {version}")
    if len(data) < head:
        raise FormatError("trace file truncated in header")
    _, n, m, flags, mlen = struct.unpack_from("<HIIHI", data, 4)
    need = head + mlen + n + 4 * n * m
    if len(data) != need:
        kind = "truncated" if len(data) < need else "has trailing bytes"
        raise FormatError(f"trace file {kind}: {len(data)} bytes, expected {need}")
    try:
        meta = json.loads(data[head:head + mlen].decode()) if mlen else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad metadata block: {exc}") from None
    pos = head + mlen
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).copy()
    if labels.size and labels.max() > 1:
        raise FormatError("labels must be 0 (fixed) or 1 (random)")
    samples = np.frombuffer(data, dtype="<f4", count=n * m, offset=pos + n).reshape(n, m).astype(np.float32)
    return TraceSet(labels, samples, meta, flags)


# --------------------------------------------------------------------------- helpers

def _popcount(x) -> np.ndarray:
    return np.bitwise_count(x).astype(np.int64)


def _shift(w: np.ndarray, k: int) -> np.ndarray:
    """Rows moved ``k`` cycles later (zeros shifted in)."""
    if k == 0:
        return w
    out = np.zeros_like(w)
    if k < len(w):
        out[k:] = w[:-k]
    return out


def _lines_hd(values: np.ndarray, lengths: list[int]) -> np.ndarray:
    """Total HD per cycle of one shift register per bit, bit ``k`` being ``lengths[k]`` deep.

    A chain of depth L fed with bit sequence x flips sum(h[t-L+1..t]) bits in
    cycle t, where h marks changes of x; summing over bits turns the window
    sums into one cumulative sum of (changes entering) minus (changes leaving).
    """
    d = values ^ _shift(values, 1)
    leaving = np.zeros_like(d)
    for k, length in enumerate(lengths):
        if length > 0:
            leaving |= _shift(d, length) & d.dtype.type(1 << k)
    live = sum(1 << k for k, length in enumerate(lengths) if length > 0)
    step = np.bitwise_count(d & d.dtype.type(live)).astype(np.int32) - np.bitwise_count(leaving).astype(np.int32)
    return np.cumsum(step, axis=0, dtype=np.int32)


def _skew(w: np.ndarray, width: int, first: int = 1) -> np.ndarray:
    """Bit k taken from ``STAGE_CYCLES * (k + first)`` cycles earlier."""
    out = np.zeros_like(w)
    for k in range(width):
        out |= _shift(w, STAGE_CYCLES * (k + first)) & w.dtype.type(1 << k)
    return out


def _labels(n: int, seed: int, balanced: bool) -> np.ndarray:
    if balanced:
        return (np.arange(n) % 2).astype(np.uint8)
    return np.random.default_rng([seed, 0]).integers(0, 2, n, dtype=np.uint8)


def _key(seed: int, key: bytes | None) -> bytes:
    return key if key is not None else int(seed).to_bytes(10, "little")


# --------------------------------------------------------------------------- masked design

def masked_activity(p: NetworkParams, rec: Recorder, images: np.ndarray, sched: bnn.Schedule,
                    offsets: dict) -> tuple[np.ndarray, np.ndarray, list]:
    """Register HD and glitch toggles per cycle for a batch of masked inferences.

    Returns ``(hd, toggles, windows)`` with arrays shaped ``(cycles, batch)``.
    """
    B = images.shape[0]
    T = sched.total_cycles + 1
    N = ACC_WIDTH
    lat = STAGE_CYCLES * N
    names = ("a0", "a1", "b0", "b1", "c0", "c1", "r0", "r1", "r2", "s0", "s1")
    W = {f: np.zeros((T, B), dtype=np.uint32) for f in names}
    hd = np.zeros((T, B), dtype=np.int64)
    weight_bit = np.zeros(T, dtype=np.int64)

    def place(op, cycles):
        for f in names:
            W[f][cycles] = np.asarray(getattr(op, f)).T

    for layer, lr in enumerate(rec.layers):
        issue = sched.issue[layer]
        w = p.weights[layer]
        for i, op in enumerate(lr.ops):
            place(op, issue[:, i])
            weight_bit[issue[:, i]] = w[:, i]
        # accumulator slot written when each result emerges
        for i, op in enumerate(lr.ops):
            hd[issue[:, i] + lat] += (_popcount(op.s0 ^ op.a0) + _popcount(op.s1 ^ op.a1)).T
        hd[issue[:, 0]] += (_popcount(lr.bias.s0) + _popcount(lr.bias.s1)).T
        # activation write register, in completion order
        done = issue[:, -1] + lat
        order = np.argsort(done, kind="stable")
        a0, a1 = lr.acts.s0[:, order].T, lr.acts.s1[:, order].T
        flips = np.concatenate([a0[:1], a0[1:] ^ a0[:-1]]) + np.concatenate([a1[:1], a1[1:] ^ a1[:-1]])
        hd[done[order]] += flips.astype(np.int64)
    for k, op in enumerate(rec.argmax_ops):
        place(op, [sched.compare_issue[k]])
    prev_m, prev_i = None, None
    for k, (m, ix) in enumerate(zip(rec.argmax_max, rec.argmax_index)):
        t = sched.compare_issue[k] + sched.ready_delay + MUX_CYCLES - 1
        if prev_m is not None:
            hd[t] += _popcount(m.s0 ^ prev_m.s0) + _popcount(m.s1 ^ prev_m.s1)
            hd[t] += _popcount(ix.s0 ^ prev_i.s0) + _popcount(ix.s1 ^ prev_i.s1)
        prev_m, prev_i = m, ix

    hd += (weight_bit ^ _shift(weight_bit, 1))[:, None]

    # pixel registers (+a and -a, 9 bits each) load at the start of every input round
    first = sched.issue[0]
    windows = []
    loads = sorted({(int(first[s, i]), i) for s, _ in bnn._groups(first.shape[0], p.depth)
                    for i in range(first.shape[1])})
    m9 = (1 << PIXEL_WIDTH) - 1
    prev = np.zeros(B, dtype=np.uint32)
    for t, i in loads:
        pix = images[:, i].astype(np.uint32)
        hd[t] += _popcount(pix ^ prev) + _popcount(((0 - pix) & m9) ^ ((0 - prev) & m9))
        prev = pix
        windows.append((t, t))

    # operand delay lines feeding bit-stage k, result deskew lines after it
    in_depth = [STAGE_CYCLES * k + 1 for k in range(N)]
    out_depth = [STAGE_CYCLES * (N - 1 - k) for k in range(N)]
    for f in ("a0", "a1", "b0", "b1"):
        hd += _lines_hd(W[f], in_depth)
    for f in ("s0", "s1"):
        hd += _lines_hd(_skew(W[f], N), out_depth)

    # the bit-stages themselves, one word lane per cycle with stage k in bit k
    ports = {f: _skew(W[f], N, 0) for f in FA_PORTS}
    stage_hd, toggles = pipeline_activity(_fa_circuit(), ports, offsets, ones=(1 << N) - 1)
    return hd + stage_hd, toggles, windows


_FA = None


def _fa_circuit():
    global _FA
    if _FA is None:
        _FA = masked_full_adder_circuit()
    return _FA


# --------------------------------------------------------------------------- unmasked design

def unmasked_op_cycles(p: NetworkParams) -> list[np.ndarray]:
    """Issue cycle of (node, input) for the sequential baseline."""
    out, t = [], 0
    for n_in, n_out in zip(p.dims[:-1], p.dims[1:]):
        out.append(t + np.arange(n_out * n_in).reshape(n_out, n_in))
        t += n_in * n_out + bnn.CONTROL_CYCLES
    return out


def unmasked_activity(p: NetworkParams, images: np.ndarray) -> tuple[np.ndarray, np.ndarray, list]:
    B = images.shape[0]
    T = bnn.unmasked_cycles(p)
    N = ACC_WIDTH
    full = (1 << N) - 1
    X = np.zeros((T, B), dtype=np.uint32)  # accumulator read
    Y = np.zeros((T, B), dtype=np.uint32)  # operand
    pix = np.zeros((T, B), dtype=np.uint32)
    wbit = np.zeros(T, dtype=np.uint32)
    act_reg = np.zeros((T, B), dtype=np.uint32)
    cycles = unmasked_op_cycles(p)
    x = images.astype(np.int64)
    windows = []
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        signs = 2 * w.astype(np.int64) - 1
        if k == 0:
            contrib = x[:, None, :] * signs[None]
            pix[cycles[0]] = images.T[None].astype(np.uint32)
            start, end = int(cycles[0].min()), int(cycles[0].max())
            windows.append((start, end))
        else:
            contrib = (2 * x[:, None, :] - 1) * signs[None]
        acc = b[None, :, None] + np.concatenate([np.zeros_like(contrib[..., :1]), np.cumsum(contrib, axis=2)[..., :-1]], axis=2)
        X[cycles[k]] = (acc & full).astype(np.uint32).transpose(1, 2, 0)
        Y[cycles[k]] = (contrib & full).astype(np.uint32).transpose(1, 2, 0)
        wbit[cycles[k]] = w
        sums = acc[..., -1] + contrib[..., -1]
        x = (sums >= 0).astype(np.int64)
        act_reg[cycles[k][:, -1] + 1] = x.T.astype(np.uint32)
    # arg-max: one compare per cycle on the running maximum
    t0 = int(cycles[-1].max()) + 1 + bnn.CONTROL_CYCLES
    best = sums[:, 0].copy()
    maxreg = np.zeros((T, B), dtype=np.uint32)
    for k in range(p.output_count):
        best = np.maximum(best, sums[:, k])
        maxreg[t0 + k] = (best & full).astype(np.uint32)
    for t in range(t0 + p.output_count, T):
        maxreg[t] = maxreg[t0 + p.output_count - 1]

    hd = _popcount(X ^ _shift(X, 1)) + _popcount(Y ^ _shift(Y, 1)) + _popcount(pix ^ _shift(pix, 1))
    hd += _popcount(maxreg ^ _shift(maxreg, 1)) + (wbit ^ _shift(wbit, 1))[:, None]
    hd += _popcount(act_reg ^ _shift(act_reg, 1))

    ports = {f"x{k}": ((X >> k) & 1).astype(np.uint8) for k in range(N)}
    ports.update({f"y{k}": ((Y >> k) & 1).astype(np.uint8) for k in range(N)})
    ports["cin"] = np.zeros((T, B), dtype=np.uint8)
    _, toggles = pipeline_activity(_rca(), ports)
    return hd, toggles, windows


_RCA = None


def _rca():
    global _RCA
    if _RCA is None:
        _RCA = ripple_adder(ACC_WIDTH)
    return _RCA


# --------------------------------------------------------------------------- capture

@dataclass(frozen=True)
class CaptureJob:
    design: str
    cfg: LeakageModelConfig
    prng_on: bool
    seed: int
    key: bytes
    params: NetworkParams | None
    fixed_image: np.ndarray | None
    labels: np.ndarray


def _batch(job: CaptureJob, start: int, stop: int) -> tuple[np.ndarray, list]:
    labels = job.labels[start:stop]
    B = len(labels)
    rng = np.random.default_rng([job.seed, 1, start])
    cfg = job.cfg
    if job.design == "gate_array":
        hd, tog = _gate_array_batch(labels, rng, job, start, stop)
        windows = []
    else:
        p = job.params
        images = np.where(labels[:, None] == 0, job.fixed_image[None],
                          rng.integers(0, 256, (B, p.input_count), dtype=np.uint8)).astype(np.uint8)
        if job.design == "unmasked":
            hd, tog, windows = unmasked_activity(p, images)
        else:
            prng = TriviumBank(job.key, [lane_iv(i) for i in range(start, stop)]) if job.prng_on else ZeroPrng()
            rec = Recorder()
            bnn.masked_forward(p, images, prng, rec)
            offsets = {f: rng.integers(0, cfg.jitter + 1, B) for f in FA_PORTS} if cfg.jitter else None
            hd, tog, windows = masked_activity(p, rec, images, bnn.schedule(p), offsets)
    samples = cfg.alpha_reg * hd.T + cfg.alpha_glitch * tog.T
    if cfg.noise_sigma:
        samples = samples + rng.normal(0.0, cfg.noise_sigma, samples.shape)
    return samples.astype(np.float32), windows


def _gate_array_batch(labels, rng, job: CaptureJob, start, stop):
    """Secrets a, b: fixed class uses a = b = 1, random class draws them uniformly."""
    B = len(labels)
    c = gate_array(GATE_ARRAY_SIZE)
    secret = np.where(labels[:, None] == 0, 1, rng.integers(0, 2, (B, 2))).astype(np.uint8)
    if job.prng_on:
        bits = TriviumBank(job.key, [lane_iv(i) for i in range(start, stop)]).bits((B, 2 + GATE_ARRAY_SIZE))
    else:
        bits = np.zeros((B, 2 + GATE_ARRAY_SIZE), dtype=np.uint8)
    ports = {"a0": bits[:, 0], "a1": secret[:, 0] ^ bits[:, 0], "b0": bits[:, 1], "b1": secret[:, 1] ^ bits[:, 1]}
    for i in range(GATE_ARRAY_SIZE):
        ports[f"r{i}"] = bits[:, 2 + i]
    offsets = ({w: rng.integers(0, job.cfg.jitter + 1, B) for w in c.port_wires} if job.cfg.jitter else None)
    sim = BatchSimulator(c, B)
    hd = np.zeros((GATE_ARRAY_CYCLES, B), dtype=np.int64)
    tog = np.zeros_like(hd)
    # input registers load the shares in cycle 0, from a cleared state
    hd[0] = sum(ports[w].astype(np.int64) for w in ports)
    for t in range(GATE_ARRAY_CYCLES):
        res, h = sim.step(ports, offsets)
        hd[t] += h
        tog[t] = res.toggles
    return hd, tog


def _run(args):
    job, start, stop = args
    return _batch(job, start, stop)


def capture_batches(design: str, n: int, cfg: LeakageModelConfig = LeakageModelConfig(),
                    fixed_image=None, prng_mode: str = "on", seed: int = 0, params: NetworkParams | None = None,
                    key: bytes | None = None, balanced: bool = False, workers: int = 1,
                    batch_size: int | None = None) -> Iterator[tuple[int, np.ndarray, np.ndarray, list]]:
    """Yield ``(start, labels, samples, windows)`` batches in trace order."""
    if design not in DESIGNS:
        raise ValueError(f"unknown design {design!r}; choose from {DESIGNS}")
    if n < 2:
        raise ValueError("need at least two traces")
    if prng_mode not in ("on", "off"):
        raise ValueError("prng_mode is 'on' or 'off'")
    if design != "gate_array":
        params = params if params is not None else bnn.generate_params(bnn.DESK_DIMS, seed)
        if fixed_image is None:
            fixed_image = np.full(params.input_count, FIXED_PIXEL, dtype=np.uint8)
        fixed_image = np.asarray(fixed_image, dtype=np.uint8)
        if fixed_image.shape != (params.input_count,):
            raise ValueError(f"fixed image must have {params.input_count} pixels")
    labels = _labels(n, seed, balanced)
    job = CaptureJob(design, cfg, prng_mode == "on", seed, _key(seed, key), params, fixed_image, labels)
    size = batch_size or BATCH[design]
    spans = [(s, min(s + size, n)) for s in range(0, n, size)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for (s, e), (samples, windows) in zip(spans, pool.map(_run, [(job, s, e) for s, e in spans])):
                yield s, labels[s:e], samples, windows
    else:
        for s, e in spans:
            samples, windows = _batch(job, s, e)
            yield s, labels[s:e], samples, windows


def capture(design: str, n: int, cfg: LeakageModelConfig = LeakageModelConfig(), fixed_image=None,
            prng_mode: str = "on", seed: int = 0, params: NetworkParams | None = None,
            key: bytes | None = None, balanced: bool = False, workers: int = 1,
            batch_size: int | None = None) -> TraceSet:
    """Capture ``n`` traces into memory. See :func:`capture_batches` for streaming."""
    chunks, windows = [], []
    for _, _, samples, windows in capture_batches(design, n, cfg, fixed_image, prng_mode, seed, params,
                                                  key, balanced, workers, batch_size):
        chunks.append(samples)
    labels = _labels(n, seed, balanced)
    meta = {"design": design, "config": asdict(cfg), "config_hash": cfg.digest(), "seed": seed,
            "prng": prng_mode, "windows": [list(w) for w in windows]}
    if params is not None or design != "gate_array":
        meta["dims"] = list((params or bnn.generate_params(bnn.DESK_DIMS, seed)).dims)
    flags = (FLAG_PRNG if prng_mode == "on" else 0) | (FLAG_BALANCED if balanced else 0)
    return TraceSet(labels, np.concatenate(chunks), meta, flags)
