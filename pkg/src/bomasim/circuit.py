"""Delta-cycle, glitch-aware netlist simulation.

Within a clock cycle time advances in integer *deltas*. A gate with delay ``k``
shows at delta ``d + k`` the function of its inputs at delta ``d`` (transport
delay), so unequal arrival times produce transient values (glitches) before a
wire settles. Register outputs launch at delta 0; each input port becomes valid
at its own arrival offset. At the end of the cycle registers sample their
settled ``d`` wires.

Two engines share these semantics:

* :class:`Simulator` -- scalar and event driven, the reference kernel.
* :func:`simulate_cycle` -- vectorised over numpy lanes, evaluating each gate
  only inside the window of deltas where its inputs can move. Lanes may be
  0/1 ``uint8`` bits or wider unsigned words whose bits are independent
  copies of the circuit (``ones`` marks the live bits).
"""
from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field, replace
from graphlib import CycleError, TopologicalSorter
from typing import Callable, Mapping, Sequence

import numpy as np

DELTA_BUDGET = 64
KINDS = ("AND", "XOR", "NOT", "LUT4x2", "CONST")


class CircuitError(ValueError):
    pass


class UnsettledCircuit(RuntimeError):
    pass


class SpaceTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Gate:
    id: int
    kind: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    delay: int = 1
    tables: tuple[int, ...] = ()  # LUT4x2: one 16-entry truth table per output
    value: int = 0  # CONST


@dataclass(frozen=True)
class Register:
    d: str
    q: str


@dataclass(frozen=True)
class Port:
    wire: str
    offset: int = 0


def _lut_scalar(table: int, ins: Sequence[int]) -> int:
    idx = sum((v & 1) << j for j, v in enumerate(ins))
    return (table >> idx) & 1


def eval_gate(g: Gate, ins: Sequence, ones=1) -> list:
    """Evaluate a gate on scalars or arrays; NOT and CONST are relative to ``ones``."""
    k = g.kind
    if k == "AND":
        return [ins[0] & ins[1]]
    if k == "XOR":
        return [ins[0] ^ ins[1]]
    if k == "NOT":
        return [ins[0] ^ ones]
    if k == "CONST":
        return [ones if g.value else ones & 0]
    # LUT4x2: sum of minterms, valid bitwise for packed words
    outs = []
    for table in g.tables:
        acc = ones & 0
        for m in range(16):
            if (table >> m) & 1:
                term = ones
                for j in range(4):
                    term = term & (ins[j] if (m >> j) & 1 else ins[j] ^ ones)
                acc = acc | term
        outs.append(acc)
    return outs


class Circuit:
    """Immutable gate/register netlist with per-port arrival offsets."""

    def __init__(self, gates: Sequence[Gate], registers: Sequence[Register] = (),
                 inputs: Sequence[Port] = (), probes: Sequence[str] = ()):
        self.gates = tuple(gates)
        self.registers = tuple(registers)
        self.inputs = tuple(inputs)
        self.probes = tuple(probes)
        self.driver: dict[str, object] = {}
        for src in itertools.chain(self.inputs, self.registers, self.gates):
            outs = src.outputs if isinstance(src, Gate) else ((src.q,) if isinstance(src, Register) else (src.wire,))
            for w in outs:
                if w in self.driver:
                    raise CircuitError(f"wire {w!r} has more than one driver")
                self.driver[w] = src
        for g in self.gates:
            if g.kind not in KINDS:
                raise CircuitError(f"unknown gate kind {g.kind!r}")
            if g.delay < 1:
                raise CircuitError(f"gate {g.id} delay must be >= 1")
            for w in g.inputs:
                if w not in self.driver:
                    raise CircuitError(f"gate {g.id} reads undriven wire {w!r}")
        for r in self.registers:
            if r.d not in self.driver:
                raise CircuitError(f"register {r.q!r} samples undriven wire {r.d!r}")
        self.wires = tuple(self.driver)
        self.fanout: dict[str, list[Gate]] = defaultdict(list)
        for g in self.gates:
            for w in g.inputs:
                self.fanout[w].append(g)
        ts = TopologicalSorter({g.id: {self.driver[w].id for w in g.inputs
                                       if isinstance(self.driver[w], Gate)} for g in self.gates})
        try:
            by_id = {g.id: g for g in self.gates}
            self.order = tuple(by_id[i] for i in ts.static_order())
        except CycleError as exc:
            raise CircuitError(f"combinational loop through gates {exc.args[1]}") from None
        self.port_wires = tuple(p.wire for p in self.inputs)

    def with_offsets(self, offsets: Mapping[str, int]) -> "Circuit":
        unknown = set(offsets) - set(self.port_wires)
        if unknown:
            raise CircuitError(f"no such input ports: {sorted(unknown)}")
        ports = [Port(p.wire, offsets.get(p.wire, p.offset)) for p in self.inputs]
        return Circuit(self.gates, self.registers, ports, self.probes)

    def netlist(self) -> str:
        lines = [f"{g.id} {g.kind} {','.join(g.inputs) or '-'} {','.join(g.outputs)} {g.delay}"
                 for g in self.gates]
        lines += [f"r{i} REG {r.d} {r.q} 0" for i, r in enumerate(self.registers)]
        return "\n".join(lines) + "\n"


class CircuitBuilder:
    """Incremental netlist construction with automatic wire naming."""

    def __init__(self, prefix: str = ""):
        self.prefix = prefix
        self.gates: list[Gate] = []
        self.registers: list[Register] = []
        self.ports: list[Port] = []
        self._n = 0

    def _name(self, name):
        if name is None:
            self._n += 1
            return f"{self.prefix}n{self._n}"
        return self.prefix + name

    def input(self, name: str, offset: int = 0) -> str:
        w = self.prefix + name
        self.ports.append(Port(w, offset))
        return w

    def _gate(self, kind, inputs, out=None, delay=1, **kw) -> str:
        w = self._name(out)
        self.gates.append(Gate(len(self.gates), kind, tuple(inputs), (w,), delay, **kw))
        return w

    def and_(self, a, b, out=None, delay=1):
        return self._gate("AND", (a, b), out, delay)

    def xor(self, a, b, out=None, delay=1):
        return self._gate("XOR", (a, b), out, delay)

    def not_(self, a, out=None, delay=1):
        return self._gate("NOT", (a,), out, delay)

    def const(self, value: int, out=None):
        return self._gate("CONST", (), out, 1, value=int(value) & 1)

    def lut4x2(self, inputs, f: Callable[..., tuple[int, int]], outs=(None, None), delay=1):
        tables = [0, 0]
        for m in range(16):
            bits = [(m >> j) & 1 for j in range(4)]
            for k, v in enumerate(f(*bits)):
                tables[k] |= (v & 1) << m
        names = tuple(self._name(o) for o in outs)
        self.gates.append(Gate(len(self.gates), "LUT4x2", tuple(inputs), names, delay, tables=tuple(tables)))
        return names

    def reg(self, d: str, q=None) -> str:
        w = self._name(q)
        self.registers.append(Register(d, w))
        return w

    def build(self, probes: Sequence[str] = ()) -> Circuit:
        return Circuit(self.gates, self.registers, self.ports, probes)


# --------------------------------------------------------------------------- scalar

def settled_eval(c: Circuit, inputs: Mapping[str, int], regs: Mapping[str, int] | None = None,
                 ones=1) -> dict:
    """Topological evaluation: every wire's settled value for one cycle."""
    regs = regs or {}
    vals = {}
    for p in c.inputs:
        vals[p.wire] = inputs[p.wire]
    for r in c.registers:
        vals[r.q] = regs.get(r.q, ones & 0)
    for g in c.order:
        for w, v in zip(g.outputs, eval_gate(g, [vals[i] for i in g.inputs], ones)):
            vals[w] = v
    return vals


def run_settled(c: Circuit, input_seq: Sequence[Mapping[str, int]]) -> list[dict]:
    """Register states after each cycle using settled evaluation only."""
    regs = {r.q: 0 for r in c.registers}
    states = []
    for inputs in input_seq:
        vals = settled_eval(c, inputs, regs)
        regs = {r.q: vals[r.d] for r in c.registers}
        states.append(dict(regs))
    return states


@dataclass
class CycleTrace:
    settled: dict
    toggles: dict
    register_hd: int
    registers: dict
    history: list = field(default_factory=list)  # (delta, wire, value) for every applied change

    @property
    def total_toggles(self) -> int:
        return sum(self.toggles.values())


class Simulator:
    """Event-driven reference kernel; one instance owns its wire and register state."""

    def __init__(self, c: Circuit, budget: int = DELTA_BUDGET):
        self.circuit = c
        self.budget = budget
        self.regs = {r.q: 0 for r in c.registers}
        self.values = settled_eval(c, {p.wire: 0 for p in c.inputs}, self.regs)

    def step(self, cycle_inputs: Mapping[str, int]) -> CycleTrace:
        c = self.circuit
        missing = set(c.port_wires) - set(cycle_inputs)
        if missing:
            raise CircuitError(f"no value for input ports {sorted(missing)}")
        cur = dict(self.values)
        events: dict[int, dict[str, int]] = defaultdict(dict)
        for q, v in self.regs.items():
            events[0][q] = v
        for p in c.inputs:
            events[p.offset][p.wire] = int(cycle_inputs[p.wire])
        toggles: dict[str, int] = defaultdict(int)
        history = []
        while events:
            d = min(events)
            if d > self.budget:
                raise UnsettledCircuit(f"activity at delta {d} exceeds budget {self.budget}")
            changed = []
            for w, v in events.pop(d).items():
                if cur[w] != v:
                    cur[w] = v
                    toggles[w] += 1
                    history.append((d, w, v))
                    changed.append(w)
            touched = {g.id: g for w in changed for g in c.fanout.get(w, ())}
            for g in touched.values():
                for w, v in zip(g.outputs, eval_gate(g, [cur[i] for i in g.inputs])):
                    events[d + g.delay][w] = v
        new_regs = {r.q: cur[r.d] for r in c.registers}
        hd = sum(new_regs[q] ^ self.regs[q] for q in new_regs)
        self.values = cur
        self.regs = new_regs
        return CycleTrace(cur, dict(toggles), hd, dict(new_regs), history)


# --------------------------------------------------------------------------- vectorised

class Wave:
    """Values of one wire across a cycle: ``old`` before ``lo``, ``series`` inside, last value after."""

    __slots__ = ("old", "lo", "series")

    def __init__(self, old, lo=0, series=()):
        self.old = old
        self.lo = lo
        self.series = list(series)

    @property
    def hi(self):
        return self.lo + len(self.series) - 1

    @property
    def final(self):
        return self.series[-1] if self.series else self.old

    def at(self, d):
        if not self.series or d < self.lo:
            return self.old
        if d > self.hi:
            return self.series[-1]
        return self.series[d - self.lo]

    def toggles(self):
        if not self.series:
            return 0
        seq = np.stack(np.broadcast_arrays(self.old, *self.series))
        return np.bitwise_count(seq[1:] ^ seq[:-1]).sum(axis=0, dtype=np.int64)


@dataclass
class CycleResult:
    final: dict
    toggles: np.ndarray  # total combinational + port + launch toggles per lane
    waves: dict  # only populated when keep_waves is set


def simulate_cycle(c: Circuit, old: Mapping, ports: Mapping, launch: Mapping,
                   offsets: Mapping | None = None, ones=1, keep_waves=False,
                   budget: int = DELTA_BUDGET) -> CycleResult:
    """Delta-simulate one cycle over all lanes at once.

    ``old`` holds every wire's settled value from the previous cycle, ``ports``
    the new input values, ``launch`` the register contents released at delta 0.
    ``offsets`` overrides port arrival times, per port as an int or a per-lane
    integer array.
    """
    offsets = offsets or {}
    waves: dict[str, Wave] = {}
    remaining = {w: len(c.fanout.get(w, ())) for w in c.wires}
    total = 0
    final = {}

    def retire(w, wave):
        nonlocal total
        if wave.series:
            total = total + wave.toggles()
        final[w] = wave.final
        if keep_waves or remaining[w] > 0:
            waves[w] = wave

    for p in c.inputs:
        off = offsets.get(p.wire, p.offset)
        new = ports[p.wire]
        if np.ndim(off) == 0:
            wave = Wave(old[p.wire], int(off), [new])
        else:
            off = np.asarray(off)
            lo, hi = int(off.min()), int(off.max())
            wave = Wave(old[p.wire], lo, [np.where(off <= d, new, old[p.wire]) for d in range(lo, hi + 1)])
        retire(p.wire, wave)
    for r in c.registers:
        retire(r.q, Wave(old[r.q], 0, [launch[r.q]]))

    for g in c.order:
        ins = [waves[w] for w in g.inputs]
        live = [wv for wv in ins if wv.series]
        if live:
            lo = min(wv.lo for wv in live) + g.delay
            hi = max(wv.hi for wv in live) + g.delay
            if hi > budget:
                raise UnsettledCircuit(f"gate {g.id} active at delta {hi}, budget {budget}")
            cols = [eval_gate(g, [wv.at(d - g.delay) for wv in ins], ones) for d in range(lo, hi + 1)]
            outs = [Wave(old[w], lo, [col[k] for col in cols]) for k, w in enumerate(g.outputs)]
        else:
            outs = [Wave(old[w]) for w in g.outputs]
        for w in g.inputs:
            remaining[w] -= 1
            if remaining[w] == 0 and not keep_waves:
                waves.pop(w, None)
        for w, wave in zip(g.outputs, outs):
            retire(w, wave)
    if np.ndim(total) == 0:
        total = np.zeros(np.shape(next(iter(final.values()))), dtype=np.int64) + total
    return CycleResult(final, total, waves if keep_waves else {})


def reset_state(c: Circuit, lanes: int, dtype=np.uint8, ones=1) -> dict:
    zero = np.zeros(lanes, dtype=dtype)
    return settled_eval(c, {p.wire: zero for p in c.inputs},
                        {r.q: zero for r in c.registers}, ones=np.dtype(dtype).type(ones))


class BatchSimulator:
    """Cycle-by-cycle vectorised simulation of many independent circuit copies."""

    def __init__(self, c: Circuit, lanes: int, dtype=np.uint8, ones=1, budget=DELTA_BUDGET):
        self.circuit = c
        self.ones = np.dtype(dtype).type(ones)
        self.budget = budget
        self.values = reset_state(c, lanes, dtype, ones)
        self.regs = {r.q: self.values[r.q] for r in c.registers}

    def step(self, ports: Mapping, offsets=None, keep_waves=False):
        res = simulate_cycle(self.circuit, self.values, ports, self.regs, offsets,
                             self.ones, keep_waves, self.budget)
        new_regs = {r.q: res.final[r.d] for r in self.circuit.registers}
        hd = sum((np.bitwise_count(new_regs[q] ^ self.regs[q]).astype(np.int64) for q in new_regs),
                 start=np.zeros_like(res.toggles))
        self.values, self.regs = res.final, new_regs
        return res, hd


# --------------------------------------------------------------------------- pipelines

def _register_order(c: Circuit) -> list:
    """Registers and gates in an order where each q series is d shifted by one cycle."""
    deps = {}
    for g in c.gates:
        deps[("g", g.id)] = {("r", c.driver[w].q) if isinstance(c.driver[w], Register) else ("g", c.driver[w].id)
                             for w in g.inputs if not isinstance(c.driver[w], Port)}
    for r in c.registers:
        src = c.driver[r.d]
        deps[("r", r.q)] = set() if isinstance(src, Port) else (
            {("r", src.q)} if isinstance(src, Register) else {("g", src.id)})
    try:
        return list(TopologicalSorter(deps).static_order())
    except CycleError:
        raise CircuitError("pipeline_activity needs a feed-forward circuit (no register loops)") from None


def pipeline_activity(c: Circuit, port_series: Mapping[str, np.ndarray], offsets: Mapping | None = None,
                      ones=1, chunk: int = 1 << 18) -> tuple[np.ndarray, np.ndarray]:
    """Register HD and toggle counts for every cycle of a feed-forward pipeline.

    ``port_series[w]`` has shape ``(T, lanes)``: the value presented on port
    ``w`` in each cycle, starting from reset. Returns ``(hd, toggles)`` both of
    shape ``(T, lanes)``. Per-lane port offsets broadcast over cycles.
    """
    first = next(iter(port_series.values()))
    T, lanes = first.shape
    dtype = first.dtype
    ones = dtype.type(ones)
    zero = np.zeros((1, lanes), dtype=dtype)
    by_id = {g.id: g for g in c.gates}
    regs = {r.q: r for r in c.registers}
    # row 0 is the reset state, so rows [0, T) and [1, T] are the old and new values
    vals = {p.wire: np.concatenate([zero, port_series[p.wire]]) for p in c.inputs}
    for kind, key in _register_order(c):
        if kind == "r":
            d = vals[regs[key].d]
            vals[key] = np.concatenate([zero, zero, d[1:-1]])
        else:
            g = by_id[key]
            for w, v in zip(g.outputs, eval_gate(g, [vals[i] for i in g.inputs], ones)):
                vals[w] = np.broadcast_to(v, (T + 1, lanes)) if np.ndim(v) < 2 else v
    hd = np.zeros((T, lanes), dtype=np.int64)
    for r in c.registers:
        hd += np.bitwise_count(vals[r.d][1:] ^ vals[r.q][1:])
    toggles = np.empty(T * lanes, dtype=np.int64)
    flat = {w: np.ascontiguousarray(v).reshape(-1) for w, v in vals.items()}
    lane_offsets = {}
    for w, off in (offsets or {}).items():
        lane_offsets[w] = np.broadcast_to(off, (T, lanes)).reshape(-1) if np.ndim(off) else off
    n = T * lanes
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        res = simulate_cycle(
            c, {w: v[s:e] for w, v in flat.items()},
            {p.wire: flat[p.wire][lanes + s:lanes + e] for p in c.inputs},
            {r.q: flat[r.q][lanes + s:lanes + e] for r in c.registers},
            {w: (o[s:e] if np.ndim(o) else o) for w, o in lane_offsets.items()}, ones)
        toggles[s:e] = res.toggles
    return hd, toggles.reshape(T, lanes)


# --------------------------------------------------------------------------- probing

@dataclass(frozen=True)
class Violation:
    wire: str
    cycle: int
    delta: int
    offsets: int  # index into the offsets list
    ones_per_secret: tuple


@dataclass
class ProbeReport:
    violations: list
    points: int
    secrets: int

    @property
    def secure(self) -> bool:
        return not self.violations

    def wires(self) -> set:
        return {v.wire for v in self.violations}


def sharing_encoder(shares: Mapping[str, tuple[str, str]], extra: Sequence[str] = ()):
    """Encoder for :func:`probe_independence`: random bits mask each secret, then feed ``extra`` ports."""
    names = list(shares)

    def encode(secret: Mapping[str, int], rand: Sequence[int]) -> dict:
        out = {}
        for i, n in enumerate(names):
            p0, p1 = shares[n]
            out[p0] = rand[i]
            out[p1] = secret[n] ^ rand[i]
        for j, w in enumerate(extra):
            out[w] = rand[len(names) + j]
        return out

    encode.n_random = len(names) + len(extra)
    return encode


def probe_independence(c: Circuit, secrets: Sequence[Mapping[str, int]], n_random: int,
                       encode: Callable, n_cycles: int = 6,
                       offsets: Sequence[Mapping[str, int]] | None = None,
                       limit: int = 1 << 20) -> ProbeReport:
    """Check every wire at every delta for secret-dependent value distributions.

    All ``2**n_random`` randomness assignments are enumerated for each secret;
    inputs are held for ``n_cycles`` cycles starting from reset. A wire at a
    given (cycle, delta) violates first-order probing security when its count
    of ones differs between two secret assignments.
    """
    offsets = list(offsets) if offsets else [{}]
    S, R, O = len(secrets), 1 << n_random, len(offsets)
    if S * R * O > limit:
        raise SpaceTooLarge(f"{O} offsets x {S} secrets x {R} randoms = {S * R * O} points > {limit}")
    rand_bits = [[(k >> j) & 1 for j in range(n_random)] for k in range(R)]
    enc = [encode(s, rb) for s in secrets for rb in rand_bits]
    base = {p.wire: np.array([e[p.wire] for e in enc], dtype=np.uint8) for p in c.inputs}
    ports = {w: np.tile(v, O) for w, v in base.items()}
    lane_off = {p.wire: np.repeat([o.get(p.wire, p.offset) for o in offsets], S * R) for p in c.inputs}
    sim = BatchSimulator(c, S * R * O)
    violations = []
    for cyc in range(n_cycles):
        res, _ = sim.step(ports, lane_off, keep_waves=True)
        span = max((wv.hi for wv in res.waves.values() if wv.series), default=0)
        for w in c.wires:
            wave = res.waves[w]
            for d in range(0, span + 1):
                counts = np.asarray(wave.at(d)).reshape(O, S, R).sum(axis=2, dtype=np.int64)
                bad = np.nonzero((counts != counts[:, :1]).any(axis=1))[0]
                for oi in bad:
                    violations.append(Violation(w, cyc, d, int(oi), tuple(int(x) for x in counts[oi])))
    return ProbeReport(violations, S * R * O, S)
