"""Masked ripple-carry arithmetic built from Trichina AND gates.

Words are share pairs of unsigned integers (Python ints or numpy ``uint32``
arrays, which makes every routine batch-capable). Randomness for an N-bit
add/sub is ``3N`` bits laid out per bit position ``k`` as ``r0, r1, r2`` at
indices ``3k, 3k+1, 3k+2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masked import MaskedBit, MaskedWord, WidthMismatch, masked_xor, trichina_and_ref

STAGE_CYCLES = 5


class StructuralHazard(RuntimeError):
    pass


def masked_full_adder(a: MaskedBit, b: MaskedBit, cin: MaskedBit, r0, r1, r2):
    """Return ``(sum, cout)``; three Trichina gates, one fresh bit each."""
    s = masked_xor(masked_xor(a, b), cin)
    d = trichina_and_ref(a, b, r0)
    e = trichina_and_ref(b, cin, r1)
    f = trichina_and_ref(cin, a, r2)
    return s, masked_xor(masked_xor(d, e), f)


def _tg(a0, a1, b0, b1, r):
    return r ^ (a0 & b0) ^ (a0 & b1) ^ (a1 & b0) ^ (a1 & b1)


def _pack(bits, width, stride, phase):
    """Pack ``bits[..., stride*k + phase]`` for k < width into one word per element."""
    sel = np.asarray(bits, dtype=np.uint32)[..., phase::stride][..., :width]
    weights = np.left_shift(np.uint32(1), np.arange(width, dtype=np.uint32))
    out = (sel * weights).sum(axis=-1, dtype=np.uint32)
    return int(out) if out.ndim == 0 else out


@dataclass
class AddRecord:
    """Share words seen by the adder for one operation (bit-stage inputs)."""
    a0: object
    a1: object
    b0: object
    b1: object
    c0: object  # carry into each bit position
    c1: object
    r0: object
    r1: object
    r2: object
    s0: object
    s1: object


def add_core(a0, a1, b0, b1, cin0, cin1, rand, width: int) -> AddRecord:
    """Ripple ``a + b + cin`` on shares; ``rand`` has trailing axis ``3*width``."""
    rand = np.asarray(rand)
    if rand.shape[-1] < 3 * width:
        raise ValueError(f"need {3 * width} random bits per operation, got {rand.shape[-1]}")
    r0, r1, r2 = (_pack(rand, width, 3, p) for p in range(3))
    # the a.b products do not depend on the carry, so all bits go at once
    d1 = _tg(a0, a1, b0, b1, r0)
    c0, c1 = cin0, cin1
    cw0, cw1 = a0 & 0, a0 & 0
    for k in range(width):
        bit = 1 << k
        cw0 = cw0 | c0 * bit
        cw1 = cw1 | c1 * bit
        if k == width - 1:
            break
        ak0, ak1 = (a0 >> k) & 1, (a1 >> k) & 1
        bk0, bk1 = (b0 >> k) & 1, (b1 >> k) & 1
        rk1, rk2 = (r1 >> k) & 1, (r2 >> k) & 1
        e1 = _tg(bk0, bk1, c0, c1, rk1)
        f1 = _tg(c0, c1, ak0, ak1, rk2)
        c0 = ((r0 >> k) & 1) ^ rk1 ^ rk2
        c1 = ((d1 >> k) & 1) ^ e1 ^ f1
    return AddRecord(a0, a1, b0, b1, cw0, cw1, r0, r1, r2, a0 ^ b0 ^ cw0, a1 ^ b1 ^ cw1)


def _draw(rand, shape, n):
    if hasattr(rand, "bits"):
        return rand.bits(tuple(shape) + (n,))
    return rand


def masked_add_sub(x: MaskedWord, y: MaskedWord, sub, rand, record: list | None = None) -> MaskedWord:
    """``x + y`` (sub=0) or ``x - y`` (sub=1) modulo ``2**N`` on shares.

    Subtraction flips every bit of ``y``'s share 1 and sets carry-in (0, 1).
    ``rand`` is a bit source with ``bits(shape)`` or an array of ``3N`` bits
    per element.
    """
    if x.width != y.width:
        raise WidthMismatch(f"widths differ: {x.width} vs {y.width}")
    n = x.width
    full = (1 << n) - 1
    sub_arr = np.asarray(sub)
    if sub_arr.ndim:
        sub = sub_arr.astype(np.uint32)
        flip = sub * np.uint32(full)
    else:
        sub = int(sub) & 1
        flip = full if sub else 0
    y1 = y.s1 ^ flip
    shape = np.broadcast_shapes(np.shape(x.s0), np.shape(y.s0), np.shape(sub))
    bits = _draw(rand, shape, 3 * n)
    rec = add_core(x.s0, x.s1, y.s0, y1, sub & 0, sub, bits, n)
    if record is not None:
        record.append(rec)
    return MaskedWord(n, rec.s0 & full, rec.s1 & full)


class PipelinedAdder:
    """Cycle-accounted masked N-bit adder accepting one operation per cycle.

    Results emerge ``5N`` cycles after issue and can feed a dependent
    operation from the following cycle on.
    """

    def __init__(self, width: int = 20, rand=None):
        self.width = width
        self.latency = STAGE_CYCLES * width
        self.rand = rand
        self.cycle = 0
        self.fresh_bits = 0
        self.last_result_cycle = -1
        self._ready: list[int] = []
        self._results: list[MaskedWord] = []

    def ready_cycle(self, handle: int) -> int:
        return self._ready[handle]

    def issue(self, x: MaskedWord, y: MaskedWord, sub=0, depends=(), rand=None) -> int:
        for h in depends:
            if self.cycle < self._ready[h]:
                raise StructuralHazard(
                    f"cycle {self.cycle}: operand from op {h} is ready at cycle {self._ready[h]}")
        src = rand if rand is not None else self.rand
        out = masked_add_sub(x, y, sub, src)
        self.fresh_bits += 3 * self.width
        handle = len(self._results)
        self._results.append(out)
        self._ready.append(self.cycle + self.latency + 1)
        self.last_result_cycle = self.cycle + self.latency
        self.cycle += 1
        return handle

    def stall(self, n: int = 1):
        self.cycle += n

    def result(self, handle: int) -> MaskedWord:
        return self._results[handle]

    @property
    def total_cycles(self) -> int:
        """Cycle at which the most recent result emerges."""
        return self.last_result_cycle
