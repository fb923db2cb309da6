"""Two-share Boolean masking: data model and the linear gadgets.

A secret bit ``v`` is held as ``(s0, s1)`` with ``v = s0 ^ s1``. Share 0 carries
the fresh mask; operations with public constants (NOT, XOR with a public bit)
touch share 1 only, so that with an all-zero PRNG share 0 stays 0 everywhere and
share 1 equals the unmasked value.

The functions accept Python ints or numpy integer arrays for the shares, so the
same code serves exhaustive scalar tests and the vectorised engine.
"""
from __future__ import annotations

from dataclasses import dataclass

MAX_WIDTH = 32


class WidthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MaskedBit:
    s0: int
    s1: int


@dataclass(frozen=True)
class MaskedWord:
    width: int
    s0: int
    s1: int

    def __post_init__(self):
        if not 1 <= self.width <= MAX_WIDTH:
            raise ValueError(f"word width must be in 1..{MAX_WIDTH}, got {self.width}")

    def bit(self, k: int) -> MaskedBit:
        return MaskedBit((self.s0 >> k) & 1, (self.s1 >> k) & 1)


class RandomnessCounter:
    """Tallies fresh mask bits and Trichina gates used by a computation."""

    def __init__(self):
        self.fresh_bits = 0
        self.trichina_gates = 0

    def add(self, bits: int, gates: int = 0):
        self.fresh_bits += bits
        self.trichina_gates += gates

    @property
    def input_mask_accounting(self) -> int:
        # alternative count: one output mask plus two input-sharing masks per gate
        return 3 * self.trichina_gates


def mask(value, r) -> MaskedBit:
    return MaskedBit(r, value ^ r)


def mask_word(value: int, r: int, width: int) -> MaskedWord:
    m = (1 << width) - 1
    return MaskedWord(width, r & m, (value ^ r) & m)


def masked_xor(a: MaskedBit, b: MaskedBit) -> MaskedBit:
    return MaskedBit(a.s0 ^ b.s0, a.s1 ^ b.s1)


def masked_xor_public(a: MaskedBit, bit) -> MaskedBit:
    return MaskedBit(a.s0, a.s1 ^ bit)


def masked_not(a: MaskedBit) -> MaskedBit:
    return MaskedBit(a.s0, a.s1 ^ 1)


def trichina_and_ref(a: MaskedBit, b: MaskedBit, r) -> MaskedBit:
    """Functional Trichina AND: fresh ``r`` becomes share 0, the chain share 1."""
    x = r ^ (a.s0 & b.s0)
    x ^= a.s0 & b.s1
    x ^= a.s1 & b.s0
    x ^= a.s1 & b.s1
    return MaskedBit(r, x)


def trichina_intermediates(a: MaskedBit, b: MaskedBit, r) -> list:
    """Every intermediate of the defining expression, for probing tests."""
    p00, p01, p10, p11 = a.s0 & b.s0, a.s0 & b.s1, a.s1 & b.s0, a.s1 & b.s1
    x1 = r ^ p00
    x2 = x1 ^ p01
    x3 = x2 ^ p10
    x4 = x3 ^ p11
    return [p00, p01, p10, p11, x1, x2, x3, x4]


def unmask(x):
    """Recombine shares. Test and diagnostic code only; audited."""
    if isinstance(x, MaskedWord):
        return (x.s0 ^ x.s1) & ((1 << x.width) - 1)
    return x.s0 ^ x.s1


def to_signed(value, width: int):
    """Two's-complement reading of ``width``-bit values; ints or integer arrays."""
    value = value & ((1 << width) - 1)
    return value - ((value >> (width - 1)) & 1) * (1 << width)
