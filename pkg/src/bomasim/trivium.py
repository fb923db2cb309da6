"""TRIVIUM keystream generator used as the mask source for every gadget.

Two generators share the same recurrence:

* :class:`Trivium` -- one keystream, stepped 64 clocks at a time with Python
  integers. This is the PRNG state handed to a single inference.
* :class:`TriviumBank` -- many independent keystreams (one per lane), bit-sliced
  across lanes with numpy. Trace capture uses one lane per trace.

Loading follows the eSTREAM reference: the 10 key bytes are read as a
little-endian 80-bit integer whose most significant bit lands in ``s1``; the
IV is loaded the same way into ``s94..s173``. Keystream bits are packed
least-significant-bit first when turned into bytes.

The recurrence is written on the three bit sequences ``a`` (entering ``s1``),
``b`` (entering ``s94``) and ``c`` (entering ``s178``)::

    a[t] = c[t-66] ^ c[t-111] ^ c[t-109] & c[t-110] ^ a[t-69]
    b[t] = a[t-66] ^ a[t-93]  ^ a[t-91]  & a[t-92]  ^ b[t-78]
    c[t] = b[t-69] ^ b[t-84]  ^ b[t-82]  & b[t-83]  ^ c[t-87]
    z[t] = a[t-66] ^ a[t-93] ^ b[t-69] ^ b[t-84] ^ c[t-66] ^ c[t-111]

The smallest lag is 66, so 64 consecutive outputs never depend on each other.
"""
from __future__ import annotations

import math

import numpy as np

MAX_OUTPUT_BITS = 2**64 - 1
WARMUP_CLOCKS = 4 * 288
_BLOCK = 64
_M64 = (1 << 64) - 1
_M128 = (1 << 128) - 1


class OutputSpaceExhausted(RuntimeError):
    """Raised when a keystream would exceed 2**64 - 1 output bits; reseed."""


def parse_hex80(text: str) -> bytes:
    """Parse a 20-hex-digit key or IV string into 10 bytes."""
    cleaned = text.strip().lower().removeprefix("0x")
    if len(cleaned) != 20:
        raise ValueError(f"expected 20 hex digits, got {len(cleaned)}: {text!r}")
    return bytes.fromhex(cleaned)


def _load_bits(data: bytes) -> list[int]:
    if len(data) != 10:
        raise ValueError("TRIVIUM key and IV are 80 bits (10 bytes)")
    lsb_first = [(data[i // 8] >> (i % 8)) & 1 for i in range(80)]
    return lsb_first[::-1]


def _initial_state(key: bytes, iv: bytes) -> list[int]:
    s = [0] * 288
    s[0:80] = _load_bits(key)
    s[93:173] = _load_bits(iv)
    s[285] = s[286] = s[287] = 1
    return s


def _check_budget(emitted: int, n: int) -> None:
    if n < 0:
        raise ValueError("bit count must be non-negative")
    if emitted + n > MAX_OUTPUT_BITS:
        raise OutputSpaceExhausted(
            f"{emitted} bits already emitted; {n} more would pass the 2**64 - 1 bound"
        )


class Trivium:
    """A single seeded TRIVIUM keystream (the PRNG state).

    ``bits_emitted`` counts keystream bits handed out; it may be set directly
    to probe the reseed boundary.
    """

    def __init__(self, key: bytes, iv: bytes):
        s = _initial_state(key, iv)
        # history integers: bit j holds the sequence value j+1 clocks ago
        self._a = sum(bit << j for j, bit in enumerate(s[0:93]))
        self._b = sum(bit << j for j, bit in enumerate(s[93:177]))
        self._c = sum(bit << j for j, bit in enumerate(s[177:288]))
        for _ in range(WARMUP_CLOCKS // _BLOCK):
            self._block()
        self.bits_emitted = 0
        self._pending = np.zeros(0, dtype=np.uint8)

    def _block(self) -> int:
        a, b, c = self._a, self._b, self._c
        # window(x, lag): 64 values x[t-lag .. t-lag+63], oldest in bit 63
        a66, a69, a91, a92, a93 = (a >> 2) & _M64, (a >> 5) & _M64, (a >> 27) & _M64, (a >> 28) & _M64, (a >> 29) & _M64
        b69, b78, b82, b83, b84 = (b >> 5) & _M64, (b >> 14) & _M64, (b >> 18) & _M64, (b >> 19) & _M64, (b >> 20) & _M64
        c66, c87, c109, c110, c111 = (c >> 2) & _M64, (c >> 23) & _M64, (c >> 45) & _M64, (c >> 46) & _M64, (c >> 47) & _M64
        z = a66 ^ a93 ^ b69 ^ b84 ^ c66 ^ c111
        new_a = c66 ^ c111 ^ (c109 & c110) ^ a69
        new_b = a66 ^ a93 ^ (a91 & a92) ^ b78
        new_c = b69 ^ b84 ^ (b82 & b83) ^ c87
        self._a = ((a << 64) | new_a) & _M128
        self._b = ((b << 64) | new_b) & _M128
        self._c = ((c << 64) | new_c) & _M128
        return z

    @property
    def state(self) -> np.ndarray:
        """Register contents ``s1..s288`` at the generator's current clock.

        Output is produced in 64-clock blocks, so this may run ahead of the
        last bit returned by :meth:`next_bits`.
        """
        s = [(self._a >> j) & 1 for j in range(93)]
        s += [(self._b >> j) & 1 for j in range(84)]
        s += [(self._c >> j) & 1 for j in range(111)]
        return np.array(s, dtype=np.uint8)

    def next_bits(self, n: int) -> np.ndarray:
        """Return the next ``n`` keystream bits as a uint8 array."""
        _check_budget(self.bits_emitted, n)
        have = len(self._pending)
        if n > have:
            blocks = math.ceil((n - have) / _BLOCK)
            raw = b"".join(self._block().to_bytes(8, "big") for _ in range(blocks))
            fresh = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))
            self._pending = np.concatenate([self._pending, fresh])
        out, self._pending = self._pending[:n], self._pending[n:]
        self.bits_emitted += n
        return out

    def bits(self, shape) -> np.ndarray:
        """Draw ``prod(shape)`` bits in C order and reshape."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        return self.next_bits(math.prod(shape)).reshape(shape)

    def keystream_bytes(self, n: int) -> bytes:
        bits = self.next_bits(8 * n).reshape(n, 8)
        return np.packbits(bits, axis=1, bitorder="little").tobytes()


def seed(key: bytes | str, iv: bytes | str) -> Trivium:
    """Load key and IV and run the 1152 warm-up clocks."""
    if isinstance(key, str):
        key = parse_hex80(key)
    if isinstance(iv, str):
        iv = parse_hex80(iv)
    return Trivium(key, iv)


def next_bits(state: Trivium, n: int) -> np.ndarray:
    return state.next_bits(n)


def lane_iv(index: int) -> bytes:
    """IV for worker/trace ``index``: the index as a little-endian 80-bit integer."""
    return int(index).to_bytes(10, "little")


class TriviumBank:
    """Independent TRIVIUM keystreams, one per lane, stepped together.

    Lanes are bit-sliced into uint64 words so one numpy op advances 64 lanes.
    :meth:`bits` expects the lane axis first: ``bits((lanes, *rest))`` gives
    each lane ``prod(rest)`` bits from its own stream.
    """

    _HIST = 128
    _CHUNK_BLOCKS = 32

    def __init__(self, key: bytes, ivs: list[bytes]):
        self.lanes = len(ivs)
        if self.lanes == 0:
            raise ValueError("bank needs at least one lane")
        states = np.array([_initial_state(key, iv) for iv in ivs], dtype=np.uint8)
        # history rows in time order, row -1 is the most recent value
        a = np.zeros((self._HIST, self.lanes), dtype=np.uint8)
        b = np.zeros_like(a)
        c = np.zeros_like(a)
        a[-93:] = states[:, 0:93].T[::-1]
        b[-84:] = states[:, 93:177].T[::-1]
        c[-111:] = states[:, 177:288].T[::-1]
        self._a, self._b, self._c = (self._pack(x) for x in (a, b, c))
        for _ in range(WARMUP_CLOCKS // _BLOCK):
            self._block()
        self.bits_emitted = 0
        self._pending = np.zeros((self.lanes, 0), dtype=np.uint8)

    def _pack(self, rows: np.ndarray) -> np.ndarray:
        padded = np.zeros((rows.shape[0], -(-self.lanes // 64) * 64), dtype=np.uint8)
        padded[:, : self.lanes] = rows
        return np.packbits(padded, axis=1, bitorder="little").view(np.uint64)

    def _unpack(self, words: np.ndarray) -> np.ndarray:
        bits = np.unpackbits(np.ascontiguousarray(words).view(np.uint8), axis=1, bitorder="little")
        return bits[:, : self.lanes]

    def _block(self) -> np.ndarray:
        h = self._HIST
        a, b, c = self._a, self._b, self._c

        def w(x, lag):
            return x[h - lag : h - lag + _BLOCK]

        a66, a93, b69, b84, c66, c111 = w(a, 66), w(a, 93), w(b, 69), w(b, 84), w(c, 66), w(c, 111)
        z = a66 ^ a93 ^ b69 ^ b84 ^ c66 ^ c111
        new_a = c66 ^ c111 ^ (w(c, 109) & w(c, 110)) ^ w(a, 69)
        new_b = a66 ^ a93 ^ (w(a, 91) & w(a, 92)) ^ w(b, 78)
        new_c = b69 ^ b84 ^ (w(b, 82) & w(b, 83)) ^ w(c, 87)
        self._a = np.concatenate([a[_BLOCK:], new_a])
        self._b = np.concatenate([b[_BLOCK:], new_b])
        self._c = np.concatenate([c[_BLOCK:], new_c])
        return z

    def next_bits(self, n: int) -> np.ndarray:
        """Return ``(lanes, n)`` bits, each row from its own keystream."""
        _check_budget(self.bits_emitted, n)
        have = self._pending.shape[1]
        if n > have:
            blocks = max(math.ceil((n - have) / _BLOCK), self._CHUNK_BLOCKS)
            z = np.concatenate([self._block() for _ in range(blocks)])
            self._pending = np.concatenate([self._pending, self._unpack(z).T], axis=1)
        out, self._pending = self._pending[:, :n], self._pending[:, n:]
        self.bits_emitted += n
        return out

    def bits(self, shape) -> np.ndarray:
        shape = tuple(shape)
        if shape[0] != self.lanes:
            raise ValueError(f"lane axis is {shape[0]}, bank has {self.lanes} lanes")
        return self.next_bits(math.prod(shape[1:])).reshape(shape)


class ZeroPrng:
    """Disabled PRNG: every mask is 0, so every gadget computes in the clear."""

    def __init__(self):
        self.bits_emitted = 0

    def next_bits(self, n: int) -> np.ndarray:
        _check_budget(self.bits_emitted, n)
        self.bits_emitted += n
        return np.zeros(n, dtype=np.uint8)

    def bits(self, shape) -> np.ndarray:
        shape = tuple(shape)
        self.next_bits(math.prod(shape))
        return np.zeros(shape, dtype=np.uint8)


class SweepPrng:
    """Test stub replaying a fixed bit sequence, for exhaustive randomness sweeps."""

    def __init__(self, bits):
        self._bits = np.asarray(bits, dtype=np.uint8).ravel()
        self.bits_emitted = 0

    def next_bits(self, n: int) -> np.ndarray:
        if self.bits_emitted + n > len(self._bits):
            raise OutputSpaceExhausted("sweep sequence exhausted")
        out = self._bits[self.bits_emitted : self.bits_emitted + n]
        self.bits_emitted += n
        return out.copy()

    def bits(self, shape) -> np.ndarray:
        shape = tuple(shape)
        return self.next_bits(math.prod(shape)).reshape(shape)
