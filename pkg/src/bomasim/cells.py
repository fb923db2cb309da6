"""Netlists for the masked gadgets and the plain baseline adder."""
from __future__ import annotations

from .circuit import Circuit, CircuitBuilder

TRICHINA_LATENCY = 4
FULL_ADDER_LATENCY = 5


def trichina_unregistered(b: CircuitBuilder, a0, a1, b0, b1, r, tag="") -> tuple[str, str]:
    """Combinational chain r ^ a0b0 ^ a0b1 ^ a1b0 ^ a1b1; share 0 is r itself."""
    x = r
    for i, (u, v) in enumerate(((a0, b0), (a0, b1), (a1, b0), (a1, b1))):
        p = b.and_(u, v, out=f"{tag}p{i}")
        x = b.xor(x, p, out=f"{tag}x{i + 1}")
    return r, x


def trichina_registered(b: CircuitBuilder, a0, a1, b0, b1, r, tag="") -> tuple[str, str]:
    """Flip-flops before each chain XOR so every XOR sees same-cycle launches.

    The first XOR combines ``r`` with ``a0 b0`` directly. Output shares are
    registered, 4 cycles after the inputs are sampled.
    """
    x1 = b.xor(r, b.and_(a0, b0, out=f"{tag}p00"), out=f"{tag}x1")
    p01 = b.and_(a0, b1, out=f"{tag}p01")
    X1, P01 = b.reg(x1, f"{tag}X1"), b.reg(p01, f"{tag}P01")
    A1, B0, B1, R = (b.reg(w, f"{tag}{n}_1") for w, n in ((a1, "a1"), (b0, "b0"), (b1, "b1"), (r, "r")))

    x2 = b.xor(X1, P01, out=f"{tag}x2")
    p10 = b.and_(A1, B0, out=f"{tag}p10")
    X2, P10 = b.reg(x2, f"{tag}X2"), b.reg(p10, f"{tag}P10")
    A1, B1, R = b.reg(A1, f"{tag}a1_2"), b.reg(B1, f"{tag}b1_2"), b.reg(R, f"{tag}r_2")

    x3 = b.xor(X2, P10, out=f"{tag}x3")
    p11 = b.and_(A1, B1, out=f"{tag}p11")
    X3, P11, R = b.reg(x3, f"{tag}X3"), b.reg(p11, f"{tag}P11"), b.reg(R, f"{tag}r_3")

    x4 = b.xor(X3, P11, out=f"{tag}x4")
    return b.reg(R, f"{tag}s0"), b.reg(x4, f"{tag}s1")


def trichina_cell(style: str = "registered", offsets: dict | None = None) -> Circuit:
    """Stand-alone Trichina AND with ports a0 a1 b0 b1 r and outputs s0 s1."""
    b = CircuitBuilder()
    ins = [b.input(n) for n in ("a0", "a1", "b0", "b1", "r")]
    if style == "registered":
        s0, s1 = trichina_registered(b, *ins)
    elif style == "unregistered":
        s0, s1 = trichina_unregistered(b, *ins)
    else:
        raise ValueError(f"unknown Trichina style {style!r}")
    c = b.build(probes=(s0, s1))
    return c.with_offsets(offsets) if offsets else c


def full_adder_stage(b: CircuitBuilder, a0, a1, b0, b1, c0, c1, r0, r1, r2, tag=""):
    """One masked full-adder bit: linear sum, carry from three registered Trichina gates.

    Sum shares are computed in the first cycle and delayed alongside the carry,
    whose shares are recombined and registered in the fifth cycle.
    """
    s0 = b.xor(b.xor(a0, b0, out=f"{tag}sa0"), c0, out=f"{tag}sum0")
    s1 = b.xor(b.xor(a1, b1, out=f"{tag}sa1"), c1, out=f"{tag}sum1")
    for k in range(FULL_ADDER_LATENCY):
        s0, s1 = b.reg(s0, f"{tag}S0_{k}"), b.reg(s1, f"{tag}S1_{k}")
    d = trichina_registered(b, a0, a1, b0, b1, r0, tag=f"{tag}d.")
    e = trichina_registered(b, b0, b1, c0, c1, r1, tag=f"{tag}e.")
    f = trichina_registered(b, c0, c1, a0, a1, r2, tag=f"{tag}f.")
    cout0 = b.xor(b.xor(d[0], e[0], out=f"{tag}de0"), f[0], out=f"{tag}cout0")
    cout1 = b.xor(b.xor(d[1], e[1], out=f"{tag}de1"), f[1], out=f"{tag}cout1")
    return (s0, s1), (b.reg(cout0, f"{tag}C0"), b.reg(cout1, f"{tag}C1"))


FA_PORTS = ("a0", "a1", "b0", "b1", "c0", "c1", "r0", "r1", "r2")


def masked_full_adder_circuit(offsets: dict | None = None) -> Circuit:
    b = CircuitBuilder()
    ins = [b.input(n) for n in FA_PORTS]
    (s0, s1), (c0, c1) = full_adder_stage(b, *ins)
    c = b.build(probes=(s0, s1, c0, c1))
    return c.with_offsets(offsets) if offsets else c


def gate_array(n: int = 32) -> Circuit:
    """``n`` registered Trichina cells sharing a0 a1 b0 b1, each with its own fresh bit."""
    b = CircuitBuilder()
    a0, a1, b0, b1 = (b.input(x) for x in ("a0", "a1", "b0", "b1"))
    outs = []
    for i in range(n):
        r = b.input(f"r{i}")
        outs += trichina_registered(b, a0, a1, b0, b1, r, tag=f"g{i}.")
    return b.build(probes=tuple(outs))


def ripple_adder(width: int = 20) -> Circuit:
    """Single-cycle unmasked ripple-carry adder ``x + y + cin`` (ports x{k}, y{k}, cin)."""
    b = CircuitBuilder()
    xs = [b.input(f"x{k}") for k in range(width)]
    ys = [b.input(f"y{k}") for k in range(width)]
    carry = b.input("cin")
    for k in range(width):
        h = b.xor(xs[k], ys[k], out=f"h{k}")
        b.xor(h, carry, out=f"s{k}")
        if k < width - 1:
            g = b.and_(xs[k], ys[k], out=f"g{k}")
            p = b.and_(h, carry, out=f"pc{k}")
            carry = b.xor(g, p, out=f"c{k + 1}")
    return b.build(probes=tuple(f"s{k}" for k in range(width)))
