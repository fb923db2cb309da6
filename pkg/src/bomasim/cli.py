"""Command-line front end: ``bomasim <subcommand> ...``.

Every option can also come from an environment variable named
``BOMASIM_<OPTION>`` (dashes become underscores); command-line flags win.
Exit status is 0 when the run and any requested expectation succeed, 1 when an
expectation fails and 2 on bad input.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bnn, leakage, tvla
from .cells import trichina_cell
from .circuit import probe_independence, sharing_encoder
from .masked import unmask
from .trivium import TriviumBank, ZeroPrng, lane_iv, parse_hex80, seed as trivium_seed

ENV_PREFIX = "BOMASIM_"
DEFAULT_KEY = "0123456789ABCDEF0123"


class UsageError(ValueError):
    pass


def _dims(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace("x", ",").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be comma-separated integers: {text!r}") from None


def _offsets(text: str) -> dict:
    out = {}
    for item in filter(None, text.split(",")):
        name, _, val = item.partition("=")
        if not val:
            raise argparse.ArgumentTypeError(f"offset items look like port=delta, got {item!r}")
        out[name.strip()] = int(val)
    return out


def _expect(text: str) -> dict:
    out = {}
    for item in filter(None, text.split(",")):
        name, _, val = item.partition("=")
        out[name.strip().lower()] = val.strip().upper()
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bomasim", description="Masked BNN engine simulator and TVLA harness")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-params", help="write pseudo-random network parameters (BMNP)")
    g.add_argument("--dims", type=_dims, default=list(bnn.DEFAULT_DIMS))
    g.add_argument("--depth", type=int, default=bnn.DEFAULT_DEPTH)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    i = sub.add_parser("infer", help="run inference, masked and/or unmasked")
    i.add_argument("--params", required=True)
    src = i.add_mutually_exclusive_group()
    src.add_argument("--image", help="raw image file, one byte per pixel")
    src.add_argument("--random-images", type=int, default=0, help="evaluate N uniform random images")
    i.add_argument("--mode", choices=("masked", "unmasked", "both"), default="both")
    i.add_argument("--prng", choices=("on", "off"), default="on")
    i.add_argument("--key", default=DEFAULT_KEY)
    i.add_argument("--iv", default="00000000000000000000")
    i.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("capture", help="simulate fixed-vs-random power traces (BMNT)")
    c.add_argument("--design", choices=leakage.DESIGNS, default="masked")
    c.add_argument("--n", type=int, default=1000)
    c.add_argument("--params", help="BMNP file; default is a seeded 16,101,4 network")
    c.add_argument("--alpha-reg", type=float, default=1.0)
    c.add_argument("--alpha-glitch", type=float, default=0.5)
    c.add_argument("--sigma", type=float, default=2.0)
    c.add_argument("--jitter", type=int, default=3)
    c.add_argument("--prng", choices=("on", "off"), default="on")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--key", help="TRIVIUM key, 20 hex digits (default derived from --seed)")
    c.add_argument("--balanced", action="store_true")
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--out", required=True)

    t = sub.add_parser("ttest", help="fixed-vs-random Welch t-test on a BMNT file")
    t.add_argument("--traces", required=True)
    t.add_argument("--order", choices=("1", "2", "both"), default="1")
    t.add_argument("--threshold", type=float, default=tvla.THRESHOLD)
    t.add_argument("--exclude", choices=("input-load", "none"), default="input-load")
    t.add_argument("--streaming", action="store_true", help="one-pass moment accumulation")
    t.add_argument("--out", required=True, help="CSV of t-scores; a .json summary is written beside it")
    t.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True,
                   help="render a PNG next to the CSV (default on)")
    t.add_argument("--expect", type=_expect, default={}, help="e.g. first=PASS,second=FAIL")

    x = sub.add_parser("gate-exp", help="Trichina cell probing and gate-array t-tests")
    x.add_argument("--style", choices=("registered", "unregistered"), default="registered")
    x.add_argument("--offsets", type=_offsets, default={}, help="arrival offsets, e.g. r=2")
    x.add_argument("--n", type=int, default=0, help="gate-array traces to capture (0 skips the t-tests)")
    x.add_argument("--sigma", type=float, default=0.5)
    x.add_argument("--jitter", type=int, default=3)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", help="CSV of gate-array t-scores")
    x.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True)
    x.add_argument("--expect", type=_expect, default={}, help="e.g. probe=SECURE,first=PASS,second=FAIL")

    b = sub.add_parser("bench", help="cycle counts, closed form against step-by-step schedule")
    b.add_argument("--dims", type=_dims, default=list(bnn.DEFAULT_DIMS))
    b.add_argument("--depth", type=int, default=bnn.DEFAULT_DEPTH)

    for p in (g, i, c, t, x, b):
        _env_defaults(p)
    return ap


def _env_defaults(parser: argparse.ArgumentParser) -> None:
    for action in parser._actions:
        if not action.option_strings or action.dest == "help":
            continue
        raw = os.environ.get(ENV_PREFIX + action.dest.upper())
        if raw is None:
            continue
        if isinstance(action, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
            action.default = raw.strip().lower() in ("1", "true", "yes", "on")
        else:
            action.default = action.type(raw) if action.type else raw
        action.required = False


def _validate(args) -> None:
    errors = []
    if getattr(args, "workers", 1) < 1:
        errors.append("--workers must be at least 1")
    if args.command == "capture":
        if args.n < 2:
            errors.append("--n must be at least 2")
        if args.sigma < 0 or args.alpha_reg < 0 or args.alpha_glitch < 0:
            errors.append("leakage weights and --sigma must be non-negative")
        if args.jitter < 0:
            errors.append("--jitter must be non-negative")
        if args.key is not None:
            try:
                parse_hex80(args.key)
            except ValueError as exc:
                errors.append(f"--key: {exc}")
        if args.design == "gate_array" and args.params:
            errors.append("--params does not apply to the gate_array design")
    if args.command == "infer":
        for name in ("key", "iv"):
            try:
                parse_hex80(getattr(args, name))
            except ValueError as exc:
                errors.append(f"--{name}: {exc}")
        if not args.image and args.random_images <= 0:
            errors.append("give --image or --random-images N")
    if args.command in ("ttest", "gate-exp"):
        if getattr(args, "threshold", 1.0) <= 0:
            errors.append("--threshold must be positive")
        if args.command == "gate-exp" and args.n and args.n < 2:
            errors.append("--n must be 0 or at least 2")
    if errors:
        raise UsageError("; ".join(errors))


def _header(args) -> None:
    fields = {k: v for k, v in vars(args).items() if k in ("seed", "key", "iv", "prng", "design", "n")}
    print(f"# bomasim {args.command} " + " ".join(f"{k}={v}" for k, v in sorted(fields.items())))


# --------------------------------------------------------------------------- commands

def cmd_gen_params(args) -> int:
    p = bnn.generate_params(args.dims, args.seed, args.depth)
    bnn.save_params(p, args.out)
    print(f"wrote {args.out}: dims {','.join(map(str, p.dims))} depth {p.depth}")
    return 0


def cmd_infer(args) -> int:
    p = bnn.load_params(args.params)
    if args.image:
        images = bnn.load_image(args.image, p.input_count)[None]
    else:
        images = np.random.default_rng(args.seed).integers(0, 256, (args.random_images, p.input_count), dtype=np.uint8)
    key, iv = parse_hex80(args.key), parse_hex80(args.iv)
    unmasked_cls = bnn.unmasked_layer_sums(p, images)[-1].argmax(axis=1) if args.mode != "masked" else None
    masked_cls = None
    if args.mode != "unmasked":
        if args.prng == "off":
            rand = ZeroPrng()
        elif len(images) == 1:
            rand = trivium_seed(key, iv)
        else:
            rand = TriviumBank(key, [lane_iv(k) for k in range(len(images))])
        rec = bnn.Recorder() if args.prng == "off" else None
        index, _ = bnn.masked_forward(p, images, rand, rec)
        masked_cls = np.asarray(unmask(index)).reshape(-1)  # test-mode readout of the class shares
        per_image = rand.bits_emitted // (len(images) if isinstance(rand, ZeroPrng) else 1)
        print(f"randomness bits per inference: {per_image}")
        if rec is not None:
            # with every mask zero, share 1 must carry the plain sums and share 0 stay clear
            plain = bnn.unmasked_layer_sums(p, images)
            full = (1 << bnn.ACC_WIDTH) - 1
            same = all(np.array_equal(layer.sums.s1, (ref & full).astype(np.uint32)) and not np.any(layer.sums.s0)
                       for layer, ref in zip(rec.layers, plain))
            print(f"zero-PRNG share trajectory matches unmasked: {same}")
            if not same:
                return 1
    sched = bnn.schedule(p)
    ucyc = bnn.unmasked_cycles(p)
    print(f"cycles: unmasked {ucyc} masked {sched.total_cycles} ratio {sched.total_cycles / ucyc:.4f}")
    if len(images) == 1:
        if unmasked_cls is not None:
            print(f"unmasked class: {int(unmasked_cls[0])}")
        if masked_cls is not None:
            print(f"masked class: {int(masked_cls[0])}")
    if args.mode == "both":
        agree = int((unmasked_cls == masked_cls).sum())
        print(f"agree: {agree}/{len(images)}")
        return 0 if agree == len(images) else 1
    return 0


def _cfg(args) -> leakage.LeakageModelConfig:
    return leakage.LeakageModelConfig(args.alpha_reg, args.alpha_glitch, args.sigma, 1, args.jitter)


def cmd_capture(args) -> int:
    params = bnn.load_params(args.params) if args.params else None
    key = parse_hex80(args.key) if args.key else None
    ts = leakage.capture(args.design, args.n, _cfg(args), None, args.prng, args.seed, params, key,
                         args.balanced, args.workers)
    leakage.save_traces(ts, args.out)
    counts = np.bincount(ts.labels, minlength=2)
    print(f"wrote {args.out}: {ts.n_traces} traces x {ts.n_samples} samples "
          f"(fixed {counts[0]}, random {counts[1]}), {len(ts.windows)} input-load windows")
    return 0


def _report_files(out: Path, columns: dict, summary: dict, threshold, windows, plot: bool, title: str):
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index"] + list(columns))
        for k, row in enumerate(zip(*columns.values())):
            w.writerow([k] + [f"{v:.6g}" for v in row])
    out.with_suffix(".json").write_text(json.dumps(summary, indent=2) + "\n")
    if plot:
        from .plotting import plot_tscores

        plot_tscores(columns, out.with_suffix(".png"), threshold, windows, title)


def _check_expectations(expect: dict, outcomes: dict) -> int:
    status = 0
    for name, want in expect.items():
        got = outcomes.get(name)
        ok = got == want
        print(f"expect {name}={want}: got {got} -> {'ok' if ok else 'MISMATCH'}")
        status |= 0 if ok else 1
    return status


def cmd_ttest(args) -> int:
    ts = leakage.load_traces(args.traces)
    windows = ts.windows if args.exclude == "input-load" else []
    orders = {"1": [1], "2": [2], "both": [1, 2]}[args.order]
    columns, summary, outcomes = {}, {"traces": ts.n_traces, "samples": ts.n_samples,
                                      "threshold": args.threshold, "excluded_windows": windows}, {}
    acc = None
    if args.streaming:
        acc = tvla.MomentAccumulator(ts.n_samples)
        for s in range(0, ts.n_traces, 4096):
            acc.accumulate(ts.samples[s:s + 4096], ts.labels[s:s + 4096])
    for order in orders:
        name = "first" if order == 1 else "second"
        if acc is not None:
            rep = tvla.report_from(acc, order, args.threshold, windows)
        else:
            rep = (tvla.t_first_order if order == 1 else tvla.t_second_order)(ts, args.threshold)
        verdict, bad = tvla.verdict(rep, windows)
        columns[f"t_{name}"] = rep.t
        summary[name] = {"max_abs_t": rep.max_abs_t, "max_abs_t_outside_windows": rep.max_abs_t_outside(windows),
                         "verdict": verdict, "exceeding": bad[:100], "clamped": int(rep.clamped.sum())}
        outcomes[name] = verdict
        print(f"{name}-order: max|t| {rep.max_abs_t:.3f}, outside windows {rep.max_abs_t_outside(windows):.3f} -> {verdict}")
    _report_files(Path(args.out), columns, summary, args.threshold, windows, args.plot,
                  f"{ts.metadata.get('design', '')} fixed vs random")
    return _check_expectations(args.expect, outcomes)


def cmd_gate_exp(args) -> int:
    cell = trichina_cell(args.style, args.offsets or None)
    enc = sharing_encoder({"a": ("a0", "a1"), "b": ("b0", "b1")}, ["r"])
    secrets = [dict(a=a, b=b) for a in (0, 1) for b in (0, 1)]
    rep = probe_independence(cell, secrets, enc.n_random, enc, n_cycles=6)
    outcomes = {"probe": "SECURE" if rep.secure else "LEAKS"}
    print(f"{args.style} cell, offsets {args.offsets or 'none'}: {len(rep.violations)} probing violations"
          + (f" on wires {sorted(rep.wires())}" if rep.violations else ""))
    if args.n:
        cfg = leakage.LeakageModelConfig(noise_sigma=args.sigma, jitter=args.jitter)
        ts = leakage.capture("gate_array", args.n, cfg, seed=args.seed)
        columns = {}
        for order, fn in ((1, tvla.t_first_order), (2, tvla.t_second_order)):
            name = "first" if order == 1 else "second"
            r = fn(ts)
            verdict, _ = tvla.verdict(r)
            outcomes[name] = verdict
            columns[f"t_{name}"] = r.t
            print(f"gate array ({leakage.GATE_ARRAY_SIZE} cells) {name}-order: max|t| {r.max_abs_t:.3f} -> {verdict}")
        if args.out:
            _report_files(Path(args.out), columns, {k: v for k, v in outcomes.items()}, tvla.THRESHOLD, [],
                          args.plot, "registered Trichina gate array")
    return _check_expectations(args.expect, outcomes)


def cmd_bench(args) -> int:
    dims = bnn.check_dims(args.dims, args.depth)
    p = bnn.NetworkParams(dims, [np.zeros((o, i), np.uint8) for i, o in zip(dims[:-1], dims[1:])],
                          [np.zeros(o, np.int32) for o in dims[1:]], args.depth)
    closed, stepped = bnn.schedule(p), bnn.simulate_schedule(p)
    ucyc = bnn.unmasked_cycles(p)
    same = closed.total_cycles == stepped.total_cycles and all(
        (a == b).all() for a, b in zip(closed.issue, stepped.issue))
    print(f"unmasked cycles: {ucyc}")
    print(f"masked cycles: closed-form {closed.total_cycles}, simulated {stepped.total_cycles}")
    print(f"ratio masked/unmasked: {closed.total_cycles / ucyc:.4f}")
    print("stall cycles per layer: " + ", ".join(map(str, closed.stalls)))
    print(f"input layer issue cycles: {closed.input_layer_cycles}")
    print(f"analytic == simulated: {same}")
    return 0 if same else 1


COMMANDS = {"gen-params": cmd_gen_params, "infer": cmd_infer, "capture": cmd_capture,
            "ttest": cmd_ttest, "gate-exp": cmd_gate_exp, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _validate(args)
        _header(args)
        return COMMANDS[args.command](args)
    except (UsageError, bnn.LayerShapeError, bnn.FormatError, OSError, ValueError) as exc:
        print(f"bomasim {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
