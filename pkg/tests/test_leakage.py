import struct

import numpy as np
import pytest

from bomasim import bnn
from bomasim.bnn import DESK_DIMS, FormatError, generate_params
from bomasim.leakage import (
    FLAG_BALANCED,
    LeakageModelConfig,
    TraceSet,
    capture,
    capture_batches,
    load_traces,
    save_traces,
)

QUIET = LeakageModelConfig(noise_sigma=0.0)
SMALL = (4, 101, 2)


def test_config_validation():
    for bad in (dict(alpha_reg=-1), dict(alpha_glitch=-0.1), dict(noise_sigma=-2), dict(samples_per_cycle=2),
                dict(jitter=-1)):
        with pytest.raises(ValueError):
            LeakageModelConfig(**bad)
    assert LeakageModelConfig().digest() == LeakageModelConfig().digest()
    assert LeakageModelConfig().digest() != QUIET.digest()


@pytest.mark.parametrize("design", ["unmasked", "masked", "gate_array"])
def test_deterministic_without_noise(design):
    p = generate_params(SMALL, 1) if design != "gate_array" else None
    a = capture(design, 12, QUIET, seed=5, params=p, batch_size=5)
    b = capture(design, 12, QUIET, seed=5, params=p, batch_size=5)
    assert np.array_equal(a.samples, b.samples) and np.array_equal(a.labels, b.labels)
    assert a.samples.std() > 0


def test_batching_and_workers_do_not_change_traces():
    p = generate_params(SMALL, 2)
    a = capture("masked", 10, seed=3, params=p, batch_size=4)
    b = capture("masked", 10, seed=3, params=p, batch_size=4, workers=2)
    assert np.array_equal(a.samples, b.samples)


def test_streaming_batches_in_trace_order():
    starts = [s for s, *_ in capture_batches("gate_array", 50, seed=1, batch_size=16)]
    assert starts == [0, 16, 32, 48]


def test_masked_trace_length_and_windows_follow_schedule():
    p = generate_params(SMALL, 0)
    ts = capture("masked", 4, seed=0, params=p)
    sched = bnn.schedule(p)
    assert ts.n_samples >= sched.total_cycles
    starts = [lo for lo, _ in ts.windows]
    assert starts == sorted(set(sched.issue[0].min(axis=0).tolist()))
    assert ts.metadata["dims"] == list(SMALL)


def test_fixed_class_traces_identical_without_prng_or_noise():
    p = generate_params(SMALL, 4)
    ts = capture("masked", 40, LeakageModelConfig(noise_sigma=0.0, jitter=0), prng_mode="off", seed=2, params=p)
    fixed = ts.samples[ts.labels == 0]
    assert len(fixed) > 2 and (fixed == fixed[0]).all()
    on = capture("masked", 40, LeakageModelConfig(noise_sigma=0.0, jitter=0), prng_mode="on", seed=2, params=p)
    fixed_on = on.samples[on.labels == 0]
    assert not (fixed_on == fixed_on[0]).all()


def test_balanced_labels_alternate():
    ts = capture("gate_array", 20, QUIET, seed=0, balanced=True)
    assert ts.labels.tolist() == [0, 1] * 10
    assert ts.flags & FLAG_BALANCED


def test_coin_labels_reasonably_balanced():
    ts = capture("gate_array", 4000, QUIET, seed=9)
    assert abs(int(ts.labels.sum()) - 2000) < 4 * np.sqrt(1000)


def test_fixed_image_shape_checked():
    with pytest.raises(ValueError):
        capture("masked", 4, fixed_image=np.zeros(5, np.uint8), params=generate_params(SMALL, 0))
    with pytest.raises(ValueError):
        capture("masked", 1)
    with pytest.raises(ValueError):
        capture("nope", 4)


def _toy_set(n=100, m=50):
    rng = np.random.default_rng(0)
    return TraceSet(rng.integers(0, 2, n), rng.normal(size=(n, m)).astype(np.float32),
                    {"design": "toy", "windows": [[0, 3]]}, 1)


def test_trace_round_trip_byte_exact(tmp_path):
    ts = _toy_set()
    path = tmp_path / "t.bmnt"
    save_traces(ts, path)
    back = load_traces(path)
    assert back.samples.tobytes() == ts.samples.tobytes()
    assert np.array_equal(back.labels, ts.labels)
    assert back.metadata == ts.metadata and back.flags == 1 and back.windows == [(0, 3)]
    save_traces(back, tmp_path / "u.bmnt")
    assert (tmp_path / "u.bmnt").read_bytes() == path.read_bytes()


def test_trace_header_layout(tmp_path):
    path = tmp_path / "t.bmnt"
    save_traces(_toy_set(3, 2), path)
    data = path.read_bytes()
    assert data[:4] == b"BMNT"
    assert struct.unpack_from("<HIIH", data, 4) == (1, 3, 2, 1)


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + b"\x07\x00" + d[6:], "version 7"),
    (lambda d: d[:-3], "truncated"),
    (lambda d: d[:9], "truncated"),
    (lambda d: d + b"\x00\x00", "trailing"),
])
def test_trace_corruption(tmp_path, mutate, msg):
    path = tmp_path / "t.bmnt"
    save_traces(_toy_set(10, 4), path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError, match=msg):
        load_traces(path)


def test_trace_bad_labels_and_metadata(tmp_path):
    ts = _toy_set(4, 2)
    path = tmp_path / "t.bmnt"
    save_traces(ts, path)
    data = bytearray(path.read_bytes())
    mlen = struct.unpack_from("<I", data, 16)[0]
    data[20 + mlen] = 7
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="labels"):
        load_traces(path)
    data[20] = 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="metadata"):
        load_traces(path)


def test_unmasked_design_leaks_fixed_class_difference():
    # noise-free: the fixed and random classes differ in mean inside the input layer
    ts = capture("unmasked", 64, QUIET, seed=1, params=generate_params(DESK_DIMS, 1))
    f, r = ts.samples[ts.labels == 0], ts.samples[ts.labels == 1]
    assert (f == f[0]).all()
    assert np.abs(f.mean(0) - r.mean(0)).max() > 1
