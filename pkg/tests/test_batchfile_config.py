import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crozenas.batchfile import (BatchFormatError, decode_batch, encode_batch, read_batch,
                                synthetic_batch)
from crozenas.config import ConfigError, RunConfig, parse_config_text, resolve
from crozenas.tensor import Batch


@settings(max_examples=25)
@given(st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**31))
def test_batch_round_trip_bit_exact(n, classes, seed):
    b = synthetic_batch(n, classes, (2, 4, 4), seed)
    back = decode_batch(encode_batch(b))
    assert back.images.tobytes() == b.images.tobytes()
    assert np.array_equal(back.labels, b.labels)


def test_batch_file_layout(tmp_path):
    b = Batch(np.arange(8.0).reshape(2, 1, 2, 2), [1, 0])
    data = encode_batch(b)
    assert data[:4] == b"CRZB"
    assert struct.unpack("<III", data[4:16]) == (1, 1, 4)
    assert struct.unpack("<4I", data[16:32]) == (2, 1, 2, 2)
    assert len(data) == 32 + 8 * 8 + 4 + 2 * 4
    p = tmp_path / "b.crzb"
    p.write_bytes(data)
    assert np.array_equal(read_batch(p).images, b.images)


@pytest.mark.parametrize("mangle,needle", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + struct.pack("<I", 9) + d[8:], "version"),
    (lambda d: d[:8] + struct.pack("<I", 2) + d[12:], "dtype"),
    (lambda d: d[:-3], "truncated"),
    (lambda d: d + b"\0", "trailing"),
])
def test_batch_format_errors(mangle, needle):
    data = encode_batch(synthetic_batch(2, 3, (1, 2, 2), 0))
    with pytest.raises(BatchFormatError, match=needle):
        decode_batch(mangle(data))


def test_label_count_mismatch():
    data = bytearray(encode_batch(synthetic_batch(2, 3, (1, 2, 2), 0)))
    off = 32 + 8 * 8
    data[off:off + 4] = struct.pack("<I", 3)
    with pytest.raises(BatchFormatError, match="label count"):
        decode_batch(bytes(data))


def test_synthetic_labels_in_range_and_pattern():
    b = synthetic_batch(400, 10, (3, 8, 8), 1)
    assert b.labels.min() >= 0 and b.labels.max() < 10
    # the shifted quadrant sits near mean 1, the rest near 0
    for y in (0, 4, 7):
        imgs = b.images[b.labels == y]
        ch, quad = y % 3, (y // 3) % 4
        r0, c0 = (quad // 2) * 4, (quad % 2) * 4
        assert abs(imgs[:, ch, r0:r0 + 4, c0:c0 + 4].mean() - 1.0) < 0.15
    a, b = synthetic_batch(4, 10, (3, 8, 8), 2), synthetic_batch(4, 10, (3, 8, 8), 2)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)


def test_batch_validation():
    with pytest.raises(ValueError):
        Batch(np.zeros((2, 1, 2, 2)), [0])
    with pytest.raises(ValueError):
        Batch(np.zeros((1, 1, 2, 2)), [-1])


# -- config ----------------------------------------------------------------------

def test_defaults_resolve():
    cfg = resolve({}, {}, env={})
    assert cfg == RunConfig()
    assert cfg.proxy_config().perturb.beta == 0.01
    assert cfg.stack_config().channels == 8


def test_precedence():
    file_values = parse_config_text("seed = 5\nbeta=0.5 # comment\n\n")
    env = {"CROZE_SEED": "9"}
    assert resolve(file_values, {}, env).seed == 5
    assert resolve({}, {}, env).seed == 9
    cfg = resolve(file_values, {"seed": 2, "beta": 0.25}, env)
    assert (cfg.seed, cfg.beta) == (2, 0.25)


def test_text_round_trip():
    cfg = resolve({}, {"warmup": "50,10", "clip": "0,1", "exclude_head": True, "seed": 3}, env={})
    again = resolve(parse_config_text(cfg.to_text()), {}, env={})
    assert again == cfg
    assert again.warmup == (50, 10) and again.clip == (0.0, 1.0)


@pytest.mark.parametrize("text", ["bogus=1", "noequals"])
def test_config_text_errors(text):
    with pytest.raises(ConfigError, match="config:1"):
        parse_config_text(text)


@pytest.mark.parametrize("flags", [
    {"space": "nope"}, {"proxy": "nope"}, {"jobs": 0}, {"beta": "x"}, {"warmup": "1"},
    {"components": "Q"}, {"stack": "8,3"}, {"exclude_head": "maybe"},
])
def test_bad_values(flags):
    with pytest.raises(ConfigError):
        resolve({}, flags, env={})


def test_synthetic_params():
    cfg = resolve({}, {"synthetic": "n=4 seed=7", "seed": 1}, env={})
    assert cfg.synthetic_params() == {"n": 4, "classes": 10, "seed": 7}
    with pytest.raises(ConfigError):
        resolve({}, {"synthetic": "size=4"}, env={}).synthetic_params()
