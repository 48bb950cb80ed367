import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from adapterlab.checkpoint import (HEADER_SIZE, CheckpointFormatError, decode_checkpoint, encode_checkpoint,
                                   entry_overhead, load_checkpoint, read_metadata, save_checkpoint)

names = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), min_size=1, max_size=12)
arrays = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4),
                    elements=st.floats(width=32, allow_nan=False))
metas = st.dictionaries(st.text(max_size=6), st.one_of(st.integers(-5, 5), st.text(max_size=5),
                                                       st.lists(st.floats(-1, 1), max_size=3)), max_size=4)


@given(st.dictionaries(names, arrays, max_size=5), metas)
def test_round_trip_is_exact(params, meta):
    back, m = decode_checkpoint(encode_checkpoint(params, meta))
    assert m == meta
    assert list(back) == list(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == params[k].tobytes()


def test_file_size_formula(tmp_path):
    params = {"a": np.zeros((3, 4), np.float32), "bé": np.ones(5, np.float32), "s": np.full((), 2.0, np.float32)}
    meta = {"k": 1}
    p = save_checkpoint(params, meta, tmp_path / "x.ntar")
    meta_len = len(json.dumps(meta, sort_keys=True, separators=(",", ":")).encode())
    expected = HEADER_SIZE + meta_len + sum(entry_overhead(n, a.ndim) + 4 * a.size for n, a in params.items())
    assert p.stat().st_size == expected
    back, m = load_checkpoint(p)
    assert m == meta and back["s"].shape == ()
    assert read_metadata(p) == meta
    assert not (tmp_path / "x.ntar.tmp").exists()


def valid():
    return encode_checkpoint({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"role": "LA"})


@pytest.mark.parametrize("cut", [0, 3, 8, 14, 20, 30, -1])
def test_truncation_is_detected(cut):
    buf = valid()
    with pytest.raises(CheckpointFormatError, match="truncated"):
        decode_checkpoint(buf[:cut] if cut >= 0 else buf[:-1])


def test_bad_magic():
    buf = bytearray(valid())
    buf[0:4] = b"NTAX"
    with pytest.raises(CheckpointFormatError, match="magic") as e:
        decode_checkpoint(bytes(buf))
    assert e.value.offset == 0


def test_bad_version(tmp_path):
    buf = bytearray(valid())
    buf[4:6] = struct.pack("<H", 2)
    with pytest.raises(CheckpointFormatError, match="version"):
        decode_checkpoint(bytes(buf))
    (tmp_path / "v.ntar").write_bytes(bytes(buf))
    with pytest.raises(CheckpointFormatError, match="version"):
        read_metadata(tmp_path / "v.ntar")


def test_trailing_bytes():
    with pytest.raises(CheckpointFormatError, match="trailing"):
        decode_checkpoint(valid() + b"\x00")


def test_duplicate_entry():
    one = encode_checkpoint({"w": np.zeros(2, np.float32)})
    body = one[HEADER_SIZE + 2:]
    head = one[:HEADER_SIZE - 4 + 2] + struct.pack("<I", 2)
    with pytest.raises(CheckpointFormatError, match="duplicate"):
        decode_checkpoint(head + body + body)


def test_unknown_dtype_code():
    buf = bytearray(encode_checkpoint({"w": np.zeros(2, np.float32)}))
    buf[HEADER_SIZE + 2 + 2 + 1] = 7
    with pytest.raises(CheckpointFormatError, match="dtype"):
        decode_checkpoint(bytes(buf))


def test_bad_metadata_json():
    bad = b"NTAR" + struct.pack("<HI", 1, 3) + b"{x}" + struct.pack("<I", 0)
    with pytest.raises(CheckpointFormatError, match="JSON"):
        decode_checkpoint(bad)


def test_only_float32_is_written():
    with pytest.raises(TypeError):
        encode_checkpoint({"w": np.zeros(2, np.float64)})
