import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shufflepred.formats import (
    FormatError,
    decode_flo,
    decode_pgm,
    encode_flo,
    encode_pgm,
    read_checkpoint,
    read_checkpoint_header,
    read_csv,
    read_flo,
    read_pgm,
    write_checkpoint,
    write_csv,
    write_pgm,
)

TINY_PGM = np.array([[0, 128], [255, 7]], np.uint8)
TINY_U = np.array([[1.5, -2.0, 0.0]], np.float32)
TINY_V = np.array([[0.25, 3.0, -0.5]], np.float32)
TINY_TENSORS = {
    "a.weight": np.arange(6, dtype=np.float32).reshape(2, 3) / 4,
    "a.bias": np.array([-1.0, 0.5], np.float32),
}
TINY_CONFIG = {"net": {"latent_dim": 2}}


# ------------------------------------------------------------------ golden

def test_pgm_golden_bytes(golden_dir):
    assert encode_pgm(TINY_PGM) == b"P5\n2 2\n255\n\x00\x80\xff\x07"
    assert (golden_dir / "tiny.pgm").read_bytes() == encode_pgm(TINY_PGM)
    np.testing.assert_array_equal(read_pgm(golden_dir / "tiny.pgm"), TINY_PGM)


def test_flo_golden_bytes(golden_dir):
    expected = struct.pack("<fii", 202021.25, 3, 1) + struct.pack("<6f", 1.5, 0.25, -2.0, 3.0, 0.0, -0.5)
    assert encode_flo(TINY_U, TINY_V) == expected
    assert (golden_dir / "tiny.flo").read_bytes() == expected
    u, v = read_flo(golden_dir / "tiny.flo")
    np.testing.assert_array_equal(u, TINY_U)
    np.testing.assert_array_equal(v, TINY_V)


def test_checkpoint_golden(golden_dir, tmp_path):
    tensors, header, config = read_checkpoint(golden_dir / "tiny_ckpt")
    assert header.seed == 7 and header.meta == {"stages_done": ["content"]}
    assert config == TINY_CONFIG
    for name, value in TINY_TENSORS.items():
        np.testing.assert_array_equal(tensors[name], value)
    write_checkpoint(tmp_path / "ck", TINY_TENSORS, TINY_CONFIG, seed=7, meta={"stages_done": ["content"]})
    for f in ("header.json", "params.bin", "config.json"):
        assert (tmp_path / "ck" / f).read_bytes() == (golden_dir / "tiny_ckpt" / f).read_bytes()


# -------------------------------------------------------------- round trip

@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_round_trip(img):
    data = encode_pgm(img)
    np.testing.assert_array_equal(decode_pgm(data), img)
    assert encode_pgm(decode_pgm(data)) == data


finite32 = st.floats(-1e6, 1e6, width=32, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_flo_round_trip(h, w, data):
    u = data.draw(arrays(np.float32, (h, w), elements=finite32))
    v = data.draw(arrays(np.float32, (h, w), elements=finite32))
    raw = encode_flo(u, v)
    ru, rv = decode_flo(raw)
    np.testing.assert_array_equal(ru, u)
    np.testing.assert_array_equal(rv, v)
    assert encode_flo(ru, rv) == raw


def test_pgm_file_round_trip(tmp_path):
    write_pgm(tmp_path / "x.pgm", TINY_PGM)
    np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), TINY_PGM)


def test_csv_round_trip(tmp_path):
    write_csv(tmp_path / "m.csv", ["clip_id", "value"], [(0, 0.1), (1, 1 / 3)])
    text = (tmp_path / "m.csv").read_bytes()
    assert b"\r" not in text
    rows = read_csv(tmp_path / "m.csv", ["clip_id", "value"])
    assert [float(r["value"]) for r in rows] == [0.1, 1 / 3]


def test_csv_header_mismatch(tmp_path):
    write_csv(tmp_path / "m.csv", ["a"], [(1,)])
    with pytest.raises(FormatError):
        read_csv(tmp_path / "m.csv", ["b"])


# ---------------------------------------------------------------- corruption

def test_pgm_truncated_at_every_byte():
    data = encode_pgm(np.arange(12, dtype=np.uint8).reshape(3, 4))
    for cut in range(len(data)):
        with pytest.raises(FormatError):
            decode_pgm(data[:cut])


def test_flo_truncated_at_every_byte():
    data = encode_flo(TINY_U, TINY_V)
    for cut in range(len(data)):
        with pytest.raises(FormatError):
            decode_flo(data[:cut])


@pytest.mark.parametrize("bad", [
    b"P6\n2 2\n255\n\x00\x00\x00\x00",
    b"P5\n2 2\n65535\n\x00\x00\x00\x00\x00\x00\x00\x00",
    b"P5\n2 2\n255\n\x00\x00\x00\x00\x00",
    b"P5\n-2 2\n255\n\x00\x00",
])
def test_pgm_rejects_malformed(bad):
    with pytest.raises(FormatError):
        decode_pgm(bad)


def test_flo_bad_magic_names_file(tmp_path):
    path = tmp_path / "broken.flo"
    path.write_bytes(struct.pack("<fii", 1.0, 1, 1) + b"\x00" * 8)
    with pytest.raises(FormatError, match="broken.flo"):
        read_flo(path)


def test_flo_trailing_bytes_rejected():
    with pytest.raises(FormatError):
        decode_flo(encode_flo(TINY_U, TINY_V) + b"\x00")


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {f"layer{i}": rng.standard_normal((i + 1, 3)).astype(np.float32) for i in range(4)}
    write_checkpoint(tmp_path, tensors, {"x": 1}, seed=3)
    back, header, config = read_checkpoint(tmp_path)
    assert list(back) == list(tensors) and config == {"x": 1} and header.seed == 3
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])


def test_checkpoint_blob_truncated_at_every_byte(tmp_path):
    write_checkpoint(tmp_path, TINY_TENSORS, TINY_CONFIG, seed=0)
    blob = (tmp_path / "params.bin").read_bytes()
    for cut in range(len(blob)):
        (tmp_path / "params.bin").write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            read_checkpoint(tmp_path)


def test_checkpoint_header_lying_about_size(tmp_path):
    write_checkpoint(tmp_path, TINY_TENSORS, TINY_CONFIG, seed=0)
    header = json.loads((tmp_path / "header.json").read_text())
    header["entries"][1]["shape"] = [100]
    header["entries"][1]["length"] = 400
    header["blob_length"] = 424
    (tmp_path / "header.json").write_text(json.dumps(header))
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path)


def test_checkpoint_header_inconsistent_entry(tmp_path):
    write_checkpoint(tmp_path, TINY_TENSORS, TINY_CONFIG, seed=0)
    header = json.loads((tmp_path / "header.json").read_text())
    header["entries"][0]["offset"] = 4
    (tmp_path / "header.json").write_text(json.dumps(header))
    with pytest.raises(FormatError):
        read_checkpoint_header(tmp_path)


def test_checkpoint_config_tampering_detected(tmp_path):
    write_checkpoint(tmp_path, TINY_TENSORS, TINY_CONFIG, seed=0)
    (tmp_path / "config.json").write_text(json.dumps({"net": {"latent_dim": 3}}))
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path)


def test_checkpoint_header_truncated_json(tmp_path):
    write_checkpoint(tmp_path, TINY_TENSORS, TINY_CONFIG, seed=0)
    text = (tmp_path / "header.json").read_text()
    (tmp_path / "header.json").write_text(text[: len(text) // 2])
    with pytest.raises(FormatError):
        read_checkpoint_header(tmp_path)
