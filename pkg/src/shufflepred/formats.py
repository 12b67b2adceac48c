"""Byte-exact codecs shared by the dataset, checkpoint and report writers.

Every format has exactly one canonical encoding. Readers validate structure
before returning anything, and raise :class:`FormatError` naming the file.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

FLO_MAGIC = 202021.25
CHECKPOINT_VERSION = 1
HEADER_FILE = "header.json"
BLOB_FILE = "params.bin"
CONFIG_FILE = "config.json"


class FormatError(ValueError):
    """Raised when a file does not match its expected byte layout."""


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest_config(config: dict) -> str:
    return sha256_bytes(canonical_json(config).encode("utf-8"))


# --------------------------------------------------------------------- PGM

def encode_pgm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise FormatError(f"PGM payload must be a 2-D uint8 array, got {image.dtype} {image.shape}")
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes(order="C")


def decode_pgm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos or pos >= len(data):
            raise FormatError(f"{name}: truncated PGM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{name}: bad PGM magic {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{name}: non-integer PGM header field") from exc
    if w <= 0 or h <= 0:
        raise FormatError(f"{name}: invalid PGM size {w}x{h}")
    if maxval != 255:
        raise FormatError(f"{name}: only 8-bit PGM (maxval 255) is supported, got {maxval}")
    raster = data[pos:]
    if len(raster) != w * h:
        raise FormatError(f"{name}: PGM raster has {len(raster)} bytes, expected {w * h}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


def read_pgm(path: str | Path) -> np.ndarray:
    path = Path(path)
    return decode_pgm(path.read_bytes(), str(path))


# --------------------------------------------------------------------- FLO

def encode_flo(u: np.ndarray, v: np.ndarray) -> bytes:
    u = np.asarray(u, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if u.shape != v.shape or u.ndim != 2:
        raise FormatError(f"flow channels must be equal 2-D arrays, got {u.shape} and {v.shape}")
    h, w = u.shape
    inter = np.stack([u, v], axis=-1).astype("<f4")
    return struct.pack("<fii", FLO_MAGIC, w, h) + inter.tobytes(order="C")


def decode_flo(data: bytes, name: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    if len(data) < 12:
        raise FormatError(f"{name}: truncated flo header ({len(data)} bytes)")
    magic, w, h = struct.unpack("<fii", data[:12])
    if magic != FLO_MAGIC:
        raise FormatError(f"{name}: bad flo magic number {magic!r}")
    if w <= 0 or h <= 0:
        raise FormatError(f"{name}: invalid flo size {w}x{h}")
    expected = 12 + 8 * w * h
    if len(data) != expected:
        raise FormatError(f"{name}: flo file has {len(data)} bytes, expected {expected}")
    arr = np.frombuffer(data[12:], dtype="<f4").reshape(h, w, 2)
    return arr[..., 0].astype(np.float32), arr[..., 1].astype(np.float32)


def write_flo(path: str | Path, u: np.ndarray, v: np.ndarray) -> None:
    Path(path).write_bytes(encode_flo(u, v))


def read_flo(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    return decode_flo(path.read_bytes(), str(path))


# -------------------------------------------------------------- checkpoint

@dataclass
class CheckpointEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    offset: int
    length: int


@dataclass
class CheckpointHeader:
    version: int
    config_digest: str
    seed: int
    entries: list[CheckpointEntry]
    meta: dict = field(default_factory=dict)

    @property
    def blob_length(self) -> int:
        return sum(e.length for e in self.entries)

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "blob_length": self.blob_length,
            "entries": [
                {"name": e.name, "dtype": e.dtype, "shape": list(e.shape),
                 "offset": e.offset, "length": e.length}
                for e in self.entries
            ],
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: dict, name: str = HEADER_FILE) -> "CheckpointHeader":
        try:
            entries = [
                CheckpointEntry(str(e["name"]), str(e["dtype"]), tuple(int(s) for s in e["shape"]),
                                int(e["offset"]), int(e["length"]))
                for e in obj["entries"]
            ]
            header = cls(int(obj["version"]), str(obj["config_digest"]), int(obj["seed"]),
                         entries, dict(obj.get("meta", {})))
            declared = int(obj["blob_length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{name}: malformed checkpoint header ({exc})") from exc
        if header.version != CHECKPOINT_VERSION:
            raise FormatError(f"{name}: checkpoint version {header.version}, expected {CHECKPOINT_VERSION}")
        seen = set()
        offset = 0
        for e in header.entries:
            if e.name in seen:
                raise FormatError(f"{name}: duplicate parameter name {e.name!r}")
            seen.add(e.name)
            if e.dtype != "<f4":
                raise FormatError(f"{name}: unsupported dtype {e.dtype!r} for {e.name!r}")
            if e.offset != offset:
                raise FormatError(f"{name}: entry {e.name!r} offset {e.offset} is not contiguous (expected {offset})")
            if e.length != 4 * int(np.prod(e.shape, dtype=np.int64)):
                raise FormatError(f"{name}: entry {e.name!r} length {e.length} disagrees with shape {e.shape}")
            offset += e.length
        if declared != offset:
            raise FormatError(f"{name}: declared blob length {declared} != sum of entries {offset}")
        return header


def write_checkpoint(directory: str | Path, tensors: dict[str, np.ndarray], config: dict,
                     seed: int, meta: dict | None = None) -> CheckpointHeader:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C")
        entries.append(CheckpointEntry(name, "<f4", tuple(np.shape(arr)), offset, len(raw)))
        chunks.append(raw)
        offset += len(raw)
    header = CheckpointHeader(CHECKPOINT_VERSION, digest_config(config), int(seed), entries, meta or {})
    (directory / BLOB_FILE).write_bytes(b"".join(chunks))
    (directory / CONFIG_FILE).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (directory / HEADER_FILE).write_text(json.dumps(header.to_json(), indent=2) + "\n", encoding="utf-8")
    return header


def read_checkpoint_header(directory: str | Path) -> CheckpointHeader:
    path = Path(directory) / HEADER_FILE
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: checkpoint header missing") from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: checkpoint header is not valid JSON ({exc})") from exc
    return CheckpointHeader.from_json(obj, str(path))


def read_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], CheckpointHeader, dict]:
    directory = Path(directory)
    header = read_checkpoint_header(directory)
    blob_path = directory / BLOB_FILE
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"{blob_path}: parameter blob missing") from exc
    if len(blob) != header.blob_length:
        raise FormatError(f"{blob_path}: blob has {len(blob)} bytes but header declares {header.blob_length}")
    config_path = directory / CONFIG_FILE
    try:
        config = json.loads(config_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"{config_path}: config snapshot missing") from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{config_path}: config snapshot is not valid JSON ({exc})") from exc
    if digest_config(config) != header.config_digest:
        raise FormatError(f"{config_path}: config digest does not match header")
    tensors = {}
    for e in header.entries:
        raw = blob[e.offset : e.offset + e.length]
        tensors[e.name] = np.frombuffer(raw, dtype="<f4").reshape(e.shape).astype(np.float32)
    return tensors, header, config


# --------------------------------------------------------------------- CSV

def format_value(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise FormatError(f"{path}: row has {len(row)} fields, expected {len(columns)}")
            writer.writerow([format_value(v) for v in row])


def read_csv(path: str | Path, columns: Sequence[str] | None = None) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise FormatError(f"{path}: empty CSV") from exc
        if columns is not None and list(columns) != header:
            raise FormatError(f"{path}: CSV columns {header} != expected {list(columns)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: {len(row)} fields, expected {len(header)}")
            out.append(dict(zip(header, row)))
    return out
