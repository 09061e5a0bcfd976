"""
Binary container shared by network checkpoints, speaker artifacts and dataset
dumps. Layout (all integers little-endian):

    offset  size  field
    0       4     magic b"ADLB"
    4       2     format version (u16), currently 1
    6       1     kind (u8): 1 network, 2 speaker artifact, 3 dataset
    7       1     reserved, 0
    8       8     payload length n (u64)
    16      n     payload
    16+n    4     CRC32 of the payload (u32)

Network payload: spec block, trainable mask (one u8 per weight layer), then for
each layer its weight matrix (fan_in * fan_out float64, row-major) followed by
its bias (fan_out float64).

Spec block: input_dim (u32), output_dim (u32), activation id (u8), reserved
(u8), hidden layer count L (u16), then L hidden widths (u32 each).
"""
from __future__ import annotations

import hashlib
import io
import logging
import struct
import zlib
from enum import IntEnum
from pathlib import Path

import numpy as np

from adaptlab.activations import ACTIVATION_IDS
from adaptlab.errors import CheckpointError, ChecksumError, TruncatedError, VersionError
from adaptlab.nn import NetworkParams, NetworkSpec

logger = logging.getLogger(__name__)

MAGIC = b"ADLB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBBQ")
_CRC = struct.Struct("<I")


class Kind(IntEnum):
    NETWORK = 1
    SPEAKER_ARTIFACT = 2
    DATASET = 3


class PayloadWriter:
    def __init__(self) -> None:
        self._buf = io.BytesIO()

    def pack(self, fmt: str, *values: object) -> None:
        self._buf.write(struct.pack("<" + fmt, *values))

    def raw(self, data: bytes) -> None:
        self._buf.write(data)

    def array(self, a: np.ndarray, dtype: str = "<f8") -> None:
        self._buf.write(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def getvalue(self) -> bytes:
        return self._buf.getvalue()


class PayloadReader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise TruncatedError(
                f"payload ends at byte {len(self._data)}, needed {self._pos + n}"
            )
        chunk = self._data[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        s = struct.Struct("<" + fmt)
        return s.unpack(self._take(s.size))

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def array(self, shape: tuple[int, ...], dtype: str = "<f8") -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        itemsize = np.dtype(dtype).itemsize
        out = np.frombuffer(self._take(count * itemsize), dtype=dtype).reshape(shape)
        return out.astype(np.dtype(dtype).newbyteorder("="))

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._data)


def write_container(path: str | Path, kind: Kind, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, int(kind), 0, len(payload))
    crc = _CRC.pack(zlib.crc32(payload))
    with open(path, "wb") as f:
        f.write(header + payload + crc)


def read_container(path: str | Path, expected_kind: Kind) -> bytes:
    """Validate framing and checksum; return the payload bytes."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise TruncatedError(f"{path}: {len(blob)} bytes is shorter than the header")
    magic, version, kind, _reserved, length = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    if kind != int(expected_kind):
        raise CheckpointError(f"{path}: container kind {kind}, expected {int(expected_kind)}")
    end = _HEADER.size + length
    if len(blob) < end + _CRC.size:
        raise TruncatedError(f"{path}: expected {end + _CRC.size} bytes, found {len(blob)}")
    if len(blob) > end + _CRC.size:
        raise CheckpointError(f"{path}: {len(blob) - end - _CRC.size} trailing bytes")
    payload = blob[_HEADER.size:end]
    (stored,) = _CRC.unpack_from(blob, end)
    if zlib.crc32(payload) != stored:
        raise ChecksumError(f"{path}: CRC32 mismatch (stored {stored:#010x})")
    return payload


def write_spec(w: PayloadWriter, spec: NetworkSpec) -> None:
    w.pack("IIBBH", spec.input_dim, spec.output_dim,
           ACTIVATION_IDS[spec.hidden_activation], 0, len(spec.hidden_dims))
    for d in spec.hidden_dims:
        w.pack("I", d)


def read_spec(r: PayloadReader) -> NetworkSpec:
    input_dim, output_dim, act_id, _reserved, n_hidden = r.unpack("IIBBH")
    names = {v: k for k, v in ACTIVATION_IDS.items()}
    if act_id not in names:
        raise CheckpointError(f"unknown activation id {act_id}")
    hidden = tuple(r.unpack("I")[0] for _ in range(n_hidden))
    return NetworkSpec(input_dim, hidden, output_dim, names[act_id])


def spec_block(spec: NetworkSpec) -> bytes:
    w = PayloadWriter()
    write_spec(w, spec)
    return w.getvalue()


def write_params(w: PayloadWriter, spec: NetworkSpec, params: NetworkParams) -> None:
    params.validate(spec)
    for t in params.trainable:
        w.pack("B", 1 if t else 0)
    for wt, b in zip(params.weights, params.biases):
        w.array(wt)
        w.array(b)


def read_params(r: PayloadReader, spec: NetworkSpec) -> NetworkParams:
    mask = tuple(bool(r.unpack("B")[0]) for _ in range(spec.n_layers))
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_shapes:
        weights.append(r.array((fan_in, fan_out)))
        biases.append(r.array((fan_out,)))
    return NetworkParams(tuple(weights), tuple(biases), mask)


def si_fingerprint(spec: NetworkSpec, params: NetworkParams) -> bytes:
    """SHA-256 over the spec block and every SI tensor."""
    h = hashlib.sha256(spec_block(spec))
    for wt, b in zip(params.weights, params.biases):
        h.update(np.ascontiguousarray(wt, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return h.digest()


def save_params(spec: NetworkSpec, params: NetworkParams, path: str | Path) -> None:
    w = PayloadWriter()
    write_spec(w, spec)
    write_params(w, spec, params)
    write_container(path, Kind.NETWORK, w.getvalue())
    logger.debug("Wrote checkpoint %s", path)


def load_params(path: str | Path) -> tuple[NetworkSpec, NetworkParams]:
    r = PayloadReader(read_container(path, Kind.NETWORK))
    spec = read_spec(r)
    params = read_params(r, spec)
    if not r.exhausted:
        raise CheckpointError(f"{path}: unexpected bytes after the last layer")
    return spec, params
