"""Message types exchanged between client and server, and their binary framing.

Frame layout: 1-byte type tag, 4-byte little-endian payload length, payload.
Payload fields are little-endian u32 / f32 in declared order. Config control
frames carry UTF-8 JSON; start/stop frames are empty.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

HEADER = struct.Struct("<BI")
HEADER_SIZE = HEADER.size  # 5
MAX_PAYLOAD = 1 << 31

TAG_POINTS = 0x01
TAG_EMBEDDINGS = 0x02
TAG_CUT_GRADIENTS = 0x03
TAG_START = 0x10
TAG_STOP = 0x11
TAG_CONFIG = 0x12


class CodecError(ValueError):
    pass


class TruncatedFrameError(CodecError):
    pass


class UnknownTagError(CodecError):
    pass


class LengthOverflowError(CodecError):
    pass


class ProtocolError(RuntimeError):
    """A peer broke the exchange order (wrong message kind or iteration)."""


def _eq_arrays(a, b) -> bool:
    return a.shape == b.shape and np.array_equal(a, b)


@dataclass(eq=False)
class PointsBatch:
    t: int
    positions: np.ndarray  # (N_r, N_p, 3)
    directions: np.ndarray  # (N_r, 3)
    deltas: np.ndarray  # (N_r, N_p)

    @property
    def n_rays(self) -> int:
        return self.positions.shape[0]

    @property
    def n_samples(self) -> int:
        return self.positions.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, PointsBatch)
            and self.t == other.t
            and _eq_arrays(self.positions, other.positions)
            and _eq_arrays(self.directions, other.directions)
            and _eq_arrays(self.deltas, other.deltas)
        )


@dataclass(eq=False)
class EmbeddingsBatch:
    t: int
    values: np.ndarray  # (n_points, d)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        return type(other) is type(self) and self.t == other.t and _eq_arrays(self.values, other.values)


@dataclass(eq=False)
class CutGradientsBatch(EmbeddingsBatch):
    pass


@dataclass
class Control:
    kind: str  # "start" | "stop" | "config"
    config: dict = field(default_factory=dict)


_CONTROL_TAGS = {"start": TAG_START, "stop": TAG_STOP, "config": TAG_CONFIG}


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _frame(tag: int, payload: bytes) -> bytes:
    if len(payload) >= MAX_PAYLOAD:
        raise LengthOverflowError(f"payload of {len(payload)} bytes exceeds the 32-bit length field")
    return HEADER.pack(tag, len(payload)) + payload


def encode_message(msg) -> bytes:
    if isinstance(msg, PointsBatch):
        nr, npnt = msg.n_rays, msg.n_samples
        head = struct.pack("<III", msg.t, nr, npnt)
        return _frame(TAG_POINTS, head + _f32(msg.positions) + _f32(msg.directions) + _f32(msg.deltas))
    if isinstance(msg, EmbeddingsBatch):
        tag = TAG_CUT_GRADIENTS if isinstance(msg, CutGradientsBatch) else TAG_EMBEDDINGS
        return _frame(tag, struct.pack("<II", msg.t, msg.d) + _f32(msg.values))
    if isinstance(msg, Control):
        if msg.kind not in _CONTROL_TAGS:
            raise CodecError(f"unknown control kind {msg.kind!r}")
        payload = json.dumps(msg.config, sort_keys=True).encode() if msg.kind == "config" else b""
        return _frame(_CONTROL_TAGS[msg.kind], payload)
    raise CodecError(f"cannot encode {type(msg).__name__}")


def frame_length(header: bytes) -> tuple[int, int]:
    if len(header) < HEADER_SIZE:
        raise TruncatedFrameError(f"header needs {HEADER_SIZE} bytes, got {len(header)}")
    return HEADER.unpack_from(header)


def _floats(buf: bytes, offset: int, count: int, shape) -> tuple[np.ndarray, int]:
    end = offset + 4 * count
    if end > len(buf):
        raise TruncatedFrameError(f"payload ends at {len(buf)}, field needs {end}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float64)
    return arr.reshape(shape), end


def decode_message(data: bytes):
    """Decode exactly one frame. Values come back as float64 arrays."""
    tag, length = frame_length(data)
    if length >= MAX_PAYLOAD:
        raise LengthOverflowError(f"declared payload length {length} is too large")
    payload = data[HEADER_SIZE:]
    if len(payload) < length:
        raise TruncatedFrameError(f"declared {length} payload bytes, got {len(payload)}")
    if len(payload) > length:
        raise CodecError(f"{len(payload) - length} trailing bytes after frame")
    if tag == TAG_POINTS:
        if length < 12:
            raise TruncatedFrameError("points header truncated")
        t, nr, npnt = struct.unpack_from("<III", payload)
        expected = 12 + 4 * (nr * npnt * 3 + nr * 3 + nr * npnt)
        if length != expected:
            raise LengthOverflowError(f"points payload is {length} bytes, layout needs {expected}")
        pos, off = _floats(payload, 12, nr * npnt * 3, (nr, npnt, 3))
        dirs, off = _floats(payload, off, nr * 3, (nr, 3))
        deltas, off = _floats(payload, off, nr * npnt, (nr, npnt))
        return PointsBatch(t, pos, dirs, deltas)
    if tag in (TAG_EMBEDDINGS, TAG_CUT_GRADIENTS):
        if length < 8:
            raise TruncatedFrameError("embedding header truncated")
        t, d = struct.unpack_from("<II", payload)
        body = length - 8
        if d == 0 or body % (4 * d):
            raise CodecError(f"{body} value bytes do not divide into rows of d={d}")
        vals, _ = _floats(payload, 8, body // 4, (body // (4 * d), d))
        cls = CutGradientsBatch if tag == TAG_CUT_GRADIENTS else EmbeddingsBatch
        return cls(t, vals)
    if tag == TAG_CONFIG:
        try:
            return Control("config", json.loads(payload.decode()))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CodecError(f"bad config payload: {exc}") from exc
    if tag == TAG_START:
        return Control("start")
    if tag == TAG_STOP:
        return Control("stop")
    raise UnknownTagError(f"unknown frame tag 0x{tag:02X}")


def quantize(msg):
    """The message as the peer will see it after a trip through the f32 codec."""
    return decode_message(encode_message(msg))


def points_frame_size(n_rays: int, n_samples: int) -> int:
    return HEADER_SIZE + 12 + 4 * (n_rays * n_samples * 3 + n_rays * 3 + n_rays * n_samples)


def embeddings_frame_size(n_rays: int, n_samples: int, d: int) -> int:
    return HEADER_SIZE + 8 + 4 * n_rays * n_samples * d


def iteration_wire_bytes(n_rays: int, n_samples: int, d: int) -> int:
    """Bytes of the three data frames exchanged in one training iteration."""
    return points_frame_size(n_rays, n_samples) + 2 * embeddings_frame_size(n_rays, n_samples, d)


def read_frames(buf: bytes):
    """Split a byte string of concatenated frames (e.g. a trace file) into messages."""
    off = 0
    while off < len(buf):
        _, length = frame_length(buf[off : off + HEADER_SIZE])
        end = off + HEADER_SIZE + length
        if end > len(buf):
            raise TruncatedFrameError(f"frame at offset {off} runs past end of data")
        yield decode_message(buf[off:end])
        off = end
