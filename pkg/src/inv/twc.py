"""Temporal weight compression.

Structure blocks of consecutive frames are stacked into a frame-major matrix.
Every value is cut to 16 IEEE-754 bits (sign, exponent, 7 mantissa bits,
rounded to nearest even), each row after the first is replaced by its
16-bit wrap-around difference from the previous row, and the words are split
into a high-byte plane and a low-byte plane before a lossless byte
compressor runs over them.

Container layout (all integers little-endian)::

    codec u8 | frames u32 | row_length u32 | compressed bytes | crc32 u32

The CRC covers everything before it, so any corrupted byte is rejected.
"""

from __future__ import annotations

import lzma
import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CorruptData, InvalidArgument
from .model import InvArtifact, StructureBlock
from .nn import F32, deserialize_layers

CODEC_STORED = 0
CODEC_ZLIB = 1
CODEC_LZMA = 2
CODEC_NAMES = {CODEC_STORED: "stored", CODEC_ZLIB: "zlib", CODEC_LZMA: "lzma"}
DEFAULT_CODEC = CODEC_LZMA

_HEADER = struct.Struct("<BII")


def truncate16(x, toward_zero: bool = False) -> np.ndarray:
    """Top 16 bits of each float32 (1 sign, 8 exponent, 7 mantissa bits), as uint16.

    Rounds to nearest, ties to even, which bounds the relative error of
    normal values by 2^-8; ``toward_zero`` simply drops the low 16 bits
    (bound 2^-7). A carry may bump the exponent; a carry into infinity falls
    back to the toward-zero result.
    """
    a = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(a)):
        raise InvalidArgument("truncate16 needs finite values")
    bits = a.view(np.uint32).astype(np.uint64)
    low_cut = bits >> 16
    if toward_zero:
        return low_cut.astype(np.uint16)
    rounded = (bits + 0x7FFF + (low_cut & 1)) >> 16
    overflow = (rounded & 0x7F80) == 0x7F80
    return np.where(overflow, low_cut, rounded).astype(np.uint16)


def expand16(t) -> np.ndarray:
    return (np.asarray(t, dtype=np.uint16).astype(np.uint32) << 16).view(np.float32)


def truncate_values(x) -> np.ndarray:
    """``expand16(truncate16(x))``: the float32 values a 16-bit round trip yields."""
    return expand16(truncate16(x))


# ---------------------------------------------------------------------------
# temporal matrix


def build_temporal_matrix(blocks: Sequence[StructureBlock]) -> np.ndarray:
    """Row ``t`` is frame ``t``'s serialized structure block read back as float32."""
    if not blocks:
        raise InvalidArgument("need at least one structure block")
    shapes = blocks[0].shapes
    rows = []
    for b in blocks:
        if b.shapes != shapes:
            raise InvalidArgument(f"frame {b.frame_index} has different layer shapes")
        rows.append(np.frombuffer(b.tobytes(), dtype=F32))
    return np.stack(rows).astype(np.float32)


def blocks_from_matrix(matrix: np.ndarray, shapes, first_index: int = 0) -> list[StructureBlock]:
    m = np.asarray(matrix, dtype=np.float32)
    return [
        StructureBlock(first_index + t, deserialize_layers(m[t].astype(F32).tobytes(), shapes))
        for t in range(m.shape[0])
    ]


# ---------------------------------------------------------------------------
# byte backends


def _compress(data: bytes, codec: int) -> bytes:
    if codec == CODEC_STORED:
        return data
    if codec == CODEC_ZLIB:
        return zlib.compress(data, 9)
    if codec == CODEC_LZMA:
        return lzma.compress(data, format=lzma.FORMAT_RAW, filters=[{"id": lzma.FILTER_LZMA2, "preset": 9}])
    raise InvalidArgument(f"unknown codec id {codec}")


def _decompress(data: bytes, codec: int) -> bytes:
    try:
        if codec == CODEC_STORED:
            return data
        if codec == CODEC_ZLIB:
            return zlib.decompress(data)
        if codec == CODEC_LZMA:
            return lzma.decompress(data, format=lzma.FORMAT_RAW, filters=[{"id": lzma.FILTER_LZMA2, "preset": 9}])
    except (zlib.error, lzma.LZMAError) as exc:
        raise CorruptData(f"compressed stream is damaged: {exc}") from exc
    raise CorruptData(f"unknown codec id {codec}")


# ---------------------------------------------------------------------------
# payload


@dataclass
class TwcPayload:
    codec: int
    frames: int
    row_length: int
    data: bytes  # compressed stream

    def to_bytes(self) -> bytes:
        body = _HEADER.pack(self.codec, self.frames, self.row_length) + self.data
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, blob: bytes) -> TwcPayload:
        if len(blob) < _HEADER.size + 4:
            raise CorruptData("TWC payload too short")
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) != crc:
            raise CorruptData("TWC payload checksum mismatch")
        codec, frames, row_length = _HEADER.unpack_from(body)
        return cls(codec, frames, row_length, body[_HEADER.size :])

    def __len__(self) -> int:
        return _HEADER.size + len(self.data) + 4


def _delta_words(words: np.ndarray, previous: np.ndarray | None) -> np.ndarray:
    """Row-wise wrap-around differences; ``previous`` seeds row 0 (zeros => raw words)."""
    prev = np.zeros(words.shape[1], np.uint16) if previous is None else previous
    stacked = np.vstack([prev[None, :], words])
    return stacked[1:] - stacked[:-1]  # uint16 arithmetic wraps mod 2^16


def _undelta_words(deltas: np.ndarray, previous: np.ndarray | None) -> np.ndarray:
    prev = np.zeros(deltas.shape[1], np.uint16) if previous is None else previous
    out = np.cumsum(np.vstack([prev[None, :], deltas]), axis=0, dtype=np.uint64)[1:]
    return (out & 0xFFFF).astype(np.uint16)


def _zigzag(deltas: np.ndarray) -> np.ndarray:
    """Signed deltas to unsigned so small negative steps get a zero high byte."""
    s = deltas.astype(np.uint16).view(np.int16).astype(np.int32)
    return ((s << 1) ^ (s >> 15)).astype(np.uint16)


def _unzigzag(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint32)
    return ((z >> 1) ^ (0 - (z & 1))).astype(np.uint16)


def _planes(deltas: np.ndarray) -> bytes:
    z = _zigzag(deltas)
    return (z >> 8).astype(np.uint8).tobytes() + (z & 0xFF).astype(np.uint8).tobytes()


def _unplanes(raw: bytes, frames: int, row_length: int) -> np.ndarray:
    n = frames * row_length
    if len(raw) != 2 * n:
        raise CorruptData(f"decoded {len(raw)} bytes, expected {2 * n}")
    b = np.frombuffer(raw, dtype=np.uint8)
    words = (b[:n].astype(np.uint16) << 8) | b[n:].astype(np.uint16)
    return _unzigzag(words).reshape(frames, row_length)


def encode_words(words: np.ndarray, codec: int = DEFAULT_CODEC, previous: np.ndarray | None = None) -> TwcPayload:
    words = np.atleast_2d(np.asarray(words, dtype=np.uint16))
    data = _compress(_planes(_delta_words(words, previous)), codec)
    return TwcPayload(codec, words.shape[0], words.shape[1], data)


def decode_words(payload: TwcPayload | bytes, previous: np.ndarray | None = None) -> np.ndarray:
    if isinstance(payload, (bytes, bytearray, memoryview)):
        payload = TwcPayload.from_bytes(bytes(payload))
    if payload.codec not in CODEC_NAMES:
        raise CorruptData(f"unknown codec id {payload.codec}")
    if previous is not None and previous.shape != (payload.row_length,):
        raise CorruptData("payload row length does not match the reference row")
    raw = _decompress(payload.data, payload.codec)
    return _undelta_words(_unplanes(raw, payload.frames, payload.row_length), previous)


def twc_encode(matrix: np.ndarray, codec: int = DEFAULT_CODEC) -> TwcPayload:
    """Batched mode: one payload for the whole temporal matrix."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float32))
    if m.shape[0] < 1:
        raise InvalidArgument("temporal matrix needs at least one row")
    return encode_words(truncate16(m), codec)


def twc_decode(payload: TwcPayload | bytes) -> np.ndarray:
    """Inverse of :func:`twc_encode`, exact up to the 16-bit truncation."""
    return expand16(decode_words(payload))


class StreamingEncoder:
    """Per-frame payloads; each row is differenced against the previous frame only."""

    def __init__(self, codec: int = DEFAULT_CODEC):
        self.codec = codec
        self.previous: np.ndarray | None = None

    def encode(self, row: np.ndarray) -> TwcPayload:
        words = truncate16(np.asarray(row, np.float32).reshape(1, -1))
        payload = encode_words(words, self.codec, self.previous)
        self.previous = words[0]
        return payload


class StreamingDecoder:
    def __init__(self):
        self.previous: np.ndarray | None = None

    def decode(self, payload: TwcPayload | bytes) -> np.ndarray:
        words = decode_words(payload, self.previous)
        if words.shape[0] != 1:
            raise CorruptData("streaming payloads carry exactly one frame")
        self.previous = words[0]
        return expand16(words[0])


# ---------------------------------------------------------------------------
# reporting


def megabits_per_second(bytes_per_frame: float, fps: float) -> float:
    return bytes_per_frame * 8 * fps / 1e6


@dataclass
class CompressionReport:
    frames: int
    raw_bytes: int
    compressed_bytes: int
    fps: float

    @property
    def bytes_per_frame(self) -> float:
        return self.compressed_bytes / self.frames if self.frames else 0.0

    @property
    def ratio(self) -> float:
        return self.raw_bytes / self.compressed_bytes if self.compressed_bytes else float("inf")

    @property
    def mbps(self) -> float:
        return megabits_per_second(self.bytes_per_frame, self.fps)

    def as_rows(self) -> list[tuple[str, str]]:
        return [
            ("frames", str(self.frames)),
            ("raw_bytes", str(self.raw_bytes)),
            ("compressed_bytes", str(self.compressed_bytes)),
            ("bytes_per_frame", f"{self.bytes_per_frame:.1f}"),
            ("ratio", f"{self.ratio:.3f}"),
            ("mbps", f"{self.mbps:.6f}"),
        ]


def compression_report(artifact: InvArtifact, payload: TwcPayload | bytes | int, fps: float = 30.0) -> CompressionReport:
    """Sizes of ``payload`` (or a byte count) against the artifact's raw float32 frames."""
    n = len(artifact.frames)
    raw = sum(len(fr.tobytes()) for fr in artifact.frames)
    if isinstance(payload, int):
        size = payload
    else:
        size = len(payload) if isinstance(payload, TwcPayload) else len(bytes(payload))
    return CompressionReport(n, raw, size, fps)
