"""Wire format and sessions for sending an artifact frame by frame.

A session is a sequence of packets::

    type u8 | length u32 | payload | crc32 u32 (over type, length and payload)

with one Header packet (shared color block and config), one Frame packet per
structure block and a closing End packet. All integers are little-endian.

Frame payloads are ``index u32 | codec u8 | data``. Codec 0 carries the raw
float32 structure block, codec 1 a one-row 16-bit delta against the previous
frame, and codec 2 a batched temporal matrix carried whole by the first frame
packet (later codec 2 frames are empty and read their row from it).
"""

from __future__ import annotations

import io
import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Callable, Iterator

import numpy as np

from .config import NetworkConfig
from .errors import (
    CorruptData,
    CorruptPacket,
    InvalidArgument,
    ProtocolError,
    SessionError,
    TruncatedSession,
    UnsupportedStream,
)
from .model import ColorBlock, InvArtifact, StructureBlock, assemble_model, color_shapes, structure_shapes
from .nn import F32, MlpNetwork, deserialize_layers
from .twc import (
    StreamingDecoder,
    StreamingEncoder,
    blocks_from_matrix,
    build_temporal_matrix,
    megabits_per_second,
    twc_decode,
    twc_encode,
)

PKT_HEADER = 0
PKT_FRAME = 1
PKT_END = 2

FRAME_RAW = 0
FRAME_DELTA = 1
FRAME_BATCH = 2
FRAME_CODECS = (FRAME_RAW, FRAME_DELTA, FRAME_BATCH)

MAGIC = b"INVS"
VERSION = 1

_PKT = struct.Struct("<BI")
_FRAME = struct.Struct("<IB")


# ---------------------------------------------------------------------------
# packets


def encode_packet(ptype: int, payload: bytes = b"") -> bytes:
    head = _PKT.pack(ptype, len(payload))
    return head + payload + struct.pack("<I", zlib.crc32(head + payload))


def encode_header(artifact: InvArtifact) -> bytes:
    cfg = artifact.config.to_json().encode()
    return b"".join(
        [
            MAGIC,
            struct.pack("<HI", VERSION, len(cfg)),
            cfg,
            struct.pack("<II", artifact.config.structure_layers, artifact.warmup_count),
            artifact.shared_color.tobytes(),
        ]
    )


@dataclass
class SessionHeader:
    config: NetworkConfig
    k: int
    warmup_count: int
    shared_color: ColorBlock


def decode_header(payload: bytes) -> SessionHeader:
    if payload[:4] != MAGIC:
        raise UnsupportedStream("stream does not start with an INVS header")
    if len(payload) < 10:
        raise UnsupportedStream("header too short")
    version, clen = struct.unpack_from("<HI", payload, 4)
    if version != VERSION:
        raise UnsupportedStream(f"unsupported stream version {version}")
    try:
        config = NetworkConfig.from_json(payload[10 : 10 + clen].decode())
        k, warmup = struct.unpack_from("<II", payload, 10 + clen)
    except (ValueError, KeyError, TypeError, struct.error) as exc:
        raise UnsupportedStream(f"bad stream config: {exc}") from exc
    if k != config.structure_layers:
        raise UnsupportedStream(f"header k={k} disagrees with its config")
    blob = payload[18 + clen :]
    try:
        layers = deserialize_layers(blob, color_shapes(config))
    except CorruptData as exc:
        raise UnsupportedStream(f"shared color block: {exc}") from exc
    return SessionHeader(config, k, warmup, ColorBlock(layers, config.heads, config.input_dim, config.view_dim))


def session_packets(artifact: InvArtifact, codec: int = FRAME_DELTA) -> Iterator[bytes]:
    """Header packet, one Frame packet per structure block, End packet."""
    if codec not in FRAME_CODECS:
        raise InvalidArgument(f"unknown frame codec {codec}")
    yield encode_packet(PKT_HEADER, encode_header(artifact))
    enc = StreamingEncoder()
    batch = None
    if codec == FRAME_BATCH and artifact.frames:
        batch = twc_encode(build_temporal_matrix(artifact.frames)).to_bytes()
    for i, block in enumerate(artifact.frames):
        if codec == FRAME_RAW:
            data = block.tobytes()
        elif codec == FRAME_DELTA:
            data = enc.encode(np.frombuffer(block.tobytes(), dtype=F32)).to_bytes()
        else:
            data = batch if i == 0 else b""
        yield encode_packet(PKT_FRAME, _FRAME.pack(block.frame_index, codec) + data)
    yield encode_packet(PKT_END)


def encode_session(artifact: InvArtifact, codec: int = FRAME_DELTA) -> bytes:
    return b"".join(session_packets(artifact, codec))


# ---------------------------------------------------------------------------
# decoding


@dataclass
class DecodedFrame:
    index: int
    block: StructureBlock
    color: ColorBlock
    packet_bytes: int

    def network(self) -> MlpNetwork:
        return assemble_model(self.block, self.color)


def _read_exact(reader: BinaryIO, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        b = reader.read(n - got)
        if not b:
            break
        chunks.append(b)
        got += len(b)
    return b"".join(chunks)


class SessionDecoder:
    """Pull-based decoder: reads one packet at a time, never ahead of the frame it yields."""

    def __init__(self, reader: BinaryIO):
        self.reader = reader
        self.header: SessionHeader | None = None
        self.frames: list[StructureBlock] = []
        self.finished = False
        self._delta = StreamingDecoder()
        self._batch_rows: list[StructureBlock] | None = None

    def _packet(self) -> tuple[int, bytes] | None:
        head = _read_exact(self.reader, _PKT.size)
        if not head:
            return None
        if len(head) < _PKT.size:
            raise TruncatedSession("stream ended inside a packet header", len(self.frames))
        ptype, length = _PKT.unpack(head)
        rest = _read_exact(self.reader, length + 4)
        if len(rest) < length + 4:
            raise TruncatedSession("stream ended inside a packet", len(self.frames))
        payload, (crc,) = rest[:length], struct.unpack("<I", rest[length:])
        if zlib.crc32(head + payload) != crc:
            raise CorruptPacket(f"checksum mismatch in packet after frame {len(self.frames) - 1}", len(self.frames))
        return ptype, payload

    def __iter__(self) -> Iterator[DecodedFrame]:
        return self.frames_iter()

    def frames_iter(self) -> Iterator[DecodedFrame]:
        first = self._packet()
        if first is None:
            raise TruncatedSession("empty stream", 0)
        if first[0] != PKT_HEADER:
            raise UnsupportedStream("stream does not start with a header packet")
        self.header = decode_header(first[1])
        while True:
            pkt = self._packet()
            if pkt is None:
                raise TruncatedSession("stream ended without an End packet", len(self.frames))
            ptype, payload = pkt
            if ptype == PKT_END:
                self.finished = True
                return
            if ptype != PKT_FRAME:
                raise ProtocolError(f"unexpected packet type {ptype}")
            block = self._frame(payload)
            self.frames.append(block)
            yield DecodedFrame(block.frame_index, block, self.header.shared_color, _PKT.size + len(payload) + 4)

    def _frame(self, payload: bytes) -> StructureBlock:
        if len(payload) < _FRAME.size:
            raise ProtocolError("frame packet too short")
        index, codec = _FRAME.unpack_from(payload)
        data = payload[_FRAME.size :]
        expected = len(self.frames)
        if index != expected:
            raise ProtocolError(f"frame {index} arrived where frame {expected} was expected")
        shapes = structure_shapes(self.header.config)
        try:
            if codec == FRAME_RAW:
                return StructureBlock(index, deserialize_layers(data, shapes))
            if codec == FRAME_DELTA:
                row = self._delta.decode(data)
                return blocks_from_matrix(row[None, :], shapes, index)[0]
            if codec == FRAME_BATCH:
                if index == 0:
                    self._batch_rows = blocks_from_matrix(twc_decode(data), shapes)
                elif data or self._batch_rows is None:
                    raise ProtocolError("batched frames after the first must be empty")
                if index >= len(self._batch_rows):
                    raise ProtocolError(f"batch holds {len(self._batch_rows)} frames, frame {index} requested")
                return self._batch_rows[index]
        except CorruptData as exc:
            raise CorruptPacket(f"frame {index}: {exc}", index) from exc
        raise ProtocolError(f"unknown frame codec {codec}")

    def artifact(self) -> InvArtifact:
        if self.header is None:
            raise ProtocolError("no header decoded yet")
        return InvArtifact(self.header.config, self.header.shared_color, list(self.frames), self.header.warmup_count)


def decode_session(data: bytes | BinaryIO) -> InvArtifact:
    reader = io.BytesIO(data) if isinstance(data, (bytes, bytearray)) else data
    dec = SessionDecoder(reader)
    for _ in dec:
        pass
    return dec.artifact()


def write_session_file(artifact: InvArtifact, path: str | Path, codec: int = FRAME_DELTA) -> int:
    blob = encode_session(artifact, codec)
    Path(path).write_bytes(blob)
    return len(blob)


def read_session_file(path: str | Path) -> InvArtifact:
    with open(path, "rb") as f:
        return decode_session(f)


# ---------------------------------------------------------------------------
# sessions


@dataclass
class SessionResult:
    frames: int
    bytes_total: int
    frame_bytes: int  # Frame packets only, framing included
    fps: float

    @property
    def bytes_per_frame(self) -> float:
        return self.frame_bytes / self.frames if self.frames else 0.0

    @property
    def mbps(self) -> float:
        return megabits_per_second(self.bytes_per_frame, self.fps)


_DONE = object()


def stream_send(
    artifact: InvArtifact,
    transport: BinaryIO,
    fps: float | None = None,
    codec: int = FRAME_DELTA,
    queue_size: int = 4,
) -> SessionResult:
    """Write a session to ``transport``, pacing Frame packets at ``fps`` (best effort).

    Packets are produced by a worker thread into a bounded queue so encoding of
    the next frame overlaps the transmission of the current one.
    """
    q: queue.Queue = queue.Queue(maxsize=queue_size)
    stop = threading.Event()

    def produce():
        try:
            for pkt in session_packets(artifact, codec):
                while not stop.is_set():
                    try:
                        q.put(pkt, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except Exception as exc:  # surfaced on the sending side
            q.put(exc)
        q.put(_DONE)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    frames = total = frame_bytes = 0
    interval = 1.0 / fps if fps else 0.0
    next_due = time.monotonic()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                break
            if isinstance(item, Exception):
                raise item
            if item[0] == PKT_FRAME and interval:
                delay = next_due - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                next_due = max(next_due, time.monotonic()) + interval
            try:
                transport.write(item)
                transport.flush()
            except OSError as exc:
                raise SessionError(f"transport failed: {exc}", frames) from exc
            total += len(item)
            if item[0] == PKT_FRAME:
                frames += 1
                frame_bytes += len(item)
    finally:
        stop.set()
        worker.join()
    return SessionResult(frames, total, frame_bytes, fps or 30.0)


def stream_receive(
    transport: BinaryIO,
    sink: Callable[[int, MlpNetwork], None] | None = None,
    fps: float = 30.0,
) -> tuple[InvArtifact, SessionResult]:
    """Decode a session, calling ``sink(index, network)`` as each frame arrives."""
    dec = SessionDecoder(transport)
    frames = frame_bytes = 0
    try:
        for fr in dec:
            frames += 1
            frame_bytes += fr.packet_bytes
            if sink is not None:
                sink(fr.index, fr.network())
    except OSError as exc:
        raise SessionError(f"transport failed: {exc}", frames) from exc
    header_bytes = _PKT.size + len(encode_header(dec.artifact())) + 4
    return dec.artifact(), SessionResult(frames, header_bytes + frame_bytes + _PKT.size + 4, frame_bytes, fps)


# ---------------------------------------------------------------------------
# sockets


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise InvalidArgument(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def send_to(
    address: str | tuple[str, int],
    artifact: InvArtifact,
    fps: float | None = None,
    codec: int = FRAME_DELTA,
    timeout: float = 30.0,
) -> SessionResult:
    """Connect to a listening receiver and stream ``artifact`` to it."""
    addr = parse_address(address) if isinstance(address, str) else address
    try:
        sock = socket.create_connection(addr, timeout=timeout)
    except OSError as exc:
        raise SessionError(f"cannot connect to {addr[0]}:{addr[1]}: {exc}", 0) from exc
    with sock, sock.makefile("wb") as w:
        return stream_send(artifact, w, fps, codec)


def listen(address: str | tuple[str, int] = ("127.0.0.1", 0)) -> socket.socket:
    addr = parse_address(address) if isinstance(address, str) else address
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(addr)
    srv.listen(1)
    return srv


def receive_on(
    server: socket.socket,
    sink: Callable[[int, MlpNetwork], None] | None = None,
    fps: float = 30.0,
    timeout: float = 30.0,
) -> tuple[InvArtifact, SessionResult]:
    """Accept one sender on a listening socket and decode its session."""
    server.settimeout(timeout)
    try:
        conn, _ = server.accept()
    except OSError as exc:
        raise SessionError(f"no sender connected: {exc}", 0) from exc
    conn.settimeout(timeout)
    with conn, conn.makefile("rb") as r:
        return stream_receive(r, sink, fps)
