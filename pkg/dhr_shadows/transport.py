"""
Transport Module

This module provides the wire side of the renderer: lossless block codecs,
frame headers, MTU-sized datagrams, the reassembler that turns datagrams back
into whole frames (a frame missing any packet is dropped) and the camera
message the client sends upstream.
"""

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple, Union

import lz4.block
import numpy as np

from .compose import FinalImage
from .errors import DecodeError
from .gbuffer import CameraPose
from .raytrace import MODE_HARD, MODE_SOFT, AoBuffer, VisibilityBuffer
from .scene import MAX_LIGHTS

logger = logging.getLogger(__name__)

PASS_VISIBILITY = 0
PASS_AO = 1
PASS_COLOR = 2
PASS_NAMES = {PASS_VISIBILITY: "visibility", PASS_AO: "ao", PASS_COLOR: "color"}
BYTES_PER_PIXEL = {PASS_VISIBILITY: 1, PASS_AO: 1, PASS_COLOR: 3}

DEFAULT_PAYLOAD_CAPACITY = 1200
MIN_PAYLOAD_CAPACITY = 64
DEFAULT_EXPIRY_MS = 250.0

_MODE_IDS = {MODE_HARD: 0, MODE_SOFT: 1}
_MODE_NAMES = {v: k for k, v in _MODE_IDS.items()}

Buffer = Union[VisibilityBuffer, AoBuffer, FinalImage]


class Codec:
    """Lossless block codec. Subclasses set `codec_id` and `name`."""

    codec_id = -1
    name = ""

    def compress(self, raw: bytes) -> bytes:
        raise NotImplementedError

    def decompress(self, data: bytes, raw_size: int) -> bytes:
        raise NotImplementedError


class IdentityCodec(Codec):
    codec_id = 0
    name = "identity"

    def compress(self, raw: bytes) -> bytes:
        return bytes(raw)

    def decompress(self, data: bytes, raw_size: int) -> bytes:
        if len(data) != raw_size:
            raise DecodeError(f"identity payload has {len(data)} bytes, expected {raw_size}")
        return bytes(data)


class Lz4Codec(Codec):
    """LZ4 block format without the size prefix; the header carries raw_size."""

    codec_id = 1
    name = "lz4"

    def compress(self, raw: bytes) -> bytes:
        return lz4.block.compress(raw, store_size=False)

    def decompress(self, data: bytes, raw_size: int) -> bytes:
        try:
            raw = lz4.block.decompress(data, uncompressed_size=raw_size)
        except lz4.block.LZ4BlockError as e:
            raise DecodeError(f"corrupt lz4 block: {e}") from None
        if len(raw) != raw_size:
            raise DecodeError(f"lz4 block decoded to {len(raw)} bytes, expected {raw_size}")
        return raw


CODECS: Dict[int, Codec] = {codec.codec_id: codec for codec in (IdentityCodec(), Lz4Codec())}


def get_codec(name: str) -> Codec:
    for codec in CODECS.values():
        if codec.name == name:
            return codec
    raise ValueError(f"unknown codec '{name}' (available: {', '.join(c.name for c in CODECS.values())})")


@dataclass(frozen=True)
class FrameHeader:
    """
    Description of one encoded frame of one pass.

    `params` echoes the pass parameters: (N, r, filtered) for AO,
    (light_count, 0, 0) for visibility, zeros for color.
    """

    frame_id: int
    pass_id: int
    pose: CameraPose
    width: int
    height: int
    params: Tuple[float, float, float]
    mode: int
    raw_size: int
    compressed_size: int
    codec_id: int
    light_count: int
    packet_count: int

    # pose 12f, dims 2H, params 3f, mode B, sizes 2I, codec B, lights B,
    # pass B, packet_count H, frame_id I, zero padding to 96 bytes.
    _STRUCT = struct.Struct("<12fHH3fBIIBBBHI14x")
    SIZE = _STRUCT.size

    def to_bytes(self) -> bytes:
        return self._STRUCT.pack(*self.pose.to_floats(), self.width, self.height,
                                 *self.params, self.mode, self.raw_size, self.compressed_size,
                                 self.codec_id, self.light_count, self.pass_id,
                                 self.packet_count, self.frame_id)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FrameHeader":
        if len(data) < cls.SIZE:
            raise DecodeError(f"frame header truncated to {len(data)} bytes")
        fields = cls._STRUCT.unpack_from(data)
        pose_floats = fields[0:12]
        width, height = fields[12:14]
        params = tuple(fields[14:17])
        mode, raw_size, compressed_size, codec_id, light_count, pass_id, packet_count, frame_id = fields[17:]
        if pass_id not in PASS_NAMES:
            raise DecodeError(f"unknown pass id {pass_id}")
        return cls(frame_id, pass_id, CameraPose.from_floats(frame_id, pose_floats), width, height,
                   params, mode, raw_size, compressed_size, codec_id, light_count, packet_count)

    def __eq__(self, other):
        if not isinstance(other, FrameHeader):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def __hash__(self):
        return hash(self.to_bytes())


def packet_count_for(size: int, payload_capacity: int) -> int:
    return max(1, math.ceil(size / payload_capacity))


def _check_capacity(payload_capacity: int) -> None:
    if payload_capacity < MIN_PAYLOAD_CAPACITY:
        raise ValueError(f"payload_capacity must be >= {MIN_PAYLOAD_CAPACITY}, got {payload_capacity}")


def _raw_plane(buffer: Buffer) -> Tuple[int, bytes, Tuple[float, float, float], int, int]:
    """(pass_id, raw bytes, params, mode, light_count) for a buffer."""
    if isinstance(buffer, VisibilityBuffer):
        return (PASS_VISIBILITY, np.ascontiguousarray(buffer.bits, dtype=np.uint8).tobytes(),
                (float(buffer.light_count), 0.0, 0.0), _MODE_IDS[buffer.mode], buffer.light_count)
    if isinstance(buffer, AoBuffer):
        return (PASS_AO, np.ascontiguousarray(buffer.counts, dtype=np.uint8).tobytes(),
                (float(buffer.rays), buffer.radius, 1.0 if buffer.filtered else 0.0), 0, 0)
    if isinstance(buffer, FinalImage):
        return PASS_COLOR, np.ascontiguousarray(buffer.rgb, dtype=np.uint8).tobytes(), (0.0, 0.0, 0.0), 0, 0
    raise TypeError(f"cannot encode {type(buffer).__name__}")


def encode_frame(buffer: Buffer, codec: Optional[Codec] = None,
                 payload_capacity: int = DEFAULT_PAYLOAD_CAPACITY) -> Tuple[FrameHeader, bytes]:
    """
    Compress a pass buffer and describe it with a FrameHeader.

    Args:
        buffer: VisibilityBuffer, AoBuffer or FinalImage (the color baseline)
        codec: codec to use, LZ4 by default
        payload_capacity: datagram payload size used to fill packet_count

    Returns:
        (header, compressed bytes)
    """
    codec = codec or CODECS[Lz4Codec.codec_id]
    _check_capacity(payload_capacity)
    pass_id, raw, params, mode, light_count = _raw_plane(buffer)
    if buffer.pose is None:
        raise ValueError("buffer has no pose to send")
    height, width = buffer.shape[:2]
    compressed = codec.compress(raw)
    header = FrameHeader(buffer.pose.frame_id, pass_id, buffer.pose, width, height, params, mode,
                         len(raw), len(compressed), codec.codec_id, light_count,
                         packet_count_for(len(compressed), payload_capacity))
    logger.debug("encoded %s frame %d: %d -> %d bytes", PASS_NAMES[pass_id], header.frame_id,
                 len(raw), len(compressed))
    return header, compressed


def decode_frame(header: FrameHeader, data: bytes) -> Buffer:
    """
    Rebuild the buffer described by `header` from its compressed bytes.

    Raises:
        DecodeError: On a size mismatch, an unknown codec or a corrupt stream
    """
    if len(data) != header.compressed_size:
        raise DecodeError(f"payload has {len(data)} bytes, header says {header.compressed_size}")
    expected_raw = header.width * header.height * BYTES_PER_PIXEL[header.pass_id]
    if header.raw_size != expected_raw:
        raise DecodeError(f"header raw_size {header.raw_size} does not match "
                          f"{header.width}x{header.height} {PASS_NAMES[header.pass_id]} plane")
    codec = CODECS.get(header.codec_id)
    if codec is None:
        raise DecodeError(f"unknown codec id {header.codec_id}")
    raw = codec.decompress(bytes(data), header.raw_size)
    plane = np.frombuffer(raw, dtype=np.uint8)
    pose = header.pose
    if header.pass_id == PASS_VISIBILITY:
        if header.mode not in _MODE_NAMES:
            raise DecodeError(f"unknown shadow mode id {header.mode}")
        if header.light_count > MAX_LIGHTS:
            raise DecodeError(f"light count {header.light_count} exceeds {MAX_LIGHTS}")
        unused = np.uint8(~((1 << header.light_count) - 1) & 0xFF)
        if np.any(plane & unused):
            raise DecodeError(f"visibility bits set above light count {header.light_count}")
        return VisibilityBuffer(plane.reshape(header.height, header.width).copy(), header.light_count,
                                _MODE_NAMES[header.mode], pose)
    if header.pass_id == PASS_AO:
        rays, radius, filtered = header.params
        counts = plane.reshape(header.height, header.width).copy()
        if int(rays) < 1 or counts.max(initial=0) > int(rays):
            raise DecodeError(f"AO counts exceed N={int(rays)}")
        return AoBuffer(counts, int(rays), radius, pose, filtered=bool(filtered))
    rgb = plane.reshape(header.height, header.width, 3).copy()
    return FinalImage(rgb, rgb.astype(np.float64) / 255.0, header.frame_id, pose)


@dataclass(frozen=True)
class Datagram:
    """
    One UDP datagram of a frame. Packet 0 also carries the FrameHeader.

    Wire layout (little-endian): magic "DHRP", frame_id u32, pass_id u8,
    packet_index u16, packet_count u16, payload_len u16, [FrameHeader], payload.
    """

    frame_id: int
    pass_id: int
    packet_index: int
    packet_count: int
    payload: bytes
    header: Optional[FrameHeader] = None

    MAGIC = b"DHRP"
    _STRUCT = struct.Struct("<4sIBHHH")

    def __post_init__(self):
        if self.header is not None and (self.header.pass_id, self.header.frame_id) != self.key:
            raise DecodeError(f"frame header ({self.header.pass_id}, {self.header.frame_id}) does not match "
                              f"datagram ({self.pass_id}, {self.frame_id})")

    @property
    def key(self) -> Tuple[int, int]:
        return self.pass_id, self.frame_id

    def to_bytes(self) -> bytes:
        prefix = self._STRUCT.pack(self.MAGIC, self.frame_id, self.pass_id, self.packet_index,
                                   self.packet_count, len(self.payload))
        header = self.header.to_bytes() if self.packet_index == 0 else b""
        return prefix + header + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Datagram":
        if len(data) < cls._STRUCT.size:
            raise DecodeError(f"datagram truncated to {len(data)} bytes")
        magic, frame_id, pass_id, index, count, payload_len = cls._STRUCT.unpack_from(data)
        if magic != cls.MAGIC:
            raise DecodeError(f"bad datagram magic {magic!r}")
        if index >= count:
            raise DecodeError(f"packet index {index} >= packet count {count}")
        offset = cls._STRUCT.size
        header = None
        if index == 0:
            header = FrameHeader.from_bytes(data[offset:])
            offset += FrameHeader.SIZE
        payload = data[offset:]
        if len(payload) != payload_len:
            raise DecodeError(f"datagram payload has {len(payload)} bytes, expected {payload_len}")
        return cls(frame_id, pass_id, index, count, bytes(payload), header)

    @property
    def wire_size(self) -> int:
        return self._STRUCT.size + (FrameHeader.SIZE if self.packet_index == 0 else 0) + len(self.payload)


def packetize(header: FrameHeader, data: bytes, payload_capacity: int = DEFAULT_PAYLOAD_CAPACITY) -> List[Datagram]:
    """
    Split a compressed frame into datagrams of at most `payload_capacity` bytes.

    All datagrams but the last are full; at least one datagram is produced.

    Raises:
        ValueError: If payload_capacity < 64
    """
    _check_capacity(payload_capacity)
    count = packet_count_for(len(data), payload_capacity)
    if count > 0xFFFF:
        raise ValueError(f"frame of {len(data)} bytes needs {count} packets, more than the u16 index allows")
    if header.packet_count != count:
        header = replace(header, packet_count=count)
    return [Datagram(header.frame_id, header.pass_id, i, count,
                     bytes(data[i * payload_capacity:(i + 1) * payload_capacity]),
                     header if i == 0 else None)
            for i in range(count)]


class FrameStatus(Enum):
    PENDING = "pending"
    COMPLETE = "complete"
    DROPPED = "dropped"


@dataclass(frozen=True)
class CompletedFrame:
    header: FrameHeader
    payload: bytes
    completed_at: float

    @property
    def key(self) -> Tuple[int, int]:
        return self.header.pass_id, self.header.frame_id


@dataclass
class _PartialFrame:
    first_seen: float
    packet_count: int
    parts: Dict[int, bytes] = field(default_factory=dict)
    header: Optional[FrameHeader] = None


class FrameAssembler:
    """
    Reassembles frames from datagrams that may arrive out of order,
    duplicated or never.

    A frame completes once every packet index has arrived. It is dropped when
    it expires, when a newer frame of the same pass completes first, or when
    two datagrams disagree about its contents. Passes are independent.
    """

    # Finished frames are remembered this far behind the newest one.
    _MEMORY = 1024

    def __init__(self, expiry_ms: float = DEFAULT_EXPIRY_MS):
        if expiry_ms <= 0:
            raise ValueError(f"expiry_ms must be positive, got {expiry_ms}")
        self.expiry_ms = expiry_ms
        self._pending: Dict[Tuple[int, int], _PartialFrame] = {}
        self._finished: Dict[Tuple[int, int], FrameStatus] = {}
        self._latest: Dict[int, int] = {}
        self.completed_count = 0
        self.dropped_count = 0

    def status(self, pass_id: int, frame_id: int) -> Optional[FrameStatus]:
        key = (pass_id, frame_id)
        if key in self._pending:
            return FrameStatus.PENDING
        return self._finished.get(key)

    def _drop(self, key: Tuple[int, int], reason: str) -> None:
        self._pending.pop(key, None)
        self._finished[key] = FrameStatus.DROPPED
        self.dropped_count += 1
        logger.debug("dropped %s frame %d: %s", PASS_NAMES.get(key[0], key[0]), key[1], reason)

    def expire(self, now: float) -> List[Tuple[int, int]]:
        """Drop every pending frame first seen at least expiry_ms before `now`."""
        expired = [key for key, partial in self._pending.items() if now - partial.first_seen >= self.expiry_ms]
        for key in expired:
            self._drop(key, "expired")
        return expired

    def ingest(self, datagram: Datagram, now: float) -> Optional[CompletedFrame]:
        """
        Add one datagram received at virtual time `now`.

        Returns:
            The CompletedFrame if this datagram completed it, else None
        """
        self.expire(now)
        key = datagram.key
        if key in self._finished:
            return None
        latest = self._latest.get(datagram.pass_id)
        if latest is not None and datagram.frame_id < latest:
            self._drop(key, f"superseded by frame {latest}")
            return None

        partial = self._pending.get(key)
        if partial is None:
            partial = self._pending[key] = _PartialFrame(now, datagram.packet_count)
        if datagram.packet_count != partial.packet_count:
            self._drop(key, "conflicting packet counts")
            return None
        previous = partial.parts.get(datagram.packet_index)
        if previous is not None and previous != datagram.payload:
            self._drop(key, f"conflicting payloads for packet {datagram.packet_index}")
            return None
        if datagram.header is not None:
            if partial.header is not None and partial.header != datagram.header:
                self._drop(key, "conflicting headers")
                return None
            partial.header = datagram.header
        partial.parts[datagram.packet_index] = datagram.payload

        if len(partial.parts) < partial.packet_count or partial.header is None:
            return None
        return self._complete(key, partial, now)

    def _complete(self, key: Tuple[int, int], partial: _PartialFrame, now: float) -> Optional[CompletedFrame]:
        payload = b"".join(partial.parts[i] for i in range(partial.packet_count))
        del self._pending[key]
        if len(payload) != partial.header.compressed_size or partial.header.packet_count != partial.packet_count:
            self._finished[key] = FrameStatus.DROPPED
            self.dropped_count += 1
            logger.debug("dropped frame %s: reassembled size disagrees with its header", key)
            return None
        pass_id, frame_id = key
        self._finished[key] = FrameStatus.COMPLETE
        self.completed_count += 1
        self._latest[pass_id] = frame_id
        for other in [k for k in self._pending if k[0] == pass_id and k[1] < frame_id]:
            self._drop(other, f"superseded by frame {frame_id}")
        self._forget(pass_id, frame_id)
        return CompletedFrame(partial.header, payload, now)

    def _forget(self, pass_id: int, newest: int) -> None:
        for key in [k for k in self._finished if k[0] == pass_id and k[1] < newest - self._MEMORY]:
            del self._finished[key]


def assemble(arrivals: Iterable[Tuple[float, Datagram]], now: float,
             expiry_ms: float = DEFAULT_EXPIRY_MS) -> Dict[Tuple[int, int], FrameStatus]:
    """
    Feed (arrival time, datagram) pairs to a fresh assembler and report the
    status of every frame seen, evaluated at virtual time `now`.
    """
    assembler = FrameAssembler(expiry_ms)
    seen = []
    for arrived_at, datagram in sorted(arrivals, key=lambda item: item[0]):
        assembler.ingest(datagram, arrived_at)
        seen.append(datagram.key)
    assembler.expire(now)
    return {key: assembler.status(*key) for key in dict.fromkeys(seen)}


@dataclass(frozen=True)
class CameraMessage:
    """Client-to-server camera update: magic "DHRC", frame_id, 12-float pose, timestamp ms."""

    frame_id: int
    pose: CameraPose
    timestamp_ms: int

    MAGIC = b"DHRC"
    _STRUCT = struct.Struct("<4sI12fI")
    SIZE = _STRUCT.size

    def to_bytes(self) -> bytes:
        return self._STRUCT.pack(self.MAGIC, self.frame_id, *self.pose.to_floats(),
                                 int(self.timestamp_ms) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CameraMessage":
        if len(data) != cls.SIZE:
            raise DecodeError(f"camera message has {len(data)} bytes, expected {cls.SIZE}")
        magic, frame_id, *rest = cls._STRUCT.unpack(data)
        if magic != cls.MAGIC:
            raise DecodeError(f"bad camera message magic {magic!r}")
        return cls(frame_id, CameraPose.from_floats(frame_id, rest[:12]), rest[12])
