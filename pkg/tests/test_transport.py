"""
Tests for codecs, frame headers, datagrams and frame reassembly.
"""

import random
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dhr_shadows.compose import FinalImage
from dhr_shadows.errors import DecodeError
from dhr_shadows.gbuffer import CameraPose
from dhr_shadows.raytrace import AoBuffer, VisibilityBuffer
from dhr_shadows.transport import (CODECS, PASS_AO, PASS_VISIBILITY, CameraMessage, Datagram, FrameAssembler,
                                   FrameHeader, FrameStatus, IdentityCodec, Lz4Codec, assemble, decode_frame,
                                   encode_frame, get_codec, packetize)


def pose(frame_id=0):
    return CameraPose.looking_at(frame_id, (0.5, 2.0, 3.5), (0.0, 1.0, -1.5))


def ao_buffer(frame_id=0, shape=(30, 40), rays=32, seed=0, filtered=False):
    counts = np.random.default_rng(seed).integers(0, rays + 1, size=shape).astype(np.uint8)
    return AoBuffer(counts, rays, 0.6, pose(frame_id), filtered=filtered)


def datagrams_for(frame_id, capacity=256, pass_buffer=None):
    buffer = pass_buffer or ao_buffer(frame_id, seed=frame_id)
    header, data = encode_frame(buffer, payload_capacity=capacity)
    return packetize(header, data, capacity), data


@settings(max_examples=40, deadline=None)
@given(raw=st.binary(max_size=4096))
def test_codecs_are_lossless(raw):
    for codec in CODECS.values():
        assert codec.decompress(codec.compress(raw), len(raw)) == raw


def test_lz4_shrinks_flat_planes():
    raw = bytes(320 * 180)
    assert len(Lz4Codec().compress(raw)) < len(raw) // 50


def test_corrupt_payloads_raise_decode_error():
    with pytest.raises(DecodeError):
        Lz4Codec().decompress(b"\xff" * 16, 1000)
    with pytest.raises(DecodeError):
        IdentityCodec().decompress(b"abc", 4)


def test_get_codec():
    assert get_codec("lz4").codec_id == 1
    assert get_codec("identity").codec_id == 0
    with pytest.raises(ValueError) as exc_info:
        get_codec("zstd")
    assert "zstd" in str(exc_info.value)


def test_header_is_96_bytes_and_round_trips():
    header, _ = encode_frame(ao_buffer(7, filtered=True))
    assert FrameHeader.SIZE == 96
    data = header.to_bytes()
    assert len(data) == 96
    assert FrameHeader.from_bytes(data) == header
    with pytest.raises(DecodeError):
        FrameHeader.from_bytes(data[:50])


def test_visibility_frame_round_trip():
    bits = np.random.default_rng(1).integers(0, 4, size=(18, 32)).astype(np.uint8)
    buffer = VisibilityBuffer(bits, 2, "soft", pose(3))
    for codec in CODECS.values():
        header, data = encode_frame(buffer, codec)
        assert header.pass_id == PASS_VISIBILITY
        assert header.raw_size == 18 * 32
        assert decode_frame(header, data) == buffer


def test_ao_frame_round_trip_keeps_parameters():
    buffer = ao_buffer(12, filtered=True)
    header, data = encode_frame(buffer)
    assert header.params == (32.0, buffer.radius, 1.0)
    decoded = decode_frame(header, data)
    assert decoded == buffer
    assert decoded.filtered


def test_color_frame_round_trip():
    rgb = np.random.default_rng(2).integers(0, 256, size=(9, 16, 3)).astype(np.uint8)
    image = FinalImage(rgb, rgb / 255.0, 4, pose(4))
    header, data = encode_frame(image)
    assert header.raw_size == 9 * 16 * 3
    np.testing.assert_array_equal(decode_frame(header, data).rgb, rgb)


def test_decode_errors():
    header, data = encode_frame(ao_buffer(1))
    with pytest.raises(DecodeError):
        decode_frame(header, data[:-1])
    with pytest.raises(DecodeError):
        decode_frame(replace(header, codec_id=9), data)
    with pytest.raises(DecodeError):
        decode_frame(replace(header, width=header.width + 1), data)

    overfull = AoBuffer(np.full((4, 4), 40, dtype=np.uint8), 32, 1.0, pose(1))
    header, data = encode_frame(overfull)
    with pytest.raises(DecodeError):
        decode_frame(header, data)


def test_visibility_bits_above_light_count_are_rejected():
    bits = np.full((4, 4), 0b011, dtype=np.uint8)
    header, data = encode_frame(VisibilityBuffer(bits, 2, "soft", pose(1)))
    np.testing.assert_array_equal(decode_frame(header, data).bits, bits)
    bits[2, 3] = 0b100
    header, data = encode_frame(VisibilityBuffer(bits, 2, "soft", pose(1)))
    with pytest.raises(DecodeError):
        decode_frame(header, data)


def test_header_must_match_datagram_prefix():
    packets, _ = datagrams_for(6)
    with pytest.raises(DecodeError):
        replace(packets[0], frame_id=7)
    with pytest.raises(DecodeError):
        replace(packets[0], pass_id=PASS_VISIBILITY)
    wire = bytearray(packets[0].to_bytes())
    wire[4:8] = (7).to_bytes(4, "little")
    with pytest.raises(DecodeError):
        Datagram.from_bytes(bytes(wire))
    # Only packet 0 carries a header.
    assert replace(packets[1], frame_id=7).frame_id == 7


def test_packetize_fills_all_but_the_last():
    header, _ = encode_frame(ao_buffer(0))
    data = bytes(range(256)) * 11 + b"tail"
    packets = packetize(header, data, 1200)
    assert [len(p.payload) for p in packets] == [1200, 1200, len(data) - 2400]
    assert packets[0].header.packet_count == 3
    assert all(p.header is None for p in packets[1:])
    assert b"".join(p.payload for p in packets) == data


def test_packetize_empty_payload_still_sends_one_packet():
    header, _ = encode_frame(ao_buffer(0))
    packets = packetize(header, b"", 1200)
    assert len(packets) == 1
    assert packets[0].payload == b""


def test_packetize_rejects_tiny_capacity():
    header, data = encode_frame(ao_buffer(0))
    with pytest.raises(ValueError):
        packetize(header, data, 63)


def test_datagram_wire_format():
    packets, _ = datagrams_for(5)
    for packet in packets[:2]:
        wire = packet.to_bytes()
        assert len(wire) == packet.wire_size
        assert Datagram.from_bytes(wire) == packet
    assert packets[0].wire_size == 15 + 96 + len(packets[0].payload)

    wire = packets[1].to_bytes()
    with pytest.raises(DecodeError):
        Datagram.from_bytes(b"XXXX" + wire[4:])
    with pytest.raises(DecodeError):
        Datagram.from_bytes(wire[:-1])
    with pytest.raises(DecodeError):
        Datagram.from_bytes(wire[:8])


def test_reassembly_is_order_independent():
    packets, data = datagrams_for(9)
    assert len(packets) > 2
    for seed in range(5):
        shuffled = packets[:]
        random.Random(seed).shuffle(shuffled)
        assembler = FrameAssembler()
        results = [assembler.ingest(p, now=float(i)) for i, p in enumerate(shuffled)]
        done = [r for r in results if r is not None]
        assert len(done) == 1 and results[-1] is done[0]
        assert done[0].payload == data
        assert decode_frame(done[0].header, done[0].payload) == ao_buffer(9, seed=9)
    print(f"✓ {len(packets)}-packet frame reassembles under any arrival order")


def test_duplicates_are_ignored():
    packets, data = datagrams_for(2)
    assembler = FrameAssembler()
    arrivals = [packets[0], packets[0]] + packets[1:] + [packets[1]]
    done = [r for r in (assembler.ingest(p, 0.0) for p in arrivals) if r is not None]
    assert len(done) == 1
    assert assembler.status(PASS_AO, 2) == FrameStatus.COMPLETE
    assert assembler.completed_count == 1


def test_conflicting_duplicate_drops_the_frame():
    packets, _ = datagrams_for(2)
    forged = replace(packets[1], payload=bytes(len(packets[1].payload)))
    assembler = FrameAssembler()
    assembler.ingest(packets[1], 0.0)
    assembler.ingest(forged, 1.0)
    assert assembler.status(PASS_AO, 2) == FrameStatus.DROPPED


def test_missing_packet_expires():
    packets, _ = datagrams_for(4)
    arrivals = [(float(i), p) for i, p in enumerate(packets[:-1])]
    assert assemble(arrivals, now=100.0, expiry_ms=250.0) == {(PASS_AO, 4): FrameStatus.PENDING}
    assert assemble(arrivals, now=250.0, expiry_ms=250.0) == {(PASS_AO, 4): FrameStatus.DROPPED}


def test_newer_frame_supersedes_older():
    old, _ = datagrams_for(1)
    new, _ = datagrams_for(2)
    assembler = FrameAssembler()
    assembler.ingest(old[0], 0.0)
    for p in new:
        assembler.ingest(p, 1.0)
    assert assembler.status(PASS_AO, 1) == FrameStatus.DROPPED
    assert assembler.ingest(old[1], 2.0) is None
    assert assembler.status(PASS_AO, 1) == FrameStatus.DROPPED
    late, _ = datagrams_for(0)
    assert all(assembler.ingest(p, 3.0) is None for p in late)
    assert assembler.status(PASS_AO, 0) == FrameStatus.DROPPED


def test_passes_are_independent():
    ao_packets, _ = datagrams_for(5)
    vis = VisibilityBuffer(np.ones((30, 40), dtype=np.uint8), 1, "hard", pose(3))
    vis_packets, _ = datagrams_for(3, pass_buffer=vis)
    assembler = FrameAssembler()
    for p in ao_packets + vis_packets:
        assembler.ingest(p, 0.0)
    assert assembler.status(PASS_AO, 5) == FrameStatus.COMPLETE
    assert assembler.status(PASS_VISIBILITY, 3) == FrameStatus.COMPLETE


def test_completion_rate_under_loss():
    """Each packet survives with 1 - p, so a k-packet frame completes with (1 - p)^k."""
    rng = np.random.default_rng(77)
    p = 0.1
    codec = IdentityCodec()
    assembler = FrameAssembler(expiry_ms=5.0)
    frames = 2000
    for frame_id in range(frames):
        # 1200 raw bytes in 256-byte datagrams: always five packets.
        header, data = encode_frame(ao_buffer(frame_id, seed=frame_id), codec, 256)
        sent = packetize(header, data, 256)
        k = len(sent)
        for d in sent:
            if rng.random() >= p:
                assembler.ingest(d, now=10.0 * frame_id)
    assembler.expire(10.0 * frames)
    rate = assembler.completed_count / frames
    assert abs(rate - (1 - p) ** k) < 0.04
    print(f"✓ completion rate {rate:.3f} vs {(1 - p) ** k:.3f} for {k} packets")


def test_camera_message_round_trip():
    message = CameraMessage(17, pose(17), 123456)
    data = message.to_bytes()
    assert len(data) == CameraMessage.SIZE == 60
    again = CameraMessage.from_bytes(data)
    assert again.frame_id == 17 and again.timestamp_ms == 123456
    assert again.pose == message.pose
    with pytest.raises(DecodeError):
        CameraMessage.from_bytes(data[:-1])
    with pytest.raises(DecodeError):
        CameraMessage.from_bytes(b"NOPE" + data[4:])
