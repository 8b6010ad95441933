import random
import zlib

import pytest
from hypothesis import given, settings, strategies as st

from edgeloop import protocol
from edgeloop.protocol import (WireMessage, CrcMismatch, StreamDecoder,
                               encode_message, FramingError, rtt_from_echo)
from edgeloop.server import Detection

TYPES = sorted(protocol.VALID_TYPES)


def msg_strategy():
    return st.builds(
        WireMessage,
        msg_type=st.sampled_from(TYPES),
        frame_id=st.integers(min_value=0, max_value=2**64 - 1),
        payload=st.binary(max_size=2048),
        flags=st.integers(min_value=0, max_value=0xFFFF),
    )


def test_bye_is_24_bytes_with_zero_crc():
    data = encode_message(WireMessage(protocol.MSG_BYE))
    assert len(data) == 24
    assert data[:4] == b"EPLP"
    assert int.from_bytes(data[16:20], "big") == 0  # payload_len
    assert int.from_bytes(data[20:24], "big") == zlib.crc32(b"") == 0


def test_frame_upload_size_arithmetic():
    image = bytes(50_000)
    payload = protocol.build_frame_upload(1, 2, image)
    data = encode_message(WireMessage(protocol.MSG_FRAME_UPLOAD, 7, payload))
    assert len(data) == 24 + 17 + 50_000 == 50_041


def test_control_result_default_padding_totals_794():
    body = protocol.build_control_json(1, "palmar", 0.9, [
        Detection("cup", 0.9, (100, 100, 80, 80))])
    assert len(body) == protocol.DEFAULT_CONTROL_PAD == 750
    payload = protocol.build_result_prefix(1, 2, 13_000) + body
    data = encode_message(WireMessage(protocol.MSG_CONTROL_RESULT, 1, payload))
    assert len(data) == 24 + 20 + 750 == 794


def test_control_json_fields():
    dets = [Detection("key", 0.8, (10, 20, 40, 50))]
    doc = protocol.parse_control_json(protocol.build_control_json(3, "lateral", 0.8, dets))
    assert doc["frame_id"] == 3
    assert doc["grip"] == "lateral"
    assert doc["detections"] == [{"cls": "key", "conf": 0.8, "bbox": [10, 20, 40, 50]}]


def test_oversize_payload_rejected():
    with pytest.raises(FramingError):
        encode_message(WireMessage(protocol.MSG_FRAME_UPLOAD,
                                   payload=bytes(protocol.MAX_PAYLOAD + 1)))


def test_roundtrip_identity_10k_randomized():
    rng = random.Random(20240)
    decoder = StreamDecoder()
    for _ in range(10_000):
        msg = WireMessage(
            msg_type=rng.choice(TYPES),
            frame_id=rng.getrandbits(64),
            payload=rng.randbytes(rng.randrange(0, 512)),
            flags=rng.getrandbits(16),
        )
        out = decoder.feed(encode_message(msg))
        assert out == [msg]


@settings(max_examples=300, deadline=None)
@given(msg_strategy())
def test_roundtrip_identity_property(msg):
    assert StreamDecoder().feed(encode_message(msg)) == [msg]


@settings(max_examples=100, deadline=None)
@given(st.lists(msg_strategy(), min_size=1, max_size=5),
       st.randoms(use_true_random=False))
def test_chunking_invariance(msgs, rnd):
    stream = b"".join(encode_message(m) for m in msgs)
    decoder = StreamDecoder()
    out = []
    i = 0
    while i < len(stream):
        n = rnd.randrange(1, 64)
        out.extend(decoder.feed(stream[i:i + n]))
        i += n
    assert out == msgs


def test_two_messages_one_buffer():
    a = WireMessage(protocol.MSG_HELLO, payload=b"abc")
    b = WireMessage(protocol.MSG_BYE)
    out = StreamDecoder().feed(encode_message(a) + encode_message(b))
    assert out == [a, b]


def test_byte_at_a_time():
    msg = WireMessage(protocol.MSG_FRAME_UPLOAD, 9, b"payload-bytes")
    decoder = StreamDecoder()
    out = []
    for byte in encode_message(msg):
        out.extend(decoder.feed(bytes([byte])))
    assert out == [msg]


def test_single_bit_flip_in_payload_resyncs():
    msgs = [WireMessage(protocol.MSG_FRAME_UPLOAD, i, bytes([i]) * 40)
            for i in range(3)]
    encoded = [encode_message(m) for m in msgs]
    # flip every payload bit of the middle message
    for byte_idx in range(24, len(encoded[1])):
        for bit in range(8):
            corrupted = bytearray(encoded[1])
            corrupted[byte_idx] ^= 1 << bit
            stream = encoded[0] + bytes(corrupted) + encoded[2]
            out = StreamDecoder().feed(stream)
            assert out[0] == msgs[0]
            assert isinstance(out[1], CrcMismatch)
            assert out[1].frame_id == msgs[1].frame_id
            assert out[2] == msgs[2]


def test_magic_corruption_is_fatal():
    msg = WireMessage(protocol.MSG_HELLO, payload=b"x")
    data = bytearray(encode_message(msg))
    data[0] ^= 0xFF
    with pytest.raises(FramingError):
        StreamDecoder().feed(bytes(data))


def test_header_bit_flips_never_hang_or_crash():
    msgs = [WireMessage(protocol.MSG_FRAME_UPLOAD, i, b"abcdef" * 4)
            for i in range(3)]
    encoded = [encode_message(m) for m in msgs]
    for byte_idx in range(0, 24):
        for bit in range(8):
            corrupted = bytearray(encoded[1])
            corrupted[byte_idx] ^= 1 << bit
            decoder = StreamDecoder()
            try:
                out = decoder.feed(encoded[0] + bytes(corrupted) + encoded[2])
            except FramingError:
                continue
            assert out[0] == msgs[0]


def test_rtt_from_echo():
    assert rtt_from_echo(1_000_000, 1_000_000) == 0.0
    assert rtt_from_echo(41_000_000, 1_000_000) == 40.0


def test_rtt_immune_to_server_clock():
    # the server only echoes; a skewed server clock cannot appear anywhere
    send_ts = 5_000_000
    echoed = send_ts  # verbatim echo regardless of server wall clock
    assert rtt_from_echo(send_ts + 40_000_000, echoed) == 40.0


def test_hello_payload_roundtrip():
    payload = protocol.build_hello(protocol.MODE_AR, 90, 640, 480, 30, 57_500)
    cfg = protocol.parse_hello(payload)
    assert cfg == {"mode": 1, "quality": 90, "width": 640, "height": 480,
                   "fps": 30, "pad_target_bytes": 57_500}


def test_frame_upload_payload_roundtrip():
    payload = protocol.build_frame_upload(111, 222, b"jpegjpeg")
    parsed = protocol.parse_frame_upload(payload)
    assert parsed == {"capture_ts": 111, "send_ts": 222,
                      "codec": protocol.CODEC_JPEG, "image": b"jpegjpeg"}
