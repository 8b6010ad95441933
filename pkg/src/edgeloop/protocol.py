"""Binary wire protocol: 24-byte framed messages over a reliable stream.

Layout (all multi-byte fields big-endian):

    magic "EPLP" | version 1B | msg_type 1B | flags 2B |
    frame_id 8B | payload_len 4B | payload_crc32 4B | payload

The CRC covers the payload only. A CRC mismatch is a message-level error
(the stream resynchronizes at the next header); a bad magic is fatal for
the connection.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

MAGIC = b"EPLP"
VERSION = 1
HEADER_LEN = 24
MAX_PAYLOAD = 4 * 1024 * 1024

MSG_HELLO = 0x01
MSG_HELLO_ACK = 0x02
MSG_FRAME_UPLOAD = 0x10
MSG_CONTROL_RESULT = 0x11
MSG_ANNOTATED_FRAME = 0x12
MSG_BYE = 0x7F

VALID_TYPES = {MSG_HELLO, MSG_HELLO_ACK, MSG_FRAME_UPLOAD,
               MSG_CONTROL_RESULT, MSG_ANNOTATED_FRAME, MSG_BYE}

# Session control messages; the link emulator never drops these.
CONTROL_TYPES = {MSG_HELLO, MSG_HELLO_ACK, MSG_BYE}

MODE_CONTROL = 0
MODE_AR = 1

CODEC_JPEG = 1

DEFAULT_CONTROL_PAD = 750
DEFAULT_AR_PAD = 56_500
DEFAULT_FRAME_PAD = 53_000

_HEADER = struct.Struct(">4sBBHQII")
_HELLO = struct.Struct(">BBHHBI")
_UPLOAD_PREFIX = struct.Struct(">QQB")
_RESULT_PREFIX = struct.Struct(">QQI")


class FramingError(Exception):
    """Unrecoverable stream corruption (bad magic/version/length)."""


class ProtocolError(Exception):
    """Malformed payload for a structurally valid message."""


@dataclass(frozen=True)
class WireMessage:
    msg_type: int
    frame_id: int = 0
    payload: bytes = b""
    flags: int = 0


@dataclass(frozen=True)
class CrcMismatch:
    """Decoder event for a message whose payload failed its checksum."""
    msg_type: int
    frame_id: int


def encode_message(msg: WireMessage) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise FramingError(f"payload too large: {len(msg.payload)}")
    header = _HEADER.pack(MAGIC, VERSION, msg.msg_type, msg.flags,
                          msg.frame_id, len(msg.payload), zlib.crc32(msg.payload))
    return header + msg.payload


class StreamDecoder:
    """Incremental decoder; feed() arbitrary chunks, get complete messages.

    One instance per connection direction; not safe for concurrent use.
    """

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[WireMessage | CrcMismatch]:
        self._buf.extend(data)
        out: list[WireMessage | CrcMismatch] = []
        while True:
            if len(self._buf) < HEADER_LEN:
                break
            magic, version, msg_type, flags, frame_id, plen, crc = _HEADER.unpack(
                bytes(self._buf[:HEADER_LEN]))
            if magic != MAGIC:
                raise FramingError("bad magic")
            if version != VERSION:
                raise FramingError(f"unsupported version {version}")
            if plen > MAX_PAYLOAD:
                raise FramingError(f"payload length {plen} exceeds limit")
            if len(self._buf) < HEADER_LEN + plen:
                break
            payload = bytes(self._buf[HEADER_LEN:HEADER_LEN + plen])
            del self._buf[:HEADER_LEN + plen]
            if zlib.crc32(payload) != crc:
                out.append(CrcMismatch(msg_type=msg_type, frame_id=frame_id))
            else:
                out.append(WireMessage(msg_type=msg_type, frame_id=frame_id,
                                       payload=payload, flags=flags))
        return out


def rtt_from_echo(now_ns: int, send_ts_echo_ns: int) -> float:
    """RTT in ms from the client's own echoed monotonic timestamp.

    Immune to client/server wall-clock offset: the server never interprets
    the timestamp, it only echoes it.
    """
    return (now_ns - send_ts_echo_ns) / 1e6


# -- payload builders / parsers ---------------------------------------------

def build_hello(mode: int, quality: int, width: int, height: int,
                fps: int, pad_target_bytes: int) -> bytes:
    return _HELLO.pack(mode, quality, width, height, fps, pad_target_bytes)


def parse_hello(payload: bytes) -> dict:
    try:
        mode, quality, width, height, fps, pad = _HELLO.unpack(payload)
    except struct.error as exc:
        raise ProtocolError(f"bad HELLO payload: {exc}") from None
    return {"mode": mode, "quality": quality, "width": width,
            "height": height, "fps": fps, "pad_target_bytes": pad}


def build_frame_upload(capture_ts: int, send_ts: int, image: bytes,
                       codec: int = CODEC_JPEG) -> bytes:
    return _UPLOAD_PREFIX.pack(capture_ts, send_ts, codec) + image


def parse_frame_upload(payload: bytes) -> dict:
    if len(payload) < _UPLOAD_PREFIX.size:
        raise ProtocolError("FRAME_UPLOAD payload too short")
    capture_ts, send_ts, codec = _UPLOAD_PREFIX.unpack_from(payload)
    return {"capture_ts": capture_ts, "send_ts": send_ts, "codec": codec,
            "image": payload[_UPLOAD_PREFIX.size:]}


def build_result_prefix(capture_ts_echo: int, send_ts_echo: int,
                        server_proc_us: int) -> bytes:
    return _RESULT_PREFIX.pack(capture_ts_echo, send_ts_echo, server_proc_us)


def parse_result_prefix(payload: bytes) -> dict:
    if len(payload) < _RESULT_PREFIX.size:
        raise ProtocolError("result payload too short")
    capture_ts, send_ts, proc_us = _RESULT_PREFIX.unpack_from(payload)
    return {"capture_ts_echo": capture_ts, "send_ts_echo": send_ts,
            "server_proc_us": proc_us, "body": payload[_RESULT_PREFIX.size:]}


def build_control_json(frame_id: int, grip: str, confidence: float,
                       detections, pad_target_bytes: int = DEFAULT_CONTROL_PAD) -> bytes:
    """Serialize the grip decision, padded up to pad_target_bytes exactly.

    If the unpadded document already exceeds the target it is sent as-is.
    """
    doc = {
        "frame_id": frame_id,
        "grip": grip,
        "confidence": round(confidence, 4),
        "detections": [
            {"cls": d.class_name, "conf": round(d.confidence, 4),
             "bbox": list(d.bbox)}
            for d in detections
        ],
        "pad": "",
    }
    base = len(json.dumps(doc, separators=(",", ":")).encode())
    need = pad_target_bytes - base
    if need > 0:
        doc["pad"] = "x" * need
    return json.dumps(doc, separators=(",", ":")).encode()


def parse_control_json(body: bytes) -> dict:
    try:
        return json.loads(body.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"bad control JSON: {exc}") from None
