"""Controller<->replica wire protocol: typed, id-tagged request/response frames.

Frame = 21-byte little-endian header {msg_type u8, id u32, offset u64,
length u32, payload_len u32} followed by payload_len payload bytes. Frames
are self-delimiting; any shorter prefix is incomplete, never misparsed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import IncompleteFrameError, ProtocolError

MSG_READ = 1
MSG_WRITE = 2
MSG_UNMAP = 3
MSG_PING = 4
MSG_RESPONSE = 5
MSG_ERROR = 6

_VALID_TYPES = frozenset((MSG_READ, MSG_WRITE, MSG_UNMAP, MSG_PING, MSG_RESPONSE, MSG_ERROR))

HEADER = struct.Struct("<BIQII")
HEADER_SIZE = HEADER.size  # 21
MAX_PAYLOAD = 16 << 20  # sanity cap; larger frames are a protocol error


@dataclass
class WireMessage:
    msg_type: int
    id: int
    offset: int = 0
    length: int = 0
    payload: bytes = field(default=b"", repr=False)


def encode(msg: WireMessage) -> bytes:
    if msg.msg_type not in _VALID_TYPES:
        raise ValueError(f"unknown message type {msg.msg_type}")
    plen = len(msg.payload)
    if plen > MAX_PAYLOAD:
        raise ValueError(f"payload too large: {plen}")
    if msg.msg_type == MSG_WRITE and plen != msg.length:
        raise ValueError(f"WRITE payload {plen} != length {msg.length}")
    if msg.msg_type in (MSG_READ, MSG_UNMAP, MSG_PING) and plen:
        raise ValueError("request carries unexpected payload")
    if msg.msg_type == MSG_RESPONSE and plen != msg.length:
        raise ValueError(f"RESPONSE payload {plen} != length {msg.length}")
    return HEADER.pack(msg.msg_type, msg.id, msg.offset, msg.length, plen) + msg.payload


def response(request_id: int, payload: bytes = b"") -> WireMessage:
    return WireMessage(MSG_RESPONSE, request_id, 0, len(payload), payload)


def error_response(request_id: int, message: str) -> WireMessage:
    raw = message.encode("utf-8")
    return WireMessage(MSG_ERROR, request_id, 0, len(raw), raw)


def read_frame(stream) -> WireMessage | None:
    """Consume exactly one frame from a blocking file-like stream.

    Returns None on clean EOF at a frame boundary. Raises IncompleteFrameError
    if the stream ends mid-frame and ProtocolError on malformed frames (the
    connection must then be torn down).
    """
    header = _read_exact(stream, HEADER_SIZE, allow_eof=True)
    if header is None:
        return None
    msg_type, msg_id, offset, length, plen = HEADER.unpack(header)
    if msg_type not in _VALID_TYPES:
        raise ProtocolError(f"unknown message type {msg_type}")
    if plen > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {plen} exceeds cap")
    payload = b""
    if plen:
        payload = _read_exact(stream, plen)
    return WireMessage(msg_type, msg_id, offset, length, payload)


def _read_exact(stream, n: int, allow_eof: bool = False):
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            if allow_eof and remaining == n:
                return None
            raise IncompleteFrameError(f"stream ended {remaining} bytes short of a frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks) if len(chunks) != 1 else chunks[0]
