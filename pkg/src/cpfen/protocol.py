"""Framed JSON wire protocol shared by the gateway and its clients.

Every frame is a 4-byte big-endian payload length followed by that many
bytes of UTF-8 JSON. Messages are objects with a u32 "id", a "type"
string, and a "body" object. Responses echo the request id and type;
server-initiated messages (publish, subscription_dropped) use id 0.
"""

from __future__ import annotations

import json
import struct

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 4 * 1024 * 1024
_HEADER = struct.Struct(">I")

# error codes carried in {"type": "error", "body": {"code": ...}}
ERR_PROTOCOL = "PROTOCOL_ERROR"            # framing/JSON violation; fatal
ERR_UNSUPPORTED = "UNSUPPORTED"            # unknown request type; recoverable
ERR_VERSION = "VERSION_UNSUPPORTED"        # hello version mismatch; recoverable

REQUEST_TYPES = ("hello", "browse", "read", "write", "subscribe",
                 "unsubscribe", "call", "bye")


class ProtocolError(Exception):
    """Frame or message violates the wire contract."""


class ConnectionClosed(Exception):
    """Peer closed the socket mid-conversation."""


def encode_message(message: dict) -> bytes:
    payload = json.dumps(message, separators=(",", ":")).encode("utf-8")
    if len(payload) > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds limit")
    return _HEADER.pack(len(payload)) + payload


def make_request(request_id: int, request_type: str, body: dict) -> dict:
    return {"id": int(request_id) & 0xFFFFFFFF, "type": request_type,
            "body": body}


def make_response(request_id: int, request_type: str, body: dict) -> dict:
    return {"id": request_id, "type": request_type, "body": body}


def make_error(request_id: int, code: str, message: str) -> dict:
    return {"id": request_id, "type": "error",
            "body": {"code": code, "message": message}}


def validate_message(message) -> dict:
    """Structural check applied to every decoded frame on both ends."""
    if not isinstance(message, dict):
        raise ProtocolError("message is not an object")
    msg_id = message.get("id")
    if not isinstance(msg_id, int) or not 0 <= msg_id <= 0xFFFFFFFF:
        raise ProtocolError("missing or invalid message id")
    if not isinstance(message.get("type"), str):
        raise ProtocolError("missing message type")
    if not isinstance(message.get("body"), dict):
        raise ProtocolError("missing message body")
    return message


class FrameStream:
    """Blocking reader/writer of framed messages over a socket.

    Reading and writing are independent, so one thread may read while
    another writes; neither side is itself thread-safe.
    """

    def __init__(self, sock):
        self._sock = sock

    def send(self, message: dict) -> None:
        self._sock.sendall(encode_message(message))

    def _read_exact(self, count: int) -> bytes:
        chunks = []
        remaining = count
        while remaining:
            chunk = self._sock.recv(remaining)
            if not chunk:
                if remaining == count and not chunks:
                    raise ConnectionClosed("connection closed")
                raise ProtocolError("connection closed mid-frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def receive(self) -> dict:
        """Next message; raises ConnectionClosed on a clean EOF between
        frames and ProtocolError on any malformed input."""
        header = self._read_exact(_HEADER.size)
        (length,) = _HEADER.unpack(header)
        if length > MAX_FRAME_BYTES:
            raise ProtocolError(f"declared frame length {length} exceeds limit")
        payload = self._read_exact(length) if length else b""
        try:
            message = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"undecodable frame: {exc}") from None
        return validate_message(message)
