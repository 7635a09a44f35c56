"""Blocking gateway client used by the CLI and the tests."""

from __future__ import annotations

import collections
import socket

from . import protocol


class TransportError(Exception):
    """Socket-level failure or timeout talking to the gateway."""


class GatewayError(Exception):
    """The gateway answered with an error message."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


class GatewayClient:
    """One session over the framed protocol.

    Single-threaded: requests block until their matching response arrives.
    Publishes and notices that arrive in between are retained in order and
    drained via next_publish().
    """

    def __init__(self, host: str, port: int, timeout_s: float = 10.0):
        self.timeout_s = timeout_s
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout_s)
        except OSError as exc:
            raise TransportError(f"connect to {host}:{port} failed: {exc}") from None
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._stream = protocol.FrameStream(self._sock)
        self._next_id = 1
        self._inbox: collections.deque[dict] = collections.deque()

    def __enter__(self) -> "GatewayClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    # -- plumbing --

    def _receive(self) -> dict:
        try:
            return self._stream.receive()
        except protocol.ConnectionClosed as exc:
            raise TransportError(str(exc)) from None
        except protocol.ProtocolError as exc:
            raise TransportError(f"bad frame from gateway: {exc}") from None
        except socket.timeout:
            raise TransportError("timed out waiting for gateway") from None
        except OSError as exc:
            raise TransportError(str(exc)) from None

    def request(self, request_type: str, body: dict | None = None) -> dict:
        """Send one request and return its response body.

        Error responses raise GatewayError; unsolicited messages seen while
        waiting are queued for next_publish().
        """
        request_id = self._next_id
        self._next_id += 1
        message = protocol.make_request(request_id, request_type, body or {})
        try:
            self._sock.settimeout(self.timeout_s)
            self._stream.send(message)
        except OSError as exc:
            raise TransportError(str(exc)) from None
        while True:
            response = self._receive()
            if response["id"] != request_id:
                self._inbox.append(response)
                continue
            if response["type"] == "error":
                raise GatewayError(response["body"].get("code", "UNKNOWN"),
                                   response["body"].get("message", ""))
            return response["body"]

    def next_publish(self, timeout_s: float | None = None) -> dict | None:
        """Next unsolicited message (publish or notice), or None on timeout."""
        if self._inbox:
            return self._inbox.popleft()
        self._sock.settimeout(timeout_s if timeout_s is not None
                              else self.timeout_s)
        try:
            return self._receive()
        except TransportError as exc:
            if "timed out" in str(exc):
                return None
            raise

    # -- services --

    def hello(self, protocol_version: int = protocol.PROTOCOL_VERSION) -> dict:
        return self.request("hello", {"protocol_version": protocol_version})

    def browse(self, node: str) -> dict:
        return self.request("browse", {"node": node})

    def read(self, nodes: list[str]) -> list[dict]:
        return self.request("read", {"nodes": list(nodes)})["results"]

    def write(self, items: list[dict]) -> list[dict]:
        return self.request("write", {"items": list(items)})["results"]

    def subscribe(self, nodes: list[str], interval_ms: float) -> dict:
        return self.request("subscribe", {"nodes": list(nodes),
                                          "interval_ms": interval_ms})

    def unsubscribe(self, subscription_id: int) -> dict:
        return self.request("unsubscribe",
                            {"subscription_id": subscription_id})

    def call(self, object_id: str, method_id: str,
             args: dict | None = None) -> dict:
        return self.request("call", {"object": object_id, "method": method_id,
                                     "args": args or {}})

    def bye(self) -> None:
        try:
            self.request("bye", {})
        finally:
            self.close()
