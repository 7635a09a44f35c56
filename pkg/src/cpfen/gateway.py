"""Network gateway: drives the simulation and serves framed-protocol sessions.

One driver thread owns all mutable state: it advances master cycles,
applies queued writes and method calls between cycles, and evaluates
subscriptions against an immutable per-tick snapshot. Session reader
threads parse requests and answer browse/read directly from the static
model structure and the latest snapshot; anything that mutates state is
handed to the driver thread and the response is sent only after it has
been applied. A writer thread per session serializes outgoing frames, so
responses keep request order and publishes never tear.
"""

from __future__ import annotations

import argparse
import collections
import itertools
import os
import queue
import signal
import socket
import sys
import threading
import time

from . import protocol
from .addrspace import (
    BAD_METHOD_INVALID,
    BAD_NODE_ID_UNKNOWN,
    BAD_NOT_READABLE,
    GOOD,
    ROOT_ID,
    NodeClass,
    UnknownModelNode,
)
from .driver import SimulationDriver
from .surface import NoiseModel, parse_surface_spec
from .topology import load_topology

KEEPALIVE_INTERVALS = 10
BLOCKED_INTERVAL_LIMIT = 2
SESSION_QUEUE_DEPTH = 64
BAD_SUBSCRIPTION_UNKNOWN = "BadSubscriptionIdUnknown"

_CLOSE = object()  # writer-queue sentinel


class _Snapshot:
    """Immutable view of every variable at one driver tick."""

    __slots__ = ("cycle_index", "time_ms", "values")

    def __init__(self, cycle_index: int, time_ms: float, values: dict):
        self.cycle_index = cycle_index
        self.time_ms = time_ms
        self.values = values


def _take_snapshot(driver: SimulationDriver) -> _Snapshot:
    values = {}
    for node_id, node in driver.space.nodes.items():
        if node.node_class is NodeClass.VARIABLE and node.value is not None:
            values[node_id] = (node.value.value, node.value.status,
                               node.value.source_timestamp_ms)
    return _Snapshot(driver.tick_count, driver.time_ms, values)


class _Subscription:
    def __init__(self, sub_id: int, session: "_Session", monitored: list[str],
                 clamped_ms: float, interval_ticks: int, created_tick: int):
        self.sub_id = sub_id
        self.session = session
        self.monitored = monitored
        self.clamped_ms = clamped_ms
        self.interval_ticks = interval_ticks
        self.created_tick = created_tick
        self.last_sent: dict[str, tuple] = {}
        self.empty_intervals = 0
        self.blocked_intervals = 0


class _Session:
    def __init__(self, session_id: int, sock: socket.socket):
        self.session_id = session_id
        self.sock = sock
        self.stream = protocol.FrameStream(sock)
        self.out_q: queue.Queue = queue.Queue(maxsize=SESSION_QUEUE_DEPTH)
        self.notices: collections.deque = collections.deque()
        self.closed = threading.Event()

    def try_publish(self, message: dict) -> bool:
        """Driver-side enqueue; never blocks the publisher."""
        try:
            self.out_q.put_nowait(message)
            return True
        except queue.Full:
            return False

    def post_notice(self, message: dict) -> None:
        self.notices.append(message)

    def enqueue(self, message) -> None:
        """Reader-side enqueue with shutdown-aware backpressure."""
        while not self.closed.is_set():
            try:
                self.out_q.put(message, timeout=0.2)
                return
            except queue.Full:
                continue

    def close(self) -> None:
        if not self.closed.is_set():
            self.closed.set()
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self.sock.close()
            except OSError:
                pass


class GatewayServer:
    """Owns the driver thread, the listener, and all session threads."""

    def __init__(self, driver: SimulationDriver, listen=("127.0.0.1", 0),
                 unpaced: bool = False, duration_cycles: int | None = None):
        self.driver = driver
        self.unpaced = unpaced
        self.duration_cycles = duration_cycles
        self._requests: queue.Queue = queue.Queue()
        self._sessions: dict[int, _Session] = {}
        self._sessions_lock = threading.Lock()
        self._subscriptions: dict[tuple[int, int], _Subscription] = {}
        self._session_ids = itertools.count(1)
        self._sub_ids = itertools.count(1)
        self._stop = threading.Event()
        self.finished = threading.Event()
        self._threads: list[threading.Thread] = []
        self._snapshot = _take_snapshot(driver)
        self._var_cycle_ms = self._index_variable_rates()

        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(listen)
        self._listener.listen(32)
        self.address = self._listener.getsockname()

    def _index_variable_rates(self) -> dict[str, float]:
        """Map every master-owned variable to its master's cycle period."""
        space = self.driver.space
        cycle_of = {m.master_id: m.cycle_ms
                    for c in self.driver.topology.cells for m in c.masters}
        rates: dict[str, float] = {}
        for binding in space.bindings.values():
            period = cycle_of[binding.master_id]
            for var in (binding.process_variables() + binding.bias
                        + binding.scale + binding.offset
                        + (binding.rssi, binding.lost_frames,
                           binding.retransmissions, binding.port_status)):
                rates[var] = period
        for mb in space.master_bindings.values():
            rates[mb.cycle_index] = cycle_of[mb.master_id]
            rates[mb.connected_nodes] = cycle_of[mb.master_id]
        return rates

    # -- lifecycle --

    def start(self) -> None:
        for name, target in (("gateway-driver", self._driver_loop),
                             ("gateway-accept", self._accept_loop)):
            thread = threading.Thread(target=target, name=name, daemon=True)
            thread.start()
            self._threads.append(thread)

    def stop(self) -> None:
        self._stop.set()
        # shutdown, not just close: close() alone leaves a thread blocked in
        # accept() sleeping until the next connection arrives
        try:
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._listener.close()
        except OSError:
            pass
        with self._sessions_lock:
            sessions = list(self._sessions.values())
        for session in sessions:
            session.close()
        for thread in self._threads:
            thread.join(timeout=2.0)
        self.finished.set()

    def run_until_stopped(self) -> None:
        self.finished.wait()

    # -- driver thread --

    def _driver_loop(self) -> None:
        tick_s = self.driver.tick_ms / 1000.0
        deadline = time.monotonic() + tick_s
        try:
            while not self._stop.is_set():
                if self.unpaced:
                    self._drain_requests()
                else:
                    self._wait_for_deadline(deadline)
                    deadline += tick_s
                if self._stop.is_set():
                    break
                self.driver.step()
                self._snapshot = _take_snapshot(self.driver)
                self._evaluate_subscriptions()
                if (self.duration_cycles is not None
                        and self.driver.tick_count >= self.duration_cycles):
                    break
        finally:
            threading.Thread(target=self.stop, daemon=True).start()

    def _wait_for_deadline(self, deadline: float) -> None:
        while not self._stop.is_set():
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return
            try:
                item = self._requests.get(timeout=remaining)
            except queue.Empty:
                return
            self._service(item)

    def _drain_requests(self) -> None:
        while True:
            try:
                item = self._requests.get_nowait()
            except queue.Empty:
                return
            self._service(item)

    def submit(self, handler: str, payload: dict) -> dict:
        """Run a state-changing operation on the driver thread and wait."""
        reply: queue.Queue = queue.Queue(maxsize=1)
        self._requests.put((handler, payload, reply))
        try:
            return reply.get(timeout=30.0)
        except queue.Empty:
            return {"error": "driver unresponsive"}

    def _service(self, item) -> None:
        handler, payload, reply = item
        try:
            result = getattr(self, "_drv_" + handler)(**payload)
        except Exception as exc:  # pragma: no cover - defensive
            result = {"error": f"{type(exc).__name__}: {exc}"}
        try:
            reply.put_nowait(result)
        except queue.Full:  # pragma: no cover - reply queues are private
            pass

    # -- driver-side request handlers --

    def _drv_write(self, items: list) -> dict:
        results = []
        for item in items:
            node = str(item.get("node", ""))
            status = self.driver.write(node, item.get("value"))
            results.append({"node": node, "status": status})
        self._snapshot = _take_snapshot(self.driver)
        return {"results": results}

    def _drv_call(self, object_id: str, method_id: str, args: dict) -> dict:
        space = self.driver.space
        try:
            space.get(object_id)
        except UnknownModelNode:
            return {"status": BAD_NODE_ID_UNKNOWN, "payload": {}}
        children = {ref.target_node_id for ref in space.browse(object_id)}
        if method_id not in children:
            return {"status": BAD_METHOD_INVALID, "payload": {}}
        result = self.driver.call_method(method_id, args)
        self._snapshot = _take_snapshot(self.driver)
        return {"status": result.status, "payload": result.payload}

    def _drv_subscribe(self, session: _Session, nodes: list,
                       interval_ms: float) -> dict:
        statuses = []
        monitored = []
        involved_rates = []
        snapshot = self._snapshot
        for raw in nodes:
            node = str(raw)
            if node in snapshot.values:
                statuses.append({"node": node, "status": GOOD})
                monitored.append(node)
                involved_rates.append(
                    self._var_cycle_ms.get(node, self.driver.tick_ms))
            else:
                try:
                    self.driver.space.get(node)
                except UnknownModelNode:
                    statuses.append({"node": node,
                                     "status": BAD_NODE_ID_UNKNOWN})
                else:
                    statuses.append({"node": node, "status": BAD_NOT_READABLE})
        floor_ms = min(involved_rates) if involved_rates else self.driver.tick_ms
        clamped = max(float(interval_ms), floor_ms)
        interval_ticks = max(1, round(clamped / self.driver.tick_ms))
        sub = _Subscription(next(self._sub_ids), session, monitored, clamped,
                            interval_ticks, self.driver.tick_count)
        self._subscriptions[(session.session_id, sub.sub_id)] = sub
        return {"subscription_id": sub.sub_id,
                "clamped_interval_ms": clamped,
                "statuses": statuses}

    def _drv_unsubscribe(self, session: _Session, subscription_id: int) -> dict:
        key = (session.session_id, int(subscription_id))
        if self._subscriptions.pop(key, None) is None:
            return {"status": BAD_SUBSCRIPTION_UNKNOWN}
        return {"status": GOOD}

    def _drv_drop_session(self, session: _Session) -> dict:
        for key in [k for k in self._subscriptions
                    if k[0] == session.session_id]:
            del self._subscriptions[key]
        return {}

    # -- subscription evaluation (driver thread) --

    def _evaluate_subscriptions(self) -> None:
        if not self._subscriptions:
            return
        snapshot = self._snapshot
        for key, sub in list(self._subscriptions.items()):
            if sub.session.closed.is_set():
                del self._subscriptions[key]
                continue
            elapsed = snapshot.cycle_index - sub.created_tick
            if elapsed <= 0 or elapsed % sub.interval_ticks != 0:
                continue
            self._publish_due(key, sub, snapshot)

    def _publish_due(self, key, sub: _Subscription, snapshot: _Snapshot) -> None:
        items = []
        changed: dict[str, tuple] = {}
        for node in sub.monitored:
            current = snapshot.values.get(node)
            if current is None or current == sub.last_sent.get(node):
                continue
            changed[node] = current
            value, status, ts = current
            items.append({"node": node, "value": value, "status": status,
                          "timestamp_ms": ts})
        if not items:
            sub.empty_intervals += 1
            if sub.empty_intervals < KEEPALIVE_INTERVALS:
                return
        message = {"id": 0, "type": "publish",
                   "body": {"subscription_id": sub.sub_id,
                            "cycle_index": snapshot.cycle_index,
                            "items": items}}
        if sub.session.try_publish(message):
            sub.last_sent.update(changed)
            sub.empty_intervals = 0
            sub.blocked_intervals = 0
        else:
            sub.blocked_intervals += 1
            if sub.blocked_intervals > BLOCKED_INTERVAL_LIMIT:
                del self._subscriptions[key]
                sub.session.post_notice(
                    {"id": 0, "type": "subscription_dropped",
                     "body": {"subscription_id": sub.sub_id,
                              "reason": "slow_client"}})

    # -- accept + session threads --

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _addr = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            session = _Session(next(self._session_ids), sock)
            with self._sessions_lock:
                self._sessions[session.session_id] = session
            self._threads = [t for t in self._threads if t.is_alive()]
            for name, target in (("reader", self._reader_loop),
                                 ("writer", self._writer_loop)):
                thread = threading.Thread(
                    target=target, args=(session,),
                    name=f"gateway-session-{session.session_id}-{name}",
                    daemon=True)
                thread.start()
                self._threads.append(thread)

    def _writer_loop(self, session: _Session) -> None:
        try:
            while True:
                while session.notices:
                    session.stream.send(session.notices.popleft())
                try:
                    message = session.out_q.get(timeout=0.2)
                except queue.Empty:
                    if session.closed.is_set():
                        return
                    continue
                if message is _CLOSE:
                    return
                session.stream.send(message)
        except (OSError, protocol.ProtocolError):
            pass
        finally:
            self._teardown(session)

    def _reader_loop(self, session: _Session) -> None:
        # teardown belongs to the writer so queued responses (bye, protocol
        # errors) are flushed before the socket closes
        while not session.closed.is_set():
            try:
                request = session.stream.receive()
            except protocol.ConnectionClosed:
                session.enqueue(_CLOSE)
                return
            except protocol.ProtocolError as exc:
                session.enqueue(protocol.make_error(
                    0, protocol.ERR_PROTOCOL, str(exc)))
                session.enqueue(_CLOSE)
                return
            except OSError:
                session.enqueue(_CLOSE)
                return
            if not self._dispatch(session, request):
                return

    def _dispatch(self, session: _Session, request: dict) -> bool:
        """Handle one request; False ends the session."""
        req_id = request["id"]
        req_type = request["type"]
        body = request["body"]
        if req_type == "hello":
            version = body.get("protocol_version")
            if version != protocol.PROTOCOL_VERSION:
                session.enqueue(protocol.make_error(
                    req_id, protocol.ERR_VERSION,
                    f"protocol version {version!r} not supported"))
                return True
            session.enqueue(protocol.make_response(req_id, "hello", {
                "protocol_version": protocol.PROTOCOL_VERSION,
                "session_id": session.session_id}))
            return True
        if req_type == "browse":
            session.enqueue(protocol.make_response(
                req_id, "browse", self._handle_browse(body)))
            return True
        if req_type == "read":
            session.enqueue(protocol.make_response(
                req_id, "read", self._handle_read(body)))
            return True
        if req_type == "write":
            items = body.get("items")
            items = items if isinstance(items, list) else []
            session.enqueue(protocol.make_response(
                req_id, "write", self.submit("write", {"items": items})))
            return True
        if req_type == "subscribe":
            nodes = body.get("nodes")
            nodes = nodes if isinstance(nodes, list) else []
            try:
                interval = float(body.get("interval_ms", 0.0))
            except (TypeError, ValueError):
                interval = 0.0
            session.enqueue(protocol.make_response(
                req_id, "subscribe",
                self.submit("subscribe", {"session": session, "nodes": nodes,
                                          "interval_ms": interval})))
            return True
        if req_type == "unsubscribe":
            try:
                sub_id = int(body.get("subscription_id", -1))
            except (TypeError, ValueError):
                sub_id = -1
            session.enqueue(protocol.make_response(
                req_id, "unsubscribe",
                self.submit("unsubscribe", {"session": session,
                                            "subscription_id": sub_id})))
            return True
        if req_type == "call":
            args = body.get("args")
            session.enqueue(protocol.make_response(
                req_id, "call", self.submit("call", {
                    "object_id": str(body.get("object", "")),
                    "method_id": str(body.get("method", "")),
                    "args": args if isinstance(args, dict) else {}})))
            return True
        if req_type == "bye":
            session.enqueue(protocol.make_response(req_id, "bye", {}))
            session.enqueue(_CLOSE)
            return False
        session.enqueue(protocol.make_error(
            req_id, protocol.ERR_UNSUPPORTED,
            f"unknown request type '{req_type}'"))
        return True

    def _handle_browse(self, body: dict) -> dict:
        node = str(body.get("node", ROOT_ID))
        try:
            references = self.driver.space.browse(node)
        except UnknownModelNode:
            return {"node": node, "status": BAD_NODE_ID_UNKNOWN,
                    "references": []}
        return {"node": node, "status": GOOD, "references": [
            {"node": ref.target_node_id,
             "browse_name": ref.browse_name,
             "node_class": ref.node_class.value,
             "reference_type": ref.reference_type.value,
             "type_definition": ref.type_definition}
            for ref in references]}

    def _handle_read(self, body: dict) -> dict:
        nodes = body.get("nodes")
        nodes = nodes if isinstance(nodes, list) else []
        snapshot = self._snapshot
        results = []
        for raw in nodes:
            node = str(raw)
            entry = snapshot.values.get(node)
            if entry is not None:
                value, status, ts = entry
                results.append({"node": node, "value": value,
                                "status": status, "timestamp_ms": ts})
                continue
            try:
                self.driver.space.get(node)
            except UnknownModelNode:
                status = BAD_NODE_ID_UNKNOWN
            else:
                status = BAD_NOT_READABLE
            results.append({"node": node, "value": None, "status": status,
                            "timestamp_ms": None})
        return {"results": results}

    def _teardown(self, session: _Session) -> None:
        first = not session.closed.is_set()
        session.close()
        if first:
            self._requests.put(
                ("drop_session", {"session": session}, queue.Queue(maxsize=1)))
        with self._sessions_lock:
            self._sessions.pop(session.session_id, None)


def _parse_listen(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(
            f"listen address '{text}' is not host:port")
    return host, int(port)


def _parse_bias(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("bias must be three comma-separated g values")
    try:
        x, y, z = (float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad bias '{text}'") from None
    return (x, y, z)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpfen-gateway",
        description="Sensor-grid gateway: simulated wireless masters behind "
                    "a framed TCP information-model server.")
    parser.add_argument("--topology", required=True,
                        help="topology JSON file")
    parser.add_argument("--surface", default="flat",
                        help="surface spec: flat[:pitch,roll] | cylinder:R[,axis]"
                             " | sinusoid:A,L[,axis]")
    parser.add_argument("--noise-accel", type=float, default=0.0,
                        metavar="G", help="accelerometer noise sigma in g")
    parser.add_argument("--noise-dist", type=float, default=0.0,
                        metavar="MM", help="distance noise sigma in mm")
    parser.add_argument("--accel-bias", type=_parse_bias, default=(0.0, 0.0, 0.0),
                        metavar="X,Y,Z", help="constant accelerometer bias in g")
    parser.add_argument("--seed", type=int, default=0, help="simulation seed")
    parser.add_argument("--listen", type=_parse_listen, default=("127.0.0.1", 4840),
                        metavar="HOST:PORT",
                        help="bind address (env CPFEN_LISTEN overrides)")
    parser.add_argument("--pitch-mm", type=float, default=None,
                        help="grid pitch override in mm")
    parser.add_argument("--stale-threshold", type=int, default=3)
    parser.add_argument("--lost-threshold", type=int, default=10)
    parser.add_argument("--unpaced", action="store_true",
                        help="run cycles as fast as possible (test mode)")
    parser.add_argument("--duration-cycles", type=int, default=None,
                        metavar="N", help="stop after N cycles")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    listen = args.listen
    env_listen = os.environ.get("CPFEN_LISTEN")
    if env_listen:
        try:
            listen = _parse_listen(env_listen)
        except argparse.ArgumentTypeError as exc:
            print(f"cpfen-gateway: {exc}", file=sys.stderr)
            return 2
    try:
        topology = load_topology(args.topology)
        surface = parse_surface_spec(args.surface)
    except (OSError, ValueError) as exc:
        print(f"cpfen-gateway: {exc}", file=sys.stderr)
        return 2
    noise = NoiseModel(accel_sigma_g=args.noise_accel,
                       distance_sigma_mm=args.noise_dist,
                       accel_bias_g=args.accel_bias)
    try:
        driver = SimulationDriver(
            topology, surface, noise=noise, seed=args.seed,
            stale_threshold=args.stale_threshold,
            lost_threshold=args.lost_threshold, pitch_mm=args.pitch_mm)
        server = GatewayServer(driver, listen=listen, unpaced=args.unpaced,
                               duration_cycles=args.duration_cycles)
    except (OSError, ValueError) as exc:
        print(f"cpfen-gateway: {exc}", file=sys.stderr)
        return 1

    try:
        for signum in (signal.SIGINT, signal.SIGTERM):
            signal.signal(signum, lambda *_: server.stop())
    except ValueError:
        pass  # not the main thread (tests); rely on stop()/duration
    server.start()
    print(f"cpfen-gateway listening on {server.address[0]}:{server.address[1]}",
          flush=True)
    server.run_until_stopped()
    return 0


if __name__ == "__main__":
    sys.exit(main())
