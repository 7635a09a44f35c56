"""Command-line client for the gateway.

Exit codes are a stable scripting contract: 0 success, 2 a Bad status
reported by the server, 3 transport failure, 4 subscription dropped,
5 insufficient data for reconstruction. Local input problems (unreadable
topology file and the like) exit 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .addrspace import BAD_NODE_ID_UNKNOWN, ROOT_ID, build_address_space, dump_model
from .client import GatewayClient, GatewayError, TransportError
from .reconstruct import (
    DisconnectedGrid,
    DistanceObservation,
    GridShape,
    TiltObservation,
    assemble_initial_grid,
    refine,
    write_positions_csv,
)
from .topology import load_topology

EXIT_OK = 0
EXIT_BAD_STATUS = 2
EXIT_TRANSPORT = 3
EXIT_SUB_DROPPED = 4
EXIT_INSUFFICIENT = 5

DEFAULT_SERVER = "127.0.0.1:4840"


def _parse_server(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"server '{text}' is not host:port")
    return host, int(port)


def _connect(args) -> GatewayClient:
    host, port = args.server
    client = GatewayClient(host, port, timeout_s=args.timeout_ms / 1000.0)
    client.hello()
    return client


def _fmt_value(value) -> str:
    return json.dumps(value, separators=(",", ":"))


def _emit(args, record: dict, table_line: str) -> None:
    if args.output == "json":
        print(json.dumps(record, separators=(",", ":")))
    else:
        print(table_line)


# -- subcommands --


def cmd_browse(args) -> int:
    with _connect(args) as client:
        worst = EXIT_OK
        queue = [(str(args.node), 0)]
        seen = set()
        while queue:
            node, depth = queue.pop(0)
            if node in seen:
                continue
            seen.add(node)
            result = client.browse(node)
            if result["status"] == BAD_NODE_ID_UNKNOWN:
                print(f"cpfen-cli: unknown node '{node}'", file=sys.stderr)
                worst = EXIT_BAD_STATUS
                continue
            for ref in result["references"]:
                indent = "  " * depth
                _emit(args, ref,
                      f"{indent}{ref['node_class']:<9} {ref['browse_name']:<24}"
                      f" {ref['node']}")
                if args.recursive:
                    queue.append((ref["node"], depth + 1))
        client.bye()
        return worst


def cmd_read(args) -> int:
    with _connect(args) as client:
        results = client.read(list(args.nodes))
        worst = EXIT_OK
        for item in results:
            _emit(args, item,
                  f"{item['node']}\t{_fmt_value(item['value'])}"
                  f"\t{item['status']}\t{item['timestamp_ms']}")
            if item["status"].startswith("Bad"):
                worst = EXIT_BAD_STATUS
        client.bye()
        return worst


def _parse_cli_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def cmd_write(args) -> int:
    with _connect(args) as client:
        results = client.write(
            [{"node": args.node, "value": _parse_cli_value(args.value)}])
        status = results[0]["status"]
        _emit(args, results[0], f"{args.node}\t{status}")
        client.bye()
        return EXIT_OK if status == "Good" else EXIT_BAD_STATUS


def cmd_watch(args) -> int:
    with _connect(args) as client:
        result = client.subscribe(list(args.nodes), args.interval_ms)
        for entry in result["statuses"]:
            if entry["status"] != "Good":
                print(f"cpfen-cli: {entry['node']}: {entry['status']}",
                      file=sys.stderr)
        if result["clamped_interval_ms"] > args.interval_ms:
            print(f"cpfen-cli: interval clamped to "
                  f"{result['clamped_interval_ms']} ms", file=sys.stderr)
        received = 0
        while args.count is None or received < args.count:
            message = client.next_publish(timeout_s=args.timeout_ms / 1000.0)
            if message is None:
                print("cpfen-cli: timed out waiting for publish",
                      file=sys.stderr)
                return EXIT_TRANSPORT
            if message["type"] == "subscription_dropped":
                print(f"cpfen-cli: subscription dropped "
                      f"({message['body'].get('reason')})", file=sys.stderr)
                return EXIT_SUB_DROPPED
            if message["type"] != "publish":
                continue
            received += 1
            items = message["body"]["items"]
            if not items:
                print(f"# keepalive cycle={message['body']['cycle_index']}")
                continue
            for item in items:
                _emit(args, item,
                      f"{item['timestamp_ms']},{item['node']},"
                      f"{_fmt_value(item['value'])},{item['status']}")
        client.bye()
        return EXIT_OK


def _resolve_node_object(client: GatewayClient, target: str) -> str | None:
    """Accepts a full object node id or a bare sensor node id."""
    if target.startswith("ns="):
        return target
    wanted = f"Node{target}"
    queue = [ROOT_ID]
    while queue:
        result = client.browse(queue.pop(0))
        if result["status"] != "Good":
            continue
        for ref in result["references"]:
            if ref["node_class"] == "Object":
                if ref["browse_name"] == wanted:
                    return ref["node"]
                queue.append(ref["node"])
    return None


def _call_node_method(args, method_name: str) -> int:
    with _connect(args) as client:
        object_id = _resolve_node_object(client, args.node)
        if object_id is None:
            print(f"cpfen-cli: no sensor node '{args.node}'", file=sys.stderr)
            return EXIT_BAD_STATUS
        method_id = None
        for ref in client.browse(object_id)["references"]:
            if ref["node_class"] == "Method" and ref["browse_name"] == method_name:
                method_id = ref["node"]
        if method_id is None:
            print(f"cpfen-cli: '{args.node}' has no {method_name} method",
                  file=sys.stderr)
            return EXIT_BAD_STATUS
        result = client.call(object_id, method_id)
        status = result["status"]
        if args.output == "json":
            print(json.dumps(result, separators=(",", ":")))
        else:
            print(f"{method_name}\t{status}")
            for key, value in sorted(result.get("payload", {}).items()):
                print(f"{key}\t{_fmt_value(value)}")
        client.bye()
        return EXIT_OK if status == "Good" else EXIT_BAD_STATUS


def cmd_calibrate(args) -> int:
    return _call_node_method(args, "Calibrate")


def cmd_reset(args) -> int:
    return _call_node_method(args, "ResetCounters")


class _Averager:
    __slots__ = ("total", "count")

    def __init__(self):
        self.total = None
        self.count = 0

    def add(self, value) -> None:
        arr = np.asarray(value, dtype=float)
        self.total = arr if self.total is None else self.total + arr
        self.count += 1

    def mean(self):
        return self.total / self.count


def _process_variable_ids(topology):
    """Wire ids of every process variable, attributed to grid structure."""
    accel0: dict[str, tuple[str, tuple[int, int]]] = {}
    rods = []  # (distance var id, owner coord, neighbor coord)
    coords: dict[str, tuple[int, int]] = {}
    for cell in topology.cells:
        for master in cell.masters:
            for node in master.nodes:
                coords[node.node_id] = (node.grid_u, node.grid_v)
    for cell in topology.cells:
        for master in cell.masters:
            for node in master.nodes:
                prefix = (f"ns=2;s=Root/Cell{cell.cell_id}/Master{master.master_id}"
                          f"/Node{node.node_id}")
                accel0[node.node_id] = (f"{prefix}/ProcessData/Acceleration0",
                                        coords[node.node_id])
                for rod in node.rods:
                    rods.append((
                        f"{prefix}/ProcessData/Distance{rod.data_index}",
                        coords[node.node_id], coords[rod.neighbor_node_id]))
    return accel0, rods, coords


def cmd_reconstruct(args) -> int:
    try:
        topology = load_topology(args.topology)
    except (OSError, ValueError) as exc:
        print(f"cpfen-cli: {exc}", file=sys.stderr)
        return 1
    accel0, rods, coords = _process_variable_ids(topology)
    if args.pitch_mm is not None:
        pitch = args.pitch_mm
    else:
        lengths = [rod.nominal_length_mm
                   for _, _, node in topology.iter_nodes() for rod in node.rods]
        pitch = lengths[0] if lengths else 100.0
    shape = GridShape(nu=max(u for u, _ in coords.values()) + 1,
                      nv=max(v for _, v in coords.values()) + 1,
                      pitch_mm=pitch)

    monitored = [var for var, _ in accel0.values()] + [r[0] for r in rods]
    averages: dict[str, _Averager] = {var: _Averager() for var in monitored}
    current: dict[str, tuple] = {}

    with _connect(args) as client:
        result = client.subscribe(monitored, 0.0)
        bad = [e["node"] for e in result["statuses"] if e["status"] != "Good"]
        if bad:
            print(f"cpfen-cli: {len(bad)} variables not subscribable "
                  f"(topology mismatch?)", file=sys.stderr)
            return EXIT_BAD_STATUS
        publishes = 0
        while publishes < args.cycles:
            message = client.next_publish(timeout_s=args.timeout_ms / 1000.0)
            if message is None:
                if current:
                    break  # stable scene: no changes to deliver
                print("cpfen-cli: no data from subscription", file=sys.stderr)
                return EXIT_TRANSPORT
            if message["type"] == "subscription_dropped":
                print("cpfen-cli: subscription dropped", file=sys.stderr)
                return EXIT_SUB_DROPPED
            if message["type"] != "publish":
                continue
            for item in message["body"]["items"]:
                current[item["node"]] = (item["value"], item["status"])
            if not current:
                continue
            publishes += 1
            # conflation means unseen variables kept their last value, so
            # every publish contributes one carried sample per variable
            for var, (value, status) in current.items():
                if status == "Good":
                    averages[var].add(value)
        client.bye()

    tilts = []
    missing = []
    for node_id, (var, coord) in sorted(accel0.items()):
        avg = averages[var]
        if avg.count:
            tilts.append(TiltObservation.from_accel(coord, avg.mean()))
        else:
            missing.append(node_id)
    distances = []
    edges_seen = set()
    for var, owner, neighbor in rods:
        avg = averages[var]
        if avg.count:
            distances.append(DistanceObservation(owner, neighbor,
                                                 float(avg.mean())))
            edges_seen.add((min(owner, neighbor), max(owner, neighbor)))

    covered = {t.node for t in tilts}
    for edge in edges_seen:
        covered.update(edge)
    truly_missing = sorted(n for n in missing if coords[n] not in covered)
    if truly_missing:
        print("cpfen-cli: insufficient data for nodes: "
              + ", ".join(truly_missing), file=sys.stderr)
        return EXIT_INSUFFICIENT

    try:
        init = assemble_initial_grid(tilts, distances, shape)
    except DisconnectedGrid as exc:
        print(f"cpfen-cli: insufficient data: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    result = refine(init.positions, tilts, distances)
    node_ids = {coord: node_id for node_id, coord in coords.items()}
    write_positions_csv(sys.stdout if args.out == "-" else args.out,
                        result.positions, node_ids)
    rms = result.residual_rms
    print(f"reconstruct: converged={result.converged} "
          f"iterations={result.iterations} "
          f"residual_rms_distance_mm={rms['distance_mm']:.6f} "
          f"residual_rms_tilt_rad={rms['tilt_rad']:.6f}", file=sys.stderr)
    return EXIT_OK


def cmd_dump_model(args) -> int:
    try:
        topology = load_topology(args.topology)
        sys.stdout.write(dump_model(build_address_space(topology)))
    except BrokenPipeError:
        raise  # downstream reader closed; handled quietly in main()
    except (OSError, ValueError) as exc:
        print(f"cpfen-cli: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpfen-cli",
        description="Client for the sensor-grid gateway: browse, read, "
                    "write, watch, calibrate, and reconstruct shape.")
    parser.add_argument("--server", type=_parse_server,
                        default=_parse_server(
                            os.environ.get("CPFEN_SERVER", DEFAULT_SERVER)),
                        metavar="HOST:PORT",
                        help="gateway address (env CPFEN_SERVER overrides "
                             "the default)")
    parser.add_argument("--timeout-ms", type=float, default=5000.0)
    parser.add_argument("--output", choices=("table", "json"), default="table")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("browse", help="list references of a node")
    p.add_argument("node", nargs="?", default=ROOT_ID)
    p.add_argument("--recursive", action="store_true")
    p.set_defaults(fn=cmd_browse)

    p = sub.add_parser("read", help="read variables")
    p.add_argument("nodes", nargs="+")
    p.set_defaults(fn=cmd_read)

    p = sub.add_parser("write", help="write one variable")
    p.add_argument("node")
    p.add_argument("value", help="JSON literal (bare text is a string)")
    p.set_defaults(fn=cmd_write)

    p = sub.add_parser("watch", help="subscribe and stream changes")
    p.add_argument("nodes", nargs="+")
    p.add_argument("--interval-ms", type=float, default=100.0)
    p.add_argument("--count", type=int, default=None,
                   help="stop after this many publish messages")
    p.set_defaults(fn=cmd_watch)

    p = sub.add_parser("calibrate", help="run Calibrate on a sensor node")
    p.add_argument("node", help="sensor node id (e.g. N0_0) or object node id")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("reset", help="run ResetCounters on a sensor node")
    p.add_argument("node", help="sensor node id (e.g. N0_0) or object node id")
    p.set_defaults(fn=cmd_reset)

    p = sub.add_parser("reconstruct",
                       help="estimate node positions from live data")
    p.add_argument("--topology", required=True,
                   help="topology file the gateway is serving (for grid "
                        "coordinates)")
    p.add_argument("--cycles", type=int, default=16,
                   help="publishes to average before solving")
    p.add_argument("--out", default="-", help="CSV path ('-' for stdout)")
    p.add_argument("--pitch-mm", type=float, default=None)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("dump-model",
                       help="print the information model for a topology "
                            "file (offline)")
    p.add_argument("--topology", required=True)
    p.set_defaults(fn=cmd_dump_model)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except TransportError as exc:
        print(f"cpfen-cli: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except GatewayError as exc:
        print(f"cpfen-cli: gateway error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except BrokenPipeError:
        # point stdout at devnull so the interpreter's exit flush does not
        # raise a second time
        devnull = os.open(os.devnull, os.O_WRONLY)
        os.dup2(devnull, sys.stdout.fileno())
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
