"""Deployment topology: cells, wireless masters, sensor nodes, and rods.

The topology file format is UTF-8 JSON with a fixed schema; unknown fields
are rejected so that typos surface as errors instead of silently ignored
configuration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator

DEFAULT_CYCLE_MS = 5.0
DEFAULT_SUBCYCLES_PER_CYCLE = 3
DEFAULT_RSSI_BASE_DBM = -60.0

MAX_MASTERS_PER_CELL = 3
MAX_NODES_PER_MASTER = 40
MAX_NODES_PER_CELL = 120
MAX_ASSIGNED_RODS = 3
MAX_PHYSICAL_RODS = 6
CELL_RADIUS_LIMIT_M = 10.0


class TopologyError(ValueError):
    """Base class for topology ingest failures."""


class TopologySyntaxError(TopologyError):
    """The document is not valid JSON."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class SchemaError(TopologyError):
    """The document is valid JSON but violates the topology schema."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class UnassignableRodError(TopologyError):
    """Both endpoints of a lattice edge already hold the maximum rod count."""

    code = "ROD_CAPACITY"

    def __init__(self, edge: tuple[tuple[int, int], tuple[int, int]]):
        super().__init__(f"edge {edge[0]}-{edge[1]}: both endpoints already hold "
                         f"{MAX_ASSIGNED_RODS} rods")
        self.edge = edge


@dataclass(frozen=True)
class LinkModelParams:
    subcycle_loss_prob: float = 0.0
    rssi_base_dbm: float = DEFAULT_RSSI_BASE_DBM


@dataclass(frozen=True)
class RodAssignment:
    rod_id: str
    data_index: int
    neighbor_node_id: str
    nominal_length_mm: float


@dataclass(frozen=True)
class SensorNodeConfig:
    node_id: str
    grid_u: int
    grid_v: int
    physical_rod_count: int
    rods: tuple[RodAssignment, ...] = ()
    link: LinkModelParams = LinkModelParams()

    @property
    def assigned_rod_count(self) -> int:
        return len(self.rods)


@dataclass(frozen=True)
class MasterConfig:
    master_id: str
    nodes: tuple[SensorNodeConfig, ...]
    cycle_ms: float = DEFAULT_CYCLE_MS
    subcycles_per_cycle: int = DEFAULT_SUBCYCLES_PER_CYCLE


@dataclass(frozen=True)
class CellConfig:
    cell_id: str
    radius_m: float
    masters: tuple[MasterConfig, ...]

    def node_count(self) -> int:
        return sum(len(m.nodes) for m in self.masters)


@dataclass(frozen=True)
class NetworkTopology:
    cells: tuple[CellConfig, ...]

    def iter_nodes(self) -> Iterator[tuple[CellConfig, MasterConfig, SensorNodeConfig]]:
        for cell in self.cells:
            for master in cell.masters:
                for node in master.nodes:
                    yield cell, master, node

    def node_by_id(self, node_id: str) -> SensorNodeConfig:
        for _, _, node in self.iter_nodes():
            if node.node_id == node_id:
                return node
        raise KeyError(node_id)

    def counts(self) -> tuple[int, int, int]:
        """(cells, masters, nodes) totals."""
        masters = sum(len(c.masters) for c in self.cells)
        nodes = sum(c.node_count() for c in self.cells)
        return len(self.cells), masters, nodes

    def rod_count(self) -> int:
        return sum(len(n.rods) for _, _, n in self.iter_nodes())


@dataclass(frozen=True)
class Violation:
    severity: str  # "error" | "warning"
    code: str
    path: str
    message: str


# --- parsing -------------------------------------------------------------

def _require_object(value: Any, path: str) -> dict:
    if not isinstance(value, dict):
        raise SchemaError(path, f"expected object, got {type(value).__name__}")
    return value


def _require_list(value: Any, path: str) -> list:
    if not isinstance(value, list):
        raise SchemaError(path, f"expected array, got {type(value).__name__}")
    return value


def _check_keys(obj: dict, path: str, required: Iterable[str], optional: Iterable[str] = ()) -> None:
    required = set(required)
    allowed = required | set(optional)
    missing = required - obj.keys()
    if missing:
        raise SchemaError(path, f"missing field '{sorted(missing)[0]}'")
    unknown = obj.keys() - allowed
    if unknown:
        raise SchemaError(path, f"unknown field '{sorted(unknown)[0]}'")


def _get_str(obj: dict, key: str, path: str) -> str:
    value = obj[key]
    if not isinstance(value, str) or not value:
        raise SchemaError(f"{path}.{key}", "expected non-empty string")
    return value


def _get_int(obj: dict, key: str, path: str) -> int:
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{path}.{key}", "expected integer")
    return value


def _get_number(obj: dict, key: str, path: str) -> float:
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{path}.{key}", "expected number")
    return float(value)


def _parse_link(obj: Any, path: str) -> LinkModelParams:
    obj = _require_object(obj, path)
    _check_keys(obj, path, ["subcycle_loss_prob"], ["rssi_base_dbm"])
    prob = _get_number(obj, "subcycle_loss_prob", path)
    if not 0.0 <= prob <= 1.0:
        raise SchemaError(f"{path}.subcycle_loss_prob", "must be in [0, 1]")
    rssi = _get_number(obj, "rssi_base_dbm", path) if "rssi_base_dbm" in obj else DEFAULT_RSSI_BASE_DBM
    return LinkModelParams(subcycle_loss_prob=prob, rssi_base_dbm=rssi)


def _parse_rod(obj: Any, path: str) -> RodAssignment:
    obj = _require_object(obj, path)
    _check_keys(obj, path, ["rod_id", "data_index", "neighbor_node_id", "nominal_length_mm"])
    length = _get_number(obj, "nominal_length_mm", path)
    if length <= 0:
        raise SchemaError(f"{path}.nominal_length_mm", "must be positive")
    index = _get_int(obj, "data_index", path)
    if index < 1:
        raise SchemaError(f"{path}.data_index", "must be >= 1")
    return RodAssignment(
        rod_id=_get_str(obj, "rod_id", path),
        data_index=index,
        neighbor_node_id=_get_str(obj, "neighbor_node_id", path),
        nominal_length_mm=length,
    )


def _parse_node(obj: Any, path: str) -> SensorNodeConfig:
    obj = _require_object(obj, path)
    _check_keys(obj, path, ["node_id", "grid_u", "grid_v"],
                ["physical_rod_count", "link", "rods"])
    node_id = _get_str(obj, "node_id", path)
    rods = tuple(
        _parse_rod(rod, f"{path}.rods[{i}]")
        for i, rod in enumerate(_require_list(obj.get("rods", []), f"{path}.rods"))
    )
    # Data indices must be contiguous from 1; gaps or duplicates indicate a
    # mis-edited file and are rejected outright rather than reported later.
    indices = sorted(rod.data_index for rod in rods)
    if indices != list(range(1, len(rods) + 1)):
        raise SchemaError(f"{path}.rods",
                          f"node '{node_id}': data_index values {indices} are not exactly 1..{len(rods)}")
    if "physical_rod_count" in obj:
        physical = _get_int(obj, "physical_rod_count", path)
        if physical < 0:
            raise SchemaError(f"{path}.physical_rod_count", "must be >= 0")
    else:
        physical = len(rods)
    link = _parse_link(obj["link"], f"{path}.link") if "link" in obj else LinkModelParams()
    return SensorNodeConfig(
        node_id=node_id,
        grid_u=_get_int(obj, "grid_u", path),
        grid_v=_get_int(obj, "grid_v", path),
        physical_rod_count=physical,
        rods=rods,
        link=link,
    )


def _parse_master(obj: Any, path: str) -> MasterConfig:
    obj = _require_object(obj, path)
    _check_keys(obj, path, ["master_id", "nodes"], ["cycle_ms", "subcycles_per_cycle"])
    cycle_ms = _get_number(obj, "cycle_ms", path) if "cycle_ms" in obj else DEFAULT_CYCLE_MS
    if cycle_ms <= 0:
        raise SchemaError(f"{path}.cycle_ms", "must be positive")
    if "subcycles_per_cycle" in obj:
        subcycles = _get_int(obj, "subcycles_per_cycle", path)
        if subcycles < 1:
            raise SchemaError(f"{path}.subcycles_per_cycle", "must be >= 1")
    else:
        subcycles = DEFAULT_SUBCYCLES_PER_CYCLE
    nodes = tuple(
        _parse_node(node, f"{path}.nodes[{i}]")
        for i, node in enumerate(_require_list(obj["nodes"], f"{path}.nodes"))
    )
    return MasterConfig(
        master_id=_get_str(obj, "master_id", path),
        nodes=nodes,
        cycle_ms=cycle_ms,
        subcycles_per_cycle=subcycles,
    )


def _parse_cell(obj: Any, path: str) -> CellConfig:
    obj = _require_object(obj, path)
    _check_keys(obj, path, ["cell_id", "radius_m", "masters"])
    radius = _get_number(obj, "radius_m", path)
    if radius <= 0:
        raise SchemaError(f"{path}.radius_m", "must be positive")
    masters = tuple(
        _parse_master(master, f"{path}.masters[{i}]")
        for i, master in enumerate(_require_list(obj["masters"], f"{path}.masters"))
    )
    return CellConfig(cell_id=_get_str(obj, "cell_id", path), radius_m=radius, masters=masters)


def parse_topology(text: str) -> NetworkTopology:
    """Parse a topology document.

    Raises TopologySyntaxError for malformed JSON (with line/column) and
    SchemaError for missing, unknown, or ill-typed fields (with field path).
    Capacity and cross-reference rules are not checked here; see
    validate_topology.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TopologySyntaxError(exc.msg, exc.lineno, exc.colno) from exc
    doc = _require_object(doc, "$")
    _check_keys(doc, "$", ["cells"])
    cells = tuple(
        _parse_cell(cell, f"$.cells[{i}]")
        for i, cell in enumerate(_require_list(doc["cells"], "$.cells"))
    )
    return NetworkTopology(cells=cells)


def load_topology(path) -> NetworkTopology:
    with open(path, encoding="utf-8") as fh:
        return parse_topology(fh.read())


def serialize_topology(topology: NetworkTopology) -> str:
    """Render a topology back to its JSON file form, defaults materialized."""
    doc = {
        "cells": [
            {
                "cell_id": cell.cell_id,
                "radius_m": cell.radius_m,
                "masters": [
                    {
                        "master_id": master.master_id,
                        "cycle_ms": master.cycle_ms,
                        "subcycles_per_cycle": master.subcycles_per_cycle,
                        "nodes": [
                            {
                                "node_id": node.node_id,
                                "grid_u": node.grid_u,
                                "grid_v": node.grid_v,
                                "physical_rod_count": node.physical_rod_count,
                                "link": {
                                    "subcycle_loss_prob": node.link.subcycle_loss_prob,
                                    "rssi_base_dbm": node.link.rssi_base_dbm,
                                },
                                "rods": [
                                    {
                                        "rod_id": rod.rod_id,
                                        "data_index": rod.data_index,
                                        "neighbor_node_id": rod.neighbor_node_id,
                                        "nominal_length_mm": rod.nominal_length_mm,
                                    }
                                    for rod in node.rods
                                ],
                            }
                            for node in master.nodes
                        ],
                    }
                    for master in cell.masters
                ],
            }
            for cell in topology.cells
        ]
    }
    return json.dumps(doc, indent=2) + "\n"


# --- validation ----------------------------------------------------------

def validate_topology(topology: NetworkTopology) -> list[Violation]:
    """Check every topology invariant; returns violations, empty when clean.

    Violations are sorted by path then code, so the report is stable for a
    given input.
    """
    violations: list[Violation] = []

    def add(severity: str, code: str, path: str, message: str) -> None:
        violations.append(Violation(severity, code, path, message))

    seen_ids: dict[str, str] = {}

    def claim_id(identifier: str, path: str) -> None:
        if identifier in seen_ids:
            add("error", "DUPLICATE_ID", path,
                f"identifier '{identifier}' already used at {seen_ids[identifier]}")
        else:
            seen_ids[identifier] = path

    nodes_by_id = {node.node_id: node for _, _, node in topology.iter_nodes()}
    seen_coords: dict[tuple[int, int], str] = {}

    for ci, cell in enumerate(topology.cells):
        cell_path = f"cells[{ci}]"
        claim_id(cell.cell_id, cell_path)
        if len(cell.masters) > MAX_MASTERS_PER_CELL:
            add("error", "CELL_MASTER_LIMIT", cell_path,
                f"cell '{cell.cell_id}' has {len(cell.masters)} masters "
                f"(limit {MAX_MASTERS_PER_CELL})")
        if cell.node_count() > MAX_NODES_PER_CELL:
            add("error", "CELL_NODE_LIMIT", cell_path,
                f"cell '{cell.cell_id}' has {cell.node_count()} nodes "
                f"(limit {MAX_NODES_PER_CELL})")
        if cell.radius_m > CELL_RADIUS_LIMIT_M:
            add("warning", "CELL_RADIUS", cell_path,
                f"cell '{cell.cell_id}' radius {cell.radius_m} m exceeds the "
                f"{CELL_RADIUS_LIMIT_M} m specified range")
        for mi, master in enumerate(cell.masters):
            master_path = f"{cell_path}.masters[{mi}]"
            claim_id(master.master_id, master_path)
            if len(master.nodes) > MAX_NODES_PER_MASTER:
                add("error", "MASTER_NODE_LIMIT", master_path,
                    f"master '{master.master_id}' has {len(master.nodes)} nodes "
                    f"(limit {MAX_NODES_PER_MASTER})")
            for ni, node in enumerate(master.nodes):
                node_path = f"{master_path}.nodes[{ni}]"
                claim_id(node.node_id, node_path)
                coord = (node.grid_u, node.grid_v)
                if coord in seen_coords:
                    add("error", "DUPLICATE_COORD", node_path,
                        f"grid coordinate {coord} already used by node "
                        f"'{seen_coords[coord]}'")
                else:
                    seen_coords[coord] = node.node_id
                if len(node.rods) > MAX_ASSIGNED_RODS:
                    add("error", "ROD_LIMIT", node_path,
                        f"node '{node.node_id}' has {len(node.rods)} assigned rods "
                        f"(limit {MAX_ASSIGNED_RODS})")
                indices = sorted(rod.data_index for rod in node.rods)
                if indices != list(range(1, len(node.rods) + 1)):
                    add("error", "ROD_INDEX", node_path,
                        f"node '{node.node_id}' rod data_index values {indices} "
                        f"are not exactly 1..{len(node.rods)}")
                if node.physical_rod_count > MAX_PHYSICAL_RODS:
                    add("error", "PHYSICAL_RODS", node_path,
                        f"node '{node.node_id}' physical_rod_count "
                        f"{node.physical_rod_count} exceeds {MAX_PHYSICAL_RODS}")
                if node.physical_rod_count < len(node.rods):
                    add("error", "PHYSICAL_RODS", node_path,
                        f"node '{node.node_id}' physical_rod_count "
                        f"{node.physical_rod_count} is below the assigned rod "
                        f"count {len(node.rods)}")
                if not 0.0 <= node.link.subcycle_loss_prob <= 1.0:
                    add("error", "LINK_PARAM", node_path,
                        f"node '{node.node_id}' subcycle_loss_prob "
                        f"{node.link.subcycle_loss_prob} outside [0, 1]")
                for ri, rod in enumerate(node.rods):
                    rod_path = f"{node_path}.rods[{ri}]"
                    claim_id(rod.rod_id, rod_path)
                    neighbor = nodes_by_id.get(rod.neighbor_node_id)
                    if neighbor is None:
                        add("error", "NODE_REF", rod_path,
                            f"rod '{rod.rod_id}' references unknown node "
                            f"'{rod.neighbor_node_id}'")
                    else:
                        du = abs(node.grid_u - neighbor.grid_u)
                        dv = abs(node.grid_v - neighbor.grid_v)
                        if du + dv != 1:
                            add("error", "ADJACENCY", rod_path,
                                f"rod '{rod.rod_id}' connects {coord} to "
                                f"({neighbor.grid_u}, {neighbor.grid_v}), which is "
                                f"not grid-adjacent")

    violations.sort(key=lambda v: (v.path, v.code))
    return violations


def has_errors(violations: Iterable[Violation]) -> bool:
    return any(v.severity == "error" for v in violations)


# --- rod ownership -------------------------------------------------------

Coord = tuple[int, int]
Edge = tuple[Coord, Coord]


def assign_rod_indices(nodes: Iterable[Coord], edges: Iterable[Edge]) -> dict[Coord, list[Edge]]:
    """Assign each lattice edge to exactly one endpoint node.

    Edges are processed in sorted canonical order. The lexicographically
    smaller endpoint owns the rod unless it already holds MAX_ASSIGNED_RODS,
    in which case the other endpoint takes it; if both are full,
    UnassignableRodError is raised. The returned per-node lists are in
    data_index order (1-based).
    """
    node_set = set(nodes)
    canonical: list[Edge] = []
    for a, b in edges:
        if a not in node_set or b not in node_set:
            raise ValueError(f"edge {a}-{b} references a node outside the grid")
        if abs(a[0] - b[0]) + abs(a[1] - b[1]) != 1:
            raise ValueError(f"edge {a}-{b} is not a 4-neighbor lattice edge")
        canonical.append((min(a, b), max(a, b)))
    if len(set(canonical)) != len(canonical):
        raise ValueError("duplicate edge in input")

    owned: dict[Coord, list[Edge]] = {node: [] for node in node_set}
    for edge in sorted(canonical):
        low, high = edge
        if len(owned[low]) < MAX_ASSIGNED_RODS:
            owned[low].append(edge)
        elif len(owned[high]) < MAX_ASSIGNED_RODS:
            owned[high].append(edge)
        else:
            raise UnassignableRodError(edge)
    return owned


def make_grid_topology(
    nu: int,
    nv: int,
    pitch_mm: float = 100.0,
    cell_id: str = "C1",
    radius_m: float = 5.0,
    cycle_ms: float = DEFAULT_CYCLE_MS,
    subcycles_per_cycle: int = DEFAULT_SUBCYCLES_PER_CYCLE,
    subcycle_loss_prob: float = 0.0,
    loss_prob_overrides: dict[Coord, float] | None = None,
) -> NetworkTopology:
    """Build a full nu x nv lattice topology with deterministic rod ownership.

    Nodes are chunked row-major into masters of at most MAX_NODES_PER_MASTER
    and masters into cells of at most MAX_MASTERS_PER_CELL; the given cell_id
    is used for the first cell and suffixed for any further ones.
    """
    if nu < 1 or nv < 1:
        raise ValueError("grid must be at least 1x1")
    coords = [(u, v) for u in range(nu) for v in range(nv)]
    edges: list[Edge] = []
    for u, v in coords:
        if u + 1 < nu:
            edges.append(((u, v), (u + 1, v)))
        if v + 1 < nv:
            edges.append(((u, v), (u, v + 1)))
    owned = assign_rod_indices(coords, edges)
    degree = {c: 0 for c in coords}
    for a, b in edges:
        degree[a] += 1
        degree[b] += 1

    overrides = loss_prob_overrides or {}

    def node_id(coord: Coord) -> str:
        return f"N{coord[0]}_{coord[1]}"

    node_configs = []
    for coord in sorted(coords):
        rods = tuple(
            RodAssignment(
                rod_id=f"R{a[0]}_{a[1]}__{b[0]}_{b[1]}",
                data_index=i + 1,
                neighbor_node_id=node_id(b if a == coord else a),
                nominal_length_mm=pitch_mm,
            )
            for i, (a, b) in enumerate(owned[coord])
        )
        node_configs.append(SensorNodeConfig(
            node_id=node_id(coord),
            grid_u=coord[0],
            grid_v=coord[1],
            physical_rod_count=min(degree[coord], MAX_PHYSICAL_RODS),
            rods=rods,
            link=LinkModelParams(subcycle_loss_prob=overrides.get(coord, subcycle_loss_prob)),
        ))

    masters = []
    for mi in range(0, len(node_configs), MAX_NODES_PER_MASTER):
        chunk = tuple(node_configs[mi:mi + MAX_NODES_PER_MASTER])
        masters.append(MasterConfig(
            master_id=f"M{mi // MAX_NODES_PER_MASTER + 1}",
            nodes=chunk,
            cycle_ms=cycle_ms,
            subcycles_per_cycle=subcycles_per_cycle,
        ))

    cells = []
    for ci in range(0, len(masters), MAX_MASTERS_PER_CELL):
        chunk = tuple(masters[ci:ci + MAX_MASTERS_PER_CELL])
        suffix = "" if ci == 0 else f"_{ci // MAX_MASTERS_PER_CELL + 1}"
        cells.append(CellConfig(cell_id=f"{cell_id}{suffix}", radius_m=radius_m, masters=chunk))
    return NetworkTopology(cells=tuple(cells))
