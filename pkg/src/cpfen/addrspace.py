"""Hierarchical information model over a running sensor network.

The model is a typed node graph in two namespaces: ns=1 holds the type
definitions (CellType, WMasterDeviceType, SensorNodeDeviceType, FolderType,
BaseDataVariableType), ns=2 the instances, rooted at `ns=2;s=Root`.
Identifiers are slash paths from Root, so the canonical text form of the
cycle counter of master M1 in cell C1 reads

    ns=2;s=Root/CellC1/MasterM1/Diagnostics/CycleIndex

Per sensor node the model exposes a ProcessData folder (Acceleration0 plus
AccelerationI/DistanceI per assigned rod), a Calibration folder (bias,
scale, distance offset; writable), a Diagnostics folder (Rssi, LostFrames,
Retransmissions, PortStatus) and the methods Calibrate and ResetCounters.

The address space itself is passive: the simulation driver publishes values
into it at cycle boundaries and serves reads, writes, and calls from
clients through it.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any

from .topology import NetworkTopology, has_errors, validate_topology

# Status code vocabulary shared across the stack.
GOOD = "Good"
UNCERTAIN_LAST_USABLE = "UncertainLastUsableValue"
BAD_COMM_LOST = "BadCommLost"
BAD_NODE_ID_UNKNOWN = "BadNodeIdUnknown"
BAD_NOT_READABLE = "BadNotReadable"
BAD_NOT_WRITABLE = "BadNotWritable"
BAD_TYPE_MISMATCH = "BadTypeMismatch"
BAD_OUT_OF_RANGE = "BadOutOfRange"
BAD_METHOD_INVALID = "BadMethodInvalid"
BAD_PRECONDITION = "BadPreconditionNotMet"

SCALE_RANGE = (0.5, 2.0)

TYPE_NAMESPACE = 1
INSTANCE_NAMESPACE = 2
ROOT_ID = "ns=2;s=Root"


class TopologyInvalid(ValueError):
    pass


class UnknownModelNode(KeyError):
    pass


class NodeClass(enum.Enum):
    OBJECT = "Object"
    VARIABLE = "Variable"
    METHOD = "Method"
    OBJECT_TYPE = "ObjectType"
    VARIABLE_TYPE = "VariableType"


class DataType(enum.Enum):
    FLOAT32 = "Float32"
    FLOAT32_VEC3 = "Float32Vec3"
    UINT32 = "UInt32"
    INT32 = "Int32"
    ENUM = "Enum"
    STRING = "String"
    BOOLEAN = "Boolean"


class Access(enum.Enum):
    READ_ONLY = "ReadOnly"
    READ_WRITE = "ReadWrite"


class RefType(enum.Enum):
    ORGANIZES = "Organizes"
    HAS_COMPONENT = "HasComponent"
    HAS_TYPE_DEFINITION = "HasTypeDefinition"


@dataclass(frozen=True)
class NodeId:
    namespace: int
    identifier: str

    def __str__(self) -> str:
        return f"ns={self.namespace};s={self.identifier}"

    @classmethod
    def parse(cls, text: str) -> NodeId:
        if not text.startswith("ns=") or ";s=" not in text:
            raise ValueError(f"bad node id '{text}'")
        ns_part, _, ident = text.partition(";s=")
        try:
            namespace = int(ns_part[3:])
        except ValueError:
            raise ValueError(f"bad node id '{text}'") from None
        if not ident:
            raise ValueError(f"bad node id '{text}'")
        return cls(namespace=namespace, identifier=ident)


@dataclass
class DataValue:
    value: Any
    source_timestamp_ms: float | None
    status: str


@dataclass
class ModelNode:
    node_id: NodeId
    node_class: NodeClass
    browse_name: str
    type_definition: NodeId | None = None
    data_type: DataType | None = None
    access: Access | None = None
    value: DataValue | None = None
    limits: tuple[float, float] | None = None


@dataclass(frozen=True)
class BrowseResult:
    reference_type: RefType
    target_node_id: str
    browse_name: str
    node_class: NodeClass
    type_definition: str | None


@dataclass(frozen=True)
class NodeBinding:
    """Address-space handles for one sensor node, used by the driver."""

    node_id: str
    object_id: str
    master_id: str
    cell_id: str
    rod_count: int
    accel: tuple[str, ...]
    distance: tuple[str, ...]
    bias: tuple[str, ...]
    scale: tuple[str, ...]
    offset: tuple[str, ...]
    rssi: str
    lost_frames: str
    retransmissions: str
    port_status: str
    calibrate_method: str
    reset_method: str

    def process_variables(self) -> tuple[str, ...]:
        return self.accel + self.distance


@dataclass(frozen=True)
class MasterBinding:
    master_id: str
    object_id: str
    cycle_index: str
    connected_nodes: str
    node_ids: tuple[str, ...]


@dataclass(frozen=True)
class CellBinding:
    cell_id: str
    object_id: str
    connected_nodes: str
    master_ids: tuple[str, ...]


class AddressSpace:
    def __init__(self):
        self.nodes: dict[str, ModelNode] = {}
        self._children: dict[str, list[tuple[RefType, str]]] = {}
        self.bindings: dict[str, NodeBinding] = {}
        self.master_bindings: dict[str, MasterBinding] = {}
        self.cell_bindings: dict[str, CellBinding] = {}
        self._methods: dict[str, tuple[str, str]] = {}  # method id -> (name, node id)

    # -- construction helpers --

    def _add(self, node: ModelNode) -> str:
        key = str(node.node_id)
        if key in self.nodes:
            raise ValueError(f"duplicate model node {key}")
        self.nodes[key] = node
        return key

    def _link(self, parent: str, ref: RefType, child: str) -> None:
        self._children.setdefault(parent, []).append((ref, child))

    # -- services --

    def get(self, node_id: str) -> ModelNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownModelNode(node_id) from None

    def browse(self, node_id: str) -> list[BrowseResult]:
        """Forward hierarchical references of a node, ordered by browse name.

        Type-definition edges are metadata, not hierarchy; each result row
        carries its target's type definition instead.
        """
        self.get(node_id)
        results = []
        for ref, target_id in self._children.get(node_id, []):
            if ref is RefType.HAS_TYPE_DEFINITION:
                continue
            target = self.nodes[target_id]
            results.append(BrowseResult(
                reference_type=ref,
                target_node_id=target_id,
                browse_name=target.browse_name,
                node_class=target.node_class,
                type_definition=(str(target.type_definition)
                                 if target.type_definition else None),
            ))
        results.sort(key=lambda r: r.browse_name)
        return results

    def read_value(self, node_id: str) -> DataValue:
        """Value, timestamp, and status of a variable.

        Lookup and class problems are reported in the status field rather
        than raised, so batch reads degrade per item.
        """
        try:
            node = self.get(node_id)
        except UnknownModelNode:
            return DataValue(None, None, BAD_NODE_ID_UNKNOWN)
        if node.node_class is not NodeClass.VARIABLE:
            return DataValue(None, None, BAD_NOT_READABLE)
        assert node.value is not None
        return DataValue(node.value.value, node.value.source_timestamp_ms,
                         node.value.status)

    def write_value(self, node_id: str, value: Any,
                    timestamp_ms: float | None = None) -> str:
        try:
            node = self.get(node_id)
        except UnknownModelNode:
            return BAD_NODE_ID_UNKNOWN
        if node.node_class is not NodeClass.VARIABLE or node.access is not Access.READ_WRITE:
            return BAD_NOT_WRITABLE
        normalized = _coerce(node.data_type, value)
        if normalized is None:
            return BAD_TYPE_MISMATCH
        if node.limits is not None:
            lo, hi = node.limits
            components = normalized if isinstance(normalized, tuple) else (normalized,)
            if any(not lo <= c <= hi for c in components):
                return BAD_OUT_OF_RANGE
        node.value = DataValue(normalized, timestamp_ms, GOOD)
        return GOOD

    def set_value(self, node_id: str, value: Any, timestamp_ms: float | None,
                  status: str) -> None:
        """Driver-side publish; bypasses access checks."""
        node = self.get(node_id)
        assert node.node_class is NodeClass.VARIABLE
        node.value = DataValue(value, timestamp_ms, status)

    def set_status(self, node_id: str, status: str) -> None:
        """Driver-side status update keeping the last usable value."""
        node = self.get(node_id)
        assert node.value is not None
        node.value.status = status

    def method_target(self, method_id: str) -> tuple[str, str] | None:
        """(method name, owning sensor node id) for a method node, else None."""
        return self._methods.get(method_id)


def _coerce(data_type: DataType | None, value: Any):
    """Normalized value for the type, or None when the shape is wrong."""
    def number(x):
        return isinstance(x, (int, float)) and not isinstance(x, bool)

    if data_type is DataType.FLOAT32:
        return float(value) if number(value) else None
    if data_type is DataType.FLOAT32_VEC3:
        if isinstance(value, (list, tuple)) and len(value) == 3 and all(
                number(c) for c in value):
            return tuple(float(c) for c in value)
        return None
    if data_type in (DataType.UINT32, DataType.INT32):
        if isinstance(value, bool) or not isinstance(value, int):
            return None
        if data_type is DataType.UINT32 and value < 0:
            return None
        return value
    if data_type is DataType.STRING or data_type is DataType.ENUM:
        return value if isinstance(value, str) else None
    if data_type is DataType.BOOLEAN:
        return value if isinstance(value, bool) else None
    return None


_TYPE_NODES = (
    ("CellType", NodeClass.OBJECT_TYPE),
    ("WMasterDeviceType", NodeClass.OBJECT_TYPE),
    ("SensorNodeDeviceType", NodeClass.OBJECT_TYPE),
    ("FolderType", NodeClass.OBJECT_TYPE),
    ("BaseDataVariableType", NodeClass.VARIABLE_TYPE),
)


def build_address_space(topology: NetworkTopology) -> AddressSpace:
    """Instantiate the full model for a validated topology."""
    violations = validate_topology(topology)
    if has_errors(violations):
        detail = "; ".join(f"{v.code} at {v.path}" for v in violations
                           if v.severity == "error")
        raise TopologyInvalid(detail)

    space = AddressSpace()
    type_ids = {}
    for name, node_class in _TYPE_NODES:
        nid = NodeId(TYPE_NAMESPACE, name)
        space._add(ModelNode(nid, node_class, name))
        type_ids[name] = nid
    var_type = type_ids["BaseDataVariableType"]

    def add_object(path: str, browse: str, type_name: str,
                   parent: str | None, ref: RefType) -> str:
        key = space._add(ModelNode(NodeId(INSTANCE_NAMESPACE, path),
                                   NodeClass.OBJECT, browse,
                                   type_definition=type_ids[type_name]))
        if parent is not None:
            space._link(parent, ref, key)
        space._link(key, RefType.HAS_TYPE_DEFINITION, str(type_ids[type_name]))
        return key

    def add_variable(parent: str, name: str, data_type: DataType,
                     access: Access, initial: DataValue,
                     limits: tuple[float, float] | None = None) -> str:
        parent_path = space.nodes[parent].node_id.identifier
        key = space._add(ModelNode(
            NodeId(INSTANCE_NAMESPACE, f"{parent_path}/{name}"),
            NodeClass.VARIABLE, name, type_definition=var_type,
            data_type=data_type, access=access, value=initial, limits=limits))
        space._link(parent, RefType.HAS_COMPONENT, key)
        space._link(key, RefType.HAS_TYPE_DEFINITION, str(var_type))
        return key

    def no_data() -> DataValue:
        return DataValue(None, None, UNCERTAIN_LAST_USABLE)

    def static(value) -> DataValue:
        return DataValue(value, 0.0, GOOD)

    root = add_object("Root", "Root", "FolderType", None, RefType.ORGANIZES)
    for cell in topology.cells:
        cell_path = f"Root/Cell{cell.cell_id}"
        cell_obj = add_object(cell_path, f"Cell{cell.cell_id}", "CellType",
                              root, RefType.ORGANIZES)
        cell_diag = add_object(f"{cell_path}/Diagnostics", "Diagnostics",
                               "FolderType", cell_obj, RefType.HAS_COMPONENT)
        cell_connected = add_variable(cell_diag, "ConnectedNodes",
                                      DataType.UINT32, Access.READ_ONLY,
                                      static(cell.node_count()))
        master_ids = []
        for master in cell.masters:
            master_path = f"{cell_path}/Master{master.master_id}"
            master_obj = add_object(master_path, f"Master{master.master_id}",
                                    "WMasterDeviceType", cell_obj,
                                    RefType.HAS_COMPONENT)
            master_diag = add_object(f"{master_path}/Diagnostics", "Diagnostics",
                                     "FolderType", master_obj, RefType.HAS_COMPONENT)
            cycle_var = add_variable(master_diag, "CycleIndex", DataType.UINT32,
                                     Access.READ_ONLY, static(0))
            master_connected = add_variable(master_diag, "ConnectedNodes",
                                            DataType.UINT32, Access.READ_ONLY,
                                            static(len(master.nodes)))
            node_ids = []
            for node in master.nodes:
                k = len(node.rods)
                node_path = f"{master_path}/Node{node.node_id}"
                node_obj = add_object(node_path, f"Node{node.node_id}",
                                      "SensorNodeDeviceType", master_obj,
                                      RefType.HAS_COMPONENT)
                process = add_object(f"{node_path}/ProcessData", "ProcessData",
                                     "FolderType", node_obj, RefType.HAS_COMPONENT)
                calibration = add_object(f"{node_path}/Calibration", "Calibration",
                                         "FolderType", node_obj, RefType.HAS_COMPONENT)
                diagnostics = add_object(f"{node_path}/Diagnostics", "Diagnostics",
                                         "FolderType", node_obj, RefType.HAS_COMPONENT)
                accel = tuple(
                    add_variable(process, f"Acceleration{i}", DataType.FLOAT32_VEC3,
                                 Access.READ_ONLY, no_data())
                    for i in range(k + 1)
                )
                distance = tuple(
                    add_variable(process, f"Distance{i}", DataType.FLOAT32,
                                 Access.READ_ONLY, no_data())
                    for i in range(1, k + 1)
                )
                bias = tuple(
                    add_variable(calibration, f"AccelBias{i}", DataType.FLOAT32_VEC3,
                                 Access.READ_WRITE, static((0.0, 0.0, 0.0)))
                    for i in range(k + 1)
                )
                scale = tuple(
                    add_variable(calibration, f"AccelScale{i}", DataType.FLOAT32_VEC3,
                                 Access.READ_WRITE, static((1.0, 1.0, 1.0)),
                                 limits=SCALE_RANGE)
                    for i in range(k + 1)
                )
                offset = tuple(
                    add_variable(calibration, f"DistanceOffset{i}", DataType.FLOAT32,
                                 Access.READ_WRITE, static(0.0))
                    for i in range(1, k + 1)
                )
                rssi = add_variable(diagnostics, "Rssi", DataType.FLOAT32,
                                    Access.READ_ONLY, static(node.link.rssi_base_dbm))
                lost = add_variable(diagnostics, "LostFrames", DataType.UINT32,
                                    Access.READ_ONLY, static(0))
                retrans = add_variable(diagnostics, "Retransmissions",
                                       DataType.UINT32, Access.READ_ONLY, static(0))
                port = add_variable(diagnostics, "PortStatus", DataType.ENUM,
                                    Access.READ_ONLY, static("OPERATE"))
                methods = {}
                for method_name in ("Calibrate", "ResetCounters"):
                    key = space._add(ModelNode(
                        NodeId(INSTANCE_NAMESPACE, f"{node_path}/{method_name}"),
                        NodeClass.METHOD, method_name))
                    space._link(node_obj, RefType.HAS_COMPONENT, key)
                    space._methods[key] = (method_name, node.node_id)
                    methods[method_name] = key
                space.bindings[node.node_id] = NodeBinding(
                    node_id=node.node_id, object_id=node_obj,
                    master_id=master.master_id, cell_id=cell.cell_id,
                    rod_count=k, accel=accel, distance=distance, bias=bias,
                    scale=scale, offset=offset, rssi=rssi, lost_frames=lost,
                    retransmissions=retrans, port_status=port,
                    calibrate_method=methods["Calibrate"],
                    reset_method=methods["ResetCounters"],
                )
                node_ids.append(node.node_id)
            space.master_bindings[master.master_id] = MasterBinding(
                master_id=master.master_id, object_id=master_obj,
                cycle_index=cycle_var, connected_nodes=master_connected,
                node_ids=tuple(node_ids),
            )
            master_ids.append(master.master_id)
        space.cell_bindings[cell.cell_id] = CellBinding(
            cell_id=cell.cell_id, object_id=cell_obj,
            connected_nodes=cell_connected, master_ids=tuple(master_ids),
        )
    return space


def dump_model(space: AddressSpace) -> str:
    """Canonical JSON of the model structure, stable byte for byte.

    Live values and timestamps are excluded; two builds over the same
    topology produce identical output, which backs the golden-file check.
    """
    nodes = []
    for key in sorted(space.nodes):
        node = space.nodes[key]
        entry = {
            "node_id": key,
            "node_class": node.node_class.value,
            "browse_name": node.browse_name,
        }
        if node.type_definition is not None:
            entry["type_definition"] = str(node.type_definition)
        if node.data_type is not None:
            entry["data_type"] = node.data_type.value
        if node.access is not None:
            entry["access"] = node.access.value
        if node.limits is not None:
            entry["limits"] = list(node.limits)
        nodes.append(entry)
    references = sorted(
        (parent, ref.value, child)
        for parent, edges in space._children.items()
        for ref, child in edges
    )
    return json.dumps(
        {"nodes": nodes,
         "references": [{"source": s, "reference_type": r, "target": t}
                        for s, r, t in references]},
        indent=2, sort_keys=True) + "\n"
