"""In-memory BPMN 2.0 model with XML (de)serialization.

Only the constructs the workflow IR can express are modelled: start/end
events, tasks, user tasks, looping sub-processes, exclusive gateways,
sequence flows, text annotations and their associations, plus the diagram
interchange (DI) geometry needed to render them.  Everything else raises
:class:`~flowgen.errors.UnsupportedElement` on parse.
"""

from __future__ import annotations

import enum
import re
import xml.etree.ElementTree as ET
from collections.abc import Iterator
from dataclasses import dataclass, field, replace

from . import __version__
from .errors import ParseError, UnsupportedElement, ValidationError

BPMN_NS = "http://www.omg.org/spec/BPMN/20100524/MODEL"
BPMNDI_NS = "http://www.omg.org/spec/BPMN/20100524/DI"
DC_NS = "http://www.omg.org/spec/DD/20100524/DC"
DI_NS = "http://www.omg.org/spec/DD/20100524/DI"
XSI_NS = "http://www.w3.org/2001/XMLSchema-instance"

NAMESPACES = {"bpmn": BPMN_NS, "bpmndi": BPMNDI_NS, "dc": DC_NS, "di": DI_NS, "xsi": XSI_NS}
for _prefix, _uri in NAMESPACES.items():
    ET.register_namespace(_prefix, _uri)

EXPORTER = "flowgen"


class NodeKind(str, enum.Enum):
    START_EVENT = "startEvent"
    END_EVENT = "endEvent"
    TASK = "task"
    USER_TASK = "userTask"
    SUB_PROCESS = "subProcess"
    EXCLUSIVE_GATEWAY = "exclusiveGateway"


class LoopKind(str, enum.Enum):
    MULTI_INSTANCE_SEQUENTIAL = "multiInstanceSequential"  # for-loops
    STANDARD = "standardLoop"  # while-loops


@dataclass(frozen=True)
class SequenceFlow:
    id: str
    source: str
    target: str
    condition: str | None = None
    name: str | None = None


@dataclass(frozen=True)
class TextAnnotation:
    id: str
    text: str


@dataclass(frozen=True)
class Association:
    id: str
    source: str  # flow node
    target: str  # annotation


@dataclass(frozen=True)
class Scope:
    """Nodes and connections of a process or of one sub-process."""

    nodes: tuple[FlowNode, ...] = ()
    flows: tuple[SequenceFlow, ...] = ()
    annotations: tuple[TextAnnotation, ...] = ()
    associations: tuple[Association, ...] = ()

    def node(self, node_id: str) -> FlowNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def of_kind(self, kind: NodeKind) -> list[FlowNode]:
        return [n for n in self.nodes if n.kind is kind]

    def outgoing(self, node_id: str) -> list[SequenceFlow]:
        return [f for f in self.flows if f.source == node_id]

    def incoming(self, node_id: str) -> list[SequenceFlow]:
        return [f for f in self.flows if f.target == node_id]


@dataclass(frozen=True)
class FlowNode:
    id: str
    kind: NodeKind
    name: str | None = None
    loop: LoopKind | None = None
    children: Scope | None = None  # sub-process content
    direction: str | None = None  # gateways: "split" or "join"
    default_flow: str | None = None  # gateways: id of the default outgoing flow


@dataclass(frozen=True)
class Bounds:
    x: float
    y: float
    width: float
    height: float

    @property
    def right(self) -> float:
        return self.x + self.width

    @property
    def bottom(self) -> float:
        return self.y + self.height

    @property
    def cx(self) -> float:
        return self.x + self.width / 2

    @property
    def cy(self) -> float:
        return self.y + self.height / 2

    def moved(self, dx: float, dy: float) -> Bounds:
        return Bounds(self.x + dx, self.y + dy, self.width, self.height)

    def overlaps(self, other: Bounds) -> bool:
        return (
            self.x < other.right and other.x < self.right
            and self.y < other.bottom and other.y < self.bottom
        )

    def touches(self, x: float, y: float, tol: float = 0.5) -> bool:
        """True when the point lies on the rectangle's border."""
        inside_x = self.x - tol <= x <= self.right + tol
        inside_y = self.y - tol <= y <= self.bottom + tol
        on_vertical = abs(x - self.x) <= tol or abs(x - self.right) <= tol
        on_horizontal = abs(y - self.y) <= tol or abs(y - self.bottom) <= tol
        return inside_x and inside_y and (on_vertical or on_horizontal)


@dataclass(frozen=True)
class Shape:
    bounds: Bounds
    di_id: str | None = None
    label: Bounds | None = None
    expanded: bool | None = None

    def moved(self, dx: float, dy: float) -> Shape:
        label = self.label.moved(dx, dy) if self.label else None
        return replace(self, bounds=self.bounds.moved(dx, dy), label=label)


@dataclass(frozen=True)
class Edge:
    waypoints: tuple[tuple[float, float], ...]
    di_id: str | None = None

    def moved(self, dx: float, dy: float) -> Edge:
        return replace(self, waypoints=tuple((x + dx, y + dy) for x, y in self.waypoints))


@dataclass(frozen=True)
class DiagramLayout:
    """DI geometry keyed by the BPMN element id it renders."""

    shapes: dict[str, Shape] = field(default_factory=dict)
    edges: dict[str, Edge] = field(default_factory=dict)
    diagram_id: str = "BPMNDiagram_1"
    plane_id: str = "BPMNPlane_1"


@dataclass(frozen=True)
class BpmnDocument:
    process_id: str
    scope: Scope
    diagram: DiagramLayout = field(default_factory=DiagramLayout)
    executable: bool = False
    definitions_id: str = "Definitions_1"

    def scopes(self) -> Iterator[tuple[Scope, FlowNode | None]]:
        """Every scope with its owning sub-process (``None`` for the process)."""
        stack: list[tuple[Scope, FlowNode | None]] = [(self.scope, None)]
        while stack:
            scope, owner = stack.pop(0)
            yield scope, owner
            for n in scope.nodes:
                if n.children is not None:
                    stack.append((n.children, n))

    def nodes(self) -> Iterator[FlowNode]:
        for scope, _ in self.scopes():
            yield from scope.nodes

    def flows(self) -> Iterator[SequenceFlow]:
        for scope, _ in self.scopes():
            yield from scope.flows

    def annotations(self) -> Iterator[TextAnnotation]:
        for scope, _ in self.scopes():
            yield from scope.annotations

    def associations(self) -> Iterator[Association]:
        for scope, _ in self.scopes():
            yield from scope.associations

    def node(self, node_id: str) -> FlowNode:
        for n in self.nodes():
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def annotation_texts(self, node_id: str) -> list[str]:
        texts = {a.id: a.text for a in self.annotations()}
        return [texts[a.target] for a in self.associations() if a.source == node_id and a.target in texts]


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate(doc: BpmnDocument) -> None:
    """Raise :class:`ValidationError` unless *doc* satisfies the model invariants."""
    seen: set[str] = {doc.process_id}

    def claim(element_id: str) -> None:
        if element_id in seen:
            raise ValidationError(f"duplicate id {element_id!r}")
        seen.add(element_id)

    for scope, owner in doc.scopes():
        where = f"sub-process {owner.id!r}" if owner else f"process {doc.process_id!r}"
        for kind in (NodeKind.START_EVENT, NodeKind.END_EVENT):
            count = len(scope.of_kind(kind))
            if count != 1:
                raise ValidationError(f"{where} has {count} {kind.value} elements, expected 1")
        ids = {n.id for n in scope.nodes}
        for n in scope.nodes:
            claim(n.id)
            if (n.kind is NodeKind.SUB_PROCESS) != (n.children is not None):
                raise ValidationError(f"node {n.id!r}: only sub-processes have children")
            if n.loop is not None and n.kind is not NodeKind.SUB_PROCESS:
                raise ValidationError(f"node {n.id!r}: loop characteristics on a {n.kind.value}")
        for f in scope.flows:
            claim(f.id)
            if f.source not in ids or f.target not in ids:
                raise ValidationError(f"flow {f.id!r} leaves {where}")
            if f.condition is not None:
                src = scope.node(f.source)
                if src.kind is not NodeKind.EXCLUSIVE_GATEWAY or len(scope.outgoing(src.id)) < 2:
                    raise ValidationError(f"flow {f.id!r}: conditions only on gateway splits")
        for a in scope.annotations:
            claim(a.id)
        for a in scope.associations:
            claim(a.id)
    annotation_ids = {a.id for a in doc.annotations()}
    node_ids = {n.id for n in doc.nodes()}
    for a in doc.associations():
        if a.source not in node_ids or a.target not in annotation_ids:
            raise ValidationError(f"association {a.id!r} must link a node to an annotation")
    for n in doc.nodes():
        if n.loop is not None and len(doc.annotation_texts(n.id)) != 1:
            raise ValidationError(f"loop sub-process {n.id!r} needs exactly one annotation")
    for element_id in list(node_ids) + list(annotation_ids):
        if element_id not in doc.diagram.shapes:
            raise ValidationError(f"no diagram shape for {element_id!r}")
    for connection in list(doc.flows()) + list(doc.associations()):
        edge = doc.diagram.edges.get(connection.id)
        if edge is None or len(edge.waypoints) < 2:
            raise ValidationError(f"diagram edge for {connection.id!r} needs two waypoints")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _q(ns: str, tag: str) -> str:
    return f"{{{ns}}}{tag}"


def _num(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def _emit_scope(parent: ET.Element, scope: Scope) -> None:
    for n in scope.nodes:
        el = ET.SubElement(parent, _q(BPMN_NS, n.kind.value), {"id": n.id})
        if n.name is not None:
            el.set("name", n.name)
        if n.kind is NodeKind.EXCLUSIVE_GATEWAY:
            if n.direction:
                el.set("gatewayDirection", "Diverging" if n.direction == "split" else "Converging")
            if n.default_flow:
                el.set("default", n.default_flow)
        for f in scope.incoming(n.id):
            ET.SubElement(el, _q(BPMN_NS, "incoming")).text = f.id
        for f in scope.outgoing(n.id):
            ET.SubElement(el, _q(BPMN_NS, "outgoing")).text = f.id
        if n.loop is LoopKind.MULTI_INSTANCE_SEQUENTIAL:
            ET.SubElement(el, _q(BPMN_NS, "multiInstanceLoopCharacteristics"), {"isSequential": "true"})
        elif n.loop is LoopKind.STANDARD:
            ET.SubElement(el, _q(BPMN_NS, "standardLoopCharacteristics"))
        if n.children is not None:
            _emit_scope(el, n.children)
    for f in scope.flows:
        el = ET.SubElement(
            parent, _q(BPMN_NS, "sequenceFlow"), {"id": f.id, "sourceRef": f.source, "targetRef": f.target}
        )
        if f.name is not None:
            el.set("name", f.name)
        if f.condition is not None:
            cond = ET.SubElement(el, _q(BPMN_NS, "conditionExpression"), {_q(XSI_NS, "type"): "bpmn:tFormalExpression"})
            cond.text = f.condition
    for a in scope.annotations:
        el = ET.SubElement(parent, _q(BPMN_NS, "textAnnotation"), {"id": a.id})
        ET.SubElement(el, _q(BPMN_NS, "text")).text = a.text
    for a in scope.associations:
        ET.SubElement(
            parent,
            _q(BPMN_NS, "association"),
            {"id": a.id, "associationDirection": "None", "sourceRef": a.source, "targetRef": a.target},
        )


def _bounds_el(parent: ET.Element, b: Bounds) -> None:
    ET.SubElement(
        parent,
        _q(DC_NS, "Bounds"),
        {"x": _num(b.x), "y": _num(b.y), "width": _num(b.width), "height": _num(b.height)},
    )


def serialize_bpmn(doc: BpmnDocument) -> str:
    """Render *doc* as namespaced BPMN 2.0 XML (process section, then DI)."""
    validate(doc)
    root = ET.Element(
        _q(BPMN_NS, "definitions"),
        {
            "id": doc.definitions_id,
            "targetNamespace": "http://bpmn.io/schema/bpmn",
            "exporter": EXPORTER,
            "exporterVersion": __version__,
        },
    )
    process = ET.SubElement(
        root, _q(BPMN_NS, "process"), {"id": doc.process_id, "isExecutable": str(doc.executable).lower()}
    )
    _emit_scope(process, doc.scope)
    diagram = ET.SubElement(root, _q(BPMNDI_NS, "BPMNDiagram"), {"id": doc.diagram.diagram_id})
    plane = ET.SubElement(
        diagram, _q(BPMNDI_NS, "BPMNPlane"), {"id": doc.diagram.plane_id, "bpmnElement": doc.process_id}
    )
    for element_id, shape in doc.diagram.shapes.items():
        attrs = {"id": shape.di_id or f"{element_id}_di", "bpmnElement": element_id}
        if shape.expanded is not None:
            attrs["isExpanded"] = str(shape.expanded).lower()
        el = ET.SubElement(plane, _q(BPMNDI_NS, "BPMNShape"), attrs)
        _bounds_el(el, shape.bounds)
        if shape.label is not None:
            _bounds_el(ET.SubElement(el, _q(BPMNDI_NS, "BPMNLabel")), shape.label)
    for element_id, edge in doc.diagram.edges.items():
        el = ET.SubElement(
            plane, _q(BPMNDI_NS, "BPMNEdge"), {"id": edge.di_id or f"{element_id}_di", "bpmnElement": element_id}
        )
        for x, y in edge.waypoints:
            ET.SubElement(el, _q(DI_NS, "waypoint"), {"x": _num(x), "y": _num(y)})
    ET.indent(root, space="  ")
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n"


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_IGNORED_CHILDREN = {"incoming", "outgoing", "documentation", "extensionElements"}
_DEFAULT_SIZES = {
    NodeKind.START_EVENT: (36, 36),
    NodeKind.END_EVENT: (36, 36),
    NodeKind.EXCLUSIVE_GATEWAY: (50, 50),
    NodeKind.SUB_PROCESS: (350, 200),
}


def _split(tag: str) -> tuple[str | None, str]:
    if tag.startswith("{"):
        ns, _, local = tag[1:].partition("}")
        return ns, local
    return None, tag


def _is_bpmn(el: ET.Element) -> bool:
    ns, _ = _split(el.tag)
    return ns in (BPMN_NS, None)


def _local(el: ET.Element) -> str:
    return _split(el.tag)[1]


def _attr(el: ET.Element, name: str, path: str) -> str:
    value = el.get(name)
    if value is None:
        raise ParseError(f"<{_local(el)}> is missing the {name!r} attribute", path)
    return value


class _ScopeReader:
    def __init__(self, path: str):
        self.path = path

    def read(self, el: ET.Element) -> Scope:
        nodes: list[FlowNode] = []
        flows: list[SequenceFlow] = []
        annotations: list[TextAnnotation] = []
        associations: list[Association] = []
        for child in el:
            if not _is_bpmn(child):
                continue  # vendor extension
            tag = _local(child)
            cid = child.get("id", "?")
            path = f"{self.path}/{tag}[@id={cid!r}]"
            if tag in _IGNORED_CHILDREN or tag in ("laneSet", "multiInstanceLoopCharacteristics", "standardLoopCharacteristics"):
                continue
            if tag == "sequenceFlow":
                flows.append(self.read_flow(child, path))
            elif tag == "textAnnotation":
                text_el = next((c for c in child if _is_bpmn(c) and _local(c) == "text"), None)
                text = re.sub(r"\s+", " ", (text_el.text or "") if text_el is not None else "").strip()
                annotations.append(TextAnnotation(_attr(child, "id", path), text))
            elif tag == "association":
                src, tgt = _attr(child, "sourceRef", path), _attr(child, "targetRef", path)
                associations.append(Association(_attr(child, "id", path), src, tgt))
            elif tag in {k.value for k in NodeKind}:
                nodes.append(self.read_node(child, NodeKind(tag), path))
            else:
                raise UnsupportedElement(tag, path)
        # associations may be drawn in either direction
        ann_ids = {a.id for a in annotations}
        associations = [
            Association(a.id, a.target, a.source) if a.source in ann_ids and a.target not in ann_ids else a
            for a in associations
        ]
        return Scope(tuple(nodes), tuple(flows), tuple(annotations), tuple(associations))

    def read_flow(self, el: ET.Element, path: str) -> SequenceFlow:
        condition = None
        for c in el:
            if not _is_bpmn(c) or _local(c) in _IGNORED_CHILDREN:
                continue
            if _local(c) != "conditionExpression":
                raise UnsupportedElement(_local(c), path)
            condition = re.sub(r"\s+", " ", c.text or "").strip() or None
        return SequenceFlow(
            _attr(el, "id", path), _attr(el, "sourceRef", path), _attr(el, "targetRef", path), condition, el.get("name")
        )

    def read_node(self, el: ET.Element, kind: NodeKind, path: str) -> FlowNode:
        node_id = _attr(el, "id", path)
        loop = None
        for c in el:
            if not _is_bpmn(c):
                continue
            tag = _local(c)
            if tag in _IGNORED_CHILDREN:
                continue
            if kind is NodeKind.SUB_PROCESS and tag == "multiInstanceLoopCharacteristics":
                if c.get("isSequential", "false").lower() != "true":
                    raise UnsupportedElement("multiInstanceLoopCharacteristics isSequential=false", path)
                loop = LoopKind.MULTI_INSTANCE_SEQUENTIAL
            elif kind is NodeKind.SUB_PROCESS and tag == "standardLoopCharacteristics":
                loop = LoopKind.STANDARD
            elif kind is not NodeKind.SUB_PROCESS:
                raise UnsupportedElement(tag, f"{path}/{tag}")
        name = el.get("name")
        if name is not None:
            name = name.strip()
        children = _ScopeReader(path).read(el) if kind is NodeKind.SUB_PROCESS else None
        direction = None
        if kind is NodeKind.EXCLUSIVE_GATEWAY:
            direction = {"diverging": "split", "converging": "join"}.get(el.get("gatewayDirection", "").lower())
        return FlowNode(node_id, kind, name, loop, children, direction, el.get("default"))


def _infer_gateways(scope: Scope) -> Scope:
    nodes = []
    for n in scope.nodes:
        if n.kind is NodeKind.EXCLUSIVE_GATEWAY and n.direction is None:
            split = len(scope.outgoing(n.id)) > 1 or len(scope.incoming(n.id)) <= 1
            n = replace(n, direction="split" if split else "join")
        if n.children is not None:
            n = replace(n, children=_infer_gateways(n.children))
        nodes.append(n)
    return replace(scope, nodes=tuple(nodes))


def _read_bounds(el: ET.Element | None, path: str) -> Bounds | None:
    if el is None:
        return None
    try:
        return Bounds(*(float(el.get(k, "nan")) for k in ("x", "y", "width", "height")))
    except ValueError as exc:
        raise ParseError(f"bad bounds: {exc}", path) from exc


def _read_diagram(root: ET.Element, process_id: str) -> DiagramLayout:
    diagram = next((c for c in root if _local(c) == "BPMNDiagram"), None)
    if diagram is None:
        return DiagramLayout()
    plane = next((c for c in diagram if _local(c) == "BPMNPlane"), None)
    shapes: dict[str, Shape] = {}
    edges: dict[str, Edge] = {}
    for el in plane if plane is not None else ():
        tag = _local(el)
        ref = el.get("bpmnElement")
        path = f"BPMNDiagram/BPMNPlane/{tag}[@id={el.get('id')!r}]"
        if ref is None:
            continue
        if tag == "BPMNShape":
            bounds = _read_bounds(next((c for c in el if _local(c) == "Bounds"), None), path)
            if bounds is None:
                continue
            label_el = next((c for c in el if _local(c) == "BPMNLabel"), None)
            label = None
            if label_el is not None:
                label = _read_bounds(next((c for c in label_el if _local(c) == "Bounds"), None), path)
            expanded = el.get("isExpanded")
            shapes[ref] = Shape(bounds, el.get("id"), label, None if expanded is None else expanded == "true")
        elif tag == "BPMNEdge":
            points = tuple(
                (float(c.get("x", "0")), float(c.get("y", "0"))) for c in el if _local(c) == "waypoint"
            )
            edges[ref] = Edge(points, el.get("id"))
    return DiagramLayout(shapes, edges, diagram.get("id", "BPMNDiagram_1"), (plane.get("id") if plane is not None else None) or "BPMNPlane_1")


def _complete_diagram(doc: BpmnDocument) -> BpmnDocument:
    """Drop DI for unknown elements and regenerate whatever is missing."""
    known_shapes = {n.id: n for n in doc.nodes()}
    known_shapes.update({a.id: a for a in doc.annotations()})
    shapes = {k: v for k, v in doc.diagram.shapes.items() if k in known_shapes}
    for i, (element_id, element) in enumerate(known_shapes.items()):
        if element_id not in shapes:
            kind = getattr(element, "kind", None)
            w, h = _DEFAULT_SIZES.get(kind, (100, 80))
            shapes[element_id] = Shape(Bounds(150 + 150 * i, 80, w, h), expanded=True if kind is NodeKind.SUB_PROCESS else None)
    connections = {f.id: (f.source, f.target) for f in doc.flows()}
    connections.update({a.id: (a.source, a.target) for a in doc.associations()})
    edges = {k: v for k, v in doc.diagram.edges.items() if k in connections and len(v.waypoints) >= 2}
    for conn_id, (src, tgt) in connections.items():
        if conn_id not in edges and src in shapes and tgt in shapes:
            a, b = shapes[src].bounds, shapes[tgt].bounds
            edges[conn_id] = Edge(((a.right, a.cy), (b.x, b.cy)))
    return replace(doc, diagram=replace(doc.diagram, shapes=shapes, edges=edges))


def parse_bpmn(xml_text: str | bytes) -> BpmnDocument:
    """Read BPMN 2.0 XML, prefixed (``bpmn:``) or default-namespace form.

    Vendor attributes and elements in foreign namespaces are ignored; BPMN
    constructs outside the supported vocabulary raise
    :class:`UnsupportedElement`.
    """
    if isinstance(xml_text, str):
        # ElementTree rejects str input that carries an encoding declaration
        xml_text = xml_text.encode("utf-8")
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise ParseError(f"malformed XML: {exc}", f"line {line}, column {col}") from exc
    if _local(root) != "definitions" or not _is_bpmn(root):
        raise ParseError(f"root element is <{_local(root)}>, expected <definitions>", _local(root))
    processes = [c for c in root if _is_bpmn(c) and _local(c) == "process"]
    if not processes:
        raise ParseError("document has no <process>", "definitions")
    if len(processes) > 1:
        raise UnsupportedElement("process (multiple processes)", "definitions")
    for c in root:
        if _is_bpmn(c) and _local(c) not in ("process", "collaboration", "BPMNDiagram", "documentation", "extensionElements"):
            raise UnsupportedElement(_local(c), f"definitions/{_local(c)}")
    proc = processes[0]
    process_id = _attr(proc, "id", "definitions/process")
    scope = _ScopeReader(f"definitions/process[@id={process_id!r}]").read(proc)
    doc = BpmnDocument(
        process_id=process_id,
        scope=_infer_gateways(scope),
        diagram=_read_diagram(root, process_id),
        executable=proc.get("isExecutable", "false").lower() == "true",
        definitions_id=root.get("id", "Definitions_1"),
    )
    return _complete_diagram(doc)
