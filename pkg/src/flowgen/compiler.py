"""Deterministic IR -> BPMN compiler with left-to-right layout.

Mapping:

* ``x = Activity()`` / ``Activity()``      -> ``task`` named ``Activity``
* ``user_task("text")``                    -> ``userTask`` named ``text``
* ``for v in xs:``                         -> sequential multi-instance
  ``subProcess`` annotated ``for v in xs``
* ``while cond:``                          -> ``subProcess`` with standard loop
  characteristics annotated ``while cond``
* ``if cond: ... else: ...``               -> exclusive gateway split/join; the
  condition sits on the "then" flow, the else flow is the gateway default

The same item tree and layout engine serve :func:`compile_ir` and the
incremental patcher in :mod:`flowgen.diff`, which passes the base document as
``prior`` so untouched elements keep their ids and geometry.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace

import networkx as nx

from .bpmn import (
    Association,
    BpmnDocument,
    Bounds,
    DiagramLayout,
    Edge,
    FlowNode,
    LoopKind,
    NodeKind,
    Scope,
    SequenceFlow,
    Shape,
    TextAnnotation,
)
from .ir import Assign, ExprCall, For, If, Program, Stmt, While, collapse_whitespace

TASK_SIZE = (100, 80)
EVENT_SIZE = 36
GATEWAY_SIZE = 50
GAP = 80
BRANCH_GAP = 40
PADDING = 30
ANNOTATION_SIZE = (100, 40)
ANNOTATION_GAP = 30
ORIGIN = (152, 80)

_ID_PREFIX = {
    NodeKind.START_EVENT: "startEvent",
    NodeKind.END_EVENT: "endEvent",
    NodeKind.TASK: "task",
    NodeKind.USER_TASK: "userTask",
    NodeKind.SUB_PROCESS: "subProcess",
    NodeKind.EXCLUSIVE_GATEWAY: "gateway",
}


class IdAllocator:
    """Per-kind counters (``task_1``, ``flow_2``...) that skip ids already taken."""

    def __init__(self, taken: set[str] | None = None):
        self.taken = set(taken or ())
        self.counters: dict[str, int] = defaultdict(int)

    def next(self, prefix: str) -> str:
        while True:
            self.counters[prefix] += 1
            candidate = f"{prefix}_{self.counters[prefix]}"
            if candidate not in self.taken:
                self.taken.add(candidate)
                return candidate


# ---------------------------------------------------------------------------
# Item tree: one statement together with the BPMN elements that render it
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Item:
    stmt: Stmt  # compound statements carry empty bodies; children live below
    node_id: str  # task, user task, sub-process, or split gateway
    join_id: str | None = None
    start_id: str | None = None
    end_id: str | None = None
    annotation_id: str | None = None
    association_id: str | None = None
    body: list[Item] = field(default_factory=list)
    else_body: list[Item] | None = None
    dirty: bool = False  # child lists were edited structurally
    moved: bool = False  # item now lives in a different scope than before

    @property
    def exit_id(self) -> str:
        return self.join_id or self.node_id

    def element_ids(self) -> list[str]:
        own = [self.node_id, self.join_id, self.start_id, self.end_id, self.annotation_id, self.association_id]
        ids = [i for i in own if i]
        for child in self.body + (self.else_body or []):
            ids.extend(child.element_ids())
        return ids

    def clean(self) -> bool:
        return not self.dirty and not self.moved and all(c.clean() for c in self.body + (self.else_body or []))


@dataclass(eq=False)
class Root:
    start_id: str
    end_id: str
    items: list[Item]


def header_only(stmt: Stmt) -> Stmt:
    if isinstance(stmt, If):
        return If(stmt.condition, (), None)
    if isinstance(stmt, For):
        return For(stmt.loop_var, stmt.iterable, ())
    if isinstance(stmt, While):
        return While(stmt.condition, ())
    return stmt


def make_items(statements, alloc: IdAllocator) -> list[Item]:
    """Item tree for fresh statements, ids allocated in preorder."""
    items = []
    for stmt in statements:
        if isinstance(stmt, (Assign, ExprCall)):
            kind = NodeKind.USER_TASK if stmt.call.is_user_task else NodeKind.TASK
            items.append(Item(stmt, alloc.next(_ID_PREFIX[kind])))
        elif isinstance(stmt, (For, While)):
            item = Item(header_only(stmt), alloc.next("subProcess"))
            item.start_id = alloc.next("startEvent")
            item.body = make_items(stmt.body, alloc)
            item.end_id = alloc.next("endEvent")
            item.annotation_id = alloc.next("annotation")
            item.association_id = alloc.next("association")
            items.append(item)
        elif isinstance(stmt, If):
            item = Item(header_only(stmt), alloc.next("gateway"))
            item.body = make_items(stmt.then_body, alloc)
            if stmt.else_body is not None:
                item.else_body = make_items(stmt.else_body, alloc)
            item.join_id = alloc.next("gateway")
            items.append(item)
    return items


def items_to_statements(items: list[Item]) -> tuple[Stmt, ...]:
    out: list[Stmt] = []
    for item in items:
        stmt = item.stmt
        if isinstance(stmt, If):
            other = items_to_statements(item.else_body) if item.else_body else None
            stmt = If(stmt.condition, items_to_statements(item.body), other)
        elif isinstance(stmt, For):
            stmt = For(stmt.loop_var, stmt.iterable, items_to_statements(item.body))
        elif isinstance(stmt, While):
            stmt = While(stmt.condition, items_to_statements(item.body))
        out.append(stmt)
    return tuple(out)


def program_of(root: Root) -> Program:
    return Program(items_to_statements(root.items))


# ---------------------------------------------------------------------------
# Process model emission
# ---------------------------------------------------------------------------


class _Emitter:
    def __init__(self, alloc: IdAllocator, prior: BpmnDocument | None):
        self.alloc = alloc
        self.prior_nodes = {n.id: n for n in prior.nodes()} if prior else {}
        self.prior_flows = {(f.source, f.target): f for f in prior.flows()} if prior else {}
        self.used_flows: set[str] = set()

    def flow(self, source: str, target: str, condition: str | None = None) -> SequenceFlow:
        old = self.prior_flows.get((source, target))
        if old is not None and old.id not in self.used_flows:
            flow_id, name = old.id, old.name
        else:
            flow_id, name = self.alloc.next("flow"), None
        self.used_flows.add(flow_id)
        return SequenceFlow(flow_id, source, target, condition, name)

    def named(self, node_id: str, kind: NodeKind, **kw) -> FlowNode:
        old = self.prior_nodes.get(node_id)
        name = kw.pop("name", old.name if old is not None and old.kind is kind else None)
        return FlowNode(node_id, kind, name, **kw)

    def scope(self, start_id: str, end_id: str, items: list[Item]) -> Scope:
        nodes: list[FlowNode] = [self.named(start_id, NodeKind.START_EVENT)]
        flows: list[SequenceFlow] = []
        annotations: list[TextAnnotation] = []
        associations: list[Association] = []
        last = self.chain(items, start_id, nodes, flows, annotations, associations)
        flows.append(self.flow(last, end_id))
        nodes.append(self.named(end_id, NodeKind.END_EVENT))
        return Scope(tuple(nodes), tuple(flows), tuple(annotations), tuple(associations))

    def chain(self, items, prev, nodes, flows, annotations, associations, condition=None, first=None) -> str:
        """Emit *items* in sequence after node *prev*; returns the exit node id.

        ``first`` receives the flow entering the first item (used to mark the
        gateway default).
        """
        for i, item in enumerate(items):
            entering = self.flow(prev, item.node_id, condition if i == 0 else None)
            flows.append(entering)
            if i == 0 and first is not None:
                first.append(entering)
            self.item(item, nodes, flows, annotations, associations)
            prev = item.exit_id
        return prev

    def item(self, item: Item, nodes, flows, annotations, associations) -> None:
        stmt = item.stmt
        if isinstance(stmt, (Assign, ExprCall)):
            if stmt.call.is_user_task:
                nodes.append(self.named(item.node_id, NodeKind.USER_TASK, name=stmt.call.user_task_text))
            else:
                nodes.append(self.named(item.node_id, NodeKind.TASK, name=stmt.call.callee))
        elif isinstance(stmt, (For, While)):
            loop = LoopKind.MULTI_INSTANCE_SEQUENTIAL if isinstance(stmt, For) else LoopKind.STANDARD
            inner = self.scope(item.start_id, item.end_id, item.body)
            nodes.append(self.named(item.node_id, NodeKind.SUB_PROCESS, loop=loop, children=inner))
            annotations.append(TextAnnotation(item.annotation_id, collapse_whitespace(stmt.header)))
            associations.append(Association(item.association_id, item.node_id, item.annotation_id))
        elif isinstance(stmt, If):
            at = len(nodes)
            then_exit = self.chain(item.body, item.node_id, nodes, flows, annotations, associations, stmt.condition)
            flows.append(self.flow(then_exit, item.join_id))
            default: list[SequenceFlow] = []
            if item.else_body:
                else_exit = self.chain(item.else_body, item.node_id, nodes, flows, annotations, associations, first=default)
                flows.append(self.flow(else_exit, item.join_id))
            else:
                default.append(self.flow(item.node_id, item.join_id))
                flows.append(default[0])
            split = self.named(item.node_id, NodeKind.EXCLUSIVE_GATEWAY, direction="split", default_flow=default[0].id)
            nodes.insert(at, split)
            nodes.append(self.named(item.join_id, NodeKind.EXCLUSIVE_GATEWAY, direction="join"))


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------


def _union(boxes: list[Bounds]) -> Bounds:
    x0 = min(b.x for b in boxes)
    y0 = min(b.y for b in boxes)
    x1 = max(b.right for b in boxes)
    y1 = max(b.bottom for b in boxes)
    return Bounds(x0, y0, x1 - x0, y1 - y0)


def _centered(x: float, cy: float, w: float, h: float) -> Bounds:
    return Bounds(x, cy - h / 2, w, h)


class _Layout:
    """Places shapes left to right along a centre line per scope.

    With a prior document, existing clean blocks are translated rigidly,
    existing elements keep their vertical position, and the original gap to
    an unchanged predecessor is preserved.  New elements use the constants
    above.
    """

    def __init__(self, prior: BpmnDocument | None):
        self.prior = prior.diagram.shapes if prior else {}
        self.shapes: dict[str, Shape] = {}
        self.bypass: dict[str, float] = {}  # split gateway id -> y of the empty-else route
        self.base_pred: dict[str, str] = {}
        if prior is not None:
            for f in prior.flows():
                self.base_pred.setdefault(f.target, f.source)

    def _existing(self, element_id: str) -> Shape | None:
        return self.prior.get(element_id)

    def _put(self, element_id: str, bounds: Bounds, expanded: bool | None = None) -> Bounds:
        old = self.prior.get(element_id)
        if old is not None:
            self.shapes[element_id] = replace(
                old, bounds=bounds, label=old.label.moved(bounds.x - old.bounds.x, bounds.y - old.bounds.y) if old.label else None
            )
        else:
            self.shapes[element_id] = Shape(bounds, f"{element_id}_di", None, expanded)
        return bounds

    def _translate(self, ids: list[str], dx: float, dy: float) -> None:
        for element_id in ids:
            self.shapes[element_id] = self.prior[element_id].moved(dx, dy)

    def _gap(self, prev_id: str, entry_id: str, moved: bool) -> float:
        prev_old, entry_old = self._existing(prev_id), self._existing(entry_id)
        if not moved and prev_old and entry_old and self.base_pred.get(entry_id) == prev_id:
            gap = entry_old.bounds.x - prev_old.bounds.right
            if gap > 0:
                return gap
        return GAP

    # -- sequences -------------------------------------------------------

    def sequence(self, items: list[Item], prev_id: str, prev_right: float, cy: float) -> tuple[list[Bounds], str, float]:
        boxes: list[Bounds] = []
        for item in items:
            x = prev_right + self._gap(prev_id, item.node_id, item.moved)
            box, prev_right = self.item(item, x, cy)
            boxes.append(box)
            prev_id = item.exit_id
        return boxes, prev_id, prev_right

    def scope(self, start_id: str, end_id: str, items: list[Item], x: float, cy: float, keep_start: bool) -> Bounds:
        old = self._existing(start_id)
        if keep_start and old is not None:
            start = self._put(start_id, old.bounds.moved(x - old.bounds.x, 0))
            cy = start.cy
        else:
            start = self._put(start_id, _centered(x, cy, EVENT_SIZE, EVENT_SIZE))
        boxes, last, right = self.sequence(items, start_id, start.right, cy)
        end_x = right + self._gap(last, end_id, False)
        old_end = self._existing(end_id)
        if keep_start and old_end is not None:
            end = self._put(end_id, old_end.bounds.moved(end_x - old_end.bounds.x, 0))
        else:
            end = self._put(end_id, _centered(end_x, cy, EVENT_SIZE, EVENT_SIZE))
        return _union([start, end] + boxes)

    # -- single items ----------------------------------------------------

    def item(self, item: Item, x: float, cy: float) -> tuple[Bounds, float]:
        """Place *item* with its left edge at *x*; returns (bbox, exit right edge)."""
        old = self._existing(item.node_id)
        if old is not None and item.clean() and all(i in self.prior for i in item.element_ids()):
            dx = x - old.bounds.x
            ids = item.element_ids()
            self._translate(ids, dx, 0)
            exit_box = self.shapes[item.exit_id].bounds
            return _union([self.shapes[i].bounds for i in ids]), exit_box.right
        keep = old is not None and not item.moved
        stmt = item.stmt
        if isinstance(stmt, (For, While)):
            return self.loop(item, x, cy, old if keep else None)
        if isinstance(stmt, If):
            return self.conditional(item, x, cy, keep)
        if keep:
            box = self._put(item.node_id, Bounds(x, old.bounds.y, old.bounds.width, old.bounds.height))
        else:
            box = self._put(item.node_id, _centered(x, cy, *TASK_SIZE))
        return box, box.right

    def loop(self, item: Item, x: float, cy: float, old: Shape | None) -> tuple[Bounds, float]:
        old_start = self._existing(item.start_id) if old else None
        inner_x = x + (old_start.bounds.x - old.bounds.x if old and old_start else PADDING)
        inner = self.scope(item.start_id, item.end_id, item.body, inner_x, cy, keep_start=old is not None)
        if old is not None:
            old_end = self._existing(item.end_id)
            right_pad = old.bounds.right - old_end.bounds.right if old_end else PADDING
            top = min(old.bounds.y, inner.y - PADDING)
            bottom = max(old.bounds.bottom, inner.bottom + PADDING)
        else:
            right_pad, top, bottom = PADDING, inner.y - PADDING, inner.bottom + PADDING
        right = inner.right + max(right_pad, PADDING / 2)
        box = self._put(item.node_id, Bounds(x, top, right - x, bottom - top), expanded=True)
        old_note = self._existing(item.annotation_id)
        if old is not None and old_note is not None:
            note = old_note.bounds.moved(x - old.bounds.x, 0)
            self._put(item.annotation_id, note)
        else:
            w, h = ANNOTATION_SIZE
            note = self._put(item.annotation_id, Bounds(max(box.x, box.right - w - 10), box.y - ANNOTATION_GAP - h, w, h))
        return _union([box, note]), box.right

    def conditional(self, item: Item, x: float, cy: float, keep: bool) -> tuple[Bounds, float]:
        old = self._existing(item.node_id) if keep else None
        if old is not None:
            split = self._put(item.node_id, Bounds(x, old.bounds.y, GATEWAY_SIZE, GATEWAY_SIZE))
        else:
            split = self._put(item.node_id, _centered(x, cy, GATEWAY_SIZE, GATEWAY_SIZE))
        line = split.cy
        then_boxes, then_last, then_right = self.sequence(item.body, item.node_id, split.right, line)
        upper = _union([split] + then_boxes)
        boxes = [upper]
        right = then_right
        else_last = None
        if item.else_body:
            probe = _Layout(None)
            probe_boxes, _, _ = probe.sequence(item.else_body, "", 0, 0)
            above = -min(b.y for b in probe_boxes) if probe_boxes else GATEWAY_SIZE / 2
            else_line = upper.bottom + BRANCH_GAP + above
            else_boxes, else_last, else_right = self.sequence(item.else_body, item.node_id, split.right, else_line)
            boxes += else_boxes
            right = max(right, else_right)
        else:
            self.bypass[item.node_id] = upper.bottom + BRANCH_GAP / 2
            boxes.append(Bounds(split.x, upper.bottom, 1, BRANCH_GAP / 2))
        old_join = self._existing(item.join_id) if keep else None
        gap = GAP
        if old_join is not None:
            lasts = [self._existing(i) for i in (then_last, else_last) if i]
            if all(lasts):
                gap = max(old_join.bounds.x - max(s.bounds.right for s in lasts), GAP / 2)
        join_x = right + gap
        if old_join is not None:
            join = self._put(item.join_id, Bounds(join_x, old_join.bounds.y, GATEWAY_SIZE, GATEWAY_SIZE))
        else:
            join = self._put(item.join_id, _centered(join_x, line, GATEWAY_SIZE, GATEWAY_SIZE))
        return _union(boxes + [join]), join.right

    # -- edges -----------------------------------------------------------

    def route(self, flow: SequenceFlow, nodes: dict[str, FlowNode]) -> tuple[tuple[float, float], ...]:
        a = self.shapes[flow.source].bounds
        b = self.shapes[flow.target].bounds
        src, tgt = nodes[flow.source], nodes[flow.target]
        if src.direction == "split" and tgt.direction == "join" and flow.source in self.bypass:
            y = self.bypass[flow.source]
            return ((a.cx, a.bottom), (a.cx, y), (b.cx, y), (b.cx, b.bottom))
        if src.direction == "split" and b.cy > a.bottom:
            return ((a.cx, a.bottom), (a.cx, b.cy), (b.x, b.cy))
        if tgt.direction == "join" and a.cy > b.bottom:
            return ((a.right, a.cy), (b.cx, a.cy), (b.cx, b.bottom))
        if b.y <= a.cy <= b.bottom:
            return ((a.right, a.cy), (b.x, a.cy))
        mid = (a.right + b.x) / 2
        return ((a.right, a.cy), (mid, a.cy), (mid, b.cy), (b.x, b.cy))

    def edges(self, doc_scope: Scope, prior: BpmnDocument | None) -> dict[str, Edge]:
        nodes: dict[str, FlowNode] = {}
        flows: list[SequenceFlow] = []
        assocs: list[Association] = []
        stack = [doc_scope]
        while stack:
            scope = stack.pop()
            nodes.update({n.id: n for n in scope.nodes})
            flows.extend(scope.flows)
            assocs.extend(scope.associations)
            stack.extend(n.children for n in scope.nodes if n.children is not None)
        prior_edges = prior.diagram.edges if prior else {}
        prior_conn = {}
        if prior is not None:
            prior_conn = {f.id: (f.source, f.target) for f in prior.flows()}
            prior_conn.update({a.id: (a.source, a.target) for a in prior.associations()})
        out: dict[str, Edge] = {}
        for conn in flows + assocs:
            old = prior_edges.get(conn.id)
            delta = self._common_delta(conn.source, conn.target)
            if old is not None and prior_conn.get(conn.id) == (conn.source, conn.target) and delta is not None:
                out[conn.id] = old.moved(*delta)
            elif isinstance(conn, Association):
                a = self.shapes[conn.source].bounds
                n = self.shapes[conn.target].bounds
                x = min(max(n.cx, a.x), a.right)
                out[conn.id] = Edge(((x, a.y), (x, n.bottom)), f"{conn.id}_di")
            else:
                edge_id = old.di_id if old is not None else f"{conn.id}_di"
                out[conn.id] = Edge(self.route(conn, nodes), edge_id)
        return out

    def _common_delta(self, a: str, b: str) -> tuple[float, float] | None:
        deltas = []
        for element_id in (a, b):
            old, new = self.prior.get(element_id), self.shapes.get(element_id)
            if old is None or new is None:
                return None
            if (old.bounds.width, old.bounds.height) != (new.bounds.width, new.bounds.height):
                return None
            deltas.append((new.bounds.x - old.bounds.x, new.bounds.y - old.bounds.y))
        return deltas[0] if deltas[0] == deltas[1] else None


def emit_document(
    root: Root,
    alloc: IdAllocator,
    prior: BpmnDocument | None = None,
    process_id: str = "Process_1",
) -> BpmnDocument:
    """Build the process model and diagram for an item tree."""
    emitter = _Emitter(alloc, prior)
    scope = emitter.scope(root.start_id, root.end_id, root.items)
    layout = _Layout(prior)
    if prior is not None and root.start_id in layout.prior:
        start = layout.prior[root.start_id].bounds
        layout.scope(root.start_id, root.end_id, root.items, start.x, start.cy, keep_start=True)
    else:
        box = layout.scope(root.start_id, root.end_id, root.items, 0, 0, keep_start=False)
        dx, dy = ORIGIN[0] - box.x, ORIGIN[1] - box.y
        layout.shapes = {k: v.moved(dx, dy) for k, v in layout.shapes.items()}
        layout.bypass = {k: v + dy for k, v in layout.bypass.items()}
    diagram = DiagramLayout(dict(layout.shapes), layout.edges(scope, prior))
    if prior is not None:
        diagram = replace(diagram, diagram_id=prior.diagram.diagram_id, plane_id=prior.diagram.plane_id)
        return BpmnDocument(prior.process_id, scope, diagram, prior.executable, prior.definitions_id)
    return BpmnDocument(process_id, scope, diagram)


def compile_ir(program: Program) -> BpmnDocument:
    """Compile an IR program into a laid-out BPMN document.

    Total on every program the parser accepts.
    """
    alloc = IdAllocator()
    start = alloc.next("startEvent")
    items = make_items(program.statements, alloc)
    end = alloc.next("endEvent")
    return emit_document(Root(start, end, items), alloc)


# ---------------------------------------------------------------------------
# Structural comparison
# ---------------------------------------------------------------------------


def _graph(doc: BpmnDocument) -> nx.DiGraph:
    g = nx.DiGraph()
    notes = {a.id: a.text for a in doc.annotations()}
    for n in doc.nodes():
        label = n.name if n.kind in (NodeKind.TASK, NodeKind.USER_TASK) else None
        g.add_node(n.id, label=(n.kind.value, label, n.loop.value if n.loop else None))
        if n.children is not None:
            for child in n.children.nodes:
                g.add_edge(n.id, child.id, label=("contains",))
    for f in doc.flows():
        src = doc.node(f.source)
        is_default = src.default_flow == f.id
        cond = collapse_whitespace(f.condition) if f.condition else None
        g.add_edge(f.source, f.target, label=("flow", cond, is_default))
    for note_id, text in notes.items():
        g.add_node(note_id, label=("annotation", collapse_whitespace(text), None))
    for a in doc.associations():
        g.add_edge(a.source, a.target, label=("association",))
    return g


def structural_equal(a: BpmnDocument, b: BpmnDocument) -> bool:
    """Graph isomorphism over node kinds, task names, loop kinds, annotation
    texts and flow conditions; ids and geometry are ignored."""
    ga, gb = _graph(a), _graph(b)
    if ga.number_of_nodes() != gb.number_of_nodes() or ga.number_of_edges() != gb.number_of_edges():
        return False
    same = lambda x, y: x["label"] == y["label"]  # noqa: E731
    return nx.is_isomorphic(ga, gb, node_match=same, edge_match=same)
