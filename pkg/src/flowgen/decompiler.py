"""BPMN -> IR decompiler.

BPMN keeps task names but not variable names, so the decompiler invents
them: each task binds the lowercased last ``_`` segment of its name
(``..._retrievewithwhere_Repository`` -> ``repository``), deduplicated with a
numeric suffix.  Loop annotations and gateway conditions do mention variable
names (``for repo in repositories``); those references are tied back to the
assignment that most plausibly produced them, and that assignment is renamed
to match so the program stays well scoped.  Equality with the original
source is then judged after :func:`flowgen.ir.normalize_ir`.
"""

from __future__ import annotations

import keyword
import re
from dataclasses import dataclass

from .bpmn import BpmnDocument, FlowNode, LoopKind, NodeKind, Scope
from .compiler import IdAllocator, Item, Root, program_of
from .errors import DecompileError, IRSyntaxError
from .ir import (
    USER_TASK,
    Assign,
    Call,
    ExprCall,
    For,
    If,
    Program,
    StringLiteral,
    While,
    identifiers_in,
    is_identifier,
    parse_header,
)

_COLLECTION_VERBS = ("retrieve", "list", "search", "get", "find", "query", "fetch")


def singular(word: str) -> str:
    if word.endswith("ies") and len(word) > 3:
        return word[:-3] + "y"
    if re.search(r"(ss|x|ch|sh|z)es\Z", word):
        return word[:-2]
    if word.endswith("s") and not word.endswith("ss") and len(word) > 1:
        return word[:-1]
    return word


def plural(word: str) -> str:
    if re.search(r"[^aeiou]y\Z", word):
        return word[:-1] + "ies"
    if re.search(r"(s|x|ch|sh|z)\Z", word):
        return word + "es"
    return word + "s"


def variable_base(task_name: str) -> str:
    """Variable name a task binds before deduplication."""
    base = task_name.rsplit("_", 1)[-1].lower() or task_name.strip("_").lower()
    if not base or not is_identifier(base) or keyword.iskeyword(base):
        base = f"{base}_" if base and is_identifier(base) else "result"
    return base


def _is_collection(task_name: str) -> bool:
    parts = [p for p in task_name.split("_") if p]
    verb = parts[-2].lower() if len(parts) >= 2 else ""
    return verb.startswith(_COLLECTION_VERBS)


def _split_digits(name: str) -> tuple[str, str]:
    m = re.match(r"(.*?)(\d*)\Z", name)
    return m.group(1), m.group(2)


@dataclass(eq=False)
class _Slot:
    item: Item
    callee: str
    key: str
    collection: bool
    predicted: str = ""
    pinned: str | None = None


class _Namer:
    """Resolves header references to earlier assignments in document order."""

    def __init__(self):
        self.slots: list[_Slot] = []
        self.bound: set[str] = set()
        self.predicted_seen: dict[str, int] = {}

    def add_task(self, item: Item, callee: str) -> None:
        key = variable_base(callee)
        slot = _Slot(item, callee, key, _is_collection(callee))
        # the name a person following the dataset convention would have used
        guess = plural(key) if slot.collection else key
        n = self.predicted_seen.get(guess, 0) + 1
        self.predicted_seen[guess] = n
        slot.predicted = guess if n == 1 else f"{guess}{n}"
        self.slots.append(slot)

    def bind(self, name: str) -> None:
        self.bound.add(name)

    def reference(self, name: str, iterable: bool = False) -> None:
        if name in self.bound:
            return
        free = [s for s in reversed(self.slots) if s.pinned is None]
        stem, digits = _split_digits(name)
        wanted = singular(stem.lower())
        is_plural = wanted != stem.lower()
        chosen = next((s for s in free if s.predicted == name), None)
        if chosen is None:
            exact = [s for s in free if s.key == wanted]
            exact.sort(key=lambda s: s.collection != is_plural)  # stable: recency kept within ties
            chosen = exact[0] if exact else None
        if chosen is None and len(wanted) >= 3:
            for s in free:
                common = len(_common_prefix(s.key, wanted))
                if common >= 3 and common >= min(len(s.key), len(wanted)) - 2 or (len(s.key) >= 3 and (s.key in wanted or wanted in s.key)):
                    chosen = s
                    break
        if chosen is None and iterable and free:
            chosen = free[0]
        if chosen is not None:
            chosen.pinned = name
            self.bound.add(name)

    def assign_names(self, reserved: set[str]) -> dict[Item, str]:
        taken = set(reserved) | {s.pinned for s in self.slots if s.pinned}
        names: dict[Item, str] = {}
        for slot in self.slots:
            if slot.pinned:
                names[slot.item] = slot.pinned
                continue
            name, n = slot.key, 1
            while name in taken:
                n += 1
                name = f"{slot.key}{n}"
            taken.add(name)
            names[slot.item] = name
        return names


def _common_prefix(a: str, b: str) -> str:
    i = 0
    while i < min(len(a), len(b)) and a[i] == b[i]:
        i += 1
    return a[:i]


class _Walker:
    def __init__(self, doc: BpmnDocument):
        self.doc = doc
        self.namer = _Namer()
        self.reserved: set[str] = set()
        notes = {a.id: a for a in doc.annotations()}
        self.notes_of: dict[str, list[tuple[str, str]]] = {}
        for assoc in doc.associations():
            if assoc.target in notes:
                self.notes_of.setdefault(assoc.source, []).append((assoc.id, assoc.target))
        self.texts = {a.id: a.text for a in notes.values()}

    def root(self) -> Root:
        start, end = self._events(self.doc.scope, "process")
        items, last = self.sequence(self.doc.scope, start.id)
        self._expect_end(self.doc.scope, last, end, "process")
        self._check_reached(self.doc.scope, items, start.id, end.id, "process")
        if not items:
            raise DecompileError("empty program: the process has no tasks")
        names = self.namer.assign_names(self.reserved)
        _apply_names(items, names)
        return Root(start.id, end.id, items)

    def _events(self, scope: Scope, where: str) -> tuple[FlowNode, FlowNode]:
        starts = scope.of_kind(NodeKind.START_EVENT)
        ends = scope.of_kind(NodeKind.END_EVENT)
        if len(starts) != 1 or len(ends) != 1:
            raise DecompileError(f"{where} needs exactly one start and one end event (found {len(starts)}, {len(ends)})")
        return starts[0], ends[0]

    def _successor(self, scope: Scope, node_id: str) -> str:
        out = scope.outgoing(node_id)
        if not out:
            raise DecompileError(f"node {node_id!r} has no outgoing sequence flow")
        if len(out) > 1:
            raise DecompileError(f"node {node_id!r} has multiple successors outside a gateway")
        return out[0].target

    def _expect_end(self, scope: Scope, last: str, end: FlowNode, where: str) -> None:
        if last != end.id:
            raise DecompileError(f"{where}: path ends at {last!r} instead of the end event")

    def _check_reached(self, scope: Scope, items: list[Item], start: str, end: str, where: str) -> None:
        reached = {start, end}
        for item in items:
            reached.add(item.node_id)
            if item.join_id:
                reached.add(item.join_id)
                _collect_top(item, reached)
        missing = [n.id for n in scope.nodes if n.id not in reached]
        if missing:
            raise DecompileError(f"{where}: unreachable nodes {missing}")

    def sequence(self, scope: Scope, after: str, visited: set[str] | None = None) -> tuple[list[Item], str]:
        """Items following *after* until an end event or a join gateway."""
        visited = visited if visited is not None else set()
        items: list[Item] = []
        cur = self._successor(scope, after)
        while True:
            if cur in visited:
                raise DecompileError(f"cycle through node {cur!r}")
            node = scope.node(cur)
            if node.kind is NodeKind.END_EVENT:
                return items, cur
            if node.kind is NodeKind.EXCLUSIVE_GATEWAY and node.direction == "join":
                return items, cur
            if node.kind is NodeKind.START_EVENT:
                raise DecompileError(f"sequence flow leads back to start event {cur!r}")
            visited.add(cur)
            item = self.node(scope, node, visited)
            items.append(item)
            cur = self._successor(scope, item.exit_id)

    def node(self, scope: Scope, node: FlowNode, visited: set[str]) -> Item:
        if node.kind is NodeKind.TASK:
            if node.name is None or not is_identifier(node.name) or node.name == USER_TASK:
                raise DecompileError(f"task {node.id!r} name {node.name!r} is not a valid activity identifier")
            item = Item(Assign("_", Call(node.name)), node.id)
            self.namer.add_task(item, node.name)
            return item
        if node.kind is NodeKind.USER_TASK:
            return Item(ExprCall(Call(USER_TASK, (StringLiteral(node.name or ""),))), node.id)
        if node.kind is NodeKind.SUB_PROCESS:
            return self.loop(node)
        if node.kind is NodeKind.EXCLUSIVE_GATEWAY:
            return self.conditional(scope, node, visited)
        raise DecompileError(f"unexpected {node.kind.value} {node.id!r} inside a sequence")

    def loop(self, node: FlowNode) -> Item:
        notes = self.notes_of.get(node.id, [])
        if node.loop is None:
            raise DecompileError(f"sub-process {node.id!r} has no loop characteristics")
        if len(notes) != 1:
            raise DecompileError(f"loop sub-process {node.id!r} must carry exactly one annotation (found {len(notes)})")
        assoc_id, note_id = notes[0]
        text = self.texts[note_id]
        try:
            header = parse_header(text)
        except IRSyntaxError as exc:
            raise DecompileError(f"annotation {text!r} of {node.id!r} is not a loop header") from exc
        expected = For if node.loop is LoopKind.MULTI_INSTANCE_SEQUENTIAL else While
        if not isinstance(header, expected):
            raise DecompileError(f"annotation {text!r} does not match the loop kind of {node.id!r}")
        if isinstance(header, For):
            self.reserved.update((header.loop_var, header.iterable))
            self.namer.reference(header.iterable, iterable=True)
            self.namer.bind(header.loop_var)
        else:
            self._condition_refs(header.condition)
        scope = node.children
        start, end = self._events(scope, f"sub-process {node.id!r}")
        body, last = self.sequence(scope, start.id)
        self._expect_end(scope, last, end, f"sub-process {node.id!r}")
        self._check_reached(scope, body, start.id, end.id, f"sub-process {node.id!r}")
        if not body:
            raise DecompileError(f"loop sub-process {node.id!r} has an empty body")
        return Item(header, node.id, start_id=start.id, end_id=end.id, annotation_id=note_id, association_id=assoc_id, body=body)

    def _condition_refs(self, condition: str) -> None:
        for name in identifiers_in(condition):
            self.reserved.add(name)
            self.namer.reference(name)

    def conditional(self, scope: Scope, node: FlowNode, visited: set[str]) -> Item:
        out = scope.outgoing(node.id)
        if len(out) != 2:
            raise DecompileError(f"gateway {node.id!r} must have exactly two outgoing flows (found {len(out)})")
        conditioned = [f for f in out if f.condition]
        if len(conditioned) == 1:
            then_flow = conditioned[0]
        elif node.default_flow and any(f.id == node.default_flow for f in out) and any(f.condition for f in out):
            then_flow = next(f for f in out if f.id != node.default_flow)
        else:
            raise DecompileError(f"gateway {node.id!r} needs one conditioned flow and one default flow")
        else_flow = next(f for f in out if f is not then_flow)
        self._condition_refs(then_flow.condition)
        then_body, then_join = self._branch(scope, node.id, then_flow.target, visited)
        else_body, else_join = self._branch(scope, node.id, else_flow.target, visited)
        if then_join != else_join:
            raise DecompileError(f"branches of gateway {node.id!r} do not meet at one join gateway")
        join = scope.node(then_join)
        if join.kind is not NodeKind.EXCLUSIVE_GATEWAY:
            raise DecompileError(f"branches of gateway {node.id!r} end at {then_join!r} instead of a join gateway")
        if not then_body:
            raise DecompileError(f"gateway {node.id!r} has an empty conditioned branch")
        visited.add(join.id)
        return Item(If(then_flow.condition, (), None), node.id, join_id=join.id, body=then_body, else_body=else_body or None)

    def _branch(self, scope: Scope, split: str, first: str, visited: set[str]) -> tuple[list[Item], str]:
        node = scope.node(first)
        if node.kind is NodeKind.EXCLUSIVE_GATEWAY and node.direction == "join":
            return [], first
        if node.kind is NodeKind.END_EVENT:
            raise DecompileError(f"branch of gateway {split!r} reaches the end event without a join")
        if first in visited:
            raise DecompileError(f"cycle through node {first!r}")
        visited.add(first)
        item = self.node(scope, node, visited)
        rest, join = self.sequence(scope, item.exit_id, visited)
        if scope.node(join).kind is NodeKind.END_EVENT:
            raise DecompileError(f"branch of gateway {split!r} reaches the end event without a join")
        return [item] + rest, join


def _collect_top(item: Item, reached: set[str]) -> None:
    for child in item.body + (item.else_body or []):
        reached.add(child.node_id)
        if child.join_id:
            reached.add(child.join_id)
            _collect_top(child, reached)


def _apply_names(items: list[Item], names: dict[Item, str]) -> None:
    for item in items:
        if item in names:
            item.stmt = Assign(names[item], item.stmt.call)
        _apply_names(item.body, names)
        _apply_names(item.else_body or [], names)


def decompile_tree(doc: BpmnDocument) -> Root:
    """Item tree of *doc*: IR statements tied to the BPMN elements rendering them."""
    return _Walker(doc).root()


def decompile(doc: BpmnDocument) -> Program:
    """Reconstruct the IR program a BPMN document renders."""
    return program_of(decompile_tree(doc))


def allocator_for(doc: BpmnDocument) -> IdAllocator:
    """Id allocator that never reuses an id already present in *doc*."""
    taken = {doc.process_id, doc.definitions_id, doc.diagram.diagram_id, doc.diagram.plane_id}
    taken.update(n.id for n in doc.nodes())
    taken.update(f.id for f in doc.flows())
    taken.update(a.id for a in doc.annotations())
    taken.update(a.id for a in doc.associations())
    taken.update(s.di_id for s in doc.diagram.shapes.values() if s.di_id)
    taken.update(e.di_id for e in doc.diagram.edges.values() if e.di_id)
    return IdAllocator(taken)
