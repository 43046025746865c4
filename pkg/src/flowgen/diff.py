"""Edit scripts between IR programs and their application to BPMN documents.

:func:`diff_ir` aligns the statement lists of each scope with a weighted
edit-distance dynamic program (delete, insert, replace-call, wrap a run of
statements into a loop, unwrap a loop) and recurses into aligned compound
statements.  Variable names are ignored during alignment; afterwards the
target's names are reconciled with the base so the script does not churn
bindings that only differ in name.

:func:`patch_bpmn` applies a script to the item tree recovered from a BPMN
document and re-emits it with the original document as layout prior, so
elements the script does not touch keep their ids and geometry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Union

from .bpmn import BpmnDocument
from .compiler import IdAllocator, Item, Root, emit_document, items_to_statements, make_items
from .decompiler import allocator_for, decompile_tree
from .errors import DecompileError, FlowGenError, IRSyntaxError, PatchError, PathError
from .ir import (
    Assign,
    Call,
    ExprCall,
    For,
    If,
    Program,
    Stmt,
    While,
    collapse_whitespace,
    format_call,
    identifiers_in,
    normalize_ir,
    parse_header,
    parse_ir,
    print_stmt,
    rename_bindings,
    rename_identifiers,
    walk,
)

Path = tuple[int, ...]


@dataclass(frozen=True)
class InsertStmt:
    """Insert ``stmt`` so that it ends up at ``path``."""

    path: Path
    stmt: Stmt


@dataclass(frozen=True)
class DeleteStmt:
    path: Path


@dataclass(frozen=True)
class ReplaceCall:
    """Swap the call of a call statement; ``new_target`` also renames its binding."""

    path: Path
    new_callee: str
    new_args: tuple = ()
    new_target: str | None = None


@dataclass(frozen=True)
class WrapInLoop:
    """Move ``count`` statements starting at ``path`` into a new loop."""

    path: Path
    count: int
    header: str

    @property
    def path_range(self) -> tuple[Path, Path]:
        return self.path, self.path[:-1] + (self.path[-1] + self.count - 1,)


@dataclass(frozen=True)
class UnwrapLoop:
    """Replace the loop at ``path`` by its body."""

    path: Path


@dataclass(frozen=True)
class SetCondition:
    """Replace the header of the compound statement at ``path``.

    ``text`` is a full header: ``if <cond>``, ``while <cond>`` or
    ``for <var> in <iterable>``.
    """

    path: Path
    text: str


EditOp = Union[InsertStmt, DeleteStmt, ReplaceCall, WrapInLoop, UnwrapLoop, SetCondition]

_OP_NAMES = {
    InsertStmt: "insert",
    DeleteStmt: "delete",
    ReplaceCall: "replace_call",
    WrapInLoop: "wrap_in_loop",
    UnwrapLoop: "unwrap_loop",
    SetCondition: "set_condition",
}


@dataclass(frozen=True)
class EditScript:
    ops: tuple[EditOp, ...] = ()

    def __len__(self) -> int:
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    def to_json(self) -> list[dict]:
        out = []
        for op in self.ops:
            entry: dict = {"op": _OP_NAMES[type(op)], "path": list(op.path)}
            if isinstance(op, InsertStmt):
                entry["stmt"] = print_stmt(op.stmt)
            elif isinstance(op, ReplaceCall):
                entry["call"] = format_call(Call(op.new_callee, op.new_args))
                if op.new_target is not None:
                    entry["target"] = op.new_target
            elif isinstance(op, WrapInLoop):
                entry["count"] = op.count
                entry["header"] = op.header
            elif isinstance(op, SetCondition):
                entry["text"] = op.text
            out.append(entry)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    def to_text(self) -> str:
        """One line per operation, e.g. ``replace_call [1, 0] x = A()``."""
        lines = []
        for entry in self.to_json():
            extra = [str(v) for k, v in entry.items() if k not in ("op", "path")]
            lines.append(" ".join([entry["op"], str(entry["path"])] + extra))
        return "\n".join(lines)

    @classmethod
    def from_json(cls, data) -> EditScript:
        if isinstance(data, dict):
            data = data.get("ops", data)
        if not isinstance(data, list):
            raise FlowGenError("edit script JSON must be a list of operations")
        ops: list[EditOp] = []
        for i, entry in enumerate(data):
            try:
                kind = entry["op"]
                path = tuple(int(p) for p in entry["path"])
                if kind == "insert":
                    stmts = parse_ir(entry["stmt"]).statements
                    if len(stmts) != 1:
                        raise FlowGenError("insert carries exactly one statement")
                    ops.append(InsertStmt(path, stmts[0]))
                elif kind == "delete":
                    ops.append(DeleteStmt(path))
                elif kind == "replace_call":
                    stmt = parse_ir(entry["call"]).statements[0]
                    if not isinstance(stmt, ExprCall):
                        raise FlowGenError(f"not a call: {entry['call']!r}")
                    ops.append(ReplaceCall(path, stmt.call.callee, stmt.call.args, entry.get("target")))
                elif kind == "wrap_in_loop":
                    ops.append(WrapInLoop(path, int(entry["count"]), entry["header"]))
                elif kind == "unwrap_loop":
                    ops.append(UnwrapLoop(path))
                elif kind == "set_condition":
                    ops.append(SetCondition(path, entry["text"]))
                else:
                    raise FlowGenError(f"unknown op {kind!r}")
            except (KeyError, TypeError, ValueError, IRSyntaxError) as exc:
                raise FlowGenError(f"edit script entry {i}: {exc}") from exc
        return cls(tuple(ops))

    @classmethod
    def loads(cls, text: str) -> EditScript:
        try:
            return cls.from_json(json.loads(text))
        except json.JSONDecodeError as exc:
            raise FlowGenError(f"edit script is not valid JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

_INF = float("inf")


def _shape(text: str) -> str:
    """Condition text with every identifier blanked out."""
    return rename_identifiers(collapse_whitespace(text), lambda _n: "_")


def _call_sig(call: Call) -> tuple:
    args = tuple(_shape(format_call(Call("f", (a,)))) for a in call.args)
    return call.callee, args


def _header_text(stmt: Stmt) -> str:
    if isinstance(stmt, If):
        return f"if {collapse_whitespace(stmt.condition)}"
    return collapse_whitespace(stmt.header)


@lru_cache(maxsize=4096)
def _sub(a: Stmt, b: Stmt) -> tuple[float, tuple]:
    """Cost of turning statement *a* into *b* in place, plus the nested plan."""
    if isinstance(a, (Assign, ExprCall)) and isinstance(b, (Assign, ExprCall)):
        return (0 if _call_sig(a.call) == _call_sig(b.call) else 1), ()
    if isinstance(a, If) and isinstance(b, If):
        head = 0 if _shape(a.condition) == _shape(b.condition) else 1
        c1, p1 = _align(a.then_body, b.then_body)
        c2, p2 = _align(a.else_body or (), b.else_body or ())
        return head + c1 + c2, (p1, p2)
    if isinstance(a, While) and isinstance(b, While):
        head = 0 if _shape(a.condition) == _shape(b.condition) else 1
        c, p = _align(a.body, b.body)
        return head + c, (p,)
    if isinstance(a, For) and isinstance(b, For):
        c, p = _align(a.body, b.body)
        return c, (p,)
    return _INF, ()


@lru_cache(maxsize=4096)
def _align(base: tuple[Stmt, ...], target: tuple[Stmt, ...]) -> tuple[float, tuple]:
    """Minimum-cost alignment of two statement lists.

    Plan steps, in forward order:
    ``("del", i)``, ``("ins", i, j)``, ``("sub", i, j, nested)``,
    ``("wrap", i0, i1, j, body_plan)``, ``("unwrap", i, j0, j1, body_plan)``.
    """
    n, m = len(base), len(target)
    cost = [[_INF] * (m + 1) for _ in range(n + 1)]
    back: list[list[tuple | None]] = [[None] * (m + 1) for _ in range(n + 1)]
    cost[0][0] = 0
    for i in range(n + 1):
        for j in range(m + 1):
            if i == 0 and j == 0:
                continue
            best, step = _INF, None
            if i and j:
                c, nested = _sub(base[i - 1], target[j - 1])
                if cost[i - 1][j - 1] + c < best:
                    best, step = cost[i - 1][j - 1] + c, ("sub", i - 1, j - 1, nested)
            if i and cost[i - 1][j] + 1 < best:
                best, step = cost[i - 1][j] + 1, ("del", i - 1)
            if j and cost[i][j - 1] + 1 < best:
                best, step = cost[i][j - 1] + 1, ("ins", i, j - 1)
            if j and isinstance(target[j - 1], (For, While)):
                for k in range(1, i + 1):
                    c, plan = _align(base[i - k : i], target[j - 1].body)
                    if cost[i - k][j - 1] + 1 + c < best:
                        best, step = cost[i - k][j - 1] + 1 + c, ("wrap", i - k, i, j - 1, plan)
            if i and isinstance(base[i - 1], (For, While)):
                for k in range(1, j + 1):
                    c, plan = _align(base[i - 1].body, target[j - k : j])
                    if cost[i - 1][j - k] + 1 + c < best:
                        best, step = cost[i - 1][j - k] + 1 + c, ("unwrap", i - 1, j - k, j, plan)
            cost[i][j], back[i][j] = best, step
    steps = []
    i, j = n, m
    while i or j:
        step = back[i][j]
        steps.append(step)
        kind = step[0]
        if kind == "sub":
            i, j = i - 1, j - 1
        elif kind == "del":
            i -= 1
        elif kind == "ins":
            j -= 1
        elif kind == "wrap":
            i, j = step[1], j - 1
        else:
            i, j = i - 1, step[2]
    return cost[n][m], tuple(reversed(steps))


# ---------------------------------------------------------------------------
# Name reconciliation
# ---------------------------------------------------------------------------


def _child_lists(stmt: Stmt) -> list[tuple[Path, tuple[Stmt, ...]]]:
    if isinstance(stmt, If):
        return [((0,), stmt.then_body), ((1,), stmt.else_body or ())]
    if isinstance(stmt, (For, While)):
        return [((), stmt.body)]
    return []


def _binding_paths(stmts, prefix: Path = ()) -> list[Path]:
    """Path of every statement that occupies a binding slot, document order."""
    out: list[Path] = []
    for i, stmt in enumerate(stmts):
        path = prefix + (i,)
        if isinstance(stmt, (Assign, ExprCall, For)):
            out.append(path)
        for sub, body in _child_lists(stmt):
            if isinstance(stmt, If) and sub == (1,) and stmt.else_body is None:
                continue
            out.extend(_binding_paths(body, path + sub))
    return out


def _aligned_pairs(plan, base_prefix: Path, target_prefix: Path, out: dict[Path, Path]) -> None:
    """Map target statement paths to the base paths they were aligned with."""
    for step in plan:
        kind = step[0]
        if kind == "sub":
            _, i, j, nested = step
            bp, tp = base_prefix + (i,), target_prefix + (j,)
            out[tp] = bp
            if len(nested) == 2:
                _aligned_pairs(nested[0], bp + (0,), tp + (0,), out)
                _aligned_pairs(nested[1], bp + (1,), tp + (1,), out)
            elif len(nested) == 1:
                _aligned_pairs(nested[0], bp, tp, out)
        elif kind == "wrap":
            _, i0, _i1, j, body_plan = step
            # body statements keep their base coordinates before wrapping
            shifted = [_shift(s, i0) for s in body_plan]
            _aligned_pairs(shifted, base_prefix, target_prefix + (j,), out)
        elif kind == "unwrap":
            _, i, j0, _j1, body_plan = step
            shifted = [_shift_target(s, j0) for s in body_plan]
            _aligned_pairs(shifted, base_prefix + (i,), target_prefix, out)


def _shift(step, di: int):
    kind = step[0]
    if kind == "sub":
        return ("sub", step[1] + di) + step[2:]
    if kind == "del":
        return ("del", step[1] + di)
    if kind == "ins":
        return ("ins", step[1] + di, step[2])
    if kind == "wrap":
        return ("wrap", step[1] + di, step[2] + di) + step[3:]
    return ("unwrap", step[1] + di) + step[2:]


def _shift_target(step, dj: int):
    kind = step[0]
    if kind == "sub":
        return ("sub", step[1], step[2] + dj, step[3])
    if kind == "ins":
        return ("ins", step[1], step[2] + dj)
    if kind == "wrap":
        return ("wrap", step[1], step[2], step[3] + dj, step[4])
    if kind == "unwrap":
        return ("unwrap", step[1], step[2] + dj, step[3] + dj, step[4])
    return step


def _at(stmts, path: Path) -> Stmt:
    stmt = stmts[path[0]]
    rest = path[1:]
    while rest:
        if isinstance(stmt, If):
            body = stmt.then_body if rest[0] == 0 else stmt.else_body
            stmt, rest = body[rest[1]], rest[2:]
        else:
            stmt, rest = stmt.body[rest[0]], rest[1:]
    return stmt


def _bound_name(stmt: Stmt) -> str | None:
    if isinstance(stmt, Assign):
        return stmt.target
    if isinstance(stmt, For):
        return stmt.loop_var
    return None


def _visible_names(program: Program) -> set[str]:
    """Names that show up in BPMN text (loop annotations and gateway conditions)."""
    names: set[str] = set()
    for stmt in walk(program.statements):
        if isinstance(stmt, For):
            names.update((stmt.loop_var, stmt.iterable))
        elif isinstance(stmt, (If, While)):
            names.update(identifiers_in(stmt.condition))
    return names


def _reconcile(base: Program, target: Program, pairs: dict[Path, Path]) -> Program:
    """Target renamed so aligned, BPMN-invisible bindings reuse base names."""
    visible = _visible_names(target)
    names: list[str | None] = []
    for tpath in _binding_paths(target.statements):
        tname = _bound_name(_at(target.statements, tpath))
        bpath = pairs.get(tpath)
        bname = _bound_name(_at(base.statements, bpath)) if bpath is not None else None
        if tname is None or tname in visible or bname is None:
            names.append(None)
        else:
            names.append(bname)
    renamed = rename_bindings(target, names)
    if normalize_ir(renamed) != normalize_ir(target):
        return target
    return renamed


# ---------------------------------------------------------------------------
# Script emission
# ---------------------------------------------------------------------------


def _emit(plan, base_list, target_list, prefix: Path, ops: list[EditOp]) -> None:
    """Append ops for one scope in application order (back to front)."""
    for step in reversed(plan):
        kind = step[0]
        if kind == "del":
            ops.append(DeleteStmt(prefix + (step[1],)))
        elif kind == "ins":
            ops.append(InsertStmt(prefix + (step[1],), target_list[step[2]]))
        elif kind == "sub":
            _, i, j, nested = step
            a, b = base_list[i], target_list[j]
            path = prefix + (i,)
            if isinstance(a, (Assign, ExprCall)):
                rename = None
                if isinstance(b, Assign) and (not isinstance(a, Assign) or a.target != b.target):
                    rename = b.target
                if a.call != b.call or rename is not None:
                    ops.append(ReplaceCall(path, b.call.callee, b.call.args, rename))
                continue
            if _header_text(a) != _header_text(b):
                ops.append(SetCondition(path, _header_text(b)))
            if isinstance(a, If):
                _emit(nested[0], a.then_body, b.then_body, path + (0,), ops)
                _emit(nested[1], a.else_body or (), b.else_body or (), path + (1,), ops)
            else:
                _emit(nested[0], a.body, b.body, path, ops)
        elif kind == "wrap":
            _, i0, i1, j, body_plan = step
            loop = target_list[j]
            path = prefix + (i0,)
            ops.append(WrapInLoop(path, i1 - i0, _header_text(loop)))
            _emit(body_plan, base_list[i0:i1], loop.body, path, ops)
        else:
            _, i, j0, j1, body_plan = step
            path = prefix + (i,)
            _emit(body_plan, base_list[i].body, target_list[j0:j1], path, ops)
            ops.append(UnwrapLoop(path))


def diff_ir(base: Program, target: Program) -> EditScript:
    """Edit script turning *base* into a program alpha-equivalent to *target*."""
    _, plan = _align(tuple(base.statements), tuple(target.statements))
    pairs: dict[Path, Path] = {}
    _aligned_pairs(plan, (), (), pairs)
    target = _reconcile(base, target, pairs)
    ops: list[EditOp] = []
    _emit(plan, base.statements, target.statements, (), ops)
    return EditScript(tuple(ops))


# ---------------------------------------------------------------------------
# Application
# ---------------------------------------------------------------------------


def _container(items: list[Item], prefix: Path, op, create: bool = False) -> tuple[list[Item], Item | None]:
    """The statement list addressed by *prefix* and the compound owning it."""
    owner = None
    lst = items
    k = 0
    while k < len(prefix):
        idx = prefix[k]
        if not 0 <= idx < len(lst):
            raise PathError(f"{_describe(op)}: no statement at index {idx} of {list(prefix[:k])}")
        owner = lst[idx]
        if isinstance(owner.stmt, If):
            if k + 1 >= len(prefix) or prefix[k + 1] not in (0, 1):
                raise PathError(f"{_describe(op)}: branches of the if at {list(prefix[: k + 1])} are addressed as 0 (then) or 1 (else)")
            if prefix[k + 1] == 0:
                lst = owner.body
            else:
                if owner.else_body is None:
                    if not create:
                        raise PathError(f"{_describe(op)}: the if at {list(prefix[: k + 1])} has no else branch")
                    owner.else_body = []
                lst = owner.else_body
            k += 2
        elif isinstance(owner.stmt, (For, While)):
            lst = owner.body
            k += 1
        else:
            raise PathError(f"{_describe(op)}: statement at {list(prefix[: k + 1])} has no body")
    return lst, owner


def _describe(op) -> str:
    return f"{_OP_NAMES[type(op)]} at {list(op.path)}"


def _target(items: list[Item], op) -> tuple[list[Item], int, Item | None]:
    if not op.path:
        raise PathError(f"{_describe(op)}: empty path")
    lst, owner = _container(items, op.path[:-1], op)
    idx = op.path[-1]
    if not 0 <= idx < len(lst):
        raise PathError(f"{_describe(op)}: no statement at this path")
    return lst, idx, owner


def _mark_moved(item: Item) -> None:
    item.moved = True
    for child in item.body + (item.else_body or []):
        _mark_moved(child)


def _touch(owner: Item | None) -> None:
    if owner is not None:
        owner.dirty = True


def apply_to_items(items: list[Item], script: EditScript, alloc: IdAllocator) -> None:
    """Apply *script* to an item tree in place (shared by IR and BPMN patching)."""
    for op in script.ops:
        if isinstance(op, InsertStmt):
            if not op.path:
                raise PathError(f"{_describe(op)}: empty path")
            lst, owner = _container(items, op.path[:-1], op, create=True)
            idx = op.path[-1]
            if not 0 <= idx <= len(lst):
                raise PathError(f"{_describe(op)}: cannot insert at index {idx} of a {len(lst)}-statement list")
            lst[idx:idx] = make_items([op.stmt], alloc)
            _touch(owner)
        elif isinstance(op, DeleteStmt):
            lst, idx, owner = _target(items, op)
            del lst[idx]
            _touch(owner)
            if owner is not None and owner.else_body is not None and not owner.else_body:
                owner.else_body = None
        elif isinstance(op, ReplaceCall):
            lst, idx, _ = _target(items, op)
            item = lst[idx]
            if not isinstance(item.stmt, (Assign, ExprCall)):
                raise PathError(f"{_describe(op)}: statement is not a call")
            call = Call(op.new_callee, tuple(op.new_args))
            if op.new_target is not None:
                item.stmt = Assign(op.new_target, call)
            elif isinstance(item.stmt, Assign):
                item.stmt = Assign(item.stmt.target, call)
            else:
                item.stmt = ExprCall(call)
        elif isinstance(op, WrapInLoop):
            lst, idx, owner = _target(items, op)
            if op.count < 1 or idx + op.count > len(lst):
                raise PathError(f"{_describe(op)}: range of {op.count} statements runs past the end")
            try:
                header = parse_header(op.header)
            except IRSyntaxError as exc:
                raise PathError(f"{_describe(op)}: {exc.message}") from exc
            moved = lst[idx : idx + op.count]
            loop = make_items([header], alloc)[0]
            loop.body = moved
            for child in moved:
                _mark_moved(child)
            lst[idx : idx + op.count] = [loop]
            _touch(owner)
        elif isinstance(op, UnwrapLoop):
            lst, idx, owner = _target(items, op)
            loop = lst[idx]
            if not isinstance(loop.stmt, (For, While)):
                raise PathError(f"{_describe(op)}: statement is not a loop")
            for child in loop.body:
                _mark_moved(child)
            lst[idx : idx + 1] = loop.body
            _touch(owner)
        elif isinstance(op, SetCondition):
            lst, idx, _ = _target(items, op)
            item = lst[idx]
            item.stmt = _with_header(item.stmt, op)
        else:
            raise PathError(f"unknown edit operation {op!r}")


def _with_header(stmt: Stmt, op: SetCondition) -> Stmt:
    text = collapse_whitespace(op.text.strip().rstrip(":"))
    if isinstance(stmt, If):
        if not text.startswith("if ") or not text[3:].strip():
            raise PathError(f"{_describe(op)}: expected an 'if <condition>' header, got {op.text!r}")
        return If(text[3:].strip(), (), None)
    try:
        header = parse_header(text)
    except IRSyntaxError as exc:
        raise PathError(f"{_describe(op)}: {exc.message}") from exc
    if type(header) is not type(stmt):
        raise PathError(f"{_describe(op)}: header {op.text!r} does not fit a {type(stmt).__name__} statement")
    return header


def _items_of(statements) -> list[Item]:
    return make_items(statements, IdAllocator())


def apply_ir(base: Program, script: EditScript) -> Program:
    """Apply *script* to *base*.

    Empty bodies or an empty program may result; they are returned as is
    and left for the caller to reject.
    """
    items = _items_of(base.statements)
    apply_to_items(items, script, IdAllocator())
    return Program(items_to_statements(items))


def _empty_blocks(items: list[Item], path: Path = ()) -> list[Path]:
    found = []
    for i, item in enumerate(items):
        if isinstance(item.stmt, (If, For, While)) and not item.body:
            found.append(path + (i,))
        found.extend(_empty_blocks(item.body, path + (i,) + ((0,) if isinstance(item.stmt, If) else ())))
        if item.else_body:
            found.extend(_empty_blocks(item.else_body, path + (i, 1)))
    return found


def patch_bpmn(base_doc: BpmnDocument, script: EditScript) -> BpmnDocument:
    """Apply *script* to *base_doc*, keeping untouched elements as they are."""
    if not script.ops:
        return base_doc
    try:
        root = decompile_tree(base_doc)
        alloc = allocator_for(base_doc)
        apply_to_items(root.items, script, alloc)
    except (DecompileError, PathError) as exc:
        raise PatchError(str(exc)) from exc
    if not root.items:
        raise PatchError("edit script leaves the process without statements")
    empty = _empty_blocks(root.items)
    if empty:
        raise PatchError(f"edit script leaves empty blocks at {[list(p) for p in empty]}")
    return emit_document(Root(root.start_id, root.end_id, root.items), alloc, prior=base_doc)


__all__ = [
    "DeleteStmt",
    "EditOp",
    "EditScript",
    "InsertStmt",
    "ReplaceCall",
    "SetCondition",
    "UnwrapLoop",
    "WrapInLoop",
    "apply_ir",
    "apply_to_items",
    "diff_ir",
    "patch_bpmn",
]
