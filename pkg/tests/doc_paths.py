"""Map statement paths of a decompilable document to the element ids they own.

Written against the document graph directly (flows, gateways, associations)
so tests can check which ids a patch may touch without going through the
decompiler's own bookkeeping.
"""

from __future__ import annotations

from flowgen.bpmn import NodeKind
from flowgen.compiler import compile_ir
from flowgen.diff import DeleteStmt, InsertStmt
from flowgen.ir import Program


def attached(doc, node_id):
    """Annotations linked to *node_id*, whichever way the association points."""
    out = set()
    for a in doc.associations():
        if a.target == node_id:
            out.add(a.source)
        elif a.source == node_id:
            out.add(a.target)
    return out


def subtree(doc, node):
    ids = {node.id} | attached(doc, node.id)
    if node.children is not None:
        for child in node.children.nodes:
            ids |= subtree(doc, child)
    return ids


def walk(doc, scope, first_id, stop_id):
    """Statements on the path from *first_id* up to *stop_id*.

    Each statement is ``(owned ids, children)`` where children is None for a
    task, a statement list for a loop, and a (then, else) pair for an if.
    """
    out = []
    node_id = first_id
    while node_id != stop_id:
        node = scope.node(node_id)
        if node.kind is NodeKind.EXCLUSIVE_GATEWAY:
            join = join_of(scope, node)
            then = next(f for f in scope.outgoing(node.id) if f.condition)
            other = next(f for f in scope.outgoing(node.id) if f is not then)
            then_items = walk(doc, scope, then.target, join)
            else_items = walk(doc, scope, other.target, join)
            ids = {node.id, join}
            for item_ids, _ in then_items + else_items:
                ids |= item_ids
            out.append((ids, (then_items, else_items)))
            node_id = scope.outgoing(join)[0].target
            continue
        children = None
        if node.children is not None:
            children = _scope_statements(doc, node.children)
        out.append((subtree(doc, node), children))
        node_id = scope.outgoing(node.id)[0].target
    return out


def _scope_statements(doc, scope):
    start = scope.of_kind(NodeKind.START_EVENT)[0]
    end = scope.of_kind(NodeKind.END_EVENT)[0]
    return walk(doc, scope, scope.outgoing(start.id)[0].target, end.id)


def join_of(scope, split):
    """Breadth-first: the first node reachable from every outgoing branch."""
    reach = []
    for f in scope.outgoing(split.id):
        seen, todo = [], [f.target]
        while todo:
            n = todo.pop(0)
            if n in seen:
                continue
            seen.append(n)
            todo.extend(g.target for g in scope.outgoing(n))
        reach.append(seen)
    return next(n for n in reach[0] if all(n in r for r in reach[1:]))


def statement_ids(doc):
    return _scope_statements(doc, doc.scope)


def lookup(items, path):
    """Ids owned by the statement at *path* (diff path convention)."""
    ids, branches = items[path[0]]
    if len(path) == 1:
        return ids
    if isinstance(branches, tuple):
        return lookup(branches[path[1]], path[2:])
    return lookup(branches, path[1:])


def all_ids(doc):
    return {n.id for n in doc.nodes()} | {a.id for a in doc.annotations()}


def element_count(stmt) -> int:
    """Elements a freshly inserted statement adds (its own compile, minus events)."""
    return len(all_ids(compile_ir(Program((stmt,))))) - 2


def expected_changes(base_doc, script):
    """Ids a patch should remove and how many it should add."""
    items = statement_ids(base_doc)
    removed = set()
    added = 0
    for op in script.ops:
        if isinstance(op, DeleteStmt):
            removed |= lookup(items, op.path)
        elif isinstance(op, InsertStmt):
            added += element_count(op.stmt)
    return removed, added
