"""Exhaustive enumeration of small IR programs over a 4-activity toy catalog.

Programs are built as text so the enumeration does not depend on the
package's AST constructors.  Naming follows the dataset habit the
decompiler relies on: a binding is named after the activity's object
(plural for retrievals), with a numeric suffix from 2 on repeats; loop
iterables name an earlier binding; conditions are free words or an
earlier binding.
"""

from __future__ import annotations

from itertools import product

TOY_CATALOG = (
    "Jira_Issue__2_0_0__retrievewithwhere_Issue",
    "Jira_Issue__2_0_0__create_Issue",
    "GitHub_Repository__3_0_0__retrievewithwhere_Repository",
    "Slack_Message__1_0_0__send_Message",
)
_BASE = {
    "Jira_Issue__2_0_0__retrievewithwhere_Issue": "issues",
    "Jira_Issue__2_0_0__create_Issue": "issue",
    "GitHub_Repository__3_0_0__retrievewithwhere_Repository": "repositories",
    "Slack_Message__1_0_0__send_Message": "message",
}
FREE_CONDITION = "ready"

# A shape is a list of top-level items: ("call", a) or (kind, [a, ...]) for a
# compound statement with simple children (kind in for/while/if/ifelse; for
# ifelse the children list is split by the `split` index).


def _leaf_seqs(n: int):
    return product(TOY_CATALOG, repeat=n)


def _compositions(total: int):
    """Ordered ways of writing *total* as a sum of item sizes (>= 1)."""
    if total == 0:
        yield []
        return
    for first in range(1, total + 1):
        for rest in _compositions(total - first):
            yield [first] + rest


def _items(size: int):
    """Every top-level item occupying *size* statements."""
    if size == 1:
        for a in TOY_CATALOG:
            yield ("call", (a,), 0)
        return
    inner = size - 1
    for calls in _leaf_seqs(inner):
        yield ("for", calls, 0)
        yield ("while", calls, 0)
        yield ("if", calls, 0)
        for split in range(1, inner):
            yield ("ifelse", calls, split)


class _Names:
    def __init__(self):
        self.counts: dict[str, int] = {}
        self.bound: list[str] = []

    def bind(self, activity: str) -> str:
        base = _BASE[activity]
        n = self.counts.get(base, 0) + 1
        self.counts[base] = n
        name = base if n == 1 else f"{base}{n}"
        self.bound.append(name)
        return name


def _render(items, ref_choice) -> list[str] | None:
    """Text for *items*; ``ref_choice`` picks header references.

    Returns None when a for loop has no earlier binding to iterate.
    """
    names = _Names()
    lines: list[str] = []
    loop_vars = 0
    for k, (kind, calls, split) in enumerate(items):
        if kind == "call":
            lines.append(f"{names.bind(calls[0])} = {calls[0]}()")
            continue
        if kind == "for":
            if not names.bound:
                return None
            loop_vars += 1
            iterable = ref_choice(k, names.bound, allow_free=False)
            lines.append(f"for item{loop_vars} in {iterable}:")
        elif kind == "while":
            lines.append(f"while {ref_choice(k, names.bound, allow_free=True)}:")
        else:
            lines.append(f"if {ref_choice(k, names.bound, allow_free=True)}:")
        for i, a in enumerate(calls):
            if kind == "ifelse" and i == split:
                lines.append("else:")
            lines.append(f"  {names.bind(a)} = {a}()")
    return lines


def _header_options(items):
    """All header-reference assignments for the compound items."""
    per_item = []
    bound_before = 0
    for kind, calls, _ in items:
        if kind == "call":
            bound_before += 1
            continue
        refs = list(range(bound_before))
        options = refs if kind == "for" else [None] + refs
        per_item.append(options)
        bound_before += len(calls)
    return product(*per_item)


def enumerate_programs(max_statements: int = 3):
    """Yield program texts with 1..max_statements statements in total."""
    for total in range(1, max_statements + 1):
        for sizes in _compositions(total):
            for items in product(*[list(_items(s)) for s in sizes]):
                for choice in _header_options(items):
                    picks = iter(choice)

                    def ref(_k, bound, allow_free, _picks=picks):
                        idx = next(_picks)
                        return FREE_CONDITION if idx is None else bound[idx]

                    lines = _render(items, ref)
                    if lines is not None:
                        yield "\n".join(lines)


def enumerate_flat(max_len: int, catalog=TOY_CATALOG):
    """Flat call sequences (as callee tuples) up to *max_len* calls."""
    for n in range(max_len + 1):
        yield from product(catalog, repeat=n)


def flat_text(callees) -> str:
    return "\n".join(f"{c}()" for c in callees)
