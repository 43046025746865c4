from __future__ import annotations

from collections import deque

import pytest
from doc_paths import all_ids, expected_changes
from enumeration import TOY_CATALOG, enumerate_flat, enumerate_programs, flat_text
from hypothesis import given, settings
from hypothesis import strategies as st

from flowgen.bpmn import NodeKind, parse_bpmn, serialize_bpmn
from flowgen.compiler import compile_ir, structural_equal
from flowgen.decompiler import decompile
from flowgen.diff import (
    DeleteStmt,
    EditScript,
    InsertStmt,
    ReplaceCall,
    SetCondition,
    UnwrapLoop,
    WrapInLoop,
    apply_ir,
    diff_ir,
    patch_bpmn,
)
from flowgen.errors import FlowGenError, PatchError, PathError
from flowgen.ir import Assign, Call, ExprCall, Program, normalize_ir, parse_ir

PRIOR = (
    "repositories = GitHub_Repository__3_0_0__retrievewithwhere_Repository()\n"
    "for repo in repositories:\n"
    "  new_issue = GitHub_Issue__3_0_0__retrievewithwhere_Issue()"
)
EXPECTED = (
    "repositories = GitHub_Repository__3_0_0__retrievewithwhere_Repository()\n"
    "for repo in repositories:\n"
    "  updated_issue = GitHub_Issue__3_0_0__create_Issue()"
)
TWO_TASKS = "issue = Jira_Issue__2_0_0__create_Issue()\nmessage = Slack_Message__1_0_0__send_Message()"


class TestDiff:
    def test_loop_body_replacement_is_one_op(self):
        script = diff_ir(parse_ir(PRIOR), parse_ir(EXPECTED))
        assert len(script) == 1
        (op,) = script.ops
        assert isinstance(op, ReplaceCall)
        assert op.path == (1, 0)
        assert op.new_callee == "GitHub_Issue__3_0_0__create_Issue"

    def test_identical_programs_give_empty_script(self):
        assert len(diff_ir(parse_ir(PRIOR), parse_ir(PRIOR))) == 0

    def test_renaming_alone_is_free(self):
        renamed = PRIOR.replace("new_issue", "issue")
        assert len(diff_ir(parse_ir(PRIOR), parse_ir(renamed))) == 0

    def test_condition_change(self):
        script = diff_ir(parse_ir("if ready:\n  A()"), parse_ir("if done:\n  A()"))
        assert script.ops == (SetCondition((0,), "if done"),)

    def test_wrap_in_loop(self):
        base = parse_ir("xs = A()\nB()\nC()")
        target = parse_ir("xs = A()\nfor x in xs:\n  B()\n  C()")
        script = diff_ir(base, target)
        assert script.ops == (WrapInLoop((1,), 2, "for x in xs"),)
        assert normalize_ir(apply_ir(base, script)) == normalize_ir(target)

    def test_unwrap_loop(self):
        base = parse_ir("while more:\n  B()\n  C()")
        target = parse_ir("B()\nC()")
        script = diff_ir(base, target)
        assert script.ops == (UnwrapLoop((0,)),)
        assert normalize_ir(apply_ir(base, script)) == normalize_ir(target)


class TestApply:
    def test_empty_script_is_identity(self):
        prog = parse_ir(PRIOR)
        assert apply_ir(prog, EditScript()) == prog

    def test_deleting_last_statement_leaves_empty_program(self):
        out = apply_ir(parse_ir("A()"), EditScript((DeleteStmt((0,)),)))
        assert out.statements == ()

    def test_empty_result_is_flagged_when_patching(self):
        doc = compile_ir(parse_ir("A()"))
        with pytest.raises(PatchError):
            patch_bpmn(doc, EditScript((DeleteStmt((0,)),)))

    def test_insert_at_end_appends(self):
        stmt = ExprCall(Call("C"))
        out = apply_ir(parse_ir("A()\nB()"), EditScript((InsertStmt((2,), stmt),)))
        assert [s.call.callee for s in out.statements] == ["A", "B", "C"]

    def test_missing_path(self):
        with pytest.raises(PathError):
            apply_ir(parse_ir("A()"), EditScript((DeleteStmt((3,)),)))

    def test_replace_on_compound_statement(self):
        with pytest.raises(PathError):
            apply_ir(parse_ir("if ok:\n  A()"), EditScript((ReplaceCall((0,), "B"),)))


class TestPatch:
    def test_loop_body_replacement_keeps_ids_and_geometry(self, context_doc, output_doc):
        script = diff_ir(decompile(context_doc), parse_ir(EXPECTED))
        patched = patch_bpmn(context_doc, script)
        assert structural_equal(patched, output_doc)
        assert {n.id for n in patched.nodes()} == {n.id for n in context_doc.nodes()}
        assert patched.node("Activity_0n3dkn6").kind is NodeKind.SUB_PROCESS
        assert patched.diagram == context_doc.diagram
        changed = [n.id for n in patched.nodes() if n.name != context_doc.node(n.id).name]
        assert len(changed) == 1
        assert patched.node(changed[0]).name == "GitHub_Issue__3_0_0__create_Issue"

    def test_empty_script_returns_base(self, context_doc):
        assert patch_bpmn(context_doc, EditScript()) is context_doc

    def test_insert_into_two_task_flow(self):
        base_doc = compile_ir(parse_ir(TWO_TASKS))
        target = parse_ir(TWO_TASKS + "\nrepositories = GitHub_Repository__3_0_0__retrievewithwhere_Repository()")
        target = Program(target.statements[:1] + target.statements[2:] + target.statements[1:2])
        patched = patch_bpmn(base_doc, diff_ir(decompile(base_doc), target))
        old = {n.id for n in base_doc.nodes() if n.kind is NodeKind.TASK}
        new = {n.id for n in patched.nodes() if n.kind is NodeKind.TASK}
        assert old < new and len(new - old) == 1
        assert structural_equal(patched, compile_ir(target))
        serialize_bpmn(patched)

    def test_path_error_is_wrapped(self, context_doc):
        with pytest.raises(PatchError):
            patch_bpmn(context_doc, EditScript((DeleteStmt((7,)),)))

    def test_replace_keeps_every_bound(self):
        base_doc = compile_ir(parse_ir("xs = A()\nfor x in xs:\n  B()\n  C()\nD()"))
        script = EditScript((ReplaceCall((1, 1), "E"),))
        assert patch_bpmn(base_doc, script).diagram == base_doc.diagram


class TestScriptJson:
    def test_round_trip_every_op(self):
        script = EditScript(
            (
                InsertStmt((0,), Assign("x", Call("A"))),
                DeleteStmt((1, 0)),
                ReplaceCall((2,), "B", (), "y"),
                WrapInLoop((3,), 2, "for x in xs"),
                UnwrapLoop((4,)),
                SetCondition((5,), "while more"),
            )
        )
        assert EditScript.loads(script.dumps()) == script
        assert [e["op"] for e in script.to_json()] == [
            "insert",
            "delete",
            "replace_call",
            "wrap_in_loop",
            "unwrap_loop",
            "set_condition",
        ]

    def test_text_form(self):
        script = diff_ir(parse_ir(PRIOR), parse_ir(EXPECTED))
        assert script.to_text().startswith("replace_call [1, 0] GitHub_Issue__3_0_0__create_Issue")

    def test_bad_json(self):
        with pytest.raises(FlowGenError, match="teleport"):
            EditScript.loads('[{"op": "teleport", "path": [0]}]')


# ---------------------------------------------------------------------------
# Minimality against breadth-first search over flat sequences
# ---------------------------------------------------------------------------


def _bfs_distances(src: tuple, max_len: int = 4) -> dict[tuple, int]:
    """Fewest insert/delete/replace steps from *src* to every short sequence."""
    dist = {src: 0}
    frontier = deque([src])
    while frontier:
        seq = frontier.popleft()
        nxt = []
        for i in range(len(seq)):
            nxt.append(seq[:i] + seq[i + 1:])
            nxt.extend(seq[:i] + (a,) + seq[i + 1:] for a in TOY_CATALOG)
        if len(seq) < max_len:
            for i in range(len(seq) + 1):
                nxt.extend(seq[:i] + (a,) + seq[i:] for a in TOY_CATALOG)
        for n in nxt:
            if n not in dist:
                dist[n] = dist[seq] + 1
                frontier.append(n)
    return dist


def test_flat_scripts_are_minimal():
    progs = {s: parse_ir(flat_text(s)) for s in enumerate_flat(3) if s}
    bad = []
    for a, pa in progs.items():
        dist = _bfs_distances(a)
        for b, pb in progs.items():
            script = diff_ir(pa, pb)
            if len(script) != dist[b]:
                bad.append((a, b, len(script), dist[b]))
            elif normalize_ir(apply_ir(pa, script)) != normalize_ir(pb):
                bad.append((a, b))
    assert not bad, bad[:3]


# ---------------------------------------------------------------------------
# Properties over enumerated programs
# ---------------------------------------------------------------------------

_FOUR = [parse_ir(t) for t in enumerate_programs(4)]


@settings(max_examples=400, deadline=None)
@given(st.sampled_from(_FOUR), st.sampled_from(_FOUR))
def test_apply_inverts_diff(base, target):
    assert normalize_ir(apply_ir(base, diff_ir(base, target))) == normalize_ir(target)


@settings(max_examples=150, deadline=None)
@given(st.sampled_from(_FOUR), st.sampled_from(_FOUR))
def test_patch_commutes_with_compile(base, target):
    patched = patch_bpmn(compile_ir(base), diff_ir(base, target))
    assert structural_equal(patched, compile_ir(target))


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(_FOUR))
def test_self_diff_is_empty(prog):
    assert len(diff_ir(prog, prog)) == 0


# ---------------------------------------------------------------------------
# Preservation: ids removed/added are exactly those the script addresses
# ---------------------------------------------------------------------------


def test_preservation_on_corpus(corpus):
    checked = 0
    for case in corpus:
        if not case.is_update or case.prior_bpmn is None:
            continue
        script = diff_ir(case.prior_sequence, case.expected_sequence)
        patched = patch_bpmn(case.prior_bpmn, script)
        before, after = all_ids(case.prior_bpmn), all_ids(patched)
        expected_removed, expected_added = expected_changes(case.prior_bpmn, script)
        assert not any(isinstance(op, (WrapInLoop, UnwrapLoop)) for op in script.ops)
        assert before - after == expected_removed, case.uid
        assert len(after - before) == expected_added, case.uid
        if all(isinstance(op, (ReplaceCall, SetCondition)) for op in script.ops):
            assert patched.diagram == case.prior_bpmn.diagram, case.uid
        checked += 1
    assert checked > 0


def test_untouched_ids_survive_corpus_updates(corpus):
    for case in corpus:
        if not case.is_update or case.prior_bpmn is None:
            continue
        script = diff_ir(case.prior_sequence, case.expected_sequence)
        patched = patch_bpmn(case.prior_bpmn, script)
        assert structural_equal(patched, case.expected_bpmn), case.uid
        kept = all_ids(case.prior_bpmn) & all_ids(case.expected_bpmn)
        shifted = (DeleteStmt, InsertStmt, WrapInLoop, UnwrapLoop)
        if not any(isinstance(op, shifted) for op in script.ops):
            assert kept <= all_ids(patched), case.uid
        leaves = {n.id for n in case.prior_bpmn.nodes() if n.children is None}
        for node_id in kept & all_ids(patched) & leaves:
            old = case.prior_bpmn.diagram.shapes[node_id].bounds
            new = patched.diagram.shapes[node_id].bounds
            assert (old.width, old.height) == (new.width, new.height), (case.uid, node_id)


def test_patched_document_reparses(context_doc):
    script = diff_ir(decompile(context_doc), parse_ir(EXPECTED))
    patched = patch_bpmn(context_doc, script)
    assert parse_bpmn(serialize_bpmn(patched)) == patched
