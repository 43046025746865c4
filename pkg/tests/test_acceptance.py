"""Acceptance criteria, one test per criterion.

The terminal summary (see conftest.py) prints one PASS/FAIL line per
criterion.  Each test attaches a short note with the measured value.
"""

from __future__ import annotations

import subprocess
import sys
import time
import xml.etree.ElementTree as ET
from pathlib import Path
from statistics import fmean

from doc_paths import all_ids, expected_changes
from enumeration import enumerate_programs

from flowgen.bench import run_eval
from flowgen.bpmn import serialize_bpmn
from flowgen.compiler import compile_ir, structural_equal
from flowgen.decompiler import decompile
from flowgen.diff import ReplaceCall, SetCondition, apply_ir, diff_ir, patch_bpmn
from flowgen.generation import MockOracleProvider, PipelineConfig
from flowgen.ir import collect_activities, normalize_ir, parse_ir, print_ir
from flowgen.retrieval import ActivityRetriever, RetrieverConfig, activities_recall

TESTS = Path(__file__).parent
ED_TARGET, ED_TOLERANCE = 0.81, 0.08


def _sources(corpus):
    for case in corpus:
        if case.prior_text is not None:
            yield case.prior_text
        yield case.expected_text


def test_criterion_1_ir_round_trip(corpus, record_property):
    texts = list(_sources(corpus))
    start = time.perf_counter()
    bad = []
    for text in texts:
        once = print_ir(parse_ir(text))
        if print_ir(parse_ir(once)) != once:
            bad.append(text)
    elapsed = time.perf_counter() - start
    record_property("note", f"{len(texts)} sequences, {len(bad)} failures, {elapsed:.3f}s")
    assert not bad
    assert len(corpus) == 101
    assert elapsed < 1.0


def test_criterion_2_bpmn_oracle_round_trip(corpus, record_property):
    pairs = []
    for case in corpus:
        if case.prior_bpmn is not None:
            pairs.append((case.uid, case.prior_sequence, case.prior_bpmn))
        if case.expected_bpmn is not None:
            pairs.append((case.uid, case.expected_sequence, case.expected_bpmn))
    bad = []
    for uid, program, doc in pairs:
        if normalize_ir(decompile(doc)) != normalize_ir(program):
            bad.append((uid, "decompile"))
        if not structural_equal(compile_ir(program), doc):
            bad.append((uid, "compile"))
    record_property("note", f"{len(pairs)} sequence/BPMN pairs, {len(bad)} failures")
    assert pairs and not bad, bad[:5]


def _geometry_problems(base_doc, patched, script, removed):
    """Untouched elements must keep size; moves are horizontal only."""
    problems = []
    containers = {n.id for n in base_doc.nodes() if n.children is not None}
    for element_id in all_ids(base_doc) - removed:
        old = base_doc.diagram.shapes[element_id].bounds
        new = patched.diagram.shapes[element_id].bounds
        if old.y != new.y:
            problems.append((element_id, "moved vertically"))
        if (old.width, old.height) != (new.width, new.height) and element_id not in containers:
            problems.append((element_id, "resized"))
    if all(isinstance(op, (ReplaceCall, SetCondition)) for op in script.ops) and patched.diagram != base_doc.diagram:
        problems.append(("diagram", "changed by a rename-only script"))
    return problems


def test_criterion_3_diff_commutation(corpus, record_property):
    updates = [c for c in corpus if c.is_update]
    bad = []
    kept_exact = kept_total = 0
    for case in updates:
        base_doc = case.prior_bpmn if case.prior_bpmn is not None else compile_ir(case.prior_sequence)
        target_doc = case.expected_bpmn if case.expected_bpmn is not None else compile_ir(case.expected_sequence)
        script = diff_ir(case.prior_sequence, case.expected_sequence)
        patched = patch_bpmn(base_doc, script)
        if not structural_equal(patched, target_doc):
            bad.append((case.uid, "not structurally equal"))
            continue
        removed, added = expected_changes(base_doc, script)
        before, after = all_ids(base_doc), all_ids(patched)
        if before - after != removed:
            bad.append((case.uid, "removed ids differ from the script"))
        if len(after - before) != added:
            bad.append((case.uid, "added ids differ from the script"))
        bad.extend((case.uid, p) for p in _geometry_problems(base_doc, patched, script, removed))
        for element_id in before - removed:
            kept_total += 1
            kept_exact += base_doc.diagram.shapes[element_id] == patched.diagram.shapes[element_id]
    record_property(
        "note",
        f"{len(updates)} update cases, {len(bad)} failures; "
        f"{kept_exact}/{kept_total} untouched shapes at identical bounds, the rest shifted horizontally",
    )
    assert updates and not bad, bad[:5]


def test_criterion_4_exhaustive_small_programs(record_property):
    programs = [parse_ir(t) for t in enumerate_programs(3)]
    normalized = [normalize_ir(p) for p in programs]
    round_trip_bad = [i for i, p in enumerate(programs) if normalize_ir(decompile(compile_ir(p))) != normalized[i]]
    diff_bad = []
    for i, base in enumerate(programs):
        for j, target in enumerate(programs):
            if normalize_ir(apply_ir(base, diff_ir(base, target))) != normalized[j]:
                diff_bad.append((i, j))
    record_property(
        "note",
        f"{len(programs)} programs, {len(programs) ** 2} pairs; "
        f"{len(round_trip_bad)} round-trip and {len(diff_bad)} diff failures",
    )
    assert not round_trip_bad and not diff_bad


def test_criterion_5_oracle_end_to_end(corpus, corpus_catalog, record_property):
    start = time.perf_counter()
    report = run_eval(corpus, corpus_catalog, PipelineConfig(), MockOracleProvider.from_cases(corpus), jobs=1)
    elapsed = time.perf_counter() - start
    agg = report.aggregates
    record_property(
        "note",
        f"EM={agg['exact_match']} hallucination={agg['hallucination_rate']} "
        f"F1={agg['syntax_f1']} over {agg['cases']} cases in {elapsed:.1f}s",
    )
    assert agg["cases"] == 101 and agg["errored"] == 0
    assert agg["exact_match"] == 1.0
    assert agg["hallucination_rate"] == 0.0
    assert agg["syntax_f1"] == 1.0
    assert elapsed < 30.0


def test_criterion_6_compression(corpus, corpus_root, record_property):
    ours = [
        len(serialize_bpmn(compile_ir(c.expected_sequence)).encode("utf-8"))
        / len(print_ir(c.expected_sequence).encode("utf-8"))
        for c in corpus
    ]
    as_shipped = []
    for c in corpus:
        ref = Path(corpus_root) / "output" / f"uid_{c.uid}_output.bpmn"
        if ref.exists():
            ET.fromstring(ref.read_bytes())
            as_shipped.append(ref.stat().st_size / len(print_ir(c.expected_sequence).encode("utf-8")))
    note = f"mean ratio {fmean(ours):.1f} (canonical serialization)"
    if as_shipped:
        note += f", {fmean(as_shipped):.1f} for the corpus BPMN files"
    record_property("note", note)
    assert fmean(ours) >= 10


def _mean_recall(corpus, catalog, k):
    retriever = ActivityRetriever(catalog, RetrieverConfig(top_k=k))
    return fmean(
        activities_recall(retriever.retrieve(c.utterance, c.prior_sequence), collect_activities(c.expected_sequence))
        for c in corpus
    )


def test_criterion_7_ed_retriever_calibration(corpus, corpus_catalog, corpus_is_official, record_property):
    recall = {k: _mean_recall(corpus, corpus_catalog, k) for k in (10, 50, 100)}
    within = abs(recall[100] - ED_TARGET) <= ED_TOLERANCE
    source = "official dataset" if corpus_is_official else "synthetic corpus, absolute value reported only"
    record_property(
        "note",
        "recall@10/50/100 = " + "/".join(f"{recall[k]:.4f}" for k in (10, 50, 100))
        + f" ({source}; target {ED_TARGET}±{ED_TOLERANCE}: {'met' if within else 'missed'})",
    )
    assert recall[10] < recall[50] < recall[100]
    if corpus_is_official:
        assert within


# Unit tests encoding each tagged worked example, grouped by module.
EXAMPLE_TESTS = [
    "test_ir.py::TestParse::test_empty_source_rejected",
    "test_ir.py::TestParse::test_unclosed_paren_reports_line_one",
    "test_ir.py::test_print_idempotent",
    "test_ir.py::TestNormalize::test_alpha_equivalence",
    "test_ir.py::test_normalize_idempotent_and_keeps_activities",
    "test_ir.py::TestCollectActivities::test_user_task_excluded",
    "test_ir.py::TestCollectActivities::test_multiplicity",
    "test_bpmn.py::TestSerialize::test_empty_process_rejected",
    "test_bpmn.py::test_generated_documents_round_trip",
    "test_compiler.py::TestCompile::test_single_user_task",
    "test_compiler.py::TestStructuralEqual::test_reserialized_self",
    "test_compiler.py::TestStructuralEqual::test_canonical_print_compiles_equal",
    "test_decompiler.py::TestDecompile::test_no_tasks_is_an_error",
    "test_decompiler.py::test_enumerated_round_trip_four_statements",
    "test_diff.py::TestDiff::test_identical_programs_give_empty_script",
    "test_diff.py::test_apply_inverts_diff",
    "test_diff.py::test_flat_scripts_are_minimal",
    "test_diff.py::TestApply::test_empty_script_is_identity",
    "test_diff.py::TestApply::test_deleting_last_statement_leaves_empty_program",
    "test_diff.py::TestApply::test_empty_result_is_flagged_when_patching",
    "test_diff.py::TestApply::test_insert_at_end_appends",
    "test_diff.py::TestPatch::test_empty_script_returns_base",
    "test_diff.py::TestPatch::test_insert_into_two_task_flow",
    "test_retrieval.py::TestCatalog::test_empty_is_valid",
    "test_retrieval.py::TestCatalog::test_duplicate_rejected",
    "test_retrieval.py::TestActivityRetrieval::test_identical_description_ranks_first",
    "test_retrieval.py::TestLevenshtein::test_kitten_sitting",
    "test_retrieval.py::TestLevenshtein::test_matches_recursive_definition",
    "test_retrieval.py::TestDemoRetrieval::test_top_k_larger_than_pool",
    "test_retrieval.py::TestDemoRetrieval::test_identical_utterance_first",
    "test_retrieval.py::TestRecall::test_superset",
    "test_retrieval.py::TestRecall::test_half",
    "test_generation.py::TestPrompt::test_no_prior_block",
    "test_generation.py::TestPrompt::test_counts_and_order",
    "test_generation.py::test_update_with_oracle",
    "test_generation.py::TestGrounding::test_one_known_one_unknown",
    "test_generation.py::test_initial_with_oracle",
    "test_generation.py::test_initial_with_prose_fails",
    "test_generation.py::test_http_golden_prompt",
    "test_generation.py::test_echo_gives_empty_script",
    "test_generation.py::test_hallucination_is_flagged_but_applied",
    "test_bench.py::TestLoading::test_missing_output_reference",
    "test_bench.py::TestMetrics::test_exact_match_identical",
    "test_bench.py::TestMetrics::test_exact_match_extra_statement",
    "test_bench.py::TestMetrics::test_hallucination_examples",
    "test_bench.py::TestMetrics::test_syntax_f1_identical",
    "test_bench.py::TestMetrics::test_syntax_f1_prefix",
    "test_bench.py::TestMetrics::test_syntax_f1_matches_text_oracle",
    "test_bench.py::TestMetrics::test_syntax_f1_disjoint",
    "test_bench.py::test_cross_mode_with_oracle",
    "test_bench.py::test_errors_are_recorded_not_raised",
    "test_bench.py::test_one_wrong_case",
    "test_cli.py::test_compile_then_decompile",
]


def test_criterion_8_worked_examples(tmp_path, record_property):
    junit = tmp_path / "examples.xml"
    nodes = [str(TESTS / n.split("::")[0]) + "::" + n.split("::", 1)[1] for n in EXAMPLE_TESTS]
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", f"--junitxml={junit}", *nodes],
        cwd=TESTS.parent,
        capture_output=True,
        text=True,
        check=False,
    )
    results: dict[tuple[str, str], list[bool]] = {}
    for case in ET.parse(junit).getroot().iter("testcase"):
        ok = not any(child.tag in ("failure", "error", "skipped") for child in case)
        results.setdefault((case.get("classname"), case.get("name").split("[")[0]), []).append(ok)
    missing, failing = [], []
    for node in EXAMPLE_TESTS:
        module, *rest = node.split("::")
        key = (".".join(["tests", module[:-3], *rest[:-1]]), rest[-1])
        if key not in results:
            missing.append(node)
        elif not all(results[key]):
            failing.append(node)
    passed = len(EXAMPLE_TESTS) - len(missing) - len(failing)
    record_property("note", f"{passed}/{len(EXAMPLE_TESTS)} example tests passed")
    assert not missing, missing
    assert not failing, failing
    assert proc.returncode == 0, proc.stdout[-2000:]
