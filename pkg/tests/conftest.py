from __future__ import annotations

import os
import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).parent
DATA = TESTS / "data"
sys.path.insert(0, str(TESTS))

import synthetic_corpus  # noqa: E402

from flowgen.bench import load_dataset  # noqa: E402
from flowgen.bpmn import parse_bpmn  # noqa: E402
from flowgen.retrieval import read_catalog  # noqa: E402

# Set FLOWBENCH_ROOT to a directory holding the official benchmark
# (*.yaml + context/ + output/) to run the suite against it; the catalog is
# read from FLOWBENCH_CATALOG or <root>/catalog.json.
OFFICIAL_ROOT = os.environ.get("FLOWBENCH_ROOT")


@pytest.fixture(scope="session")
def corpus_root(tmp_path_factory) -> Path:
    if OFFICIAL_ROOT:
        return Path(OFFICIAL_ROOT)
    return synthetic_corpus.generate(tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="session")
def corpus_is_official() -> bool:
    return bool(OFFICIAL_ROOT)


@pytest.fixture(scope="session")
def corpus(corpus_root):
    return load_dataset(corpus_root)


@pytest.fixture(scope="session")
def corpus_catalog(corpus_root):
    return read_catalog(os.environ.get("FLOWBENCH_CATALOG") or str(corpus_root / "catalog.json"))


@pytest.fixture(scope="session")
def small_catalog():
    return read_catalog(str(DATA / "catalog.json"))


@pytest.fixture(scope="session")
def uid97():
    return load_dataset(DATA / "flowbench")[0]


@pytest.fixture
def context_doc():
    return parse_bpmn((DATA / "flowbench" / "context" / "uid_97_context.bpmn").read_bytes())


@pytest.fixture
def output_doc():
    return parse_bpmn((DATA / "flowbench" / "output" / "uid_97_output.bpmn").read_bytes())


@pytest.fixture
def output_bytes():
    return (DATA / "flowbench" / "output" / "uid_97_output.bpmn").read_bytes()


# ---------------------------------------------------------------------------
# Acceptance summary: one PASS/FAIL line per criterion
# ---------------------------------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        notes = [content for title, content in report.user_properties if title == "note"]
        _ACCEPTANCE[name] = (outcome, "; ".join(notes))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        outcome, note = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{outcome} {name}" + (f"  ({note})" if note else ""))
