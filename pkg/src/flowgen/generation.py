"""Prompt assembly, language-model providers, code extraction and grounding.

The pipeline for a new workflow is retrieve activities -> retrieve
demonstrations -> assemble prompt -> model -> parse -> compile.  Updating an
existing workflow first decompiles it, passes the program to the prompt, and
finishes by diffing the model's program against it and patching the
original BPMN.
"""

from __future__ import annotations

import json
import os
import re
import textwrap
import threading
import urllib.error
import urllib.request
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import yaml

from .bpmn import BpmnDocument
from .compiler import compile_ir
from .decompiler import decompile
from .diff import EditScript, diff_ir, patch_bpmn
from .errors import ExtractionError, IRSyntaxError, ProviderError
from .ir import Program, iter_calls, parse_ir, print_ir
from .retrieval import (
    ActivityEntry,
    ActivityRetriever,
    Demonstration,
    DemoRetriever,
    RetrieverConfig,
)

ENDPOINT_ENV = "FLOWGEN_LLM_ENDPOINT"
API_KEY_ENV = "FLOWGEN_LLM_API_KEY"

SYSTEM_INSTRUCTIONS = """\
You write business workflows as short Python programs.
Answer with a single ```python code block and nothing else.
Allowed statements: assignments of a call (x = Activity()), bare calls,
if/else, `for <name> in <name>:` loops and while loops.
Call only activities from the list below, spelled exactly as listed.
For a step done by a person with no matching activity, write
user_task("<short description of the step>").
When a current workflow is given, return the complete updated program."""

IN_CATALOG = "in_catalog"
USER_TASK_VERDICT = "user_task"
HALLUCINATED = "hallucinated"


@dataclass(frozen=True)
class PromptBundle:
    system_instructions: str
    activity_block: str
    demo_block: str
    prior_block: str | None
    utterance: str
    activity_ids: tuple[str, ...] = ()
    demo_count: int = 0

    def render(self) -> str:
        parts = [self.system_instructions, "## Activities\n" + self.activity_block]
        if self.demo_block:
            parts.append("## Examples\n" + self.demo_block)
        if self.prior_block is not None:
            parts.append("## Current workflow\n```python\n" + self.prior_block + "\n```")
        parts.append("## Request\n" + self.utterance.strip() + "\n\n## Answer")
        return "\n\n".join(parts) + "\n"


def _fence(program: Program) -> str:
    return "```python\n" + print_ir(program) + "\n```"


def assemble_prompt(
    utterance: str,
    activities: Sequence[ActivityEntry],
    demos: Sequence[Demonstration],
    prior: Program | None = None,
) -> PromptBundle:
    """Deterministic prompt; blocks keep the retrieval order."""
    if not activities:
        raise ValueError("a prompt needs at least one activity")
    activity_block = "\n".join(f"- {a.id}: {' '.join(a.description.split())}" for a in activities)
    examples = []
    for n, demo in enumerate(demos, 1):
        lines = [f"### Example {n}", f"Request: {' '.join(demo.utterance.split())}"]
        if demo.prior_sequence is not None:
            lines.append("Current workflow:\n" + _fence(demo.prior_sequence))
        lines.append("Answer:\n" + _fence(demo.expected))
        examples.append("\n".join(lines))
    return PromptBundle(
        SYSTEM_INSTRUCTIONS,
        activity_block,
        "\n\n".join(examples),
        print_ir(prior) if prior is not None else None,
        utterance,
        tuple(a.id for a in activities),
        len(demos),
    )


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProviderRequest:
    prompt: str
    uid: int | None = None
    utterance: str | None = None


class Provider(ABC):
    """A text-completion model.  ``max_in_flight`` of ``None`` means unlimited."""

    kind: str = ""
    max_in_flight: int | None = None

    @abstractmethod
    def complete(self, request: ProviderRequest) -> str: ...

    def describe(self) -> str:
        return self.kind


class MockTableProvider(Provider):
    """Canned responses keyed by case uid, or by the utterance text."""

    kind = "mock_table"

    def __init__(self, table: Mapping, source: str = ""):
        self.table = {" ".join(str(k).split()): v for k, v in table.items()}
        self.source = source

    @classmethod
    def from_yaml(cls, path: str) -> MockTableProvider:
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ProviderError(f"cannot read response table {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ProviderError(f"response table {path} must map case uids to response text")
        return cls(data, path)

    def complete(self, request: ProviderRequest) -> str:
        keys = [str(request.uid)] if request.uid is not None else []
        if request.utterance is not None:
            keys.append(" ".join(request.utterance.split()))
        for key in keys:
            if key in self.table:
                return str(self.table[key])
        raise ProviderError(f"no canned response for case {request.uid}")

    def describe(self) -> str:
        return f"mock_table:{self.source}" if self.source else self.kind


class MockOracleProvider(Provider):
    """Answers with the gold program, looked up by uid or by utterance."""

    kind = "mock_oracle"

    def __init__(self, by_uid: Mapping[int, Program], by_utterance: Mapping[str, Program] | None = None, source: str = ""):
        self.by_uid = dict(by_uid)
        self.by_utterance = {" ".join(k.split()): v for k, v in (by_utterance or {}).items()}
        self.source = source

    @classmethod
    def from_cases(cls, cases, source: str = "") -> MockOracleProvider:
        return cls(
            {c.uid: c.expected_sequence for c in cases},
            {c.utterance: c.expected_sequence for c in cases},
            source,
        )

    def complete(self, request: ProviderRequest) -> str:
        gold = self.by_uid.get(request.uid) if request.uid is not None else None
        if gold is None and request.utterance is not None:
            gold = self.by_utterance.get(" ".join(request.utterance.split()))
        if gold is None:
            raise ProviderError(f"oracle has no gold program for case {request.uid}")
        return _fence(gold)

    def describe(self) -> str:
        return f"mock_oracle:{self.source}" if self.source else self.kind


class HttpProvider(Provider):
    """POST ``{"prompt", "max_tokens"}`` as JSON; expects ``{"text"}`` back."""

    kind = "http"

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        max_tokens: int = 1024,
        timeout: float = 120.0,
        max_in_flight: int = 4,
    ):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint:
            raise ProviderError(f"http provider needs an endpoint (set {ENDPOINT_ENV})")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def complete(self, request: ProviderRequest) -> str:
        body = json.dumps({"prompt": request.prompt, "max_tokens": self.max_tokens}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        with self._slots:
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = resp.read()
            except urllib.error.HTTPError as exc:
                raise ProviderError(f"provider returned HTTP {exc.code}") from exc
            except (urllib.error.URLError, OSError) as exc:
                raise ProviderError(f"provider unreachable: {exc}") from exc
        try:
            text = json.loads(payload)["text"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderError("provider response is not JSON with a 'text' field") from exc
        if not isinstance(text, str):
            raise ProviderError("provider 'text' field is not a string")
        return text

    def describe(self) -> str:
        return f"http:{self.endpoint}"


PROVIDER_KINDS = ("mock-table", "mock-oracle", "http")


@dataclass(frozen=True)
class ProviderSpec:
    kind: str
    arg: str | None = None
    max_tokens: int = 1024
    temperature: float = 0.0  # greedy decoding; informational for custom adapters

    @classmethod
    def parse(cls, text: str) -> ProviderSpec:
        kind, _, arg = text.partition(":")
        kind = kind.strip().lower().replace("_", "-")
        if kind not in PROVIDER_KINDS:
            raise ValueError(f"unknown provider kind {kind!r}; valid kinds: {', '.join(PROVIDER_KINDS)}")
        if kind in ("mock-table", "mock-oracle") and not arg:
            raise ValueError(f"provider {kind} needs an argument: {kind}:<path>")
        return cls(kind, arg or None)

    def build(self, dataset_loader: Callable[[str], list] | None = None) -> Provider:
        if self.kind == "mock-table":
            return MockTableProvider.from_yaml(self.arg)
        if self.kind == "mock-oracle":
            if dataset_loader is None:
                from .bench import load_dataset as dataset_loader
            return MockOracleProvider.from_cases(dataset_loader(self.arg), self.arg)
        return HttpProvider(endpoint=self.arg, max_tokens=self.max_tokens)


# ---------------------------------------------------------------------------
# Extraction and grounding
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```[ \t]*([A-Za-z0-9_+-]*)[ \t]*\n(.*?)```", re.DOTALL)


def extract_code(text: str) -> str:
    """The program text inside a model response.

    Tries, in order: the first fenced block, the whole response, the first
    indented block.
    """
    m = _FENCE_RE.search(text)
    if m:
        return m.group(2).strip("\n")
    stripped = text.strip("\n")
    if stripped.strip():
        try:
            parse_ir(textwrap.dedent(stripped))
            return textwrap.dedent(stripped)
        except IRSyntaxError:
            pass
    block: list[str] = []
    for line in text.splitlines():
        if line.startswith(("    ", "\t")) and line.strip():
            block.append(line)
        elif block and not line.strip():
            block.append("")
        elif block:
            break
    if block:
        return textwrap.dedent("\n".join(block)).strip("\n")
    raise ExtractionError("response contains no code block", raw_text=text)


def classify_calls(program: Program, catalog_ids: set[str] | frozenset[str]) -> tuple[tuple[str, str], ...]:
    """One verdict per call: in_catalog, user_task or hallucinated."""
    verdicts = []
    for call in iter_calls(program):
        if call.is_user_task:
            verdicts.append((call.callee, USER_TASK_VERDICT))
        elif call.callee in catalog_ids:
            verdicts.append((call.callee, IN_CATALOG))
        else:
            verdicts.append((call.callee, HALLUCINATED))
    return tuple(verdicts)


@dataclass(frozen=True)
class GenerationResult:
    raw_text: str
    program: Program
    grounding: tuple[tuple[str, str], ...]

    @property
    def hallucinated(self) -> list[str]:
        return [c for c, v in self.grounding if v == HALLUCINATED]

    @property
    def hallucination_rate(self) -> float:
        graded = [v for _, v in self.grounding if v != USER_TASK_VERDICT]
        return graded.count(HALLUCINATED) / len(graded) if graded else 0.0


def generate_ir(
    bundle: PromptBundle,
    provider: Provider,
    catalog_ids: set[str] | frozenset[str],
    uid: int | None = None,
) -> GenerationResult:
    raw = provider.complete(ProviderRequest(bundle.render(), uid, bundle.utterance))
    code = extract_code(raw)
    try:
        program = parse_ir(code)
    except IRSyntaxError as exc:
        exc.raw_text = raw
        raise
    return GenerationResult(raw, program, classify_calls(program, catalog_ids))


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    activities: RetrieverConfig = field(default_factory=lambda: RetrieverConfig(top_k=50))
    demos: RetrieverConfig = field(default_factory=lambda: RetrieverConfig("similarity_backend", top_k=5))

    def describe(self) -> dict:
        return {
            "activity_retriever": self.activities.kind,
            "activity_top_k": self.activities.top_k,
            "demo_retriever": self.demos.kind,
            "demo_top_k": self.demos.top_k,
        }


@dataclass
class PipelineOutput:
    document: BpmnDocument | None = None
    generation: GenerationResult | None = None
    prompt: PromptBundle | None = None
    activities: list[ActivityEntry] = field(default_factory=list)
    demos: list[Demonstration] = field(default_factory=list)
    prior: Program | None = None
    script: EditScript | None = None


class FlowGenPipeline:
    """Retrieval indexes are built once; each call is independent."""

    def __init__(
        self,
        catalog: Sequence[ActivityEntry],
        demos: Sequence[Demonstration],
        config: PipelineConfig,
        provider: Provider,
    ):
        self.catalog = list(catalog)
        self.catalog_ids = frozenset(e.id for e in self.catalog)
        self.config = config
        self.provider = provider
        self.activity_retriever = ActivityRetriever(self.catalog, config.activities)
        self.demo_retriever = DemoRetriever(demos, config.demos)

    def prepare(
        self,
        utterance: str,
        prior: Program | None = None,
        exclude: Callable[[Demonstration], bool] | None = None,
    ) -> PipelineOutput:
        """Retrieval and prompt assembly, no model call."""
        activities = self.activity_retriever.retrieve(utterance, prior)
        demos = self.demo_retriever.retrieve(utterance, prior, exclude=exclude)
        prompt = assemble_prompt(utterance, activities, demos, prior)
        return PipelineOutput(prompt=prompt, activities=activities, demos=demos, prior=prior)

    def initial(self, utterance: str, uid: int | None = None, exclude=None, prepared: PipelineOutput | None = None) -> PipelineOutput:
        out = prepared or self.prepare(utterance, None, exclude)
        out.generation = generate_ir(out.prompt, self.provider, self.catalog_ids, uid)
        out.document = compile_ir(out.generation.program)
        return out

    def update(
        self,
        utterance: str,
        prior_doc: BpmnDocument,
        uid: int | None = None,
        exclude=None,
        prepared: PipelineOutput | None = None,
    ) -> PipelineOutput:
        out = prepared or self.prepare(utterance, self.decompile(prior_doc), exclude)
        out.generation = generate_ir(out.prompt, self.provider, self.catalog_ids, uid)
        out.script = diff_ir(out.prior, out.generation.program)
        out.document = patch_bpmn(prior_doc, out.script)
        return out

    @staticmethod
    def decompile(prior_doc: BpmnDocument) -> Program:
        return decompile(prior_doc)


def run_initial(utterance, catalog, demos, config: PipelineConfig, provider: Provider, uid: int | None = None) -> PipelineOutput:
    return FlowGenPipeline(catalog, demos, config, provider).initial(utterance, uid)


def run_update(
    utterance, prior_doc: BpmnDocument, catalog, demos, config: PipelineConfig, provider: Provider, uid: int | None = None
) -> PipelineOutput:
    return FlowGenPipeline(catalog, demos, config, provider).update(utterance, prior_doc, uid)
