"""``flowgen`` command line.

Exit codes: 0 success, 1 domain error (bad input file, failed patch, ...),
2 usage error.  A file argument of ``-`` reads standard input.
"""

from __future__ import annotations

import argparse
import os
import sys

from .bench import format_report, load_dataset, run_eval
from .bpmn import parse_bpmn, serialize_bpmn
from .compiler import compile_ir
from .decompiler import decompile
from .diff import EditScript, diff_ir, patch_bpmn
from .errors import FlowGenError
from .generation import PROVIDER_KINDS, FlowGenPipeline, PipelineConfig, ProviderSpec
from .ir import parse_ir, print_ir
from .retrieval import ActivityRetriever, RetrieverConfig, read_catalog

RETRIEVER_KINDS = {"ed": "edit_distance", "lexical": "similarity_backend"}


class UsageError(Exception):
    pass


def _read(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise FlowGenError(f"cannot read {path}: {exc.strerror}") from exc


def _write(text: str, path: str | None) -> None:
    if not text.endswith("\n"):
        text += "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise FlowGenError(f"cannot write {path}: {exc.strerror}") from exc


def _provider(text: str):
    try:
        spec = ProviderSpec.parse(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return spec.build()


def cmd_compile(args) -> None:
    _write(serialize_bpmn(compile_ir(parse_ir(_read(args.ir_file)))), args.output)


def cmd_decompile(args) -> None:
    _write(print_ir(decompile(parse_bpmn(_read(args.bpmn_file)))), args.output)


def cmd_diff(args) -> None:
    script = diff_ir(parse_ir(_read(args.base)), parse_ir(_read(args.target)))
    if args.json:
        _write(script.dumps(), args.output)
    else:
        _write(script.to_text() if script.ops else "# no changes", args.output)


def cmd_patch(args) -> None:
    if args.bpmn == "-" and args.script == "-":
        raise UsageError("only one of --bpmn and --script may read standard input")
    doc = parse_bpmn(_read(args.bpmn))
    _write(serialize_bpmn(patch_bpmn(doc, EditScript.loads(_read(args.script)))), args.output)


def cmd_retrieve(args) -> None:
    if args.top_k is not None and args.top_k < 1:
        raise UsageError("--top-k must be at least 1")
    catalog = read_catalog(args.catalog)
    config = RetrieverConfig(RETRIEVER_KINDS[args.retriever], top_k=args.top_k or 50)
    prior = parse_ir(_read(args.prior)) if args.prior else None
    try:
        hits = ActivityRetriever(catalog, config).retrieve(args.utterance, prior)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _write("\n".join(f"{e.id}\t{e.description}" for e in hits), args.output)


def cmd_generate(args) -> None:
    catalog = read_catalog(args.catalog)
    demos = [case.as_demonstration() for case in load_dataset(args.demos)] if args.demos else []
    provider = _provider(args.provider)
    config = PipelineConfig(
        RetrieverConfig(top_k=args.activity_top_k),
        RetrieverConfig("similarity_backend", top_k=args.demo_top_k),
    )
    pipeline = FlowGenPipeline(catalog, demos, config, provider)
    if args.prior_bpmn:
        out = pipeline.update(args.utterance, parse_bpmn(_read(args.prior_bpmn)), args.uid)
    else:
        out = pipeline.initial(args.utterance, args.uid)
    if out.generation.hallucinated:
        print(f"warning: calls outside the catalog: {', '.join(out.generation.hallucinated)}", file=sys.stderr)
    if args.ir_output:
        _write(print_ir(out.generation.program), args.ir_output)
    _write(serialize_bpmn(out.document), args.output)


def cmd_eval(args) -> None:
    if args.jobs is not None and args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    dataset = load_dataset(args.dataset)
    catalog = read_catalog(args.catalog)
    provider = _provider(args.provider)
    config = PipelineConfig(
        RetrieverConfig(RETRIEVER_KINDS[args.activity_retriever], top_k=args.activity_top_k),
        RetrieverConfig("similarity_backend", top_k=args.demo_top_k),
    )
    report = run_eval(dataset, catalog, config, provider, args.domain, args.jobs)
    if args.report:
        _write(report.dumps(), args.report)
    sys.stdout.write(format_report(report))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowgen", description="Workflow generation through a Python IR and BPMN.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("compile", help="IR program to BPMN XML")
    p.add_argument("ir_file")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("decompile", help="BPMN XML to IR program")
    p.add_argument("bpmn_file")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_decompile)

    p = sub.add_parser("diff", help="edit script turning one IR program into another")
    p.add_argument("--base", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--json", action="store_true", help="emit the script as JSON")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("patch", help="apply a JSON edit script to a BPMN file")
    p.add_argument("--bpmn", required=True)
    p.add_argument("--script", required=True)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_patch)

    p = sub.add_parser("retrieve", help="rank catalog activities for an utterance")
    p.add_argument("--utterance", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--retriever", choices=sorted(RETRIEVER_KINDS), default="ed")
    p.add_argument("--top-k", type=int)
    p.add_argument("--prior", help="current IR program; its activities are always included")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_retrieve)

    kinds = "|".join(f"{k}:<arg>" if k != "http" else "http[:<endpoint>]" for k in PROVIDER_KINDS)
    p = sub.add_parser("generate", help="generate or update a workflow from an utterance")
    p.add_argument("--utterance", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--demos", help="dataset directory used as the demonstration pool")
    p.add_argument("--prior-bpmn")
    p.add_argument("--provider", required=True, help=kinds)
    p.add_argument("--uid", type=int, help="case uid passed to table and oracle providers")
    p.add_argument("--activity-top-k", type=int, default=50)
    p.add_argument("--demo-top-k", type=int, default=5)
    p.add_argument("--ir-output", help="also write the generated IR program here")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="run the benchmark and report metrics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--provider", required=True, help=kinds)
    p.add_argument("--domain", choices=("in", "cross"), default="in")
    p.add_argument("--activity-retriever", choices=sorted(RETRIEVER_KINDS), default="ed")
    p.add_argument("--activity-top-k", type=int, default=50)
    p.add_argument("--demo-top-k", type=int, default=5)
    p.add_argument("--jobs", type=int, help=f"parallel cases (default {os.cpu_count()}, capped by the provider)")
    p.add_argument("--report", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"flowgen {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FlowGenError, ValueError) as exc:
        print(f"flowgen {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
