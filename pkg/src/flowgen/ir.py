"""The restricted Python intermediate representation.

Workflows are written in a tiny subset of Python: assignments whose right
hand side is a call, bare calls, ``if``/``else``, ``for <name> in <name>`` and
``while`` loops.  Activities are plain function calls named after catalog ids;
steps performed by people use the reserved ``user_task("...")`` call.

Nodes are frozen dataclasses holding tuples, so ``==`` is structural equality
and values can be shared freely between threads.
"""

from __future__ import annotations

import ast
import json
import keyword
import re
from collections.abc import Iterator
from dataclasses import dataclass
from typing import Union

from .errors import IRSyntaxError, SourceSpan

USER_TASK = "user_task"
INDENT = "  "

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_FOR_HEADER_RE = re.compile(r"for\s+([A-Za-z_]\w*)\s+in\s+([A-Za-z_]\w*)\Z")

# statement keywords we recognise only in order to reject them with a clear message
_UNSUPPORTED = frozenset(
    {
        "def", "class", "import", "from", "return", "try", "except", "finally",
        "with", "raise", "pass", "break", "continue", "del", "global",
        "nonlocal", "assert", "yield", "lambda", "async", "await",
    }
)
_CONDITION_WORDS = frozenset(keyword.kwlist)


def is_identifier(name: str) -> bool:
    return bool(_IDENT_RE.match(name)) and not keyword.iskeyword(name)


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StringLiteral:
    value: str


@dataclass(frozen=True)
class IdentifierRef:
    name: str


@dataclass(frozen=True)
class KeywordArg:
    name: str
    value: Union[StringLiteral, IdentifierRef]


Arg = Union[StringLiteral, IdentifierRef, KeywordArg]


@dataclass(frozen=True)
class Call:
    callee: str
    args: tuple[Arg, ...] = ()

    @property
    def is_user_task(self) -> bool:
        return self.callee == USER_TASK

    @property
    def user_task_text(self) -> str:
        """Description of a ``user_task("...")`` call."""
        return self.args[0].value  # type: ignore[union-attr]


@dataclass(frozen=True)
class Assign:
    target: str
    call: Call


@dataclass(frozen=True)
class ExprCall:
    call: Call


@dataclass(frozen=True)
class If:
    condition: str
    then_body: tuple[Stmt, ...]
    else_body: tuple[Stmt, ...] | None = None


@dataclass(frozen=True)
class For:
    loop_var: str
    iterable: str
    body: tuple[Stmt, ...]

    @property
    def header(self) -> str:
        return f"for {self.loop_var} in {self.iterable}"


@dataclass(frozen=True)
class While:
    condition: str
    body: tuple[Stmt, ...]

    @property
    def header(self) -> str:
        return f"while {self.condition}"


Stmt = Union[Assign, ExprCall, If, For, While]
SimpleStmt = (Assign, ExprCall)
LoopStmt = (For, While)


@dataclass(frozen=True)
class Program:
    statements: tuple[Stmt, ...]

    def __len__(self) -> int:
        return len(self.statements)

    def __iter__(self) -> Iterator[Stmt]:
        return iter(self.statements)


def stmt_call(stmt: Stmt) -> Call | None:
    if isinstance(stmt, (Assign, ExprCall)):
        return stmt.call
    return None


def child_bodies(stmt: Stmt) -> list[tuple[Stmt, ...]]:
    if isinstance(stmt, If):
        return [stmt.then_body] + ([stmt.else_body] if stmt.else_body is not None else [])
    if isinstance(stmt, (For, While)):
        return [stmt.body]
    return []


def walk(statements) -> Iterator[Stmt]:
    """Preorder traversal: a compound statement, then its then/else bodies."""
    for stmt in statements:
        yield stmt
        for body in child_bodies(stmt):
            yield from walk(body)


def iter_calls(program: Program) -> Iterator[Call]:
    for stmt in walk(program.statements):
        call = stmt_call(stmt)
        if call is not None:
            yield call


def collect_activities(program: Program) -> list[str]:
    """Callee names in document order, multiplicity kept, ``user_task`` excluded."""
    return [c.callee for c in iter_calls(program) if not c.is_user_task]


# ---------------------------------------------------------------------------
# Lexical helpers
# ---------------------------------------------------------------------------

_STRING_RE = re.compile(r"""'(?:\\.|[^'\\\n])*'|"(?:\\.|[^"\\\n])*\"""")
_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<string>'(?:\\.|[^'\\\n])*'|"(?:\\.|[^"\\\n])*")
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>==|!=|<=|>=|[()\[\]{},=:.])
  | (?P<other>.)
    """,
    re.VERBOSE,
)


def collapse_whitespace(text: str) -> str:
    """Collapse whitespace runs outside string literals to single spaces."""
    out = []
    pos = 0
    for m in _STRING_RE.finditer(text):
        out.append(re.sub(r"\s+", " ", text[pos : m.start()]))
        out.append(m.group())
        pos = m.end()
    out.append(re.sub(r"\s+", " ", text[pos:]))
    return "".join(out).strip()


def rename_identifiers(text: str, resolve) -> str:
    """Rewrite free-standing identifiers of an opaque expression.

    ``resolve(name)`` returns the replacement (or the name itself).  Attribute
    names after ``.``, keyword-argument names, keywords and string contents
    are left alone.
    """
    out: list[str] = []
    tokens = list(_TOKEN_RE.finditer(text))
    for i, tok in enumerate(tokens):
        value = tok.group()
        if tok.lastgroup == "name" and value not in _CONDITION_WORDS:
            prev = next((t for t in reversed(tokens[:i]) if t.lastgroup != "ws"), None)
            nxt = next((t for t in tokens[i + 1 :] if t.lastgroup != "ws"), None)
            after_dot = prev is not None and prev.group() == "."
            is_kwarg = nxt is not None and nxt.group() == "="
            if not after_dot and not is_kwarg:
                value = resolve(value)
        out.append(value)
    return "".join(out)


def identifiers_in(text: str) -> list[str]:
    """Free-standing identifiers of an expression, in order of appearance."""
    found: list[str] = []
    rename_identifiers(text, lambda n: found.append(n) or n)
    return found


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


@dataclass
class _Line:
    lineno: int
    indent: int
    text: str


def _logical_lines(source: str) -> list[_Line]:
    """Strip comments, join bracket continuations, record indentation."""
    physical = source.split("\n")
    lines: list[_Line] = []
    i = 0
    while i < len(physical):
        raw = physical[i].rstrip("\r")
        lineno = i + 1
        stripped = raw.lstrip(" \t")
        leading = raw[: len(raw) - len(stripped)]
        if "\t" in leading and stripped:
            raise IRSyntaxError("tabs are not allowed in indentation", SourceSpan(lineno, leading.index("\t") + 1))
        indent = len(leading)
        parts: list[str] = []
        stack: list[tuple[str, int, int]] = []
        line_text, line_no, offset = stripped, lineno, indent
        while True:
            code, stack = _scan(line_text, line_no, offset, stack)
            parts.append(code)
            if not stack:
                break
            i += 1
            if i >= len(physical):
                opener, oline, ocol = stack[-1]
                raise IRSyntaxError(f"unclosed '{opener}'", SourceSpan(oline, ocol))
            nxt = physical[i].rstrip("\r")
            line_no, offset = i + 1, len(nxt) - len(nxt.lstrip())
            line_text = nxt.lstrip()
        text = " ".join(p.strip() for p in parts if p.strip())
        if text:
            lines.append(_Line(lineno, indent, text))
        i += 1
    return lines


_CLOSERS = {")": "(", "]": "[", "}": "{"}


def _scan(text: str, lineno: int, offset: int, stack):
    """Drop a trailing comment and track open brackets across one physical line."""
    stack = list(stack)
    quote = None
    j = 0
    while j < len(text):
        ch = text[j]
        if quote:
            if ch == "\\":
                j += 2
                continue
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "#":
            return text[:j], stack
        elif ch in "([{":
            stack.append((ch, lineno, offset + j + 1))
        elif ch in _CLOSERS:
            if not stack or stack[-1][0] != _CLOSERS[ch]:
                raise IRSyntaxError(f"unmatched '{ch}'", SourceSpan(lineno, offset + j + 1))
            stack.pop()
        j += 1
    if quote:
        raise IRSyntaxError("unterminated string literal", SourceSpan(lineno, offset + 1))
    return text, stack


class _Parser:
    def __init__(self, lines: list[_Line]):
        self.lines = lines
        self.pos = 0

    def error(self, message: str, line: _Line, column: int | None = None) -> IRSyntaxError:
        return IRSyntaxError(message, SourceSpan(line.lineno, (column or line.indent + 1)))

    def peek(self) -> _Line | None:
        return self.lines[self.pos] if self.pos < len(self.lines) else None

    def parse_block(self, indent: int, enclosing: tuple[int, ...]) -> tuple[Stmt, ...]:
        stmts: list[Stmt] = []
        while (line := self.peek()) is not None:
            if line.indent < indent:
                if line.indent not in enclosing:
                    raise self.error("unindent does not match any outer indentation level", line)
                break
            if line.indent > indent:
                raise self.error("unexpected indent", line)
            stmts.append(self.parse_statement(line, indent, enclosing))
        return tuple(stmts)

    def parse_body(self, header: _Line, indent: int, enclosing: tuple[int, ...]) -> tuple[Stmt, ...]:
        line = self.peek()
        if line is None or line.indent <= indent:
            raise self.error("expected an indented block", header, len(header.text) + header.indent)
        return self.parse_block(line.indent, enclosing + (indent,))

    def parse_statement(self, line: _Line, indent: int, enclosing: tuple[int, ...]) -> Stmt:
        text = line.text
        head = re.match(r"[A-Za-z_]\w*", text)
        word = head.group() if head else ""
        if word in ("if", "while", "for", "else", "elif") or text.endswith(":"):
            return self.parse_compound(line, word, indent, enclosing)
        if word in _UNSUPPORTED:
            raise self.error(f"'{word}' statements are not part of the workflow subset", line)
        self.pos += 1
        return _parse_simple(line, self)

    def parse_compound(self, line: _Line, word: str, indent: int, enclosing) -> Stmt:
        text = line.text
        if not text.endswith(":"):
            raise self.error(f"'{word}' header must end with ':'", line)
        if word in ("else", "elif"):
            raise self.error(f"'{word}' without a matching 'if'", line)
        if word not in ("if", "while", "for"):
            what = f"'{word}' statements are" if word in _UNSUPPORTED or word else "this statement is"
            raise self.error(f"{what} not part of the workflow subset", line)
        if _top_level_colon(text[:-1]):
            raise self.error("statement bodies must start on a new line", line)
        header = text[:-1].strip()
        self.pos += 1
        if word == "for":
            m = _FOR_HEADER_RE.match(collapse_whitespace(header))
            if not m or not is_identifier(m.group(1)) or not is_identifier(m.group(2)):
                raise self.error("for-loops must have the form 'for <name> in <name>:'", line)
            body = self.parse_body(line, indent, enclosing)
            return For(m.group(1), m.group(2), body)
        condition = _condition(header[len(word) :], line, self)
        body = self.parse_body(line, indent, enclosing)
        if word == "while":
            return While(condition, body)
        return If(condition, body, self.parse_else(indent, enclosing))

    def parse_else(self, indent: int, enclosing) -> tuple[Stmt, ...] | None:
        line = self.peek()
        if line is None or line.indent != indent:
            return None
        if re.match(r"elif\b", line.text):
            if not line.text.endswith(":") or _top_level_colon(line.text[:-1]):
                raise self.error("malformed 'elif' header", line)
            self.pos += 1
            condition = _condition(line.text[4:-1], line, self)
            body = self.parse_body(line, indent, enclosing)
            return (If(condition, body, self.parse_else(indent, enclosing)),)
        if re.match(r"else\s*:\Z", line.text):
            self.pos += 1
            return self.parse_body(line, indent, enclosing)
        if re.match(r"else\b", line.text):
            raise self.error("malformed 'else' header", line)
        return None


def _top_level_colon(text: str) -> bool:
    depth = 0
    for tok in _TOKEN_RE.finditer(text):
        value = tok.group()
        if value in "([{" and tok.lastgroup == "op":
            depth += 1
        elif value in ")]}" and tok.lastgroup == "op":
            depth -= 1
        elif value == ":" and depth == 0:
            return True
    return False


def _condition(text: str, line: _Line, parser: _Parser) -> str:
    cond = collapse_whitespace(text)
    if not cond:
        raise parser.error("missing condition", line)
    return cond


def _tokens(line: _Line, parser: _Parser) -> list[tuple[str, str, int]]:
    toks = []
    for m in _TOKEN_RE.finditer(line.text):
        kind = m.lastgroup
        if kind == "ws":
            continue
        col = line.indent + m.start() + 1
        if kind == "other":
            raise parser.error(f"unexpected character {m.group()!r}", line, col)
        toks.append((kind, m.group(), col))
    return toks


def _parse_simple(line: _Line, parser: _Parser) -> Stmt:
    toks = _tokens(line, parser)
    pos = 0

    def expect(kind: str | None, value: str | None, what: str):
        nonlocal pos
        if pos >= len(toks):
            raise parser.error(f"expected {what}", line, line.indent + len(line.text) + 1)
        k, v, col = toks[pos]
        if (kind and k != kind) or (value and v != value):
            raise parser.error(f"expected {what}, found {v!r}", line, col)
        pos += 1
        return v, col

    target = None
    if len(toks) >= 2 and toks[0][0] == "name" and toks[1][1] == "=":
        target = toks[0][1]
        if not is_identifier(target):
            raise parser.error(f"cannot assign to keyword {target!r}", line, toks[0][2])
        pos = 2
    elif len(toks) >= 2 and toks[1][1] in (",", ".", "[") and any(t[1] == "=" for t in toks):
        raise parser.error("only single-name assignment targets are supported", line)
    callee, col = expect("name", None, "an activity call")
    if keyword.iskeyword(callee):
        raise parser.error(f"'{callee}' statements are not part of the workflow subset", line, col)
    if pos < len(toks) and toks[pos][1] == ".":
        raise parser.error("activity names must be plain identifiers", line, toks[pos][2])
    if pos >= len(toks) and target is None:
        raise parser.error("expression statements must be activity calls", line, col)
    expect("op", "(", "'(' after the activity name")
    args: list[Arg] = []
    while pos < len(toks) and toks[pos][1] != ")":
        args.append(_parse_arg(toks, pos, line, parser))
        pos += 3 if isinstance(args[-1], KeywordArg) else 1
        if pos < len(toks) and toks[pos][1] == ",":
            pos += 1
        elif pos < len(toks) and toks[pos][1] != ")":
            raise parser.error(f"expected ',' or ')', found {toks[pos][1]!r}", line, toks[pos][2])
    expect("op", ")", "')'")
    if pos != len(toks):
        raise parser.error(f"unexpected {toks[pos][1]!r} after the call", line, toks[pos][2])
    call = Call(callee, tuple(args))
    if call.is_user_task and (len(args) != 1 or not isinstance(args[0], StringLiteral)):
        raise parser.error("user_task takes exactly one string argument", line, col)
    return ExprCall(call) if target is None else Assign(target, call)


def _parse_arg(toks, pos: int, line: _Line, parser: _Parser) -> Arg:
    kind, value, col = toks[pos]
    if kind == "name" and pos + 1 < len(toks) and toks[pos + 1][1] == "=":
        if pos + 2 >= len(toks):
            raise parser.error("missing keyword argument value", line, col)
        inner = _atom(toks[pos + 2], line, parser)
        return KeywordArg(value, inner)
    return _atom(toks[pos], line, parser)


def _atom(tok, line: _Line, parser: _Parser) -> StringLiteral | IdentifierRef:
    kind, value, col = tok
    if kind == "string":
        return StringLiteral(ast.literal_eval(value))
    if kind == "name" and is_identifier(value):
        return IdentifierRef(value)
    raise parser.error(f"unsupported argument {value!r}; use a string or a name", line, col)


def parse_ir(source: str) -> Program:
    """Parse IR source text into a :class:`Program`.

    Raises :class:`IRSyntaxError` for anything outside the subset, including
    an empty program.
    """
    lines = _logical_lines(source)
    if not lines:
        raise IRSyntaxError("empty program", SourceSpan(1, 1))
    parser = _Parser(lines)
    first = lines[0].indent
    statements = parser.parse_block(first, ())
    if parser.peek() is not None:
        raise parser.error("unindent below the first statement", parser.peek())
    return Program(statements)


def parse_header(text: str) -> For | While:
    """Parse a loop header such as ``for repo in repositories`` into an empty loop.

    Used for BPMN annotation text and for edit operations carrying headers.
    """
    text = collapse_whitespace(text.strip().rstrip(":"))
    m = _FOR_HEADER_RE.match(text)
    if m and is_identifier(m.group(1)) and is_identifier(m.group(2)):
        return For(m.group(1), m.group(2), ())
    if re.match(r"while\b", text):
        cond = text[5:].strip()
        if cond:
            try:
                _logical_lines(cond)
            except IRSyntaxError:
                pass
            else:
                return While(cond, ())
    raise IRSyntaxError(f"not a loop header: {text!r}", SourceSpan(1, 1))


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------


def _format_atom(arg: StringLiteral | IdentifierRef) -> str:
    if isinstance(arg, StringLiteral):
        return json.dumps(arg.value, ensure_ascii=False)
    return arg.name


def format_call(call: Call) -> str:
    parts = []
    for arg in call.args:
        if isinstance(arg, KeywordArg):
            parts.append(f"{arg.name}={_format_atom(arg.value)}")
        else:
            parts.append(_format_atom(arg))
    return f"{call.callee}({', '.join(parts)})"


def _print_stmts(stmts, depth: int, out: list[str]) -> None:
    pad = INDENT * depth
    for stmt in stmts:
        if isinstance(stmt, Assign):
            out.append(f"{pad}{stmt.target} = {format_call(stmt.call)}")
        elif isinstance(stmt, ExprCall):
            out.append(f"{pad}{format_call(stmt.call)}")
        elif isinstance(stmt, If):
            out.append(f"{pad}if {stmt.condition}:")
            _print_stmts(stmt.then_body, depth + 1, out)
            if stmt.else_body is not None:
                out.append(f"{pad}else:")
                _print_stmts(stmt.else_body, depth + 1, out)
        elif isinstance(stmt, (For, While)):
            out.append(f"{pad}{stmt.header}:")
            _print_stmts(stmt.body, depth + 1, out)
        else:  # pragma: no cover
            raise TypeError(f"not an IR statement: {stmt!r}")


def print_ir(program: Program) -> str:
    """Canonical text: two-space indents, one statement per line, no trailing newline."""
    out: list[str] = []
    _print_stmts(program.statements, 0, out)
    return "\n".join(out)


def print_stmt(stmt: Stmt) -> str:
    out: list[str] = []
    _print_stmts((stmt,), 0, out)
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


def _binding_names(statements) -> list[str | None]:
    """Binding occurrences in document order; bare calls bind an anonymous slot."""
    names: list[str | None] = []
    for stmt in walk(statements):
        if isinstance(stmt, Assign):
            names.append(stmt.target)
        elif isinstance(stmt, ExprCall):
            names.append(None)
        elif isinstance(stmt, For):
            names.append(stmt.loop_var)
    return names


class _Renamer:
    """Renames binding occurrences in document order.

    ``choose(i, name)`` gives the new name of the i-th binding occurrence
    (1-based; ``name`` is ``None`` for a bare call, which stays a bare call
    when ``choose`` also returns ``None``).  A reference resolves to the most
    recent earlier binding of its name, or failing that the first later one
    (``while not done: done = ...``); names never bound are left untouched.
    """

    def __init__(self, statements, choose):
        self.choose = choose
        self.counter = 0
        self.current: dict[str, str] = {}
        self.first: dict[str, str] = {}
        for i, name in enumerate(_binding_names(statements), start=1):
            if name is not None:
                self.first.setdefault(name, choose(i, name))

    def bind(self, name: str | None) -> str | None:
        self.counter += 1
        fresh = self.choose(self.counter, name)
        if name is not None:
            self.current[name] = fresh
        return fresh

    def ref(self, name: str) -> str:
        return self.current.get(name) or self.first.get(name) or name

    def call(self, call: Call) -> Call:
        args = []
        for arg in call.args:
            if isinstance(arg, IdentifierRef):
                arg = IdentifierRef(self.ref(arg.name))
            elif isinstance(arg, KeywordArg) and isinstance(arg.value, IdentifierRef):
                arg = KeywordArg(arg.name, IdentifierRef(self.ref(arg.value.name)))
            args.append(arg)
        return Call(call.callee, tuple(args))

    def cond(self, text: str) -> str:
        return rename_identifiers(collapse_whitespace(text), self.ref)

    def stmts(self, statements) -> tuple[Stmt, ...]:
        out: list[Stmt] = []
        for stmt in statements:
            if isinstance(stmt, (Assign, ExprCall)):
                call = self.call(stmt.call)
                target = self.bind(stmt.target if isinstance(stmt, Assign) else None)
                out.append(ExprCall(call) if target is None else Assign(target, call))
            elif isinstance(stmt, If):
                cond = self.cond(stmt.condition)
                then = self.stmts(stmt.then_body)
                other = self.stmts(stmt.else_body) if stmt.else_body else None
                out.append(If(cond, then, other))
            elif isinstance(stmt, For):
                iterable = self.ref(stmt.iterable)
                var = self.bind(stmt.loop_var)
                out.append(For(var, iterable, self.stmts(stmt.body)))
            elif isinstance(stmt, While):
                cond = self.cond(stmt.condition)
                out.append(While(cond, self.stmts(stmt.body)))
        return tuple(out)


def normalize_ir(program: Program) -> Program:
    """Alpha-normal form used for equality and Exact Match.

    Every call statement becomes an assignment, binding occurrences are
    renamed ``v1, v2, ...`` in document order with references rewritten to
    match, and condition whitespace is collapsed.  Callees and string
    literals are untouched.
    """
    renamer = _Renamer(program.statements, lambda i, _name: f"v{i}")
    return Program(renamer.stmts(program.statements))


def binding_names(program: Program) -> list[str | None]:
    """Names bound in document order (``None`` for bare calls)."""
    return _binding_names(program.statements)


def rename_bindings(program: Program, names: list[str | None]) -> Program:
    """Rename the i-th binding occurrence to ``names[i]`` and rewrite references.

    ``None`` entries keep the original name.
    """
    renamer = _Renamer(program.statements, lambda i, name: names[i - 1] or name)
    return Program(renamer.stmts(program.statements))


def ir_equal(a: Program, b: Program) -> bool:
    return normalize_ir(a) == normalize_ir(b)
