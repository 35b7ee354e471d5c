"""SMT-LIB2 rendering and an external solver driver.

Queries are plain SMT-LIB2 text piped to a solver process (z3 by default).
Subterms shared between several places in a query are emitted once as
``define-fun`` constants, which keeps queries for deep networks linear in
the size of the expression DAG rather than the expanded tree.
"""

from __future__ import annotations

import itertools
import logging
import shlex
import shutil
import subprocess
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    ADD,
    CONST,
    DIV,
    EQ,
    GE,
    GT,
    LE,
    LT,
    MUL,
    NE,
    NEG,
    SUB,
    VAR,
    Atom,
    SymExpr,
    _unique_nodes,
)

log = logging.getLogger(__name__)

LOGIC = "QF_NRA"
DEFAULT_SOLVER = "z3 -in -smt2 -t:{timeout_ms}"
DEFAULT_QUERY_TIMEOUT = 10.0


class SolverConfigError(RuntimeError):
    """The configured solver cannot be started."""


@dataclass(frozen=True)
class Assertion:
    """A conjunction of atoms, asserted positively or negated."""

    atoms: tuple[Atom, ...]
    positive: bool = True

    def holds(self, assignment) -> bool:
        value = all(a.evaluate(assignment) for a in self.atoms)
        return value if self.positive else not value


@dataclass
class ConstraintSystem:
    variables: list[int]
    assertions: list[Assertion] = field(default_factory=list)
    logic: str = LOGIC

    def __post_init__(self) -> None:
        declared = set(self.variables)
        for a in self.assertions:
            for atom in a.atoms:
                missing = (atom.lhs.variables() | atom.rhs.variables()) - declared
                if missing:
                    raise ValueError(f"assertion uses undeclared variables {sorted(missing)}")


@dataclass
class SolverResult:
    status: str  # sat | unsat | unknown | error
    model: dict[int, float] | None = None
    time: float = 0.0
    query_size: int = 0
    message: str = ""


def var_name(index: int) -> str:
    return f"x{index}"


def decimal_literal(value: float) -> str:
    """Shortest round-trip decimal of ``value`` in SMT-LIB form."""
    text = format(Decimal(repr(abs(float(value)))), "f")
    if "." not in text:
        text += ".0"
    return f"(- {text})" if value < 0 or (value == 0 and str(value).startswith("-")) else text


_SMT_OP = {ADD: "+", SUB: "-", MUL: "*", DIV: "/"}
_SMT_REL = {EQ: "=", LT: "<", LE: "<=", GT: ">", GE: ">="}


class _Renderer:
    def __init__(self, roots: Sequence[SymExpr]):
        parents: dict[int, int] = {}
        self.order: list[SymExpr] = []
        for root in roots:
            for node in _unique_nodes(root):
                if id(node) not in parents:
                    parents[id(node)] = 0
                    self.order.append(node)
        # count references across distinct parents and roots
        for node in self.order:
            for child in node.args:
                parents[id(child)] += 1
        for root in roots:
            parents[id(root)] += 1
        self.text: dict[int, str] = {}
        self.definitions: list[str] = []
        for node in self.order:
            body = self._inline(node)
            if node.args and parents[id(node)] > 1:
                name = f"_s{len(self.definitions)}"
                self.definitions.append(f"(define-fun {name} () Real {body})")
                self.text[id(node)] = name
            else:
                self.text[id(node)] = body

    def _inline(self, node: SymExpr) -> str:
        if node.op == CONST:
            return decimal_literal(node.value)
        if node.op == VAR:
            return var_name(node.value)
        if node.op == NEG:
            return f"(- {self.text[id(node.args[0])]})"
        a, b = (self.text[id(c)] for c in node.args)
        return f"({_SMT_OP[node.op]} {a} {b})"

    def __getitem__(self, node: SymExpr) -> str:
        return self.text[id(node)]


def _atom_text(atom: Atom, r: _Renderer) -> str:
    lhs, rhs = r[atom.lhs], r[atom.rhs]
    if atom.relation == NE:
        return f"(not (= {lhs} {rhs}))"
    return f"({_SMT_REL[atom.relation]} {lhs} {rhs})"


def render(system: ConstraintSystem) -> str:
    """Deterministic SMT-LIB2 text for ``system``."""
    roots = [e for a in system.assertions for atom in a.atoms for e in (atom.lhs, atom.rhs)]
    r = _Renderer(roots)
    lines = ["(set-option :produce-models true)", f"(set-logic {system.logic})"]
    lines += [f"(declare-const {var_name(v)} Real)" for v in sorted(set(system.variables))]
    lines += r.definitions
    for a in system.assertions:
        parts = [_atom_text(atom, r) for atom in a.atoms]
        body = parts[0] if len(parts) == 1 else f"(and {' '.join(parts)})"
        if not a.positive:
            body = f"(not {body})"
        lines.append(f"(assert {body})")
    lines += ["(check-sat)", "(get-model)"]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# model parsing
# ---------------------------------------------------------------------------


class ModelParseError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    tokens = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            tokens.append(ch)
            i += 1
        elif ch == ";":
            while i < n and text[i] != "\n":
                i += 1
        elif ch == '"':
            j = text.index('"', i + 1)
            tokens.append(text[i:j + 1])
            i = j + 1
        elif ch == "|":
            j = text.index("|", i + 1)
            tokens.append(text[i + 1:j])
            i = j + 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in '();"':
                j += 1
            tokens.append(text[i:j])
            i = j
    return tokens


def parse_sexprs(text: str) -> list:
    tokens = tokenize(text)
    pos = 0
    out = []

    def parse():
        nonlocal pos
        if pos >= len(tokens):
            raise ModelParseError("unexpected end of input")
        tok = tokens[pos]
        pos += 1
        if tok == "(":
            items = []
            while True:
                if pos >= len(tokens):
                    raise ModelParseError("unbalanced parentheses")
                if tokens[pos] == ")":
                    pos += 1
                    return items
                items.append(parse())
        if tok == ")":
            raise ModelParseError("unexpected ')'")
        return tok

    while pos < len(tokens):
        out.append(parse())
    return out


def _numeral(tok) -> Fraction:
    if not isinstance(tok, str):
        raise ModelParseError(f"expected a number, found {tok!r}")
    body = tok
    if body.count(".") > 1 or not body.replace(".", "", 1).isdigit():
        raise ModelParseError(f"not a numeral or decimal: {tok!r}")
    return Fraction(Decimal(body))


def _rational(term) -> Fraction:
    """Exact value of decimal / negation / rational terms."""
    if isinstance(term, str):
        return _numeral(term)
    if len(term) == 2 and term[0] == "-":
        return -_rational(term[1])
    if len(term) == 3 and term[0] == "/":
        den = _rational(term[2])
        if den == 0:
            raise ModelParseError("zero denominator")
        return _rational(term[1]) / den
    raise ModelParseError(f"unsupported term {term!r}")


def _polynomial(term, coeffs: dict[int, Fraction], sign: Fraction = Fraction(1)) -> None:
    """Accumulate a univariate polynomial in ``x`` (z3 root-obj syntax)."""
    if isinstance(term, str):
        if term == "x":
            coeffs[1] = coeffs.get(1, Fraction(0)) + sign
        else:
            coeffs[0] = coeffs.get(0, Fraction(0)) + sign * _numeral(term)
        return
    head = term[0]
    if head == "+":
        for t in term[1:]:
            _polynomial(t, coeffs, sign)
    elif head == "-" and len(term) == 2:
        _polynomial(term[1], coeffs, -sign)
    elif head == "-":
        _polynomial(term[1], coeffs, sign)
        for t in term[2:]:
            _polynomial(t, coeffs, -sign)
    elif head == "^" and len(term) == 3 and term[1] == "x":
        deg = int(term[2])
        coeffs[deg] = coeffs.get(deg, Fraction(0)) + sign
    elif head == "*" and len(term) == 3:
        c = _rational(term[1])
        inner: dict[int, Fraction] = {}
        _polynomial(term[2], inner)
        for d, v in inner.items():
            coeffs[d] = coeffs.get(d, Fraction(0)) + sign * c * v
    elif head == "/":
        coeffs[0] = coeffs.get(0, Fraction(0)) + sign * _rational(term)
    else:
        raise ModelParseError(f"unsupported polynomial term {term!r}")


def _root_obj(poly, k: int) -> float:
    coeffs: dict[int, Fraction] = {}
    _polynomial(poly, coeffs)
    degree = max(d for d, c in coeffs.items() if c != 0)
    dense = [coeffs.get(d, Fraction(0)) for d in range(degree, -1, -1)]

    def p(x: Fraction) -> Fraction:
        acc = Fraction(0)
        for c in dense:
            acc = acc * x + c
        return acc

    roots = sorted(r.real for r in np.roots([float(c) for c in dense]) if abs(r.imag) < 1e-7)
    if not 1 <= k <= len(roots):
        raise ModelParseError(f"root-obj index {k} out of range")
    guess = roots[k - 1]
    # polish with exact-sign bisection around the numeric estimate
    width = max(1e-6, abs(guess) * 1e-6)
    lo, hi = Fraction(guess - width), Fraction(guess + width)
    plo, phi = p(lo), p(hi)
    if plo == 0:
        return float(lo)
    if phi == 0:
        return float(hi)
    if (plo > 0) == (phi > 0):
        raise ModelParseError("could not isolate root-obj")
    for _ in range(80):
        mid = (lo + hi) / 2
        pm = p(mid)
        if pm == 0:
            return float(mid)
        if (pm > 0) == (plo > 0):
            lo, plo = mid, pm
        else:
            hi = mid
    return float((lo + hi) / 2)


def value_of(term) -> float:
    """Nearest float of a model value term."""
    if isinstance(term, list) and term and term[0] == "root-obj":
        if len(term) != 3:
            raise ModelParseError(f"malformed root-obj {term!r}")
        return _root_obj(term[1], int(term[2]))
    if isinstance(term, list) and len(term) == 2 and term[0] == "-" and isinstance(term[1], list) \
            and term[1] and term[1][0] == "root-obj":
        return -value_of(term[1])
    return float(_rational(term))


def parse_model(text: str) -> dict[int, float]:
    """Parse a ``get-model`` response into ``{var_id: value}``."""
    forms = parse_sexprs(text)
    if len(forms) != 1 or not isinstance(forms[0], list):
        raise ModelParseError("expected exactly one model s-expression")
    entries = forms[0]
    if entries and entries[0] == "model":
        entries = entries[1:]
    model = {}
    for entry in entries:
        if not (isinstance(entry, list) and len(entry) == 5 and entry[0] == "define-fun"):
            raise ModelParseError(f"unexpected model entry {entry!r}")
        _, name, params, sort, term = entry
        if params != [] or sort != "Real":
            raise ModelParseError(f"unexpected definition of {name}")
        if not (isinstance(name, str) and name.startswith("x") and name[1:].isdigit()):
            continue
        model[int(name[1:])] = value_of(term)
    return model


# ---------------------------------------------------------------------------
# process driver
# ---------------------------------------------------------------------------


class Solver:
    """Runs one solver process per query.

    ``command`` is a shell-style command line; ``{timeout_ms}`` in it is
    replaced by the per-query timeout.  The process is killed at twice the
    timeout if the solver ignores its own limit.
    """

    def __init__(self, command: str = DEFAULT_SOLVER, dump_dir: str | Path | None = None):
        self.command = command
        argv = shlex.split(command)
        if not argv:
            raise SolverConfigError("empty solver command")
        if shutil.which(argv[0]) is None:
            raise SolverConfigError(f"solver executable {argv[0]!r} not found")
        self.dump_dir = Path(dump_dir) if dump_dir is not None else None
        if self.dump_dir is not None:
            self.dump_dir.mkdir(parents=True, exist_ok=True)
        self._counter = itertools.count()
        self._lock = threading.Lock()

    def argv(self, timeout: float) -> list[str]:
        ms = max(1, int(timeout * 1000))
        return [part.replace("{timeout_ms}", str(ms)) for part in shlex.split(self.command)]

    def _dump(self, text: str) -> None:
        if self.dump_dir is None:
            return
        with self._lock:
            n = next(self._counter)
        (self.dump_dir / f"query_{n:06d}.smt2").write_text(text, encoding="utf-8")

    def solve(self, system: ConstraintSystem, timeout: float = DEFAULT_QUERY_TIMEOUT) -> SolverResult:
        text = render(system)
        size = len(text.encode("utf-8"))
        self._dump(text)
        start = time.perf_counter()
        try:
            proc = subprocess.run(
                self.argv(timeout),
                input=text,
                capture_output=True,
                text=True,
                timeout=2 * timeout,
            )
        except subprocess.TimeoutExpired:
            return SolverResult("unknown", None, time.perf_counter() - start, size, "killed after 2x timeout")
        except OSError as exc:
            return SolverResult("error", None, time.perf_counter() - start, size, f"spawn failed: {exc}")
        elapsed = time.perf_counter() - start
        return interpret_output(proc.stdout, elapsed, size, proc.stderr)


def interpret_output(stdout: str, elapsed: float = 0.0, size: int = 0, stderr: str = "") -> SolverResult:
    """Turn raw solver output (status line, then model) into a result."""
    stripped = stdout.lstrip()
    head, _, rest = stripped.partition("\n")
    status = head.strip()
    if status == "sat":
        try:
            model = parse_model(rest)
        except (ModelParseError, ValueError, ZeroDivisionError) as exc:
            return SolverResult("error", None, elapsed, size, f"bad model: {exc}")
        return SolverResult("sat", model, elapsed, size)
    if status == "unsat":
        return SolverResult("unsat", None, elapsed, size)
    if status in ("unknown", "timeout"):
        return SolverResult("unknown", None, elapsed, size, status)
    message = (head or stderr).strip()[:200]
    return SolverResult("error", None, elapsed, size, f"unexpected solver output: {message!r}")

