"""Concolic values, symbolic expression trees and branch recording.

A :class:`ConcolicValue` pairs a concrete float with an optional symbolic
expression over attack variables ``x0, x1, ...``.  Every instrumented
comparison goes through :func:`compare`, which appends a
:class:`BranchPredicate` to the running :class:`BranchTrace` whenever one
side depends on an attack variable.

Expression trees can get very deep (a dense layer over a 784-pixel image
produces an addition chain of that length), so evaluation, equality and
rendering are all iterative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping, NamedTuple


class ConcolicError(Exception):
    """Base class for errors that abort a forward execution."""


class DivByZero(ConcolicError):
    pass


class NumericOverflow(ConcolicError):
    pass


class UnboundVar(ConcolicError):
    pass


class ShapeError(ConcolicError):
    pass


CONST = "const"
VAR = "var"
ADD = "+"
SUB = "-"
MUL = "*"
DIV = "/"
NEG = "neg"

_BINARY = (ADD, SUB, MUL, DIV)


class SymExpr:
    """Immutable arithmetic expression node.

    Use the module-level constructors (:func:`const`, :func:`var`,
    :func:`add`, ...) rather than calling this directly; they apply the
    small set of simplifications the engine relies on.
    """

    __slots__ = ("op", "args", "value", "has_vars", "_hash")

    def __init__(self, op: str, args: tuple[SymExpr, ...] = (), value: float | int = 0):
        self.op = op
        self.args = args
        self.value = value
        if op == VAR:
            self.has_vars = True
        else:
            self.has_vars = any(a.has_vars for a in args)
        self._hash = hash((op, value, tuple(a._hash for a in args)))

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SymExpr):
            return NotImplemented
        stack = [(self, other)]
        while stack:
            a, b = stack.pop()
            if a is b:
                continue
            if a._hash != b._hash or a.op != b.op or a.value != b.value:
                return False
            if len(a.args) != len(b.args):
                return False
            stack.extend(zip(a.args, b.args))
        return True

    def __repr__(self) -> str:
        return f"SymExpr({to_infix(self)})"

    @property
    def is_const(self) -> bool:
        return self.op == CONST

    def variables(self) -> set[int]:
        """Attack-variable ids referenced anywhere in the tree."""
        found: set[int] = set()
        for node in _unique_nodes(self):
            if node.op == VAR:
                found.add(node.value)
        return found


def const(value: float) -> SymExpr:
    return SymExpr(CONST, (), float(value))


def var(index: int) -> SymExpr:
    if index < 0:
        raise ValueError(f"variable index must be non-negative, got {index}")
    return SymExpr(VAR, (), int(index))


def _is(node: SymExpr, value: float) -> bool:
    return node.op == CONST and node.value == value


def add(a: SymExpr, b: SymExpr) -> SymExpr:
    if a.is_const and b.is_const:
        return const(a.value + b.value)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return b
    return SymExpr(ADD, (a, b))


def sub(a: SymExpr, b: SymExpr) -> SymExpr:
    if a.is_const and b.is_const:
        return const(a.value - b.value)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return neg(b)
    return SymExpr(SUB, (a, b))


def mul(a: SymExpr, b: SymExpr) -> SymExpr:
    if a.is_const and b.is_const:
        return const(a.value * b.value)
    if _is(a, 0.0) or _is(b, 0.0):
        return const(0.0)
    if _is(b, 1.0):
        return a
    if _is(a, 1.0):
        return b
    return SymExpr(MUL, (a, b))


def div(a: SymExpr, b: SymExpr) -> SymExpr:
    if a.is_const and b.is_const:
        if b.value == 0:
            raise DivByZero("constant division by zero")
        return const(a.value / b.value)
    if _is(b, 1.0):
        return a
    return SymExpr(DIV, (a, b))


def neg(a: SymExpr) -> SymExpr:
    if a.is_const:
        return const(-a.value)
    return SymExpr(NEG, (a,))


_BUILDERS = {ADD: add, SUB: sub, MUL: mul, DIV: div}


def _unique_nodes(root: SymExpr) -> Iterator[SymExpr]:
    """Yield each distinct node object once, children before parents."""
    seen: set[int] = set()
    stack: list[tuple[SymExpr, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded or not node.args:
            seen.add(id(node))
            yield node
            continue
        stack.append((node, True))
        for child in reversed(node.args):
            if id(child) not in seen:
                stack.append((child, False))


def evaluate(expr: SymExpr, assignment: Mapping[int, float]) -> float:
    """Evaluate ``expr`` in 64-bit floating point under ``assignment``.

    Raises:
        UnboundVar: a variable of ``expr`` is missing from ``assignment``.
        DivByZero: a divisor evaluates to zero.
    """
    values: dict[int, float] = {}
    for node in _unique_nodes(expr):
        op = node.op
        if op == CONST:
            out = node.value
        elif op == VAR:
            try:
                out = float(assignment[node.value])
            except KeyError:
                raise UnboundVar(f"x{node.value} is not assigned") from None
        elif op == NEG:
            out = -values[id(node.args[0])]
        else:
            a = values[id(node.args[0])]
            b = values[id(node.args[1])]
            if op == ADD:
                out = a + b
            elif op == SUB:
                out = a - b
            elif op == MUL:
                out = a * b
            else:
                if b == 0:
                    raise DivByZero("division by zero during evaluation")
                out = a / b
        values[id(node)] = out
    return values[id(expr)]


# alias matching the operation name used throughout the docs
eval_expr = evaluate


def affine_form(expr: SymExpr) -> tuple[float, dict[int, float]] | None:
    """Return ``(constant, {var: coefficient})`` if ``expr`` is affine, else None.

    Used for reporting and tests; the engine itself never normalizes.
    """
    forms: dict[int, tuple[float, dict[int, float]] | None] = {}
    for node in _unique_nodes(expr):
        op = node.op
        if op == CONST:
            out = (node.value, {})
        elif op == VAR:
            out = (0.0, {node.value: 1.0})
        else:
            kids = [forms[id(a)] for a in node.args]
            if any(k is None for k in kids):
                out = None
            elif op == NEG:
                c, co = kids[0]
                out = (-c, {v: -w for v, w in co.items()})
            elif op in (ADD, SUB):
                sign = 1.0 if op == ADD else -1.0
                (c1, co1), (c2, co2) = kids
                merged = dict(co1)
                for v, w in co2.items():
                    merged[v] = merged.get(v, 0.0) + sign * w
                out = (c1 + sign * c2, merged)
            elif op == MUL:
                (c1, co1), (c2, co2) = kids
                if co1 and co2:
                    out = None
                elif not co1:
                    out = (c1 * c2, {v: c1 * w for v, w in co2.items()})
                else:
                    out = (c1 * c2, {v: c2 * w for v, w in co1.items()})
            else:
                (c1, co1), (c2, co2) = kids
                if co2 or c2 == 0:
                    out = None
                else:
                    out = (c1 / c2, {v: w / c2 for v, w in co1.items()})
        forms[id(node)] = out
    return forms[id(expr)]


def to_infix(expr: SymExpr) -> str:
    """Human-readable rendering, for messages and trace dumps."""
    parts: list[str] = []
    stack: list[SymExpr | str] = [expr]
    while stack:
        item = stack.pop()
        if isinstance(item, str):
            parts.append(item)
        elif item.op == CONST:
            parts.append(repr(item.value))
        elif item.op == VAR:
            parts.append(f"x{item.value}")
        elif item.op == NEG:
            stack.extend((")", item.args[0], "-("))
        else:
            stack.extend((")", item.args[1], f" {item.op} ", item.args[0], "("))
    return "".join(parts)


class ConcolicValue:
    """A concrete float paired with an optional symbolic expression.

    ``exp`` is None for values that do not depend on any attack variable.
    Expressions without variables are never stored, so a value is symbolic
    exactly when ``exp`` is not None.
    """

    __slots__ = ("val", "exp")

    def __init__(self, val: float, exp: SymExpr | None = None):
        self.val = float(val)
        self.exp = exp if exp is not None and exp.has_vars else None

    @classmethod
    def symbol(cls, val: float, index: int) -> ConcolicValue:
        return cls(val, var(index))

    @property
    def symbolic(self) -> bool:
        return self.exp is not None

    def expr(self) -> SymExpr:
        """Symbolic view, with constants lifted to ``Const`` leaves."""
        return self.exp if self.exp is not None else const(self.val)

    def __repr__(self) -> str:
        if self.exp is None:
            return f"ConcolicValue({self.val!r})"
        return f"ConcolicValue({self.val!r}, {to_infix(self.exp)})"

    def __add__(self, other):
        return arith(self, lift(other), ADD)

    def __radd__(self, other):
        return arith(lift(other), self, ADD)

    def __sub__(self, other):
        return arith(self, lift(other), SUB)

    def __rsub__(self, other):
        return arith(lift(other), self, SUB)

    def __mul__(self, other):
        return arith(self, lift(other), MUL)

    def __rmul__(self, other):
        return arith(lift(other), self, MUL)

    def __truediv__(self, other):
        return arith(self, lift(other), DIV)

    def __rtruediv__(self, other):
        return arith(lift(other), self, DIV)

    def __neg__(self):
        return negate(self)


def lift(x: ConcolicValue | float) -> ConcolicValue:
    return x if isinstance(x, ConcolicValue) else ConcolicValue(x)


def _checked(value: float) -> float:
    if not math.isfinite(value):
        raise NumericOverflow(f"non-finite intermediate value {value!r}")
    return value


def arith(a: ConcolicValue, b: ConcolicValue, kind: str) -> ConcolicValue:
    """Apply ``kind`` (one of ``+ - * /``) to two concolic values.

    Raises:
        DivByZero: ``kind`` is division and ``b.val == 0``.
        NumericOverflow: the concrete result is not finite.
    """
    if kind not in _BINARY:
        raise ValueError(f"unknown arithmetic kind {kind!r}")
    if kind == ADD:
        val = a.val + b.val
    elif kind == SUB:
        val = a.val - b.val
    elif kind == MUL:
        val = a.val * b.val
    else:
        if b.val == 0:
            raise DivByZero(f"division of {a.val!r} by zero")
        val = a.val / b.val
    val = _checked(val)
    if a.exp is None and b.exp is None:
        return ConcolicValue(val)
    return ConcolicValue(val, _BUILDERS[kind](a.expr(), b.expr()))


def negate(a: ConcolicValue) -> ConcolicValue:
    return ConcolicValue(-a.val, None if a.exp is None else neg(a.exp))


# relation symbols; "!=" is rendered as a negated equality downstream
EQ, NE, LT, LE, GT, GE = "=", "!=", "<", "<=", ">", ">="
RELATIONS = (EQ, NE, LT, LE, GT, GE)
STRICT_RELATIONS = (LT, GT)

_HOLDS = {
    EQ: lambda x, y: x == y,
    NE: lambda x, y: x != y,
    LT: lambda x, y: x < y,
    LE: lambda x, y: x <= y,
    GT: lambda x, y: x > y,
    GE: lambda x, y: x >= y,
}


def holds(lhs: float, relation: str, rhs: float) -> bool:
    return _HOLDS[relation](lhs, rhs)


class Atom(NamedTuple):
    """A single comparison ``lhs relation rhs``."""

    lhs: SymExpr
    relation: str
    rhs: SymExpr

    def evaluate(self, assignment: Mapping[int, float]) -> bool:
        return holds(evaluate(self.lhs, assignment), self.relation, evaluate(self.rhs, assignment))

    def __str__(self) -> str:
        return f"{to_infix(self.lhs)} {self.relation} {to_infix(self.rhs)}"


@dataclass(frozen=True)
class BranchPredicate:
    """One recorded branch: a conjunction of atoms and the observed outcome.

    Almost every branch is a single comparison.  The exp bracketing branch
    is the exception: it records two bounds as one conjunctive condition.
    """

    atoms: tuple[Atom, ...]
    taken: bool

    @classmethod
    def single(cls, lhs: SymExpr, relation: str, rhs: SymExpr, taken: bool) -> BranchPredicate:
        return cls((Atom(lhs, relation, rhs),), taken)

    @property
    def lhs(self) -> SymExpr:
        return self.atoms[0].lhs

    @property
    def relation(self) -> str:
        return self.atoms[0].relation

    @property
    def rhs(self) -> SymExpr:
        return self.atoms[0].rhs

    @property
    def condition(self) -> tuple[Atom, ...]:
        return self.atoms

    def evaluate(self, assignment: Mapping[int, float]) -> bool:
        """Truth value of the condition (ignoring ``taken``) under ``assignment``."""
        return all(atom.evaluate(assignment) for atom in self.atoms)

    def variables(self) -> set[int]:
        out: set[int] = set()
        for atom in self.atoms:
            out |= atom.lhs.variables() | atom.rhs.variables()
        return out

    def __str__(self) -> str:
        cond = " and ".join(str(a) for a in self.atoms)
        return f"[{cond}] taken={self.taken}"


class BranchTrace:
    """Ordered record of the predicates met during one forward execution."""

    def __init__(self) -> None:
        self.predicates: list[BranchPredicate] = []

    def record(self, predicate: BranchPredicate) -> None:
        self.predicates.append(predicate)

    def __len__(self) -> int:
        return len(self.predicates)

    def __iter__(self) -> Iterator[BranchPredicate]:
        return iter(self.predicates)

    def __getitem__(self, index):
        return self.predicates[index]


def compare(a: ConcolicValue, b: ConcolicValue, relation: str, recorder: BranchTrace) -> bool:
    """Concrete truth of ``a relation b``; records a predicate if either side is symbolic."""
    result = holds(a.val, relation, b.val)
    if a.exp is not None or b.exp is not None:
        recorder.record(BranchPredicate.single(a.expr(), relation, b.expr(), result))
    return result

