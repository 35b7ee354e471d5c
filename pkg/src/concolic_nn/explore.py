"""Concolic exploration: the branch tree, the worklist and the attack loop.

One attack run owns a :class:`ExplorationTree` and a :class:`Worklist`.
Each forward execution is walked against the tree; every branch whose
opposite direction has neither been executed nor enqueued produces a
:class:`PathFormula` (the prefix as taken, the branch negated).  The loop
pops formulas, asks the solver for an input that realizes them, and stops
at the first input whose prediction differs from the original one.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

from .core import (
    EQ,
    GE,
    GT,
    LE,
    LT,
    NE,
    Atom,
    BranchPredicate,
    ConcolicError,
    SymExpr,
    affine_form,
    const,
    sub,
    to_infix,
    var,
)
from .nn.model import ForwardResult, ModelSpec, forward_concolic, forward_concrete
from .solve import DEFAULT_QUERY_TIMEOUT, Assertion, ConstraintSystem, SolverResult

log = logging.getLogger(__name__)

QUEUE = "queue"
STACK = "stack"

ADVERSARIAL = "adversarial-found"
EXHAUSTED = "worklist-exhausted"
TIMEOUT = "timeout"


@dataclass(frozen=True)
class Literal:
    """A predicate inside a path formula, either as observed or negated."""

    predicate: BranchPredicate
    negated: bool = False

    @property
    def expected(self) -> bool:
        """Truth value the condition must have for the formula to hold."""
        return self.predicate.taken != self.negated

    def assertion(self) -> Assertion:
        return Assertion(self.predicate.atoms, self.expected)

    def __str__(self) -> str:
        cond = " and ".join(f"{_side(a.lhs)} {a.relation} {_side(a.rhs)}" for a in self.predicate.atoms)
        return cond if self.expected else f"not ({cond})"


def _side(expr: SymExpr) -> str:
    """Affine sides print collected (``1.028 + 0.1*x0``); others print as built."""
    form = affine_form(expr)
    if form is None:
        return to_infix(expr)
    c, coefs = form
    terms = [f"{w:.12g}*x{v}" for v, w in sorted(coefs.items()) if w != 0]
    if c != 0 or not terms:
        terms.insert(0, f"{c:.12g}")
    return " + ".join(terms).replace("+ -", "- ")


@dataclass(frozen=True)
class PathFormula:
    literals: tuple[Literal, ...]
    iteration: int = 0

    def __post_init__(self) -> None:
        if self.literals:
            *prefix, last = self.literals
            if not last.negated or any(l.negated for l in prefix):
                raise ValueError("only the last literal of a path formula may be negated")

    @property
    def depth(self) -> int:
        """Index of the negated branch within the originating trace."""
        return len(self.literals) - 1

    @property
    def negated(self) -> Literal:
        return self.literals[-1]

    def key(self) -> tuple:
        return tuple((l.predicate.atoms, l.expected) for l in self.literals)

    def variables(self) -> set[int]:
        out: set[int] = set()
        for l in self.literals:
            out |= l.predicate.variables()
        return out


def negate_branch(prefix: Sequence[BranchPredicate], branch: BranchPredicate, iteration: int = 0) -> PathFormula:
    literals = tuple(Literal(p) for p in prefix) + (Literal(branch, negated=True),)
    return PathFormula(literals, iteration)


class _Node:
    __slots__ = ("children", "enqueued", "decisions")

    def __init__(self) -> None:
        self.children: dict[tuple, _Node] = {}
        self.enqueued: set[tuple] = set()
        self.decisions: list[int] = []


class ExplorationTree:
    """Prefix trie over (branch condition, direction) pairs."""

    def __init__(self) -> None:
        self.root = _Node()
        self.executions = 0

    def integrate(self, trace: Sequence[BranchPredicate], label: int, iteration: int = 0) -> list[PathFormula]:
        """Add one execution path; return the formulas for its unexplored siblings."""
        node = self.root
        fresh = []
        for i, pred in enumerate(trace):
            sibling = (pred.atoms, not pred.taken)
            if sibling not in node.children and sibling not in node.enqueued:
                node.enqueued.add(sibling)
                fresh.append(negate_branch(trace[:i], pred, iteration))
            step = (pred.atoms, pred.taken)
            child = node.children.get(step)
            if child is None:
                child = node.children[step] = _Node()
            node = child
        node.decisions.append(label)
        self.executions += 1
        return fresh

    def node_count(self) -> int:
        count, stack = 0, [self.root]
        while stack:
            n = stack.pop()
            count += 1
            stack.extend(n.children.values())
        return count


class Worklist:
    """Pending formulas; pushes go to the back, pops come from the front (queue) or back (stack)."""

    def __init__(self, mode: str = QUEUE):
        if mode not in (QUEUE, STACK):
            raise ValueError(f"unknown order mode {mode!r}")
        self.mode = mode
        self._items: deque[PathFormula] = deque()

    def push(self, formula: PathFormula) -> None:
        self._items.append(formula)

    def pop(self) -> PathFormula:
        return self._items.popleft() if self.mode == QUEUE else self._items.pop()

    def __len__(self) -> int:
        return len(self._items)

    def __bool__(self) -> bool:
        return bool(self._items)

    def __iter__(self):
        return iter(self._items)


@dataclass
class SearchConfig:
    order: str = QUEUE
    timeout: float = 1800.0
    query_timeout: float = DEFAULT_QUERY_TIMEOUT
    clamp: tuple[float, float] | None = None
    epsilon: float | None = None
    seed: int = 0
    max_iterations: int | None = None

    def __post_init__(self) -> None:
        if self.order not in (QUEUE, STACK):
            raise ValueError(f"order must be 'queue' or 'stack', got {self.order!r}")
        if not (self.timeout > 0 and self.query_timeout > 0):
            raise ValueError("timeouts must be positive")
        if self.clamp is not None:
            lo, hi = self.clamp
            if not lo < hi:
                raise ValueError(f"clamp requires lo < hi, got {self.clamp}")
        if self.epsilon is not None and not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")


@dataclass
class ReplayCheck:
    """Outcome of re-running a solver model against the formula it solved."""

    iteration: int
    depth: int
    ok: bool
    position: int | None = None  # first diverging branch
    relation: str | None = None  # "strict", "non-strict" or "equality"
    refined: bool = False


def relation_class(predicate: BranchPredicate) -> str:
    rels = {a.relation for a in predicate.atoms}
    if rels & {EQ, NE}:
        return "equality"
    if rels <= {LT, GT}:
        return "strict"
    return "non-strict"


def check_replay(formula: PathFormula, trace: Sequence[BranchPredicate]) -> tuple[bool, int | None]:
    """Compare replayed branch outcomes with the ones ``formula`` demands.

    The prefix must be taken the same way and the final branch must flip.
    Returns ``(ok, first_mismatch_index)``.
    """
    for i, lit in enumerate(formula.literals):
        if i >= len(trace):
            return False, i
        if trace[i].taken != lit.expected:
            return False, i
    return True, None


@dataclass
class AttackStats:
    sat_count: int = 0
    unsat_count: int = 0
    unknown_count: int = 0
    error_count: int = 0
    iterations: int = 0
    constraints_generated: list[int] = field(default_factory=list)
    solver_times: list[float] = field(default_factory=list)
    query_sizes: list[int] = field(default_factory=list)
    aborted_executions: int = 0
    divergent: int = 0
    replays: list[ReplayCheck] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    outcome: str = EXHAUSTED

    @property
    def total_constraints(self) -> int:
        return sum(self.constraints_generated)

    def record_solver(self, result: SolverResult) -> None:
        if result.status == "sat":
            self.sat_count += 1
        elif result.status == "unsat":
            self.unsat_count += 1
        else:
            # solver failures are reported as unknown, and also tallied apart
            self.unknown_count += 1
            if result.status == "error":
                self.error_count += 1
        self.solver_times.append(result.time)
        self.query_sizes.append(result.query_size)

    def to_dict(self) -> dict:
        n = len(self.constraints_generated)
        return {
            "outcome": self.outcome,
            "iterations": self.iterations,
            "sat": self.sat_count,
            "unsat": self.unsat_count,
            "unknown": self.unknown_count,
            "solver_errors": self.error_count,
            "constraints_per_iteration": list(self.constraints_generated),
            "constraints_total": self.total_constraints,
            "constraints_mean": self.total_constraints / n if n else 0.0,
            "solver_time_mean": _mean(self.solver_times),
            "query_size_mean": _mean(self.query_sizes),
            "aborted_executions": self.aborted_executions,
            "divergent_replays": self.divergent,
            "history": [dict(h) for h in self.history],
            "wall_time": self.wall_time,
        }


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs) if xs else 0.0


@dataclass
class AttackResult:
    adversarial: list[float] | None
    adversarial_label: int | None
    original_label: int
    tree: ExplorationTree
    stats: AttackStats
    assignment: dict[int, float] | None = None


class SolverLike(Protocol):
    def solve(self, system: ConstraintSystem, timeout: float = ...) -> SolverResult: ...


def build_query(
    formula: PathFormula | None,
    config: SearchConfig,
    originals: Mapping[int, float],
) -> ConstraintSystem:
    """Conjunction of the formula's literals plus optional input-domain bounds."""
    variables = sorted(originals)
    assertions = [l.assertion() for l in formula.literals] if formula is not None else []
    for v in variables:
        x = var(v)
        if config.clamp is not None:
            lo, hi = config.clamp
            assertions.append(Assertion((Atom(x, GE, const(lo)),)))
            assertions.append(Assertion((Atom(x, LE, const(hi)),)))
        if config.epsilon is not None:
            delta = sub(x, const(originals[v]))
            assertions.append(Assertion((Atom(delta, LE, const(config.epsilon)),)))
            assertions.append(Assertion((Atom(delta, GE, const(-config.epsilon)),)))
    return ConstraintSystem(variables, assertions)


_STRICTER = {LE: LT, GE: GT}


def tighten(system: ConstraintSystem) -> ConstraintSystem | None:
    """Variant of ``system`` with positive non-strict inequalities made strict.

    Solutions of the tightened system sit away from the boundaries of those
    inequalities, so float replay cannot fall on the wrong side.  Returns
    None when nothing can be tightened.
    """
    changed = False
    out = []
    for a in system.assertions:
        if a.positive and any(atom.relation in _STRICTER for atom in a.atoms):
            atoms = tuple(Atom(t.lhs, _STRICTER.get(t.relation, t.relation), t.rhs) for t in a.atoms)
            out.append(Assertion(atoms))
            changed = True
        elif not a.positive and len(a.atoms) == 1 and a.atoms[0].relation in (LT, GT):
            # not (l < r) means l >= r; ask for l > r instead
            atom = a.atoms[0]
            flipped = GT if atom.relation == LT else LT
            out.append(Assertion((Atom(atom.lhs, flipped, atom.rhs),)))
            changed = True
        else:
            out.append(a)
    return ConstraintSystem(system.variables, out, system.logic) if changed else None


def _assign(base: Sequence[float], sym_vars: Sequence[tuple[int, int]], model: Mapping[int, float]) -> list[float]:
    out = list(base)
    for index, var_id in sym_vars:
        if var_id in model:
            out[index] = model[var_id]
    return out


def execute(
    model: ModelSpec,
    inputs: Sequence[float],
    sym_vars: Sequence[tuple[int, int]],
    worklist: Worklist,
    tree: ExplorationTree,
    iteration: int = 0,
) -> ForwardResult:
    """One concolic execution: run, extend the tree, enqueue new sibling formulas."""
    run = forward_concolic(model, inputs, sym_vars)
    for formula in tree.integrate(run.trace.predicates, run.label, iteration):
        worklist.push(formula)
    return run


class _Deadline:
    def __init__(self, seconds: float):
        self.end = time.monotonic() + seconds

    def remaining(self) -> float:
        return self.end - time.monotonic()

    def expired(self) -> bool:
        return self.remaining() <= 0


def check_adversarial(
    model: ModelSpec,
    inputs: Sequence[float],
    sym_vars: Sequence[tuple[int, int]],
    config: SearchConfig,
    solver: SolverLike,
    on_pop=None,
) -> AttackResult:
    """Search for an input differing only at ``sym_vars`` that changes the prediction.

    ``on_pop`` is an optional callback receiving each popped formula, used
    by tests and for progress reporting.
    """
    if not sym_vars:
        raise ValueError("at least one symbolic variable is required")
    start = time.monotonic()
    deadline = _Deadline(config.timeout)
    inputs = [float(v) for v in inputs]
    original_label, _ = forward_concrete(model, inputs)
    originals = {var_id: inputs[index] for index, var_id in sym_vars}
    tree = ExplorationTree()
    worklist = Worklist(config.order)
    stats = AttackStats()

    def finish(outcome, adversarial=None, label=None, assignment=None):
        stats.outcome = outcome
        stats.wall_time = time.monotonic() - start
        return AttackResult(adversarial, label, original_label, tree, stats, assignment)

    run = execute(model, inputs, sym_vars, worklist, tree)
    stats.constraints_generated.append(len(run.trace))

    while worklist:
        if deadline.expired() or (
            config.max_iterations is not None and stats.iterations >= config.max_iterations
        ):
            return finish(TIMEOUT)
        formula = worklist.pop()
        stats.iterations += 1
        if on_pop is not None:
            on_pop(formula)
        system = build_query(formula, config, originals)
        budget = min(config.query_timeout, max(deadline.remaining(), 0.001))
        result = solver.solve(system, budget)
        stats.record_solver(result)
        stats.history.append({
            "iteration": stats.iterations,
            "depth": formula.depth,
            "negated": str(formula.negated),
            "status": result.status,
            "model": {f"x{v}": x for v, x in sorted(result.model.items())} if result.model else None,
        })
        if result.status != "sat":
            continue

        candidate = _assign(inputs, sym_vars, result.model)
        try:
            label, _ = forward_concrete(model, candidate)
            if label != original_label:
                return finish(ADVERSARIAL, candidate, label, result.model)
            run = forward_concolic(model, candidate, sym_vars)
        except ConcolicError as exc:
            log.debug("execution aborted at iteration %d: %s", stats.iterations, exc)
            stats.aborted_executions += 1
            continue

        ok, position = check_replay(formula, run.trace)
        check = ReplayCheck(stats.iterations, formula.depth, ok, position)
        if not ok:
            check.relation = relation_class(formula.literals[position].predicate)
            refined = _refine(model, inputs, sym_vars, formula, system, solver, budget, original_label, stats)
            if refined is not None:
                kind, payload = refined
                if kind == "adversarial":
                    candidate, label, assignment = payload
                    check.refined = True
                    stats.replays.append(check)
                    return finish(ADVERSARIAL, candidate, label, assignment)
                candidate, run = payload
                check.ok, check.position, check.relation, check.refined = True, None, None, True
        if not check.ok:
            stats.divergent += 1
            log.info(
                "divergent replay at iteration %d: branch %d (%s) of %d",
                stats.iterations, check.position, check.relation, len(formula.literals),
            )
        stats.replays.append(check)

        for new in tree.integrate(run.trace.predicates, run.label, stats.iterations):
            worklist.push(new)
        stats.constraints_generated.append(len(run.trace))

    return finish(EXHAUSTED)


def _refine(model, inputs, sym_vars, formula, system, solver, budget, original_label, stats):
    """Retry a divergent SAT result with boundary-avoiding strict bounds."""
    tightened = tighten(system)
    if tightened is None:
        return None
    result = solver.solve(tightened, budget)
    stats.solver_times.append(result.time)
    stats.query_sizes.append(result.query_size)
    if result.status != "sat":
        return None
    candidate = _assign(inputs, sym_vars, result.model)
    try:
        label, _ = forward_concrete(model, candidate)
        if label != original_label:
            return "adversarial", (candidate, label, result.model)
        run = forward_concolic(model, candidate, sym_vars)
    except ConcolicError:
        return None
    ok, _ = check_replay(formula, run.trace)
    return ("replayed", (candidate, run)) if ok else None


__all__ = [
    "ADVERSARIAL",
    "EXHAUSTED",
    "QUEUE",
    "STACK",
    "TIMEOUT",
    "AttackResult",
    "AttackStats",
    "ExplorationTree",
    "Literal",
    "PathFormula",
    "ReplayCheck",
    "SearchConfig",
    "Worklist",
    "build_query",
    "check_adversarial",
    "check_replay",
    "execute",
    "negate_branch",
    "tighten",
]
