"""Concolic testing of small neural networks.

Forward passes run over concolic values, recording every branch that
depends on symbolic inputs.  The exploration loop negates recorded
branches, asks an SMT solver for inputs that take the other side, and stops
once the predicted class changes.
"""

from __future__ import annotations

from .core import BranchPredicate, BranchTrace, ConcolicError, ConcolicValue, SymExpr
from .explore import AttackResult, SearchConfig, check_adversarial
from .nn import ModelSpec, forward_concolic, forward_concrete, load_input, load_model
from .select import SelectionPolicy
from .solve import ConstraintSystem, Solver

__version__ = "0.1.0"

__all__ = [
    "AttackResult",
    "BranchPredicate",
    "BranchTrace",
    "ConcolicError",
    "ConcolicValue",
    "ConstraintSystem",
    "ModelSpec",
    "SearchConfig",
    "SelectionPolicy",
    "Solver",
    "SymExpr",
    "check_adversarial",
    "forward_concolic",
    "forward_concrete",
    "load_input",
    "load_model",
]
