"""Instrumented activation functions.

tanh and sigmoid carry extra "extreme value" branches so that the search
can steer a neuron towards 0 or towards saturation.  Both are computed
through :func:`exp_c`, which records a bracketing condition on its argument
and then downgrades the result to a plain constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..core import (
    EQ,
    GE,
    GT,
    LE,
    LT,
    Atom,
    BranchPredicate,
    BranchTrace,
    ConcolicValue,
    NumericOverflow,
    ShapeError,
    add,
    compare,
    const,
    mul,
)
from .tensor import Tensor

ZERO = ConcolicValue(0.0)
ONE = ConcolicValue(1.0)
TWO = ConcolicValue(2.0)


@dataclass(frozen=True)
class ActivationThresholds:
    tanh: float = 3.0
    sigmoid: float = 6.0

    def __post_init__(self) -> None:
        if not (self.tanh > 0 and self.sigmoid > 0):
            raise ValueError("activation thresholds must be strictly positive")


DEFAULT_THRESHOLDS = ActivationThresholds()


def relu(x: ConcolicValue, rec: BranchTrace) -> ConcolicValue:
    if compare(x, ZERO, LT, rec):
        return ZERO
    return x


def exp_c(x: ConcolicValue, rec: BranchTrace) -> ConcolicValue:
    """Instrumented ``e**x``; the result never carries a symbolic expression.

    Negative arguments go through ``1/exp(-x)``, arguments above one through
    ``exp(x/2)**2`` (one recursive call, squared).  On ``[0, 1]`` the branch
    ``c >= 1 + x and c <= 1 + 2x`` is recorded, where ``c`` is the concrete
    ``math.exp(x)``; after that the value is a constant.
    """
    if compare(x, ZERO, LT, rec):
        return ONE / exp_c(-x, rec)
    if compare(x, ONE, GT, rec):
        half = exp_c(x / TWO, rec)
        return ConcolicValue((half * half).val)
    try:
        c = math.exp(x.val)
    except OverflowError:
        raise NumericOverflow(f"exp({x.val!r}) overflows") from None
    if x.exp is not None:
        lower = add(const(1.0), x.exp)
        upper = add(const(1.0), mul(const(2.0), x.exp))
        taken = c >= 1.0 + x.val and c <= 1.0 + 2.0 * x.val
        rec.record(BranchPredicate((Atom(const(c), GE, lower), Atom(const(c), LE, upper)), taken))
    return ConcolicValue(c)


def tanh_act(
    x: ConcolicValue, rec: BranchTrace, thresholds: ActivationThresholds = DEFAULT_THRESHOLDS
) -> ConcolicValue:
    limit = ConcolicValue(thresholds.tanh)
    # every arm evaluates the same expression; the cascade only exists to
    # leave predicates behind
    if not compare(x, ZERO, EQ, rec):
        if not compare(x, limit, GE, rec):
            compare(x, -limit, LE, rec)
    e_pos = exp_c(x, rec)
    e_neg = exp_c(-x, rec)
    return (e_pos - e_neg) / (e_pos + e_neg)


def sigmoid_act(
    x: ConcolicValue, rec: BranchTrace, thresholds: ActivationThresholds = DEFAULT_THRESHOLDS
) -> ConcolicValue:
    limit = ConcolicValue(thresholds.sigmoid)
    if not compare(x, ZERO, EQ, rec):
        if not compare(x, limit, GE, rec):
            compare(x, -limit, LE, rec)
    return ONE / (ONE + exp_c(-x, rec))


def linear(x: ConcolicValue, rec: BranchTrace) -> ConcolicValue:
    return x


def softmax(logits: Tensor) -> Tensor:
    """Plain softmax on the concrete values; no branches, no max shift."""
    if logits.rank != 1:
        raise ShapeError(f"softmax expects a rank-1 tensor, got shape {logits.shape}")
    try:
        exps = [math.exp(c.val) for c in logits.data]
    except OverflowError:
        raise NumericOverflow("softmax exponent overflows") from None
    total = math.fsum(exps)
    if not math.isfinite(total) or total == 0:
        raise NumericOverflow(f"softmax normalizer is {total!r}")
    return Tensor(logits.shape, [ConcolicValue(e / total) for e in exps])


ELEMENTWISE = ("relu", "tanh", "sigmoid", "linear")
ACTIVATIONS = ELEMENTWISE + ("softmax",)


def apply_activation(
    kind: str, t: Tensor, rec: BranchTrace, thresholds: ActivationThresholds = DEFAULT_THRESHOLDS
) -> Tensor:
    """Apply an activation element-wise in flat (row-major) order."""
    if kind == "softmax":
        return softmax(t)
    if kind == "linear":
        return t
    if kind == "relu":
        out = [relu(c, rec) for c in t.data]
    elif kind == "tanh":
        out = [tanh_act(c, rec, thresholds) for c in t.data]
    elif kind == "sigmoid":
        out = [sigmoid_act(c, rec, thresholds) for c in t.data]
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return Tensor(t.shape, out)
