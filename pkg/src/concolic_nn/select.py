"""Choosing which input positions become symbolic attack variables."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .nn.model import ModelSpec, forward_concrete

RANDOM = "random"
SCORES = "scores"
OCCLUSION = "occlusion"


class SelectionError(ValueError):
    pass


def select_random(size: int, k: int, seed: int) -> list[int]:
    """``k`` distinct indices drawn uniformly without replacement, in draw order."""
    if k < 1:
        raise SelectionError(f"k must be at least 1, got {k}")
    if k > size:
        raise SelectionError(f"cannot select {k} of {size} positions")
    return random.Random(seed).sample(range(size), k)


def select_by_scores(scores: Sequence[float], k: int, size: int | None = None) -> list[int]:
    """Indices of the ``k`` highest scores, best first; ties go to the lower index."""
    if size is not None and len(scores) != size:
        raise SelectionError(f"{len(scores)} scores for an input of size {size}")
    if k < 1:
        raise SelectionError(f"k must be at least 1, got {k}")
    if k > len(scores):
        raise SelectionError(f"cannot select {k} of {len(scores)} positions")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]


def occlusion_scores(model: ModelSpec, inputs: Sequence[float], baseline: float = 0.0) -> list[float]:
    """Drop in the original class probability when each position is set to ``baseline``."""
    inputs = [float(v) for v in inputs]
    label, probs = forward_concrete(model, inputs)
    reference = probs[label]
    scores = []
    for i in range(len(inputs)):
        probe = list(inputs)
        probe[i] = baseline
        _, p = forward_concrete(model, probe)
        scores.append(reference - p[label])
    return scores


def load_scores(path: str | Path, size: int) -> list[float]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, list) or any(
        isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) for v in doc
    ):
        raise SelectionError(f"{path}: expected a JSON array of finite numbers")
    if len(doc) != size:
        raise SelectionError(f"{path}: {len(doc)} scores for an input of size {size}")
    return [float(v) for v in doc]


@dataclass(frozen=True)
class SelectionPolicy:
    """``kind`` is one of random / scores / occlusion."""

    kind: str = RANDOM
    seed: int = 0
    path: str | None = None
    baseline: float = 0.0

    @classmethod
    def parse(cls, text: str, seed: int = 0, baseline: float = 0.0) -> SelectionPolicy:
        """Parse the command-line form: ``random``, ``occlusion`` or ``scores:PATH``."""
        if text == RANDOM:
            return cls(RANDOM, seed=seed)
        if text == OCCLUSION:
            return cls(OCCLUSION, baseline=baseline)
        if text.startswith(SCORES + ":") and len(text) > len(SCORES) + 1:
            return cls(SCORES, path=text[len(SCORES) + 1:])
        raise SelectionError(f"unknown selection policy {text!r}")

    def describe(self) -> str:
        if self.kind == SCORES:
            return f"scores:{self.path}"
        return self.kind

    def select(self, model: ModelSpec, inputs: Sequence[float], k: int) -> list[int]:
        size = len(inputs)
        if self.kind == RANDOM:
            return select_random(size, k, self.seed)
        if self.kind == SCORES:
            return select_by_scores(load_scores(self.path, size), k, size)
        if self.kind == OCCLUSION:
            return select_by_scores(occlusion_scores(model, inputs, self.baseline), k, size)
        raise SelectionError(f"unknown selection policy {self.kind!r}")
