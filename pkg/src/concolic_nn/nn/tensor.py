from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from ..core import ConcolicValue, ShapeError


@dataclass
class Tensor:
    """Row-major tensor of concolic values (last axis fastest)."""

    shape: tuple[int, ...]
    data: list[ConcolicValue]

    def __post_init__(self) -> None:
        self.shape = tuple(int(d) for d in self.shape)
        if any(d <= 0 for d in self.shape):
            raise ShapeError(f"non-positive dimension in shape {self.shape}")
        if len(self.data) != math.prod(self.shape):
            raise ShapeError(f"{len(self.data)} values do not fill shape {self.shape}")

    @classmethod
    def from_values(cls, shape: Sequence[int], values: Sequence[float]) -> Tensor:
        return cls(tuple(shape), [ConcolicValue(v) for v in values])

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return len(self.data)

    def values(self) -> list[float]:
        return [c.val for c in self.data]

    def reshape(self, shape: Sequence[int]) -> Tensor:
        return Tensor(tuple(shape), self.data)

    def __len__(self) -> int:
        return len(self.data)


def unflatten_index(index: int, shape: Sequence[int]) -> tuple[int, ...]:
    out = []
    for dim in reversed(shape):
        out.append(index % dim)
        index //= dim
    return tuple(reversed(out))


def flatten_index(position: Sequence[int], shape: Sequence[int]) -> int:
    if len(position) != len(shape):
        raise ShapeError(f"position {tuple(position)} does not match rank of {tuple(shape)}")
    index = 0
    for p, dim in zip(position, shape):
        if not 0 <= p < dim:
            raise ShapeError(f"position {tuple(position)} out of range for {tuple(shape)}")
        index = index * dim + p
    return index
