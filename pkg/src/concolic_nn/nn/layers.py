"""Layer definitions and their instrumented forward functions.

Loops follow the textbook for-loop formulations so that accumulation order,
and therefore both the concrete rounding and the shape of the recorded
expressions, is fixed and reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from ..core import LT, BranchTrace, ConcolicValue, ShapeError, compare
from .activations import (
    ACTIVATIONS,
    DEFAULT_THRESHOLDS,
    ActivationThresholds,
    apply_activation,
    sigmoid_act,
    tanh_act,
)
from .tensor import Tensor

Matrix = list[list[float]]


def _dims(name: str, m: Matrix, rows: int | None = None, cols: int | None = None) -> tuple[int, int]:
    if not m or not all(isinstance(r, list) for r in m):
        raise ShapeError(f"{name} must be a non-empty 2-D array")
    width = len(m[0])
    if width == 0 or any(len(r) != width for r in m):
        raise ShapeError(f"{name} is ragged or empty")
    if rows is not None and len(m) != rows:
        raise ShapeError(f"{name} has {len(m)} rows, expected {rows}")
    if cols is not None and width != cols:
        raise ShapeError(f"{name} has {width} columns, expected {cols}")
    return len(m), width


def _vector(name: str, v: list[float], length: int) -> None:
    if len(v) != length:
        raise ShapeError(f"{name} has length {len(v)}, expected {length}")


def _check_activation(kind: str, allowed=ACTIVATIONS) -> None:
    if kind not in allowed:
        raise ValueError(f"unsupported activation {kind!r}")


@dataclass
class Dense:
    weights: Matrix  # [in][out]
    bias: list[float]
    activation: str = "linear"

    def __post_init__(self) -> None:
        _, out = _dims("dense weights", self.weights)
        _vector("dense bias", self.bias, out)
        _check_activation(self.activation)

    @property
    def in_dim(self) -> int:
        return len(self.weights)

    @property
    def out_dim(self) -> int:
        return len(self.weights[0])

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if shape != (self.in_dim,):
            raise ShapeError(f"dense expects shape ({self.in_dim},), got {shape}")
        return (self.out_dim,)


@dataclass
class Conv2D:
    kernel: list  # [filters][rows][cols][depth]
    bias: list[float]
    stride: int = 1
    activation: str = "linear"

    def __post_init__(self) -> None:
        k = self.kernel
        try:
            self.filters, self.m, self.n, self.l = len(k), len(k[0]), len(k[0][0]), len(k[0][0][0])
        except (TypeError, IndexError):
            raise ShapeError("conv2d kernel must be a 4-D array [filter][row][col][depth]") from None
        for f in k:
            if len(f) != self.m or any(len(r) != self.n for r in f):
                raise ShapeError("conv2d kernel is ragged")
            if any(len(c) != self.l for r in f for c in r):
                raise ShapeError("conv2d kernel is ragged")
        if min(self.filters, self.m, self.n, self.l) == 0:
            raise ShapeError("conv2d kernel has an empty dimension")
        _vector("conv2d bias", self.bias, self.filters)
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        _check_activation(self.activation)

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if len(shape) != 3:
            raise ShapeError(f"conv2d expects a rank-3 input, got {shape}")
        h, w, d = shape
        if h < self.m or w < self.n or d != self.l:
            raise ShapeError(f"conv2d kernel {self.m}x{self.n}x{self.l} does not fit input {shape}")
        return ((h - self.m) // self.stride + 1, (w - self.n) // self.stride + 1, self.filters)


@dataclass
class MaxPool2D:
    pool: tuple[int, int]
    stride: int | None = None

    def __post_init__(self) -> None:
        self.pool = tuple(int(p) for p in self.pool)
        if len(self.pool) != 2 or min(self.pool) < 1:
            raise ShapeError(f"pool must be two positive integers, got {self.pool}")
        if self.stride is None:
            self.stride = self.pool[0]
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if len(shape) != 3:
            raise ShapeError(f"maxpool2d expects a rank-3 input, got {shape}")
        h, w, d = shape
        m, n = self.pool
        if h < m or w < n:
            raise ShapeError(f"pool {self.pool} does not fit input {shape}")
        return ((h - m) // self.stride + 1, (w - n) // self.stride + 1, d)


@dataclass
class Flatten:
    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        size = 1
        for d in shape:
            size *= d
        return (size,)


@dataclass
class SimpleRNN:
    W_xh: Matrix  # [in][units]
    W_hh: Matrix  # [units][units]
    b_h: list[float]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        _, units = _dims("W_xh", self.W_xh)
        _dims("W_hh", self.W_hh, units, units)
        _vector("b_h", self.b_h, units)
        _check_activation(self.activation, ("tanh", "linear"))

    @property
    def units(self) -> int:
        return len(self.b_h)

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if len(shape) != 2 or shape[1] != len(self.W_xh):
            raise ShapeError(f"simple_rnn expects shape (T, {len(self.W_xh)}), got {shape}")
        return (self.units,)


_GATES = ("i", "f", "C", "o")


@dataclass
class LSTM:
    W_i: Matrix
    W_f: Matrix
    W_C: Matrix
    W_o: Matrix
    U_i: Matrix
    U_f: Matrix
    U_C: Matrix
    U_o: Matrix
    b_i: list[float]
    b_f: list[float]
    b_C: list[float]
    b_o: list[float]

    def __post_init__(self) -> None:
        features, units = _dims("W_i", self.W_i)
        for g in _GATES:
            _dims(f"W_{g}", getattr(self, f"W_{g}"), features, units)
            _dims(f"U_{g}", getattr(self, f"U_{g}"), units, units)
            _vector(f"b_{g}", getattr(self, f"b_{g}"), units)

    @property
    def units(self) -> int:
        return len(self.b_i)

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if len(shape) != 2 or shape[1] != len(self.W_i):
            raise ShapeError(f"lstm expects shape (T, {len(self.W_i)}), got {shape}")
        return (self.units,)


@dataclass
class Activation:
    kind: str

    def __post_init__(self) -> None:
        _check_activation(self.kind)

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind == "softmax" and len(shape) != 1:
            raise ShapeError(f"softmax expects a rank-1 input, got {shape}")
        return shape


LayerSpec = Union[Dense, Conv2D, MaxPool2D, Flatten, SimpleRNN, LSTM, Activation]


def _zero() -> ConcolicValue:
    return ConcolicValue(0.0)


def dense(
    x: Tensor, layer: Dense, rec: BranchTrace, thresholds: ActivationThresholds = DEFAULT_THRESHOLDS
) -> Tensor:
    shape = layer.output_shape(x.shape)
    out = []
    for j in range(layer.out_dim):
        y = _zero()
        for i in range(layer.in_dim):
            y = y + x.data[i] * layer.weights[i][j]
        out.append(y + layer.bias[j])
    return apply_activation(layer.activation, Tensor(shape, out), rec, thresholds)


def conv2d(
    x: Tensor, layer: Conv2D, rec: BranchTrace, thresholds: ActivationThresholds = DEFAULT_THRESHOLDS
) -> Tensor:
    oh, ow, filters = shape = layer.output_shape(x.shape)
    _, width, depth = x.shape
    s, m, n, l = layer.stride, layer.m, layer.n, layer.l
    out: list[ConcolicValue | None] = [None] * (oh * ow * filters)
    for k in range(filters):
        kernel = layer.kernel[k]
        for i in range(oh):
            for j in range(ow):
                acc = _zero()
                for row in range(i * s, i * s + m):
                    for col in range(j * s, j * s + n):
                        base = (row * width + col) * depth
                        weights = kernel[row - i * s][col - j * s]
                        for dep in range(l):
                            acc = acc + x.data[base + dep] * weights[dep]
                out[(i * ow + j) * filters + k] = acc + layer.bias[k]
    return apply_activation(layer.activation, Tensor(shape, out), rec, thresholds)


def _fold_max(window: list[ConcolicValue], rec: BranchTrace) -> ConcolicValue:
    best = window[0]
    for e in window[1:]:
        if compare(best, e, LT, rec):
            best = e
    return best


def maxpool2d(x: Tensor, layer: MaxPool2D, rec: BranchTrace) -> Tensor:
    oh, ow, depth = shape = layer.output_shape(x.shape)
    width = x.shape[1]
    m, n = layer.pool
    s = layer.stride
    out = []
    for i in range(oh):
        for j in range(ow):
            for k in range(depth):
                window = [
                    x.data[(row * width + col) * depth + k]
                    for row in range(i * s, i * s + m)
                    for col in range(j * s, j * s + n)
                ]
                out.append(_fold_max(window, rec))
    return Tensor(shape, out)


def flatten(x: Tensor) -> Tensor:
    return x.reshape((x.size,))


def simple_rnn(
    seq: Tensor, layer: SimpleRNN, rec: BranchTrace, thresholds: ActivationThresholds = DEFAULT_THRESHOLDS
) -> Tensor:
    shape = layer.output_shape(seq.shape)
    steps, features = seq.shape
    units = layer.units
    h_prev = [_zero() for _ in range(units)]
    for t in range(steps):
        x = seq.data[t * features:(t + 1) * features]
        h_t = []
        for i in range(units):
            h = _zero()
            for j in range(units):
                h = h + h_prev[j] * layer.W_hh[j][i]
            for j in range(features):
                h = h + x[j] * layer.W_xh[j][i]
            h = h + layer.b_h[i]
            h_t.append(tanh_act(h, rec, thresholds) if layer.activation == "tanh" else h)
        h_prev = h_t
    return Tensor(shape, h_prev)


def lstm_states(
    seq: Tensor, layer: LSTM, rec: BranchTrace, thresholds: ActivationThresholds = DEFAULT_THRESHOLDS
) -> tuple[list[ConcolicValue], list[ConcolicValue]]:
    """Run the LSTM over ``seq`` and return the final ``(h, C)`` state."""
    layer.output_shape(seq.shape)
    steps, features = seq.shape
    units = layer.units
    h_prev = [_zero() for _ in range(units)]
    c_prev = [_zero() for _ in range(units)]
    for t in range(steps):
        x = seq.data[t * features:(t + 1) * features]
        gi = [_zero() for _ in range(units)]
        gf = [_zero() for _ in range(units)]
        go = [_zero() for _ in range(units)]
        gc = [_zero() for _ in range(units)]
        for j in range(units):
            for k in range(features):
                gi[j] = gi[j] + x[k] * layer.W_i[k][j]
                gf[j] = gf[j] + x[k] * layer.W_f[k][j]
                go[j] = go[j] + x[k] * layer.W_o[k][j]
                gc[j] = gc[j] + x[k] * layer.W_C[k][j]
            for l in range(units):
                gi[j] = gi[j] + h_prev[l] * layer.U_i[l][j]
                gf[j] = gf[j] + h_prev[l] * layer.U_f[l][j]
                go[j] = go[j] + h_prev[l] * layer.U_o[l][j]
                gc[j] = gc[j] + h_prev[l] * layer.U_C[l][j]
            gi[j] = gi[j] + layer.b_i[j]
            gf[j] = gf[j] + layer.b_f[j]
            go[j] = go[j] + layer.b_o[j]
            gc[j] = gc[j] + layer.b_C[j]
        c_t = []
        h_t = []
        for j in range(units):
            forget = sigmoid_act(gf[j], rec, thresholds)
            keep = forget * c_prev[j]
            admit = sigmoid_act(gi[j], rec, thresholds)
            c = keep + admit * tanh_act(gc[j], rec, thresholds)
            c_t.append(c)
            h_t.append(sigmoid_act(go[j], rec, thresholds) * tanh_act(c, rec, thresholds))
        h_prev, c_prev = h_t, c_t
    return h_prev, c_prev


def lstm(
    seq: Tensor, layer: LSTM, rec: BranchTrace, thresholds: ActivationThresholds = DEFAULT_THRESHOLDS
) -> Tensor:
    h, _ = lstm_states(seq, layer, rec, thresholds)
    return Tensor((layer.units,), h)


def apply_layer(
    x: Tensor, layer: LayerSpec, rec: BranchTrace, thresholds: ActivationThresholds = DEFAULT_THRESHOLDS
) -> Tensor:
    if isinstance(layer, Dense):
        return dense(x, layer, rec, thresholds)
    if isinstance(layer, Conv2D):
        return conv2d(x, layer, rec, thresholds)
    if isinstance(layer, MaxPool2D):
        return maxpool2d(x, layer, rec)
    if isinstance(layer, Flatten):
        return flatten(x)
    if isinstance(layer, SimpleRNN):
        return simple_rnn(x, layer, rec, thresholds)
    if isinstance(layer, LSTM):
        return lstm(x, layer, rec, thresholds)
    if isinstance(layer, Activation):
        layer.output_shape(x.shape)
        return apply_activation(layer.kind, x, rec, thresholds)
    raise TypeError(f"unknown layer type {type(layer).__name__}")
