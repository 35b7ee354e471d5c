"""Model container, JSON (de)serialization and the two forward passes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Sequence

from ..core import BranchTrace, ConcolicValue, ShapeError
from .activations import DEFAULT_THRESHOLDS, ActivationThresholds
from .layers import (
    LSTM,
    Activation,
    Conv2D,
    Dense,
    Flatten,
    LayerSpec,
    MaxPool2D,
    SimpleRNN,
    apply_layer,
)
from .tensor import Tensor


class ModelFormatError(ValueError):
    """A model or input document does not follow the expected schema."""


@dataclass
class ModelSpec:
    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    thresholds: ActivationThresholds = field(default=DEFAULT_THRESHOLDS)

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if not self.input_shape or min(self.input_shape) < 1:
            raise ShapeError(f"invalid input shape {self.input_shape}")
        shape = self.input_shape
        for index, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {index} ({type(layer).__name__}): {exc}") from None
        if len(shape) != 1:
            raise ShapeError(f"model output must be rank 1, got shape {shape}")
        self.output_shape = shape

    @property
    def class_count(self) -> int:
        return self.output_shape[0]

    @property
    def input_size(self) -> int:
        return math.prod(self.input_shape)


class ForwardResult(NamedTuple):
    label: int
    probs: list[float]
    trace: BranchTrace


def argmax(values: Sequence[float]) -> int:
    """Index of the largest value; ties go to the lowest index."""
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def forward_concolic(
    model: ModelSpec,
    inputs: Tensor | Sequence[float],
    sym_vars: Sequence[tuple[int, int]] = (),
) -> ForwardResult:
    """Run ``model`` with the listed ``(flat_index, var_id)`` positions symbolic.

    Returns the predicted class, the final-layer output values and the trace
    of branch predicates in encounter order.
    """
    values = inputs.values() if isinstance(inputs, Tensor) else [float(v) for v in inputs]
    if len(values) != model.input_size:
        raise ShapeError(f"input has {len(values)} values, model expects {model.input_size}")
    data = [ConcolicValue(v) for v in values]
    seen_ids = set()
    for index, var_id in sym_vars:
        if not 0 <= index < len(values):
            raise ShapeError(f"symbolic index {index} out of range")
        if var_id in seen_ids:
            raise ValueError(f"duplicate variable id {var_id}")
        seen_ids.add(var_id)
        data[index] = ConcolicValue.symbol(values[index], var_id)
    rec = BranchTrace()
    x = Tensor(model.input_shape, data)
    for layer in model.layers:
        x = apply_layer(x, layer, rec, model.thresholds)
    probs = x.values()
    return ForwardResult(argmax(probs), probs, rec)


def forward_concrete(model: ModelSpec, inputs: Tensor | Sequence[float]) -> tuple[int, list[float]]:
    """Plain prediction: same arithmetic as :func:`forward_concolic`, nothing symbolic."""
    label, probs, _ = forward_concolic(model, inputs)
    return label, probs


# ---------------------------------------------------------------------------
# JSON formats
# ---------------------------------------------------------------------------

_LAYER_FIELDS: dict[str, tuple[type, set[str], set[str]]] = {
    # type tag: (class, required fields, optional fields)
    "dense": (Dense, {"weights", "bias"}, {"activation"}),
    "conv2d": (Conv2D, {"kernel", "bias"}, {"stride", "activation"}),
    "maxpool2d": (MaxPool2D, {"pool"}, {"stride"}),
    "flatten": (Flatten, set(), set()),
    "simple_rnn": (SimpleRNN, {"W_xh", "W_hh", "b_h"}, {"activation"}),
    "lstm": (
        LSTM,
        {f"{p}_{g}" for p in ("W", "U", "b") for g in ("i", "f", "C", "o")},
        set(),
    ),
    "activation": (Activation, {"kind"}, set()),
}

_TYPE_NAMES = {cls: tag for tag, (cls, _, _) in _LAYER_FIELDS.items()}


def _check_keys(where: str, doc: dict, required: set[str], optional: set[str]) -> None:
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{where}: expected an object")
    missing = required - doc.keys()
    if missing:
        raise ModelFormatError(f"{where}: missing field(s) {sorted(missing)}")
    unknown = doc.keys() - required - optional
    if unknown:
        raise ModelFormatError(f"{where}: unknown field(s) {sorted(unknown)}")


def _check_numbers(where: str, value: Any) -> None:
    stack = [value]
    while stack:
        v = stack.pop()
        if isinstance(v, list):
            stack.extend(v)
        elif isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ModelFormatError(f"{where}: expected finite numbers, found {v!r}")


def _as_float(value: Any) -> Any:
    if isinstance(value, list):
        return [_as_float(v) for v in value]
    return float(value)


def layer_from_dict(doc: dict, where: str = "layer") -> LayerSpec:
    if not isinstance(doc, dict) or "type" not in doc:
        raise ModelFormatError(f"{where}: missing 'type'")
    tag = doc["type"]
    if tag not in _LAYER_FIELDS:
        raise ModelFormatError(f"{where}: unknown layer type {tag!r}")
    cls, required, optional = _LAYER_FIELDS[tag]
    body = {k: v for k, v in doc.items() if k != "type"}
    _check_keys(where, body, required, optional)
    kwargs = {}
    for key, value in body.items():
        if key in ("activation", "kind"):
            if not isinstance(value, str):
                raise ModelFormatError(f"{where}: {key} must be a string")
            kwargs[key] = value
        elif key == "stride":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ModelFormatError(f"{where}: stride must be an integer")
            kwargs[key] = value
        elif key == "pool":
            if not (isinstance(value, list) and len(value) == 2 and all(isinstance(p, int) for p in value)):
                raise ModelFormatError(f"{where}: pool must be [m, n]")
            kwargs[key] = tuple(value)
        else:
            _check_numbers(f"{where}.{key}", value)
            kwargs[key] = _as_float(value)
    try:
        return cls(**kwargs)
    except (ShapeError, ValueError) as exc:
        raise ModelFormatError(f"{where}: {exc}") from None


def layer_to_dict(layer: LayerSpec) -> dict:
    tag = _TYPE_NAMES[type(layer)]
    _, required, optional = _LAYER_FIELDS[tag]
    out: dict[str, Any] = {"type": tag}
    for key in sorted(required | optional):
        value = getattr(layer, key)
        if key == "pool":
            value = list(value)
        out[key] = value
    return out


def model_from_dict(doc: dict) -> ModelSpec:
    _check_keys("model", doc, {"input_shape", "layers"}, {"thresholds", "classes"})
    shape = doc["input_shape"]
    if not (isinstance(shape, list) and shape and all(isinstance(d, int) and d > 0 for d in shape)):
        raise ModelFormatError("model.input_shape must be a list of positive integers")
    if not isinstance(doc["layers"], list):
        raise ModelFormatError("model.layers must be a list")
    layers = [layer_from_dict(d, f"layers[{i}]") for i, d in enumerate(doc["layers"])]
    thresholds = DEFAULT_THRESHOLDS
    if "thresholds" in doc:
        t = doc["thresholds"]
        _check_keys("model.thresholds", t, set(), {"tanh", "sigmoid"})
        _check_numbers("model.thresholds", list(t.values()))
        try:
            thresholds = ActivationThresholds(**{k: float(v) for k, v in t.items()})
        except ValueError as exc:
            raise ModelFormatError(str(exc)) from None
    try:
        model = ModelSpec(tuple(shape), layers, thresholds)
    except ShapeError as exc:
        raise ModelFormatError(str(exc)) from None
    if "classes" in doc and doc["classes"] != model.class_count:
        raise ModelFormatError(f"model declares {doc['classes']} classes but outputs {model.class_count}")
    return model


def model_to_dict(model: ModelSpec) -> dict:
    doc: dict[str, Any] = {
        "input_shape": list(model.input_shape),
        "layers": [layer_to_dict(l) for l in model.layers],
    }
    if model.thresholds != DEFAULT_THRESHOLDS:
        doc["thresholds"] = {"tanh": model.thresholds.tanh, "sigmoid": model.thresholds.sigmoid}
    return doc


def load_model(path: str | Path) -> ModelSpec:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: invalid JSON ({exc})") from None
    return model_from_dict(doc)


def save_model(model: ModelSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1), encoding="utf-8")


@dataclass
class InputRecord:
    shape: tuple[int, ...]
    data: list[float]
    label: int | None = None

    def __post_init__(self) -> None:
        self.shape = tuple(self.shape)
        if len(self.data) != math.prod(self.shape):
            raise ModelFormatError(f"input has {len(self.data)} values for shape {self.shape}")

    def tensor(self) -> Tensor:
        return Tensor.from_values(self.shape, self.data)


def input_from_dict(doc: dict) -> InputRecord:
    _check_keys("input", doc, {"shape", "data"}, {"label"})
    shape = doc["shape"]
    if not (isinstance(shape, list) and shape and all(isinstance(d, int) and d > 0 for d in shape)):
        raise ModelFormatError("input.shape must be a list of positive integers")
    data = doc["data"]
    if not isinstance(data, list) or any(isinstance(v, list) for v in data):
        raise ModelFormatError("input.data must be a flat list of numbers")
    _check_numbers("input.data", data)
    label = doc.get("label")
    if label is not None and (isinstance(label, bool) or not isinstance(label, int)):
        raise ModelFormatError("input.label must be an integer")
    return InputRecord(tuple(shape), [float(v) for v in data], label)


def input_to_dict(record: InputRecord) -> dict:
    doc: dict[str, Any] = {"shape": list(record.shape), "data": list(record.data)}
    if record.label is not None:
        doc["label"] = record.label
    return doc


def load_input(path: str | Path) -> InputRecord:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: invalid JSON ({exc})") from None
    return input_from_dict(doc)


def save_input(record: InputRecord, path: str | Path) -> None:
    Path(path).write_text(json.dumps(input_to_dict(record)), encoding="utf-8")
