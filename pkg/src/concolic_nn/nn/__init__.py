from .activations import (
    ActivationThresholds,
    exp_c,
    relu,
    sigmoid_act,
    softmax,
    tanh_act,
)
from .layers import (
    LSTM,
    Activation,
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    SimpleRNN,
    conv2d,
    dense,
    lstm,
    lstm_states,
    maxpool2d,
    simple_rnn,
)
from .model import (
    ForwardResult,
    InputRecord,
    ModelFormatError,
    ModelSpec,
    argmax,
    forward_concolic,
    forward_concrete,
    load_input,
    load_model,
    model_from_dict,
    model_to_dict,
    save_input,
    save_model,
)
from .tensor import Tensor, flatten_index, unflatten_index

__all__ = [
    "LSTM",
    "Activation",
    "ActivationThresholds",
    "Conv2D",
    "Dense",
    "Flatten",
    "ForwardResult",
    "InputRecord",
    "MaxPool2D",
    "ModelFormatError",
    "ModelSpec",
    "SimpleRNN",
    "Tensor",
    "argmax",
    "conv2d",
    "dense",
    "exp_c",
    "flatten_index",
    "forward_concolic",
    "forward_concrete",
    "load_input",
    "load_model",
    "lstm",
    "lstm_states",
    "maxpool2d",
    "model_from_dict",
    "model_to_dict",
    "relu",
    "save_input",
    "save_model",
    "sigmoid_act",
    "simple_rnn",
    "softmax",
    "tanh_act",
    "unflatten_index",
]
