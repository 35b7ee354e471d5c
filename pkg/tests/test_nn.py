from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concolic_nn.core import EQ, GE, GT, LE, LT, BranchTrace, ConcolicValue, ShapeError, affine_form
from concolic_nn.nn import (
    LSTM,
    Activation,
    ActivationThresholds,
    Conv2D,
    Dense,
    MaxPool2D,
    ModelFormatError,
    ModelSpec,
    SimpleRNN,
    conv2d,
    dense,
    exp_c,
    forward_concolic,
    forward_concrete,
    lstm,
    lstm_states,
    maxpool2d,
    relu,
    sigmoid_act,
    simple_rnn,
    softmax,
    tanh_act,
)
from concolic_nn.nn.model import (
    input_from_dict,
    layer_from_dict,
    layer_to_dict,
    load_model,
    model_from_dict,
    model_to_dict,
    save_model,
)
from concolic_nn.nn.tensor import Tensor, flatten_index, unflatten_index

import oracles
from conftest import RUNNING


def sym(v, i=0):
    return ConcolicValue.symbol(v, i)


def tensor(array):
    a = np.asarray(array, dtype=float)
    return Tensor.from_values(a.shape, a.ravel().tolist())


def values(t: Tensor):
    return np.asarray(t.values()).reshape(t.shape)


class TestTensor:
    def test_row_major_indexing(self):
        shape = (2, 3, 4)
        for flat in range(24):
            pos = unflatten_index(flat, shape)
            assert flatten_index(pos, shape) == flat
        assert unflatten_index(5, shape) == (0, 1, 1)

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor.from_values((2, 2), [1.0, 2.0, 3.0])


class TestRelu:
    def test_negative(self):
        rec = BranchTrace()
        out = relu(sym(-2.0), rec)
        assert out.val == 0.0 and out.exp is None
        assert rec[0].relation == LT and rec[0].taken

    def test_positive_keeps_expression(self):
        rec = BranchTrace()
        x = sym(-0.8) * 0.1 + 1.028
        out = relu(x, rec)
        assert out is x and not rec[0].taken

    def test_zero_takes_false_arm(self):
        rec = BranchTrace()
        assert relu(sym(0.0), rec).val == 0.0
        assert rec[0].taken is False


class TestExp:
    def test_running_example_bracket(self):
        rec = BranchTrace()
        x = sym(-0.8) * 0.1 + 1.028
        out = exp_c(x, rec)
        assert out.val == pytest.approx(2.5805, abs=1e-4)
        assert out.exp is None
        lt, gt, bracket = rec.predicates
        assert (lt.relation, lt.taken) == (LT, False)
        assert (gt.relation, gt.taken) == (GT, False)
        lo, hi = bracket.atoms
        assert (lo.relation, hi.relation) == (GE, LE) and bracket.taken
        c0, co0 = affine_form(lo.rhs)
        c1, co1 = affine_form(hi.rhs)
        assert c0 == pytest.approx(2.028) and co0[0] == pytest.approx(0.1)
        assert c1 == pytest.approx(3.056) and co1[0] == pytest.approx(0.2)

    def test_zero(self):
        rec = BranchTrace()
        assert exp_c(sym(0.0), rec).val == 1.0
        assert rec[-1].taken

    def test_negative_goes_through_reciprocal(self):
        rec = BranchTrace()
        assert exp_c(sym(-0.5), rec).val == pytest.approx(1 / math.exp(0.5), rel=1e-12)
        assert rec[0].relation == LT and rec[0].taken

    def test_large_argument_recorded_once_per_halving(self):
        rec = BranchTrace()
        out = exp_c(sym(3.0), rec)
        assert out.val == pytest.approx(math.exp(3.0), rel=1e-12)
        # 3 -> 1.5 -> 0.75: two halvings, one bracket
        assert [len(p.atoms) for p in rec] == [1, 1, 1, 1, 1, 1, 2]

    def test_concrete_argument_records_nothing(self):
        rec = BranchTrace()
        exp_c(ConcolicValue(0.3), rec)
        assert len(rec) == 0

    @settings(max_examples=300, deadline=None)
    @given(st.floats(1.0, 40.0, exclude_min=True))
    def test_decomposition_above_one(self, x):
        rec = BranchTrace()
        assert exp_c(sym(x), rec).val == pytest.approx(exp_c(sym(x / 2), BranchTrace()).val ** 2, rel=1e-9)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-40.0, 0.0, exclude_max=True))
    def test_reciprocal_below_zero(self, x):
        a = exp_c(sym(x), BranchTrace()).val
        b = exp_c(sym(-x), BranchTrace()).val
        assert a * b == pytest.approx(1.0, rel=1e-9)

    def test_bracket_on_grid(self):
        for x in np.linspace(0.0, 1.0, 1001):
            rec = BranchTrace()
            exp_c(sym(float(x)), rec)
            assert rec[-1].taken and len(rec[-1].atoms) == 2


class TestTanhSigmoid:
    def test_running_example_sequence(self):
        rec = BranchTrace()
        out = tanh_act(sym(-0.8) * 0.1 + 1.028, rec)
        assert out.val == pytest.approx(0.738, abs=1e-3)
        head = [(p.relation, p.taken) for p in rec.predicates[:5]]
        assert head == [(EQ, False), (GE, False), (LE, False), (LT, False), (GT, False)]
        assert len(rec[5].atoms) == 2

    def test_concrete_zero_is_silent(self):
        rec = BranchTrace()
        assert tanh_act(ConcolicValue(0.0), rec).val == 0.0
        assert len(rec) == 0

    def test_saturation_branch(self):
        rec = BranchTrace()
        out = tanh_act(sym(5.0), rec)
        assert out.val == pytest.approx(math.tanh(5.0), rel=1e-12)
        assert rec[0].taken is False and rec[1].taken is True

    def test_zero_stops_cascade(self):
        rec = BranchTrace()
        assert tanh_act(sym(0.0), rec).val == 0.0
        assert rec[0].taken and rec[1].relation == LT  # exp branches follow immediately

    def test_sigmoid_values(self):
        rec = BranchTrace()
        assert sigmoid_act(sym(0.0), rec).val == 0.5 and rec[0].taken
        rec = BranchTrace()
        assert sigmoid_act(sym(2.0), rec).val == pytest.approx(0.8807970779778823, rel=1e-12)
        assert [p.taken for p in rec.predicates[:3]] == [False, False, False]
        rec = BranchTrace()
        assert sigmoid_act(sym(-7.0), rec).val == pytest.approx(9.110511944006454e-4, rel=1e-9)
        assert [p.taken for p in rec.predicates[:3]] == [False, False, True]

    def test_custom_threshold(self):
        rec = BranchTrace()
        sigmoid_act(sym(-4.0), rec, ActivationThresholds(sigmoid=3.0))
        assert rec[2].taken

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-300.0, 300.0))
    def test_ranges(self, x):
        t = tanh_act(sym(x), BranchTrace()).val
        s = sigmoid_act(sym(x), BranchTrace()).val
        assert -1.0 <= t <= 1.0
        assert 0.0 < s < 1.0 or (x > 30 and s == 1.0)
        assert t == pytest.approx(math.tanh(x), rel=1e-9, abs=1e-12)


class TestSoftmax:
    def test_running_example_values(self):
        p = softmax(tensor([0.738, -0.021])).values()
        assert p == pytest.approx([0.681, 0.319], abs=1e-3)
        p = softmax(tensor([0.0, -0.2077])).values()
        assert p == pytest.approx([0.552, 0.448], abs=1e-3)

    def test_symmetry(self):
        assert softmax(tensor([3.3, 3.3])).values() == [0.5, 0.5]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_normalized(self, logits):
        p = softmax(tensor(logits)).values()
        assert math.fsum(p) == pytest.approx(1.0, abs=1e-9)
        assert all(v > 0 for v in p)

    def test_drops_expressions(self):
        t = Tensor((2,), [sym(0.3), ConcolicValue(0.1)])
        assert all(c.exp is None for c in softmax(t).data)


class TestDense:
    def test_hand_arithmetic(self):
        out = dense(tensor([1.0, 2.0]), Dense([[1.0], [1.0]], [0.5]), BranchTrace())
        assert out.values() == [3.5]

    def test_identity(self):
        out = dense(tensor([0.3, -0.7]), Dense([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]), BranchTrace())
        assert out.values() == [0.3, -0.7]

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            dense(tensor([1.0, 2.0, 3.0]), Dense([[1.0], [1.0]], [0.0]), BranchTrace())

    def test_random_against_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            layer = oracles.random_dense(rng)
            x = rng.uniform(-2, 2, layer.in_dim)
            got = dense(tensor(x), layer, BranchTrace()).values()
            want = oracles.dense_ref(x, layer.weights, layer.bias, layer.activation)
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)


class TestConv2D:
    def test_sliding_window(self):
        image = np.arange(1.0, 10.0).reshape(3, 3, 1)
        layer = Conv2D([[[[1.0], [1.0]], [[1.0], [1.0]]]], [0.0])
        out = values(conv2d(tensor(image), layer, BranchTrace()))
        assert out[:, :, 0].tolist() == [[12.0, 16.0], [24.0, 28.0]]

    def test_identity_kernel(self):
        image = np.random.default_rng(0).uniform(-1, 1, (3, 4, 1))
        out = values(conv2d(tensor(image), Conv2D([[[[1.0]]]], [0.0]), BranchTrace()))
        np.testing.assert_array_equal(out, image)

    def test_bias_only(self):
        out = conv2d(tensor(np.zeros((3, 3, 2))), Conv2D(np.zeros((2, 2, 2, 2)).tolist(), [0.7, 0.7]), BranchTrace())
        assert set(out.values()) == {0.7}

    def test_floor_output_shape(self):
        layer = Conv2D(np.ones((1, 2, 2, 1)).tolist(), [0.0], stride=2)
        assert layer.output_shape((5, 5, 1)) == (2, 2, 1)

    def test_depth_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(tensor(np.zeros((3, 3, 2))), Conv2D([[[[1.0]]]], [0.0]), BranchTrace())

    def test_random_against_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            layer, image = oracles.random_conv(rng)
            got = values(conv2d(tensor(image), layer, BranchTrace()))
            want = oracles.conv2d_ref(image, layer.kernel, layer.bias, layer.stride, layer.activation)
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)


class TestMaxPool:
    def test_sixteen(self):
        image = np.arange(1.0, 17.0).reshape(4, 4, 1)
        out = values(maxpool2d(tensor(image), MaxPool2D((2, 2)), BranchTrace()))
        assert out[:, :, 0].tolist() == [[6.0, 8.0], [14.0, 16.0]]

    def test_constant_input(self):
        out = maxpool2d(tensor(np.full((4, 4, 2), 0.25)), MaxPool2D((2, 2)), BranchTrace())
        assert set(out.values()) == {0.25}

    def test_symbolic_winner_keeps_expression(self):
        data = [ConcolicValue(0.1), sym(5.0), ConcolicValue(0.3), ConcolicValue(-1.0)]
        rec = BranchTrace()
        out = maxpool2d(Tensor((2, 2, 1), data), MaxPool2D((2, 2)), rec)
        assert out.data[0] is data[1]
        # fold: 0.1<x (taken), x<0.3 (not), x<-1 (not)
        assert [p.taken for p in rec] == [True, False, False]

    def test_random_against_oracle_and_dominance(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            layer, image = oracles.random_pool(rng)
            got = values(maxpool2d(tensor(image), layer, BranchTrace()))
            np.testing.assert_allclose(got, oracles.maxpool_ref(image, layer.pool, layer.stride), rtol=0, atol=1e-9)
            s, (m, n) = layer.stride, layer.pool
            for i, j in np.ndindex(got.shape[:2]):
                window = image[i * s:i * s + m, j * s:j * s + n]
                assert np.all(got[i, j] >= window.max(axis=(0, 1)))


class TestSimpleRNN:
    def running_layer(self):
        return SimpleRNN([[0.1, 0.02], [0.3, 0.5]], [[1.0, 0.1], [2.0, 0.2]], [0.2, 0.1], "linear")

    def test_running_example_states(self):
        layer = self.running_layer()
        h1 = simple_rnn(tensor([[0.2, 0.4]]), layer, BranchTrace())
        assert h1.values() == pytest.approx([0.34, 0.304])
        seq = Tensor((2, 2), [ConcolicValue(0.2), ConcolicValue(0.4), sym(-0.8), ConcolicValue(-0.4)])
        h2 = simple_rnn(seq, layer, BranchTrace())
        assert h2.values() == pytest.approx([0.948, -0.0212])
        c0, co0 = affine_form(h2.data[0].exp)
        c1, co1 = affine_form(h2.data[1].exp)
        assert (c0, co0[0]) == (pytest.approx(1.028), pytest.approx(0.1))
        assert (c1, co1[0]) == (pytest.approx(-0.0052), pytest.approx(0.02))

    def test_zero_weights(self):
        layer = SimpleRNN([[0.0]], [[0.0]], [0.0], "tanh")
        assert simple_rnn(tensor([[1.0], [2.0]]), layer, BranchTrace()).values() == [0.0]

    def test_scalar_recurrence(self):
        layer = SimpleRNN([[0.7]], [[-0.4]], [0.1], "tanh")
        h = 0.0
        for x in (0.5, -1.0, 2.0):
            h = math.tanh(0.7 * x - 0.4 * h + 0.1)
        got = simple_rnn(tensor([[0.5], [-1.0], [2.0]]), layer, BranchTrace()).values()
        assert got == pytest.approx([h], abs=1e-12)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            layer, seq = oracles.random_rnn(rng)
            got = simple_rnn(tensor(seq), layer, BranchTrace()).values()
            want = oracles.rnn_ref(seq, layer.W_xh, layer.W_hh, layer.b_h, layer.activation)
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)


def _lstm(units=1, features=1, **overrides):
    fields = {}
    for g in ("i", "f", "C", "o"):
        fields[f"W_{g}"] = [[0.0] * units for _ in range(features)]
        fields[f"U_{g}"] = [[0.0] * units for _ in range(units)]
        fields[f"b_{g}"] = [0.0] * units
    fields.update(overrides)
    return LSTM(**fields)


class TestLSTM:
    def test_zero_fixed_point(self):
        h, c = lstm_states(tensor([[1.0], [-1.0], [0.5]]), _lstm(), BranchTrace())
        assert [v.val for v in h] == [0.0] and [v.val for v in c] == [0.0]

    def test_hand_set_gates(self):
        layer = _lstm(W_i=[[0.5]], W_f=[[-0.3]], W_C=[[1.2]], W_o=[[0.8]],
                      U_i=[[0.1]], U_f=[[0.2]], U_C=[[-0.6]], U_o=[[0.4]],
                      b_i=[0.1], b_f=[0.5], b_C=[-0.2], b_o=[0.0])
        seq = np.array([[0.3], [-0.9], [1.4]])
        h_ref, c_ref = oracles.lstm_ref(seq, layer)
        h, c = lstm_states(tensor(seq), layer, BranchTrace())
        assert [v.val for v in h] == pytest.approx(h_ref.tolist(), abs=1e-12)
        assert [v.val for v in c] == pytest.approx(c_ref.tolist(), abs=1e-12)

    def test_forget_bias_sweep(self):
        rng = np.random.default_rng(11)
        base, seq = oracles.random_lstm(rng)
        units = base.units
        seq = np.tile(rng.uniform(0.5, 1.5, (1, seq.shape[1])), (4, 1))
        base.W_C = np.abs(np.asarray(base.W_C)).tolist()
        base.U_C = [[0.0] * units for _ in range(units)]
        base.b_C = [0.5] * units
        magnitudes = []
        for b in (-2.0, 0.0, 2.0):
            base.b_f = [b] * units
            _, c = lstm_states(tensor(seq), base, BranchTrace())
            magnitudes.append(np.abs([v.val for v in c]))
        assert np.all(magnitudes[0] < magnitudes[1]) and np.all(magnitudes[1] < magnitudes[2])

    def test_random_against_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            layer, seq = oracles.random_lstm(rng)
            got = lstm(tensor(seq), layer, BranchTrace()).values()
            want, _ = oracles.lstm_ref(seq, layer)
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)


class TestForward:
    def test_running_example(self, running_model, running_input):
        label, probs, trace = forward_concolic(running_model, running_input.data, [(2, 0)])
        assert label == 0
        assert probs == pytest.approx([0.681, 0.319], abs=1e-3)
        first = trace[0]
        assert first.relation == EQ and first.taken is False
        c, co = affine_form(first.lhs)
        assert c == pytest.approx(1.028, abs=1e-9) and co[0] == pytest.approx(0.1, abs=1e-9)

    def test_second_iteration_point(self, running_model, running_input):
        data = list(running_input.data)
        data[2] = -10.28
        label, probs = forward_concrete(running_model, data)
        assert label == 0 and probs == pytest.approx([0.552, 0.448], abs=1e-3)

    def test_empty_sym_vars(self, running_model, running_input):
        label, probs, trace = forward_concolic(running_model, running_input.data)
        assert len(trace) == 0
        assert (label, probs) == forward_concrete(running_model, running_input.data)

    def test_uniform_logits_tie_break(self):
        model = ModelSpec((2,), [Dense([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]], [1.0, 1.0, 1.0]), Activation("softmax")])
        assert forward_concrete(model, [0.4, 0.9])[0] == 0

    def test_trace_determinism(self, running_model, running_input):
        a = forward_concolic(running_model, running_input.data, [(2, 0), (0, 1)]).trace
        b = forward_concolic(running_model, running_input.data, [(2, 0), (0, 1)]).trace
        assert a.predicates == b.predicates

    def test_random_models_symbolic_agrees_with_concrete(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            model = oracles.random_model(rng)
            x = rng.uniform(-2, 2, model.input_size).tolist()
            chosen = rng.choice(model.input_size, size=min(2, model.input_size), replace=False)
            sym_vars = [(int(i), v) for v, i in enumerate(chosen)]
            run = forward_concolic(model, x, sym_vars)
            label, probs = forward_concrete(model, x)
            assert run.label == label
            np.testing.assert_allclose(run.probs, probs, rtol=0, atol=1e-9)
            # replaying the recorded expressions at the seed point gives the same outcomes
            point = {v: x[i] for i, v in sym_vars}
            assert all(p.evaluate(point) == p.taken for p in run.trace)

    def test_duplicate_var_ids(self, running_model, running_input):
        with pytest.raises(ValueError):
            forward_concolic(running_model, running_input.data, [(0, 0), (1, 0)])

    def test_index_out_of_range(self, running_model, running_input):
        with pytest.raises(ShapeError):
            forward_concolic(running_model, running_input.data, [(9, 0)])


class TestSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        for _ in range(10):
            model = oracles.random_model(rng)
            save_model(model, tmp_path / "m.json")
            again = load_model(tmp_path / "m.json")
            assert model_to_dict(again) == model_to_dict(model)
            x = rng.uniform(-2, 2, model.input_size).tolist()
            assert forward_concrete(again, x) == forward_concrete(model, x)

    def test_layer_round_trip(self):
        layer = MaxPool2D((2, 3), 1)
        assert layer_from_dict(layer_to_dict(layer)) == layer

    def test_unknown_field_rejected(self):
        doc = json.loads((RUNNING / "model.json").read_text())
        doc["layers"][0]["bogus"] = 1
        with pytest.raises(ModelFormatError):
            model_from_dict(doc)

    def test_unknown_layer_type(self):
        with pytest.raises(ModelFormatError):
            layer_from_dict({"type": "gru"})

    def test_shape_chain_checked(self):
        doc = {"input_shape": [3], "layers": [{"type": "dense", "weights": [[1.0], [1.0]], "bias": [0.0]}]}
        with pytest.raises((ModelFormatError, ShapeError)):
            model_from_dict(doc)

    def test_input_document(self):
        rec = input_from_dict({"shape": [2], "data": [1, 2.5], "label": 1})
        assert rec.data == [1.0, 2.5] and rec.label == 1
        with pytest.raises(ModelFormatError):
            input_from_dict({"shape": [2], "data": [1.0, 2.0], "extra": 0})
        with pytest.raises(ModelFormatError):
            input_from_dict({"shape": [3], "data": [1.0, 2.0]})

    def test_thresholds_field(self):
        doc = json.loads((RUNNING / "model.json").read_text())
        doc["thresholds"] = {"tanh": 2.0, "sigmoid": 5.0}
        model = model_from_dict(doc)
        assert model.thresholds == ActivationThresholds(2.0, 5.0)

