import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from alp import ndmath as nd
from gradcases import OPS, check_op
from oracles import central_difference, numpy_conv2d, numpy_gru, relative_error


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def test_forward_examples():
    assert torch.allclose(nd.softmax(t([0.0, 0.0, 0.0])), t([1 / 3] * 3))
    assert nd.relu(t([-1.0, 2.0])).tolist() == [0.0, 2.0]
    assert nd.affine(t([[1.0, 2.0]]), t(np.eye(2)), t([0.0, 0.0])).tolist() == [[1.0, 2.0]]


def test_square_gradient_and_uniform_cross_entropy():
    x = torch.tensor(3.0, requires_grad=True)
    g = nd.backprop(nd.mul(x, x), {"x": x})
    assert float(g["x"]) == 6.0
    for label in range(3):
        loss = nd.cross_entropy(torch.zeros(1, 3), torch.tensor([label]))
        assert float(loss) == pytest.approx(math.log(3), abs=1e-6)


@pytest.mark.parametrize("name", OPS)
def test_finite_difference_smoke(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(5):
        assert check_op(name, rng) < 1e-3


def test_forward_matches_numpy_references():
    rng = np.random.default_rng(1)
    x, h = rng.normal(size=(4, 5)), rng.normal(size=(4, 3))
    w_ih, w_hh = rng.normal(size=(9, 5)), rng.normal(size=(9, 3))
    b_ih, b_hh = rng.normal(size=9), rng.normal(size=9)
    got = nd.gru_cell(t(x), t(h), t(w_ih), t(w_hh), t(b_ih), t(b_hh)).numpy()
    np.testing.assert_allclose(got, numpy_gru(x, h, w_ih, w_hh, b_ih, b_hh), atol=1e-12)
    img, w, b = rng.normal(size=(2, 3, 7, 7)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    got = nd.conv2d(t(img), t(w), t(b), stride=2, padding=1).numpy()
    np.testing.assert_allclose(got, numpy_conv2d(img, w, b, 2, 1), atol=1e-12)


def test_three_layer_network_parameter_gradients():
    rng = np.random.default_rng(2)
    shapes = [(6, 4), (6,), (5, 6), (5,), (3, 5), (3,)]
    arrays = [rng.normal(size=s) for s in shapes]
    x = t(rng.normal(size=(7, 4)))
    labels = torch.as_tensor(rng.integers(0, 3, size=7))

    def net(*ps):
        w1, b1, w2, b2, w3, b3 = ps
        hdn = nd.tanh(nd.affine(x, w1, b1))
        hdn = nd.tanh(nd.affine(hdn, w2, b2))
        return nd.cross_entropy(nd.affine(hdn, w3, b3), labels)

    params = {f"p{i}": torch.tensor(a, requires_grad=True) for i, a in enumerate(arrays)}
    grads = nd.backprop(net(*params.values()), params)
    numeric = central_difference(lambda *a: float(net(*[t(v) for v in a])), arrays)
    for i, g in enumerate(numeric):
        assert relative_error(grads[f"p{i}"].numpy(), g) < 1e-3


def test_softmax_and_cross_entropy_properties():
    rng = np.random.default_rng(3)
    for _ in range(50):
        logits = t(rng.normal(scale=5, size=(4, 6)))
        p = nd.softmax(logits)
        assert torch.allclose(p.sum(-1), torch.ones(4, dtype=torch.float64), atol=1e-6)
        assert bool(((p > 0) & (p < 1)).all())
        assert float(nd.cross_entropy(logits, torch.as_tensor(rng.integers(0, 6, 4)))) >= 0


def test_shape_error_names_both_shapes():
    with pytest.raises(nd.ShapeError) as info:
        nd.add(torch.zeros(2, 3), torch.zeros(3, 2))
    assert "(2, 3)" in str(info.value) and "(3, 2)" in str(info.value)
    with pytest.raises(nd.ShapeError):
        nd.affine(torch.zeros(2, 3), torch.zeros(4, 5), torch.zeros(4))


def test_non_finite_reports_node():
    with pytest.raises(nd.NumericError) as info:
        nd.mul(t([np.inf]), t([0.0]))
    assert info.value.node.startswith("mul#")


def test_backprop_requires_scalar():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(nd.ContractError):
        nd.backprop(x * 2, {"x": x})


def test_unused_parameter_gets_zero_gradient():
    x = torch.ones(2, requires_grad=True)
    y = torch.ones(2, requires_grad=True)
    g = nd.backprop((x * 3).sum(), {"x": x, "y": y})
    assert g["y"].tolist() == [0.0, 0.0]


# ---------------------------------------------------------------- optimizer

def test_adam_zero_gradient_leaves_params():
    p = torch.tensor([1.0, -2.0])
    nd.adam_step({"p": p}, {"p": torch.zeros(2)}, nd.AdamState(lr=0.1))
    assert p.tolist() == [1.0, -2.0]


def test_adam_first_step_by_hand():
    # m1 = 0.1, v1 = 0.001; bias-corrected m = 1, v = 1 -> step = lr / (1 + eps)
    p = torch.tensor([0.0], dtype=torch.float64)
    nd.adam_step({"p": p}, {"p": torch.tensor([1.0], dtype=torch.float64)}, nd.AdamState(lr=0.1))
    assert float(p) == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-12)


def test_adam_matches_recurrence_over_steps():
    rng = np.random.default_rng(4)
    p = torch.tensor(rng.normal(size=5))
    ref = p.numpy().copy()
    m = np.zeros(5)
    v = np.zeros(5)
    state = nd.AdamState(lr=0.01)
    for step in range(1, 20):
        g = rng.normal(size=5)
        nd.adam_step({"p": p}, {"p": torch.as_tensor(g)}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
    np.testing.assert_allclose(p.numpy(), ref, atol=1e-12)


def test_adam_runs_are_bitwise_identical():
    def run():
        torch.manual_seed(0)
        net = torch.nn.Linear(4, 2)
        opt = nd.Adam(dict(net.named_parameters()), lr=1e-2)
        x = torch.randn(8, 4)
        for _ in range(10):
            opt.zero_grad()
            nd.backprop(nd.mse(net(x), torch.zeros(8, 2)), opt.params)
            opt.step(max_grad_norm=0.5)
        return [p.detach().clone() for p in net.parameters()]

    for a, b in zip(run(), run()):
        assert torch.equal(a, b)


def test_clip_examples():
    g = {"a": torch.tensor([3.0, 4.0])}
    out, norm = nd.clip_global_grad_norm(g, 10.0)
    assert norm == 5.0 and out["a"].tolist() == [3.0, 4.0]
    out, _ = nd.clip_global_grad_norm(g, 0.5)
    np.testing.assert_allclose(out["a"].numpy(), [0.3, 0.4], rtol=1e-6)
    out, _ = nd.clip_global_grad_norm({"a": torch.zeros(3)}, 0.5)
    assert out["a"].tolist() == [0.0, 0.0, 0.0]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20),
       st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=5),
       st.floats(1e-4, 100.0))
def test_clipped_norm_never_exceeds_max(a, b, max_norm):
    grads = {"a": torch.tensor(a, dtype=torch.float32), "b": torch.tensor(b, dtype=torch.float32)}
    out, _ = nd.clip_global_grad_norm(grads, max_norm)
    assert nd.global_norm(out.values()) <= max_norm + 1e-6 or nd.global_norm(grads.values()) <= max_norm


# ---------------------------------------------------------------- checkpoints

def _random_entries(rng):
    out = {}
    for k in range(int(rng.integers(0, 6))):
        rank = int(rng.integers(0, 4))
        shape = tuple(int(s) for s in rng.integers(0, 5, size=rank))
        out[f"group{k}.wé{k}"] = rng.normal(size=shape).astype(np.float32)
    return out


def test_checkpoint_round_trip_bytes():
    rng = np.random.default_rng(5)
    for _ in range(20):
        entries = _random_entries(rng)
        data = nd.checkpoint.encode(entries)
        back = nd.checkpoint.decode(data)
        assert list(back) == list(entries)
        for k in entries:
            assert back[k].shape == entries[k].shape
            assert back[k].tobytes() == entries[k].tobytes()
        assert nd.checkpoint.encode(back) == data


def test_checkpoint_header_layout():
    data = nd.checkpoint.encode({"w": np.array([1.5], np.float32)})
    assert data[:4] == b"ALPW"
    assert data[4:8] == (1).to_bytes(4, "little") and data[8:12] == (1).to_bytes(4, "little")
    assert data[12:14] == (1).to_bytes(2, "little") and data[14:15] == b"w"
    assert data[15] == 1 and data[16:20] == (1).to_bytes(4, "little")
    assert np.frombuffer(data[20:], "<f4").tolist() == [1.5]


@pytest.mark.parametrize("bad", [b"XXXX" + bytes(8), b"ALPW", None])
def test_checkpoint_rejects_corrupt_input(bad):
    if bad is None:
        bad = nd.checkpoint.encode({"w": np.ones(4, np.float32)})[:-3]
    with pytest.raises(nd.checkpoint.CheckpointFormatError):
        nd.checkpoint.decode(bad)
