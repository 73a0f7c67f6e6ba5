import numpy as np
import pytest
from hypothesis import given, strategies as st

from emtwin.autodiff import Tape, cmul, polar
from emtwin.nn import (
    AdamState, MlpSpec, adam_step, backward, forward, init_params, load_checkpoint, pos_enc, save_checkpoint,
)


def _reference_mlp(spec, params, x):
    # plain loop evaluation, one sample at a time
    out = []
    for row in np.atleast_2d(x):
        h = row
        for i, (w, b) in enumerate(params):
            h = np.array([sum(h[a] * w[a, j] for a in range(w.shape[0])) + b[j] for j in range(w.shape[1])])
            if i < len(params) - 1:
                h = np.where(h > 0, h, 0.0)
        y = []
        for j, tag in enumerate(spec.heads):
            if tag == "amp":
                y.append(np.exp(h[j]))
            elif tag == "phase":
                y.append(2 * np.pi / (1 + np.exp(-h[j])))
            else:
                y.append(h[j])
        out.append(y)
    return np.array(out)


MIXED = MlpSpec((5, 7, 6, 4), ("amp", "linear", "phase", "amp"))


def test_pos_enc_examples():
    assert pos_enc(0.0, 2) == pytest.approx([0, 1, 0, 1], abs=1e-15)
    assert pos_enc(0.5, 2) == pytest.approx([1, 0, 0, -1], abs=1e-15)
    assert pos_enc(np.array([0.1, -0.3, 0.9]), 10).shape == (60,)


def test_pos_enc_layout():
    x = np.array([0.2, -0.7])
    e = pos_enc(x, 3)
    expect = []
    for c in x:
        for m in range(3):
            expect += [np.sin(2**m * np.pi * c), np.cos(2**m * np.pi * c)]
    assert e == pytest.approx(expect, abs=1e-15)
    batch = pos_enc(np.stack([x, -x]), 3)
    assert batch.shape == (2, 12) and batch[0] == pytest.approx(e)
    with pytest.raises(ValueError):
        pos_enc(x, 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3,), ())
    with pytest.raises(ValueError):
        MlpSpec((3, 2), ("amp",))
    with pytest.raises(ValueError):
        MlpSpec((3, 1), ("tanh",))


def test_zero_weights():
    spec = MlpSpec((3, 4, 2), ("amp", "phase"))
    params = [(np.zeros((3, 4)), np.zeros(4)), (np.zeros((4, 2)), np.zeros(2))]
    y, _ = forward(spec, params, np.array([0.3, -1.0, 2.0]))
    assert y == pytest.approx([1.0, np.pi], abs=1e-15)


def test_forward_matches_reference():
    params = init_params(MIXED, 11)
    x = np.random.default_rng(0).uniform(-1, 1, (9, 5))
    y, _ = forward(MIXED, params, x)
    assert np.max(np.abs(y - _reference_mlp(MIXED, params, x))) < 1e-12
    y1, _ = forward(MIXED, params, x[3])
    assert y1 == pytest.approx(y[3], abs=1e-15)


def test_forward_shape_mismatch():
    with pytest.raises(ValueError):
        forward(MIXED, init_params(MIXED, 0), np.zeros(4))


def test_linear_neuron_gradient():
    spec = MlpSpec((1, 1), ("linear",))
    params = [(np.array([[0.7]]), np.array([-0.2]))]
    y, tape = forward(spec, params, np.array([1.9]))
    assert y == pytest.approx([0.7 * 1.9 - 0.2])
    (gw, gb), = backward(tape, [1.0])
    assert gw[0, 0] == pytest.approx(1.9) and gb[0] == pytest.approx(1.0)


def test_relu_blocks_gradient():
    spec = MlpSpec((1, 1, 1), ("linear",))
    params = [(np.array([[1.0]]), np.array([-5.0])), (np.array([[2.0]]), np.array([0.0]))]
    _, tape = forward(spec, params, np.array([1.0]))
    (gw0, gb0), (gw1, gb1) = backward(tape, [1.0])
    assert gw0[0, 0] == 0 and gb0[0] == 0 and gw1[0, 0] == 0 and gb1[0] == 1


def test_backward_central_differences():
    params = init_params(MIXED, 5)
    x = np.random.default_rng(1).uniform(-1, 1, (6, 5))
    dy = np.random.default_rng(2).normal(size=(6, 4))
    _, tape = forward(MIXED, params, x)
    grads = backward(tape, dy)
    h = 1e-4

    def f(ps):
        return float(np.sum(forward(MIXED, ps, x)[0] * dy))

    ok = total = 0
    for li, (w, b) in enumerate(params):
        for which, arr, g in ((0, w, grads[li][0]), (1, b, grads[li][1])):
            for idx in np.ndindex(arr.shape):
                def shifted(d):
                    ps = [(w_.copy(), b_.copy()) for w_, b_ in params]
                    ps[li][which][idx] += d
                    return ps
                fd = (f(shifted(h)) - f(shifted(-h))) / (2 * h)
                a = g[idx]
                ok += abs(a - fd) <= 1e-4 * max(abs(a), abs(fd)) or abs(a - fd) < 1e-9
                total += 1
    assert ok / total >= 0.99


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    st_ = AdamState(lr=0.1)
    st_.m["w"] = np.array([0.5, 0.5])
    st_.v["w"] = np.array([0.25, 0.25])
    out = adam_step(p, {"w": np.zeros(2)}, st_)
    assert st_.m["w"] == pytest.approx([0.45, 0.45])
    assert st_.v["w"] == pytest.approx([0.25 * 0.999] * 2)
    # fresh state: no update at all
    fresh = AdamState(lr=0.1)
    assert adam_step(p, {"w": np.zeros(2)}, fresh)["w"].tolist() == [1.0, -2.0]
    assert out["w"].shape == (2,)


def test_adam_constant_gradient_step_size():
    p = {"w": np.array([0.0, 0.0, 0.0])}
    g = {"w": np.array([3.0, -1e-3, 50.0])}
    st_ = AdamState(lr=0.01)
    for _ in range(2000):
        prev = p["w"]
        p = adam_step(p, g, st_)
    step = p["w"] - prev
    # fixed point lr * g / (|g| + eps): magnitude lr up to the eps guard
    assert step == pytest.approx(-0.01 * g["w"] / (np.abs(g["w"]) + st_.eps), rel=1e-6)
    assert np.abs(step) == pytest.approx(np.full(3, 0.01), rel=2e-5)


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    grads = [{"a": rng.normal(size=(3, 2)), "b": rng.normal(size=2)} for _ in range(20)]

    def run():
        p = {"a": np.ones((3, 2)), "b": np.zeros(2)}
        s = AdamState(lr=0.05)
        for g in grads:
            p = adam_step(p, g, s)
        return p

    a, b = run(), run()
    assert a["a"].tobytes() == b["a"].tobytes() and a["b"].tobytes() == b["b"].tobytes()


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_init_determinism_and_scale():
    spec = MlpSpec((60, 256, 256, 3), ("amp", "amp", "phase"))
    a, b, c = init_params(spec, 3), init_params(spec, 3), init_params(spec, 4)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a, b))
    assert not np.array_equal(a[0][0], c[0][0])
    assert all(not bb.any() for _, bb in a)
    x = np.random.default_rng(0).uniform(-1, 1, (2000, 60)) * np.sqrt(3)   # unit-variance input
    pre = x @ a[0][0]
    assert 1 / 3 <= pre.var() <= 3


@given(st.integers(0, 10**6))
def test_head_ranges(seed):
    rng = np.random.default_rng(seed)
    spec = MlpSpec((4, 8, 4), ("amp", "phase", "amp", "phase"))
    y, _ = forward(spec, init_params(spec, seed), rng.uniform(-1, 1, (16, 4)))
    assert np.all(y[:, [0, 2]] > 0)
    assert np.all((y[:, [1, 3]] > 0) & (y[:, [1, 3]] < 2 * np.pi))


@given(st.floats(0.01, 10), st.floats(0, 2 * np.pi), st.floats(0.01, 10), st.floats(0, 2 * np.pi))
def test_complex_product_modulus(r1, p1, r2, p2):
    t = Tape()
    a = polar(t, t.const(np.array([r1])), t.const(np.array([p1])))
    b = polar(t, t.const(np.array([r2])), t.const(np.array([p2])))
    re, im = cmul(t, a, b)
    assert np.hypot(re.value[0], im.value[0]) == pytest.approx(r1 * r2, rel=1e-12)


def test_checkpoint_round_trip(tmp_path):
    params = {"f": init_params(MIXED, 0), "g": init_params(MlpSpec((2, 1), ("linear",)), 1)}
    specs = {"f": MIXED, "g": MlpSpec((2, 1), ("linear",))}
    save_checkpoint(tmp_path / "a.npz", specs, params, {"note": 1})
    s2, p2, extra = load_checkpoint(tmp_path / "a.npz")
    assert s2 == specs and extra == {"note": 1}
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(params["f"], p2["f"]))
    save_checkpoint(tmp_path / "b.npz", s2, p2, extra)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
