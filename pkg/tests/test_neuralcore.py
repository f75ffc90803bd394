"""Kernel tests: primitive shapes, analytic-vs-finite-difference gradients,
SGD arithmetic, checkpoint round trips, and stream independence."""

import numpy as np
import pytest

from dermdiff.neuralcore import (
    PRIMITIVE_IDS,
    ParameterSet,
    SeedStream,
    SgdState,
    ShapeError,
    Tape,
    gradient_check,
    load_checkpoint,
    primitive_backward,
    primitive_forward,
    save_checkpoint,
    sgd_step,
)
from dermdiff.neuralcore.checkpoint import CheckpointError

RNG = np.random.default_rng(1234)

# parameter order conventions per primitive
PARAM_ORDER = {
    "linear": ("w", "b"),
    "conv2d": ("w", "b"),
    "transposed-conv2d": ("w", "b"),
    "group-norm": ("gamma", "beta"),
}


def _away_from_kinks(x, margin=0.05):
    """Shift values away from |x| < margin so relu finite differences are clean."""
    return x + np.sign(x) * margin


def make_fragment(op, rng, **attrs):
    """A tiny scalar-valued fragment for one primitive, with analytic grads."""
    pset = ParameterSet()
    if op == "linear":
        pset.add("w", rng.normal(size=(3, 2)))
        pset.add("b", rng.normal(size=2))
        inputs = [rng.normal(size=(2, 3))]
    elif op == "conv2d":
        pset.add("w", rng.normal(size=(3, 4, 3, 3)) * 0.4)
        pset.add("b", rng.normal(size=3))
        inputs = [rng.normal(size=(2, 4, 6, 6))]
        attrs.setdefault("stride", rng.integers(1, 3))
        attrs.setdefault("pad", 1)
    elif op == "transposed-conv2d":
        pset.add("w", rng.normal(size=(4, 2, 4, 4)) * 0.4)
        pset.add("b", rng.normal(size=2))
        inputs = [rng.normal(size=(1, 4, 3, 3))]
        attrs.setdefault("stride", 2)
        attrs.setdefault("pad", 1)
    elif op == "group-norm":
        pset.add("gamma", 1.0 + 0.2 * rng.normal(size=4))
        pset.add("beta", 0.2 * rng.normal(size=4))
        inputs = [rng.normal(size=(2, 4, 3, 3))]
        attrs.setdefault("groups", 2)
    elif op == "relu":
        inputs = [_away_from_kinks(rng.normal(size=(3, 5)))]
    elif op in ("silu", "sigmoid"):
        inputs = [rng.normal(size=(3, 5))]
    elif op == "softmax":
        inputs = [rng.normal(size=(3, 5))]
    elif op == "avg-pool2d":
        inputs = [rng.normal(size=(2, 3, 4, 4))]
        attrs.setdefault("kernel", 2)
    elif op == "nearest-upsample":
        inputs = [rng.normal(size=(2, 3, 3, 3))]
        attrs.setdefault("factor", 2)
    elif op == "add":
        mode = attrs.setdefault("mode", "same")
        if mode == "channel":
            inputs = [rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 3))]
        else:
            inputs = [rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 3, 2, 2))]
    elif op == "concat-channels":
        inputs = [rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 3, 3, 3))]
    elif op == "sinusoidal-time-embed":
        inputs = [rng.uniform(0.5, 20.0, size=3)]
        attrs.setdefault("dim", 8)
    else:
        raise AssertionError(f"unhandled primitive {op}")
    names = PARAM_ORDER.get(op, ())

    def fragment(ps, xs):
        tape = Tape(ps)
        vs = [tape.input(a, requires_grad=True) for a in xs]
        out = tape.apply(op, vs, params=names, **attrs)
        weights = np.cos(np.arange(out.value.size)).reshape(out.value.shape)
        loss = float((out.value * weights).sum())
        tape.backward(out, weights)
        pgrads = {n: ps.grads[n].copy() for n in names}
        igrads = [v.grad if v.grad is not None else np.zeros_like(v.value) for v in vs]
        ps.zero_grads()
        for v in vs:
            v.grad = None
        return loss, pgrads, igrads

    return fragment, pset, inputs


@pytest.mark.parametrize("op", sorted(PRIMITIVE_IDS))
def test_primitive_gradients_match_finite_differences(op):
    for trial in range(3):
        rng = np.random.default_rng(100 + 17 * trial)
        fragment, pset, inputs = make_fragment(op, rng)
        report = gradient_check(fragment, pset, inputs, tolerance=1e-6)
        assert report.passed, f"{op}: {report}"


def test_relu_forward_and_flat_region():
    out, ctx = primitive_forward("relu", [np.array([[-1.0, 0.0, 2.0]])])
    assert np.array_equal(out, [[0.0, 0.0, 2.0]])
    (gx,), _ = primitive_backward("relu", ctx, np.array([[1.0, 1.0, 1.0]]))
    assert gx[0, 0] == 0.0 and gx[0, 2] == 1.0


def test_softmax_symmetry():
    out, _ = primitive_forward("softmax", [np.array([[0.0, 0.0]])])
    np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-15)


def test_conv2d_identity_kernel():
    image = RNG.random((1, 1, 5, 5))
    w = np.ones((1, 1, 1, 1))
    b = np.zeros(1)
    out, _ = primitive_forward("conv2d", [image], [w, b], stride=1, pad=0)
    np.testing.assert_array_equal(out, image)


def test_linear_weight_gradient_product_rule():
    pset = ParameterSet()
    pset.add("w", np.array([[1.0]]))
    pset.add("b", np.array([0.0]))
    tape = Tape(pset)
    x = tape.input(np.array([[3.0]]))
    y = tape.apply("linear", x, params=("w", "b"))
    tape.backward(y, np.array([[2.0]]))
    assert pset.grads["w"][0, 0] == 6.0


def test_sigmoid_derivative_at_zero():
    fragment, pset, _ = make_fragment("sigmoid", np.random.default_rng(0))
    out, ctx = primitive_forward("sigmoid", [np.array([[0.0]])])
    (gx,), _ = primitive_backward("sigmoid", ctx, np.array([[1.0]]))
    assert abs(gx[0, 0] - 0.25) < 1e-15


def test_shape_errors_are_descriptive():
    with pytest.raises(ShapeError, match="conv2d"):
        primitive_forward("conv2d", [RNG.random((1, 3, 5, 5))],
                          [RNG.random((2, 4, 3, 3)), np.zeros(2)], stride=1, pad=1)
    with pytest.raises(ShapeError, match="add"):
        primitive_forward("add", [np.zeros((2, 2)), np.zeros((3, 2))])
    with pytest.raises(ValueError, match="unknown primitive"):
        primitive_forward("not-an-op", [np.zeros(2)])


def test_non_finite_input_is_hard_error():
    with pytest.raises(ValueError, match="non-finite"):
        primitive_forward("relu", [np.array([np.nan, 1.0])])


def test_backward_requires_matching_context():
    out, ctx = primitive_forward("relu", [np.array([1.0, -1.0])])
    with pytest.raises(ValueError, match="context"):
        primitive_backward("sigmoid", ctx, np.ones(2))
    with pytest.raises(ShapeError, match="upstream"):
        primitive_backward("relu", ctx, np.ones(3))


def test_randomized_shapes_up_to_4x8x8x8():
    rng = np.random.default_rng(77)
    for _ in range(3):
        n = int(rng.integers(1, 5))
        c = int(rng.integers(2, 9))
        hw = int(rng.integers(4, 9))
        x = rng.normal(size=(n, c, hw, hw))
        co = int(rng.integers(2, 9))
        w = rng.normal(size=(co, c, 3, 3)) * 0.3
        b = rng.normal(size=co)
        out, ctx = primitive_forward("conv2d", [x], [w, b], stride=1, pad=1)
        assert out.shape == (n, co, hw, hw)
        (gx,), (gw, gb) = primitive_backward("conv2d", ctx, np.ones_like(out))
        assert gx.shape == x.shape and gw.shape == w.shape and gb.shape == b.shape


# ---------------------------------------------------------------------------
# SGD


def test_sgd_plain_step():
    pset = ParameterSet()
    pset.add("theta", np.array([1.0]))
    state = SgdState(pset, learning_rate=0.1, momentum=0.0)
    pset.grads["theta"][...] = 0.5
    sgd_step(pset, state)
    np.testing.assert_allclose(pset.params["theta"], [0.95], atol=1e-15)
    assert pset.grads["theta"][0] == 0.0  # zeroed after the step


def test_sgd_momentum_hand_arithmetic():
    pset = ParameterSet()
    pset.add("theta", np.array([1.0]))
    state = SgdState(pset, learning_rate=0.1, momentum=0.9)
    state.velocity["theta"][...] = 1.0
    pset.grads["theta"][...] = 1.0
    sgd_step(pset, state)
    np.testing.assert_allclose(state.velocity["theta"], [1.9], atol=1e-15)
    np.testing.assert_allclose(pset.params["theta"], [0.81], atol=1e-15)


def test_sgd_zero_momentum_equals_vanilla():
    rng = np.random.default_rng(3)
    pa, pb = ParameterSet(), ParameterSet()
    init = rng.normal(size=5)
    pa.add("p", init.copy())
    pb.add("p", init.copy())
    state = SgdState(pa, learning_rate=0.05, momentum=0.0)
    for _ in range(7):
        g = rng.normal(size=5)
        pa.grads["p"][...] = g
        sgd_step(pa, state)
        pb.params["p"] -= 0.05 * g  # plain gradient descent by hand
    np.testing.assert_array_equal(pa.params["p"], pb.params["p"])


def test_sgd_rejects_non_finite_gradient():
    pset = ParameterSet()
    pset.add("bad", np.array([1.0]))
    state = SgdState(pset, learning_rate=0.1)
    pset.grads["bad"][...] = np.inf
    with pytest.raises(RuntimeError, match="bad"):
        sgd_step(pset, state)


def test_gradient_check_quadratic():
    pset = ParameterSet()

    def fragment(ps, inputs):
        (x,) = inputs
        return float(x[0] ** 2), {}, [np.array([2 * x[0]])]

    report = gradient_check(fragment, pset, [np.array([3.0])], tolerance=1e-6)
    assert report.passed
    assert report.max_rel_err < 1e-9


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    tensors = {
        "unet/w": rng.normal(size=(3, 4, 3, 3)),
        "vae/b": rng.normal(size=7),
        "meta/scalar": np.float64(0.1234567890123456789),
        "cond/table": rng.normal(size=(12, 8)),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert sorted(loaded) == sorted(tensors)
    for name in tensors:
        assert np.asarray(tensors[name]).shape == loaded[name].shape
        assert np.array_equal(np.asarray(tensors[name], dtype=np.float64), loaded[name])
    # byte-identical when rewritten
    path2 = tmp_path / "model2.ckpt"
    save_checkpoint(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_magic_and_truncation(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, {"x": np.arange(4.0)})
    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(truncated)


# ---------------------------------------------------------------------------
# seeded streams


def test_stream_isolation_and_determinism():
    root = SeedStream(42)
    a1 = root.child("init").generator().standard_normal(5)
    b1 = root.child("noise").generator().standard_normal(5)
    # drawing from one stream never perturbs another
    a2 = SeedStream(42).child("init").generator().standard_normal(5)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, b1)
    assert root.child("x").integer_seed() != root.child("y").integer_seed()


def test_tape_fan_out_accumulates():
    pset = ParameterSet()
    tape = Tape(pset)
    x = tape.input(np.array([[2.0]]), requires_grad=True)
    doubled = tape.apply("add", [x, x])
    tape.backward(doubled, np.array([[1.0]]))
    np.testing.assert_array_equal(x.grad, [[2.0]])
