"""Tensor engine: op oracles, tape semantics, rng streams, serialization."""

import io

import numpy as np
import pytest

from vivalab.numerics import (Adam, ContractError, GradTape, NonFiniteError,
                              Rng, ShapeError, Tensor, add, broadcast_to,
                              clip_const, concat, div, exp, gather_rows, gelu,
                              gaussian, layer_norm, log, matmul, minimum, mul,
                              neg, power, relu2, reshape, serialize,
                              set_finite_checks, softmax, sqrt, sub, tanh,
                              tmean, transpose, tsum)
from vivalab.numerics.gradcheck import (central_difference, random_indices,
                                        relative_error)


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    eye = t64(np.eye(2))
    out = matmul(eye, eye)
    assert np.array_equal(out.data, np.eye(2))


def test_matmul_hand_case():
    a = t64([[1.0, 2.0], [3.0, 4.0]])
    b = t64([[1.0], [1.0]])
    assert np.array_equal(matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_against_triple_loop():
    gen = np.random.default_rng(0)
    a = gen.normal(size=(5, 7))
    b = gen.normal(size=(7, 3))
    want = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                want[i, j] += a[i, k] * b[k, j]
    got = matmul(t64(a), t64(b)).data
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_matmul_batched_leading_dim():
    gen = np.random.default_rng(1)
    a = gen.normal(size=(4, 3, 5))
    w = gen.normal(size=(5, 2))
    got = matmul(t64(a), t64(w)).data
    assert got.shape == (4, 3, 2)
    assert np.allclose(got, a @ w)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_linear_function():
    gen = np.random.default_rng(2)
    w = t64(gen.normal(size=(6,)), grad=True)
    x = t64(gen.normal(size=(6,)))
    with GradTape() as tape:
        loss = tsum(mul(w, x))
    g = tape.backward(loss)
    assert np.array_equal(g.of(w), x.data)


def test_backward_squared_norm():
    gen = np.random.default_rng(3)
    x = t64(gen.normal(size=(5,)), grad=True)
    with GradTape() as tape:
        loss = tsum(mul(x, x))
    g = tape.backward(loss)
    assert np.allclose(g.of(x), 2 * x.data, rtol=1e-14)


def test_backward_two_layer_mlp_matches_fd():
    gen = np.random.default_rng(4)
    w1 = t64(gen.normal(size=(4, 8)) / 2, grad=True)
    w2 = t64(gen.normal(size=(8, 1)) / 2, grad=True)
    x = t64(gen.normal(size=(3, 4)))

    def forward():
        h = np.tanh(x.data @ w1.data)
        return (h @ w2.data).sum()

    with GradTape() as tape:
        loss = tsum(matmul(tanh(matmul(x, w1)), w2))
    g = tape.backward(loss)
    for tensor in (w1, w2):
        grads = g.of(tensor)
        for idx in random_indices(tensor.shape, 6, gen):
            fd = central_difference(forward, tensor.data, idx)
            assert relative_error(float(grads[idx]), fd) <= 1e-6


def test_backward_requires_scalar():
    x = t64(np.ones(3), grad=True)
    with GradTape() as tape:
        y = mul(x, x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_backward_unused_input_reads_zero():
    x = t64(np.ones(3), grad=True)
    unused = t64(np.ones(4), grad=True)
    with GradTape() as tape:
        loss = tsum(x)
    g = tape.backward(loss)
    assert np.array_equal(g.of(unused), np.zeros(4))


def test_tape_consumed_then_reset():
    x = t64([1.0], grad=True)
    tape = GradTape()
    with tape:
        loss = tsum(x)
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)
    tape.reset()
    with tape:
        loss2 = tsum(mul(x, x))
    assert tape.backward(loss2).of(x).shape == (1,)


def test_backward_is_linear_in_the_loss():
    gen = np.random.default_rng(5)
    x = t64(gen.normal(size=(4,)), grad=True)
    a, b = 2.5, -1.25

    def grad_of(builder):
        with GradTape() as tape:
            loss = builder()
        return tape.backward(loss).of(x)

    gf = grad_of(lambda: tsum(mul(x, x)))
    gg = grad_of(lambda: tsum(exp(x)))
    combined = grad_of(lambda: add(
        mul(Tensor(np.float64(a)), tsum(mul(x, x))),
        mul(Tensor(np.float64(b)), tsum(exp(x)))))
    assert np.allclose(combined, a * gf + b * gg, rtol=1e-12)


# ---------------------------------------------------------------------------
# primitive gradients vs finite differences (double precision)
# ---------------------------------------------------------------------------

UNARY_OPS = [exp, log, tanh, sqrt, gelu, relu2,
             lambda t: power(t, 3.0), lambda t: softmax(t, axis=-1),
             lambda t: tsum(t, axis=0), lambda t: tmean(t, axis=-1),
             lambda t: reshape(t, (6, 2)), lambda t: transpose(t),
             neg]
BINARY_OPS = [add, sub, mul, div, minimum]


@pytest.mark.parametrize("op_idx", range(len(UNARY_OPS)))
def test_unary_gradients_match_fd(op_idx):
    op = UNARY_OPS[op_idx]
    gen = np.random.default_rng(100 + op_idx)
    worst = 0.0
    for case in range(8):
        x = t64(gen.uniform(0.3, 2.0, size=(3, 4)), grad=True)
        with GradTape() as tape:
            loss = tsum(mul(op(x), op(x)))
        g = tape.backward(loss).of(x)

        def forward():
            y = None
            with GradTape():
                y = op(Tensor(x.data.copy())).data
            return (y * y).sum()

        for idx in random_indices(x.shape, 3, gen):
            fd = central_difference(forward, x.data, idx)
            worst = max(worst, relative_error(float(g[idx]), fd))
    assert worst <= 1e-6


@pytest.mark.parametrize("op_idx", range(len(BINARY_OPS)))
def test_binary_gradients_match_fd(op_idx):
    op = BINARY_OPS[op_idx]
    gen = np.random.default_rng(200 + op_idx)
    worst = 0.0
    for case in range(8):
        a = t64(gen.uniform(0.5, 2.0, size=(3, 4)), grad=True)
        b = t64(gen.uniform(0.5, 2.0, size=(3, 4)), grad=True)
        with GradTape() as tape:
            loss = tsum(mul(op(a, b), op(a, b)))
        grads = tape.backward(loss)

        def forward():
            with GradTape():
                y = op(Tensor(a.data.copy()), Tensor(b.data.copy())).data
            return (y * y).sum()

        for tensor in (a, b):
            g = grads.of(tensor)
            for idx in random_indices(tensor.shape, 2, gen):
                fd = central_difference(forward, tensor.data, idx)
                worst = max(worst, relative_error(float(g[idx]), fd))
    assert worst <= 1e-6


def test_layer_norm_gradients_match_fd():
    gen = np.random.default_rng(42)
    x = t64(gen.normal(size=(3, 5)), grad=True)
    gain = t64(gen.normal(size=(5,)), grad=True)
    bias = t64(gen.normal(size=(5,)), grad=True)
    with GradTape() as tape:
        y = layer_norm(x, gain, bias)
        loss = tsum(mul(y, y))
    grads = tape.backward(loss)

    def forward():
        mu = x.data.mean(-1, keepdims=True)
        xc = x.data - mu
        inv = 1 / np.sqrt((xc * xc).mean(-1, keepdims=True) + 1e-5)
        y = xc * inv * gain.data + bias.data
        return (y * y).sum()

    worst = 0.0
    for tensor in (x, gain, bias):
        g = grads.of(tensor)
        for idx in random_indices(tensor.shape, 4, gen):
            fd = central_difference(forward, tensor.data, idx)
            worst = max(worst, relative_error(float(g[idx]), fd))
    assert worst <= 1e-6


def test_structural_op_gradients():
    gen = np.random.default_rng(7)
    a = t64(gen.normal(size=(2, 3)), grad=True)
    b = t64(gen.normal(size=(2, 2)), grad=True)
    with GradTape() as tape:
        joined = concat([a, b], axis=1)
        loss = tsum(mul(joined, joined))
    grads = tape.backward(loss)
    assert np.allclose(grads.of(a), 2 * a.data)
    assert np.allclose(grads.of(b), 2 * b.data)

    table = t64(gen.normal(size=(6, 3)), grad=True)
    ids = np.array([0, 2, 2, 5])
    with GradTape() as tape:
        rows = gather_rows(table, ids)
        loss = tsum(rows)
    g = tape.backward(loss).of(table)
    want = np.zeros((6, 3))
    np.add.at(want, ids, 1.0)
    assert np.array_equal(g, want)

    x = t64(gen.normal(size=(2, 1, 3)), grad=True)
    with GradTape() as tape:
        big = broadcast_to(x, (2, 4, 3))
        loss = tsum(big)
    g = tape.backward(loss).of(x)
    assert np.array_equal(g, np.full((2, 1, 3), 4.0))


def test_clip_const_gradient_zero_outside_interval():
    x = t64([0.5, 1.0, 1.5], grad=True)
    with GradTape() as tape:
        loss = tsum(clip_const(x, 0.8, 1.2))
    g = tape.backward(loss).of(x)
    assert np.array_equal(g, [0.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# broadcasting discipline and errors
# ---------------------------------------------------------------------------


def test_trailing_broadcast_only():
    a = t64(np.ones((2, 3, 4)))
    b = t64(np.ones(4))
    assert add(a, b).shape == (2, 3, 4)
    with pytest.raises(ShapeError):
        add(a, t64(np.ones((2, 1, 4))))


def test_nonfinite_surfaced():
    with np.errstate(all="ignore"):
        with pytest.raises(NonFiniteError):
            div(t64([1.0]), t64([0.0]))
        with pytest.raises(NonFiniteError):
            log(t64([-1.0]))


def test_finite_checks_toggle():
    prev = set_finite_checks(False)
    try:
        with np.errstate(all="ignore"):
            out = div(t64([1.0]), t64([0.0]))
        assert np.isinf(out.data[0])
    finally:
        set_finite_checks(prev)


# ---------------------------------------------------------------------------
# rng
# ---------------------------------------------------------------------------


def test_gaussian_deterministic_per_stream():
    a = gaussian(Rng(0).stream("data"), (5, 5))
    b = gaussian(Rng(0).stream("data"), (5, 5))
    assert np.array_equal(a.data, b.data)


def test_gaussian_moments():
    draws = Rng(0).stream("data").normal((1_000_000,), dtype=np.float64)
    assert abs(draws.mean()) < 4 / np.sqrt(1_000_000)
    assert abs(draws.var() - 1.0) < 0.01


def test_streams_positionally_independent():
    root = Rng(7)
    a1 = root.stream("a").normal((10,))
    # consuming another stream in between must not shift stream "a"
    root2 = Rng(7)
    _ = root2.stream("b").normal((1000,))
    a2 = root2.stream("a").normal((10,))
    assert np.array_equal(a1, a2)


def test_stream_counter_advances():
    s = Rng(0).stream("data")
    s.normal((4, 4))
    assert s.counter == 16


def test_distinct_streams_differ():
    r = Rng(3)
    assert not np.array_equal(r.stream("a").normal((8,)),
                              r.stream("b").normal((8,)))
    assert not np.array_equal(r.stream("a", 0).normal((8,)),
                              r.stream("a", 1).normal((8,)))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_tensor_roundtrip_and_header():
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    blob = serialize.tensor_bytes(arr)
    assert blob[:4] == b"VGT1"
    assert int.from_bytes(blob[4:8], "little") == 3
    assert int.from_bytes(blob[8:12], "little") == 2
    back = serialize.read_tensor(io.BytesIO(blob))
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_tensor_roundtrip_double():
    arr = np.random.default_rng(0).normal(size=(5,)).astype(np.float64)
    back = serialize.read_tensor(io.BytesIO(serialize.tensor_bytes(arr)))
    assert back.dtype == np.float64
    assert np.array_equal(back, arr)


def test_tagged_blocks_roundtrip(tmp_path):
    path = tmp_path / "blocks.bin"
    a = np.ones((2, 2), dtype=np.float32)
    b = np.zeros(3, dtype=np.float64)
    with open(path, "wb") as f:
        serialize.write_block(f, "alpha", a)
        serialize.write_block(f, "beta", b)
    with open(path, "rb") as f:
        blocks = serialize.read_all_blocks(f)
    assert set(blocks) == {"alpha", "beta"}
    assert np.array_equal(blocks["alpha"], a)


def test_checkpoint_roundtrip(tmp_path):
    path = tmp_path / "ckpt.vckp"
    sections = {"model": {"w": np.ones((2, 2), dtype=np.float32)},
                "adapters": {"a": np.zeros(3, dtype=np.float32)}}
    serialize.save_checkpoint(path, {"kind": "test"}, sections)
    manifest, back = serialize.load_checkpoint(path)
    assert manifest["kind"] == "test"
    assert np.array_equal(back["model"]["w"], sections["model"]["w"])
    assert np.array_equal(back["adapters"]["a"], sections["adapters"]["a"])


def test_corrupt_magic_rejected():
    with pytest.raises(serialize.FormatError):
        serialize.read_tensor(io.BytesIO(b"XXXX" + b"\x00" * 16))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_adam_zero_grad_is_a_no_op():
    p = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    before = p.data.copy()
    with GradTape() as tape:
        loss = tsum(mul(p, Tensor(np.zeros(4, dtype=np.float32))))
    opt.step(tape.backward(loss))
    assert np.array_equal(p.data, before)


def test_adam_descends_a_quadratic():
    target = np.array([1.0, -2.0, 3.0], dtype=np.float32)
    p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    opt = Adam({"p": p}, lr=0.05)
    for _ in range(400):
        with GradTape() as tape:
            diff = sub(p, Tensor(target))
            loss = tsum(mul(diff, diff))
        opt.step(tape.backward(loss))
    assert np.allclose(p.data, target, atol=1e-2)
