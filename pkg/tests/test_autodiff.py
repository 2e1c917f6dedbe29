import numpy as np
import pytest

from audalign import autodiff as ad


def leaf(tape, x, name="x"):
    return tape.param(np.asarray(x, dtype=float), name)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    t = ad.Tape()
    a = np.arange(9.0).reshape(3, 3)
    out = ad.matmul(t.const(np.eye(3)), t.const(a))
    assert np.array_equal(out.value, a)


def test_matmul_hand_example():
    t = ad.Tape()
    out = ad.matmul(t.const([[1, 2], [3, 4]]), t.const([[0], [1]]))
    assert out.value.tolist() == [[2], [4]]


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    t = ad.Tape()
    out = ad.matmul(t.const(a), t.const(b)).value
    assert np.max(np.abs(out - triple_loop(a, b))) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    t = ad.Tape()
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(t.const(np.ones((2, 3))), t.const(np.ones((2, 3))))


def test_relu():
    t = ad.Tape()
    assert ad.relu(t.const([[-1, 0, 2]])).value.tolist() == [[0, 0, 2]]


def test_frobenius_inner_self_is_norm_squared():
    rng = np.random.default_rng(1)
    t = ad.Tape()
    a = t.const(rng.normal(size=(4, 6)))
    assert ad.frobenius_inner(a, a).item() == pytest.approx(ad.frobenius_norm(a).item() ** 2, rel=1e-12)


def test_frobenius_inner_symmetric():
    rng = np.random.default_rng(2)
    t = ad.Tape()
    a, b = t.const(rng.normal(size=(3, 5))), t.const(rng.normal(size=(3, 5)))
    assert ad.frobenius_inner(a, b).item() == ad.frobenius_inner(b, a).item()


def test_row_mean_center():
    t = ad.Tape()
    assert ad.row_mean_center(t.const([[1, 3], [5, 7]])).value.tolist() == [[-2, -2], [2, 2]]


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    t = ad.Tape()
    s = ad.softmax_rows(t.const(rng.normal(size=(4, 7)) * 30)).value
    assert np.allclose(s.sum(axis=1), 1.0)
    assert np.all(s >= 0)


def test_layer_norm_rows_moments():
    rng = np.random.default_rng(4)
    t = ad.Tape()
    y = ad.layer_norm_rows(t.const(rng.normal(3, 5, size=(5, 32)))).value
    assert np.allclose(y.mean(axis=1), 0, atol=1e-12)
    assert np.allclose(y.std(axis=1), 1, atol=1e-3)


def test_dropout_requires_explicit_mask():
    t = ad.Tape()
    x = t.const(np.ones((2, 2)))
    with pytest.raises((ValueError, TypeError)):
        ad.dropout_with_mask(x, None, 0.5)


def test_dropout_mask_applied_with_rescale():
    t = ad.Tape()
    mask = np.array([[1, 0], [0, 1]], dtype=float)
    y = ad.dropout_with_mask(t.const(np.ones((2, 2))), mask, 0.5).value
    assert y.tolist() == [[2, 0], [0, 2]]


def test_square_error_masked_only_counts_masked_rows():
    t = ad.Tape()
    pred = t.const([[1.0, 1.0], [5.0, 5.0]])
    tgt = t.const([[0.0, 0.0], [0.0, 0.0]])
    v = ad.square_error_masked(pred, tgt, np.array([True, False])).item()
    assert v == pytest.approx(1.0)


def test_backward_square():
    t = ad.Tape()
    x = leaf(t, [[3.0]])
    rep = ad.backward(t, ad.elementwise_mul(x, x))
    assert rep.grads["x"][0, 0] == pytest.approx(6.0)


def test_backward_norm_squared():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 4))
    t = ad.Tape()
    x = leaf(t, a)
    n = ad.frobenius_norm(x)
    rep = ad.backward(t, ad.elementwise_mul(n, n))
    assert np.allclose(rep.grads["x"], 2 * a, atol=1e-12)


def test_backward_rejects_non_scalar():
    t = ad.Tape()
    x = leaf(t, np.ones((2, 2)))
    with pytest.raises(ad.ShapeError):
        ad.backward(t, ad.relu(x))


def test_frozen_never_reported_and_disconnected_flagged():
    t = ad.Tape()
    w = t.param(np.ones((2, 2)), "w")
    f = t.frozen(np.ones((2, 2)), "f")
    unused = t.param(np.ones((1, 3)), "unused")
    loss = ad.mean_all(ad.matmul(w, f))
    rep = ad.backward(t, loss)
    assert "f" not in rep.grads
    assert "unused" in rep.disconnected
    assert np.all(rep.grads["unused"] == 0)
    assert set(rep.grads) == {"w", "unused"}


def test_replay_bitwise_identical():
    rng = np.random.default_rng(6)
    t = ad.Tape()
    x = leaf(t, rng.normal(size=(4, 8)))
    w = t.param(rng.normal(size=(8, 8)), "w")
    mask = (rng.random((4, 8)) > 0.3).astype(float)
    h = ad.dropout_with_mask(ad.relu(ad.matmul(x, w)), mask, 0.3)
    ad.frobenius_norm(ad.layer_norm_rows(ad.softmax_rows(h)))
    replayed = t.replay()
    for node, v in zip(t.nodes, replayed):
        assert np.array_equal(node.value, v)


def test_release_clears_tape():
    t = ad.Tape()
    x = leaf(t, np.ones((2, 2)))
    ad.relu(x)
    t.release()
    assert t.nodes == []
    assert x.value is None


def test_grad_check_linear_exact():
    rng = np.random.default_rng(7)
    # O(1) coefficients; a near-zero slope would be dominated by f roundoff / 2h
    c = rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))

    def fn(tape, p):
        return ad.frobenius_inner(p["a"], tape.const(c))

    assert ad.grad_check(fn, {"a": rng.normal(size=(3, 4))}) < 1e-10


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.grad_check(lambda t, p: ad.sum_all(p["a"]), {"a": np.ones((1, 1))}, h=0)


def test_grad_check_non_finite():
    def fn(tape, p):
        return ad.scalar_div(ad.sum_all(p["a"]), ad.sum_all(tape.const(np.zeros((1, 1)))))

    with np.errstate(divide="ignore", invalid="ignore"):
        with pytest.raises(FloatingPointError):
            ad.grad_check(fn, {"a": np.ones((1, 1))})


@pytest.mark.parametrize("op", ["relu_chain", "softmax", "layer_norm", "l2norm", "center", "attention", "rows"])
def test_each_op_gradient(op):
    rng = np.random.default_rng(11)
    x0 = rng.normal(size=(4, 6))
    w0 = rng.normal(size=(6, 6))

    def fn(tape, p):
        x, w = p["x"], p["w"]
        if op == "relu_chain":
            h = ad.relu(ad.add(ad.matmul(x, w), tape.const(0.1 * np.ones((1, 6)))))
        elif op == "softmax":
            h = ad.softmax_rows(ad.matmul(x, w))
        elif op == "layer_norm":
            h = ad.layer_norm_rows(ad.matmul(x, w))
        elif op == "l2norm":
            h = ad.l2_normalize_rows(ad.matmul(x, w))
        elif op == "center":
            h = ad.transpose(ad.row_mean_center(ad.matmul(x, w)))
        elif op == "attention":
            q = ad.matmul(x, w)
            h = ad.grouped_attention(q, x, ad.scalar_mul(q, 0.5), groups=2, heads=2)
        else:
            g = ad.gather_rows(ad.matmul(x, w), np.array([2, 0]))
            h = ad.group_mean_rows(ad.place_rows(g, np.array([1, 3]), 4), 2)
        tgt = tape.const(np.linspace(-1, 1, h.value.size).reshape(h.shape))
        return ad.frobenius_inner(h, tgt)

    assert ad.grad_check(fn, {"x": x0, "w": w0}) < 1e-4


def test_zero_tol_only_forgives_matching_zeros():
    c = np.array([[1.0, 0.0]])

    def fn(tape, p):
        # second coordinate has an exactly zero gradient; add a large constant so fd sees roundoff
        return ad.add(ad.frobenius_inner(p["a"], tape.const(c)), tape.const([[1.0]]))

    a = np.array([[0.3, 0.7]])
    assert ad.grad_check(fn, {"a": a}, zero_tol=1e-10) < 1e-10

    def wrong(tape, p):
        # hide the true slope of the second coordinate from autodiff
        x = p["a"]
        frozen = tape.const(x.value)
        return ad.add(ad.frobenius_inner(x, tape.const(c)), ad.frobenius_inner(frozen, tape.const([[0.0, 1.0]])))

    assert ad.grad_check(wrong, {"a": a}, zero_tol=1e-10) > 0.5
