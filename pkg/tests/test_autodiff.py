import numpy as np
import pytest

from mtmv import autodiff as ad
from mtmv.autodiff import (SparseMatrix, Tensor, backward, finite_difference_gradient,
                           max_relative_error)

FD_TOL = 1e-4


def fd_check(build_loss, leaves, eps=1e-5, tol=FD_TOL):
    """Compare autodiff gradients of build_loss() against central differences."""
    loss = build_loss()
    backward(loss)
    grads = [leaf.grad.copy() for leaf in leaves]
    for leaf, g in zip(leaves, grads):
        fd = finite_difference_gradient(lambda: build_loss().data, leaf.data, eps=eps)
        err = max_relative_error(g, fd)
        assert err < tol, f"gradient mismatch: rel err {err}"


def random_sparse(rng, m, n, density=0.3):
    dense = (rng.random((m, n)) < density) * rng.standard_normal((m, n))
    return SparseMatrix.from_dense(dense)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    b = Tensor(np.arange(12, dtype=float).reshape(3, 4))
    out = ad.matmul(Tensor(np.eye(3)), b)
    np.testing.assert_array_equal(out.data, b.data)


def test_matmul_zero():
    a = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    out = ad.matmul(a, Tensor(np.zeros((4, 2))))
    np.testing.assert_array_equal(out.data, np.zeros((3, 2)))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
        ad.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))


@pytest.mark.parametrize("seed", range(20))
def test_matmul_gradients(seed):
    rng = np.random.default_rng(seed)
    m, p, n = rng.integers(1, 5, size=3)
    a = Tensor(rng.standard_normal((m, p)), requires_grad=True)
    b = Tensor(rng.standard_normal((p, n)), requires_grad=True)
    w = rng.standard_normal((m, n))  # fixed projection makes the loss scalar

    def build():
        ad.zero_grad([a, b])
        return ad.reduce_sum(ad.mul(ad.matmul(a, b), Tensor(w)))

    fd_check(build, [a, b])


# ---------------------------------------------------------------------------
# spmm
# ---------------------------------------------------------------------------

def test_spmm_identity():
    b = Tensor(np.random.default_rng(1).standard_normal((4, 3)))
    out = ad.spmm(SparseMatrix.identity(4), b)
    np.testing.assert_array_equal(out.data, b.data)


def test_spmm_empty_matrix():
    s = SparseMatrix(3, 3, [0, 0, 0, 0], [], [])
    out = ad.spmm(s, Tensor(np.ones((3, 2))))
    np.testing.assert_array_equal(out.data, np.zeros((3, 2)))


def test_spmm_matches_dense_oracle():
    rng = np.random.default_rng(2)
    s = random_sparse(rng, 5, 5, density=0.3)
    b = rng.standard_normal((5, 3))
    out = ad.spmm(s, Tensor(b))
    np.testing.assert_allclose(out.data, s.to_dense() @ b, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_spmm_dense_equivalence_property(seed):
    rng = np.random.default_rng(100 + seed)
    m, n = rng.integers(1, 51, size=2)
    s = random_sparse(rng, m, n, density=0.2)
    b = rng.standard_normal((n, 4))
    out = ad.spmm(s, Tensor(b))
    np.testing.assert_allclose(out.data, s.to_dense() @ b, atol=1e-12)


def test_spmm_rejects_trainable_sparse():
    s = SparseMatrix.identity(3)
    s.trainable = True
    with pytest.raises(ad.UnsupportedOpError):
        ad.spmm(s, Tensor(np.ones((3, 2))))


def test_spmm_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.spmm(SparseMatrix.identity(3), Tensor(np.ones((4, 2))))


@pytest.mark.parametrize("seed", range(20))
def test_spmm_gradient(seed):
    rng = np.random.default_rng(200 + seed)
    m, n = rng.integers(2, 7, size=2)
    s = random_sparse(rng, m, n, density=0.5)
    b = Tensor(rng.standard_normal((n, 3)), requires_grad=True)
    w = rng.standard_normal((m, 3))

    def build():
        ad.zero_grad([b])
        return ad.reduce_sum(ad.mul(ad.spmm(s, b), Tensor(w)))

    fd_check(build, [b])


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def test_tanh_zero():
    assert ad.tanh(Tensor(np.zeros((2, 2)))).data.max() == 0.0


def test_sigmoid_zero():
    np.testing.assert_array_equal(ad.sigmoid(Tensor(np.zeros(3))).data, np.full(3, 0.5))


def test_sigmoid_extreme_inputs_stable():
    out = ad.sigmoid(Tensor(np.array([-1000.0, 1000.0])))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-12)


def test_binary_shape_mismatch():
    for op in (ad.add, ad.sub, ad.mul):
        with pytest.raises(ad.ShapeError):
            op(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


ELEMENTWISE_CASES = [
    ("tanh", lambda x: ad.tanh(x)),
    ("sigmoid", lambda x: ad.sigmoid(x)),
    ("scale", lambda x: ad.scale(x, -2.5)),
    ("shift", lambda x: ad.shift(x, 3.0)),
    ("log", lambda x: ad.log(ad.shift(x, 10.0))),  # keep argument positive
    ("power", lambda x: ad.power(ad.shift(x, 10.0), -0.5)),
    ("clamp", lambda x: ad.clamp(x, -0.7, 0.7)),
]


@pytest.mark.parametrize("name,fn", ELEMENTWISE_CASES, ids=[c[0] for c in ELEMENTWISE_CASES])
@pytest.mark.parametrize("seed", range(20))
def test_unary_gradients(name, fn, seed):
    rng = np.random.default_rng(300 + seed)
    shape = tuple(rng.integers(1, 5, size=rng.integers(1, 3)))
    # keep entries away from the clamp kink so finite differences stay valid
    vals = rng.uniform(-2, 2, size=shape)
    vals = np.where(np.abs(np.abs(vals) - 0.7) < 1e-3, 0.0, vals)
    x = Tensor(vals, requires_grad=True)
    w = rng.standard_normal(shape)

    def build():
        ad.zero_grad([x])
        return ad.reduce_sum(ad.mul(fn(x), Tensor(w)))

    fd_check(build, [x])


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul], ids=["add", "sub", "mul"])
@pytest.mark.parametrize("seed", range(20))
def test_binary_gradients(op, seed):
    rng = np.random.default_rng(400 + seed)
    shape = tuple(rng.integers(1, 5, size=2))
    a = Tensor(rng.standard_normal(shape), requires_grad=True)
    b = Tensor(rng.standard_normal(shape), requires_grad=True)
    w = rng.standard_normal(shape)

    def build():
        ad.zero_grad([a, b])
        return ad.reduce_sum(ad.mul(op(a, b), Tensor(w)))

    fd_check(build, [a, b])


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_uniform():
    out = ad.softmax(Tensor(np.array([1.0, 1.0, 1.0])), axis=0)
    np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0), atol=1e-15)


def test_softmax_large_values_stable():
    out = ad.softmax(Tensor(np.array([1000.0, 0.0])), axis=0)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-300)


def test_softmax_invalid_axis():
    with pytest.raises(ad.ShapeError):
        ad.softmax(Tensor(np.zeros((2, 2))), axis=2)


@pytest.mark.parametrize("seed", range(20))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(500 + seed)
    x = Tensor(rng.uniform(-50, 50, size=(4, 5)))
    out = ad.softmax(x, axis=1).data
    np.testing.assert_allclose(out.sum(axis=1), np.ones(4), atol=1e-12)
    assert out.min() >= 0.0 and out.max() <= 1.0


@pytest.mark.parametrize("seed", range(20))
def test_softmax_gradient(seed):
    rng = np.random.default_rng(600 + seed)
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    w = rng.standard_normal(4)

    def build():
        ad.zero_grad([x])
        return ad.reduce_sum(ad.mul(ad.softmax(x, axis=0), Tensor(w)))

    fd_check(build, [x])


# ---------------------------------------------------------------------------
# reductions, concat, row_dot and structural ops
# ---------------------------------------------------------------------------

def test_row_dot_unit_norm_rows():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((5, 3))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    out = ad.row_dot(Tensor(a), Tensor(a))
    np.testing.assert_allclose(out.data, np.ones(5), atol=1e-12)


def test_concat_shapes():
    x = Tensor(np.ones((2, 3)))
    y = Tensor(np.zeros((2, 2)))
    assert ad.concat([x, y], axis=1).shape == (2, 5)


def test_mean_of_stack_matches_loop_oracle():
    rng = np.random.default_rng(8)
    mats = [rng.standard_normal((3, 4)) for _ in range(5)]
    expected = np.zeros((3, 4))
    for i in range(3):
        for j in range(4):
            acc = 0.0
            for m in mats:
                acc += m[i, j]
            expected[i, j] = acc * (1.0 / 5.0)
    out = ad.scale(
        ad.add(ad.add(ad.add(ad.add(Tensor(mats[0]), Tensor(mats[1])), Tensor(mats[2])),
                      Tensor(mats[3])), Tensor(mats[4])), 1.0 / 5.0)
    np.testing.assert_array_equal(out.data, expected)


STRUCTURAL_CASES = [
    ("reduce_sum_all", lambda rng, x: ad.reduce_sum(x)),
    ("reduce_mean_all", lambda rng, x: ad.reduce_mean(x)),
    ("reduce_sum_axis0", lambda rng, x: ad.reduce_sum(ad.reduce_sum(x, axis=0))),
    ("reduce_mean_axis1", lambda rng, x: ad.reduce_sum(ad.reduce_mean(x, axis=1))),
    ("concat", lambda rng, x: ad.reduce_sum(
        ad.mul(ad.concat([x, ad.scale(x, 2.0)], axis=1),
               Tensor(rng.standard_normal((x.shape[0], 2 * x.shape[1])))))),
    ("slice_cols", lambda rng, x: ad.reduce_sum(ad.slice_cols(x, 1, x.shape[1]))),
    ("row_dot", lambda rng, x: ad.reduce_sum(
        ad.mul(ad.row_dot(x, ad.scale(x, 0.5)), Tensor(rng.standard_normal(x.shape[0]))))),
    ("stack_columns", lambda rng, x: ad.reduce_sum(
        ad.stack_columns([ad.column(x, j) for j in range(x.shape[1])]))),
    ("column", lambda rng, x: ad.reduce_sum(
        ad.mul(ad.column(x, 0), Tensor(rng.standard_normal(x.shape[0]))))),
    ("scale_rows", lambda rng, x: ad.reduce_sum(
        ad.scale_rows(x, ad.row_dot(x, x)))),
    ("gather_rows", lambda rng, x: ad.reduce_sum(
        ad.gather_rows(x, np.array([0, 0, x.shape[0] - 1])))),
]


@pytest.mark.parametrize("name,fn", STRUCTURAL_CASES, ids=[c[0] for c in STRUCTURAL_CASES])
@pytest.mark.parametrize("seed", range(20))
def test_structural_gradients(name, fn, seed):
    rng = np.random.default_rng(700 + seed)
    x = Tensor(rng.standard_normal((int(rng.integers(2, 6)), int(rng.integers(2, 5)))),
               requires_grad=True)

    def build():
        ad.zero_grad([x])
        return fn(np.random.default_rng(seed), x)

    fd_check(build, [x])


@pytest.mark.parametrize("seed", range(20))
def test_add_rowvec_and_mul_scalar_and_get_gradients(seed):
    rng = np.random.default_rng(800 + seed)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    v = Tensor(rng.standard_normal((1, 4)), requires_grad=True)
    s = Tensor(rng.standard_normal(5), requires_grad=True)
    w = rng.standard_normal((3, 4))

    def build():
        ad.zero_grad([x, v, s])
        y = ad.mul_scalar(ad.add_rowvec(x, v), ad.get(s, 2))
        return ad.reduce_sum(ad.mul(y, Tensor(w)))

    fd_check(build, [x, v, s])


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def test_dropout_rate_zero_is_identity():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones((4, 4)))
    for training in (True, False):
        assert ad.dropout(x, 0.0, training, rng) is x


def test_dropout_eval_mode_is_identity():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones((4, 4)))
    assert ad.dropout(x, 0.9, training=False, rng=rng) is x


def test_dropout_rate_out_of_range():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        ad.dropout(Tensor(np.ones(3)), 1.0, True, rng)
    with pytest.raises(ValueError):
        ad.dropout(Tensor(np.ones(3)), -0.1, True, rng)


def test_dropout_survivor_fraction_and_mean():
    rng = np.random.default_rng(42)
    x = Tensor(np.full(10 ** 6, 2.0))
    out = ad.dropout(x, 0.5, training=True, rng=rng)
    survivors = np.count_nonzero(out.data) / x.size
    assert 0.497 <= survivors <= 0.503
    assert abs(out.data.mean() - 2.0) / 2.0 < 0.01


def test_dropout_gradient_uses_saved_mask():
    rng = np.random.default_rng(3)
    x = Tensor(np.random.default_rng(1).standard_normal((50, 20)), requires_grad=True)
    out = ad.dropout(x, 0.5, training=True, rng=rng)
    mask = np.where(out.data != 0.0, 2.0, 0.0)
    backward(ad.reduce_sum(out))
    np.testing.assert_array_equal(x.grad, mask)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    w = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    backward(ad.reduce_sum(w))
    np.testing.assert_array_equal(w.grad, np.ones((3, 4)))


def test_backward_frobenius_gives_2w():
    w = Tensor(np.random.default_rng(1).standard_normal((3, 4)), requires_grad=True)
    backward(ad.reduce_sum(ad.mul(w, w)))
    np.testing.assert_allclose(w.grad, 2.0 * w.data, atol=1e-15)


def test_backward_rejects_nonscalar():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        backward(ad.scale(w, 2.0))


def test_backward_twice_without_reset_errors():
    w = Tensor(np.ones(3), requires_grad=True)
    loss = ad.reduce_sum(w)
    backward(loss)
    with pytest.raises(RuntimeError):
        backward(loss)


def test_backward_on_untracked_loss_errors():
    with pytest.raises(ValueError):
        backward(ad.reduce_sum(Tensor(np.ones(3))))


def test_gradient_accumulation_matches_duplicated_tensor():
    rng = np.random.default_rng(5)
    vals = rng.standard_normal((3, 3))

    # shared tensor consumed by two ops
    x = Tensor(vals.copy(), requires_grad=True)
    loss = ad.add(ad.reduce_sum(ad.mul(x, x)), ad.reduce_sum(ad.tanh(x)))
    backward(loss)

    # duplicated-tensor formulation
    x1 = Tensor(vals.copy(), requires_grad=True)
    x2 = Tensor(vals.copy(), requires_grad=True)
    loss2 = ad.add(ad.reduce_sum(ad.mul(x1, x1)), ad.reduce_sum(ad.tanh(x2)))
    backward(loss2)

    np.testing.assert_allclose(x.grad, x1.grad + x2.grad, atol=1e-15)


def test_requires_grad_leaf_has_zero_grad_accumulator():
    w = Tensor(np.ones((2, 3)), requires_grad=True)
    assert w.grad is not None and w.grad.shape == (2, 3)
    np.testing.assert_array_equal(w.grad, np.zeros((2, 3)))


def test_debug_finite_check():
    ad.DEBUG_CHECK_FINITE = True
    try:
        with np.errstate(invalid="ignore"):
            with pytest.raises(FloatingPointError):
                ad.log(Tensor(np.array([-1.0])))
    finally:
        ad.DEBUG_CHECK_FINITE = False


# ---------------------------------------------------------------------------
# SparseMatrix validation
# ---------------------------------------------------------------------------

def test_sparse_rejects_duplicates():
    with pytest.raises(ValueError, match="duplicate"):
        SparseMatrix.from_coo(2, 2, [0, 0], [1, 1], [1.0, 2.0])


def test_sparse_rejects_bad_offsets():
    with pytest.raises(ValueError):
        SparseMatrix(2, 2, [0, 2, 1], [0, 1], [1.0, 1.0])


def test_sparse_rejects_out_of_range_column():
    with pytest.raises(ValueError):
        SparseMatrix(2, 2, [0, 1, 2], [0, 5], [1.0, 1.0])


def test_sparse_rejects_nonfinite():
    with pytest.raises(ValueError):
        SparseMatrix(1, 1, [0, 1], [0], [np.inf])


def test_sparse_dense_roundtrip():
    rng = np.random.default_rng(9)
    dense = (rng.random((6, 4)) < 0.4) * rng.standard_normal((6, 4))
    s = SparseMatrix.from_dense(dense)
    np.testing.assert_array_equal(s.to_dense(), dense)
