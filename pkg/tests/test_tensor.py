import numpy as np
import numpy.testing as npt
import pytest

from capsroute import tensor as T

from oracles import central_difference, naive_conv2d


def grad_of(fn, *arrays, dtype=np.float64):
    """Analytic gradients of scalar fn(*tensors) wrt each array."""
    params = [T.parameter(a) for a in arrays]
    with T.tape() as tp:
        loss = fn(*params)
        T.backward(loss, tp)
    return [p.grad for p in params], params


def fd_assert(fn, arrays, rtol=1e-5, eps=1e-5, samples=10, seed=0):
    rng = np.random.default_rng(seed)
    grads, params = grad_of(fn, *arrays)
    for g, p in zip(grads, params):
        def value():
            with T.no_grad():
                return fn(*[T.Tensor(q.data, dtype=q.data.dtype) for q in params]).item()
        for fi in rng.choice(p.size, size=min(samples, p.size), replace=False):
            idx = np.unravel_index(fi, p.shape)
            fd = central_difference(value, p.data, idx, eps)
            denom = max(abs(g[idx]), abs(fd), 1e-5)
            assert abs(g[idx] - fd) / denom <= rtol, (g[idx], fd)


class TestElementwise:
    def test_add_componentwise(self):
        out = T.add(T.Tensor([1.0, 2.0]), T.Tensor([3.0, 4.0]))
        npt.assert_array_equal(out.data, [4.0, 6.0])

    def test_mul_absorbing_zero(self):
        out = T.mul(T.Tensor(np.ones((2, 2))), 0.0)
        npt.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_incompatible_shapes_named(self):
        with pytest.raises(T.ShapeError) as e:
            T.add(T.Tensor(np.zeros(3)), T.Tensor(np.zeros(2)))
        assert "(3,)" in str(e.value) and "(2,)" in str(e.value)

    def test_broadcast_result_shape_associative(self, rng):
        shapes = [(3, 1, 4), (1, 5, 4), (3, 5, 1), (4,), (1,), (5, 1)]
        for _ in range(30):
            a, b, c = (np.zeros(shapes[i]) for i in rng.choice(len(shapes), 3))
            ta, tb, tc = T.Tensor(a), T.Tensor(b), T.Tensor(c)
            left = T.add(T.add(ta, tb), tc).shape
            right = T.add(ta, T.add(tb, tc)).shape
            assert left == right


class TestContract:
    def test_matrix_product(self, f64):
        a = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]])
        b = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        out = T.contract(T.Tensor(a), T.Tensor(b), ([1], [0]))
        npt.assert_allclose(out.data, a @ b)

    def test_zero_tensor(self, f64, rng):
        a = T.Tensor(rng.normal(size=(3, 4)))
        z = T.Tensor(np.zeros((4, 2)))
        npt.assert_array_equal(T.contract(a, z, ([1], [0])).data, np.zeros((3, 2)))

    def test_mismatched_extents(self):
        with pytest.raises(T.ShapeError):
            T.contract(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))),
                       ([1], [0]))

    def test_gradient_vs_central_differences(self, f64, rng):
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 6))
        fd_assert(
            lambda x, y: T.sum_(T.square(T.contract(x, y, ([1], [0])))),
            [a, b], rtol=1e-6,
        )

    def test_multi_axis(self, f64, rng):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(3, 4, 5))
        out = T.contract(T.Tensor(a), T.Tensor(b), ([1, 2], [0, 1]))
        npt.assert_allclose(out.data, np.tensordot(a, b, axes=([1, 2], [0, 1])),
                            rtol=1e-12)


class TestConvLowering:
    def test_same_padding_center_patch(self, f64, rng):
        x = rng.normal(size=(3, 3, 1))
        cols = T.conv2d_lower(T.Tensor(x), 3, 3, 1, "same")
        assert cols.shape == (3, 3, 9)
        npt.assert_allclose(cols.data[1, 1], x.reshape(-1))

    def test_valid_shape_arithmetic(self, f64, rng):
        x = rng.normal(size=(4, 4, 1))
        cols = T.conv2d_lower(T.Tensor(x), 2, 2, 2, "valid")
        assert cols.shape == (2, 2, 4)

    def test_kernel_larger_than_input_valid(self, f64):
        with pytest.raises(ValueError):
            T.conv2d_lower(T.Tensor(np.zeros((3, 3, 1))), 5, 5, 1, "valid")

    def test_lowering_matches_naive_convolution(self, f64, rng):
        x = rng.normal(size=(8, 8, 2))
        w = rng.normal(size=(3, 3, 2, 4))
        cols = T.conv2d_lower(T.Tensor(x), 3, 3, 1, "same")
        out = T.contract(cols.reshape(64, 18), T.Tensor(w.reshape(18, 4)),
                         ([1], [0]))
        npt.assert_allclose(out.data.reshape(8, 8, 4), naive_conv2d(x, w),
                            rtol=1e-12, atol=1e-12)

    def test_lowering_matches_naive_convolution_strided(self, f64, rng):
        for h, k, s, c in [(8, 3, 2, 2), (6, 5, 1, 3), (8, 5, 2, 1), (6, 3, 3, 2)]:
            x = rng.normal(size=(h, h, c))
            w = rng.normal(size=(k, k, c, 2))
            cols = T.conv2d_lower(T.Tensor(x), k, k, s, "same")
            ho = h // s
            out = T.contract(cols.reshape(ho * ho, k * k * c),
                             T.Tensor(w.reshape(k * k * c, 2)), ([1], [0]))
            npt.assert_allclose(out.data.reshape(ho, ho, 2),
                                naive_conv2d(x, w, stride=s),
                                rtol=1e-12, atol=1e-12)

    def test_lowering_matches_oracle_on_all_inputs_up_to_8x8x4(self, f64, rng):
        # exhaustive extent sweep against the naive oracle
        for h in range(1, 9):
            for w in range(1, 9):
                for c in (1, 2, 4):
                    x = rng.normal(size=(h, w, c))
                    kern = rng.normal(size=(3, 3, c, 2))
                    cols = T.conv2d_lower(T.Tensor(x), 3, 3, 1, "same")
                    out = T.contract(
                        cols.reshape(h * w, 9 * c),
                        T.Tensor(kern.reshape(9 * c, 2)), ([1], [0])
                    )
                    npt.assert_allclose(out.data.reshape(h, w, 2),
                                        naive_conv2d(x, kern),
                                        rtol=1e-12, atol=1e-12)


def test_tapes_are_thread_confined(f64):
    # independent tapes on separate threads accumulate independent gradients
    import threading

    errors = []

    def worker(scale):
        try:
            x = T.parameter(np.full(4, float(scale)))
            with T.tape() as tp:
                loss = T.sum_(T.mul(x, float(scale)))
                T.backward(loss, tp)
            npt.assert_allclose(x.grad, np.full(4, float(scale)))
        except Exception as exc:  # pragma: no cover - failure reporting
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(s,)) for s in (2, 3, 5, 7)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


class TestDeconvScatter:
    def test_shape_doubling(self, f64, rng):
        p = rng.normal(size=(2, 2, 9 * 3))
        out = T.deconv2d_scatter(T.Tensor(p), 3, 3, 2)
        assert out.shape == (4, 4, 3)

    def test_zero_input(self, f64):
        out = T.deconv2d_scatter(T.Tensor(np.zeros((2, 2, 4))), 2, 2, 2)
        npt.assert_array_equal(out.data, np.zeros((4, 4, 1)))

    def test_unsupported_stride(self, f64):
        with pytest.raises(ValueError):
            T.deconv2d_scatter(T.Tensor(np.zeros((2, 2, 4))), 2, 2, 3)

    def test_adjoint_identity(self, f64, rng):
        # <conv(x), y> == <x, deconv(y)> pins deconv as the exact adjoint
        for _ in range(40):
            h = int(rng.integers(2, 7)) * 2
            c = int(rng.integers(1, 4))
            k = int(rng.choice([1, 3, 5]))
            s = int(rng.choice([1, 2]))
            x = rng.normal(size=(h, h, c))
            cols = T.conv2d_lower(T.Tensor(x), k, k, s, "same")
            y = rng.normal(size=cols.shape)
            lhs = float((cols.data * y).sum())
            back = T.deconv2d_scatter(T.Tensor(y), k, k, s)
            # deconv output extents are s*(h//s) == h here
            rhs = float((x * back.data).sum())
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


class TestBackward:
    def test_sum_gives_ones(self, f64):
        x = T.parameter(np.arange(6.0).reshape(2, 3))
        with T.tape() as tp:
            T.backward(T.sum_(x), tp)
        npt.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_half_norm_squared_gives_x(self, f64, rng):
        data = rng.normal(size=(4, 3))
        x = T.parameter(data)
        with T.tape() as tp:
            T.backward(T.mul(T.sum_(T.square(x)), 0.5), tp)
        npt.assert_allclose(x.grad, data, rtol=1e-12)

    def test_accumulation_two_paths(self, f64):
        x = T.parameter(np.ones(3))
        with T.tape() as tp:
            T.backward(T.add(T.sum_(x), T.sum_(x)), tp)
        npt.assert_array_equal(x.grad, 2 * np.ones(3))

    def test_non_scalar_loss_rejected(self, f64):
        x = T.parameter(np.ones(3))
        with T.tape() as tp:
            y = T.mul(x, 2.0)
            with pytest.raises(ValueError):
                T.backward(y, tp)

    def test_detached_graph_rejected(self, f64):
        x = T.Tensor(np.ones(3))  # not a parameter
        with T.tape() as tp:
            y = T.sum_(x)
            with pytest.raises(T.DetachedGraphError):
                T.backward(y, tp)

    def test_detach_blocks_gradient(self, f64):
        x = T.parameter(np.ones(3))
        with T.tape() as tp:
            y = T.add(T.sum_(T.detach(x)), T.sum_(x))
            T.backward(y, tp)
        npt.assert_array_equal(x.grad, np.ones(3))


OPS = [
    ("add", lambda a, b: T.sum_(T.square(T.add(a, b))), [(3, 4), (3, 4)]),
    ("add_broadcast", lambda a, b: T.sum_(T.square(T.add(a, b))), [(3, 4), (4,)]),
    ("sub", lambda a, b: T.sum_(T.square(T.sub(a, b))), [(3, 4), (3, 4)]),
    ("mul", lambda a, b: T.sum_(T.square(T.mul(a, b))), [(3, 4), (3, 4)]),
    ("mul_broadcast", lambda a, b: T.sum_(T.square(T.mul(a, b))), [(2, 3, 4), (3, 1)]),
    ("div", lambda a, b: T.sum_(T.square(T.div(a, b))), [(3, 4), (3, 4)]),
    ("neg", lambda a: T.sum_(T.square(T.neg(a))), [(5,)]),
    ("exp", lambda a: T.sum_(T.square(T.exp(a))), [(3, 3)]),
    ("sqrt", lambda a: T.sum_(T.sqrt(a)), [(4,)]),
    ("square", lambda a: T.sum_(T.square(a)), [(4, 2)]),
    ("sigmoid", lambda a: T.sum_(T.square(T.sigmoid(a))), [(6,)]),
    ("matmul", lambda a, b: T.sum_(T.square(T.matmul(a, b))), [(3, 4), (4, 5)]),
    ("matmul_batched", lambda a, b: T.sum_(T.square(T.matmul(a, b))),
     [(2, 3, 4), (2, 4, 5)]),
    ("reshape", lambda a: T.sum_(T.square(T.reshape(a, (6,)))), [(2, 3)]),
    ("transpose", lambda a: T.sum_(T.square(T.transpose(a, (1, 0, 2)))),
     [(2, 3, 4)]),
    ("sum_axis", lambda a: T.sum_(T.square(T.sum_(a, axis=1))), [(3, 4, 2)]),
    ("mean", lambda a: T.square(T.mean(a)), [(3, 4)]),
    ("vecmat", lambda a, b: T.sum_(T.square(T.vecmat(a, b))), [(3, 2, 5), (3, 2, 5, 4)]),
    ("matvec", lambda a, b: T.sum_(T.square(T.matvec(a, b))), [(3, 2, 5, 4), (3, 2, 4)]),
    ("im2col", lambda a: T.sum_(T.square(T.conv2d_lower(a, 3, 3, 1, "same"))),
     [(5, 5, 2)]),
    ("im2col_s2", lambda a: T.sum_(T.square(T.conv2d_lower(a, 3, 3, 2, "same"))),
     [(6, 6, 2)]),
    ("col2im", lambda a: T.sum_(T.square(T.deconv2d_scatter(a, 3, 3, 2))),
     [(3, 3, 9 * 2)]),
    ("upsample", lambda a: T.sum_(T.square(T.upsample_zeros(a, 2))), [(3, 3, 2)]),
    ("concat", lambda a, b: T.sum_(T.square(T.concat([a, b], axis=1))),
     [(3, 2), (3, 4)]),
    ("softmax", lambda a: T.sum_(T.square(T.softmax(a, axis=-1))), [(4, 5)]),
    ("index_grid", lambda a: T.sum_(T.square(T.index_grid(a, [1, 3], [0, 2]))),
     [(4, 4, 3)]),
    ("parity", lambda a: T.sum_(T.square(T.parity_interleave(a))), [(4, 2, 2, 3)]),
    ("log_clip", lambda a: T.sum_(T.log(T.clip(a, 1e-7, 1 - 1e-7))), [(4, 4)]),
]


@pytest.mark.parametrize("name,fn,shapes", OPS, ids=[o[0] for o in OPS])
def test_op_gradient_matches_central_differences(name, fn, shapes, f64):
    # spec invariant: every differentiable op, 10 random points, rel <= 1e-5
    import zlib

    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [rng.normal(size=s) for s in shapes]
    if name in ("sqrt", "log_clip"):
        arrays = [np.abs(a) * 0.4 + 0.3 for a in arrays]
    if name == "div":
        arrays[1] = np.abs(arrays[1]) + 0.5
    fd_assert(fn, arrays, rtol=1e-5, samples=10)


def test_relu_gradient_away_from_kink(f64, rng):
    a = rng.normal(size=(5, 5))
    a[np.abs(a) < 0.1] = 0.5
    fd_assert(lambda x: T.sum_(T.square(T.relu(x))), [a], rtol=1e-5)


class TestFiniteChecks:
    def test_nan_is_error_state_when_enabled(self, f64):
        T.set_finite_checks(True)
        try:
            with pytest.raises(FloatingPointError):
                T.log(T.Tensor(np.array([-1.0])))
        finally:
            T.set_finite_checks(False)

    def test_disabled_by_default(self, f64):
        out = T.log(T.Tensor(np.array([-1.0])))
        assert np.isnan(out.data).all()


class TestDtypeModes:
    def test_default_float32(self):
        assert T.Tensor(np.zeros(3)).dtype == np.float32

    def test_using_dtype_context(self):
        with T.using_dtype(np.float64):
            assert T.Tensor(np.zeros(3)).dtype == np.float64
        assert T.Tensor(np.zeros(3)).dtype == np.float32
