import numpy as np
import pytest

from lightfield.autodiff import Tape, TapeUsageError


def finite_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += h
        fp = f(xp)
        xp.flat[i] -= 2 * h
        fm = f(xp)
        g.flat[i] = (fp - fm) / (2 * h)
    return g


class TestBasics:
    def test_identity_passes_seed_through(self):
        tape = Tape()
        x = tape.leaf(np.arange(6.0).reshape(2, 3))
        y = tape.add(x, np.zeros((2, 3)))
        seed = np.full((2, 3), 2.5)
        tape.backward(y, seed)
        np.testing.assert_array_equal(x.grad, seed)

    def test_linear_layer_input_gradient(self):
        rng = np.random.default_rng(0)
        W = rng.normal(size=(4, 3))
        x = rng.normal(size=(2, 4))
        seed = rng.normal(size=(2, 3))
        tape = Tape()
        xv = tape.leaf(x)
        y = tape.matmul(xv, tape.leaf(W))
        tape.backward(y, seed)
        np.testing.assert_allclose(xv.grad, seed @ W.T, atol=1e-12)

    def test_backward_before_forward_is_usage_error(self):
        tape = Tape()
        with pytest.raises(TapeUsageError):
            tape.backward(None)

    def test_foreign_variable_rejected(self):
        t1, t2 = Tape(), Tape()
        x = t1.leaf(np.ones(3))
        t2.leaf(np.ones(3))
        with pytest.raises(TapeUsageError):
            t2.backward(x)
        with pytest.raises(TapeUsageError):
            t2.add(x, np.ones(3))

    def test_seed_shape_checked(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 2)))
        y = tape.relu(x)
        with pytest.raises(ValueError):
            tape.backward(y, np.ones(3))

    def test_grads_reset_between_backward_calls(self):
        tape = Tape()
        x = tape.leaf(np.ones(4))
        y = tape.sum(tape.mul(x, x))
        tape.backward(y)
        first = x.grad.copy()
        tape.backward(y)
        np.testing.assert_array_equal(x.grad, first)


class TestGradientsMatchFiniteDifferences:
    def check(self, build, *shapes, seed=0, tol=1e-7):
        rng = np.random.default_rng(seed)
        arrays = [rng.normal(size=s) for s in shapes]
        tape = Tape()
        leaves = [tape.leaf(a.copy()) for a in arrays]
        out = build(tape, *leaves)
        loss = tape.sum(out) if out.value.ndim else out
        tape.backward(loss)
        for i, a in enumerate(arrays):
            def f(x, i=i):
                t = Tape()
                ls = [t.leaf(x if j == i else arrays[j]) for j in range(len(arrays))]
                o = build(t, *ls)
                return float(o.value.sum())

            np.testing.assert_allclose(leaves[i].grad, finite_diff(f, a), atol=tol,
                                       err_msg=f"leaf {i}")

    def test_mul_add_sub(self):
        self.check(lambda t, a, b: t.sub(t.mul(a, b), t.add(a, b)), (3, 4), (3, 4))

    def test_broadcast_bias(self):
        self.check(lambda t, x, b: t.add(x, b), (5, 3), (3,))

    def test_matmul(self):
        self.check(lambda t, a, b: t.matmul(a, b), (4, 3), (3, 5))

    def test_relu(self):
        self.check(lambda t, x: t.relu(x), (4, 4), seed=1)

    def test_sin_cos_scale(self):
        self.check(lambda t, x: t.mul(t.sin(t.scale(x, 1.7)), t.cos(x)), (6,))

    def test_div(self):
        def build(t, a, b):
            return t.div(a, t.add(t.mul(b, b), np.full((4,), 0.5)))

        self.check(build, (4,), (4,))

    def test_layer_norm(self):
        self.check(
            lambda t, x, g, b: t.layer_norm(x, g, b), (5, 8), (8,), (8,), tol=1e-6
        )

    def test_concat_and_narrow(self):
        def build(t, a, b):
            joined = t.concat([t.relu(a), t.mul(b, b)], axis=1)
            return t.mul(joined, joined)

        self.check(build, (3, 2), (3, 4))

        def build2(t, p):
            W = t.narrow(p, 2, 6, (2, 3))
            return t.matmul(t.relu(W), np.ones((3, 2)))

        self.check(build2, (10,))

    def test_take_row_and_mean(self):
        def build(t, m):
            return t.mean(t.mul(t.take_row(m, 1), t.take_row(m, 1)))

        self.check(build, (3, 5))

    def test_layer_norm_gradient_tight(self):
        # central differences vs analytic, relative error below 1e-4
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 16))
        g = rng.normal(size=16)
        b = rng.normal(size=16)
        tape = Tape()
        xv, gv, bv = tape.leaf(x.copy()), tape.leaf(g.copy()), tape.leaf(b.copy())
        out = tape.layer_norm(xv, gv, bv)
        loss = tape.sum(tape.mul(out, out))
        tape.backward(loss)

        def f(xx):
            t = Tape()
            o = t.layer_norm(t.leaf(xx), t.leaf(g), t.leaf(b))
            return float((o.value**2).sum())

        num = finite_diff(f, x, h=1e-5)
        denom = np.maximum(np.abs(num), 1e-6)
        assert (np.abs(num - xv.grad) / denom).max() < 1e-4
