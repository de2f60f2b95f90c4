import numpy as np
import pytest

from contact_inekf import liegroup as lg
from contact_inekf import tape as tp


def fd_grad(fn, x, step=1e-6):
    """Central finite differences of a scalar function, entry by entry."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * step)
    return g


def check_primitive(build, x0, step=1e-6, rtol=1e-6, atol=1e-9):
    """Compare tape gradient of sum(build(leaf)) against central differences."""
    x0 = np.asarray(x0, dtype=float)
    t = tp.Tape()
    leaf = t.leaf(x0)
    out = build(leaf)
    (g,) = t.grad(out, [leaf])

    def scalar(x):
        return float(np.sum(tp.value(build(x))))

    g_fd = fd_grad(scalar, x0.copy(), step=step)
    err = np.abs(g - g_fd)
    tol = atol + rtol * np.maximum(np.abs(g_fd), 1.0)
    assert np.all(err < tol), f"max err {err.max():.3e} vs fd {np.abs(g_fd).max():.3e}"


class TestArithmetic:
    def test_add_sub_mul_broadcast(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 3, 3))
        b = rng.normal(size=(3, 3))
        check_primitive(lambda x: tp.mul(tp.add(x, b), tp.sub(x, 2.0 * b)), a)
        # gradient w.r.t. the broadcast operand must sum over the batch
        t = tp.Tape()
        vb = t.leaf(b)
        out = tp.total(tp.add(a, vb))
        (g,) = t.grad(out, [vb])
        assert np.allclose(g, 4.0 * np.ones((3, 3)))

    def test_scale_neg_transpose_reshape(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(5, 2, 3))
        check_primitive(lambda x: tp.scale(tp.neg(tp.transpose(x)), 2.5), a)
        check_primitive(lambda x: tp.reshape(x, (5, 6)), a)

    def test_matmul(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(3, 4, 5))
        b = rng.normal(size=(3, 5, 2))
        check_primitive(lambda x: tp.matmul(x, b), a)
        check_primitive(lambda x: tp.matmul(a, x), b)
        # broadcasting across a stacked axis
        m = rng.normal(size=(3, 1, 4, 4))
        xs = rng.normal(size=(3, 6, 4, 1))
        check_primitive(lambda x: tp.matmul(x, xs), m)
        check_primitive(lambda x: tp.matmul(m, x), xs)

    def test_matvec_rotate_many(self):
        rng = np.random.default_rng(3)
        m = rng.normal(size=(4, 3, 3))
        x = rng.normal(size=(4, 3))
        check_primitive(lambda v: tp.matvec(v, x), m)
        check_primitive(lambda v: tp.matvec(m, v), x)
        xs = rng.normal(size=(4, 6, 3))
        check_primitive(lambda v: tp.rotate_many(v, xs), m)
        check_primitive(lambda v: tp.rotate_many(m, v), xs)

    def test_reductions_slices(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(4, 7))
        check_primitive(tp.sum_last, a)
        check_primitive(lambda x: tp.slice_last(x, slice(2, 5)), a)
        check_primitive(lambda x: tp.take_last(x, [0, 3, 6]), a)
        m = rng.normal(size=(4, 5, 5))
        check_primitive(lambda x: tp.slice_block(x, slice(1, 4), slice(0, 2)), m)

    def test_where_lanes(self):
        rng = np.random.default_rng(5)
        mask = np.array([True, False, True, False])
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=(4, 3))
        check_primitive(lambda x: tp.where_lanes(mask, a, x), b)
        check_primitive(lambda x: tp.where_lanes(mask, x, b), a)


class TestNonlinear:
    def test_relu_softplus(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(40,)) * 3.0
        a = a[np.abs(a) > 1e-3]  # keep away from the relu kink for FD
        check_primitive(tp.relu, a)
        check_primitive(tp.softplus, a)
        check_primitive(tp.softplus, np.array([35.0, -35.0, 0.0]))

    def test_coefficient_unaries(self):
        s = np.array([1e-12, 1e-6, 5e-3, 9.9e-3, 1.1e-2, 0.5, 4.0])
        check_primitive(tp.coeff_sin, s, step=1e-7)
        check_primitive(tp.coeff_cos, s, step=1e-7)
        check_primitive(tp.coeff_j, s, step=1e-7)


class TestStructural:
    def test_skew(self):
        rng = np.random.default_rng(7)
        check_primitive(tp.skew, rng.normal(size=(5, 3)))
        check_primitive(tp.skew, rng.normal(size=(5, 4, 3)))

    def test_so3_exp_right_jacobian_rule(self):
        rng = np.random.default_rng(8)
        for scale in (1e-6, 1e-2, 0.4, 2.0):
            w = rng.normal(size=(3, 3))
            w *= scale / np.linalg.norm(w, axis=-1, keepdims=True)
            c = rng.normal(size=(3, 3, 3))
            check_primitive(lambda x: tp.mul(tp.so3_exp(x), c), w, step=1e-6, rtol=1e-5)

    def test_build_lower3(self):
        rng = np.random.default_rng(9)
        d = rng.normal(size=(4, 3))
        o = rng.normal(size=(4, 3))
        check_primitive(lambda x: tp.build_lower3(x, o), d)
        check_primitive(lambda x: tp.build_lower3(d, x), o)

    def test_assemble(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 3, 3))
        y = rng.normal(size=(2, 4, 3, 3))  # stacked blocks
        base = np.eye(9)

        def build(v):
            t = v.tape if isinstance(v, tp.Var) else None
            items = [(0, 3, v, None), (3, 0, y, 1), (6, 6, v, None)]
            return tp.assemble((2,), 9, 9, items, base=base)

        check_primitive(build, x)

        def build_y(v):
            items = [(0, 0, x, None), (3, 3, v, 0), (6, 6, v, 3)]
            return tp.assemble((2,), 9, 9, items)

        check_primitive(build_y, y)

    def test_assemble_untaped(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 3, 3))
        out = tp.assemble((2,), 6, 6, [(0, 0, x, None)], base=np.eye(6))
        assert isinstance(out, np.ndarray)
        assert np.allclose(out[:, :3, :3], x)
        assert np.allclose(out[:, 3:, 3:], np.broadcast_to(np.eye(3), (2, 3, 3)))


def random_spd(rng, b, n, scale=1.0):
    m = rng.normal(size=(b, n, n))
    return m @ np.swapaxes(m, -1, -2) + n * scale * np.broadcast_to(np.eye(n), (b, n, n))


class TestLinearAlgebra:
    def test_tri_solves(self):
        rng = np.random.default_rng(12)
        a = random_spd(rng, 3, 6)
        l = np.linalg.cholesky(a)
        b = rng.normal(size=(3, 6, 4))
        y = tp._tri_solve_lower(l, b)
        assert np.allclose(l @ y, b, atol=1e-10)
        x = tp._tri_solve_upper(np.swapaxes(l, -1, -2), b)
        assert np.allclose(np.swapaxes(l, -1, -2) @ x, b, atol=1e-10)
        x2 = tp.chol_solve_with_factor(l, b)
        assert np.allclose(a @ x2, b, atol=1e-9)

    def test_spd_solve_forward(self):
        rng = np.random.default_rng(13)
        s = random_spd(rng, 4, 5)
        b = rng.normal(size=(4, 5, 3))
        x = tp.spd_solve(s, b)
        assert np.allclose(s @ x, b, atol=1e-9)

    def test_spd_solve_gradients(self):
        rng = np.random.default_rng(14)
        m0 = rng.normal(size=(2, 5, 5))
        b = rng.normal(size=(2, 5, 3))

        def build_s(v):
            # SPD construction so FD perturbations stay in the SPD cone
            s = tp.add(tp.matmul(v, tp.transpose(v)), 5.0 * np.eye(5))
            return tp.spd_solve(s, b)

        check_primitive(build_s, m0, step=1e-6, rtol=1e-5)

        s_fixed = random_spd(rng, 2, 5)
        check_primitive(lambda v: tp.spd_solve(s_fixed, v), b, rtol=1e-6)

    def test_cholesky_forward_and_gradient(self):
        rng = np.random.default_rng(15)
        m0 = rng.normal(size=(2, 4, 4))

        def build(v):
            a = tp.add(tp.matmul(v, tp.transpose(v)), 4.0 * np.eye(4))
            l = tp.cholesky(a)
            return tp.mul(l, rng2_c)

        rng2_c = np.random.default_rng(99).normal(size=(2, 4, 4))
        check_primitive(build, m0, step=1e-6, rtol=1e-5)

    def test_symmetrize(self):
        rng = np.random.default_rng(16)
        a = rng.normal(size=(3, 4, 4))
        check_primitive(tp.symmetrize, a)
        out = tp.symmetrize(a)
        assert np.allclose(out, 0.5 * (a + np.swapaxes(a, -1, -2)))


class TestTapeMechanics:
    def test_untaped_dispatch_returns_ndarray(self):
        a = np.ones((2, 3, 3))
        out = tp.matmul(a, a)
        assert isinstance(out, np.ndarray)

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(17)
        x0 = rng.normal(size=(4, 4))
        t = tp.Tape()
        x = t.leaf(x0)
        y = tp.total(tp.mul(tp.matmul(x, x0), x))
        (g1,) = t.grad(y, [x])
        (g2,) = t.grad(y, [x], seed=np.asarray(2.0))
        assert np.array_equal(2.0 * g1, g2)

    def test_backward_deterministic(self):
        rng = np.random.default_rng(18)
        x0 = rng.normal(size=(6, 6))
        t = tp.Tape()
        x = t.leaf(x0)
        s = tp.add(tp.matmul(x, tp.transpose(x)), 6.0 * np.eye(6))
        y = tp.total(tp.spd_solve(s, np.eye(6)))
        (g1,) = t.grad(y, [x])
        (g2,) = t.grad(y, [x])
        assert np.array_equal(g1, g2)

    def test_unused_leaf_gets_zeros(self):
        t = tp.Tape()
        x = t.leaf(np.ones(3))
        z = t.leaf(np.ones(2))
        y = tp.total(tp.mul(x, x))
        gx, gz = t.grad(y, [x, z])
        assert np.allclose(gx, 2.0)
        assert np.array_equal(gz, np.zeros(2))

    def test_gradient_overflow_error_names_node(self):
        t = tp.Tape()
        x = t.leaf(np.array([1.0, np.inf]))
        y = tp.total(tp.mul(x, x))
        with pytest.raises(tp.GradientOverflowError) as exc:
            t.backward(y, check_finite=True)
        assert exc.value.node_id >= 0

    def test_tape_released_after_backward(self):
        import gc
        import weakref

        refs = []
        counts = []
        for _ in range(4):
            t = tp.Tape()
            x = t.leaf(np.ones((8, 8)))
            y = tp.total(tp.matmul(x, x))
            t.grad(y, [x])
            counts.append(len(t))
            refs.append(weakref.ref(t))
            del t, x, y
        gc.collect()
        assert all(r() is None for r in refs), "tapes must be collectable"
        assert len(set(counts)) == 1, "node count must not grow across iterations"

    def test_so3_exp_matches_liegroup(self):
        rng = np.random.default_rng(19)
        w = rng.normal(size=(5, 3))
        t = tp.Tape()
        out = tp.so3_exp(t.leaf(w))
        assert np.array_equal(out.value, lg.so3_exp(w))
