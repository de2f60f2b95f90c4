import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from contact_inekf import liegroup as lg


def exp_series_oracle(w, terms=40):
    """Independent long matrix exponential series in extended precision."""
    k = np.zeros((3, 3), dtype=np.longdouble)
    k[0, 1], k[0, 2] = -w[2], w[1]
    k[1, 0], k[1, 2] = w[2], -w[0]
    k[2, 0], k[2, 1] = -w[1], w[0]
    acc = np.eye(3, dtype=np.longdouble)
    term = np.eye(3, dtype=np.longdouble)
    for n in range(1, terms + 1):
        term = term @ k / np.longdouble(n)
        acc = acc + term
    return acc


def left_jacobian_series_oracle(w, terms=40):
    """J_l = sum_k K^k / (k+1)! computed independently."""
    k = np.zeros((3, 3), dtype=np.longdouble)
    k[0, 1], k[0, 2] = -w[2], w[1]
    k[1, 0], k[1, 2] = w[2], -w[0]
    k[2, 0], k[2, 1] = -w[1], w[0]
    acc = np.eye(3, dtype=np.longdouble)
    term = np.eye(3, dtype=np.longdouble)
    for n in range(1, terms + 1):
        term = term @ k / np.longdouble(n + 1)
        acc = acc + term
    return acc


class TestSo3Exp:
    def test_zero_gives_identity(self):
        assert np.array_equal(lg.so3_exp(np.zeros(3)), np.eye(3))

    def test_quarter_turn_about_z(self):
        r = lg.so3_exp([0.0, 0.0, np.pi / 2])
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        assert np.allclose(r, expected, atol=1e-15)

    def test_tiny_angle_matches_series_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            w = rng.normal(size=3)
            w *= 1e-10 / np.linalg.norm(w)
            r = lg.so3_exp(w)
            oracle = exp_series_oracle(w)
            assert np.max(np.abs(r - oracle.astype(float))) < 1e-18
            assert np.max(np.abs(r - (np.eye(3) + lg.skew(w)))) < 1e-18

    def test_matches_series_oracle_generic(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            w = rng.normal(size=3)
            r = lg.so3_exp(w)
            assert np.max(np.abs(r - exp_series_oracle(w).astype(float))) < 1e-13

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_output_is_rotation(self, seed):
        w = np.random.default_rng(seed).normal(scale=2.0, size=3)
        r = lg.so3_exp(w)
        assert np.max(np.abs(r @ r.T - np.eye(3))) < 1e-12
        assert abs(np.linalg.det(r) - 1.0) < 1e-12

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(11)
        ws = rng.normal(size=(17, 3))
        batched = lg.so3_exp(ws)
        for i, w in enumerate(ws):
            assert np.array_equal(batched[i], lg.so3_exp(w))


class TestSo3Log:
    def test_identity(self):
        assert np.allclose(lg.so3_log(np.eye(3)), np.zeros(3), atol=1e-15)

    def test_round_trip_1000_random(self):
        rng = np.random.default_rng(42)
        v = rng.normal(size=(1000, 3))
        norms = np.linalg.norm(v, axis=-1, keepdims=True)
        scales = rng.uniform(1e-6, np.pi - 1e-3, size=(1000, 1))
        v = v / norms * scales
        back = lg.so3_log(lg.so3_exp(v))
        assert np.max(np.linalg.norm(back - v, axis=-1)) < 1e-9

    def test_pi_rotation_about_x(self):
        w = lg.so3_log(np.diag([1.0, -1.0, -1.0]))
        assert np.allclose(np.abs(w), [np.pi, 0.0, 0.0], atol=1e-12)

    def test_near_pi_round_trip(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            w = axis * (np.pi - 1e-5)
            back = lg.so3_log(lg.so3_exp(w))
            assert np.linalg.norm(back - w) < 1e-7


class TestLeftJacobian:
    def test_matches_series_oracle(self):
        rng = np.random.default_rng(9)
        for scale in (1e-9, 1e-4, 0.09, 0.5, 2.5):
            w = rng.normal(size=3)
            w *= scale / np.linalg.norm(w)
            jl = lg.left_jacobian(w)
            assert np.max(np.abs(jl - left_jacobian_series_oracle(w).astype(float))) < 1e-13

    def test_inverse_consistency(self):
        rng = np.random.default_rng(13)
        for _ in range(30):
            w = rng.normal(size=3)
            prod = lg.left_jacobian(w) @ lg.left_jacobian_inv(w)
            assert np.max(np.abs(prod - np.eye(3))) < 1e-10


def random_state(rng, n=3):
    r = lg.so3_exp(rng.normal(size=3))
    v = rng.normal(size=3)
    p = rng.normal(size=3)
    pc = rng.normal(size=(n, 3))
    bg = rng.normal(scale=0.01, size=3)
    ba = rng.normal(scale=0.01, size=3)
    return r, v, p, pc, bg, ba


class TestStateRetract:
    def test_zero_delta_is_exact_identity(self):
        rng = np.random.default_rng(1)
        state = random_state(rng)
        lay = lg.TangentLayout(3)
        out = lg.state_retract(*state, np.zeros(lay.dim))
        for a, b in zip(out, state):
            assert np.array_equal(a, b)

    def test_zero_rotation_is_additive(self):
        rng = np.random.default_rng(2)
        r, v, p, pc, bg, ba = random_state(rng)
        lay = lg.TangentLayout(3)
        delta = rng.normal(size=lay.dim)
        delta[lay.theta] = 0.0
        r2, v2, p2, pc2, bg2, ba2 = lg.state_retract(r, v, p, pc, bg, ba, delta)
        assert np.array_equal(r2, r)
        assert np.allclose(v2, v + delta[lay.vel], atol=1e-15)
        assert np.allclose(p2, p + delta[lay.pos], atol=1e-15)
        assert np.allclose(pc2, pc + delta[lay.contacts].reshape(3, 3), atol=1e-15)
        assert np.allclose(bg2, bg + delta[lay.gyro_bias], atol=1e-15)
        assert np.allclose(ba2, ba + delta[lay.accel_bias], atol=1e-15)

    def test_first_order_consistency(self):
        # retract(x, d) - (x + linearized d) must be O(||d||^2).
        rng = np.random.default_rng(3)
        r, v, p, pc, bg, ba = random_state(rng)
        lay = lg.TangentLayout(3)
        eps = 1e-6
        delta = rng.normal(size=lay.dim)
        delta *= eps / np.linalg.norm(delta)
        r2, v2, p2, pc2, bg2, ba2 = lg.state_retract(r, v, p, pc, bg, ba, delta)
        dth = delta[lay.theta]
        assert np.max(np.abs(r2 - (np.eye(3) + lg.skew(dth)) @ r)) < 10 * eps**2
        assert np.max(np.abs(v2 - (v + np.cross(dth, v) + delta[lay.vel]))) < 10 * eps**2
        assert np.max(np.abs(p2 - (p + np.cross(dth, p) + delta[lay.pos]))) < 10 * eps**2
        for i in range(3):
            lin = pc[i] + np.cross(dth, pc[i]) + delta[lay.contact(i)]
            assert np.max(np.abs(pc2[i] - lin)) < 10 * eps**2

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_group_action_first_order(self, seed):
        # Composition of two small retractions equals one retraction by the
        # summed twist up to the BCH commutator, O(||d||^2) <= 1e-7.
        rng = np.random.default_rng(seed)
        r, v, p, pc, bg, ba = random_state(rng)
        lay = lg.TangentLayout(3)
        d1 = rng.normal(size=lay.dim)
        d2 = rng.normal(size=lay.dim)
        d1 *= 1e-4 / np.linalg.norm(d1)
        d2 *= 1e-4 / np.linalg.norm(d2)
        step = lg.state_retract(*lg.state_retract(r, v, p, pc, bg, ba, d1), d2)
        combined = lg.state_retract(r, v, p, pc, bg, ba, d1 + d2)
        x_step = lg.embed_group(step[0], step[1], step[2], step[3])
        x_comb = lg.embed_group(combined[0], combined[1], combined[2], combined[3])
        assert np.max(np.abs(x_step - x_comb)) < 1e-7


class TestAdjointAndErrorLog:
    def test_adjoint_matches_conjugation(self):
        rng = np.random.default_rng(8)
        r, v, p, pc, _, _ = random_state(rng)
        x = lg.embed_group(r, v, p, pc)
        lay = lg.TangentLayout(3)
        ad = lg.augmented_adjoint(r, v, p, pc)
        for _ in range(5):
            xi = rng.normal(size=9 + 9)
            xi_hat = np.zeros((8, 8))
            xi_hat[:3, :3] = lg.skew(xi[:3])
            xi_hat[:3, 3] = xi[3:6]
            xi_hat[:3, 4] = xi[6:9]
            for i in range(3):
                xi_hat[:3, 5 + i] = xi[9 + 3 * i : 12 + 3 * i]
            conj = x @ xi_hat @ np.linalg.inv(x)
            mapped = ad[: lay.dim - 6, : lay.dim - 6] @ xi
            assert np.allclose(conj[:3, :3], lg.skew(mapped[:3]), atol=1e-10)
            assert np.allclose(conj[:3, 3], mapped[3:6], atol=1e-10)
            assert np.allclose(conj[:3, 4], mapped[6:9], atol=1e-10)

    def test_right_error_log_round_trip(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            r, v, p, pc, bg, ba = random_state(rng)
            lay = lg.TangentLayout(3)
            delta = rng.normal(scale=0.1, size=lay.dim)
            delta[lay.contacts] = 0.0
            delta[lay.gyro_bias] = 0.0
            delta[lay.accel_bias] = 0.0
            est = lg.state_retract(r, v, p, pc, bg, ba, delta)
            xi = lg.right_error_log(est[0], est[1], est[2], r, v, p)
            assert np.allclose(xi, delta[:9], atol=1e-10)


class TestQuaternions:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=3)
        if rng.uniform() < 0.3:
            w = w / np.linalg.norm(w) * rng.uniform(np.pi - 1e-3, np.pi)
        r = lg.so3_exp(w)
        back = lg.quat_to_rot(lg.rot_to_quat(r))
        assert np.max(np.abs(back - r)) < 1e-12

    def test_identity(self):
        assert np.allclose(lg.rot_to_quat(np.eye(3)), [1, 0, 0, 0], atol=1e-15)


class TestTangentLayout:
    def test_dims_and_slices(self):
        lay = lg.TangentLayout(4)
        assert lay.dim == 27
        assert lay.contact(0) == slice(9, 12)
        assert lay.contact(3) == slice(18, 21)
        assert lay.gyro_bias == slice(21, 24)
        assert lay.accel_bias == slice(24, 27)
        with pytest.raises(IndexError):
            lay.contact(4)
        with pytest.raises(ValueError):
            lg.TangentLayout(0)
