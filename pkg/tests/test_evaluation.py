import numpy as np
import pytest
from scipy import stats

from contact_inekf import evaluation as ev
from contact_inekf import filter as flt
from contact_inekf import liegroup as lg
from contact_inekf import robot as rb
from contact_inekf import sim as sm


@pytest.fixture(scope="module")
def biped():
    return rb.desk_biped()


@pytest.fixture(scope="module")
def noise():
    return flt.NoiseParams()


def random_pair(rng, n=100, with_cov=False):
    t = np.arange(n) / 200.0
    r_gt = lg.so3_exp(np.cumsum(rng.normal(scale=0.01, size=(n, 3)), axis=0))
    v_gt = rng.normal(size=(n, 3))
    p_gt = np.cumsum(v_gt, axis=0) / 200.0
    r_est = np.einsum("tij,tjk->tik", r_gt,
                      lg.so3_exp(rng.normal(scale=0.02, size=(n, 3))))
    v_est = v_gt + rng.normal(scale=0.05, size=(n, 3))
    p_est = p_gt + rng.normal(scale=0.02, size=(n, 3))
    p_core = None
    if with_cov:
        m = rng.normal(size=(n, 9, 9))
        p_core = 0.01 * (m @ np.swapaxes(m, -1, -2)) + 0.01 * np.eye(9)
    return ev.TrajectoryPair(t, r_est, v_est, p_est, r_gt, v_gt, p_gt, p_core)


class TestAte:
    def test_perfect_estimate_gives_zeros(self):
        rng = np.random.default_rng(0)
        pair = random_pair(rng)
        perfect = ev.TrajectoryPair(pair.t, pair.r_gt, pair.v_gt, pair.p_gt,
                                    pair.r_gt, pair.v_gt, pair.p_gt)
        rep = ev.ate(perfect)
        for q in (rep.velocity, rep.position, rep.orientation):
            assert q["rmse"] < 1e-12
            assert q["mae"] < 1e-12

    def test_constant_body_velocity_offset(self):
        n = 50
        t = np.arange(n) / 100.0
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        v_gt = np.tile([0.3, -0.2, 0.1], (n, 1))
        v_est = v_gt + np.array([0.1, 0.0, 0.0])
        p = np.zeros((n, 3))
        pair = ev.TrajectoryPair(t, eye, v_est, p, eye, v_gt, p)
        rep = ev.ate(pair)
        assert abs(rep.velocity["rmse"] - 0.1) < 1e-12
        assert abs(rep.velocity["mae"] - 0.1) < 1e-12
        assert abs(rep.velocity["med"] - 0.1) < 1e-12
        assert rep.velocity["std"] < 1e-12

    def test_matches_independent_statistics_oracle(self):
        # 20-line oracle: align yaw+translation at t=0, take plain numpy stats
        rng = np.random.default_rng(1)
        pair = random_pair(rng)
        rep = ev.ate(pair)

        def yaw_of(r):
            return np.arctan2(r[1, 0], r[0, 0])

        psi = yaw_of(pair.r_est[0]) - yaw_of(pair.r_gt[0])
        c, s = np.cos(psi), np.sin(psi)
        rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        tau = pair.p_est[0] - rz @ pair.p_gt[0]
        errs_v, errs_p, errs_r = [], [], []
        for k in range(len(pair.t)):
            r_gt = rz @ pair.r_gt[k]
            errs_v.append(np.linalg.norm(
                pair.r_est[k].T @ pair.v_est[k] - r_gt.T @ (rz @ pair.v_gt[k])))
            errs_p.append(np.linalg.norm(
                pair.p_est[k] - (rz @ pair.p_gt[k] + tau)))
            errs_r.append(np.linalg.norm(lg.so3_log(r_gt.T @ pair.r_est[k])))
        for got, errs in ((rep.velocity, errs_v), (rep.position, errs_p),
                          (rep.orientation, errs_r)):
            e = np.asarray(errs)
            assert abs(got["rmse"] - np.sqrt(np.mean(e**2))) < 1e-12
            assert abs(got["mae"] - np.mean(e)) < 1e-12
            assert abs(got["med"] - np.median(e)) < 1e-12
            assert abs(got["std"] - np.std(e)) < 1e-12

    def test_invariant_to_common_rigid_transform(self):
        rng = np.random.default_rng(2)
        pair = random_pair(rng)
        rep0 = ev.ate(pair)
        rz = lg.so3_exp([0.0, 0.0, 0.9])
        tau = np.array([5.0, -2.0, 1.0])
        moved = ev.TrajectoryPair(
            pair.t,
            np.einsum("ij,tjk->tik", rz, pair.r_est), pair.v_est @ rz.T,
            pair.p_est @ rz.T + tau,
            np.einsum("ij,tjk->tik", rz, pair.r_gt), pair.v_gt @ rz.T,
            pair.p_gt @ rz.T + tau,
        )
        rep1 = ev.ate(moved)
        for q0, q1 in ((rep0.velocity, rep1.velocity),
                       (rep0.position, rep1.position),
                       (rep0.orientation, rep1.orientation)):
            for key in ("rmse", "mae", "med", "std"):
                assert abs(q0[key] - q1[key]) < 1e-10

    def test_rmse_decomposition(self):
        rng = np.random.default_rng(3)
        rep = ev.ate(random_pair(rng))
        for q in (rep.velocity, rep.position, rep.orientation):
            assert abs(q["rmse"] ** 2 - (q["mae"] ** 2 + q["std"] ** 2)) < 1e-10
            assert q["rmse"] >= 0

    def test_length_mismatch_raises(self):
        rng = np.random.default_rng(4)
        pair = random_pair(rng)
        with pytest.raises(ValueError):
            ev.TrajectoryPair(pair.t, pair.r_est[:-1], pair.v_est, pair.p_est,
                              pair.r_gt, pair.v_gt, pair.p_gt)


class TestChi2Interval:
    def test_paper_values_dim9(self):
        r1, r2 = ev.chi2_interval(9, 0.95)
        assert abs(r1 - 2.70) < 5e-3
        assert abs(r2 - 19.02) < 5e-3

    def test_paper_values_dim3(self):
        r1, r2 = ev.chi2_interval(3, 0.95)
        assert abs(r1 - 0.216) < 5e-3
        assert abs(r2 - 9.348) < 5e-3

    def test_matches_scipy_ppf_oracle(self):
        for dim in range(1, 13):
            for conf in (0.9, 0.95, 0.99):
                r1, r2 = ev.chi2_interval(dim, conf)
                a = (1 - conf) / 2
                assert abs(r1 - stats.chi2.ppf(a, dim)) < 1e-6
                assert abs(r2 - stats.chi2.ppf(1 - a, dim)) < 1e-6

    def test_invalid_confidence(self):
        with pytest.raises(ValueError):
            ev.chi2_interval(3, 1.0)


class TestNees:
    def test_gaussian_calibration_monte_carlo(self):
        # x ~ N(0, P) must land inside the 95% bounds 93..97% of the time
        rng = np.random.default_rng(5)
        dim = 9
        m = rng.normal(size=(dim, dim))
        p = m @ m.T + np.eye(dim)
        l_chol = np.linalg.cholesky(p)
        x = rng.normal(size=(100_000, dim)) @ l_chol.T
        eps = np.einsum("ki,ki->k", x, np.linalg.solve(p, x.T).T)
        r1, r2 = ev.chi2_interval(dim, 0.95)
        frac = np.mean((eps >= r1) & (eps <= r2))
        assert 0.93 <= frac <= 0.97

    def test_nees_on_consistent_pair(self):
        # estimate perturbed by exactly N(0, P) in the right-invariant frame
        rng = np.random.default_rng(6)
        n = 4000
        r_gt = lg.so3_exp(rng.normal(scale=0.5, size=(n, 3)))
        v_gt = rng.normal(size=(n, 3))
        p_gt = rng.normal(size=(n, 3))
        p_core = np.broadcast_to(np.diag([1e-4] * 3 + [1e-3] * 3 + [1e-2] * 3),
                                 (n, 9, 9)).copy()
        xi = rng.normal(size=(n, 9)) * np.sqrt(np.diagonal(p_core, axis1=1, axis2=2))
        r_est = np.empty_like(r_gt)
        v_est = np.empty_like(v_gt)
        p_est = np.empty_like(p_gt)
        for k in range(n):
            e = lg.so3_exp(xi[k, :3])
            jl = lg.left_jacobian(xi[k, :3])
            r_est[k] = e @ r_gt[k]
            v_est[k] = e @ v_gt[k] + jl @ xi[k, 3:6]
            p_est[k] = e @ p_gt[k] + jl @ xi[k, 6:9]
        pair = ev.TrajectoryPair(np.arange(n) / 200.0, r_est, v_est, p_est,
                                 r_gt, v_gt, p_gt, p_core)
        _, (r1, r2), frac, skipped = ev.nees(pair, "core")
        assert skipped == 0
        assert 0.92 <= frac <= 0.98
        for sel in ("velocity", "position", "orientation"):
            _, _, f, _ = ev.nees(pair, sel)
            assert 0.92 <= f <= 0.98

    def test_singular_block_skipped(self):
        rng = np.random.default_rng(7)
        pair = random_pair(rng, n=10, with_cov=True)
        pair.p_core[3] = 0.0
        _, _, _, skipped = ev.nees(pair, "core")
        assert skipped == 1

    def test_requires_covariance(self):
        rng = np.random.default_rng(8)
        with pytest.raises(ValueError):
            ev.nees(random_pair(rng), "core")


class TestBaselines:
    def test_golden_gt_baseline(self, noise):
        gmodel = sm.golden_model()
        ep = sm.generate_episode(gmodel, sm.golden_config(duration=4.0))
        rmse = ev.velocity_rmse(ep, gmodel, noise,
                                ev.baseline_covariances("gt-contacts", gmodel, noise))
        assert rmse < 1e-3

    def test_slip_hurts_heuristic_more_than_gt(self, biped, noise):
        # fast forced slips: the GT rule unflags them while the heuristic's
        # own drifting estimate keeps trusting
        from dataclasses import replace

        eps = []
        for s in range(3):
            cfg = sm.noisy_config(seed=300 + s, duration=8.0)
            cfg = replace(cfg, slip=sm.SlipParams(probability=1.0,
                                                  speed_range=(0.3, 0.7)),
                          friction_range=(0.3, 0.3))
            eps.append(sm.generate_episode(biped, cfg))
        gt = ev.velocity_rmse(eps, biped, noise,
                              ev.baseline_covariances("gt-contacts", biped, noise))
        heur = ev.velocity_rmse(eps, biped, noise,
                                ev.baseline_covariances("heuristic-contacts",
                                                        biped, noise))
        assert heur > gt  # sign of the inequality only

    def test_slip_inflation_helps(self, biped, noise):
        from dataclasses import replace

        cfg = sm.noisy_config(seed=42, duration=6.0)
        cfg = replace(cfg, slip=sm.SlipParams(probability=0.9, speed_range=(0.2, 0.6)))
        ep = sm.generate_episode(biped, cfg)
        gt = ev.velocity_rmse(ep, biped, noise,
                              ev.baseline_covariances("gt-contacts", biped, noise))
        infl = ev.velocity_rmse(ep, biped, noise,
                                ev.baseline_covariances("gt-contacts-slip",
                                                        biped, noise))
        assert infl < gt

    def test_all_free_matches_dead_reckoning(self, biped, noise):
        ep = sm.generate_episode(biped, sm.noisy_config(seed=9, duration=1.0))
        res, batch = ev.run_filter(ep, biped, noise,
                                   ev.baseline_covariances("dead-reckoning",
                                                           biped, noise))
        # manual IMU integration of the measured stream
        g = noise.g
        dt = ep.dt
        r, v, p = ep.r[0].copy(), ep.v[0].copy(), ep.p[0].copy()
        for k in range(1, ep.n_steps):
            aw = r @ ep.a[k] + g
            p = p + v * dt + 0.5 * aw * dt * dt
            v = v + aw * dt
            r = r @ lg.so3_exp(ep.w[k] * dt)
        assert np.max(np.abs(res.v[-1, 0] - v)) < 1e-6
        assert np.max(np.abs(res.p[-1, 0] - p)) < 1e-6

    def test_unknown_baseline_rejected(self, biped, noise):
        with pytest.raises(ValueError):
            ev.baseline_covariances("oracle", biped, noise)

    def test_batched_replay_matches_individual(self, biped, noise):
        eps = [sm.generate_episode(biped, sm.noisy_config(seed=s, duration=1.0))
               for s in (20, 21)]
        src = ev.baseline_covariances("gt-contacts", biped, noise)
        res_b, batch = ev.run_filter(eps, biped, noise, src, collect_cov=True)
        for i, ep in enumerate(eps):
            res_i, batch_i = ev.run_filter(ep, biped, noise, src, collect_cov=True)
            assert np.allclose(res_b.v[:, i], res_i.v[:, 0], atol=1e-12)
            assert np.allclose(res_b.p_core[:, i], res_i.p_core[:, 0], atol=1e-12)
