"""Deterministic synthetic data generator for the desk-scale legged robot.

Replaces physics rollouts with scripted, kinematically exact motion:

- ``gait``: alternating single-support walking.  The stance foot pose is
  frozen in the world (optionally drifting when a slip is injected) and the
  base orientation is *derived* from the closed stance chain, so stance
  candidates are exactly stationary and the base pitches and rolls the way a
  3-DOF-leg machine must.  Velocity kicks model disturbances.
- ``ground``: scripted base-pose keyframes (stand / crouch / lean / kneel /
  sit) with world-fixed feet; body-link candidates rest near the floor during
  holds.

IMU and encoder streams are synthesized so that the discrete dead-reckoning
recursions reproduce the ground truth exactly (before noise), and candidate
positions always satisfy ``pc = p + R h(q)``.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import liegroup as lg

CONTACT_XY_SPEED = 0.25  # m/s, ground-truth contact rule
CONTACT_HEIGHT = 0.01  # m


class GenerationError(RuntimeError):
    """Episode synthesis failed (typically an unreachable foothold)."""

    def __init__(self, msg, step=None, foothold=None):
        detail = msg
        if step is not None:
            detail += f" at step {step}"
        if foothold is not None:
            detail += f" (foothold {foothold!r})"
        super().__init__(detail)
        self.step = step
        self.foothold = foothold


def ground_truth_contact(v_xy, h):
    """True contact label: xy-speed <= 0.25 m/s AND height <= 0.01 m."""
    return (np.asarray(v_xy) <= CONTACT_XY_SPEED) & (np.asarray(h) <= CONTACT_HEIGHT)


@dataclass
class GaitParams:
    step_length: float = 0.035  # base excursion amplitude per step
    step_height: float = 0.04  # swing foot lift
    duty: float = 0.4  # fraction of each step period spent in double-support dwell
    period: float = 0.7  # s per single step
    sway: float = 0.02  # lateral base amplitude
    walk_height: float = 0.41
    pin_both: bool = False  # keep both ankles pinned (no replants); the free
    # leg holds its ankle by IK while its foot pivots


@dataclass
class SlipParams:
    probability: float = 0.0  # per-stance slip probability at the lowest friction
    speed_range: tuple = (0.05, 0.5)  # m/s, uniform


@dataclass
class DisturbanceParams:
    kick_speed: float = 0.0  # max |dv| of velocity kicks, m/s
    period: float = 0.0  # s between kicks; 0 disables
    duration: float = 0.1  # smoothing window of each kick


@dataclass
class SimConfig:
    duration: float = 10.0
    rate: float = 200.0
    scenario: str = "gait"
    gait: GaitParams = field(default_factory=GaitParams)
    slip: SlipParams = field(default_factory=SlipParams)
    friction_range: tuple = (0.3, 1.0)
    disturbance: DisturbanceParams = field(default_factory=DisturbanceParams)
    sigma_g: float = 0.0  # white noise densities; 0 = noise-free
    sigma_a: float = 0.0
    sigma_bg: float = 0.0
    sigma_ba: float = 0.0
    sigma_q: float = 0.0
    bias_init_g: float = 0.0  # initial bias drawn U(+-range)
    bias_init_a: float = 0.0
    gravity: tuple = (0.0, 0.0, -9.81)
    seed: int = 0

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if not 0.0 < self.gait.duty < 1.0:
            raise ValueError("duty cycle must lie in (0, 1)")
        if not 0.0 <= self.slip.probability <= 1.0:
            raise ValueError("slip probability must lie in [0, 1]")

    @property
    def dt(self) -> float:
        return 1.0 / self.rate

    @property
    def n_steps(self) -> int:
        return int(round(self.duration * self.rate)) + 1


def noisy_config(seed=0, scenario="gait", slip_probability=0.6, kick_speed=0.2,
                 duration=10.0, **kw) -> SimConfig:
    """Standard randomized config: IMU/encoder noise, slip, disturbances."""
    return SimConfig(
        duration=duration, scenario=scenario, seed=seed,
        slip=SlipParams(probability=slip_probability),
        disturbance=DisturbanceParams(kick_speed=kick_speed, period=1.7),
        sigma_g=2e-4, sigma_a=2e-3, sigma_bg=1e-5, sigma_ba=5e-5, sigma_q=1e-3,
        bias_init_g=0.002, bias_init_a=0.01, **kw,
    )


def static_config(seed=0, duration=10.0, noise=False) -> SimConfig:
    """Zero gait amplitude: the robot stands still."""
    cfg = SimConfig(duration=duration, seed=seed,
                    gait=GaitParams(step_length=0.0, step_height=0.0, sway=0.0))
    if noise:
        cfg = replace(cfg, sigma_g=2e-4, sigma_a=2e-3, sigma_bg=1e-5,
                      sigma_ba=5e-5, sigma_q=1e-3, bias_init_g=0.002,
                      bias_init_a=0.01)
    return cfg


def golden_config(seed=0, duration=10.0) -> SimConfig:
    """Noise-free, slip-free moving fixture: base excursions over two pinned
    ankles, so every candidate of :func:`golden_model` is exactly stationary."""
    return SimConfig(duration=duration, seed=seed,
                     gait=GaitParams(pin_both=True, step_length=0.02, sway=0.0))


def golden_model():
    """Desk biped with one ankle-point candidate per foot (N=2).

    Under the pinned-ankle fixture these points are exactly stationary, which
    is what the ground-truth-contact golden tolerance requires; the heel/toe
    default set keeps the realistic landing transients instead.
    """
    from .robot import CandidatePoint, desk_biped

    return desk_biped(candidates=[
        CandidatePoint("foot_l", (0.0, 0.0, -0.02), 0),
        CandidatePoint("foot_r", (0.0, 0.0, -0.02), 1),
    ])


@dataclass
class EpisodeDataset:
    """Time-aligned ground truth, measured sensor streams, and labels."""

    t: np.ndarray  # (T,)
    r: np.ndarray  # (T, 3, 3) ground-truth base orientation
    v: np.ndarray  # (T, 3) world velocity
    p: np.ndarray  # (T, 3) world position
    pc: np.ndarray  # (T, N, 3) candidate world positions
    w: np.ndarray  # (T, 3) measured gyro (interval t_{k-1}..t_k)
    a: np.ndarray  # (T, 3) measured accelerometer
    q: np.ndarray  # (T, nq) measured joints
    qd: np.ndarray  # (T, nq) measured joint rates
    tau: np.ndarray  # (T, nq) actuator torques (feature channel)
    contact: np.ndarray  # (T, N) bool, thresholded ground truth
    slip: np.ndarray  # (T, N) injected slip speed, m/s

    @property
    def n_steps(self):
        return len(self.t)

    @property
    def n_contacts(self):
        return self.pc.shape[1]

    @property
    def dt(self):
        return float(self.t[1] - self.t[0])

    def consistency_residual(self, model) -> float:
        """max_k,i | h_i(q_k) - R_k^T (pc_ki - p_k) |; ~1e-9 for noise-free q."""
        h = model.fk_all(self.q)
        rel = np.einsum("tji,tnj->tni", self.r, self.pc - self.p[:, None, :])
        return float(np.max(np.abs(h - rel)))

    def manifest(self) -> dict:
        return {
            "format": "episode/1",
            "steps": int(self.n_steps),
            "rate": float(round(1.0 / self.dt, 9)),
            "n_candidates": int(self.n_contacts),
            "nq": int(self.q.shape[1]),
            "fields": ["t", "gt.R", "gt.v", "gt.p", "gt.pc", "imu.w", "imu.a",
                       "q", "qd", "tau", "contact", "slip"],
        }

    def to_jsonl(self) -> str:
        quat = lg.rot_to_quat(self.r)
        buf = io.StringIO()
        for k in range(self.n_steps):
            rec = {
                "t": _f(self.t[k]),
                "gt": {
                    "R": [_f(x) for x in quat[k]],
                    "v": [_f(x) for x in self.v[k]],
                    "p": [_f(x) for x in self.p[k]],
                    "pc": [[_f(x) for x in row] for row in self.pc[k]],
                },
                "imu": {"w": [_f(x) for x in self.w[k]],
                        "a": [_f(x) for x in self.a[k]]},
                "q": [_f(x) for x in self.q[k]],
                "qd": [_f(x) for x in self.qd[k]],
                "tau": [_f(x) for x in self.tau[k]],
                "contact": [bool(c) for c in self.contact[k]],
                "slip": [_f(x) for x in self.slip[k]],
            }
            buf.write(json.dumps(rec, separators=(",", ":")) + "\n")
        return buf.getvalue()

    def save(self, path):
        path = str(path)
        with open(path, "w") as f:
            f.write(self.to_jsonl())
        with open(_manifest_path(path), "w") as f:
            json.dump(self.manifest(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "EpisodeDataset":
        rows = []
        with open(path) as f:
            for line in f:
                if line.strip():
                    rows.append(json.loads(line))
        t = np.array([r["t"] for r in rows])
        quat = np.array([r["gt"]["R"] for r in rows])
        return cls(
            t=t,
            r=lg.quat_to_rot(quat),
            v=np.array([r["gt"]["v"] for r in rows]),
            p=np.array([r["gt"]["p"] for r in rows]),
            pc=np.array([r["gt"]["pc"] for r in rows]),
            w=np.array([r["imu"]["w"] for r in rows]),
            a=np.array([r["imu"]["a"] for r in rows]),
            q=np.array([r["q"] for r in rows]),
            qd=np.array([r["qd"] for r in rows]),
            tau=np.array([r["tau"] for r in rows]),
            contact=np.array([r["contact"] for r in rows], dtype=bool),
            slip=np.array([r["slip"] for r in rows]),
        )


def _manifest_path(path: str) -> str:
    return (path[:-6] if path.endswith(".jsonl") else path) + ".manifest.json"


def _f(x) -> float:
    # 17 significant digits survive the JSON round trip losslessly
    return float(format(float(x), ".17g"))


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


def _dsmoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return 30.0 * s**2 * (1.0 - s) ** 2


# ---------------------------------------------------------------------------
# stance-rooted kinematics


def _chain_rotation(q1, q23):
    return lg.so3_exp(np.array([q1, 0.0, 0.0])) @ lg.so3_exp(np.array([0.0, q23, 0.0]))


def _solve_stance_chain(model, leg, foot_r, foot_p, base_p, q_guess, step):
    """Joint angles of the frozen stance leg given the planned base position.

    Solves m(q) = foot_r^T (foot_p - base_p) where m is the base->ankle offset
    expressed in the foot frame; Newton iteration with a finite-difference
    Jacobian, warm-started along the trajectory.
    """
    chain = model.legs[leg]
    hip = np.asarray(chain.hip)
    rhs = foot_r.T @ (np.asarray(foot_p) - np.asarray(base_p))

    def m_of(q):
        r_ch = _chain_rotation(q[0], q[1] + q[2])
        fk = hip + lg.so3_exp(np.array([q[0], 0, 0])) @ (
            lg.so3_exp(np.array([0, q[1], 0])) @ np.array([0, 0, -chain.l1])
            + lg.so3_exp(np.array([0, q[1] + q[2], 0])) @ np.array([0, 0, -chain.l2])
        )
        return r_ch.T @ fk

    q = np.asarray(q_guess, dtype=float).copy()
    res = m_of(q) - rhs
    for _ in range(60):
        if np.max(np.abs(res)) < 1e-13:
            base_r = foot_r @ _chain_rotation(q[0], q[1] + q[2]).T
            return q, base_r
        jac = np.empty((3, 3))
        h = 1e-7
        for j in range(3):
            dq = np.zeros(3)
            dq[j] = h
            jac[:, j] = (m_of(q + dq) - m_of(q - dq)) / (2 * h)
        try:
            full = np.linalg.solve(jac, res)
        except np.linalg.LinAlgError:
            full = np.linalg.lstsq(jac, res, rcond=None)[0]
        # backtracking keeps the iteration on the warm-started branch near folds
        norm0 = np.linalg.norm(res)
        scale = 1.0
        for _ in range(10):
            q_try = q - scale * full
            res_try = m_of(q_try) - rhs
            if np.linalg.norm(res_try) < norm0:
                q, res = q_try, res_try
                break
            scale *= 0.5
        else:
            raise GenerationError("stance chain stalled at a kinematic fold",
                                  step, leg)
    raise GenerationError("stance chain did not converge", step, leg)


# ---------------------------------------------------------------------------
# gait scenario


def _zyx_euler(r):
    """Decompose R = Rz(yaw) Ry(pitch) Rx(roll)."""
    yaw = np.arctan2(r[1, 0], r[0, 0])
    pitch = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
    roll = np.arctan2(r[2, 1], r[2, 2])
    return yaw, pitch, roll


def _flat_landing(model, leg, r_end, p_end, ankle_z, q2_ref):
    """Leg configuration whose foot lands flat (world yaw only) with the
    ankle at the requested height, given the base pose at touchdown.

    The roll and total pitch of the chain cancel the base orientation exactly
    (q1 = -roll, q2+q3 = -pitch); the remaining hip-pitch freedom is solved in
    closed form for the ankle height, picking the branch nearest ``q2_ref``.
    """
    chain = model.legs[leg]
    _, pitch, roll = _zyx_euler(r_end)
    q1 = -roll
    sig = -pitch
    u = (r_end @ lg.so3_exp(np.array([q1, 0.0, 0.0])))[2, :]
    const = (
        p_end[2]
        + (r_end @ np.asarray(chain.hip))[2]
        + u @ (lg.so3_exp(np.array([0.0, sig, 0.0])) @ np.array([0, 0, -chain.l2]))
    )
    # ankle_z = const - l1 * (u_x sin q2 + u_z cos q2) = const - l1 rho sin(q2 + phi)
    rho = np.hypot(u[0], u[2])
    phi = np.arctan2(u[2], u[0])
    val = np.clip((const - ankle_z) / (chain.l1 * max(rho, 1e-9)), -1.0, 1.0)
    base_angle = np.arcsin(val)
    cands = []
    for raw in (base_angle - phi, np.pi - base_angle - phi):
        for wrap in (-2.0 * np.pi, 0.0, 2.0 * np.pi):
            cands.append(raw + wrap)
    cands = [q2 for q2 in cands if -2.6 <= q2 <= 2.6]
    q2 = min(cands, key=lambda c: abs(c - q2_ref))
    return np.array([q1, q2, sig - q2])


def _leg_q(model, leg, q):
    return np.array([q[model.joint_index(j)] for j in model.legs[leg].joints])


def _bump(s):
    """C2 out-and-back profile on [0, 1]: 0 -> 1 -> 0."""
    s = np.clip(s, 0.0, 1.0)
    return np.where(s < 0.5, _smoothstep(2.0 * s), _smoothstep(2.0 - 2.0 * s))


def _dbump(s):
    s = np.clip(s, 0.0, 1.0)
    return np.where(s < 0.5, 2.0 * _dsmoothstep(2.0 * s), -2.0 * _dsmoothstep(2.0 - 2.0 * s))


def _gait_plan(model, cfg, rng):
    """Kinematic pass for the stepping scenario.

    Stance feet are frozen at their full world pose; the base position does a
    smooth out-and-back excursion each step (weight shift) plus a crouch bob,
    and the base orientation is derived from the closed stance chain -- the
    rigid-ankle geometry turns the excursion into pronounced pitch/roll
    vaulting that returns to level by construction.  The swing leg travels in
    joint space through a lifted midpoint back to a flat replant.  Injected
    slips drift the stance pin while the base rides the slide; disturbance
    kicks are push-and-recover velocity bumps.
    """
    g = cfg.gait
    n = cfg.n_steps
    dt = cfg.dt
    nq = model.nq
    legs = list(model.legs)

    mu = rng.uniform(*cfg.friction_range)
    lo, hi = cfg.friction_range
    p_slip = cfg.slip.probability * (1.0 - (mu - lo) / max(hi - lo, 1e-12))

    dwell_steps = max(2, int(round(g.duty * g.period * cfg.rate)))
    swing_steps = max(4, int(round((1.0 - g.duty) * g.period * cfg.rate)))

    # truncated swing phases would compress the excursion into a few steps
    # (huge velocities), so the tail of the episode dwells instead
    phases = []
    k = 0
    swing_leg = 1  # right first
    while k < n:
        k1 = min(k + dwell_steps, n)
        phases.append(("dwell", None, k, k1))
        k = k1
        if k + swing_steps > n:
            if k < n:
                phases.append(("dwell", None, k, n))
            break
        phases.append(("swing", legs[swing_leg], k, k + swing_steps))
        k += swing_steps
        swing_leg = 1 - swing_leg

    kick_times = []
    if cfg.disturbance.period > 0 and cfg.disturbance.kick_speed > 0:
        kick_times = list(np.arange(cfg.disturbance.period, cfg.duration,
                                    cfg.disturbance.period))

    # initial level stance: both feet flat at the closed-form height solution
    base_p = np.array([0.0, 0.0, g.walk_height])
    q_cur = np.zeros(nq)
    foot_pose = {}
    for leg in legs:
        q3 = _flat_landing(model, leg, np.eye(3), base_p, 0.02, q2_ref=-0.8)
        model.set_leg_q(q_cur, leg, q3)
    poses0 = model.link_poses(q_cur)
    for leg in legs:
        r_f, p_f = poses0[model.legs[leg].foot_link]
        foot_pose[leg] = [r_f.copy(), base_p + p_f]

    r_gt = np.empty((n, 3, 3))
    q_gt = np.empty((n, nq))
    p_plan = np.empty((n, 3))
    v_plan = np.empty((n, 3))
    slip_leg = np.zeros(n, dtype=int) - 1  # index into legs, -1 = none
    slip_speed = np.zeros(n)

    q_prev = q_cur.copy()
    r_prev = np.eye(3)

    for kind, leg, k0, k1 in phases:
        dur = (k1 - k0) * dt
        if kind == "dwell":
            for k in range(k0, k1):
                r_gt[k] = r_prev
                q_gt[k] = q_prev
                p_plan[k] = base_p
                v_plan[k] = 0.0
            continue

        stance = legs[0] if leg == legs[1] else legs[1]
        # slip decision for this stance (all three draws always consumed)
        u_slip = rng.uniform()
        theta_s = rng.uniform(0.0, 2.0 * np.pi)
        mag_s = rng.uniform(*cfg.slip.speed_range)
        slipping = u_slip < p_slip
        v_slip = (mag_s * np.array([np.cos(theta_s), np.sin(theta_s), 0.0])
                  if slipping else np.zeros(3))

        sign_st = np.sign(model.legs[stance].hip[1])

        # kick landing inside this phase (draws always consumed when scheduled);
        # direction confined to the forward/toward-stance half so the stance
        # chain stays clear of its fold
        kick = None
        t0, t1 = k0 * dt, k1 * dt
        pending = [tk for tk in kick_times if t0 <= tk < t1]
        if pending:
            mag_k = rng.uniform(0.3, 1.0) * cfg.disturbance.kick_speed
            theta_k = rng.uniform(0.0, 2.0 * np.pi)
            dur_k = min(cfg.disturbance.duration, 0.4 * dur)
            tk = min(max(pending[0], t0 + 0.1 * dur), t1 - dur_k - 0.05 * dur)
            dv_k = mag_k * np.array([max(np.cos(theta_k), -0.1),
                                     sign_st * 0.8 * abs(np.sin(theta_k)), 0.0])
            kick = (tk, dur_k, dv_k)

        # weight-shift excursion, returning to the start exactly; lateral
        # motion goes toward the stance side and backward motion is clipped,
        # since the chain folds just behind the shank-plumb configuration
        chi = rng.uniform(0.0, 2.0 * np.pi)
        amp = g.step_length * rng.uniform(0.6, 1.0)
        bob = 0.4 * g.step_length * rng.uniform(0.2, 1.0)
        if g.pin_both:
            # both chains stay closed: keep the excursion small and symmetric
            delta = np.array([amp * max(np.cos(chi), -0.2),
                              0.4 * amp * np.sin(chi), -bob])
        else:
            delta = np.array([
                amp * max(np.cos(chi), -0.2),
                sign_st * (g.sway + min(0.5 * amp * abs(np.sin(chi)), 0.03)),
                -bob,
            ])

        p_start = base_p.copy()
        st_pin = foot_pose[stance][1].copy()
        st_rot = foot_pose[stance][0]

        # tapered slip drift (smooth slide start/arrest); the base rides the
        # slide, so the end-of-phase orientation equals the start orientation
        n_ph = max(k1 - k0 - 1, 1)
        s_grid = np.arange(k1 - k0) / n_ph
        drift = v_slip[None, :] * np.cumsum(_bump(s_grid))[:, None] * dt
        st_pin_end = st_pin + drift[-1]
        # held sole point of the free leg in pin_both mode
        free_pin = foot_pose[leg][1] + foot_pose[leg][0] @ np.array([0.0, 0.0, -0.02])

        if not g.pin_both:
            q_land = _flat_landing(model, leg, r_prev, p_start + drift[-1],
                                   0.02, q2_ref=_leg_q(model, leg, q_prev)[1])
            q_sw_start = _leg_q(model, leg, q_prev)
            lift = np.array([0.0, -0.25, 0.70]) * (g.step_height / 0.05)
            q_lift = 0.5 * (q_sw_start + q_land) + lift

        warm = _leg_q(model, stance, q_prev)
        dur_s = n_ph * dt
        for k in range(k0, k1):
            s = (k - k0) / n_ph
            tsec = k * dt
            w_slip = float(_bump(s))
            pb = p_start + delta * _bump(s) + drift[k - k0]
            vb = delta * _dbump(s) / dur_s + v_slip * w_slip
            if kick is not None:
                tk, dk, dv = kick
                u = (tsec - tk) / dk
                pb = pb + dv * dk * _bump(u)
                if 0.0 <= u <= 1.0:
                    vb = vb + dv * _dbump(u)
            st_p = st_pin + drift[k - k0]

            q_st, r_base = _solve_stance_chain(model, stance, st_rot, st_p, pb,
                                               warm, k)
            warm = q_st

            if g.pin_both:
                # free leg holds its lowest sole point: fixed-point iteration
                # over the foot orientation (the foot pivots about that point)
                q_sw = _leg_q(model, leg, q_prev)
                off = np.array([0.0, 0.0, -0.02])
                pin_w = free_pin + drift[k - k0]
                try:
                    for _ in range(3):
                        chain_r = _chain_rotation(q_sw[0], q_sw[1] + q_sw[2])
                        target = r_base.T @ (pin_w - pb) - chain_r @ off
                        q_sw = model.leg_ik(leg, target)
                except Exception as exc:
                    raise GenerationError(f"held contact infeasible: {exc}", k, leg)
            elif s <= 0.5:
                # joint-space swing: start -> lifted midpoint -> flat replant
                q_sw = q_sw_start + (q_lift - q_sw_start) * _smoothstep(2.0 * s)
            else:
                q_sw = q_lift + (q_land - q_lift) * _smoothstep(2.0 * s - 1.0)

            q = np.zeros(nq)
            model.set_leg_q(q, stance, q_st)
            model.set_leg_q(q, leg, q_sw)
            r_gt[k] = r_base
            q_gt[k] = q
            p_plan[k] = pb
            v_plan[k] = vb
            if slipping:
                slip_leg[k] = legs.index(stance)
                slip_speed[k] = mag_s * w_slip
            q_prev = q
            r_prev = r_base

        # freeze the landed swing foot where FK puts it; carry the slipped pin
        poses = model.link_poses(q_prev)
        foot_r, foot_off = poses[model.legs[leg].foot_link]
        foot_pose[leg][0] = r_prev @ foot_r
        foot_pose[leg][1] = p_plan[k1 - 1] + r_prev @ foot_off
        foot_pose[stance][1] = st_pin_end
        base_p = p_plan[k1 - 1].copy()

    return r_gt, q_gt, p_plan, v_plan, slip_leg, slip_speed, legs


# ---------------------------------------------------------------------------
# ground scenario

# keyframes: (base position, base rpy, fore-aft foot anchor offset).  The
# kneel places the feet behind the body so the shanks lie on the floor.
_GROUND_POSES = [
    (np.array([0.00, 0.00, 0.40]), np.array([0.00, 0.00, 0.0]), 0.00),
    (np.array([-0.02, 0.00, 0.24]), np.array([0.00, 0.15, 0.0]), 0.00),
    (np.array([0.00, 0.00, 0.26]), np.array([0.00, 0.35, 0.0]), -0.28),
    (np.array([0.00, 0.00, 0.30]), np.array([0.30, 0.00, 0.0]), 0.00),
    (np.array([-0.02, 0.02, 0.265]), np.array([0.10, 0.30, 0.0]), -0.26),
    (np.array([-0.02, -0.02, 0.16]), np.array([-0.25, 0.25, 0.0]), 0.00),
    (np.array([-0.05, 0.00, 0.13]), np.array([0.00, 0.20, 0.0]), 0.00),
]


def _ground_plan(model, cfg, rng):
    n = cfg.n_steps
    dt = cfg.dt
    nq = model.nq
    legs = list(model.legs)
    anchors = {leg: np.array([0.10, np.sign(model.legs[leg].hip[1]) * 0.08, 0.02])
               for leg in legs}

    mu = rng.uniform(*cfg.friction_range)
    lo, hi = cfg.friction_range
    p_slip = cfg.slip.probability * (1.0 - (mu - lo) / max(hi - lo, 1e-12))

    hold = max(2, int(round(0.9 * cfg.rate)))
    trans = max(2, int(round(0.8 * cfg.rate)))

    segs = []  # (kind, pose_idx_from, pose_idx_to, k0, k1)
    k = 0
    pose = 0
    while k < n:
        k1 = min(k + hold, n)
        segs.append(("hold", pose, pose, k, k1))
        k = k1
        if k + trans > n:
            if k < n:
                segs.append(("hold", pose, pose, k, n))
            break
        nxt = (pose + 1) % len(_GROUND_POSES)
        segs.append(("move", pose, nxt, k, k + trans))
        k += trans
        pose = nxt

    r_gt = np.empty((n, 3, 3))
    q_gt = np.empty((n, nq))
    p_plan = np.empty((n, 3))
    v_plan = np.empty((n, 3))
    slip_speed = np.zeros(n)
    slip_feet = np.zeros(n, dtype=bool)

    feet_off = np.zeros(3)

    def rot_of(rpy):
        return lg.so3_exp(np.array([0.0, 0.0, rpy[2]])) @ lg.so3_exp(
            np.array([0.0, rpy[1], 0.0])) @ lg.so3_exp(np.array([rpy[0], 0.0, 0.0]))

    for kind, a, b, k0, k1 in segs:
        dur = (k1 - k0) * dt
        pa, ra, dxa = _GROUND_POSES[a][0], rot_of(_GROUND_POSES[a][1]), _GROUND_POSES[a][2]
        pb, rb, dxb = _GROUND_POSES[b][0], rot_of(_GROUND_POSES[b][1]), _GROUND_POSES[b][2]
        xi = lg.so3_log(ra.T @ rb)

        # hold phases may slip: feet drift together (draws always consumed)
        u_slip = rng.uniform()
        theta_s = rng.uniform(0.0, 2.0 * np.pi)
        mag_s = rng.uniform(*cfg.slip.speed_range)
        slipping = kind == "hold" and u_slip < p_slip
        v_slip = (mag_s * np.array([np.cos(theta_s), np.sin(theta_s), 0.0])
                  if slipping else np.zeros(3))

        dur_s = max(k1 - k0 - 1, 1) * dt
        for k in range(k0, k1):
            s = (k - k0) / max(k1 - k0 - 1, 1)
            ss = _smoothstep(s)
            dss = _dsmoothstep(s) / dur_s
            if kind == "hold":
                base_v = np.zeros(3)
                if slipping:
                    # feet slide together with a tapered profile; the base
                    # rides the slide so the pose stays reachable
                    w = float(_bump(s))
                    feet_off = feet_off + v_slip * w * dt
                    base_v = v_slip * w
                    slip_speed[k] = mag_s * w
                    slip_feet[k] = True
                base_p = pa + feet_off
                base_r = ra
                foot_dx = np.array([dxa, 0.0, 0.0])
            else:
                base_p = pa + (pb - pa) * ss + feet_off
                base_v = (pb - pa) * dss
                base_r = ra @ lg.so3_exp(ss * xi)
                # feet reposition with the pose, lifting slightly in between
                foot_dx = np.array([dxa + (dxb - dxa) * ss, 0.0,
                                    0.05 * float(_bump(s)) if dxa != dxb else 0.0])
            q = np.zeros(nq)
            for leg in legs:
                target = base_r.T @ (anchors[leg] + foot_dx + feet_off - base_p)
                try:
                    model.set_leg_q(q, leg, model.leg_ik(leg, target))
                except Exception as exc:
                    raise GenerationError(f"foot anchor infeasible: {exc}", k, leg)
            r_gt[k] = base_r
            q_gt[k] = q
            p_plan[k] = base_p
            v_plan[k] = base_v

    return r_gt, q_gt, p_plan, v_plan, slip_speed, slip_feet, legs


# ---------------------------------------------------------------------------
# signal synthesis (shared second pass)


def generate_episode(model, cfg: SimConfig) -> EpisodeDataset:
    """Deterministic episode synthesis; bit-identical for identical config."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_steps
    dt = cfg.dt
    grav = np.asarray(cfg.gravity, dtype=float)
    n_c = model.n_candidates

    if cfg.scenario == "gait":
        r_gt, q_gt, p_plan, v_plan, slip_leg, slip_mag, legs = _gait_plan(
            model, cfg, rng)
        foot_of_candidate = np.full(n_c, -1, dtype=int)
        for i, c in enumerate(model.candidates):
            for li, leg in enumerate(legs):
                chain = model.legs[leg]
                if c.link in (chain.foot_link,):
                    foot_of_candidate[i] = li
        slip_ch = np.zeros((n, n_c))
        for i in range(n_c):
            if foot_of_candidate[i] >= 0:
                mask = slip_leg == foot_of_candidate[i]
                slip_ch[mask, i] = slip_mag[mask]
    elif cfg.scenario == "ground":
        r_gt, q_gt, p_plan, v_plan, slip_mag, slip_feet, legs = _ground_plan(
            model, cfg, rng)
        foot_links = {model.legs[leg].foot_link for leg in legs}
        on_foot = np.array([c.link in foot_links for c in model.candidates])
        slip_ch = np.where(slip_feet[:, None] & on_foot[None, :],
                           slip_mag[:, None], 0.0)
    else:
        raise ValueError(f"unknown scenario {cfg.scenario!r}")

    # discrete-consistent IMU truth: R and v recursions hold exactly
    w_true = np.zeros((n, 3))
    w_true[1:] = lg.so3_log(np.einsum("tji,tjk->tik", r_gt[:-1], r_gt[1:])) / dt
    w_true[0] = w_true[1] if n > 1 else 0.0
    a_true = np.zeros((n, 3))
    dv = (v_plan[1:] - v_plan[:-1]) / dt - grav
    a_true[1:] = np.einsum("tji,tj->ti", r_gt[:-1], dv)
    a_true[0] = a_true[1] if n > 1 else -r_gt[0].T @ grav

    p_gt = np.empty((n, 3))
    p_gt[0] = p_plan[0]
    for k in range(1, n):
        aw = r_gt[k - 1] @ a_true[k] + grav
        p_gt[k] = p_gt[k - 1] + v_plan[k - 1] * dt + 0.5 * aw * dt * dt

    h_all = model.fk_all(q_gt)
    pc = p_gt[:, None, :] + np.einsum("tij,tnj->tni", r_gt, h_all)

    # contact labels from actual candidate motion
    vc = np.gradient(pc, dt, axis=0)
    xy_speed = np.linalg.norm(vc[..., :2], axis=-1)
    contact = ground_truth_contact(xy_speed, pc[..., 2])

    # torque feature: Jacobian-transposed support-force share plus damping.
    # Only a network input, never used by any physics.
    qd_true = np.gradient(q_gt, dt, axis=0)
    jac = model.jac_all(q_gt)
    mass = 12.0
    a_support = np.einsum("tji,tj->ti", r_gt,
                          np.gradient(v_plan, dt, axis=0) - grav)  # body frame
    shares = []
    cand_rows = []
    for leg in legs:
        foot_link = model.legs[leg].foot_link
        idx = [i for i, c in enumerate(model.candidates) if c.link == foot_link]
        shares.append(contact[:, idx].any(axis=1).astype(float) if idx else np.ones(n))
        cand_rows.append(idx[0] if idx else 0)
    denom = np.maximum(np.sum(shares, axis=0), 1.0)
    tau = 0.3 * qd_true
    for li in range(len(legs)):
        f_sup = -(shares[li] / denom)[:, None] * mass * a_support
        tau = tau + np.einsum("tij,ti->tj", jac[:, cand_rows[li]], f_sup)

    # measured channels
    bias_g = np.zeros((n, 3))
    bias_a = np.zeros((n, 3))
    bias_g[0] = rng.uniform(-cfg.bias_init_g, cfg.bias_init_g, size=3)
    bias_a[0] = rng.uniform(-cfg.bias_init_a, cfg.bias_init_a, size=3)
    steps_g = rng.standard_normal((n, 3)) * cfg.sigma_bg * np.sqrt(dt)
    steps_a = rng.standard_normal((n, 3)) * cfg.sigma_ba * np.sqrt(dt)
    bias_g[1:] = bias_g[0] + np.cumsum(steps_g[1:], axis=0)
    bias_a[1:] = bias_a[0] + np.cumsum(steps_a[1:], axis=0)

    w_meas = w_true + bias_g + rng.standard_normal((n, 3)) * cfg.sigma_g / np.sqrt(dt)
    a_meas = a_true + bias_a + rng.standard_normal((n, 3)) * cfg.sigma_a / np.sqrt(dt)
    q_meas = q_gt + rng.standard_normal(q_gt.shape) * cfg.sigma_q
    qd_meas = np.zeros_like(q_meas)
    qd_meas[1:] = (q_meas[1:] - q_meas[:-1]) / dt
    qd_meas[0] = qd_meas[1] if n > 1 else 0.0

    return EpisodeDataset(
        t=np.arange(n) * dt, r=r_gt, v=v_plan.copy(), p=p_gt, pc=pc,
        w=w_meas, a=a_meas, q=q_meas, qd=qd_meas, tau=tau,
        contact=contact, slip=slip_ch,
    )
