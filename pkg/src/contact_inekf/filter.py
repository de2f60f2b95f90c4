"""Differentiable contact-aided invariant EKF.

World-centric right-invariant error for the group part (orientation,
velocity, position, N permanently tracked contact-candidate positions) and
additive errors for the IMU biases ("imperfect" variant).  Prediction
integrates the IMU, propagates the covariance with a second-order
discretization of the continuous error dynamics, and injects the learned
per-candidate velocity covariances through the group adjoint.  Correction
fuses the leg-kinematics position measurements of all candidates every step;
confidence lives entirely in the contact covariances.

All state fields carry a leading batch axis (parallel environments /
episodes).  Fields may be plain arrays or tape Vars; the same code path
serves inference and end-to-end training.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tape as tp
from .liegroup import TangentLayout
from .tape import value


class InvalidCovarianceError(ValueError):
    """A supplied contact covariance is not positive semidefinite."""


class SingularUpdateError(RuntimeError):
    """Innovation covariance not positive definite even after jitter."""


# Diagonal of the initial covariance, in tangent order
# (orientation rad^2, velocity (m/s)^2, position m^2, candidates m^2, biases).
P0_THETA = 1e-4
P0_VEL = 1e-2
P0_POS = 1e-4
P0_CONTACT = 1e-2
P0_BIAS = 1e-4

INNOVATION_JITTER = 1e-12


@dataclass
class ImuSample:
    """One IMU reading: body rates (B, 3), specific force (B, 3), dt > 0."""

    w: np.ndarray
    a: np.ndarray
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass
class NoiseParams:
    """Continuous-time noise densities and the joint encoder std."""

    sigma_g: float = 2e-4  # rad/s/sqrt(Hz)
    sigma_a: float = 2e-3  # m/s^2/sqrt(Hz)
    sigma_bg: float = 1e-5  # gyro bias random walk
    sigma_ba: float = 5e-5  # accel bias random walk
    sigma_q: float = 1e-3  # rad, per encoder sample
    gravity: tuple = (0.0, 0.0, -9.81)

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba", "sigma_q"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def g(self) -> np.ndarray:
        return np.asarray(self.gravity, dtype=float)


@dataclass
class FilterState:
    """Estimated state: rotation (B,3,3), velocity/position/biases (B,3),
    candidate world positions (B,N,3).  Fields are arrays or tape Vars."""

    r: object
    v: object
    p: object
    pc: object
    bg: object
    ba: object

    @property
    def n_contacts(self) -> int:
        return value(self.pc).shape[-2]

    @property
    def batch(self) -> int:
        return value(self.r).shape[0]

    def values(self) -> "FilterState":
        """Plain-array copy (detaches from any tape)."""
        return FilterState(*(np.asarray(value(f)) for f in
                             (self.r, self.v, self.p, self.pc, self.bg, self.ba)))

    @classmethod
    def from_ground_truth(cls, r, v, p, pc, batch: bool = True) -> "FilterState":
        """Build a (batched) state with zero biases from ground-truth arrays."""
        r = np.asarray(r, dtype=float)
        if r.ndim == 2:
            r = r[None]
            v = np.asarray(v, dtype=float)[None]
            p = np.asarray(p, dtype=float)[None]
            pc = np.asarray(pc, dtype=float)[None]
        b = r.shape[0]
        return cls(r, np.asarray(v, dtype=float).reshape(b, 3),
                   np.asarray(p, dtype=float).reshape(b, 3),
                   np.asarray(pc, dtype=float).reshape(b, -1, 3),
                   np.zeros((b, 3)), np.zeros((b, 3)))


def init_covariance(n_contacts: int, batch: int = 1) -> np.ndarray:
    """Default initial covariance, diagonal in the tangent layout."""
    lay = TangentLayout(n_contacts)
    diag = np.empty(lay.dim)
    diag[lay.theta] = P0_THETA
    diag[lay.vel] = P0_VEL
    diag[lay.pos] = P0_POS
    diag[lay.contacts] = P0_CONTACT
    diag[lay.gyro_bias] = P0_BIAS
    diag[lay.accel_bias] = P0_BIAS
    return np.broadcast_to(np.diag(diag), (batch, lay.dim, lay.dim)).copy()


class HealthMonitor:
    """Optional per-step covariance health checks (symmetry, eigenvalues)."""

    def __init__(self):
        self.enabled = False
        self.reset()

    def reset(self):
        self.steps = 0
        self.worst_asym = 0.0
        self.worst_eigmin = np.inf

    def observe(self, p):
        self.steps += 1
        asym = float(np.max(np.abs(p - np.swapaxes(p, -1, -2))))
        eigmin = float(np.min(np.linalg.eigvalsh(0.5 * (p + np.swapaxes(p, -1, -2)))))
        self.worst_asym = max(self.worst_asym, asym)
        self.worst_eigmin = min(self.worst_eigmin, eigmin)

    def ok(self, sym_tol: float = 1e-9, eig_tol: float = -1e-8) -> bool:
        return self.worst_asym <= sym_tol and self.worst_eigmin >= eig_tol


HEALTH = HealthMonitor()


def _measurement_matrix(n_contacts: int) -> np.ndarray:
    """Constant right-invariant kinematic H: -I on position, +I on candidate i."""
    lay = TangentLayout(n_contacts)
    h = np.zeros((3 * n_contacts, lay.dim))
    for i in range(n_contacts):
        h[3 * i : 3 * i + 3, lay.pos] = -np.eye(3)
        h[3 * i : 3 * i + 3, lay.contact(i)] = np.eye(3)
    return h


def _validate_sigma_c(sigma_c):
    sc = value(sigma_c)
    eig = np.linalg.eigvalsh(0.5 * (sc + np.swapaxes(sc, -1, -2)))
    if np.min(eig) < -1e-8:
        raise InvalidCovarianceError(
            f"contact covariance has eigenvalue {np.min(eig):.3e} < -1e-8"
        )


def predict(state: FilterState, p_cov, u: ImuSample, sigma_c, noise: NoiseParams,
            validate: bool = True):
    """Propagate mean and covariance over one IMU interval.

    ``sigma_c`` holds the per-candidate body-frame velocity covariances,
    shape (B, N, 3, 3); it is the only learned input.  Returns the predicted
    (state, covariance).
    """
    n = state.n_contacts
    b = state.batch
    lay = TangentLayout(n)
    dt = u.dt
    g = noise.g

    if validate:
        _validate_sigma_c(sigma_c)

    # mean propagation
    w_eff = tp.sub(np.asarray(u.w, dtype=float), state.bg)
    e_r = tp.so3_exp(tp.scale(w_eff, dt))
    r_new = tp.matmul(state.r, e_r)
    a_world = tp.add(tp.matvec(state.r, tp.sub(np.asarray(u.a, dtype=float), state.ba)), g)
    v_new = tp.add(state.v, tp.scale(a_world, dt))
    p_new = tp.add(state.p, tp.add(tp.scale(state.v, dt), tp.scale(a_world, 0.5 * dt * dt)))

    # continuous error dynamics A, linearized at the prior state
    sk_v = tp.skew(state.v)
    sk_p = tp.skew(state.p)
    sk_c = tp.skew(state.pc)  # (B, N, 3, 3)
    r4 = tp.reshape(state.r, (b, 1, 3, 3))
    sv_r = tp.matmul(sk_v, state.r)
    sp_r = tp.matmul(sk_p, state.r)
    sc_r = tp.matmul(sk_c, r4)
    neg_r = tp.neg(state.r)

    from .liegroup import skew as _skew_const

    a_base = np.zeros((lay.dim, lay.dim))
    a_base[lay.vel, lay.theta] = _skew_const(g)
    a_base[lay.pos, lay.vel] = np.eye(3)
    gb, ab = lay.gyro_bias.start, lay.accel_bias.start
    items = [
        (lay.theta.start, gb, neg_r, None),
        (lay.vel.start, gb, tp.neg(sv_r), None),
        (lay.vel.start, ab, neg_r, None),
        (lay.pos.start, gb, tp.neg(sp_r), None),
    ]
    neg_sc_r = tp.neg(sc_r)
    for i in range(n):
        items.append((lay.contact(i).start, gb, neg_sc_r, i))
    a_mat = tp.assemble((b,), lay.dim, lay.dim, items, base=a_base)

    # Phi = I + A dt + A^2 dt^2 / 2
    phi = tp.add(
        tp.add(np.eye(lay.dim), tp.scale(a_mat, dt)),
        tp.scale(tp.matmul(a_mat, a_mat), 0.5 * dt * dt),
    )

    # noise injection G = blkdiag(Ad_X, I6)
    ad_base = np.zeros((lay.dim, lay.dim))
    ad_base[lay.gyro_bias, lay.gyro_bias] = np.eye(3)
    ad_base[lay.accel_bias, lay.accel_bias] = np.eye(3)
    items = [
        (lay.theta.start, lay.theta.start, state.r, None),
        (lay.vel.start, lay.vel.start, state.r, None),
        (lay.pos.start, lay.pos.start, state.r, None),
        (lay.vel.start, lay.theta.start, sv_r, None),
        (lay.pos.start, lay.theta.start, sp_r, None),
    ]
    for i in range(n):
        ci = lay.contact(i).start
        items.append((ci, ci, state.r, None))
        items.append((ci, lay.theta.start, sc_r, i))
    adj = tp.assemble((b,), lay.dim, lay.dim, items, base=ad_base)

    # continuous noise densities in the body frame
    qc_base = np.zeros((lay.dim, lay.dim))
    qc_base[lay.theta, lay.theta] = noise.sigma_g**2 * np.eye(3)
    qc_base[lay.vel, lay.vel] = noise.sigma_a**2 * np.eye(3)
    qc_base[lay.gyro_bias, lay.gyro_bias] = noise.sigma_bg**2 * np.eye(3)
    qc_base[lay.accel_bias, lay.accel_bias] = noise.sigma_ba**2 * np.eye(3)
    items = [(lay.contact(i).start, lay.contact(i).start, sigma_c, i) for i in range(n)]
    qc = tp.assemble((b,), lay.dim, lay.dim, items, base=qc_base)

    m = tp.matmul(phi, adj)
    qd = tp.scale(tp.matmul(tp.matmul(m, qc), tp.transpose(m)), dt)
    p_pred = tp.symmetrize(tp.add(tp.matmul(tp.matmul(phi, p_cov), tp.transpose(phi)), qd))

    out = FilterState(r_new, v_new, p_new, state.pc, state.bg, state.ba)
    if HEALTH.enabled:
        HEALTH.observe(value(p_pred))
    return out, p_pred


def correct(state: FilterState, p_cov, q, model, noise: NoiseParams):
    """Fuse the stacked leg-kinematics measurement of all candidates.

    ``q`` is the measured joint vector (B, nq).  The gain solve goes through
    a Cholesky factorization of the jittered innovation covariance; the state
    update is the right-invariant retraction of K z.
    """
    n = state.n_contacts
    b = state.batch
    lay = TangentLayout(n)
    q = np.asarray(value(q), dtype=float)

    h_meas = model.fk_all(q)  # (B, N, 3), constant w.r.t. the tape
    jac = model.jac_all(q)  # (B, N, 3, nq)

    # innovation z_i = R h_i(q) - (pc_i - p)
    rh = tp.rotate_many(state.r, h_meas)
    diff = tp.sub(state.pc, tp.reshape(state.p, (b, 1, 3)))
    z = tp.reshape(tp.sub(rh, diff), (b, 3 * n))

    # measurement noise N = (I kron R) J sq^2 J^T (I kron R)^T, cross terms kept
    j_stack = jac.reshape(b, 3 * n, model.nq)
    jjt = noise.sigma_q**2 * (j_stack @ np.swapaxes(j_stack, -1, -2))
    rn = tp.assemble((b,), 3 * n, 3 * n,
                     [(3 * i, 3 * i, state.r, None) for i in range(n)])
    n_mat = tp.matmul(tp.matmul(rn, jjt), tp.transpose(rn))

    h_const = _measurement_matrix(n)
    hp = tp.matmul(h_const, p_cov)
    s_raw = tp.add(tp.matmul(hp, h_const.T), n_mat)
    s_mat = tp.add(tp.symmetrize(s_raw), INNOVATION_JITTER * np.eye(3 * n))

    try:
        kt = tp.spd_solve(s_mat, hp)  # K^T = S^{-1} H P
    except np.linalg.LinAlgError as exc:
        raise SingularUpdateError(
            "innovation covariance not positive definite after jitter"
        ) from exc
    k = tp.transpose(kt)
    delta = tp.matvec(k, z)

    # retraction through the left-Jacobian blocks (taped composition)
    dth = tp.slice_last(delta, lay.theta)
    e_r = tp.so3_exp(dth)
    s_sq = tp.sum_last(tp.mul(dth, dth))
    c2 = tp.reshape(tp.coeff_cos(s_sq), (b, 1, 1))
    c3 = tp.reshape(tp.coeff_j(s_sq), (b, 1, 1))
    k1 = tp.skew(dth)
    jl = tp.add(np.eye(3), tp.add(tp.mul(c2, k1), tp.mul(c3, tp.matmul(k1, k1))))

    r_new = tp.matmul(e_r, state.r)
    v_new = tp.add(tp.matvec(e_r, state.v), tp.matvec(jl, tp.slice_last(delta, lay.vel)))
    p_new = tp.add(tp.matvec(e_r, state.p), tp.matvec(jl, tp.slice_last(delta, lay.pos)))
    dc = tp.reshape(tp.slice_last(delta, lay.contacts), (b, n, 3))
    pc_new = tp.add(tp.rotate_many(e_r, state.pc), tp.rotate_many(jl, dc))
    bg_new = tp.add(state.bg, tp.slice_last(delta, lay.gyro_bias))
    ba_new = tp.add(state.ba, tp.slice_last(delta, lay.accel_bias))

    # Joseph-form covariance update
    kh = tp.matmul(k, h_const)
    imkh = tp.sub(np.eye(lay.dim), kh)
    p1 = tp.matmul(tp.matmul(imkh, p_cov), tp.transpose(imkh))
    knk = tp.matmul(tp.matmul(k, n_mat), tp.transpose(k))
    p_new_cov = tp.symmetrize(tp.add(p1, knk))

    out = FilterState(r_new, v_new, p_new, pc_new, bg_new, ba_new)
    if HEALTH.enabled:
        HEALTH.observe(value(p_new_cov))
    return out, p_new_cov


def filter_step(state: FilterState, p_cov, u: ImuSample, q, sigma_c, model,
                noise: NoiseParams, validate: bool = True):
    """One full cycle: predict with the contact covariances, then correct."""
    state, p_cov = predict(state, p_cov, u, sigma_c, noise, validate=validate)
    return correct(state, p_cov, q, model, noise)
