"""Matrix Lie group primitives for the contact-aided filter.

SO(3) exponential/logarithm, left Jacobians, and the block group that stacks
rotation, velocity, position and N contact positions (the "SE_{2+N}(3)"
embedding).  Everything is vectorized over arbitrary leading batch axes and
works on plain float64 arrays.

The tangent ordering is fixed here once and for all:

    (dtheta, dv, dp, dp_C1 .. dp_CN, db_gyro, db_accel)

giving dimension 9 + 3N + 6.  Rows/columns of every covariance, state
transition matrix and measurement Jacobian in the package follow this layout;
other modules must import :class:`TangentLayout` rather than re-declare it.
"""

from __future__ import annotations

import numpy as np

# Series branch for sinc-like coefficients: used when theta^2 <= this value
# (theta <= 0.1).  Five series terms keep the truncation below 3e-16 relative,
# and the closed forms are cancellation-free above the switch.
_SERIES_S = 1e-2


def skew(v: np.ndarray) -> np.ndarray:
    """Map vectors (..., 3) to skew-symmetric matrices (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`skew` on skew-symmetric input (antisymmetric part otherwise)."""
    m = np.asarray(m, dtype=float)
    return 0.5 * np.stack(
        [
            m[..., 2, 1] - m[..., 1, 2],
            m[..., 0, 2] - m[..., 2, 0],
            m[..., 1, 0] - m[..., 0, 1],
        ],
        axis=-1,
    )


def _safe_theta(s):
    return np.sqrt(np.maximum(s, _SERIES_S))


def coeff_sin(s):
    """sin(theta)/theta as a smooth function of s = theta^2."""
    s = np.asarray(s, dtype=float)
    series = 1.0 - s / 6.0 + s**2 / 120.0 - s**3 / 5040.0 + s**4 / 362880.0
    t = _safe_theta(s)
    return np.where(s <= _SERIES_S, series, np.sin(t) / t)


def coeff_cos(s):
    """(1 - cos(theta))/theta^2 of s = theta^2, via 2 sin^2(theta/2)."""
    s = np.asarray(s, dtype=float)
    series = 0.5 - s / 24.0 + s**2 / 720.0 - s**3 / 40320.0 + s**4 / 3628800.0
    t = _safe_theta(s)
    closed = 2.0 * np.sin(0.5 * t) ** 2 / np.maximum(s, _SERIES_S)
    return np.where(s <= _SERIES_S, series, closed)


def coeff_j(s):
    """(theta - sin(theta))/theta^3 of s = theta^2."""
    s = np.asarray(s, dtype=float)
    series = (
        1.0 / 6.0 - s / 120.0 + s**2 / 5040.0 - s**3 / 362880.0 + s**4 / 39916800.0
    )
    t = _safe_theta(s)
    return np.where(s <= _SERIES_S, series, (t - np.sin(t)) / np.maximum(s, _SERIES_S) / t)


def coeff_sin_d(s):
    """d/ds of coeff_sin."""
    s = np.asarray(s, dtype=float)
    series = -1.0 / 6.0 + s / 60.0 - s**2 / 1680.0 + s**3 / 90720.0
    t = _safe_theta(s)
    closed = (t * np.cos(t) - np.sin(t)) / (2.0 * t**3)
    return np.where(s <= _SERIES_S, series, closed)


def coeff_cos_d(s):
    """d/ds of coeff_cos."""
    s = np.asarray(s, dtype=float)
    series = -1.0 / 24.0 + s / 360.0 - s**2 / 13440.0 + s**3 / 907200.0
    t = _safe_theta(s)
    closed = (0.5 * t * np.sin(t) - 2.0 * np.sin(0.5 * t) ** 2) / t**4
    return np.where(s <= _SERIES_S, series, closed)


def coeff_j_d(s):
    """d/ds of coeff_j."""
    s = np.asarray(s, dtype=float)
    series = -1.0 / 120.0 + s / 2520.0 - s**2 / 120960.0 + s**3 / 9979200.0
    t = _safe_theta(s)
    closed = (t * 2.0 * np.sin(0.5 * t) ** 2 - 3.0 * (t - np.sin(t))) / (2.0 * t**5)
    return np.where(s <= _SERIES_S, series, closed)


def coeff_jinv(s):
    """Second coefficient of the inverse left Jacobian, J_l^-1 = I - K/2 + b(s) K^2."""
    s = np.asarray(s, dtype=float)
    series = 1.0 / 12.0 + s / 720.0 + s**2 / 30240.0 + s**3 / 1209600.0
    a1 = coeff_sin(s)
    a2 = coeff_cos(s)
    closed = (1.0 - a1 / (2.0 * np.where(a2 == 0.0, 1.0, a2))) / np.maximum(s, _SERIES_S)
    return np.where(s <= _SERIES_S, series, closed)


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues exponential, (..., 3) axis-angle -> (..., 3, 3) rotation."""
    w = np.asarray(w, dtype=float)
    s = np.sum(w * w, axis=-1)
    k = skew(w)
    k2 = k @ k
    a1 = coeff_sin(s)[..., None, None]
    a2 = coeff_cos(s)[..., None, None]
    return np.eye(3) + a1 * k + a2 * k2


def so3_log(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`so3_exp` on the domain ||w|| <= pi.

    Angles near pi use the largest-diagonal column of the symmetric part; the
    sign there is fixed against the antisymmetric part when it is nonzero
    (either sign is a valid logarithm at exactly pi).
    """
    r = np.asarray(r, dtype=float)
    lead = r.shape[:-2]
    r = r.reshape((-1, 3, 3))
    m = r.shape[0]
    tr = r[:, 0, 0] + r[:, 1, 1] + r[:, 2, 2]
    c = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(c)
    half_vee = vee(r)  # sin(theta) * axis

    # Generic branch: w = half_vee / a1(theta^2); a1 >= 0.047 for theta <= 3.0.
    s = theta * theta
    a1 = coeff_sin(s)
    generic = half_vee / np.where(a1 < 1e-12, 1.0, a1)[:, None]

    # Near-pi branch via A = (sym(R) - c I)/(1 - c) = axis axis^T.
    sym = 0.5 * (r + np.swapaxes(r, -1, -2))
    denom = np.maximum(1.0 - c, 1e-12)[:, None, None]
    a_mat = (sym - c[:, None, None] * np.eye(3)) / denom
    diag = np.stack([a_mat[:, 0, 0], a_mat[:, 1, 1], a_mat[:, 2, 2]], axis=-1)
    j = np.argmax(diag, axis=-1)
    rows = np.arange(m)
    col = a_mat[rows, :, j]
    dj = diag[rows, j]
    axis = col / np.sqrt(np.maximum(dj, 1e-16))[:, None]
    sign = np.where(np.sum(axis * half_vee, axis=-1) < 0.0, -1.0, 1.0)
    near_pi = sign[:, None] * axis * theta[:, None]

    out = np.where((theta > 3.0)[:, None], near_pi, generic)
    return out.reshape(lead + (3,))


def left_jacobian(w: np.ndarray) -> np.ndarray:
    """SO(3) left Jacobian J_l(w) = I + coeff_cos K + coeff_j K^2."""
    w = np.asarray(w, dtype=float)
    s = np.sum(w * w, axis=-1)
    k = skew(w)
    k2 = k @ k
    return np.eye(3) + coeff_cos(s)[..., None, None] * k + coeff_j(s)[..., None, None] * k2


def left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian, closed form."""
    w = np.asarray(w, dtype=float)
    s = np.sum(w * w, axis=-1)
    k = skew(w)
    k2 = k @ k
    return np.eye(3) - 0.5 * k + coeff_jinv(s)[..., None, None] * k2


def is_rotation(r: np.ndarray, tol: float = 1e-9) -> bool:
    """Check R R^T = I and det(R) = +1 within tol."""
    r = np.asarray(r, dtype=float)
    orth = np.max(np.abs(r @ np.swapaxes(r, -1, -2) - np.eye(3)))
    det = np.max(np.abs(np.linalg.det(r) - 1.0))
    return bool(orth <= tol and det <= tol)


class TangentLayout:
    """Index layout of the (9 + 3N + 6)-dimensional tangent/error vector."""

    def __init__(self, n_contacts: int):
        if n_contacts < 1:
            raise ValueError("need at least one contact candidate")
        self.n_contacts = n_contacts
        self.dim = 9 + 3 * n_contacts + 6
        self.theta = slice(0, 3)
        self.vel = slice(3, 6)
        self.pos = slice(6, 9)
        self.contacts = slice(9, 9 + 3 * n_contacts)
        self.gyro_bias = slice(9 + 3 * n_contacts, 12 + 3 * n_contacts)
        self.accel_bias = slice(12 + 3 * n_contacts, 15 + 3 * n_contacts)

    def contact(self, i: int) -> slice:
        if not 0 <= i < self.n_contacts:
            raise IndexError(f"contact index {i} out of range")
        return slice(9 + 3 * i, 12 + 3 * i)

    def __eq__(self, other):
        return isinstance(other, TangentLayout) and other.n_contacts == self.n_contacts

    def __repr__(self):
        return f"TangentLayout(n_contacts={self.n_contacts})"


def state_retract(r, v, p, pc, bg, ba, delta):
    """Right-invariant retraction of a tangent vector onto the state.

    The group part multiplies from the left by the block-group exponential of
    the first 9 + 3N entries of ``delta`` (rotation via so3_exp, translation
    columns through the left Jacobian); the two biases are updated additively.

    Shapes: r (..., 3, 3); v, p, bg, ba (..., 3); pc (..., N, 3);
    delta (..., 9 + 3N + 6).  Returns the updated tuple.
    """
    r = np.asarray(r, dtype=float)
    pc = np.asarray(pc, dtype=float)
    delta = np.asarray(delta, dtype=float)
    n = pc.shape[-2]
    lay = TangentLayout(n)
    dth = delta[..., lay.theta]
    e = so3_exp(dth)
    jl = left_jacobian(dth)

    def _mv(m, x):
        return (m @ x[..., None])[..., 0]

    r_new = e @ r
    v_new = _mv(e, np.asarray(v, dtype=float)) + _mv(jl, delta[..., lay.vel])
    p_new = _mv(e, np.asarray(p, dtype=float)) + _mv(jl, delta[..., lay.pos])
    dpc = delta[..., lay.contacts].reshape(delta.shape[:-1] + (n, 3))
    pc_new = (e[..., None, :, :] @ pc[..., None])[..., 0] + (
        jl[..., None, :, :] @ dpc[..., None]
    )[..., 0]
    bg_new = np.asarray(bg, dtype=float) + delta[..., lay.gyro_bias]
    ba_new = np.asarray(ba, dtype=float) + delta[..., lay.accel_bias]
    return r_new, v_new, p_new, pc_new, bg_new, ba_new


def embed_group(r, v, p, pc) -> np.ndarray:
    """Embed the state's group part as a (3+2+N) x (3+2+N) block matrix."""
    r = np.asarray(r, dtype=float)
    pc = np.asarray(pc, dtype=float)
    n = pc.shape[-2]
    k = 5 + n
    x = np.zeros(r.shape[:-2] + (k, k))
    x[..., :3, :3] = r
    x[..., :3, 3] = v
    x[..., :3, 4] = p
    for i in range(n):
        x[..., :3, 5 + i] = pc[..., i, :]
    idx = np.arange(3, k)
    x[..., idx, idx] = 1.0
    return x


def augmented_adjoint(r, v, p, pc) -> np.ndarray:
    """Adjoint of the embedded group element, extended by identity on biases.

    Maps tangent vectors in the fixed layout; used to conjugate covariances
    under group transformations (and as the noise-injection map in predict).
    """
    r = np.asarray(r, dtype=float)
    pc = np.asarray(pc, dtype=float)
    n = pc.shape[-2]
    lay = TangentLayout(n)
    ad = np.zeros(r.shape[:-2] + (lay.dim, lay.dim))
    ad[..., lay.theta, lay.theta] = r
    ad[..., lay.vel, lay.vel] = r
    ad[..., lay.pos, lay.pos] = r
    ad[..., lay.vel, lay.theta] = skew(v) @ r
    ad[..., lay.pos, lay.theta] = skew(p) @ r
    for i in range(n):
        ci = lay.contact(i)
        ad[..., ci, ci] = r
        ad[..., ci, lay.theta] = skew(pc[..., i, :]) @ r
    ad[..., lay.gyro_bias, lay.gyro_bias] = np.eye(3)
    ad[..., lay.accel_bias, lay.accel_bias] = np.eye(3)
    return ad


def right_error_log(r_est, v_est, p_est, r_gt, v_gt, p_gt) -> np.ndarray:
    """Right-invariant error xi = log(X_est X_gt^-1) restricted to (theta, v, p).

    This is the 9-dimensional error vector consistent with the filter's
    covariance convention; used by the consistency metrics.
    """
    r_est = np.asarray(r_est, dtype=float)
    r_eta = r_est @ np.swapaxes(np.asarray(r_gt, dtype=float), -1, -2)
    xi_th = so3_log(r_eta)
    jinv = left_jacobian_inv(xi_th)

    def _mv(m, x):
        return (m @ x[..., None])[..., 0]

    t_v = np.asarray(v_est, dtype=float) - _mv(r_eta, np.asarray(v_gt, dtype=float))
    t_p = np.asarray(p_est, dtype=float) - _mv(r_eta, np.asarray(p_gt, dtype=float))
    return np.concatenate([xi_th, _mv(jinv, t_v), _mv(jinv, t_p)], axis=-1)


def rot_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix (..., 3, 3) -> unit quaternion (..., 4) in wxyz order."""
    r = np.asarray(r, dtype=float)
    lead = r.shape[:-2]
    r = r.reshape((-1, 3, 3))
    m00, m11, m22 = r[:, 0, 0], r[:, 1, 1], r[:, 2, 2]
    tr = m00 + m11 + m22
    q = np.zeros((r.shape[0], 4))

    # Shepperd's method: pick the numerically largest pivot per element.
    cand = np.stack([tr, m00, m11, m22], axis=-1)
    case = np.argmax(cand, axis=-1)

    def _fill(mask, w, x, y, z, pivot):
        s = 2.0 * np.sqrt(np.maximum(pivot, 1e-300))
        q[mask, 0] = (w / s)[mask]
        q[mask, 1] = (x / s)[mask]
        q[mask, 2] = (y / s)[mask]
        q[mask, 3] = (z / s)[mask]

    p0 = 1.0 + tr
    _fill(case == 0, p0, r[:, 2, 1] - r[:, 1, 2],
          r[:, 0, 2] - r[:, 2, 0], r[:, 1, 0] - r[:, 0, 1], p0)
    p1 = 1.0 + m00 - m11 - m22
    _fill(case == 1, r[:, 2, 1] - r[:, 1, 2], p1,
          r[:, 0, 1] + r[:, 1, 0], r[:, 0, 2] + r[:, 2, 0], p1)
    p2 = 1.0 - m00 + m11 - m22
    _fill(case == 2, r[:, 0, 2] - r[:, 2, 0], r[:, 0, 1] + r[:, 1, 0],
          p2, r[:, 1, 2] + r[:, 2, 1], p2)
    p3 = 1.0 - m00 - m11 + m22
    _fill(case == 3, r[:, 1, 0] - r[:, 0, 1], r[:, 0, 2] + r[:, 2, 0],
          r[:, 1, 2] + r[:, 2, 1], p3, p3)

    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    # Canonical sign: w >= 0.
    q = q * np.where(q[:, :1] < 0.0, -1.0, 1.0)
    return q.reshape(lead + (4,))


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (..., 4) wxyz -> rotation matrix (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r
