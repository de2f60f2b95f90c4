"""Trajectory metrics and classical baselines.

Absolute trajectory error statistics (initial yaw+translation alignment,
body-frame velocity errors), NEES consistency against chi-square bounds
computed by bisection on the regularized incomplete gamma function, and the
classical binary-contact baseline filters (ground-truth contacts, estimated
heuristic contacts, and the slip-inflated variant).

The replay engine runs the filter over a batch of equally long episodes at
once; covariance sources are pluggable per-step callables so learned and
baseline runs share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import contactnet as cn
from . import filter as flt
from . import liegroup as lg
from .liegroup import TangentLayout

# binary-contact covariance levels (m^2/s^2): trusted vs uninformative
SIGMA_CONTACT_SQ = 1e-4
SIGMA_FREE_SQ = 1e2
SLIP_INFLATION = 10.0
SLIP_SPEED_THRESHOLD = 0.1  # m/s of true slip that triggers the inflation

BASELINES = ("gt-contacts", "heuristic-contacts", "gt-contacts-slip",
             "dead-reckoning")


@dataclass
class TrajectoryPair:
    """Time-aligned estimated and ground-truth trajectories (single run)."""

    t: np.ndarray
    r_est: np.ndarray  # (T, 3, 3)
    v_est: np.ndarray
    p_est: np.ndarray
    r_gt: np.ndarray
    v_gt: np.ndarray
    p_gt: np.ndarray
    p_core: np.ndarray = None  # (T, 9, 9) filter covariance of (theta, v, p)

    def __post_init__(self):
        n = len(self.t)
        for name in ("r_est", "v_est", "p_est", "r_gt", "v_gt", "p_gt"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"length mismatch in {name}")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("timestamps must be strictly increasing")


@dataclass
class AteReport:
    """RMSE / MAE / MED / STD of the error-norm series per quantity."""

    velocity: dict
    position: dict
    orientation: dict

    def to_json(self) -> dict:
        return {"velocity": self.velocity, "position": self.position,
                "orientation": self.orientation}

    @classmethod
    def from_json(cls, doc) -> "AteReport":
        return cls(doc["velocity"], doc["position"], doc["orientation"])


def _stats(err_norms: np.ndarray) -> dict:
    e = np.asarray(err_norms, dtype=float)
    return {
        "rmse": float(np.sqrt(np.mean(e**2))),
        "mae": float(np.mean(e)),
        "med": float(np.median(e)),
        "std": float(np.std(e)),
    }


def _yaw(r):
    return np.arctan2(r[1, 0], r[0, 0])


def ate(pair: TrajectoryPair) -> AteReport:
    """Absolute trajectory error after initial-state alignment.

    The ground truth is composed with the yaw+translation transform matching
    the estimate at t=0 (the filter's unobservable directions); velocity
    errors are taken in the body frame, orientation errors as the geodesic
    angle.
    """
    psi = _yaw(pair.r_est[0]) - _yaw(pair.r_gt[0])
    r_align = lg.so3_exp(np.array([0.0, 0.0, psi]))
    tau = pair.p_est[0] - r_align @ pair.p_gt[0]

    r_gt = np.einsum("ij,tjk->tik", r_align, pair.r_gt)
    p_gt = pair.p_gt @ r_align.T + tau
    v_gt = pair.v_gt @ r_align.T

    e_v = np.einsum("tji,tj->ti", pair.r_est, pair.v_est) - np.einsum(
        "tji,tj->ti", r_gt, v_gt)
    e_p = pair.p_est - p_gt
    e_r = lg.so3_log(np.einsum("tji,tjk->tik", r_gt, pair.r_est))
    return AteReport(
        velocity=_stats(np.linalg.norm(e_v, axis=-1)),
        position=_stats(np.linalg.norm(e_p, axis=-1)),
        orientation=_stats(np.linalg.norm(e_r, axis=-1)),
    )


# ---------------------------------------------------------------------------
# NEES


def chi2_interval(dim: int, confidence: float = 0.95):
    """Two-sided chi-square confidence bounds by bisection on the
    regularized incomplete gamma function P(dim/2, x/2)."""
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    alpha = 1.0 - confidence

    def cdf(x):
        return special.gammainc(dim / 2.0, x / 2.0)

    def invert(target):
        lo, hi = 0.0, 1.0
        while cdf(hi) < target:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if cdf(mid) < target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    return invert(alpha / 2.0), invert(1.0 - alpha / 2.0)


NEES_SELECTORS = {
    "core": slice(0, 9),
    "orientation": slice(0, 3),
    "velocity": slice(3, 6),
    "position": slice(6, 9),
}


def nees(pair: TrajectoryPair, selector: str = "core", confidence: float = 0.95):
    """Normalized estimation error squared over the trajectory.

    The error is the right-invariant group log of estimate versus truth
    (consistent with the filter's covariance convention) restricted to the
    selected block.  Returns (eps series, (r1, r2), in-bounds fraction,
    skipped-step count); steps with a singular covariance block are skipped.
    """
    if pair.p_core is None:
        raise ValueError("TrajectoryPair.p_core is required for NEES")
    sel = NEES_SELECTORS[selector]
    xi = lg.right_error_log(pair.r_est, pair.v_est, pair.p_est,
                            pair.r_gt, pair.v_gt, pair.p_gt)[:, sel]
    p_blk = pair.p_core[:, sel, sel]
    eps = np.full(len(xi), np.nan)
    skipped = 0
    for k in range(len(xi)):
        try:
            sol = np.linalg.solve(p_blk[k], xi[k])
            eps[k] = float(xi[k] @ sol)
        except np.linalg.LinAlgError:
            skipped += 1
    r1, r2 = chi2_interval(sel.stop - sel.start, confidence)
    valid = np.isfinite(eps)
    frac = float(np.mean((eps[valid] >= r1) & (eps[valid] <= r2))) if valid.any() else 0.0
    return eps, (r1, r2), frac, skipped


# ---------------------------------------------------------------------------
# filter replay over batched episodes


class _EpisodeBatch:
    """Stacks equally long episodes along a batch axis and precomputes the
    feature channel matrices."""

    def __init__(self, episodes, model):
        lengths = {ep.n_steps for ep in episodes}
        if len(lengths) != 1:
            raise ValueError("batched episodes must have equal length")
        self.episodes = list(episodes)
        self.model = model
        self.n_steps = lengths.pop()
        self.dt = episodes[0].dt
        stack = lambda name: np.stack([getattr(ep, name) for ep in episodes], axis=1)
        self.r = stack("r")
        self.v = stack("v")
        self.p = stack("p")
        self.pc = stack("pc")
        self.w = stack("w")
        self.a = stack("a")
        self.q = stack("q")
        self.contact = stack("contact")
        self.slip = stack("slip")
        self.channels = np.stack(
            [cn.sensor_channels(model, ep.w, ep.a, ep.q, ep.qd, ep.tau)
             for ep in episodes], axis=0)  # (B, T, C)

    def windows_at(self, k: int, history: int) -> np.ndarray:
        lo = k - history + 1
        if lo >= 0:
            return self.channels[:, lo : k + 1]
        pad = np.repeat(self.channels[:, :1], -lo, axis=1)
        return np.concatenate([pad, self.channels[:, : k + 1]], axis=1)


def learned_covariances(params: cn.ContactNetParams):
    """Per-step covariance source backed by the contact network."""

    def source(batch, k, state, p_cov):
        win = batch.windows_at(k, params.history)
        feats = cn.candidate_features(win, params.layout)
        return cn.predict_covariances(params, feats)

    return source


def baseline_covariances(mode: str, model, noise: flt.NoiseParams,
                         sigma_contact_sq: float = SIGMA_CONTACT_SQ,
                         sigma_free_sq: float = SIGMA_FREE_SQ):
    """Binary-contact covariance switching per Table-style baselines.

    - ``gt-contacts``: true contact flags from the dataset.
    - ``gt-contacts-slip``: same, inflated 10x while true slip exceeds
      0.1 m/s.
    - ``heuristic-contacts``: flags from the *estimated* candidate xy-speed
      and height (kinematic candidate velocity from the filter state).
    - ``dead-reckoning``: contacts never trusted.
    """
    if mode not in BASELINES:
        raise ValueError(f"unknown baseline {mode!r}; expected one of {BASELINES}")
    eye = np.eye(3)

    def source(batch, k, state, p_cov):
        b = state.batch
        n = state.n_contacts
        if mode == "dead-reckoning":
            # strictly information-free (sigma_free is only *effectively* so)
            return np.broadcast_to(1e8 * eye, (b, n, 3, 3))
        elif mode == "heuristic-contacts":
            # estimated candidate world velocity: v + R (w x h + J qd)
            w_body = batch.w[k] - state.bg
            h = batch.channels[:, k, 6 + 3 * model.nq : 6 + 3 * model.nq + 3 * n]
            h = h.reshape(b, n, 3)
            v_rel = batch.channels[:, k, 6 + 3 * model.nq + 3 * n :].reshape(b, n, 3)
            v_body = np.cross(w_body[:, None, :], h) + v_rel
            v_world = state.v[:, None, :] + np.einsum("bij,bnj->bni", state.r, v_body)
            speed = np.linalg.norm(v_world[..., :2], axis=-1)
            height = state.pc[..., 2]
            flags = (speed <= 0.25) & (height <= 0.01)
        else:
            flags = batch.contact[k]
        sigma = np.where(flags[..., None, None], sigma_contact_sq, sigma_free_sq)
        if mode == "gt-contacts-slip":
            inflate = batch.slip[k] > SLIP_SPEED_THRESHOLD
            sigma = np.where((flags & inflate)[..., None, None],
                             sigma * SLIP_INFLATION, sigma)
        return sigma * eye

    return source


@dataclass
class ReplayResult:
    """Batched filter replay output (step index 0 is the initial state)."""

    t: np.ndarray
    r: np.ndarray  # (T, B, 3, 3)
    v: np.ndarray
    p: np.ndarray
    pc: np.ndarray
    p_core: np.ndarray = None  # (T, B, 9, 9)

    def pair(self, batch: _EpisodeBatch, b: int) -> TrajectoryPair:
        return TrajectoryPair(
            t=self.t, r_est=self.r[:, b], v_est=self.v[:, b], p_est=self.p[:, b],
            r_gt=batch.r[:, b], v_gt=batch.v[:, b], p_gt=batch.p[:, b],
            p_core=None if self.p_core is None else self.p_core[:, b],
        )


def run_filter(episodes, model, noise: flt.NoiseParams, sigma_source,
               collect_cov: bool = False) -> tuple:
    """Replay the filter over one or more episodes (batched, inference mode).

    The filter is initialized at the ground-truth state with the default
    initial covariance.  Returns (ReplayResult, _EpisodeBatch).
    """
    if not isinstance(episodes, (list, tuple)):
        episodes = [episodes]
    batch = _EpisodeBatch(episodes, model)
    b = len(episodes)
    n = model.n_candidates
    state = flt.FilterState(batch.r[0].copy(), batch.v[0].copy(),
                            batch.p[0].copy(), batch.pc[0].copy(),
                            np.zeros((b, 3)), np.zeros((b, 3)))
    p_cov = flt.init_covariance(n, batch=b)
    lay = TangentLayout(n)

    t_steps = batch.n_steps
    out = ReplayResult(
        t=batch.episodes[0].t,
        r=np.empty((t_steps, b, 3, 3)), v=np.empty((t_steps, b, 3)),
        p=np.empty((t_steps, b, 3)), pc=np.empty((t_steps, b, n, 3)),
        p_core=np.empty((t_steps, b, 9, 9)) if collect_cov else None,
    )

    def record(k):
        out.r[k] = state.r
        out.v[k] = state.v
        out.p[k] = state.p
        out.pc[k] = state.pc
        if collect_cov:
            out.p_core[k] = p_cov[:, :9, :9]

    record(0)
    for k in range(1, t_steps):
        sigma = sigma_source(batch, k, state, p_cov)
        u = flt.ImuSample(batch.w[k], batch.a[k], batch.dt)
        state, p_cov = flt.filter_step(state, p_cov, u, batch.q[k], sigma,
                                       model, noise)
        record(k)
    return out, batch


def velocity_rmse(episodes, model, noise, sigma_source) -> float:
    """Mean body-frame velocity ATE RMSE across episodes."""
    result, batch = run_filter(episodes, model, noise, sigma_source)
    vals = [ate(result.pair(batch, i)).velocity["rmse"]
            for i in range(len(batch.episodes))]
    return float(np.mean(vals))
