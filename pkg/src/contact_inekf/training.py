"""End-to-end training of the contact module through the filter.

Parallel environments stream scripted episodes; every iteration each
environment advances one fixed-length buffer through the differentiable
filter, the body-velocity L2 loss is averaged across time and environments,
reverse mode propagates to the network weights, and Adam updates them.  The
filter state and covariance persist across consecutive buffers within an
episode (the buffer boundary is the BPTT truncation point); an exhausted
episode is regenerated and that environment's filter restarts from ground
truth with the initial covariance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import contactnet as cn
from . import evaluation as ev
from . import filter as flt
from . import sim
from . import tape as tp
from .robot import desk_biped


@dataclass
class TrainConfig:
    envs: int = 16
    buffer: int = 128  # BPTT length L
    history: int = 20  # feature window H
    episode_duration: float = 10.0  # episode length T, seconds
    rate: float = 200.0
    iterations: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    scenario: str = "gait"
    hidden: tuple = (128, 64)
    eval_every: int = 100
    eval_episodes: int = 4
    grad_clip: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if self.buffer < 1:
            raise ValueError("buffer length must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


@dataclass
class TrainLog:
    iterations: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    eval_iterations: list = field(default_factory=list)
    eval_rmse: list = field(default_factory=list)
    skipped_envs: int = 0
    skipped_iterations: int = 0

    def append(self, it, loss, gnorm, wall):
        self.iterations.append(int(it))
        self.loss.append(float(loss))
        self.grad_norm.append(float(gnorm))
        self.wall_time.append(float(wall))

    def to_csv(self, path):
        evals = dict(zip(self.eval_iterations, self.eval_rmse))
        with open(path, "w") as f:
            f.write("iteration,loss,grad_norm,wall_time,eval_rmse\n")
            for i, it in enumerate(self.iterations):
                e = evals.get(it, "")
                f.write(f"{it},{self.loss[i]:.17g},{self.grad_norm[i]:.17g},"
                        f"{self.wall_time[i]:.6f},{e}\n")


def scenario_model(scenario: str, model=None):
    """Default robot for a scenario: heel/toe N=4 for the gait, an automated
    N=10 full-body candidate set for ground motions."""
    base = model if model is not None else desk_biped()
    if scenario == "gait":
        return base
    if scenario == "ground":
        bodies = ["foot_l", "foot_r", "shank_l", "shank_r", "base"]
        return base.with_candidates(base.sample_candidates(10, bodies, seed=0))
    raise ValueError(f"unknown scenario {scenario!r}")


def scenario_config(scenario: str, seed: int, duration: float, rate: float = 200.0):
    """Randomized slip-rich episode configuration for training and testing."""
    cfg = sim.noisy_config(seed=seed, scenario=scenario, duration=duration,
                           kick_speed=0.25)
    return replace(cfg, rate=rate,
                   slip=sim.SlipParams(probability=0.8, speed_range=(0.1, 0.6)))


def _episode_seed(base_seed: int, stream: int, a: int, b: int = 0) -> int:
    return int(np.random.SeedSequence([base_seed, stream, a, b]).generate_state(1)[0])


def evaluation_episodes(model, cfg: TrainConfig, count=None):
    """Held-out episodes on a seed stream disjoint from training."""
    count = cfg.eval_episodes if count is None else count
    return [sim.generate_episode(
        model, scenario_config(cfg.scenario, _episode_seed(cfg.seed, 2, i),
                               cfg.episode_duration, cfg.rate))
        for i in range(count)]


class _EnvStream:
    """One environment's endless episode stream with a step pointer."""

    def __init__(self, model, cfg: TrainConfig, env_idx: int):
        self.model = model
        self.cfg = cfg
        self.env_idx = env_idx
        self.episode_counter = -1
        self.episode = None
        self.batch = None
        self.ptr = 0
        self.roll()

    def roll(self):
        """Start a fresh episode; the caller resets the filter to its truth."""
        self.episode_counter += 1
        seed = _episode_seed(self.cfg.seed, 1, self.env_idx, self.episode_counter)
        epcfg = scenario_config(self.cfg.scenario, seed,
                                self.cfg.episode_duration, self.cfg.rate)
        self.episode = sim.generate_episode(self.model, epcfg)
        self.channels = cn.sensor_channels(
            self.model, self.episode.w, self.episode.a, self.episode.q,
            self.episode.qd, self.episode.tau)
        self.ptr = 1  # step k consumes row k (IMU interval k-1 -> k)

    def initial_state(self):
        ep = self.episode
        return ep.r[0], ep.v[0], ep.p[0], ep.pc[0]


@dataclass
class RolloutBuffer:
    """L steps of batched inputs plus reset bookkeeping."""

    w: np.ndarray  # (L, B, 3)
    a: np.ndarray
    q: np.ndarray  # (L, B, nq)
    feats: np.ndarray  # (L, B, N, d_in)
    gt_body_v: np.ndarray  # (L, B, 3)
    reset_mask: np.ndarray  # (L, B) bool; reset happens before the step
    reset_r: np.ndarray  # (L, B, 3, 3) new-episode initial states
    reset_v: np.ndarray
    reset_p: np.ndarray
    reset_pc: np.ndarray
    dt: float

    @property
    def steps(self):
        return self.w.shape[0]

    @property
    def batch(self):
        return self.w.shape[1]

    def replace_lane(self, bad: int, good: int):
        for name in ("w", "a", "q", "feats", "gt_body_v", "reset_mask",
                     "reset_r", "reset_v", "reset_p", "reset_pc"):
            getattr(self, name)[:, bad] = getattr(self, name)[:, good]


def assemble_buffer(envs, layout, history: int) -> RolloutBuffer:
    """Advance every environment by L steps, regenerating episodes at their
    ends, and gather the batched step inputs."""
    cfg = envs[0].cfg
    model = envs[0].model
    l_steps = cfg.buffer
    b = len(envs)
    n = model.n_candidates
    d_in = layout.input_dim(history)
    buf = RolloutBuffer(
        w=np.empty((l_steps, b, 3)), a=np.empty((l_steps, b, 3)),
        q=np.empty((l_steps, b, model.nq)),
        feats=np.empty((l_steps, b, n, d_in)),
        gt_body_v=np.empty((l_steps, b, 3)),
        reset_mask=np.zeros((l_steps, b), dtype=bool),
        reset_r=np.zeros((l_steps, b, 3, 3)), reset_v=np.zeros((l_steps, b, 3)),
        reset_p=np.zeros((l_steps, b, 3)), reset_pc=np.zeros((l_steps, b, n, 3)),
        dt=1.0 / cfg.rate,
    )
    for e, env in enumerate(envs):
        # feature windows never straddle an episode boundary, so gather the
        # consumed rows in per-episode segments and vectorize per segment
        segments = []
        seg_rows = []
        seg_start = 0
        seg_channels = env.channels
        for j in range(l_steps):
            if env.ptr >= env.episode.n_steps:
                if seg_rows:
                    segments.append((seg_channels, seg_start, np.array(seg_rows)))
                env.roll()
                seg_channels = env.channels
                seg_rows = []
                seg_start = j
                buf.reset_mask[j, e] = True
                r0, v0, p0, pc0 = env.initial_state()
                buf.reset_r[j, e] = r0
                buf.reset_v[j, e] = v0
                buf.reset_p[j, e] = p0
                buf.reset_pc[j, e] = pc0
            ep = env.episode
            k = env.ptr
            buf.w[j, e] = ep.w[k]
            buf.a[j, e] = ep.a[k]
            buf.q[j, e] = ep.q[k]
            buf.gt_body_v[j, e] = ep.r[k].T @ ep.v[k]
            seg_rows.append(k)
            env.ptr += 1
        segments.append((seg_channels, seg_start, np.array(seg_rows)))
        for channels, j0, rows in segments:
            win = cn.windows(channels, rows, history)
            buf.feats[j0 : j0 + len(rows), e] = cn.candidate_features(win, layout)
    return buf


def rollout_loss(params: cn.ContactNetParams, state0: flt.FilterState, p0,
                 buf: RolloutBuffer, model, noise: flt.NoiseParams,
                 tape: tp.Tape = None, weights=None):
    """Run L taped filter steps and accumulate the body-velocity L2 loss.

    The incoming state and covariance are treated as constants (truncation
    boundary).  Returns (scalar loss Var, per-env loss Var, final state,
    final covariance, tape); the final state/covariance are detached copies
    for persistence across buffers.
    """
    if tape is None:
        tape = tp.Tape()
    if weights is None:
        weights = params.leaves(tape)
    state = flt.FilterState(*(np.asarray(tp.value(f)) for f in (
        state0.r, state0.v, state0.p, state0.pc, state0.bg, state0.ba)))
    p_cov = np.asarray(tp.value(p0))
    b = buf.batch
    n = state.n_contacts

    per_env = None
    for j in range(buf.steps):
        if buf.reset_mask[j].any():
            mask = buf.reset_mask[j]
            state = flt.FilterState(
                tp.where_lanes(mask, buf.reset_r[j], state.r),
                tp.where_lanes(mask, buf.reset_v[j], state.v),
                tp.where_lanes(mask, buf.reset_p[j], state.p),
                tp.where_lanes(mask, buf.reset_pc[j], state.pc),
                tp.where_lanes(mask, np.zeros((b, 3)), state.bg),
                tp.where_lanes(mask, np.zeros((b, 3)), state.ba),
            )
            p_cov = tp.where_lanes(mask, flt.init_covariance(n, batch=b), p_cov)
        sigma = cn.predict_covariances(params, buf.feats[j], weights=weights)
        u = flt.ImuSample(buf.w[j], buf.a[j], buf.dt)
        state, p_cov = flt.filter_step(state, p_cov, u, buf.q[j], sigma,
                                       model, noise)
        e_v = tp.sub(tp.matvec(tp.transpose(state.r), state.v), buf.gt_body_v[j])
        sq = tp.sum_last(tp.mul(e_v, e_v))  # (B,)
        per_env = sq if per_env is None else tp.add(per_env, sq)

    per_env = tp.scale(per_env, 1.0 / buf.steps)
    loss = tp.scale(tp.total(per_env), 1.0 / b)
    return loss, per_env, state.values(), np.asarray(tp.value(p_cov)), tape


def adam_step(weights: dict, grads: dict, m: dict, v: dict, t: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """Bias-corrected Adam update; returns (new_weights, m, v)."""
    out = {}
    for name, w in weights.items():
        g = grads[name]
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1**t)
        v_hat = v[name] / (1.0 - beta2**t)
        out[name] = w - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out, m, v


def train(model, cfg: TrainConfig, noise: flt.NoiseParams = None,
          params: cn.ContactNetParams = None, progress=None):
    """Full training loop; deterministic given (model, cfg, seed).

    Returns (trained ContactNetParams, TrainLog).  ``progress`` is an
    optional callable(iteration, log) for streaming output.
    """
    noise = noise or flt.NoiseParams()
    if params is None:
        params = cn.ContactNetParams.init(model, history=cfg.history,
                                          hidden=cfg.hidden, seed=cfg.seed)
    layout = params.layout
    envs = [_EnvStream(model, cfg, e) for e in range(cfg.envs)]
    b = cfg.envs
    n = model.n_candidates

    # persistent filter state across buffers
    init = [env.initial_state() for env in envs]
    state = flt.FilterState(
        np.stack([i[0] for i in init]), np.stack([i[1] for i in init]),
        np.stack([i[2] for i in init]), np.stack([i[3] for i in init]),
        np.zeros((b, 3)), np.zeros((b, 3)))
    p_cov = flt.init_covariance(n, batch=b)

    log = TrainLog()
    eval_eps = evaluation_episodes(model, cfg) if cfg.eval_episodes > 0 else []

    def run_eval(it, current):
        if not eval_eps:
            return
        rmse = ev.velocity_rmse(eval_eps, model, noise,
                                ev.learned_covariances(current))
        log.eval_iterations.append(int(it))
        log.eval_rmse.append(float(rmse))

    moments_m = {k: np.zeros_like(w) for k, w in params.weights().items()}
    moments_v = {k: np.zeros_like(w) for k, w in params.weights().items()}
    run_eval(0, params)
    t_start = time.perf_counter()

    for it in range(1, cfg.iterations + 1):
        buf = assemble_buffer(envs, layout, cfg.history)
        lane_w = np.ones(b)
        try:
            tape = tp.Tape()
            weights = params.leaves(tape)
            loss, per_env, state_new, p_new, tape = rollout_loss(
                params, state, p_cov, buf, model, noise, tape=tape,
                weights=weights)
            vals = tp.value(per_env)
        except (flt.InvalidCovarianceError, flt.SingularUpdateError,
                np.linalg.LinAlgError):
            # a lane blew up mid-rollout; identify offenders lane by lane
            vals = _probe_lanes(params, state, p_cov, buf, model, noise)

        if not np.all(np.isfinite(vals)):
            bad = np.where(~np.isfinite(vals))[0]
            good = np.where(np.isfinite(vals))[0]
            log.skipped_envs += len(bad)
            if len(good) == 0:
                log.skipped_iterations += 1
                for e in bad:
                    envs[e].roll()
                state, p_cov = _reset_lanes(state, p_cov, envs, range(b))
                continue
            # rerun with the offending lanes replaced by a healthy one at
            # zero weight (IEEE NaNs poison a shared tape otherwise)
            for e in bad:
                buf.replace_lane(e, good[0])
                lane_w[e] = 0.0
            state = _copy_lanes(state, bad, good[0])
            p_cov = p_cov.copy()
            p_cov[bad] = p_cov[good[0]]
            tape = tp.Tape()
            weights = params.leaves(tape)
            loss, per_env, state_new, p_new, tape = rollout_loss(
                params, state, p_cov, buf, model, noise, tape=tape,
                weights=weights)
            wsum = lane_w.sum()
            loss = tp.scale(tp.total(tp.mul(per_env, lane_w)), 1.0 / wsum)

        grads = dict(zip(cn.PARAM_NAMES,
                         tape.grad(loss, [weights[k] for k in cn.PARAM_NAMES])))
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        if not np.isfinite(gnorm):
            log.skipped_iterations += 1
            log.append(it, tp.value(loss), np.nan, time.perf_counter() - t_start)
            continue
        if cfg.grad_clip > 0 and gnorm > cfg.grad_clip:
            scale = cfg.grad_clip / gnorm
            grads = {k: g * scale for k, g in grads.items()}

        new_w, moments_m, moments_v = adam_step(
            params.weights(), grads, moments_m, moments_v, it,
            cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        params = params.updated(new_w)

        state, p_cov = state_new, p_new
        bad_lanes = np.where(lane_w == 0.0)[0]
        if len(bad_lanes):
            for e in bad_lanes:
                envs[e].roll()
            state, p_cov = _reset_lanes(state, p_cov, envs, bad_lanes)

        log.append(it, tp.value(loss), gnorm, time.perf_counter() - t_start)
        if cfg.eval_every > 0 and it % cfg.eval_every == 0:
            run_eval(it, params)
        if progress is not None:
            progress(it, log, params)

    if cfg.eval_every > 0 and (not log.eval_iterations
                               or log.eval_iterations[-1] != cfg.iterations):
        run_eval(cfg.iterations, params)
    return params, log


def _probe_lanes(params, state, p_cov, buf, model, noise) -> np.ndarray:
    """Untaped per-lane replay to locate diverging environments."""
    b = buf.batch
    vals = np.full(b, np.nan)
    for e in range(b):
        lane_state = flt.FilterState(*(np.asarray(tp.value(f))[e : e + 1].copy()
                                       for f in (state.r, state.v, state.p,
                                                 state.pc, state.bg, state.ba)))
        lane_p = np.asarray(tp.value(p_cov))[e : e + 1].copy()
        lane_buf = RolloutBuffer(
            w=buf.w[:, e : e + 1], a=buf.a[:, e : e + 1], q=buf.q[:, e : e + 1],
            feats=buf.feats[:, e : e + 1], gt_body_v=buf.gt_body_v[:, e : e + 1],
            reset_mask=buf.reset_mask[:, e : e + 1],
            reset_r=buf.reset_r[:, e : e + 1], reset_v=buf.reset_v[:, e : e + 1],
            reset_p=buf.reset_p[:, e : e + 1], reset_pc=buf.reset_pc[:, e : e + 1],
            dt=buf.dt)
        try:
            _, per_env, _, _, _ = rollout_loss(params, lane_state, lane_p,
                                               lane_buf, model, noise,
                                               weights=params.weights())
            vals[e] = float(tp.value(per_env)[0])
        except (flt.InvalidCovarianceError, flt.SingularUpdateError,
                np.linalg.LinAlgError):
            vals[e] = np.nan
    return vals


def _copy_lanes(state: flt.FilterState, bad, good: int) -> flt.FilterState:
    out = []
    for f in (state.r, state.v, state.p, state.pc, state.bg, state.ba):
        arr = np.asarray(tp.value(f)).copy()
        arr[bad] = arr[good]
        out.append(arr)
    return flt.FilterState(*out)


def _reset_lanes(state: flt.FilterState, p_cov, envs, lanes):
    arrs = [np.asarray(tp.value(f)).copy()
            for f in (state.r, state.v, state.p, state.pc, state.bg, state.ba)]
    p_cov = np.asarray(p_cov).copy()
    for e in lanes:
        r0, v0, p0, pc0 = envs[e].initial_state()
        arrs[0][e], arrs[1][e], arrs[2][e], arrs[3][e] = r0, v0, p0, pc0
        arrs[4][e] = 0.0
        arrs[5][e] = 0.0
        p_cov[e] = flt.init_covariance(envs[e].model.n_candidates)[0]
    return flt.FilterState(*arrs), p_cov
