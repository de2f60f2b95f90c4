"""Learned contact covariance module.

A small MLP, shared across candidates, maps a time-normalized window of
proprioceptive history to the 6 entries of a lower-triangular factor L per
candidate; the contact velocity covariance is L L^T (+ jitter floor).  The
diagonal of L passes through a softplus to remove the sign-flip symmetry.

Feature layout (version "1"), per candidate i:

    [gyro(3), accel(3), q_chain(3..), qd_chain, tau_chain, p_bc_i(3), v_bc_i(3)]

windowed over H frames, normalized per channel along the time dimension,
flattened time-major.  Candidate chains must have equal length so weights can
be shared.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tape as tp

LAYOUT_VERSION = "1"
NORM_EPS = 1e-6
COV_JITTER = 1e-8
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")
DIAG_IDX = (0, 2, 5)  # row-major lower-triangle positions L00, L11, L22
OFF_IDX = (1, 3, 4)  # L10, L20, L21


class CheckpointError(ValueError):
    pass


@dataclass
class SensorFrame:
    """One timestep of proprioceptive inputs."""

    w: np.ndarray  # body rates, rad/s
    a: np.ndarray  # specific force, m/s^2
    q: np.ndarray  # joint positions, rad
    qd: np.ndarray  # joint velocities, rad/s
    tau: np.ndarray  # actuator torques, N*m
    p_bc: np.ndarray  # (N, 3) candidate positions in the body frame
    v_bc: np.ndarray  # (N, 3) candidate velocities in the body frame

    def __post_init__(self):
        for name in ("w", "a", "q", "qd", "tau", "p_bc", "v_bc"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in SensorFrame.{name}")
            setattr(self, name, arr)

    def channels(self) -> np.ndarray:
        return np.concatenate(
            [self.w, self.a, self.q, self.qd, self.tau,
             self.p_bc.ravel(), self.v_bc.ravel()]
        )


class HistoryWindow:
    """Ring buffer of the last H frames, oldest-first.

    Before warm-up the buffer is padded by repeating the first frame, so its
    length is exactly H from the first push onward.
    """

    def __init__(self, history: int):
        if history < 1:
            raise ValueError("history must be >= 1")
        self.history = history
        self._rows = None
        self._count = 0

    @property
    def warm(self) -> bool:
        return self._count >= self.history

    def push(self, frame: SensorFrame):
        row = frame.channels()
        if self._rows is None:
            self._rows = np.tile(row, (self.history, 1))
        else:
            self._rows = np.roll(self._rows, -1, axis=0)
            self._rows[-1] = row
        self._count += 1

    def as_array(self) -> np.ndarray:
        if self._rows is None:
            raise ValueError("window is empty")
        return self._rows.copy()


@dataclass(frozen=True)
class FeatureLayout:
    """Versioned channel layout tying the network input to a robot model."""

    nq: int
    n_candidates: int
    chains: tuple  # per-candidate tuple of joint indices
    version: str = LAYOUT_VERSION

    @classmethod
    def from_model(cls, model) -> "FeatureLayout":
        chains = tuple(tuple(model.candidate_chain(i)) for i in range(model.n_candidates))
        lens = {len(c) for c in chains}
        if len(lens) != 1:
            raise ValueError("candidate chains must have equal length for weight sharing")
        return cls(nq=model.nq, n_candidates=model.n_candidates, chains=chains)

    @property
    def channel_count(self) -> int:
        return 6 + 3 * self.nq + 6 * self.n_candidates

    @property
    def channels_per_candidate(self) -> int:
        return 12 + 3 * len(self.chains[0])

    def candidate_columns(self, i: int) -> np.ndarray:
        chain = np.asarray(self.chains[i], dtype=int)
        q0 = 6
        qd0 = 6 + self.nq
        tau0 = 6 + 2 * self.nq
        pbc0 = 6 + 3 * self.nq + 3 * i
        vbc0 = 6 + 3 * self.nq + 3 * self.n_candidates + 3 * i
        return np.concatenate(
            [np.arange(6), q0 + chain, qd0 + chain, tau0 + chain,
             pbc0 + np.arange(3), vbc0 + np.arange(3)]
        )

    def input_dim(self, history: int) -> int:
        return history * self.channels_per_candidate

    def to_json(self) -> dict:
        return {"version": self.version, "nq": self.nq,
                "n_candidates": self.n_candidates,
                "chains": [list(c) for c in self.chains]}

    @classmethod
    def from_json(cls, doc) -> "FeatureLayout":
        return cls(nq=doc["nq"], n_candidates=doc["n_candidates"],
                   chains=tuple(tuple(c) for c in doc["chains"]),
                   version=doc["version"])


@dataclass
class ContactNetParams:
    """MLP weights (column-major application: y = x @ w + b) plus metadata."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    history: int
    layout: FeatureLayout

    @classmethod
    def init(cls, model, history: int = 20, hidden=(128, 64), seed: int = 0,
             diag_bias: float = -1.0) -> "ContactNetParams":
        """He-initialized weights; the output diagonal bias sets the initial
        covariance scale (softplus(diag_bias)^2 per axis)."""
        layout = FeatureLayout.from_model(model)
        d_in = layout.input_dim(history)
        h1, h2 = hidden
        rng = np.random.default_rng(seed)

        def he(n_in, n_out):
            return rng.normal(scale=np.sqrt(2.0 / n_in), size=(n_in, n_out))

        b3 = np.zeros(6)
        b3[list(DIAG_IDX)] = diag_bias
        return cls(
            w1=he(d_in, h1), b1=np.zeros(h1),
            w2=he(h1, h2), b2=np.zeros(h2),
            w3=rng.normal(scale=np.sqrt(1.0 / h2), size=(h2, 6)) * 0.1, b3=b3,
            history=history, layout=layout,
        )

    @property
    def hidden(self):
        return (self.w1.shape[1], self.w2.shape[1])

    def weights(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def leaves(self, tape: tp.Tape) -> dict:
        return {name: tape.leaf(getattr(self, name), name=name) for name in PARAM_NAMES}

    def updated(self, weights: dict) -> "ContactNetParams":
        return ContactNetParams(history=self.history, layout=self.layout,
                                **{n: np.asarray(weights[n], dtype=float)
                                   for n in PARAM_NAMES})

    def n_params(self) -> int:
        return sum(getattr(self, n).size for n in PARAM_NAMES)

    # -- checkpoint format --------------------------------------------------

    def to_json(self) -> dict:
        return {
            "architecture": {
                "layers": [self.w1.shape[0], *self.hidden, 6],
                "history": self.history,
                "n_candidates": self.layout.n_candidates,
                "activation": "relu",
                "feature_layout": self.layout.to_json(),
            },
            "weights": {n: list(np.asarray(getattr(self, n)).ravel()) for n in PARAM_NAMES},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ContactNetParams":
        arch = doc["architecture"]
        layout_doc = arch["feature_layout"]
        if layout_doc["version"] != LAYOUT_VERSION:
            raise CheckpointError(
                f"feature layout version {layout_doc['version']!r} does not match "
                f"this build ({LAYOUT_VERSION!r}); refusing to load"
            )
        layout = FeatureLayout.from_json(layout_doc)
        d_in, h1, h2, d_out = arch["layers"]
        shapes = {"w1": (d_in, h1), "b1": (h1,), "w2": (h1, h2), "b2": (h2,),
                  "w3": (h2, d_out), "b3": (d_out,)}
        weights = {}
        for name, shape in shapes.items():
            flat = np.asarray(doc["weights"][name], dtype=float)
            if flat.size != int(np.prod(shape)):
                raise CheckpointError(f"weight {name} has wrong size")
            weights[name] = flat.reshape(shape)
        return cls(history=arch["history"], layout=layout, **weights)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path) -> "ContactNetParams":
        with open(path) as f:
            return cls.from_json(json.load(f))


# ---------------------------------------------------------------------------
# featurization


def sensor_channels(model, w, a, q, qd, tau) -> np.ndarray:
    """Per-step channel matrix (T, C) from raw measured signals.

    Candidate-relative positions come from FK of the measured joints and
    relative velocities from the kinematic Jacobian times measured joint
    rates; no filter state enters the features.
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))
    t = w.shape[0]
    p_bc = model.fk_all(q)
    v_bc = np.einsum("tnij,tj->tni", model.jac_all(q), np.asarray(qd, dtype=float))
    return np.concatenate(
        [w, np.atleast_2d(a), np.atleast_2d(q), np.atleast_2d(qd),
         np.atleast_2d(tau), p_bc.reshape(t, -1), v_bc.reshape(t, -1)],
        axis=-1,
    )


def windows(channels: np.ndarray, steps, history: int) -> np.ndarray:
    """History windows ending at each step index, (len(steps), H, C).

    Steps earlier than H-1 are padded by repeating the first frame.
    """
    channels = np.asarray(channels, dtype=float)
    steps = np.asarray(steps, dtype=int)
    padded = np.concatenate(
        [np.repeat(channels[:1], history - 1, axis=0), channels], axis=0
    )
    idx = steps[:, None] + np.arange(history)[None, :]
    return padded[idx]


def normalize_history(win: np.ndarray) -> np.ndarray:
    """Per-channel normalization along the time dimension of (..., H, C)."""
    win = np.asarray(win, dtype=float)
    mean = win.mean(axis=-2, keepdims=True)
    std = win.std(axis=-2, keepdims=True)
    return (win - mean) / (std + NORM_EPS)


def candidate_features(win: np.ndarray, layout: FeatureLayout) -> np.ndarray:
    """Per-candidate flattened feature vectors from raw windows.

    (..., H, C) -> (..., N, H * Cc), normalized along time then sliced to each
    candidate's channels and flattened time-major.
    """
    norm = normalize_history(win)
    lead = norm.shape[:-2]
    h = norm.shape[-2]
    feats = np.empty(lead + (layout.n_candidates, h * layout.channels_per_candidate))
    for i in range(layout.n_candidates):
        cols = layout.candidate_columns(i)
        feats[..., i, :] = norm[..., :, cols].reshape(lead + (-1,))
    return feats


# ---------------------------------------------------------------------------
# network


def forward(weights, feats):
    """Map per-candidate features (M, d_in) to factors L (M, 3, 3).

    ``weights`` maps PARAM_NAMES to arrays or tape Vars; candidates share all
    weights, so the candidate axis is folded into the row dimension M.
    """
    y = tp.relu(tp.add(tp.matmul(feats, weights["w1"]), weights["b1"]))
    y = tp.relu(tp.add(tp.matmul(y, weights["w2"]), weights["b2"]))
    y = tp.add(tp.matmul(y, weights["w3"]), weights["b3"])
    diag = tp.softplus(tp.take_last(y, DIAG_IDX))
    off = tp.take_last(y, OFF_IDX)
    return tp.build_lower3(diag, off)


def chol_to_cov(l_factor):
    """Sigma = L L^T + jitter*I; symmetric positive definite by construction."""
    return tp.add(tp.matmul(l_factor, tp.transpose(l_factor)), COV_JITTER * np.eye(3))


def predict_covariances(params: ContactNetParams, feats, weights=None):
    """Covariances (B, N, 3, 3) from features (B, N, d_in).

    Pass tape-leaf ``weights`` to record the computation for training.
    """
    if weights is None:
        weights = params.weights()
    b, n = tp.value(feats).shape[:2]
    flat = np.asarray(feats, dtype=float).reshape(b * n, -1)
    l_factor = forward(weights, flat)
    sigma = chol_to_cov(l_factor)
    return tp.reshape(sigma, (b, n, 3, 3))


def total_stddev(sigma_c) -> np.ndarray:
    """sqrt(trace(Sigma)) per candidate; the reportable confidence scalar."""
    sc = tp.value(sigma_c)
    return np.sqrt(sc[..., 0, 0] + sc[..., 1, 1] + sc[..., 2, 2])
