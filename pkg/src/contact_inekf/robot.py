"""Kinematic model of a simple legged robot.

A tree of revolute joints plus rigid attachments, per-link collision
primitives with uniform surface sampling, forward kinematics and point
Jacobians for contact-candidate points, closed-form 3-DOF leg IK, and
automated candidate selection by farthest point sampling.

Joint vector ordering is the order of ``RobotModel.joints``.  All vector
inputs broadcast over leading batch axes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import liegroup as lg


class RobotModelError(Exception):
    """Base class for robot model errors."""


class CandidateNotFoundError(RobotModelError):
    pass


class ConfigurationError(RobotModelError):
    pass


class ReachabilityError(RobotModelError):
    """Unreachable IK target; carries the nearest reachable point."""

    def __init__(self, msg: str, clamped: np.ndarray):
        super().__init__(msg)
        self.clamped = np.asarray(clamped, dtype=float)


@dataclass(frozen=True)
class BoxGeometry:
    size: tuple
    center: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class CapsuleGeometry:
    radius: float
    length: float  # cylinder section, along local z
    center: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class MeshGeometry:
    vertices: tuple  # (V, 3) nested tuples
    faces: tuple  # (F, 3) vertex indices


@dataclass(frozen=True)
class Link:
    name: str
    geometry: object = None


@dataclass(frozen=True)
class Joint:
    name: str
    parent: str
    child: str
    axis: tuple  # unit vector in parent frame
    origin: tuple  # offset in parent frame


@dataclass(frozen=True)
class Attachment:
    """Rigid (fixed) link attachment."""

    parent: str
    child: str
    origin: tuple


@dataclass(frozen=True)
class CandidatePoint:
    link: str
    offset: tuple
    index: int


@dataclass(frozen=True)
class LegChain:
    """Roll-pitch-pitch leg metadata enabling the closed-form IK."""

    name: str
    joints: tuple  # three joint names: hip roll, hip pitch, knee pitch
    foot_link: str
    hip: tuple  # hip point in base frame
    l1: float
    l2: float


class RobotModel:
    """Immutable kinematic tree; all queries are read-only and thread-safe."""

    def __init__(self, name, links, joints, attachments, candidates, legs,
                 nominal_q, base_link="base"):
        self.name = name
        self.base_link = base_link
        self.links = {l.name: l for l in links}
        self.joints = list(joints)
        self.attachments = list(attachments)
        self.candidates = list(candidates)
        self.legs = {leg.name: leg for leg in legs}
        self.nominal_q = np.asarray(nominal_q, dtype=float)
        self._validate()
        self._joint_index = {j.name: i for i, j in enumerate(self.joints)}
        self._build_paths()

    # -- structure ---------------------------------------------------------

    @property
    def nq(self) -> int:
        return len(self.joints)

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)

    def joint_index(self, name: str) -> int:
        return self._joint_index[name]

    def chain_joints(self, link: str):
        """Joint indices on the path from base to ``link``."""
        return self._paths[link]

    def candidate_chain(self, i: int):
        return self.chain_joints(self.candidates[i].link)

    def _validate(self):
        if self.base_link not in self.links:
            raise ConfigurationError(f"missing base link {self.base_link!r}")
        for j in self.joints:
            if j.parent not in self.links or j.child not in self.links:
                raise ConfigurationError(f"joint {j.name!r} references unknown link")
            if abs(np.linalg.norm(np.asarray(j.axis, dtype=float)) - 1.0) > 1e-9:
                raise ConfigurationError(f"joint {j.name!r} axis is not unit-norm")
        for a in self.attachments:
            if a.parent not in self.links or a.child not in self.links:
                raise ConfigurationError(f"attachment to {a.child!r} references unknown link")
        for c in self.candidates:
            if c.link not in self.links:
                raise ConfigurationError(f"candidate {c.index} references unknown link {c.link!r}")
        idx = sorted(c.index for c in self.candidates)
        if self.candidates and idx != list(range(len(idx))):
            raise ConfigurationError("candidate indices must be contiguous from 0")
        if self.nominal_q.shape != (len(self.joints),):
            raise ConfigurationError("nominal_q length must match joint count")

    def _build_paths(self):
        # parent pointers: link -> (parent link, joint index or None, origin)
        parent = {}
        for i, j in enumerate(self.joints):
            if j.child in parent:
                raise ConfigurationError(f"link {j.child!r} has two parents")
            parent[j.child] = (j.parent, i)
        for a in self.attachments:
            if a.child in parent:
                raise ConfigurationError(f"link {a.child!r} has two parents")
            parent[a.child] = (a.parent, None)
        self._parent = parent
        # topological order, cycle check
        order = []
        seen = {self.base_link}
        pending = {name for name in self.links if name != self.base_link}
        while pending:
            ready = [n for n in pending if n in parent and parent[n][0] in seen]
            if not ready:
                raise ConfigurationError("kinematic tree is cyclic or disconnected")
            for n in sorted(ready):
                order.append(n)
                seen.add(n)
                pending.remove(n)
        self._topo = order
        paths = {self.base_link: ()}
        for n in order:
            p, jidx = parent[n]
            paths[n] = paths[p] + ((jidx,) if jidx is not None else ())
        self._paths = paths

    # -- kinematics ---------------------------------------------------------

    def link_poses(self, q):
        """Base-frame pose of every link: dict name -> (R (...,3,3), p (...,3))."""
        q = np.asarray(q, dtype=float)
        if q.shape[-1] != self.nq:
            raise ValueError(f"expected joint vector of length {self.nq}")
        lead = q.shape[:-1]
        eye = np.broadcast_to(np.eye(3), lead + (3, 3))
        zero = np.zeros(lead + (3,))
        poses = {self.base_link: (eye, zero)}
        for name in self._topo:
            pname, jidx = self._parent[name]
            rp, pp = poses[pname]
            if jidx is None:
                att = next(a for a in self.attachments if a.child == name)
                origin = np.asarray(att.origin, dtype=float)
                poses[name] = (rp, pp + (rp @ origin[..., None])[..., 0])
            else:
                j = self.joints[jidx]
                origin = np.asarray(j.origin, dtype=float)
                k = lg.skew(np.asarray(j.axis, dtype=float))
                k2 = k @ k
                a = q[..., jidx]
                rj = (
                    np.eye(3)
                    + np.sin(a)[..., None, None] * k
                    + (1.0 - np.cos(a))[..., None, None] * k2
                )
                poses[name] = (rp @ rj, pp + (rp @ origin[..., None])[..., 0])
        return poses

    def fk_all(self, q):
        """Positions of all candidates in the base frame, (..., N, 3)."""
        poses = self.link_poses(q)
        cols = []
        for c in self.candidates:
            r, p = poses[c.link]
            off = np.asarray(c.offset, dtype=float)
            cols.append(p + (r @ off[..., None])[..., 0])
        return np.stack(cols, axis=-2)

    def jac_all(self, q):
        """Point Jacobians d h_i / d q for all candidates, (..., N, 3, nq)."""
        q = np.asarray(q, dtype=float)
        poses = self.link_poses(q)
        lead = q.shape[:-1]
        out = np.zeros(lead + (self.n_candidates, 3, self.nq))
        for ci, c in enumerate(self.candidates):
            r, p = poses[c.link]
            pc = p + (r @ np.asarray(c.offset, dtype=float)[..., None])[..., 0]
            for jidx in self._paths[c.link]:
                j = self.joints[jidx]
                rp, pp = poses[j.parent]
                axis_w = (rp @ np.asarray(j.axis, dtype=float)[..., None])[..., 0]
                pivot = pp + (rp @ np.asarray(j.origin, dtype=float)[..., None])[..., 0]
                out[..., ci, :, jidx] = np.cross(axis_w, pc - pivot)
        return out

    def forward_kinematics(self, q, i: int):
        """Position of candidate ``i`` relative to the base, in the base frame."""
        self._check_candidate(i)
        return self.fk_all(q)[..., i, :]

    def point_jacobian(self, q, i: int):
        self._check_candidate(i)
        return self.jac_all(q)[..., i, :, :]

    def _check_candidate(self, i):
        if not 0 <= i < self.n_candidates:
            raise CandidateNotFoundError(f"candidate index {i} not in 0..{self.n_candidates - 1}")

    # -- closed-form leg IK --------------------------------------------------

    def leg_ik(self, leg: str, target):
        """Joint angles (roll, hip pitch, knee pitch) placing the foot link
        origin at ``target`` (base frame), knee-forward branch.

        Raises :class:`ReachabilityError` carrying the clamped nearest
        reachable point for targets outside the reachable shell.
        """
        chain = self.legs[leg]
        target = np.asarray(target, dtype=float)
        d = target - np.asarray(chain.hip, dtype=float)
        r = np.linalg.norm(d)
        r_max = (chain.l1 + chain.l2) * (1.0 - 1e-12)
        r_min = abs(chain.l1 - chain.l2)
        if r < 1e-9:
            clamped = np.asarray(chain.hip) + np.array([0.0, 0.0, -max(r_min, 1e-3)])
            raise ReachabilityError(f"degenerate target at hip of leg {leg!r}", clamped)
        if r > r_max:
            clamped = np.asarray(chain.hip) + d * ((chain.l1 + chain.l2) / r)
            raise ReachabilityError(f"target beyond reach of leg {leg!r}", clamped)
        if r < r_min:
            scale = r_min / r if r > 0 else 0.0
            clamped = np.asarray(chain.hip) + d * scale
            raise ReachabilityError(f"target inside minimum reach of leg {leg!r}", clamped)

        q1 = np.arctan2(d[1], -d[2])
        c1, s1 = np.cos(q1), np.sin(q1)
        px = d[0]
        pz = -s1 * d[1] + c1 * d[2]  # in-plane vertical component (negative down)

        cos_gamma = np.clip(
            (chain.l1**2 + chain.l2**2 - r**2) / (2.0 * chain.l1 * chain.l2), -1.0, 1.0
        )
        gamma = np.arccos(cos_gamma)
        q3 = np.pi - gamma

        alpha = np.arctan2(px, -pz)
        cos_beta = np.clip(
            (chain.l1**2 + r**2 - chain.l2**2) / (2.0 * chain.l1 * r), -1.0, 1.0
        )
        beta = np.arccos(cos_beta)
        q2 = -(alpha + beta)
        return np.array([q1, q2, q3])

    def set_leg_q(self, q, leg: str, angles):
        """Write a leg's three joint angles into a full joint vector (in place)."""
        for name, val in zip(self.legs[leg].joints, angles):
            q[..., self._joint_index[name]] = val
        return q

    # -- surface sampling and candidate selection ----------------------------

    def sample_candidates(self, n: int, bodies, seed: int):
        """Automated candidate placement.

        10*n points are sampled uniformly on each listed body's surface,
        expressed in the base frame at the nominal pose, pooled in canonical
        (sorted body, sample index) order, and reduced to ``n`` points by
        farthest point sampling started from a uniformly drawn seed point.
        """
        if n < 1:
            raise ConfigurationError("need n >= 1 candidates")
        bodies = sorted(set(bodies))
        if not bodies:
            raise ConfigurationError("body set must be non-empty")
        for b in bodies:
            if b not in self.links:
                raise ConfigurationError(f"unknown body {b!r}")
            if self.links[b].geometry is None:
                raise ConfigurationError(f"body {b!r} has no surface geometry")
        rng = np.random.default_rng(seed)
        poses = self.link_poses(self.nominal_q)
        local_pts = []
        base_pts = []
        owners = []
        for b in bodies:
            pts = sample_surface(self.links[b].geometry, 10 * n, rng)
            r, p = poses[b]
            local_pts.append(pts)
            base_pts.append(p + pts @ r.T)
            owners.extend([b] * len(pts))
        pool_local = np.concatenate(local_pts, axis=0)
        pool_base = np.concatenate(base_pts, axis=0)

        chosen = farthest_point_sampling(pool_base, n, int(rng.integers(len(pool_base))))
        return [
            CandidatePoint(link=owners[k], offset=tuple(pool_local[k]), index=i)
            for i, k in enumerate(chosen)
        ]

    def with_candidates(self, candidates):
        """Copy of this model with a different candidate set."""
        return RobotModel(
            self.name, list(self.links.values()), self.joints, self.attachments,
            list(candidates), list(self.legs.values()), self.nominal_q, self.base_link,
        )

    # -- serialization -------------------------------------------------------

    def to_json(self) -> dict:
        def geom(g):
            if g is None:
                return None
            if isinstance(g, BoxGeometry):
                return {"type": "box", "size": list(g.size), "center": list(g.center)}
            if isinstance(g, CapsuleGeometry):
                return {"type": "capsule", "radius": g.radius, "length": g.length,
                        "center": list(g.center)}
            if isinstance(g, MeshGeometry):
                return {"type": "mesh", "vertices": [list(v) for v in g.vertices],
                        "faces": [list(f) for f in g.faces]}
            raise ConfigurationError(f"unknown geometry {type(g)!r}")

        return {
            "name": self.name,
            "base_link": self.base_link,
            "imu_frame": {"link": self.base_link, "origin": [0.0, 0.0, 0.0]},
            "links": [{"name": l.name, "geometry": geom(l.geometry)}
                      for l in self.links.values()],
            "joints": [{"name": j.name, "parent": j.parent, "child": j.child,
                        "axis": list(j.axis), "origin": list(j.origin)}
                       for j in self.joints],
            "attachments": [{"parent": a.parent, "child": a.child,
                             "origin": list(a.origin)} for a in self.attachments],
            "candidates": [{"link": c.link, "offset": list(c.offset), "index": c.index}
                           for c in self.candidates],
            "legs": [{"name": g.name, "joints": list(g.joints), "foot_link": g.foot_link,
                      "hip": list(g.hip), "l1": g.l1, "l2": g.l2}
                     for g in self.legs.values()],
            "nominal_q": list(self.nominal_q),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RobotModel":
        def geom(d):
            if d is None:
                return None
            if d["type"] == "box":
                return BoxGeometry(tuple(d["size"]), tuple(d.get("center", (0, 0, 0))))
            if d["type"] == "capsule":
                return CapsuleGeometry(d["radius"], d["length"],
                                       tuple(d.get("center", (0, 0, 0))))
            if d["type"] == "mesh":
                return MeshGeometry(tuple(map(tuple, d["vertices"])),
                                    tuple(map(tuple, d["faces"])))
            raise ConfigurationError(f"unknown geometry type {d['type']!r}")

        return cls(
            name=doc.get("name", "robot"),
            links=[Link(l["name"], geom(l.get("geometry"))) for l in doc["links"]],
            joints=[Joint(j["name"], j["parent"], j["child"], tuple(j["axis"]),
                          tuple(j["origin"])) for j in doc["joints"]],
            attachments=[Attachment(a["parent"], a["child"], tuple(a["origin"]))
                         for a in doc.get("attachments", [])],
            candidates=[CandidatePoint(c["link"], tuple(c["offset"]), c["index"])
                        for c in sorted(doc["candidates"], key=lambda c: c["index"])],
            legs=[LegChain(g["name"], tuple(g["joints"]), g["foot_link"],
                           tuple(g["hip"]), g["l1"], g["l2"])
                  for g in doc.get("legs", [])],
            nominal_q=doc["nominal_q"],
            base_link=doc.get("base_link", "base"),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)

    @classmethod
    def load(cls, path) -> "RobotModel":
        with open(path) as f:
            return cls.from_json(json.load(f))


# ---------------------------------------------------------------------------
# surface sampling


def sample_surface(geometry, m: int, rng) -> np.ndarray:
    """Uniform (area-weighted) surface samples in the link frame, (m, 3)."""
    if isinstance(geometry, BoxGeometry):
        return _sample_box(geometry, m, rng)
    if isinstance(geometry, CapsuleGeometry):
        return _sample_capsule(geometry, m, rng)
    if isinstance(geometry, MeshGeometry):
        return _sample_mesh(geometry, m, rng)
    raise ConfigurationError(f"cannot sample surface of {type(geometry)!r}")


def _sample_box(g, m, rng):
    sx, sy, sz = g.size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy], dtype=float)
    faces = rng.choice(6, size=m, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(m, 2))
    pts = np.empty((m, 3))
    half = np.array([sx, sy, sz]) / 2.0
    for f in range(6):
        sel = faces == f
        ax = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [i for i in range(3) if i != ax]
        pts[sel, ax] = sign * half[ax]
        pts[np.ix_(sel, others)] = u[sel] * np.array([g.size[others[0]], g.size[others[1]]])
    return pts + np.asarray(g.center, dtype=float)


def _sample_capsule(g, m, rng):
    r, l = g.radius, g.length
    area_cyl = 2.0 * np.pi * r * l
    area_sph = 4.0 * np.pi * r * r
    on_cyl = rng.uniform(size=m) < area_cyl / (area_cyl + area_sph)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=m)
    pts = np.empty((m, 3))
    # cylinder section
    zc = rng.uniform(-0.5 * l, 0.5 * l, size=m)
    pts[on_cyl] = np.stack([r * np.cos(phi), r * np.sin(phi), zc], axis=-1)[on_cyl]
    # hemispherical caps: uniform on the sphere, shifted to the matching end
    zs = rng.uniform(-1.0, 1.0, size=m)
    rho = np.sqrt(np.maximum(0.0, 1.0 - zs * zs))
    sphere = np.stack([rho * np.cos(phi), rho * np.sin(phi), zs], axis=-1) * r
    sphere[:, 2] += np.sign(sphere[:, 2]) * 0.5 * l
    pts[~on_cyl] = sphere[~on_cyl]
    return pts + np.asarray(g.center, dtype=float)


def _sample_mesh(g, m, rng):
    v = np.asarray(g.vertices, dtype=float)
    f = np.asarray(g.faces, dtype=int)
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=-1)
    tri = rng.choice(len(f), size=m, p=areas / areas.sum())
    u = rng.uniform(size=(m, 2))
    fold = u.sum(axis=-1) > 1.0
    u[fold] = 1.0 - u[fold]
    return v[f[tri, 0]] + u[:, :1] * e1[tri] + u[:, 1:] * e2[tri]


def farthest_point_sampling(points: np.ndarray, n: int, start: int):
    """Greedy max-min subset of ``n`` indices, seeded at ``start``.

    Ties resolve to the lowest index, so the result is deterministic for a
    fixed pool ordering.
    """
    points = np.asarray(points, dtype=float)
    if n > len(points):
        raise ConfigurationError(f"cannot pick {n} from a pool of {len(points)}")
    chosen = [int(start)]
    dist = np.linalg.norm(points - points[start], axis=-1)
    while len(chosen) < n:
        k = int(np.argmax(dist))
        chosen.append(k)
        dist = np.minimum(dist, np.linalg.norm(points - points[k], axis=-1))
    return chosen


# ---------------------------------------------------------------------------
# reference robot


def desk_biped(candidates=None) -> RobotModel:
    """Two-legged reference robot: floating base with the IMU at the base
    origin, 3-DOF legs (hip roll, hip pitch, knee pitch), 0.20 m thigh and
    shank, box feet with heel/toe candidates (N=4) unless overridden."""
    links = [
        Link("base", BoxGeometry((0.24, 0.16, 0.12), (0.0, 0.0, 0.02))),
        Link("hip_l"), Link("hip_r"),
        Link("thigh_l", BoxGeometry((0.05, 0.05, 0.20), (0.0, 0.0, -0.10))),
        Link("thigh_r", BoxGeometry((0.05, 0.05, 0.20), (0.0, 0.0, -0.10))),
        Link("shank_l", BoxGeometry((0.04, 0.04, 0.20), (0.0, 0.0, -0.10))),
        Link("shank_r", BoxGeometry((0.04, 0.04, 0.20), (0.0, 0.0, -0.10))),
        Link("foot_l", BoxGeometry((0.12, 0.05, 0.04), (0.02, 0.0, 0.0))),
        Link("foot_r", BoxGeometry((0.12, 0.05, 0.04), (0.02, 0.0, 0.0))),
    ]
    joints = [
        Joint("hip_roll_l", "base", "hip_l", (1, 0, 0), (0.0, 0.08, -0.05)),
        Joint("hip_pitch_l", "hip_l", "thigh_l", (0, 1, 0), (0.0, 0.0, 0.0)),
        Joint("knee_pitch_l", "thigh_l", "shank_l", (0, 1, 0), (0.0, 0.0, -0.20)),
        Joint("hip_roll_r", "base", "hip_r", (1, 0, 0), (0.0, -0.08, -0.05)),
        Joint("hip_pitch_r", "hip_r", "thigh_r", (0, 1, 0), (0.0, 0.0, 0.0)),
        Joint("knee_pitch_r", "thigh_r", "shank_r", (0, 1, 0), (0.0, 0.0, -0.20)),
    ]
    attachments = [
        Attachment("shank_l", "foot_l", (0.0, 0.0, -0.20)),
        Attachment("shank_r", "foot_r", (0.0, 0.0, -0.20)),
    ]
    if candidates is None:
        candidates = [
            CandidatePoint("foot_l", (-0.04, 0.0, -0.02), 0),
            CandidatePoint("foot_l", (0.08, 0.0, -0.02), 1),
            CandidatePoint("foot_r", (-0.04, 0.0, -0.02), 2),
            CandidatePoint("foot_r", (0.08, 0.0, -0.02), 3),
        ]
    legs = [
        LegChain("left", ("hip_roll_l", "hip_pitch_l", "knee_pitch_l"),
                 "foot_l", (0.0, 0.08, -0.05), 0.20, 0.20),
        LegChain("right", ("hip_roll_r", "hip_pitch_r", "knee_pitch_r"),
                 "foot_r", (0.0, -0.08, -0.05), 0.20, 0.20),
    ]
    nominal_q = [0.0, -0.35, 0.35, 0.0, -0.35, 0.35]  # shank plumb, feet flat
    return RobotModel("desk-biped", links, joints, attachments, candidates,
                      legs, nominal_q)
