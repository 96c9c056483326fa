"""Analytic capsule-union humanoid.

A 16-joint body whose geometry is a union of capsules, one or more per
joint.  Because the union SDF is available in closed form (exact outside
the body), this module doubles as the ground-truth oracle: the procedural
template mesh is extracted from it, synthetic fitting targets are sphere
traced against it, and posed variants follow the same joint transforms the
mesh skinning uses.

Coordinates are meters, y up, the figure faces +z.  Arms hang in a
shallow A-pose so that no two surfaces approach closer than ~4 cm except
where they are meant to merge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

# (name, parent index, offset from parent in the rest pose)
JOINT_TABLE = [
    ("pelvis", -1, (0.00, 1.00, 0.0)),
    ("spine", 0, (0.00, 0.14, 0.0)),
    ("chest", 1, (0.00, 0.14, 0.0)),
    ("head", 2, (0.00, 0.18, 0.0)),
    ("l_hip", 0, (0.10, -0.04, 0.0)),
    ("l_knee", 4, (0.00, -0.40, 0.0)),
    ("l_ankle", 5, (0.00, -0.40, 0.0)),
    ("r_hip", 0, (-0.10, -0.04, 0.0)),
    ("r_knee", 7, (0.00, -0.40, 0.0)),
    ("r_ankle", 8, (0.00, -0.40, 0.0)),
    ("l_shoulder", 2, (0.20, 0.02, 0.0)),
    ("l_elbow", 10, (0.24, -0.07, 0.0)),
    ("l_wrist", 11, (0.22, -0.06, 0.0)),
    ("r_shoulder", 2, (-0.20, 0.02, 0.0)),
    ("r_elbow", 13, (-0.24, -0.07, 0.0)),
    ("r_wrist", 14, (-0.22, -0.06, 0.0)),
]

_J = {name: i for i, (name, _, _) in enumerate(JOINT_TABLE)}

# (owner joint, start joint, end joint or explicit tip offset, radius)
# the capsule moves rigidly with its owner joint
CAPSULE_TABLE = [
    ("pelvis", "pelvis", "spine", 0.110),
    ("pelvis", "pelvis", "l_hip", 0.080),
    ("pelvis", "pelvis", "r_hip", 0.080),
    ("spine", "spine", "chest", 0.110),
    ("chest", "chest", "head", 0.055),
    ("chest", "chest", "l_shoulder", 0.060),
    ("chest", "chest", "r_shoulder", 0.060),
    ("head", "head", (0.0, 0.12, 0.0), 0.095),
    ("l_hip", "l_hip", "l_knee", 0.070),
    ("l_knee", "l_knee", "l_ankle", 0.055),
    ("l_ankle", "l_ankle", (0.0, -0.05, 0.11), 0.040),
    ("r_hip", "r_hip", "r_knee", 0.070),
    ("r_knee", "r_knee", "r_ankle", 0.055),
    ("r_ankle", "r_ankle", (0.0, -0.05, 0.11), 0.040),
    ("l_shoulder", "l_shoulder", "l_elbow", 0.050),
    ("l_elbow", "l_elbow", "l_wrist", 0.042),
    ("l_wrist", "l_wrist", (0.09, -0.02, 0.0), 0.040),
    ("r_shoulder", "r_shoulder", "r_elbow", 0.050),
    ("r_elbow", "r_elbow", "r_wrist", 0.042),
    ("r_wrist", "r_wrist", (-0.09, -0.02, 0.0), 0.040),
]


@dataclass(frozen=True)
class BodySpec:
    """Proportions and meshing resolution of the procedural body.

    scale multiplies all lengths, girth all capsule radii; girth_gain is
    the radius increase (meters) per unit of the girth shape coefficient.
    resolution is the marching-cubes node count along the longest axis.
    """
    scale: float = 1.0
    girth: float = 1.0
    girth_gain: float = 0.03
    resolution: int = 52

    def validate(self) -> None:
        if not (self.scale > 0 and self.girth > 0 and self.girth_gain > 0):
            raise ParameterError("body proportions must be positive")
        if self.resolution < 8:
            raise ParameterError("body resolution must be at least 8")


def rest_joints(spec: BodySpec) -> np.ndarray:
    """Rest-pose joint positions (J, 3)."""
    spec.validate()
    pos = np.zeros((len(JOINT_TABLE), 3))
    for i, (_, parent, offset) in enumerate(JOINT_TABLE):
        base = pos[parent] if parent >= 0 else 0.0
        pos[i] = base + np.asarray(offset) * spec.scale
    return pos


@dataclass(frozen=True)
class CapsuleSet:
    """Capsule axes and radii, plus the joint each capsule follows."""
    owner: np.ndarray   # (C,) joint index
    p0: np.ndarray      # (C, 3)
    p1: np.ndarray      # (C, 3)
    radius: np.ndarray  # (C,)

    def posed(self, rot: np.ndarray, trans: np.ndarray) -> "CapsuleSet":
        """Rigidly transform each capsule by its owner joint's (R, t)."""
        r = rot[self.owner]
        t = trans[self.owner]
        return CapsuleSet(
            owner=self.owner,
            p0=np.einsum("cij,cj->ci", r, self.p0) + t,
            p1=np.einsum("cij,cj->ci", r, self.p1) + t,
            radius=self.radius,
        )

    def bounds(self, pad: float = 0.0):
        lo = np.minimum(self.p0, self.p1) - (self.radius[:, None] + pad)
        hi = np.maximum(self.p0, self.p1) + (self.radius[:, None] + pad)
        return lo.min(axis=0), hi.max(axis=0)


def rest_capsules(spec: BodySpec) -> CapsuleSet:
    spec.validate()
    joints = rest_joints(spec)
    owner, p0, p1, radius = [], [], [], []
    for own, start, end, r in CAPSULE_TABLE:
        owner.append(_J[own])
        a = joints[_J[start]]
        if isinstance(end, str):
            b = joints[_J[end]]
        else:
            b = a + np.asarray(end) * spec.scale
        p0.append(a)
        p1.append(b)
        radius.append(r * spec.scale * spec.girth)
    return CapsuleSet(np.array(owner), np.array(p0), np.array(p1), np.array(radius))


def segment_distances(points: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Distance from each point (n, 3) to each segment (c, 3): returns (n, c)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ab = p1 - p0                                        # (c, 3)
    denom = np.maximum(np.einsum("cj,cj->c", ab, ab), 1e-300)
    ap = points[:, None, :] - p0[None, :, :]            # (n, c, 3)
    t = np.clip(np.einsum("ncj,cj->nc", ap, ab) / denom, 0.0, 1.0)
    diff = ap - t[:, :, None] * ab[None, :, :]
    return np.sqrt(np.einsum("ncj,ncj->nc", diff, diff))


def union_sdf(points: np.ndarray, caps: CapsuleSet, girth_beta: float = 0.0,
              spec: BodySpec | None = None) -> np.ndarray:
    """Signed distance to the capsule union (exact outside the body).

    girth_beta thickens every capsule by girth_gain * beta, matching the
    template body's single girth blend shape.
    """
    gain = (spec.girth_gain if spec is not None else 0.03)
    radii = caps.radius + gain * girth_beta
    d = segment_distances(points, caps.p0, caps.p1) - radii[None, :]
    return d.min(axis=1)


def union_sdf_argmin(points: np.ndarray, caps: CapsuleSet, girth_beta: float = 0.0,
                     spec: BodySpec | None = None):
    gain = (spec.girth_gain if spec is not None else 0.03)
    radii = caps.radius + gain * girth_beta
    d = segment_distances(points, caps.p0, caps.p1) - radii[None, :]
    idx = d.argmin(axis=1)
    return d[np.arange(len(d)), idx], idx


def albedo(canonical_points: np.ndarray) -> np.ndarray:
    """Smooth procedural surface color, a function of canonical position.

    Low spatial frequency on purpose: the fitter's feature grid must be able
    to represent it at the default grid resolution.
    """
    x = np.asarray(canonical_points, dtype=np.float64).reshape(-1, 3)
    freq = np.array([
        [3.1, 2.3, 4.0],
        [-2.2, 3.7, 1.9],
        [4.3, -1.7, 2.6],
    ])
    phase = np.array([0.0, 1.7, 3.9])
    waves = np.sin(x @ freq.T + phase)
    return 0.55 + 0.35 * waves


def map_to_canonical(points: np.ndarray, cap_idx: np.ndarray,
                     rot: np.ndarray, trans: np.ndarray, owner: np.ndarray) -> np.ndarray:
    """Undo each point's owning-capsule rigid transform (posed -> canonical)."""
    j = owner[cap_idx]
    r = rot[j]
    t = trans[j]
    return np.einsum("nji,nj->ni", r, points - t)  # R^T (x - t)


def sphere_trace(caps: CapsuleSet, origins: np.ndarray, dirs: np.ndarray,
                 girth_beta: float = 0.0, spec: BodySpec | None = None,
                 max_steps: int = 128, hit_eps: float = 1e-4,
                 t_max: float = 20.0):
    """March rays against the capsule union.

    Returns (hit mask, hit parameter t, hit points, nearest capsule index).
    Safe stepping: outside the union the SDF is the exact distance.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)
    cap_idx = np.zeros(n, dtype=np.int64)
    for _ in range(max_steps):
        if not alive.any():
            break
        pts = origins[alive] + t[alive, None] * dirs[alive]
        d, idx = union_sdf_argmin(pts, caps, girth_beta, spec)
        cap_ids = np.flatnonzero(alive)
        newly_hit = d < hit_eps
        hit[cap_ids[newly_hit]] = True
        cap_idx[cap_ids[newly_hit]] = idx[newly_hit]
        t[cap_ids] += np.where(newly_hit, 0.0, np.maximum(d, 1e-4))
        done = newly_hit | (t[cap_ids] > t_max)
        alive[cap_ids[done]] = False
    points = origins + t[:, None] * dirs
    return hit, t, points, cap_idx
