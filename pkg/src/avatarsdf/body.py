"""Parametric articulated body.

Shape blending, forward kinematics, and linear blend skinning over a
template mesh, plus the procedural capsule-limb test body and a versioned
JSON asset format for externally supplied bodies.  All containers are
immutable after construction and safe for shared reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import capsules, mesh as meshmod
from .capsules import BodySpec
from .errors import InvariantError, MalformedFileError, ParameterError, VersionMismatchError

ASSET_FORMAT = "avatarsdf-body"
ASSET_VERSION = 1
BETA_CLAMP = 5.0


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int  # -1 for the root
    offset: np.ndarray  # rest offset from parent (root: global position), meters


@dataclass(frozen=True)
class Skeleton:
    """Topologically ordered joint hierarchy (every parent precedes its children)."""
    joints: tuple

    def __post_init__(self):
        if len(self.joints) < 1:
            raise ParameterError("skeleton needs at least one joint")
        roots = [i for i, j in enumerate(self.joints) if j.parent < 0]
        if roots != [0]:
            raise InvariantError("skeleton must have exactly one root at index 0")
        for i, j in enumerate(self.joints[1:], start=1):
            if not (0 <= j.parent < i):
                raise InvariantError(f"joint {i} parent {j.parent} is not topologically ordered")

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        for i, j in enumerate(self.joints):
            base = pos[j.parent] if j.parent >= 0 else 0.0
            pos[i] = base + j.offset
        return pos


@dataclass
class BodyParams:
    """Pose (per-joint axis-angle, radians) and shape coefficients.

    theta: (J, 3); beta: (B,), clamped to |beta| <= beta_clamp;
    root_translation: (3,) meters.
    """
    theta: np.ndarray
    beta: np.ndarray
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    beta_clamp: float = BETA_CLAMP

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1, 3)
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.beta))
                and np.all(np.isfinite(self.root_translation))):
            raise ParameterError("body parameters must be finite")
        if np.any(np.abs(self.beta) > self.beta_clamp):
            raise ParameterError(f"|beta| exceeds clamp {self.beta_clamp}")

    @staticmethod
    def rest(n_joints: int, n_shapes: int) -> "BodyParams":
        return BodyParams(np.zeros((n_joints, 3)), np.zeros(n_shapes))

    def flat(self) -> np.ndarray:
        """Conditioning vector for networks: flattened theta then beta."""
        return np.concatenate([self.theta.ravel(), self.beta])


@dataclass(frozen=True)
class JointTransforms:
    """Per-joint rigid maps x -> R x + t from canonical to posed space."""
    rotations: np.ndarray     # (J, 3, 3)
    translations: np.ndarray  # (J, 3)

    def apply(self, joint: int, x: np.ndarray) -> np.ndarray:
        return x @ self.rotations[joint].T + self.translations[joint]


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3).

    Below 1e-8 rad the sin/cos coefficients are replaced by their
    second-order series so the axis normalization never divides by ~0.
    """
    v = np.asarray(axis_angle, dtype=np.float64)
    shape = v.shape[:-1]
    v = v.reshape(-1, 3)
    theta = np.linalg.norm(v, axis=1)
    small = theta < 1e-8

    K = np.zeros((len(v), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -v[:, 2], v[:, 1]
    K[:, 1, 0], K[:, 1, 2] = v[:, 2], -v[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -v[:, 1], v[:, 0]

    # R = I + a K + b K^2 with K unnormalized: a = sin(t)/t, b = (1-cos t)/t^2
    t2 = theta * theta
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - t2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, t2))
    eye = np.eye(3)[None]
    R = eye + a[:, None, None] * K + b[:, None, None] * (K @ K)
    return R.reshape(*shape, 3, 3)


def forward_kinematics(skeleton: Skeleton, params: BodyParams) -> JointTransforms:
    """Compose joint transforms root-to-leaf, relative to the rest pose.

    Each joint rotates about its own rest position, so the rest pose maps
    to the identity at every joint; the root additionally translates by
    params.root_translation.
    """
    if params.theta.shape[0] != skeleton.n_joints:
        raise ParameterError(
            f"theta has {params.theta.shape[0]} joints, skeleton has {skeleton.n_joints}")
    rest = skeleton.rest_positions()
    rots = rodrigues(params.theta)

    J = skeleton.n_joints
    world = np.zeros((J, 4, 4))
    out_r = np.zeros((J, 3, 3))
    out_t = np.zeros((J, 3))
    for i, joint in enumerate(skeleton.joints):
        local = np.eye(4)
        local[:3, :3] = rots[i]
        local[:3, 3] = rest[i] - rots[i] @ rest[i]
        if joint.parent < 0:
            local[:3, 3] += params.root_translation
            world[i] = local
        else:
            world[i] = world[joint.parent] @ local
        out_r[i] = world[i, :3, :3]
        out_t[i] = world[i, :3, 3]
    return JointTransforms(out_r, out_t)


@dataclass(frozen=True)
class TemplateBody:
    """Canonical-pose mesh + skeleton + skinning weights + shape directions."""
    vertices: np.ndarray     # (N, 3)
    triangles: np.ndarray    # (T, 3)
    skin_weights: np.ndarray  # (N, J) row-stochastic
    shape_dirs: np.ndarray   # (B, N, 3)
    skeleton: Skeleton

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        w = np.ascontiguousarray(np.asarray(self.skin_weights, dtype=np.float64))
        s = np.ascontiguousarray(np.asarray(self.shape_dirs, dtype=np.float64))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "skin_weights", w)
        object.__setattr__(self, "shape_dirs", s)
        if w.shape != (len(v), self.skeleton.n_joints):
            raise InvariantError("skin weight shape does not match vertices x joints")
        if np.any(w < -1e-12):
            raise InvariantError("skin weights must be non-negative")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-6:
            raise InvariantError("skin weight rows must sum to 1 within 1e-6")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise InvariantError("triangle index out of range")
        if s.ndim != 3 or s.shape[1:] != (len(v), 3):
            raise InvariantError("shape_dirs must be (B, N, 3)")
        for a in (v, t, w, s):
            a.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_joints(self) -> int:
        return self.skeleton.n_joints

    @property
    def n_shapes(self) -> int:
        return self.shape_dirs.shape[0]

    def rest_params(self) -> BodyParams:
        return BodyParams.rest(self.n_joints, self.n_shapes)

    def rest_mesh(self) -> meshmod.TriMesh:
        return meshmod.TriMesh(self.vertices, self.triangles, clean=False)


def apply_shape(body: TemplateBody, beta: np.ndarray) -> np.ndarray:
    """Shaped vertices: template + sum_b beta_b * shape_dirs[b]."""
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    if beta.shape[0] != body.n_shapes:
        raise ParameterError(f"beta has {beta.shape[0]} entries, body has {body.n_shapes}")
    return body.vertices + np.einsum("b,bnd->nd", beta, body.shape_dirs)


def blend_transforms(body: TemplateBody, transforms: JointTransforms):
    """Per-vertex blended rigid maps (R_v, t_v) = sum_j w_vj (R_j, t_j)."""
    w = body.skin_weights
    rv = np.einsum("vj,jab->vab", w, transforms.rotations)
    tv = w @ transforms.translations
    return rv, tv


def lbs_pose(body: TemplateBody, params: BodyParams) -> meshmod.TriMesh:
    """Pose the shaped template by linear blend skinning.

    Topology is preserved exactly (no cleanup pass), so posed meshes stay
    in vertex correspondence with the template.
    """
    shaped = apply_shape(body, params.beta)
    transforms = forward_kinematics(body.skeleton, params)
    rv, tv = blend_transforms(body, transforms)
    posed = np.einsum("vab,vb->va", rv, shaped) + tv
    return meshmod.TriMesh(posed, body.triangles, clean=False)


def _capsule_skeleton(spec: BodySpec) -> Skeleton:
    joints = tuple(
        Joint(name, parent, np.asarray(offset) * spec.scale)
        for name, parent, offset in capsules.JOINT_TABLE
    )
    return Skeleton(joints)


def generate_test_body(spec: BodySpec | None = None) -> TemplateBody:
    """Build the watertight capsule-limb humanoid.

    The mesh is the marching-cubes zero level set of the analytic capsule
    union; skin weights fall off with squared distance to each joint's
    capsule axes (w ~ 1/(1e-4 + d^2), sparsified below 0.01 and
    renormalized); the single shape direction pushes vertices radially off
    the nearest capsule axis (a global girth control).
    """
    spec = spec or BodySpec()
    spec.validate()
    caps = capsules.rest_capsules(spec)
    pad = 0.05 * spec.scale
    lo, hi = caps.bounds(pad=pad)
    extent = hi - lo
    res = np.maximum(8, np.round(extent / extent.max() * spec.resolution)).astype(int)
    surf = meshmod.marching_cubes(lambda p: capsules.union_sdf(p, caps, spec=spec), res, (lo, hi))
    if surf.n_vertices == 0:
        raise ParameterError("degenerate proportions: body surface vanished")
    if not surf.is_watertight():
        raise InvariantError("generated body surface is not watertight; raise the resolution")

    verts = surf.vertices
    skeleton = _capsule_skeleton(spec)

    # per-joint distance to owned capsule axes
    J = skeleton.n_joints
    dists = np.full((len(verts), J), np.inf)
    seg_d = capsules.segment_distances(verts, caps.p0, caps.p1)
    for c in range(len(caps.owner)):
        j = caps.owner[c]
        dists[:, j] = np.minimum(dists[:, j], seg_d[:, c])
    w = 1.0 / (1e-4 + dists ** 2)
    w /= w.sum(axis=1, keepdims=True)
    w[w < 0.01] = 0.0
    w /= w.sum(axis=1, keepdims=True)

    # radial girth direction from the nearest capsule axis
    _, nearest = capsules.union_sdf_argmin(verts, caps, spec=spec)
    a = caps.p0[nearest]
    ab = caps.p1[nearest] - a
    t = np.clip(np.einsum("nj,nj->n", verts - a, ab)
                / np.maximum(np.einsum("nj,nj->n", ab, ab), 1e-300), 0.0, 1.0)
    radial = verts - (a + t[:, None] * ab)
    radial /= np.maximum(np.linalg.norm(radial, axis=1), 1e-12)[:, None]
    shape_dirs = (spec.girth_gain * radial)[None]

    return TemplateBody(verts, surf.triangles, w, shape_dirs, skeleton)


def save_body_asset(body: TemplateBody, path) -> None:
    """Write the versioned JSON body asset (numbers round-trip exactly)."""
    doc = {
        "format": ASSET_FORMAT,
        "version": ASSET_VERSION,
        "joints": [
            {"name": j.name, "parent": (None if j.parent < 0 else j.parent),
             "offset": list(j.offset)}
            for j in body.skeleton.joints
        ],
        "vertices": body.vertices.tolist(),
        "triangles": body.triangles.tolist(),
        "skin_weights": body.skin_weights.tolist(),
        "shape_dirs": body.shape_dirs.tolist(),
    }
    with open(path, "w", encoding="ascii") as f:
        json.dump(doc, f)


def load_body_asset(path) -> TemplateBody:
    """Load a body asset, checking format, version, and invariants.

    Weight rows deviating from sum 1 by more than 1e-4 are rejected;
    smaller deviations are renormalized.
    """
    try:
        with open(path, "r", encoding="ascii") as f:
            doc = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedFileError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != ASSET_FORMAT:
        raise MalformedFileError(f"{path}: missing '{ASSET_FORMAT}' format marker")
    if doc.get("version") != ASSET_VERSION:
        raise VersionMismatchError(
            f"{path}: asset version {doc.get('version')!r}, expected {ASSET_VERSION}")
    try:
        joints = tuple(
            Joint(j["name"], -1 if j["parent"] is None else int(j["parent"]),
                  np.asarray(j["offset"], dtype=np.float64))
            for j in doc["joints"]
        )
        vertices = np.asarray(doc["vertices"], dtype=np.float64)
        triangles = np.asarray(doc["triangles"], dtype=np.int64)
        weights = np.asarray(doc["skin_weights"], dtype=np.float64)
        shape_dirs = np.asarray(doc["shape_dirs"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc

    sums = weights.sum(axis=1) if weights.ndim == 2 and weights.size else np.zeros(0)
    if weights.size and np.max(np.abs(sums - 1.0)) > 1e-4:
        raise InvariantError(f"{path}: skin weight rows deviate from sum 1 by more than 1e-4")
    # renormalize only genuinely drifted rows so exact round trips stay bitwise
    if weights.size:
        off = np.abs(sums - 1.0) > 1e-9
        if np.any(off):
            weights = weights.copy()
            weights[off] /= sums[off, None]
    return TemplateBody(vertices, triangles, weights, shape_dirs, Skeleton(joints))
