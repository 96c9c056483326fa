"""Observation-to-canonical deformation.

Points sampled around a posed body are pulled back to the canonical pose by
transferring skinning weights from nearby surface vertices and applying the
inverted blended joint transform; a learned network then adds a small
residual displacement for non-rigid detail.

Two inversion orders are provided.  The default blends the per-joint rigid
maps first and inverts the blend, which makes the vertex round trip exact
by construction; blending the per-joint inverses is available for parity
experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mesh as meshmod
from .body import BodyParams, TemplateBody, apply_shape, blend_transforms, forward_kinematics
from .errors import ParameterError
from .field import Mlp, positional_encode

INVERT_MODES = ("blend_then_invert", "invert_then_blend")


@dataclass(frozen=True)
class SkinningSample:
    """Weight transfer for one query point."""
    point: np.ndarray
    weights: np.ndarray       # (J,) transferred skinning weights, row-stochastic
    vertex_ids: np.ndarray    # (k,) contributing posed vertices
    blend_coeffs: np.ndarray  # (k,) non-negative, sum 1


@dataclass(frozen=True)
class CanonicalMapResult:
    """Inverse-skinned points, learned residuals, and their sum."""
    skinned: np.ndarray
    residual: np.ndarray
    canonical: np.ndarray


class PosedBody:
    """Shaped + posed template with every per-pose precomputation.

    Holds the posed mesh and its spatial index, the per-vertex blended
    rigid maps and their inverses, and the shaped canonical vertices.
    Immutable; queries are parallel-safe.
    """

    def __init__(self, body: TemplateBody, params: BodyParams):
        self.body = body
        self.params = params
        self.transforms = forward_kinematics(body.skeleton, params)
        self.shaped_vertices = apply_shape(body, params.beta)
        rv, tv = blend_transforms(body, self.transforms)
        dets = np.linalg.det(rv)
        if np.any(np.abs(dets) < 1e-9):
            raise ParameterError("blended vertex transform is singular")
        self.vert_rot = rv
        self.vert_trans = tv
        self.vert_rot_inv = np.linalg.inv(rv)
        posed = np.einsum("vab,vb->va", rv, self.shaped_vertices) + tv
        self.mesh = meshmod.TriMesh(posed, body.triangles, clean=False)
        self._index = None
        # per-joint inverses for the alternative blend order
        rj = self.transforms.rotations
        tj = self.transforms.translations
        self.joint_rot_inv = np.ascontiguousarray(np.swapaxes(rj, 1, 2))
        self.joint_trans_inv = -np.einsum("jab,jb->ja", self.joint_rot_inv, tj)

    @property
    def index(self) -> meshmod.SpatialIndex:
        # built on first use; weight transfer alone only needs the KD-tree
        if self._index is None:
            self._index = meshmod.build_index(self.mesh)
        return self._index


def _transfer(points: np.ndarray, posed: PosedBody, k: int):
    """KNN weight transfer: vertex ids, blend coefficients (inverse distance)."""
    if k < 1 or k > posed.body.n_vertices:
        raise ParameterError(f"k must be in [1, {posed.body.n_vertices}]")
    ids, dists = meshmod.knn_vertices_batch(posed.index, points, k)
    if k == 1:
        coeffs = np.ones_like(dists)
    else:
        coeffs = 1.0 / (1e-6 + dists)
        coeffs /= coeffs.sum(axis=1, keepdims=True)
    return ids, coeffs


def skinning_samples(points: np.ndarray, posed: PosedBody, k: int = 1):
    """Per-point transferred weights, for inspection and tests."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ids, coeffs = _transfer(points, posed, k)
    weights = np.einsum("nk,nkj->nj", coeffs, posed.body.skin_weights[ids])
    return [
        SkinningSample(points[i], weights[i], ids[i], coeffs[i])
        for i in range(len(points))
    ]


def inverse_skin(points: np.ndarray, posed: PosedBody, k: int = 1,
                 mode: str = "blend_then_invert"):
    """Map observation points to the canonical pose via transferred weights.

    Returns (canonical points, inverse blend rotations).  The rotation is
    the linear part of the applied inverse map; it carries canonical-space
    directions back to the observation frame (used when chaining spatial
    gradients through the canonical field).
    """
    if mode not in INVERT_MODES:
        raise ParameterError(f"unknown inversion mode {mode!r}")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not np.all(np.isfinite(points)):
        raise ParameterError("points must be finite")
    ids, coeffs = _transfer(points, posed, k)

    if mode == "blend_then_invert":
        if k == 1:
            idx = ids[:, 0]
            rot_inv = posed.vert_rot_inv[idx]
            trans = posed.vert_trans[idx]
        else:
            rot = np.einsum("nk,nkab->nab", coeffs, posed.vert_rot[ids])
            trans = np.einsum("nk,nka->na", coeffs, posed.vert_trans[ids])
            dets = np.linalg.det(rot)
            if np.any(np.abs(dets) < 1e-9):
                raise ParameterError("blended transform is singular")
            rot_inv = np.linalg.inv(rot)
        xbar = np.einsum("nab,nb->na", rot_inv, points - trans)
        return xbar, rot_inv

    # invert_then_blend: blend each joint's inverse map by transferred weights
    weights = np.einsum("nk,nkj->nj", coeffs, posed.body.skin_weights[ids])
    rot_inv = np.einsum("nj,jab->nab", weights, posed.joint_rot_inv)
    trans_inv = weights @ posed.joint_trans_inv
    xbar = np.einsum("nab,nb->na", rot_inv, points) + trans_inv
    return xbar, rot_inv


def deform_input(points: np.ndarray, style: np.ndarray, params: BodyParams,
                 n_freqs: int) -> np.ndarray:
    """Concatenate encoded position, style code, and flattened pose/shape."""
    enc = positional_encode(points, n_freqs, include_input=True)
    cond = np.concatenate([np.asarray(style).ravel(), params.flat()])
    cond_rows = np.broadcast_to(cond.astype(enc.dtype), (len(enc), len(cond)))
    return np.concatenate([enc.astype(np.result_type(enc, style)), cond_rows], axis=1)


def residual_deform(points: np.ndarray, style: np.ndarray, params: BodyParams,
                    net: Mlp, n_freqs: int = 6) -> np.ndarray:
    """Learned residual displacement for each point; pure in its inputs."""
    points = np.atleast_2d(np.asarray(points))
    inp = deform_input(points, style, params, n_freqs).astype(net.weights[0].dtype)
    if inp.shape[1] != net.in_width:
        raise ParameterError(
            f"deformation net expects width {net.in_width}, got {inp.shape[1]}")
    out, _ = net.forward(inp)
    if not np.all(np.isfinite(out)):
        raise ParameterError("deformation network produced non-finite values")
    return out


def canonical_map(points: np.ndarray, posed: PosedBody, net: Mlp | None = None,
                  style: np.ndarray | None = None, n_freqs: int = 6,
                  k: int = 1, mode: str = "blend_then_invert") -> CanonicalMapResult:
    """Full observation-to-canonical map: inverse skinning plus residual.

    With net=None (or a zero-initialized final layer) the result reduces to
    the pure inverse-skinned points.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    skinned, _ = inverse_skin(points, posed, k=k, mode=mode)
    if net is None:
        residual = np.zeros_like(skinned)
    else:
        residual = residual_deform(points, style, posed.params, net, n_freqs)
    return CanonicalMapResult(skinned=skinned, residual=residual,
                              canonical=skinned + residual)
