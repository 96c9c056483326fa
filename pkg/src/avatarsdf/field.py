"""Canonical avatar field.

A directly optimized tri-plane feature grid plus small hand-written MLPs
decode color and a residual signed distance on top of the articulated body
prior.  All gradients (parameter, input, and gradient-of-input-gradient for
the unit-gradient regularizer) are exact reverse-mode derivations, verified
against finite differences in the test suite.

Conventions: batches are rows; an MLP layer stores W of shape (out, in)
and computes z = a @ W.T + b.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedFileError, ParameterError, VersionMismatchError

# ---------------------------------------------------------------------------
# activations (value, first and second derivative w.r.t. the pre-activation)


def _sigmoid(z):
    # branchless stable logistic: exp of a non-positive argument only
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0.0, 1.0, ez) / (1.0 + ez)


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


_ACT = {
    "linear": (lambda z: z, lambda z: np.ones_like(z), lambda z: np.zeros_like(z)),
    "softplus": (_softplus, _sigmoid, lambda z: (lambda s: s * (1.0 - s))(_sigmoid(z))),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2,
             lambda z: (lambda t: -2.0 * t * (1.0 - t * t))(np.tanh(z))),
    "sigmoid": (_sigmoid, lambda z: (lambda s: s * (1.0 - s))(_sigmoid(z)),
                lambda z: (lambda s: s * (1.0 - s) * (1.0 - 2.0 * s))(_sigmoid(z))),
}


def positional_encode(x: np.ndarray, n_freqs: int, include_input: bool = False) -> np.ndarray:
    """[sin(2^l pi x), cos(2^l pi x)] for l = 0..n_freqs-1, per axis.

    n_freqs = 0 returns the raw coordinates unchanged.
    """
    if n_freqs < 0:
        raise ParameterError("frequency count must be >= 0")
    x = np.atleast_2d(np.asarray(x))
    if n_freqs == 0:
        return x
    parts = [x] if include_input else []
    for l in range(n_freqs):
        arg = (2.0 ** l) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# MLP


@dataclass
class Mlp:
    """Plain fully connected network with explicit gradient passes."""
    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        for i in range(len(self.weights) - 1):
            if self.weights[i + 1].shape[1] != self.weights[i].shape[0]:
                raise ParameterError("layer widths do not chain")
        for w, b, a in zip(self.weights, self.biases, self.activations):
            if w.shape[0] != b.shape[0]:
                raise ParameterError("bias width mismatch")
            if a not in _ACT:
                raise ParameterError(f"unknown activation {a!r}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ParameterError("network parameters must be finite")

    @staticmethod
    def create(widths, hidden="softplus", final="linear", rng=None,
               final_zero=False, dtype=np.float64) -> "Mlp":
        """He-style init; optionally zero the final layer so the net starts inert."""
        rng = rng or np.random.default_rng(0)
        weights, biases, acts = [], [], []
        for i in range(len(widths) - 1):
            fan_in = widths[i]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(widths[i + 1], fan_in))
            last = i == len(widths) - 2
            if last and final_zero:
                w[:] = 0.0
            weights.append(w.astype(dtype))
            biases.append(np.zeros(widths[i + 1], dtype=dtype))
            acts.append(final if last else hidden)
        return Mlp(weights, biases, acts)

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[0]

    def forward(self, x: np.ndarray):
        """Returns (output, cache); cache feeds the backward passes."""
        x = np.atleast_2d(x)
        if x.shape[1] != self.in_width:
            raise ParameterError(f"input width {x.shape[1]}, expected {self.in_width}")
        a = x
        inputs, preacts = [], []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(a)
            z = a @ w.T + b
            preacts.append(z)
            a = _ACT[act][0](z)
        return a, _MlpCache(self, inputs, preacts)

    def backward(self, cache: "_MlpCache", gout: np.ndarray):
        """Exact reverse pass: (weight grads, bias grads, input grad)."""
        if gout.shape != cache.preacts[-1].shape:
            raise ParameterError("output gradient shape does not match forward cache")
        dws = [None] * len(self.weights)
        dbs = [None] * len(self.weights)
        delta = gout
        for l in range(len(self.weights) - 1, -1, -1):
            delta = delta * cache.phi1(l)
            dws[l] = delta.T @ cache.inputs[l]
            dbs[l] = delta.sum(axis=0)
            delta = delta @ self.weights[l]
        return dws, dbs, delta

    def input_gradient(self, cache: "_MlpCache", seed: np.ndarray):
        """d(seed . output)/d(input) per row, plus a cache for double_backward.

        seed has the output shape; for a scalar-output net a column of ones
        yields the spatial gradient of the prediction.
        """
        u = seed
        n = len(self.weights)
        us, ts = [None] * n, [None] * n
        for l in range(n - 1, -1, -1):
            us[l] = u
            t = u * cache.phi1(l)
            ts[l] = t
            u = t @ self.weights[l]
        return u, (us, ts)

    def double_backward(self, cache: "_MlpCache", gcache, ghat: np.ndarray):
        """Gradients of a loss that consumes input_gradient's result.

        Given ghat = dL/d(g) where g = input_gradient(...), returns
        (weight grads, bias grads, input grad) capturing the second-order
        dependence of g on parameters and input.  The seed is treated as a
        constant.
        """
        us, ts = gcache
        L = len(self.weights)
        dws = [np.zeros_like(w) for w in self.weights]
        dbs = [np.zeros_like(b) for b in self.biases]
        zbars = [None] * L
        ubar = ghat
        for l in range(L):  # ascend the gradient sweep: u_{l-1} = t_l @ W_l
            tbar = ubar @ self.weights[l].T
            dws[l] += ts[l].T @ ubar
            zbars[l] = tbar * us[l] * cache.phi2(l)
            ubar = tbar * cache.phi1(l)
        abar = np.zeros_like(cache.preacts[-1])
        for l in range(L - 1, -1, -1):  # descend the value sweep: z_l = a_{l-1} W^T + b
            delta = zbars[l] + abar * cache.phi1(l)
            dws[l] += delta.T @ cache.inputs[l]
            dbs[l] += delta.sum(axis=0)
            abar = delta @ self.weights[l]
        return dws, dbs, abar


class _MlpCache:
    """Forward activations plus memoized activation derivatives.

    A forward cache is consumed by up to three gradient passes per step;
    memoizing phi'(z) and phi''(z) avoids recomputing the transcendental
    that dominates their cost.
    """

    __slots__ = ("net", "inputs", "preacts", "_phi1", "_phi2")

    def __init__(self, net, inputs, preacts):
        self.net = net
        self.inputs = inputs
        self.preacts = preacts
        self._phi1 = [None] * len(preacts)
        self._phi2 = [None] * len(preacts)

    def phi1(self, l):
        if self._phi1[l] is None:
            self._phi1[l] = _ACT[self.net.activations[l]][1](self.preacts[l])
        return self._phi1[l]

    def phi2(self, l):
        if self._phi2[l] is None:
            act = self.net.activations[l]
            if act == "softplus":
                s = self.phi1(l)  # phi' = logistic, phi'' = s (1 - s)
                self._phi2[l] = s * (1.0 - s)
            else:
                self._phi2[l] = _ACT[act][2](self.preacts[l])
        return self._phi2[l]


# ---------------------------------------------------------------------------
# tri-plane

_PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # xy, xz, yz


@dataclass
class TriPlane:
    """Three axis-aligned feature grids over a canonical-space box.

    A point projects onto each plane, is sampled bilinearly, and the three
    C-vectors are summed.  Coordinates outside the box clamp to its
    boundary (zero positional gradient there).
    """
    planes: list  # three (R, R, C) arrays
    box_min: np.ndarray
    box_max: np.ndarray

    def __post_init__(self):
        if len(self.planes) != 3:
            raise ParameterError("tri-plane needs exactly three grids")
        r, c = self.planes[0].shape[0], self.planes[0].shape[2]
        for p in self.planes:
            if p.ndim != 3 or p.shape != (r, r, c):
                raise ParameterError("tri-plane grids must share one (R, R, C) shape")
            if not np.all(np.isfinite(p)):
                raise ParameterError("tri-plane values must be finite")
        if r < 2:
            raise ParameterError("tri-plane resolution must be >= 2")
        self.box_min = np.asarray(self.box_min, dtype=np.float64).reshape(3)
        self.box_max = np.asarray(self.box_max, dtype=np.float64).reshape(3)
        if np.any(self.box_max <= self.box_min):
            raise ParameterError("canonical box must have positive extent")

    @property
    def resolution(self) -> int:
        return self.planes[0].shape[0]

    @property
    def channels(self) -> int:
        return self.planes[0].shape[2]


def sample_triplane(tp: TriPlane, x: np.ndarray):
    """Sum of the three bilinear plane samples at x (n, 3): (features, cache)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    r = tp.resolution
    extent = tp.box_max - tp.box_min
    u_raw = (x - tp.box_min) / extent
    inside = (u_raw >= 0.0) & (u_raw <= 1.0)
    u = np.clip(u_raw, 0.0, 1.0)
    p = u * (r - 1)
    i = np.minimum(p.astype(np.int64), r - 2)
    frac = p - i
    scale = (r - 1) / extent  # d(grid coord)/d(world coord), zeroed when clamped

    dtype = tp.planes[0].dtype
    feats = np.zeros((len(x), tp.channels), dtype=dtype)
    cache = {"i": i, "frac": frac.astype(dtype), "inside": inside,
             "scale": scale, "n": len(x)}
    corners = []
    for pi, (a, b) in enumerate(_PLANE_AXES):
        ia, ib = i[:, a], i[:, b]
        fa = cache["frac"][:, a][:, None]
        fb = cache["frac"][:, b][:, None]
        g = tp.planes[pi]
        c00 = g[ia, ib]
        c10 = g[ia + 1, ib]
        c01 = g[ia, ib + 1]
        c11 = g[ia + 1, ib + 1]
        feats += (c00 * (1 - fa) * (1 - fb) + c10 * fa * (1 - fb)
                  + c01 * (1 - fa) * fb + c11 * fa * fb)
        corners.append((c00, c10, c01, c11))
    cache["corners"] = corners
    return feats, cache


def _scatter_plane(shape, ia, ib, values):
    """Accumulate per-point corner contributions into a plane-shaped grid."""
    r, _, c = shape
    flat_idx = (ia * r + ib)[:, None] * c + np.arange(c)[None, :]
    acc = np.bincount(flat_idx.ravel(), weights=values.ravel(), minlength=r * r * c)
    return acc.reshape(shape)


def triplane_backward_values(tp: TriPlane, cache, gfeat: np.ndarray):
    """dL/d(plane values) for upstream dL/d(features)."""
    i, frac = cache["i"], cache["frac"]
    grads = []
    for pi, (a, b) in enumerate(_PLANE_AXES):
        ia, ib = i[:, a], i[:, b]
        fa = frac[:, a][:, None]
        fb = frac[:, b][:, None]
        g = np.zeros(tp.planes[pi].size)
        r, _, c = tp.planes[pi].shape
        for di, dj, w in ((0, 0, (1 - fa) * (1 - fb)), (1, 0, fa * (1 - fb)),
                          (0, 1, (1 - fa) * fb), (1, 1, fa * fb)):
            flat_idx = ((ia + di) * r + (ib + dj))[:, None] * c + np.arange(c)[None, :]
            g += np.bincount(flat_idx.ravel(), weights=(w * gfeat).ravel(),
                             minlength=r * r * c)
        grads.append(g.reshape(tp.planes[pi].shape).astype(tp.planes[pi].dtype))
    return grads


def triplane_backward_position(tp: TriPlane, cache, gfeat: np.ndarray) -> np.ndarray:
    """dL/d(x) for upstream dL/d(features); exact within a cell, zero if clamped."""
    jac = triplane_jacobian(tp, cache)
    return np.einsum("nc,nck->nk", gfeat, jac)


def triplane_jacobian(tp: TriPlane, cache) -> np.ndarray:
    """d(features)/d(x): (n, C, 3)."""
    frac, inside, scale = cache["frac"], cache["inside"], cache["scale"]
    n = cache["n"]
    jac = np.zeros((n, tp.channels, 3), dtype=tp.planes[0].dtype)
    for pi, (a, b) in enumerate(_PLANE_AXES):
        c00, c10, c01, c11 = cache["corners"][pi]
        fa = frac[:, a][:, None]
        fb = frac[:, b][:, None]
        dfa = (c10 - c00) * (1 - fb) + (c11 - c01) * fb
        dfb = (c01 - c00) * (1 - fa) + (c11 - c10) * fa
        jac[:, :, a] += dfa * (scale[a] * inside[:, a])[:, None]
        jac[:, :, b] += dfb * (scale[b] * inside[:, b])[:, None]
    return jac


def triplane_jacobian_backward(tp: TriPlane, cache, gjac: np.ndarray):
    """dL/d(plane values) for upstream dL/d(jacobian).

    The jacobian is linear in the stored grid values, so this is a plain
    scatter with the bilinear-derivative weights.
    """
    i, frac, inside, scale = cache["i"], cache["frac"], cache["inside"], cache["scale"]
    grads = []
    for pi, (a, b) in enumerate(_PLANE_AXES):
        ia, ib = i[:, a], i[:, b]
        fa = frac[:, a][:, None]
        fb = frac[:, b][:, None]
        sa = (scale[a] * inside[:, a])[:, None]
        sb = (scale[b] * inside[:, b])[:, None]
        ga = gjac[:, :, a] * sa  # dL/d(dF/da) in grid units
        gb = gjac[:, :, b] * sb
        r, _, c = tp.planes[pi].shape
        g = np.zeros(tp.planes[pi].size)
        contrib = (
            (0, 0, -ga * (1 - fb) - gb * (1 - fa)),
            (1, 0, ga * (1 - fb) - gb * fa),
            (0, 1, -ga * fb + gb * (1 - fa)),
            (1, 1, ga * fb + gb * fa),
        )
        for di, dj, val in contrib:
            flat_idx = ((ia + di) * r + (ib + dj))[:, None] * c + np.arange(c)[None, :]
            g += np.bincount(flat_idx.ravel(), weights=val.ravel(), minlength=r * r * c)
        grads.append(g.reshape(tp.planes[pi].shape).astype(tp.planes[pi].dtype))
    return grads


# ---------------------------------------------------------------------------
# scene


@dataclass
class Scene:
    """Everything the fitter optimizes.

    triplane features, the color and residual-SDF decoders, the residual
    deformation network with its style code, and the density sharpness
    alpha = exp(log_alpha) (positive by construction).
    """
    triplane: TriPlane
    mlp_color: Mlp
    mlp_sdf: Mlp
    mlp_deform: Mlp
    style: np.ndarray
    log_alpha: np.ndarray  # 0-d array so optimizers can update in place
    posenc_freqs: int = 6

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    @property
    def dtype(self):
        return self.triplane.planes[0].dtype

    def parameters(self) -> dict:
        params = {}
        for name, plane in zip(("xy", "xz", "yz"), self.triplane.planes):
            params[f"triplane.{name}"] = plane
        for net_name, net in (("mlp_color", self.mlp_color), ("mlp_sdf", self.mlp_sdf),
                              ("mlp_deform", self.mlp_deform)):
            for l, (w, b) in enumerate(zip(net.weights, net.biases)):
                params[f"{net_name}.w{l}"] = w
                params[f"{net_name}.b{l}"] = b
        params["style"] = self.style
        params["log_alpha"] = self.log_alpha
        return params


def make_scene(body, *, resolution=64, channels=32, style_dim=64, posenc_freqs=6,
               decoder_hidden=64, deform_hidden=128, deform_layers=4,
               alpha_init=0.1, box_expand=0.15, seed=0, dtype=np.float32) -> Scene:
    """Initialize a scene around a template body.

    The canonical box is the rest-pose bounding box expanded per axis; the
    residual-SDF and deformation nets start with zeroed final layers so the
    initial field is exactly the body prior.
    """
    rng = np.random.default_rng(seed)
    lo, hi = body.rest_mesh().bounds()
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * (1.0 + box_expand)
    planes = [rng.normal(0.0, 0.01, size=(resolution, resolution, channels)).astype(dtype)
              for _ in range(3)]
    tp = TriPlane(planes, center - half, center + half)

    mlp_color = Mlp.create([channels, decoder_hidden, decoder_hidden, 3],
                           final="sigmoid", rng=rng, dtype=dtype)
    mlp_sdf = Mlp.create([channels + 1, decoder_hidden, decoder_hidden, 1],
                         rng=rng, final_zero=True, dtype=dtype)
    deform_in = (6 * posenc_freqs + 3) + style_dim + (3 * body.n_joints + body.n_shapes)
    widths = [deform_in] + [deform_hidden] * deform_layers + [3]
    mlp_deform = Mlp.create(widths, rng=rng, final_zero=True, dtype=dtype)

    style = rng.normal(0.0, 0.1, size=style_dim).astype(dtype)
    log_alpha = np.array(np.log(alpha_init), dtype=dtype)
    return Scene(tp, mlp_color, mlp_sdf, mlp_deform, style, log_alpha, posenc_freqs)


def field_eval(scene: Scene, x_canonical: np.ndarray, d_body: np.ndarray):
    """Color and signed distance at canonical points.

    d = d_body + residual(features, d_body); with the residual decoder's
    final layer at zero the field equals the body prior everywhere.
    """
    x_canonical = np.atleast_2d(np.asarray(x_canonical))
    d_body = np.atleast_1d(np.asarray(d_body))
    if not (np.all(np.isfinite(x_canonical)) and np.all(np.isfinite(d_body))):
        raise ParameterError("field inputs must be finite")
    feats, _ = sample_triplane(scene.triplane, x_canonical)
    color, _ = scene.mlp_color.forward(feats)
    sdf_in = np.concatenate([feats, d_body[:, None].astype(feats.dtype)], axis=1)
    delta, _ = scene.mlp_sdf.forward(sdf_in)
    return color, d_body + delta[:, 0]


def field_gradient(scene: Scene, x_canonical: np.ndarray, d_body: np.ndarray,
                   grad_d_body: np.ndarray, rot: np.ndarray | None = None) -> np.ndarray:
    """Spatial gradient of the composed signed distance.

    Chains the body-SDF gradient (exact unit direction to the closest
    surface point) with the residual decoder's input gradient through the
    tri-plane interpolation:

        grad d = (1 + dres/d d_body) grad_d_body + Rot . (J_F^T dres/dF)

    rot maps canonical directions back to the query frame (the blended
    inverse-skinning rotation); identity when omitted.
    """
    x_canonical = np.atleast_2d(np.asarray(x_canonical))
    d_body = np.atleast_1d(np.asarray(d_body))
    grad_d_body = np.atleast_2d(np.asarray(grad_d_body))
    feats, tp_cache = sample_triplane(scene.triplane, x_canonical)
    sdf_in = np.concatenate([feats, d_body[:, None].astype(feats.dtype)], axis=1)
    _, cache = scene.mlp_sdf.forward(sdf_in)
    q, _ = scene.mlp_sdf.input_gradient(cache, np.ones((len(feats), 1), dtype=feats.dtype))
    jac = triplane_jacobian(scene.triplane, tp_cache)
    v = np.einsum("nc,nck->nk", q[:, :-1], jac)
    if rot is not None:
        v = np.einsum("nab,nb->na", rot, v)
    return (1.0 + q[:, -1])[:, None] * grad_d_body + v


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_MAGIC = b"AVGN"
CHECKPOINT_VERSION = 1


def _write_block(f, name: str, arr: np.ndarray):
    data = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    f.write(struct.pack("<H", len(name_b)))
    f.write(name_b)
    f.write(struct.pack("<B", data.ndim))
    for d in data.shape:
        f.write(struct.pack("<I", d))
    f.write(data.tobytes())


def _read_block(f):
    try:
        (nlen,) = struct.unpack("<H", f.read(2))
        name = f.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", f.read(1))
        shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(f.read(4 * count), dtype="<f4", count=count).reshape(shape)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise MalformedFileError(f"checkpoint truncated or corrupt: {exc}") from exc
    return name, data


def save_checkpoint(scene: Scene, path, extra: dict | None = None) -> None:
    """Serialize all scene parameters (and optional extra blocks, e.g.
    optimizer state) as named little-endian float32 blocks."""
    blocks = dict(scene.parameters())
    blocks["meta.box_min"] = scene.triplane.box_min
    blocks["meta.box_max"] = scene.triplane.box_max
    blocks["meta.posenc_freqs"] = np.array(float(scene.posenc_freqs))
    for k, v in (extra or {}).items():
        blocks[f"extra.{k}"] = np.asarray(v)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blocks)))
        for name in sorted(blocks):
            _write_block(f, name, blocks[name])


def read_checkpoint_blocks(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise MalformedFileError(f"{path}: bad magic {magic!r}")
        version_raw = f.read(4)
        if len(version_raw) < 4:
            raise MalformedFileError(f"{path}: truncated header")
        (version,) = struct.unpack("<I", version_raw)
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(
                f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        (n_blocks,) = struct.unpack("<I", f.read(4))
        blocks = {}
        for _ in range(n_blocks):
            name, data = _read_block(f)
            blocks[name] = data
    return blocks


def _mlp_from_blocks(blocks, prefix, hidden="softplus", final="linear") -> Mlp:
    weights, biases = [], []
    l = 0
    while f"{prefix}.w{l}" in blocks:
        weights.append(np.array(blocks[f"{prefix}.w{l}"], dtype=np.float32))
        biases.append(np.array(blocks[f"{prefix}.b{l}"], dtype=np.float32))
        l += 1
    if not weights:
        raise MalformedFileError(f"checkpoint has no blocks for {prefix}")
    acts = [hidden] * (len(weights) - 1) + [final]
    return Mlp(weights, biases, acts)


def load_checkpoint(path) -> Scene:
    """Rebuild a Scene from a checkpoint written by save_checkpoint."""
    blocks = read_checkpoint_blocks(path)
    try:
        planes = [np.array(blocks[f"triplane.{n}"], dtype=np.float32)
                  for n in ("xy", "xz", "yz")]
        tp = TriPlane(planes, np.float64(blocks["meta.box_min"]),
                      np.float64(blocks["meta.box_max"]))
        scene = Scene(
            triplane=tp,
            mlp_color=_mlp_from_blocks(blocks, "mlp_color", final="sigmoid"),
            mlp_sdf=_mlp_from_blocks(blocks, "mlp_sdf"),
            mlp_deform=_mlp_from_blocks(blocks, "mlp_deform"),
            style=np.array(blocks["style"], dtype=np.float32),
            log_alpha=np.array(blocks["log_alpha"], dtype=np.float32).reshape(()),
            posenc_freqs=int(blocks["meta.posenc_freqs"]),
        )
    except KeyError as exc:
        raise MalformedFileError(f"{path}: missing block {exc}") from exc
    return scene
