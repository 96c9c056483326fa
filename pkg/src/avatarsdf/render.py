"""SDF volume renderer.

Pinhole rays are clipped against the posed body's bounding box, sampled in
equal depth bins (optionally jittered by per-pixel counter RNG streams, so
output never depends on scheduling), pulled back to canonical space, and the
field's signed distance is converted to density and alpha-composited.

Density model: sigma = (1/alpha) * logistic(-d / alpha); smaller alpha means
a tighter shell around the zero level set.

Far from the body (body SDF beyond RenderConfig.clamp_margin) the field is
clamped to the body prior itself: d = d_body and the sample takes the
background color.  The learned residual therefore lives in a tube around
the body, which both bounds its reach and keeps renders free of floaters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dcfield

import numpy as np

from . import mesh as meshmod
from .body import BodyParams, TemplateBody
from .errors import MalformedFileError, ParameterError
from .field import Scene, field_eval
from .rng import uniform01
from .skinning import PosedBody, canonical_map


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus a rigid world-from-camera pose.

    Camera frame: x right, y down, z forward; a pixel's ray passes through
    its center (px + 0.5, py + 0.5).
    """
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # (3, 3) world-from-camera
    translation: np.ndarray  # (3,) camera position, meters
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ParameterError("image size must be positive")
        r = self.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ParameterError("camera rotation is not orthonormal")

    def ray_directions(self, pix: np.ndarray) -> np.ndarray:
        """Unit world-space directions through continuous pixel coordinates (n, 2)."""
        pix = np.atleast_2d(np.asarray(pix, dtype=np.float64))
        d = np.stack([(pix[:, 0] - self.cx) / self.fx,
                      (pix[:, 1] - self.cy) / self.fy,
                      np.ones(len(pix))], axis=1)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d @ self.rotation.T

    def scaled(self, factor: float) -> "Camera":
        """Same view at a different image resolution."""
        return Camera(self.fx * factor, self.fy * factor, self.cx * factor,
                      self.cy * factor, self.rotation, self.translation,
                      int(round(self.width * factor)), int(round(self.height * factor)))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(),
                "translation": self.translation.tolist(),
                "width": self.width, "height": self.height}

    @staticmethod
    def from_dict(doc: dict) -> "Camera":
        try:
            return Camera(doc["fx"], doc["fy"], doc["cx"], doc["cy"],
                          np.asarray(doc["rotation"], dtype=np.float64),
                          np.asarray(doc["translation"], dtype=np.float64),
                          int(doc["width"]), int(doc["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedFileError(f"bad camera record: {exc}") from exc


def look_at_camera(eye, target, up=(0.0, 1.0, 0.0), width=64, height=64,
                   focal: float | None = None) -> Camera:
    """Camera at eye looking toward target; focal defaults to 1.2 * width."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ParameterError("eye and target coincide")
    forward /= norm
    down = -(up - (up @ forward) * forward)
    dn = np.linalg.norm(down)
    if dn < 1e-12:
        raise ParameterError("view direction is parallel to up")
    down /= dn
    right = np.cross(down, forward)
    rot = np.stack([right, down, forward], axis=1)
    f = focal if focal is not None else 1.2 * width
    return Camera(f, f, width / 2.0, height / 2.0, rot, eye, width, height)


def orbit_cameras(center, radius: float, count: int, elevation: float = 0.0,
                  width: int = 64, height: int = 64,
                  focal: float | None = None) -> list:
    """count cameras on a horizontal circle, all looking at center."""
    cams = []
    for i in range(count):
        az = 2.0 * np.pi * i / count
        eye = np.asarray(center, dtype=np.float64) + np.array(
            [radius * np.sin(az), elevation, radius * np.cos(az)])
        cams.append(look_at_camera(eye, center, width=width, height=height, focal=focal))
    return cams


@dataclass
class RayBatch:
    """Rays through pixel centers with box-clipped [near, far] ranges.

    Rays that miss the box have hit=False and carry no samples; their
    pixels render as pure background.
    """
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    hit: np.ndarray
    pixel_ids: np.ndarray  # flat pixel index, keys the per-pixel RNG stream


def ray_box_intersect(origins, directions, box_min, box_max):
    """Slab test; returns (near >= 0, far, hit)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (box_min - origins) * inv
        t1 = (box_max - origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    near = lo.max(axis=1)
    far = hi.min(axis=1)
    hit = (far > np.maximum(near, 0.0)) & np.isfinite(far)
    return np.maximum(near, 0.0), far, hit


def generate_rays(camera: Camera, bounds, pixels: np.ndarray | None = None) -> RayBatch:
    """Rays for integer pixel indices (n, 2) or the whole image when omitted."""
    if pixels is None:
        xs, ys = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
        pixels = np.stack([xs.ravel(), ys.ravel()], axis=1)
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    dirs = camera.ray_directions(pixels + 0.5)
    origins = np.broadcast_to(camera.translation, dirs.shape).copy()
    near, far, hit = ray_box_intersect(origins, dirs, np.asarray(bounds[0]),
                                       np.asarray(bounds[1]))
    ids = pixels[:, 1] * camera.width + pixels[:, 0]
    return RayBatch(origins, dirs, np.where(hit, near, 0.0),
                    np.where(hit, far, 0.0), hit, ids)


def sample_rays(batch: RayBatch, n_samples: int, stratified: bool = False,
                seed: int = 0):
    """Depth values, positions, and spacings for every ray.

    Unstratified sampling uses bin centers; stratified sampling jitters
    uniformly inside each bin, with one RNG stream per (seed, pixel id,
    bin), deterministic regardless of batching or order.  The first
    spacing is measured from the near plane.
    """
    if n_samples < 1:
        raise ParameterError("need at least one sample per ray")
    n = len(batch.origins)
    if stratified:
        u = uniform01(seed, batch.pixel_ids[:, None], np.arange(n_samples)[None, :])
    else:
        u = np.full((n, n_samples), 0.5)
    frac = (np.arange(n_samples)[None, :] + u) / n_samples
    span = (batch.far - batch.near)[:, None]
    tvals = batch.near[:, None] + frac * span
    positions = batch.origins[:, None, :] + tvals[..., None] * batch.directions[:, None, :]
    deltas = np.diff(tvals, axis=1, prepend=batch.near[:, None])
    return tvals, positions, deltas


def sdf_to_density(d, alpha):
    """sigma = (1/alpha) * logistic(-d/alpha), in (0, 1/alpha), decreasing in d."""
    alpha = np.asarray(alpha)
    if np.any(alpha <= 0):
        raise ParameterError("alpha must be positive")
    z = -np.asarray(d) / alpha
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0.0, 1.0, ez) / (1.0 + ez) / alpha


@dataclass
class IntegrateResult:
    rgb: np.ndarray      # (n, 3)
    depth: np.ndarray    # (n,) transmittance-weighted expected depth
    alpha: np.ndarray    # (n,) total opacity, sum of weights
    weights: np.ndarray  # (n, N)


def integrate(sigma, color, deltas, tvals, background=(1.0, 1.0, 1.0)) -> IntegrateResult:
    """Alpha-composite samples along each ray.

    weights w_i = T_i (1 - exp(-sigma_i delta_i)) with T_i the accumulated
    transmittance; residual transmittance is composited with the constant
    background color.
    """
    sigma = np.atleast_2d(sigma)
    deltas = np.atleast_2d(deltas)
    tvals = np.atleast_2d(tvals)
    if np.any(deltas < 0):
        raise ParameterError("sample spacings must be non-negative")
    tau = sigma * deltas
    accum = np.cumsum(tau, axis=1)
    trans = np.exp(-(accum - tau))  # exclusive cumulative sum
    weights = trans * (-np.expm1(-tau))
    alpha = weights.sum(axis=1)
    bg = np.asarray(background, dtype=weights.dtype)
    rgb = np.einsum("nk,nkc->nc", weights, np.atleast_3d(color)) + (1.0 - alpha)[:, None] * bg
    depth = (weights * tvals).sum(axis=1) / np.maximum(alpha, 1e-12)
    return IntegrateResult(rgb=rgb, depth=depth, alpha=alpha, weights=weights)


@dataclass(frozen=True)
class RenderConfig:
    """Knobs of the sampling and compositing pipeline."""
    samples_per_ray: int = 48
    stratified: bool = False
    seed: int = 0
    background: tuple = (1.0, 1.0, 1.0)
    knn: int = 1
    invert_mode: str = "blend_then_invert"
    clamp_margin: float = 0.25   # beyond this body distance the field is the prior
    box_pad: float = 0.45        # bounding-box expansion defining near/far
    alpha_sentinel: float = 1e-4  # below this opacity, depth reports background

    def __post_init__(self):
        if self.samples_per_ray < 1:
            raise ParameterError("samples_per_ray must be >= 1")
        if self.clamp_margin <= 0 or self.box_pad <= 0:
            raise ParameterError("margins must be positive")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["background"] = list(self.background)
        return d


@dataclass
class RenderOutput:
    rgb: np.ndarray    # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters; +inf where nothing was hit
    alpha: np.ndarray  # (H, W) in [0, 1]
    metadata: dict = dcfield(default_factory=dict)


def scene_bounds(posed: PosedBody, pad: float):
    lo, hi = posed.mesh.bounds()
    return lo - pad, hi + pad


def evaluate_samples(scene: Scene, posed: PosedBody, positions: np.ndarray,
                     config: RenderConfig):
    """Field color and signed distance for flat observation-space samples.

    Samples beyond clamp_margin from the body shortcut to (background
    color, body SDF); the rest run the full canonical-map + field path.
    """
    m = len(positions)
    dtype = scene.dtype
    d_body = meshmod.signed_distances(posed.index, positions)
    color = np.empty((m, 3), dtype=dtype)
    color[:] = np.asarray(config.background, dtype=dtype)
    d_out = d_body.astype(dtype)
    near_mask = d_body < config.clamp_margin
    if np.any(near_mask):
        pts = positions[near_mask]
        cmap = canonical_map(pts, posed, net=scene.mlp_deform, style=scene.style,
                             n_freqs=scene.posenc_freqs, k=config.knn,
                             mode=config.invert_mode)
        f, d = field_eval(scene, cmap.canonical.astype(dtype),
                          d_body[near_mask].astype(dtype))
        color[near_mask] = f
        d_out[near_mask] = d
    return color, d_out


def render(scene: Scene, body: TemplateBody, params: BodyParams, camera: Camera,
           config: RenderConfig | None = None,
           posed: PosedBody | None = None) -> RenderOutput:
    """Render the avatar under the given pose/shape and camera.

    Deterministic for fixed (scene, params, camera, config): repeated calls
    produce bitwise-identical images.
    """
    config = config or RenderConfig()
    posed = posed if posed is not None else PosedBody(body, params)
    bounds = scene_bounds(posed, config.box_pad)
    rays = generate_rays(camera, bounds)
    h, w = camera.height, camera.width
    bg = np.asarray(config.background, dtype=scene.dtype)

    rgb = np.empty((h * w, 3), dtype=scene.dtype)
    rgb[:] = bg
    alpha = np.zeros(h * w, dtype=scene.dtype)
    depth = np.full(h * w, np.inf)

    hit = rays.hit
    if np.any(hit):
        sub = RayBatch(rays.origins[hit], rays.directions[hit], rays.near[hit],
                       rays.far[hit], rays.hit[hit], rays.pixel_ids[hit])
        tvals, positions, deltas = sample_rays(sub, config.samples_per_ray,
                                               config.stratified, config.seed)
        n, k = tvals.shape
        color, d = evaluate_samples(scene, posed, positions.reshape(-1, 3), config)
        sigma = sdf_to_density(d, np.exp(scene.log_alpha))
        res = integrate(sigma.reshape(n, k), color.reshape(n, k, 3),
                        deltas.astype(scene.dtype), tvals.astype(scene.dtype), bg)
        idx = rays.pixel_ids[hit]
        rgb[idx] = res.rgb
        alpha[idx] = res.alpha
        depth[idx] = np.where(res.alpha > config.alpha_sentinel, res.depth, np.inf)

    meta = {
        "samples_per_ray": config.samples_per_ray,
        "near_far": "posed-body bounding box + %.3g m" % config.box_pad,
        "bounds_min": np.asarray(bounds[0]).tolist(),
        "bounds_max": np.asarray(bounds[1]).tolist(),
        "resolved_config": config.to_dict(),
    }
    return RenderOutput(rgb=rgb.reshape(h, w, 3), depth=depth.reshape(h, w),
                        alpha=alpha.reshape(h, w), metadata=meta)


def render_depth(scene: Scene, body: TemplateBody, params: BodyParams,
                 camera: Camera, config: RenderConfig | None = None) -> np.ndarray:
    """Expected-depth image; +inf marks background."""
    return render(scene, body, params, camera, config).depth


def save_camera(camera: Camera, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        json.dump(camera.to_dict(), f, indent=1)


def load_camera(path) -> Camera:
    try:
        with open(path, "r", encoding="ascii") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc
    return Camera.from_dict(doc)


def save_cameras(cameras, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        json.dump([c.to_dict() for c in cameras], f, indent=1)


def load_cameras(path) -> list:
    try:
        with open(path, "r", encoding="ascii") as f:
            docs = json.load(f)
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc
    if isinstance(docs, dict):
        docs = [docs]
    return [Camera.from_dict(d) for d in docs]
