"""Multi-view inverse-rendering fitter.

Targets are sphere-traced renders of the analytic capsule body (an oracle
fully independent of the volume renderer).  Fitting minimizes a photometric
term plus the geometric regularizers with exact hand-derived gradients;
Adam updates parameter groups at separate rates.  Every random choice is
keyed by (seed, step), so a run is reproducible and an interrupted fit
resumes on the identical trajectory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dcfield, replace

import numpy as np

from . import capsules, mesh as meshmod
from .body import (BodyParams, TemplateBody, generate_test_body, load_body_asset,
                   save_body_asset)
from .capsules import BodySpec
from .errors import DivergenceError, MalformedFileError, ParameterError
from .field import (Mlp, Scene, make_scene, read_checkpoint_blocks, sample_triplane,
                    save_checkpoint, load_checkpoint, triplane_backward_position,
                    triplane_backward_values, triplane_jacobian,
                    triplane_jacobian_backward)
from .images import load_pfm, load_ppm, save_pfm, save_ppm
from .losses import (LossReport, LossWeights, MINSURF_SHARPNESS, deform_reg_loss,
                     eikonal_loss, minsurf_loss, photometric_loss, prior_loss,
                     prior_weight, total_loss)
from .render import (Camera, RayBatch, RenderConfig, RenderOutput, generate_rays,
                     integrate, render, sample_rays, scene_bounds, sdf_to_density)
from .rng import generator, hash_u64
from .skinning import PosedBody, deform_input, inverse_skin

# ---------------------------------------------------------------------------
# targets


@dataclass
class TargetView:
    camera: Camera
    params: BodyParams
    rgb: np.ndarray    # (H, W, 3) in [0, 1]
    alpha: np.ndarray  # (H, W) binary mask
    depth: np.ndarray | None = None  # (H, W) meters, +inf background


@dataclass
class TargetSet:
    body: TemplateBody
    views: list

    def __len__(self) -> int:
        return len(self.views)


def params_to_dict(p: BodyParams) -> dict:
    return {"theta": p.theta.tolist(), "beta": p.beta.tolist(),
            "root_translation": p.root_translation.tolist()}


def params_from_dict(doc: dict) -> BodyParams:
    try:
        return BodyParams(np.asarray(doc["theta"], dtype=np.float64),
                          np.asarray(doc["beta"], dtype=np.float64),
                          np.asarray(doc.get("root_translation", (0.0, 0.0, 0.0)),
                                     dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(f"bad body-params record: {exc}") from exc


def make_synthetic_targets(spec: BodySpec, poses, cameras,
                           background=(1.0, 1.0, 1.0)) -> TargetSet:
    """Sphere-trace the analytic capsule body into a deterministic target set.

    One view per (pose, camera) pair (lists are zipped; a single pose is
    broadcast).  Colors come from the procedural albedo evaluated at the
    canonical pre-image of each hit point, so re-posing recolors
    consistently.
    """
    from .body import forward_kinematics

    body = generate_test_body(spec)
    caps = capsules.rest_capsules(spec)
    if isinstance(poses, BodyParams):
        poses = [poses] * len(cameras)
    if len(poses) != len(cameras):
        raise ParameterError("need one pose per camera (or a single shared pose)")
    bg = np.asarray(background, dtype=np.float64)

    views = []
    for params, cam in zip(poses, cameras):
        tf = forward_kinematics(body.skeleton, params)
        posed_caps = caps.posed(tf.rotations, tf.translations)
        xs, ys = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
        pix = np.stack([xs.ravel(), ys.ravel()], axis=1)
        dirs = cam.ray_directions(pix + 0.5)
        origins = np.broadcast_to(cam.translation, dirs.shape)
        beta0 = float(params.beta[0]) if len(params.beta) else 0.0
        hit, t, points, cap_idx = capsules.sphere_trace(
            posed_caps, origins, dirs, girth_beta=beta0, spec=spec)
        canon = capsules.map_to_canonical(points[hit], cap_idx[hit],
                                          tf.rotations, tf.translations, caps.owner)
        rgb = np.tile(bg, (len(pix), 1))
        rgb[hit] = np.clip(capsules.albedo(canon), 0.0, 1.0)
        depth = np.full(len(pix), np.inf)
        depth[hit] = t[hit]
        views.append(TargetView(
            camera=cam, params=params,
            rgb=rgb.reshape(cam.height, cam.width, 3),
            alpha=hit.reshape(cam.height, cam.width).astype(np.float64),
            depth=depth.reshape(cam.height, cam.width)))
    return TargetSet(body=body, views=views)


def save_targets(targets: TargetSet, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_body_asset(targets.body, os.path.join(out_dir, "body.json"))
    index = []
    for i, v in enumerate(targets.views):
        rgb_name, mask_name, depth_name = (f"view_{i:03d}.ppm", f"mask_{i:03d}.ppm",
                                           f"depth_{i:03d}.pfm")
        save_ppm(os.path.join(out_dir, rgb_name), v.rgb)
        save_ppm(os.path.join(out_dir, mask_name), v.alpha)
        entry = {"camera": v.camera.to_dict(), "params": params_to_dict(v.params),
                 "rgb": rgb_name, "mask": mask_name}
        if v.depth is not None:
            save_pfm(os.path.join(out_dir, depth_name), v.depth)
            entry["depth"] = depth_name
        index.append(entry)
    with open(os.path.join(out_dir, "views.json"), "w", encoding="ascii") as f:
        json.dump(index, f, indent=1)


def load_targets(in_dir) -> TargetSet:
    body = load_body_asset(os.path.join(in_dir, "body.json"))
    try:
        with open(os.path.join(in_dir, "views.json"), "r", encoding="ascii") as f:
            index = json.load(f)
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"{in_dir}/views.json: {exc}") from exc
    views = []
    for entry in index:
        depth = None
        if "depth" in entry:
            depth = load_pfm(os.path.join(in_dir, entry["depth"]))
        views.append(TargetView(
            camera=Camera.from_dict(entry["camera"]),
            params=params_from_dict(entry["params"]),
            rgb=load_ppm(os.path.join(in_dir, entry["rgb"])),
            alpha=(load_ppm(os.path.join(in_dir, entry["mask"]))[:, :, 0] > 0.5).astype(np.float64),
            depth=depth))
    return TargetSet(body=body, views=views)


# ---------------------------------------------------------------------------
# metrics


def masked_psnr(image: np.ndarray, reference: np.ndarray, mask: np.ndarray) -> float:
    """PSNR (dB) over the masked pixels' rgb channels."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ParameterError("empty mask")
    err = (np.asarray(image, dtype=np.float64) - reference)[m]
    mse = float(np.mean(np.square(err)))
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)


def silhouette_iou(alpha: np.ndarray, mask: np.ndarray, threshold: float = 0.5) -> float:
    a = np.asarray(alpha) > threshold
    b = np.asarray(mask) > threshold
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def depth_mae(depth: np.ndarray, reference: np.ndarray, mask: np.ndarray) -> float:
    """Mean |depth error| over masked pixels where both maps are finite."""
    m = np.asarray(mask, dtype=bool) & np.isfinite(depth) & np.isfinite(reference)
    if not m.any():
        raise ParameterError("no overlapping finite depth pixels")
    return float(np.mean(np.abs(np.asarray(depth) - reference)[m]))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @staticmethod
    def for_params(params: dict) -> "AdamState":
        return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                         v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, rates: dict,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.

    Moments are kept in the parameters' dtype so checkpointed state resumes
    bitwise; the update arithmetic runs in float64.
    """
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = np.asarray(grads.get(name, 0.0), dtype=np.float64)
        m = state.m[name].astype(np.float64) * beta1 + (1 - beta1) * g
        v = state.v[name].astype(np.float64) * beta2 + (1 - beta2) * g * g
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p[...] = (p.astype(np.float64) - rates[name] * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


def _rate_map(params: dict, config: "FitConfig") -> dict:
    rates = {}
    for name in params:
        if name.startswith("triplane."):
            rates[name] = config.lr_triplane
        elif name == "style":
            rates[name] = config.lr_style
        elif name == "log_alpha":
            rates[name] = config.lr_alpha
        else:
            rates[name] = config.lr_mlp
    return rates


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class FitConfig:
    """Fitting recipe; defaults reproduce the shipped end-to-end run."""
    iterations: int = 1200
    rays_per_step: int = 1024
    samples_per_ray: int = 48
    seed: int = 0
    lr_triplane: float = 1e-2
    lr_mlp: float = 1e-3
    lr_style: float = 1e-3
    lr_alpha: float = 1e-2  # log_alpha travels ~3 log-units during a fit
    weights: LossWeights = dcfield(default_factory=LossWeights)
    mask_ray_fraction: float = 0.5     # rays forced inside the target mask
    eikonal_points: int = 512          # half ray samples, half box samples
    progressive_fraction: float = 0.3  # share of steps at reduced resolution
    progressive_scale: int = 2
    knn: int = 1
    invert_mode: str = "blend_then_invert"
    clamp_margin: float = 0.25
    box_pad: float = 0.45
    background: tuple = (1.0, 1.0, 1.0)
    divergence_factor: float = 10.0
    divergence_patience: int = 200
    checkpoint_every: int = 0          # 0: only the final checkpoint
    # scene architecture
    triplane_resolution: int = 64
    triplane_channels: int = 32
    style_dim: int = 64
    posenc_freqs: int = 6
    decoder_hidden: int = 64
    deform_hidden: int = 128
    deform_layers: int = 4
    alpha_init: float = 0.1

    def __post_init__(self):
        if self.iterations < 0:
            raise ParameterError("iterations must be >= 0")
        if self.rays_per_step < 1 or self.samples_per_ray < 1:
            raise ParameterError("rays and samples per step must be positive")
        for lr in (self.lr_triplane, self.lr_mlp, self.lr_style, self.lr_alpha):
            if lr <= 0:
                raise ParameterError("learning rates must be positive")

    def render_config(self, stratified: bool = False, seed: int | None = None) -> RenderConfig:
        return RenderConfig(samples_per_ray=self.samples_per_ray, stratified=stratified,
                            seed=self.seed if seed is None else seed,
                            background=self.background, knn=self.knn,
                            invert_mode=self.invert_mode, clamp_margin=self.clamp_margin,
                            box_pad=self.box_pad)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "weights"}
        d["background"] = list(self.background)
        d["weights"] = dict(self.weights.__dict__)
        return d


# ---------------------------------------------------------------------------
# one optimization step: loss + exact gradients


class _StageView:
    """Per-view, per-resolution precomputation shared by all steps."""

    def __init__(self, view: TargetView, posed: PosedBody, scale: int):
        if scale == 1:
            self.camera = view.camera
            self.rgb = view.rgb
            self.alpha = view.alpha
        else:
            h, w = view.rgb.shape[:2]
            hs, ws = h // scale, w // scale
            self.camera = view.camera.scaled(1.0 / scale)
            self.rgb = view.rgb[:hs * scale, :ws * scale].reshape(
                hs, scale, ws, scale, 3).mean(axis=(1, 3))
            self.alpha = view.alpha[:hs * scale, :ws * scale].reshape(
                hs, scale, ws, scale).mean(axis=(1, 3))
        self.posed = posed
        self.flat_rgb = self.rgb.reshape(-1, 3)
        self.flat_alpha = self.alpha.reshape(-1)
        self.mask_pixels = np.flatnonzero(self.flat_alpha > 0.25)
        self.n_pixels = self.flat_alpha.size


def _select_pixels(stage: _StageView, n_rays: int, mask_fraction: float,
                   seed: int, step: int) -> np.ndarray:
    if n_rays >= stage.n_pixels:
        return np.arange(stage.n_pixels)
    rng = generator(seed, 0x5E1, step)
    n_mask = min(int(n_rays * mask_fraction), len(stage.mask_pixels))
    picks = [rng.choice(stage.mask_pixels, size=n_mask,
                        replace=len(stage.mask_pixels) < n_mask)] if n_mask else []
    picks.append(rng.integers(0, stage.n_pixels, size=n_rays - n_mask))
    return np.concatenate(picks)


def _sigmoid64(z):
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0.0, 1.0, ez) / (1.0 + ez)


def step_loss_and_grads(scene: Scene, stage: _StageView, step: int,
                        config: FitConfig, want_grads: bool = True):
    """Evaluate the total fitting loss at one step and, optionally, its
    exact gradients with respect to every scene parameter.

    Pure in (scene parameters, stage, step, config): the pixel subset, the
    stratification jitter, and the regularizer sample sites are all counter
    -derived, which is what makes checkpoint resume exact and the gradients
    finite-difference checkable.
    """
    posed = stage.posed
    weights = config.weights
    dtype = scene.dtype
    bg = np.asarray(config.background, dtype=dtype)
    params = scene.parameters()
    grads = {k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()} \
        if want_grads else None

    pixels_flat = _select_pixels(stage, config.rays_per_step,
                                 config.mask_ray_fraction, config.seed, step)
    pix = np.stack([pixels_flat % stage.camera.width,
                    pixels_flat // stage.camera.width], axis=1)
    bounds = scene_bounds(posed, config.box_pad)
    rays = generate_rays(stage.camera, bounds, pix)

    n_sel = len(pixels_flat)
    rendered_rgb = np.tile(np.asarray(config.background, dtype=np.float64), (n_sel, 1))
    rendered_alpha = np.zeros(n_sel)

    hit = rays.hit
    n_hit = int(hit.sum())
    report_counts = {"rays": n_sel, "hit_rays": n_hit}

    # ---- forward through the sample pipeline (hit rays only)
    if n_hit:
        sub = RayBatch(rays.origins[hit], rays.directions[hit], rays.near[hit],
                       rays.far[hit], rays.hit[hit], rays.pixel_ids[hit])
        jitter_seed = int(hash_u64(config.seed, 0x7A7, step))
        tvals, positions, deltas = sample_rays(sub, config.samples_per_ray, True,
                                               jitter_seed)
        nray, nsmp = tvals.shape
        flat_pos = positions.reshape(-1, 3)
        m_all = len(flat_pos)
        d_body = meshmod.signed_distances(posed.index, flat_pos)
        near = d_body < config.clamp_margin
        idx_in = np.flatnonzero(near)
        n_in = len(idx_in)

        color_all = np.empty((m_all, 3), dtype=dtype)
        color_all[:] = bg
        d_all = d_body.astype(dtype)

        if n_in:
            pts_in = flat_pos[idx_in]
            skin_pts, _ = inverse_skin(pts_in, posed, k=config.knn,
                                       mode=config.invert_mode)
            dinp = deform_input(pts_in, scene.style, posed.params,
                                scene.posenc_freqs).astype(dtype)
            delta_def, cache_def = scene.mlp_deform.forward(dinp)
            xbar = skin_pts.astype(dtype) + delta_def
            feats, cache_tp = sample_triplane(scene.triplane, xbar)
            col_in, cache_col = scene.mlp_color.forward(feats)
            sdf_in = np.concatenate([feats, d_body[idx_in, None].astype(dtype)], axis=1)
            dres, cache_sdf = scene.mlp_sdf.forward(sdf_in)
            d_in = d_body[idx_in] + dres[:, 0].astype(np.float64)
            color_all[idx_in] = col_in
            d_all[idx_in] = d_in.astype(dtype)

        # density + compositing in float64 for a stable backward
        a = float(scene.log_alpha)
        alpha_v = np.exp(a)
        u = -d_all.astype(np.float64) / alpha_v
        s = _sigmoid64(u)
        sigma = s / alpha_v
        res = integrate(sigma.reshape(nray, nsmp),
                        color_all.reshape(nray, nsmp, 3).astype(np.float64),
                        deltas, tvals, np.asarray(config.background, np.float64))
        hit_rows = np.flatnonzero(hit)
        rendered_rgb[hit_rows] = res.rgb
        rendered_alpha[hit_rows] = res.alpha
        report_counts["samples"] = m_all
        report_counts["near_samples"] = n_in

    # ---- scalar loss terms
    target_rgb = stage.flat_rgb[pixels_flat]
    target_alpha = stage.flat_alpha[pixels_flat]
    photo = photometric_loss(rendered_rgb, rendered_alpha, target_rgb, target_alpha)
    if n_hit and n_in:
        term_prior = prior_loss(d_in, d_body[idx_in], weights.kappa,
                                weights.prior_norm, total_count=m_all)
        term_min = minsurf_loss(d_in, total_count=m_all)
        term_def = deform_reg_loss(delta_def)
    else:
        term_prior, term_min, term_def = 0.0, 0.0, 0.0

    # ---- unit-gradient regularizer on near-body sample sites
    eik_seed = int(hash_u64(config.seed, 0xE1C, step))
    eik_pts = []
    if n_hit and n_in:
        take = min(config.eikonal_points // 2, n_in)
        sel = generator(eik_seed, 1).permutation(n_in)[:take]
        eik_pts.append(flat_pos[idx_in[sel]])
    box_rng = generator(eik_seed, 2)
    lo, hi = scene_bounds(posed, config.box_pad)
    box_pts = box_rng.uniform(lo, hi, size=(config.eikonal_points, 3))
    db_box = meshmod.signed_distances(posed.index, box_pts)
    box_keep = db_box < config.clamp_margin
    eik_pts.append(box_pts[box_keep][:config.eikonal_points // 2])
    eik_pts = np.concatenate([p for p in eik_pts if len(p)]) if any(len(p) for p in eik_pts) \
        else np.zeros((0, 3))

    term_eik = 0.0
    if len(eik_pts):
        db_e, gdb_e = meshmod.signed_distance_with_gradient(posed.index, eik_pts)
        skin_e, rotinv_e = inverse_skin(eik_pts, posed, k=config.knn,
                                        mode=config.invert_mode)
        feats_e, cache_tpe = sample_triplane(scene.triplane, skin_e.astype(dtype))
        sdf_in_e = np.concatenate([feats_e, db_e[:, None].astype(dtype)], axis=1)
        _, cache_se = scene.mlp_sdf.forward(sdf_in_e)
        ones = np.ones((len(eik_pts), 1), dtype=dtype)
        q, gcache_se = scene.mlp_sdf.input_gradient(cache_se, ones)
        q = q.astype(np.float64)
        jac_e = triplane_jacobian(scene.triplane, cache_tpe).astype(np.float64)
        v = np.einsum("nc,nck->nk", q[:, :-1], jac_e)
        g_eik = (1.0 + q[:, -1])[:, None] * gdb_e \
            + np.einsum("nba,nb->na", rotinv_e, v)
        term_eik = eikonal_loss(g_eik)
        report_counts["eikonal_points"] = len(eik_pts)

    report = total_loss(
        {"photo": photo, "prior": term_prior, "minsurf": term_min,
         "deform": term_def, "eikonal": term_eik},
        weights, counts=report_counts)

    if not want_grads:
        return report, None

    # ------------------------------------------------------------------
    # backward
    if n_hit:
        gp = (2.0 / (4.0 * n_sel)) * (rendered_rgb - target_rgb) * weights.photo
        ga = (2.0 / (4.0 * n_sel)) * (rendered_alpha - target_alpha) * weights.photo
        gp_hit = gp[hit_rows]
        ga_hit = ga[hit_rows]

        # through the compositor: dL/dsigma_k = delta_k (w^_k T_k E_k - S_k)
        w = res.weights
        col3 = color_all.reshape(nray, nsmp, 3).astype(np.float64)
        what = np.einsum("nkc,nc->nk", col3 - bg.astype(np.float64), gp_hit) \
            + ga_hit[:, None]
        tau = sigma.reshape(nray, nsmp) * deltas
        trans = np.exp(-(np.cumsum(tau, axis=1) - tau))
        e_term = np.exp(-tau)
        ww = what * w
        suffix = np.cumsum(ww[:, ::-1], axis=1)[:, ::-1] - ww
        dtau = what * trans * e_term - suffix
        dsigma = (dtau * deltas).ravel()
        dcolor = (w[:, :, None] * gp_hit[:, None, :]).reshape(-1, 3)

        # density derivative (sigma = e^-a S(u), u = -d e^-a)
        sprime = s * (1.0 - s)
        dd_from_sigma = dsigma * (-np.exp(-2.0 * a) * sprime)
        dlog_alpha = float(np.sum(dsigma * (-sigma + d_all.astype(np.float64)
                                            * np.exp(-2.0 * a) * sprime)))
        grads["log_alpha"] += dlog_alpha

        if n_in:
            dd = dd_from_sigma[idx_in]
            # prior: w(d_body) * |d - d_body| (mean over all samples)
            diff = d_in - d_body[idx_in]
            wts = prior_weight(d_body[idx_in], weights.kappa)
            if weights.prior_norm == "l1":
                dd = dd + weights.prior * wts * np.sign(diff) / m_all
            else:
                dd = dd + weights.prior * wts * 2.0 * diff / m_all
            # minimal surface: exp(-100 |d|)
            dd = dd - weights.minsurf * MINSURF_SHARPNESS \
                * np.exp(-MINSURF_SHARPNESS * np.abs(d_in)) * np.sign(d_in) / m_all

            dws, dbs, dsdf_in = scene.mlp_sdf.backward(cache_sdf, dd[:, None].astype(dtype))
            _accum_mlp(grads, "mlp_sdf", dws, dbs)
            dfeats = dsdf_in[:, :-1].astype(np.float64)

            dcol_in = dcolor[idx_in]
            dws, dbs, dfc = scene.mlp_color.backward(cache_col, dcol_in.astype(dtype))
            _accum_mlp(grads, "mlp_color", dws, dbs)
            dfeats = dfeats + dfc.astype(np.float64)

            dplanes = triplane_backward_values(scene.triplane, cache_tp,
                                               dfeats.astype(dtype))
            _accum_planes(grads, dplanes)
            dxbar = triplane_backward_position(scene.triplane, cache_tp,
                                               dfeats.astype(dtype)).astype(np.float64)

            # deformation magnitude regularizer
            norms = np.linalg.norm(delta_def.astype(np.float64), axis=1)
            safe = norms > 1e-12
            dreg = np.zeros_like(dxbar)
            dreg[safe] = (weights.deform / n_in) \
                * delta_def.astype(np.float64)[safe] / norms[safe, None]
            ddelta = dxbar + dreg
            dws, dbs, dinp_grad = scene.mlp_deform.backward(cache_def,
                                                            ddelta.astype(dtype))
            _accum_mlp(grads, "mlp_deform", dws, dbs)
            enc_width = 6 * scene.posenc_freqs + 3
            grads["style"] += dinp_grad[:, enc_width:enc_width + scene.style.size] \
                .astype(np.float64).sum(axis=0)

    if len(eik_pts) and weights.eikonal > 0:
        norm_g = np.linalg.norm(g_eik, axis=1)
        safe = np.maximum(norm_g, 1e-12)
        ghat = (weights.eikonal * 2.0 * (norm_g - 1.0) / safe / len(eik_pts))[:, None] * g_eik
        dv = np.einsum("nba,na->nb", rotinv_e, ghat)
        dq = np.empty_like(q)
        dq[:, :-1] = np.einsum("nk,nck->nc", dv, jac_e)
        dq[:, -1] = np.einsum("na,na->n", ghat, gdb_e)
        djac = q[:, :-1, None] * dv[:, None, :]
        dws, dbs, dsdf_in_e = scene.mlp_sdf.double_backward(cache_se, gcache_se,
                                                            dq.astype(dtype))
        _accum_mlp(grads, "mlp_sdf", dws, dbs)
        dplanes = triplane_backward_values(scene.triplane, cache_tpe,
                                           dsdf_in_e[:, :-1])
        _accum_planes(grads, dplanes)
        dplanes = triplane_jacobian_backward(scene.triplane, cache_tpe,
                                             djac.astype(dtype))
        _accum_planes(grads, dplanes)

    return report, grads


def _accum_mlp(grads: dict, prefix: str, dws, dbs) -> None:
    for l, (dw, db) in enumerate(zip(dws, dbs)):
        grads[f"{prefix}.w{l}"] += dw.astype(np.float64)
        grads[f"{prefix}.b{l}"] += db.astype(np.float64)


def _accum_planes(grads: dict, dplanes) -> None:
    for name, dp in zip(("xy", "xz", "yz"), dplanes):
        grads[f"triplane.{name}"] += dp.astype(np.float64)


# ---------------------------------------------------------------------------
# fitting loop


def _stage_boundary(config: FitConfig) -> int:
    return int(np.ceil(config.iterations * config.progressive_fraction))


def fit_scene(body: TemplateBody, targets: TargetSet, config: FitConfig,
              out_dir=None, resume_from=None, scene: Scene | None = None,
              log_every: int = 50, progress=None):
    """Optimize a scene against the target views.

    Returns (scene, history).  With out_dir set, streams one JSON record
    per step to loss_history.jsonl and writes checkpoints (final one
    always; intermediate every checkpoint_every steps).  resume_from
    restarts from a checkpoint written by this function and reproduces the
    uninterrupted trajectory exactly.
    """
    if len(targets) == 0:
        raise ParameterError("need at least one target view")
    posed = [PosedBody(body, v.params) for v in targets.views]
    for p in posed:
        p.index  # build spatial indices up front

    stages = [
        [_StageView(v, p, config.progressive_scale) for v, p in zip(targets.views, posed)],
        [_StageView(v, p, 1) for v, p in zip(targets.views, posed)],
    ]
    boundary = _stage_boundary(config)

    start_step = 0
    state = None
    if resume_from is not None:
        scene = load_checkpoint(resume_from)
        blocks = read_checkpoint_blocks(resume_from)
        params = scene.parameters()
        state = AdamState.for_params(params)
        for name in params:
            key_m, key_v = f"extra.opt_m.{name}", f"extra.opt_v.{name}"
            if key_m in blocks:
                state.m[name] = np.array(blocks[key_m], dtype=params[name].dtype)
                state.v[name] = np.array(blocks[key_v], dtype=params[name].dtype)
        state.t = int(blocks.get("extra.opt_t", np.zeros(1))[()])
        start_step = int(blocks.get("extra.step", np.zeros(1))[()])
    elif scene is None:
        scene = make_scene(
            body, resolution=config.triplane_resolution,
            channels=config.triplane_channels, style_dim=config.style_dim,
            posenc_freqs=config.posenc_freqs, decoder_hidden=config.decoder_hidden,
            deform_hidden=config.deform_hidden, deform_layers=config.deform_layers,
            alpha_init=config.alpha_init, seed=config.seed)
    params = scene.parameters()
    if state is None:
        state = AdamState.for_params(params)
    rates = _rate_map(params, config)

    history = []
    log_f = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_f = open(os.path.join(out_dir, "loss_history.jsonl"),
                     "a" if resume_from else "w", encoding="ascii")
        if not resume_from:
            with open(os.path.join(out_dir, "config.json"), "w", encoding="ascii") as f:
                json.dump(config.to_dict(), f, indent=1)

    def write_checkpoint(path, step):
        extra = {f"opt_m.{k}": v for k, v in state.m.items()}
        extra.update({f"opt_v.{k}": v for k, v in state.v.items()})
        extra["opt_t"] = np.array(float(state.t))
        extra["step"] = np.array(float(step))
        save_checkpoint(scene, path, extra=extra)

    initial_total = None
    bad_streak = 0
    try:
        for step in range(start_step, config.iterations):
            stage = stages[0 if step < boundary else 1][step % len(targets)]
            report, grads = step_loss_and_grads(scene, stage, step, config)
            adam_step(params, grads, state, rates)

            if not np.isfinite(report.total):
                raise DivergenceError(f"non-finite total loss at step {step}")
            if initial_total is None:
                initial_total = max(report.total, 1e-12)
            if report.total > config.divergence_factor * initial_total:
                bad_streak += 1
                if bad_streak >= config.divergence_patience:
                    raise DivergenceError(
                        f"total loss above {config.divergence_factor}x its initial value "
                        f"for {bad_streak} consecutive steps (step {step})")
            else:
                bad_streak = 0

            record = {"step": step, "total": report.total, **report.terms,
                      "alpha": scene.alpha}
            history.append(record)
            if log_f is not None:
                log_f.write(json.dumps(record) + "\n")
            if progress is not None and (step % log_every == 0
                                         or step == config.iterations - 1):
                progress(record)
            if out_dir is not None and config.checkpoint_every > 0 \
                    and (step + 1) % config.checkpoint_every == 0:
                write_checkpoint(os.path.join(out_dir, f"checkpoint_{step + 1:06d}.avgn"),
                                 step + 1)
    finally:
        if log_f is not None:
            log_f.close()

    if out_dir is not None:
        write_checkpoint(os.path.join(out_dir, "scene.avgn"), config.iterations)
    return scene, history


def reanimate(scene: Scene, body: TemplateBody, params: BodyParams, camera: Camera,
              config: RenderConfig | None = None) -> RenderOutput:
    """Render the fitted canonical avatar under new pose/shape parameters."""
    return render(scene, body, params, camera, config)
