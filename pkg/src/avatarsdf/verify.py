"""Self-contained property suites.

Each suite re-derives its expected values from an independent oracle
(closed forms, finite differences, brute enumeration) and returns a list of
(check name, passed, detail) triples.  The CLI exposes them for smoke
verification after installation; the acceptance tests run the same checks
at full size.
"""

from __future__ import annotations

import time

import numpy as np

from . import mesh as meshmod
from .body import BodyParams, generate_test_body
from .capsules import BodySpec
from .field import Mlp, make_scene
from .fit import FitConfig, _StageView, make_synthetic_targets, step_loss_and_grads
from .render import integrate, look_at_camera, sdf_to_density
from .rng import generator
from .skinning import PosedBody, canonical_map


def roundtrip_suite(n_poses: int = 20, seed: int = 0, body=None):
    """Inverse-skinning vertex round trip under random poses."""
    body = body or generate_test_body()
    rng = generator(seed, 0x0F1)
    worst = 0.0
    t0 = time.time()
    for _ in range(n_poses):
        params = BodyParams(rng.normal(0.0, 0.3, size=(body.n_joints, 3)),
                            np.zeros(body.n_shapes), rng.normal(0, 0.1, 3))
        posed = PosedBody(body, params)
        res = canonical_map(posed.mesh.vertices, posed, k=1)
        worst = max(worst, float(np.linalg.norm(res.canonical - body.vertices,
                                                axis=1).max()))
    elapsed = time.time() - t0
    return [("vertex round trip max error < 1e-5 m "
             f"({n_poses} poses, worst {worst:.2e}, {elapsed:.1f}s)", worst < 1e-5,
             {"worst": worst, "seconds": elapsed})]


def eikonal_suite(n_points: int = 1000, seed: int = 0, body=None):
    """Finite-difference unit-gradient property of the body SDF, and the
    zero-initialized scene's unit-gradient loss."""
    from .field import field_gradient
    from .losses import eikonal_loss

    body = body or generate_test_body()
    index = meshmod.build_index(body.rest_mesh())
    rng = generator(seed, 0x0E2)
    lo, hi = body.rest_mesh().bounds()
    pts = []
    while len(pts) < n_points:
        cand = rng.uniform(lo - 0.25, hi + 0.25, size=(8 * n_points, 3))
        sd = meshmod.signed_distances(index, cand)
        keep = (np.abs(sd) > 0.02) & (np.abs(sd) < 0.2)
        cand = cand[keep]
        # admissible = one clearly dominant closest triangle, so the finite
        # -difference probes never straddle the medial axis (or a crease in
        # the foot-point field); the runner-up triangle must be farther by
        # a margin well beyond the probe span
        d1, d2 = meshmod.closest_two_triangle_distances(index, cand)
        cand = cand[d2 - d1 > 2e-3]
        pts.extend(cand[: n_points - len(pts)])
    pts = np.asarray(pts)

    h = 1e-4
    grad = np.zeros_like(pts)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        grad[:, k] = (meshmod.signed_distances(index, pts + e)
                      - meshmod.signed_distances(index, pts - e)) / (2 * h)
    norms = np.linalg.norm(grad, axis=1)
    fd_ok = bool(np.abs(norms - 1.0).max() < 1e-2)

    scene = make_scene(body, dtype=np.float64)
    sd, gdb = meshmod.signed_distance_with_gradient(index, pts)
    g = field_gradient(scene, pts, sd, gdb)
    loss = eikonal_loss(g)
    return [
        (f"finite-difference |grad d_body| = 1 +- 1e-2 on {len(pts)} points "
         f"(worst dev {np.abs(norms - 1).max():.2e})", fd_ok,
         {"worst": float(np.abs(norms - 1).max())}),
        (f"zero-init scene unit-gradient loss < 1e-3 (got {loss:.2e})",
         loss < 1e-3, {"loss": loss}),
    ]


def _snap_step(value: float, h: float) -> float:
    # use the exactly representable step so the FD quotient is unbiased
    return float(np.float64(value + h) - np.float64(value))


def gradcheck_mlp_suite(seed: int = 0, rel_tol: float = 1e-4):
    """Standalone network gradients against central finite differences."""
    rng = np.random.default_rng(seed)
    results = []
    for widths, hidden, final in (
        ([5, 16, 16, 3], "softplus", "linear"),
        ([8, 12, 1], "softplus", "linear"),
        ([6, 10, 10, 3], "tanh", "sigmoid"),
    ):
        net = Mlp.create(widths, hidden=hidden, final=final, rng=rng)
        x = rng.normal(size=(5, widths[0]))
        gy = rng.normal(size=(5, widths[-1]))
        _, cache = net.forward(x)
        dws, dbs, dx = net.backward(cache, gy)

        def loss():
            y, _ = net.forward(x)
            return float((y * gy).sum())

        worst = 0.0
        h = 1e-5
        for l, w in enumerate(net.weights):
            flat = w.reshape(-1)
            gflat = dws[l].reshape(-1)
            for i in rng.choice(flat.size, size=min(20, flat.size), replace=False):
                old = flat[i]
                step = _snap_step(old, h)
                flat[i] = old + step
                lp = loss()
                flat[i] = old - step
                lm = loss()
                flat[i] = old
                fd = (lp - lm) / (2 * step)
                worst = max(worst, abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-8))
        results.append(
            (f"mlp {widths} {hidden}/{final} param grads vs FD "
             f"(worst rel {worst:.2e})", worst < rel_tol, {"worst": worst}))
    return results


def gradcheck_chain_suite(seed: int = 0, rel_tol: float = 1e-3,
                          checks_per_param: int = 6, full: bool = False):
    """The full loss-to-parameter chain on the miniature scene vs FD.

    full=True sweeps every parameter entry; otherwise a seeded subset per
    tensor is probed.
    """
    spec = BodySpec(resolution=16)
    body = generate_test_body(spec)
    rest = BodyParams.rest(body.n_joints, body.n_shapes)
    cam = look_at_camera((0.0, 0.9, 2.0), (0, 0.9, 0), width=8, height=8)
    targets = make_synthetic_targets(spec, rest, [cam])
    config = FitConfig(iterations=1, rays_per_step=4, samples_per_ray=4,
                       eikonal_points=4, triplane_resolution=8,
                       triplane_channels=8, style_dim=8, posenc_freqs=2,
                       decoder_hidden=8, deform_hidden=8, deform_layers=2)
    scene = make_scene(body, resolution=8, channels=8, style_dim=8,
                       posenc_freqs=2, decoder_hidden=8, deform_hidden=8,
                       deform_layers=2, dtype=np.float64, seed=seed)
    rng = np.random.default_rng(seed + 1)
    # step off the zero-init kink points of |d - d_body| and |residual|
    scene.mlp_sdf.weights[-1][:] = rng.normal(0, 0.05, scene.mlp_sdf.weights[-1].shape)
    scene.mlp_deform.weights[-1][:] = rng.normal(0, 0.02,
                                                 scene.mlp_deform.weights[-1].shape)
    posed = PosedBody(body, rest)
    stage = _StageView(targets.views[0], posed, 1)
    report, grads = step_loss_and_grads(scene, stage, 0, config)

    def loss():
        r, _ = step_loss_and_grads(scene, stage, 0, config, want_grads=False)
        return r.total

    worst = 0.0
    worst_name = ""
    n_checked = 0
    t0 = time.time()
    h = 1e-5
    for name, p in scene.parameters().items():
        flat = p.reshape(-1)
        gflat = grads[name].reshape(-1)
        if full or flat.size <= checks_per_param:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=checks_per_param, replace=False)
        for i in idxs:
            old = flat[i]
            step = _snap_step(old, h)
            flat[i] = old + step
            lp = loss()
            flat[i] = old - step
            lm = loss()
            flat[i] = old
            fd = (lp - lm) / (2 * step)
            an = gflat[i]
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            n_checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    elapsed = time.time() - t0
    return [
        (f"full loss-to-parameter chain vs FD on miniature scene "
         f"({n_checked} entries, worst rel {worst:.2e} at {worst_name}, "
         f"{elapsed:.1f}s)", worst < rel_tol,
         {"worst": worst, "worst_name": worst_name, "checked": n_checked,
          "seconds": elapsed}),
    ]


def conservation_suite(n_configs: int = 100_000, seed: int = 0):
    """Compositor sanity: weight bounds, the exact two-sample case, and
    wall-scene expected depth within half a sample spacing."""
    rng = np.random.default_rng(seed)
    batch = 1000
    remaining = n_configs
    wmin, wmax, amax = np.inf, -np.inf, -np.inf
    while remaining > 0:
        n = min(batch, remaining)
        remaining -= n
        k = int(rng.integers(2, 32))
        sigma = rng.uniform(0, 100, size=(n, k))
        deltas = rng.uniform(0, 0.5, size=(n, k))
        tvals = np.cumsum(deltas, axis=1)
        res = integrate(sigma, rng.uniform(size=(n, k, 3)), deltas, tvals)
        wmin = min(wmin, float(res.weights.min()))
        wmax = max(wmax, float(res.weights.max()))
        amax = max(amax, float(res.alpha.max()))
    bounds_ok = wmin >= 0.0 and wmax <= 1.0 and amax <= 1.0 + 1e-6

    ln2 = np.log(2.0)
    res2 = integrate(np.array([[ln2, ln2]]), np.full((1, 2, 3), 0.5),
                     np.ones((1, 2)), np.array([[1.0, 2.0]]))
    two_ok = (abs(res2.weights[0, 0] - 0.5) < 1e-12
              and abs(res2.weights[0, 1] - 0.25) < 1e-12)

    wall_ok = True
    wall_detail = {}
    for n in (12, 24, 36, 48):
        t = (np.arange(n) + 0.5) / n * 4.0
        deltas = np.diff(t, prepend=0.0)
        sigma = sdf_to_density(2.5 - t, 0.02)
        res = integrate(sigma[None], np.full((1, n, 3), 0.5), deltas[None], t[None])
        err = abs(float(res.depth[0]) - 2.5)
        wall_detail[n] = err
        wall_ok &= err <= (4.0 / n) / 2
    return [
        (f"per-ray weights within [0, 1 + 1e-6] over {n_configs} sampled "
         f"configurations (range [{wmin:.2e}, {wmax:.6f}], alpha max {amax:.9f})",
         bounds_ok, {"wmin": wmin, "wmax": wmax, "amax": amax}),
        ("two-sample ln2/ln2 composite exact to 1e-12 (weights 1/2, 1/4)",
         two_ok, {}),
        ("wall-scene expected depth within delta/2 for N in {12,24,36,48} "
         f"(errors {wall_detail})", wall_ok, wall_detail),
    ]


SUITES = {
    "roundtrip": roundtrip_suite,
    "eikonal": eikonal_suite,
    "gradcheck": lambda: gradcheck_mlp_suite() + gradcheck_chain_suite(),
    "conservation": conservation_suite,
}


def run_suites(names):
    """Run the named suites; returns (all_passed, result triples)."""
    results = []
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
        results.extend(SUITES[name]())
    return all(ok for _, ok, _ in results), results
