"""Ray generation, stratified sampling and differentiable volume rendering.

One sampling pass feeds three compositing channels (blended, static-only,
dynamic-only) plus depth, a shadow map and composited 3D scene flow. The
backward pass is hand-derived end to end: upstream gradients on the ray
outputs flow through compositing, the static/dynamic blend, the field
heads, and finally back to the sample positions and view directions, which
is what produces camera-pose gradients.
"""

from __future__ import annotations

import numpy as np

from .contraction import contract, contract_backward  # re-export surface
from .diffcore import sh_encode, sh_backward
from .fields import SceneModels, shade_points, shade_backward, STAGE_A, STAGE_B

__all__ = [
    "contract", "contract_backward", "generate_ray", "generate_rays",
    "rays_backward", "sample_rays", "composite", "composite_backward",
    "blend_point", "blend_backward", "render_rays", "RenderResult",
    "render_image",
]


def generate_rays(R_mats, t_vecs, intrinsics, pixels):
    """Camera rays through pixel centers.

    R_mats: [R,3,3], t_vecs: [R,3] camera-to-world; intrinsics (f, cx, cy);
    pixels: [R,2] as (u, v). Camera looks +z, x right, y down.
    Returns (o, d, cache) with unit directions d.
    """
    f, cx, cy = intrinsics
    if f <= 0:
        raise ValueError("focal length must be positive")
    pixels = np.asarray(pixels, dtype=np.float64)
    d_cam = np.stack([(pixels[:, 0] - cx) / f,
                      (pixels[:, 1] - cy) / f,
                      np.ones(len(pixels))], axis=1)
    d_raw = np.einsum("rij,rj->ri", R_mats, d_cam)
    norm = np.linalg.norm(d_raw, axis=1, keepdims=True)
    d = d_raw / norm
    o = np.array(t_vecs, dtype=np.float64, copy=True)
    return o, d, (d_cam, d, norm)


def rays_backward(cache, do, dd):
    """Upstream (do, dd) -> (dR: [R,3,3], dt: [R,3])."""
    d_cam, d, norm = cache
    # d = d_raw/|d_raw|: J = (I - d d^T)/|d_raw|
    radial = np.sum(d * dd, axis=1, keepdims=True)
    dd_raw = (dd - d * radial) / norm
    dR = dd_raw[:, :, None] * d_cam[:, None, :]
    return dR, np.array(do, copy=True)


def generate_ray(pose, intrinsics, pixel):
    """Single-ray convenience wrapper returning (origin, unit direction)."""
    o, d, _ = generate_rays(pose.R[None], pose.t[None], intrinsics,
                            np.asarray(pixel, dtype=np.float64)[None])
    return o[0], d[0]


def sample_rays(n_rays, n_samples, near, far, rng=None, mode="disparity",
                dtype=np.float64):
    """Stratified sample distances along rays.

    One uniform draw per bin (bin midpoints when rng is None); distances
    warped linearly in disparity by default so contracted far field is
    covered. Returns (t: [R,N], delta: [R,N]) with delta[-1] = far - t[-1].
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    if not 0 < near < far:
        raise ValueError("require 0 < near < far")
    if rng is None:
        u = np.full((n_rays, n_samples), 0.5, dtype=dtype)
    else:
        u = rng.random((n_rays, n_samples), dtype=np.float64).astype(dtype)
    s = (np.arange(n_samples, dtype=dtype)[None, :] + u) / n_samples
    if mode == "disparity":
        t = 1.0 / ((1.0 - s) / near + s / far)
    elif mode == "uniform":
        t = near + s * (far - near)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = far - t[:, -1]
    # strictly positive even if jitter lands on a bin edge
    np.maximum(delta, 1e-12, out=delta)
    return t, delta


def composite(sigma, color, delta, tvals=None):
    """Volume compositing along each ray.

    sigma: [R,N] >= 0, color: [R,N,3], delta: [R,N] > 0.
    Returns dict with color [R,3], weights [R,N], trans, alpha, opacity
    [R], and depth [R] (expected distance; requires tvals).
    """
    sigma = np.asarray(sigma)
    if np.any(sigma < 0):
        raise ValueError("negative density")
    tau = sigma * delta
    alpha = -np.expm1(-tau)                        # 1 - exp(-sigma*delta)
    trans = np.exp(-np.cumsum(tau, axis=1) + tau)  # exclusive cumsum
    weights = trans * alpha
    out = {
        "color": np.einsum("rn,rnc->rc", weights, color),
        "weights": weights,
        "trans": trans,
        "alpha": alpha,
        "opacity": weights.sum(axis=1),
    }
    if tvals is not None:
        out["depth"] = np.einsum("rn,rn->r", weights, tvals)
    return out


def composite_backward(pass_out, sigma, color, delta, d_weights_total, d_color):
    """Backward of composite.

    d_weights_total: [R,N], the total upstream gradient on each weight
    (callers fold color/depth/opacity/shadow terms into it first);
    d_color: [R,3] upstream on the composited color (contributes both to
    per-sample colors and, via the weights, to densities).
    Returns (d_sigma: [R,N], d_sample_color: [R,N,3]).
    """
    weights, trans, alpha = pass_out["weights"], pass_out["trans"], pass_out["alpha"]
    g = d_weights_total + np.einsum("rc,rnc->rn", d_color, color)
    gw = g * weights
    # suffix sum of g_k w_k for k > i
    suffix = np.flip(np.cumsum(np.flip(gw, axis=1), axis=1), axis=1) - gw
    d_sigma = delta * (g * trans * (1.0 - alpha) - suffix)
    d_sample_color = weights[:, :, None] * d_color[:, None, :]
    return d_sigma, d_sample_color


def blend_point(sigma_s, c_s, sigma_d, c_d, rho):
    """Per-sample color blend of the two fields.

    c = (1 - rho) * sigma_s/sigma * c_s + sigma_d/sigma * c_d with
    sigma = sigma_s + sigma_d; zero total density contributes nothing.
    Shapes: densities [..], colors [.., 3], rho [..].
    """
    sigma = sigma_s + sigma_d
    safe = np.maximum(sigma, 1e-20)
    ws = np.where(sigma > 0, sigma_s / safe, 0.0)
    wd = np.where(sigma > 0, sigma_d / safe, 0.0)
    c = ((1.0 - rho) * ws)[..., None] * c_s + wd[..., None] * c_d
    return c, sigma


def blend_backward(sigma_s, c_s, sigma_d, c_d, rho, dc):
    """Partials of blend_point contracted with upstream dc."""
    sigma = sigma_s + sigma_d
    safe = np.maximum(sigma, 1e-20)
    live = sigma > 0
    ws = np.where(live, sigma_s / safe, 0.0)
    wd = np.where(live, sigma_d / safe, 0.0)
    d_cs = ((1.0 - rho) * ws)[..., None] * dc
    d_cd = wd[..., None] * dc
    d_rho = -ws * np.sum(c_s * dc, axis=-1)
    mix = np.sum(((1.0 - rho)[..., None] * c_s - c_d) * dc, axis=-1)
    inv2 = np.where(live, 1.0 / (safe * safe), 0.0)
    d_sigma_s = sigma_d * inv2 * mix
    d_sigma_d = -sigma_s * inv2 * mix
    return d_sigma_s, d_cs, d_sigma_d, d_cd, d_rho


class RenderResult:
    """Outputs of one batched render pass plus the cache for backward."""

    __slots__ = ("color", "static_color", "dynamic_color", "depth",
                 "opacity", "static_opacity", "dynamic_opacity",
                 "shadow_map", "weights", "rho", "sigma_d", "flow_fwd",
                 "flow_bwd", "cache")

    def __init__(self, **kw):
        for k in self.__slots__:
            setattr(self, k, kw.get(k))


def render_rays(models: SceneModels, R_mats, t_vecs, intrinsics, pixels,
                t_norm, has_prev, has_next, stage, n_samples, near, far,
                rng=None, sample_mode="disparity"):
    """Render a batch of rays; see RenderResult for outputs.

    t_norm/has_prev/has_next are per-ray; stage selects whether the
    dynamic branch runs.
    """
    n_rays = len(pixels)
    o, d, ray_cache = generate_rays(R_mats, t_vecs, intrinsics, pixels)
    tvals, delta = sample_rays(n_rays, n_samples, near, far, rng=rng,
                               mode=sample_mode)
    x = o[:, None, :] + tvals[:, :, None] * d[:, None, :]     # [R,N,3]
    sh = sh_encode(d)                                          # [R,16]

    dtype = models.store.dtype
    flat_x = x.reshape(-1, 3).astype(dtype, copy=False)
    rep = lambda a: np.repeat(np.asarray(a), n_samples, axis=0)
    shaded, shade_cache = shade_points(
        models, flat_x, rep(sh).reshape(-1, sh.shape[1]).astype(dtype, copy=False),
        rep(t_norm).astype(dtype, copy=False), 1.0 / max(models.n_frames - 1, 1),
        rep(has_prev), rep(has_next), stage)

    shp = (n_rays, n_samples)
    sigma_s = shaded["sigma_s"].reshape(shp)
    sigma_d = shaded["sigma_d"].reshape(shp)
    c_s = shaded["c_s"].reshape(shp + (3,))
    c_d = shaded["c_d"].reshape(shp + (3,))
    rho = shaded["rho"].reshape(shp)
    v_f = shaded["v_f"].reshape(shp + (3,))
    v_b = shaded["v_b"].reshape(shp + (3,))

    c_blend, sigma_blend = blend_point(sigma_s, c_s, sigma_d, c_d, rho)
    main = composite(sigma_blend, c_blend, delta, tvals)
    bg = models.background()
    w = main["weights"]
    color = main["color"] + (1.0 - main["opacity"])[:, None] * bg

    st = composite(sigma_s, c_s, delta)
    dy = composite(sigma_d, c_d, delta)
    static_color = st["color"] + (1.0 - st["opacity"])[:, None] * bg
    dynamic_color = dy["color"] + (1.0 - dy["opacity"])[:, None] * bg

    cache = {
        "ray": ray_cache, "shade": shade_cache, "main": main,
        "tvals": tvals, "delta": delta, "sigma_s": sigma_s,
        "sigma_d": sigma_d, "c_s": c_s, "c_d": c_d, "rho": rho,
        "v_f": v_f, "v_b": v_b, "c_blend": c_blend, "d": d,
        "stage": stage, "n": (n_rays, n_samples),
    }
    return RenderResult(
        color=color, static_color=static_color, dynamic_color=dynamic_color,
        depth=main["depth"], opacity=main["opacity"],
        static_opacity=st["opacity"], dynamic_opacity=dy["opacity"],
        shadow_map=np.einsum("rn,rn->r", w, rho), weights=w, rho=rho,
        sigma_d=sigma_d, flow_fwd=np.einsum("rn,rnc->rc", w, v_f),
        flow_bwd=np.einsum("rn,rnc->rc", w, v_b), cache=cache)


def render_backward(models: SceneModels, result: RenderResult, up, grads):
    """Backward through the blended channel of render_rays.

    up may contain: color [R,3], depth [R], weights [R,N], rho [R,N],
    sigma_d [R,N], flow_fwd [R,3], flow_bwd [R,3], plus ray_origin [R,3]
    and ray_dir [R,3] for losses that differentiate the ray geometry
    directly (reprojection, cycle points). The static-only and
    dynamic-only channels are outputs for inspection, not loss surfaces,
    so they carry no gradient. Returns (dR: [R,3,3], dt: [R,3]) pose-matrix
    gradients per ray; field-parameter grads accumulate into ``grads``.
    """
    c = result.cache
    n_rays, n_samples = c["n"]
    main, tvals, delta = c["main"], c["tvals"], c["delta"]
    w = main["weights"]
    zero_rc = np.zeros((n_rays, 3))
    d_color = np.asarray(up.get("color", zero_rc), dtype=np.float64)

    # background compositing: color = C0 + (1 - opacity) * bg
    bg = models.background()
    d_opacity = -(d_color @ bg)
    models.background_backward((1.0 - main["opacity"]) @ d_color, grads)

    # fold every upstream that reaches the blended weights into one buffer
    g = np.zeros((n_rays, n_samples))
    g += d_opacity[:, None]
    if "depth" in up:
        g += np.asarray(up["depth"])[:, None] * tvals
    if "weights" in up:
        g += up["weights"]
    if "flow_fwd" in up:
        g += np.einsum("rc,rnc->rn", up["flow_fwd"], c["v_f"])
    if "flow_bwd" in up:
        g += np.einsum("rc,rnc->rn", up["flow_bwd"], c["v_b"])

    d_sigma_blend, d_cblend = composite_backward(
        main, None, c["c_blend"], delta, g, d_color)

    d_ss, d_cs, d_sd, d_cd, d_rho = blend_backward(
        c["sigma_s"], c["c_s"], c["sigma_d"], c["c_d"], c["rho"], d_cblend)
    d_ss = d_ss + d_sigma_blend
    d_sd = d_sd + d_sigma_blend
    if "rho" in up:
        d_rho = d_rho + up["rho"]
    if "sigma_d" in up:
        d_sd = d_sd + up["sigma_d"]

    dtype = models.store.dtype
    upstream = {"sigma_s": d_ss.reshape(-1), "c_s": d_cs.reshape(-1, 3)}
    if c["stage"] == STAGE_B:
        upstream.update(sigma_d=d_sd.reshape(-1), c_d=d_cd.reshape(-1, 3),
                        rho=d_rho.reshape(-1))
        if "flow_fwd" in up:
            upstream["v_f"] = (w[:, :, None] * np.asarray(up["flow_fwd"])[:, None, :]
                               ).reshape(-1, 3)
        if "flow_bwd" in up:
            upstream["v_b"] = (w[:, :, None] * np.asarray(up["flow_bwd"])[:, None, :]
                               ).reshape(-1, 3)
    upstream = {k: v.astype(dtype, copy=False) for k, v in upstream.items()}
    dx_flat, dsh_flat = shade_backward(models, c["shade"], upstream, grads)

    dx = dx_flat.reshape(n_rays, n_samples, 3)
    dsh = dsh_flat.reshape(n_rays, n_samples, -1).sum(axis=1)
    do = dx.sum(axis=1)
    dd = np.einsum("rn,rnc->rc", tvals, dx) + sh_backward(c["d"], dsh)
    if "ray_origin" in up:
        do = do + up["ray_origin"]
    if "ray_dir" in up:
        dd = dd + up["ray_dir"]
    return rays_backward(c["ray"], do, dd)


def render_image(models: SceneModels, pose, intrinsics, t_norm, has_prev,
                 has_next, stage, resolution, n_samples, near, far,
                 chunk=4096):
    """Deterministic full-frame render (no jitter). resolution: (H, W).

    Returns dict of images: color/static/dynamic [H,W,3], depth, shadow,
    opacity, dynamic_opacity [H,W].
    """
    H, W = resolution
    uu, vv = np.meshgrid(np.arange(W), np.arange(H))
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    outs = {k: [] for k in ("color", "static_color", "dynamic_color",
                            "depth", "shadow_map", "opacity",
                            "dynamic_opacity")}
    for lo in range(0, len(pixels), chunk):
        px = pixels[lo:lo + chunk]
        n = len(px)
        res = render_rays(
            models, np.repeat(pose.R[None], n, axis=0),
            np.repeat(pose.t[None], n, axis=0), intrinsics, px,
            np.full(n, t_norm), np.full(n, has_prev, dtype=bool),
            np.full(n, has_next, dtype=bool), stage, n_samples, near, far,
            rng=None)
        for k in outs:
            outs[k].append(getattr(res, k))
    imgs = {}
    for k, parts in outs.items():
        arr = np.concatenate(parts, axis=0)
        shape = (H, W, 3) if arr.ndim == 2 else (H, W)
        imgs[k] = arr.reshape(shape)
    return imgs
