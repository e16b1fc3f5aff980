"""Training objectives.

Six terms: photometric color, scale-shift-invariant depth, 2D flow
reprojection, 3D flow cycle consistency, dynamic-density sparsity, and the
shadow penalty. compute_batch_loss assembles them per stage (the dynamic
trio only once the dynamic field is active) and runs the full hand-derived
backward pass, returning field-parameter and pose gradients.

All gradients are exact, including through the depth normalization
(median and mean-absolute-deviation are differentiated, not detached) and
through the reprojection chain into both camera poses of a frame pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import SceneModels, STAGE_A, STAGE_B
from .pose import PoseTable
from .render import render_backward, render_rays


@dataclass
class RayBatch:
    """Per-ray supervision records; absent priors are flagged invalid.

    flow_*_valid means: the prior exists, and the adjacent frame's pose is
    available for reprojection (the trainer clears the flag while a
    neighbor is not yet admitted).
    """
    frames: np.ndarray          # [R] int global frame index
    pixels: np.ndarray          # [R,2] float (u, v)
    colors: np.ndarray          # [R,3]
    depths: np.ndarray          # [R] prior depth (ray distance)
    depth_valid: np.ndarray     # [R] bool
    flow_fwd: np.ndarray        # [R,2] prior flow i -> i+1
    flow_fwd_valid: np.ndarray  # [R] bool
    flow_bwd: np.ndarray        # [R,2] prior flow i -> i-1
    flow_bwd_valid: np.ndarray  # [R] bool
    masks: np.ndarray           # [R] bool, 1 = suspected dynamic

    def __len__(self):
        return len(self.frames)


@dataclass
class LossWeights:
    color: float = 1.0
    depth: float = 0.05
    flow: float = 0.01
    cycle: float = 0.01
    dynamic: float = 0.001
    shadow: float = 0.01
    masked_dynamic_factor: float = 0.1  # softened sparsity inside motion masks


def anneal(w0, step, horizon, target_factor=0.1):
    """Exponential decay of a weight to target_factor * w0 over horizon."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    frac = min(step, horizon) / horizon
    return w0 * target_factor ** frac


def color_loss(pred, target, active):
    """Mean over active rays of the squared RGB error (summed per ray)."""
    active = np.asarray(active, dtype=bool)
    n = int(active.sum())
    dpred = np.zeros_like(pred)
    if n == 0:
        return 0.0, dpred
    diff = (pred - target) * active[:, None]
    val = float(np.sum(diff * diff)) / n
    dpred[:] = 2.0 * diff / n
    return val, dpred


def normalize_depth(values):
    """Scale-shift-invariant normalization: (v - median) / mean|v - median|.

    Returns (normalized, degenerate_flag, cache). A constant batch has no
    dispersion; it normalizes to zeros and is flagged so downstream terms
    contribute nothing.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("need at least 2 values")
    med = float(np.median(v))
    dev = v - med
    s = float(np.mean(np.abs(dev)))
    if s < 1e-12:
        return np.zeros_like(v), True, None
    return dev / s, False, (v, med, s)


def normalize_depth_backward(cache, dout):
    """Exact gradient through median and dispersion.

    For n odd, d median / d v_j is 1 at the median element; for n even,
    1/2 at each of the two middle elements.
    """
    v, med, s = cache
    n = v.size
    order = np.argsort(v, kind="stable")
    dmed = np.zeros(n)
    if n % 2 == 1:
        dmed[order[n // 2]] = 1.0
    else:
        dmed[order[n // 2 - 1]] = 0.5
        dmed[order[n // 2]] = 0.5
    sgn = np.sign(v - med)
    ds = (sgn - dmed * np.sum(sgn)) / n
    a = np.sum(dout)
    b = np.sum(dout * (v - med))
    return dout / s - dmed * (a / s) - ds * (b / (s * s))


def depth_loss(pred, prior):
    """MSE between the two normalized batches; gradient w.r.t. pred only.

    Degenerate normalization on either side contributes zero."""
    pn, pdeg, pcache = normalize_depth(pred)
    qn, qdeg, _ = normalize_depth(prior)
    dpred = np.zeros(np.asarray(pred).shape, dtype=np.float64)
    if pdeg or qdeg:
        return 0.0, dpred
    diff = pn - qn
    val = float(np.mean(diff * diff))
    dpn = 2.0 * diff / diff.size
    return val, normalize_depth_backward(pcache, dpn)


def expected_flow(pixels, depth, o_i, d_i, R_j, t_j, intrinsics,
                  scene_flow=None, z_min=1e-6):
    """Reprojection flow i -> j for a ray batch.

    The pixel's 3D point is origin + depth * unit_dir (ray-distance depth,
    matching the rendered depth), optionally displaced by a composited 3D
    scene flow, then projected into camera j. Points landing behind camera
    j are flagged invalid and excluded.

    Returns (flow: [R,2], valid: [R], cache).
    """
    f, cx, cy = intrinsics
    X = o_i + depth[:, None] * d_i
    if scene_flow is not None:
        X = X + scene_flow
    rel = X - t_j
    Xc = np.einsum("rji,rj->ri", R_j, rel)      # R_j^T (X - t_j)
    z = Xc[:, 2]
    valid = z > z_min
    zs = np.where(valid, z, 1.0)
    u = f * Xc[:, 0] / zs + cx
    v = f * Xc[:, 1] / zs + cy
    flow = np.stack([u, v], axis=1) - pixels
    flow[~valid] = 0.0
    return flow, valid, (d_i, depth, R_j, rel, Xc, zs, valid, f)


def expected_flow_backward(cache, dflow):
    """Returns dict with d_depth, d_o, d_dir, d_scene_flow, dR_j, dt_j."""
    d_i, depth, R_j, rel, Xc, zs, valid, f = cache
    dflow = np.asarray(dflow) * valid[:, None]
    x, y = Xc[:, 0], Xc[:, 1]
    du, dv = dflow[:, 0], dflow[:, 1]
    dXc = np.stack([
        f * du / zs,
        f * dv / zs,
        -f * (x * du + y * dv) / (zs * zs),
    ], axis=1)
    dX = np.einsum("rij,rj->ri", R_j, dXc)       # through R_j^T (X - t_j)
    dR_j = rel[:, :, None] * dXc[:, None, :]
    dt_j = -dX
    return {"d_depth": np.sum(dX * d_i, axis=1), "d_o": dX,
            "d_dir": depth[:, None] * dX, "d_scene_flow": dX,
            "dR_j": dR_j, "dt_j": dt_j}


def flow_l1(expected, prior, valid):
    """Per-ray L1 flow error summed over components."""
    err = (expected - prior) * valid[:, None]
    val = float(np.sum(np.abs(err)))
    dexp = np.sign(err)
    return val, dexp


def dynamic_loss(sigma_d, masks, use_masks, factor=0.1):
    """Per-ray mean density over samples, masked rays softened by
    ``factor``; mean over rays."""
    R, N = sigma_d.shape
    ray_w = np.ones(R)
    if use_masks:
        ray_w = np.where(np.asarray(masks, dtype=bool), factor, 1.0)
    per_ray = sigma_d.mean(axis=1)
    val = float(np.mean(ray_w * per_ray))
    dsig = np.broadcast_to((ray_w / (R * N))[:, None], sigma_d.shape).copy()
    return val, dsig


def shadow_loss(weights, rho):
    """Mean over rays of sum_i T_i alpha_i rho_i^2."""
    R = weights.shape[0]
    val = float(np.sum(weights * rho * rho)) / R
    d_weights = rho * rho / R
    d_rho = 2.0 * weights * rho / R
    return val, d_weights, d_rho


def cycle_loss(models: SceneModels, x, t_norm, dt, has_prev, has_next,
               grads, weight=1.0):
    """3D scene-flow cycle consistency at the given points.

    term_f = |v_f(x,t) + v_b(x + v_f, t+1)|^2 where t+1 exists,
    term_b = |v_b(x,t) + v_f(x + v_b, t-1)|^2 where t-1 exists;
    value is the mean over points (unweighted); gradients are scaled by
    ``weight`` and accumulated into ``grads``. Returns (value, dx)."""
    B = x.shape[0]
    if B == 0:
        return 0.0, np.zeros_like(x)
    hp = np.asarray(has_prev, dtype=bool)
    hn = np.asarray(has_next, dtype=bool)
    vf, vb, c0 = models.query_flow(x, t_norm)
    vfn, vbn, cn = models.query_flow(x + vf, t_norm + dt)   # at t+1
    vfp, vbp, cp = models.query_flow(x + vb, t_norm - dt)   # at t-1
    a = (vf + vbn) * hn[:, None]
    b = (vb + vfp) * hp[:, None]
    val = float(np.sum(a * a) + np.sum(b * b)) / B
    da = (2.0 * weight / B) * a
    db = (2.0 * weight / B) * b
    zero = np.zeros_like(da)
    # inner queries: the upstream reaches one of the two heads each; the
    # positional grad of an inner query chains into the outer flow too
    dxn = models.query_flow_backward(cn, zero, da, grads)
    dxp = models.query_flow_backward(cp, db, zero, grads)
    dvf = da + dxn
    dvb = db + dxp
    dx0 = models.query_flow_backward(c0, dvf, dvb, grads)
    return val, dx0 + dxn + dxp


@dataclass
class LossReport:
    total: float = 0.0
    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    excluded_reprojections: int = 0


def compute_batch_loss(models: SceneModels, table: PoseTable, batch: RayBatch,
                       stage, weights: LossWeights, w_scale, intrinsics,
                       n_samples, near, far, n_frames, rng=None,
                       use_masks=True, grads=None, pose_grads=None,
                       cycle_points=256, loss_rng=None):
    """Render the batch, evaluate the stage-appropriate objectives, and run
    the full backward pass.

    w_scale: per-term multipliers from the annealing schedule (missing
    keys default to 1). With grads=None only the report and render result
    are produced; otherwise field grads accumulate into ``grads`` and pose
    grads into ``pose_grads`` ([n_frames, 6]).
    Returns (LossReport, RenderResult).
    """
    R = len(batch.frames)
    delta = models.store.view("pose.delta").astype(np.float64)
    R_all, t_all = table.build(delta)
    frames = batch.frames
    t_norm = frames / max(n_frames - 1, 1)
    hp = frames > 0
    hn = frames < n_frames - 1
    res = render_rays(models, R_all[frames], t_all[frames], intrinsics,
                      batch.pixels, t_norm, hp, hn, stage, n_samples,
                      near, far, rng=rng)
    rep = LossReport()
    up = {}
    gate = (stage == STAGE_A and use_masks)
    active = ~np.asarray(batch.masks, dtype=bool) if gate \
        else np.ones(R, dtype=bool)

    w_color = weights.color * w_scale.get("color", 1.0)
    c_val, dC = color_loss(res.color, batch.colors, active)
    rep.terms["color"] = c_val
    rep.weights["color"] = w_color
    up["color"] = w_color * dC

    # depth: per-frame normalization, frames weighted by ray count so the
    # report is a per-ray mean
    w_depth = weights.depth * w_scale.get("depth", 1.0)
    rep.weights["depth"] = w_depth
    up_depth = np.zeros(R)
    d_total, d_rays = 0.0, 0
    sel_depth = np.asarray(batch.depth_valid, dtype=bool) & active
    for fr in np.unique(frames[sel_depth]):
        rows = np.where(sel_depth & (frames == fr))[0]
        if len(rows) < 2:
            continue
        v, dp = depth_loss(res.depth[rows], batch.depths[rows])
        d_total += v * len(rows)
        d_rays += len(rows)
        up_depth[rows] = dp * len(rows)
    if d_rays:
        rep.terms["depth"] = d_total / d_rays
        up_depth *= w_depth / d_rays
    else:
        rep.terms["depth"] = 0.0

    # flow reprojection, both directions, normalized by contributing rays
    w_flow = weights.flow * w_scale.get("flow", 1.0)
    rep.weights["flow"] = w_flow
    fwd_ok = np.asarray(batch.flow_fwd_valid, dtype=bool) & active & hn
    bwd_ok = np.asarray(batch.flow_bwd_valid, dtype=bool) & active & hp
    n_flow_rays = max(int(np.sum(fwd_ok | bwd_ok)), 1)
    flow_val = 0.0
    o_i = t_all[frames]
    d_i = res.cache["d"]
    extra_do = np.zeros((R, 3))
    extra_dd = np.zeros((R, 3))
    dR_other = np.zeros((n_frames, 3, 3))
    dt_other = np.zeros((n_frames, 3))
    for direction, prior, sel in ((+1, batch.flow_fwd, fwd_ok),
                                  (-1, batch.flow_bwd, bwd_ok)):
        if not np.any(sel):
            continue
        rows = np.where(sel)[0]
        jj = frames[rows] + direction
        sf = None
        if stage == STAGE_B:
            sf = (res.flow_fwd if direction > 0 else res.flow_bwd)[rows]
        exp_flow, valid, fcache = expected_flow(
            batch.pixels[rows], res.depth[rows], o_i[rows], d_i[rows],
            R_all[jj], t_all[jj], intrinsics, scene_flow=sf)
        rep.excluded_reprojections += int(np.sum(~valid))
        v, dexp = flow_l1(exp_flow, prior[rows], valid)
        flow_val += v
        back = expected_flow_backward(fcache, (w_flow / n_flow_rays) * dexp)
        up_depth[rows] += back["d_depth"]
        extra_do[rows] += back["d_o"]
        extra_dd[rows] += back["d_dir"]
        np.add.at(dR_other, jj, back["dR_j"])
        np.add.at(dt_other, jj, back["dt_j"])
        if sf is not None:
            key = "flow_fwd" if direction > 0 else "flow_bwd"
            buf = up.setdefault(key, np.zeros((R, 3)))
            buf[rows] += back["d_scene_flow"]
    rep.terms["flow"] = flow_val / n_flow_rays
    up["depth"] = up_depth

    cyc_val = dyn_val = sh_val = 0.0
    if stage == STAGE_B:
        w_dyn = weights.dynamic * w_scale.get("dynamic", 1.0)
        w_sh = weights.shadow * w_scale.get("shadow", 1.0)
        w_cyc = weights.cycle * w_scale.get("cycle", 1.0)
        rep.weights.update(dynamic=w_dyn, shadow=w_sh, cycle=w_cyc)
        dyn_val, dsig = dynamic_loss(res.sigma_d, batch.masks, use_masks,
                                     weights.masked_dynamic_factor)
        up["sigma_d"] = w_dyn * dsig
        sh_val, dw, drho = shadow_loss(res.weights, res.rho)
        up["weights"] = w_sh * dw
        up["rho"] = w_sh * drho
        # cycle consistency on a subsample of this pass's sample points
        n_rays, n_s = res.cache["n"]
        flat_x = res.cache["shade"].x_world
        total = flat_x.shape[0]
        k = min(cycle_points, total)
        sel_rng = loss_rng if loss_rng is not None \
            else np.random.default_rng(0)
        pick = np.sort(sel_rng.choice(total, size=k, replace=False)) \
            if k < total else np.arange(total)
        ray_of = pick // n_s
        cyc_grads = grads if grads is not None else models.store.new_grad()
        cyc_val, dx_cyc = cycle_loss(
            models, flat_x[pick].astype(np.float64), t_norm[ray_of],
            1.0 / max(n_frames - 1, 1), hp[ray_of], hn[ray_of],
            cyc_grads, weight=w_cyc)
        tv = res.cache["tvals"].reshape(-1)[pick]
        np.add.at(extra_do, ray_of, dx_cyc)
        np.add.at(extra_dd, ray_of, tv[:, None] * dx_cyc)
    rep.terms.update(cycle=cyc_val, dynamic=dyn_val, shadow=sh_val)
    if stage == STAGE_A:
        rep.weights.update(dynamic=0.0, shadow=0.0, cycle=0.0)

    rep.total = sum(rep.weights.get(k, 0.0) * rep.terms[k] for k in rep.terms)

    if grads is not None:
        up["ray_origin"] = extra_do
        up["ray_dir"] = extra_dd
        dR_ray, dt_ray = render_backward(models, res, up, grads)
        dR_all, dt_all = dR_other, dt_other
        np.add.at(dR_all, frames, dR_ray)
        np.add.at(dt_all, frames, dt_ray)
        touched = np.nonzero(np.abs(dt_all).sum(axis=1)
                             + np.abs(dR_all).sum(axis=(1, 2)))[0]
        pg = table.param_grads(delta, dR_all, dt_all, frames=touched)
        pose_grads += pg
    return rep, res
