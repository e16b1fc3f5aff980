"""Analytic synthetic scenes with exact ground truth.

A scene is a textured ground slab and backdrop plus one rigidly moving
sphere, all with smooth (C1) density shells so dense ray marching
converges fast. Ground-truth color/depth are rendered by the same
compositing math as the system, at much higher sample density; flows,
motion masks and poses are exact by construction. This is the oracle the
end-to-end acceptance experiments measure against.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import dataio
from .pose import Pose, Trajectory, rodrigues
from .render import composite, generate_rays, sample_rays


def smoothstep(u):
    """C1 ramp: 0 for u<=0, 1 for u>=1, 3u^2-2u^3 between."""
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


@dataclass
class SynthSpec:
    seed: int = 0
    difficulty: float = 1.0
    n_frames: int = 30
    resolution: tuple = (32, 32)
    focal: float = 35.0
    camera_speed: float = 0.08      # world units per frame, +z
    yaw_wobble: float = 0.02        # radians, slow sinusoidal yaw
    object_velocity: tuple = (-0.030, 0.0, 0.10)   # world units per frame
    near: float = 0.5
    far: float = 14.0
    march_steps: int = 1024


@dataclass
class AnalyticScene:
    spec: SynthSpec
    track: list                      # list of Pose, camera-to-world
    intrinsics: tuple                # (f, cx, cy)
    background: np.ndarray
    ground_y: float = 0.85
    backdrop_z: float = 9.0
    slab_sigma: float = 25.0
    slab_width: float = 0.12
    sphere_center0: np.ndarray = field(default_factory=lambda: np.array([0.55, 0.15, 4.0]))
    sphere_radius: float = 0.5
    sphere_sigma: float = 30.0
    sphere_width: float = 0.08
    tex_freq: float = 0.35
    tex_phase: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def n_frames(self):
        return len(self.track)

    def sphere_center(self, frame):
        v = np.asarray(self.spec.object_velocity) * self.spec.difficulty
        return self.sphere_center0 + v * frame

    def static_density(self, x):
        y, z = x[..., 1], x[..., 2]
        ground = self.slab_sigma * smoothstep((y - self.ground_y) / self.slab_width)
        backdrop = self.slab_sigma * smoothstep((z - self.backdrop_z) / self.slab_width)
        return ground + backdrop

    def static_albedo(self, x):
        f = self.tex_freq * self.spec.difficulty
        px, py, pz = self.tex_phase
        xx, yy, zz = x[..., 0], x[..., 1], x[..., 2]
        gy = 0.5 + 0.22 * np.sin(2 * np.pi * f * xx + px) * np.cos(2 * np.pi * f * zz)
        gb = 0.5 + 0.20 * np.cos(2 * np.pi * f * xx + py) * np.sin(2 * np.pi * 0.7 * f * (yy + zz) + pz)
        ground = np.stack([0.35 + 0.3 * gy, 0.3 + 0.25 * gy, 0.25 + 0.2 * gb], axis=-1)
        bz = 0.5 + 0.24 * np.sin(2 * np.pi * 0.6 * f * xx + pz) * np.sin(2 * np.pi * 0.6 * f * yy + px)
        backdrop = np.stack([0.2 + 0.3 * bz, 0.3 + 0.35 * bz, 0.45 + 0.3 * bz], axis=-1)
        # pick by which surface dominates locally
        y, z = x[..., 1], x[..., 2]
        gw = smoothstep((y - self.ground_y) / self.slab_width)
        bw = smoothstep((z - self.backdrop_z) / self.slab_width)
        tot = np.maximum(gw + bw, 1e-12)[..., None]
        return (gw[..., None] * ground + bw[..., None] * backdrop) / tot

    def dynamic_density(self, x, frame):
        c = self.sphere_center(frame)
        r = np.linalg.norm(x - c, axis=-1)
        return self.sphere_sigma * smoothstep((self.sphere_radius - r) / self.sphere_width)

    def dynamic_albedo(self, x, frame):
        c = self.sphere_center(frame)
        rel = x - c
        stripe = 0.5 + 0.5 * np.sin(6.0 * rel[..., 0] / self.sphere_radius)
        col = np.stack([0.85 + 0.1 * stripe, 0.18 + 0.15 * stripe,
                        0.12 + 0.08 * stripe], axis=-1)
        return np.clip(col, 0.0, 1.0)


class SceneConstructionError(RuntimeError):
    pass


def make_scene(spec: SynthSpec) -> AnalyticScene:
    """Deterministic analytic scene from a seed + difficulty spec.

    Raises SceneConstructionError when the moving object would leave the
    camera frustum during the sequence."""
    rng = np.random.default_rng(spec.seed)
    H, W = spec.resolution
    intr = (spec.focal, W / 2.0, H / 2.0)
    track = []
    speed = spec.camera_speed * spec.difficulty
    for i in range(spec.n_frames):
        yaw = spec.yaw_wobble * np.sin(0.35 * i)
        R = rodrigues(np.array([0.0, yaw, 0.0]))
        t = np.array([0.0, 0.0, speed * i])
        track.append(Pose(R, t))
    scene = AnalyticScene(
        spec=spec, track=track, intrinsics=intr,
        background=np.array([0.62, 0.74, 0.90]),
        tex_phase=rng.uniform(0, 2 * np.pi, size=3))
    # feasibility: sphere center stays inside the frustum with a margin
    f, cx, cy = intr
    for i, pose in enumerate(track):
        rel = pose.inverse().apply(scene.sphere_center(i))
        if rel[2] <= spec.near + scene.sphere_radius:
            raise SceneConstructionError(f"object too close at frame {i}")
        u = f * rel[0] / rel[2] + cx
        v = f * rel[1] / rel[2] + cy
        if not (0 <= u < W and 0 <= v < H):
            raise SceneConstructionError(f"object exits frustum at frame {i}")
    return scene


@dataclass
class GroundTruthFrame:
    color: np.ndarray        # [H,W,3]
    depth: np.ndarray        # [H,W] ray distance
    flow_fwd: np.ndarray     # [H,W,2] or None at the last frame
    flow_bwd: np.ndarray     # [H,W,2] or None at frame 0
    mask: np.ndarray         # [H,W] bool
    pose: Pose
    frame: int


def _march(scene: AnalyticScene, frame, pixels, steps=None):
    """Dense ray march through the analytic fields; reuses the system's
    compositor at high sample density."""
    spec = scene.spec
    steps = steps or spec.march_steps
    pose = scene.track[frame]
    n = len(pixels)
    o, d, _ = generate_rays(np.repeat(pose.R[None], n, axis=0),
                            np.repeat(pose.t[None], n, axis=0),
                            scene.intrinsics, pixels)
    t, delta = sample_rays(n, steps, spec.near, spec.far, rng=None,
                           mode="uniform")
    x = o[:, None, :] + t[:, :, None] * d[:, None, :]
    sig_s = scene.static_density(x)
    sig_d = scene.dynamic_density(x, frame)
    sigma = sig_s + sig_d
    c_s = scene.static_albedo(x)
    c_d = scene.dynamic_albedo(x, frame)
    wsum = np.maximum(sigma, 1e-12)[..., None]
    color = (sig_s[..., None] * c_s + sig_d[..., None] * c_d) / wsum
    out = composite(sigma, color, delta, t)
    dyn = composite(sig_d, c_d, delta)
    color_px = out["color"] + (1.0 - out["opacity"])[:, None] * scene.background
    return {"color": color_px, "depth": out["depth"],
            "opacity": out["opacity"], "dyn_opacity": dyn["opacity"],
            "o": o, "d": d}


def _project(scene, frame, X):
    f, cx, cy = scene.intrinsics
    pose = scene.track[frame]
    rel = (X - pose.t) @ pose.R
    z = np.maximum(rel[..., 2], 1e-9)
    return np.stack([f * rel[..., 0] / z + cx,
                     f * rel[..., 1] / z + cy], axis=-1)


def render_gt(scene: AnalyticScene, frame, steps=None) -> GroundTruthFrame:
    """Exact ground truth for one frame: color, depth, flows, motion mask."""
    if not 0 <= frame < scene.n_frames:
        raise ValueError("frame outside the camera track")
    H, W = scene.spec.resolution
    uu, vv = np.meshgrid(np.arange(W), np.arange(H))
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    m = _march(scene, frame, pixels, steps=steps)
    color = m["color"].reshape(H, W, 3)
    depth = m["depth"].reshape(H, W)
    mask = (m["dyn_opacity"] > 0.5).reshape(H, W)

    # surface points at the expected depth; dynamic pixels move rigidly.
    # Pixels with no surface (background) have no correspondence: flow 0.
    X = m["o"] + m["depth"][:, None] * m["d"]
    hit = (m["opacity"] > 1e-6)[:, None]
    v_obj = np.asarray(scene.spec.object_velocity) * scene.spec.difficulty
    flows = {}
    for name, adj, sign in (("fwd", frame + 1, +1), ("bwd", frame - 1, -1)):
        if not 0 <= adj < scene.n_frames:
            flows[name] = None
            continue
        Xm = X + np.where(mask.reshape(-1, 1), sign * v_obj[None, :], 0.0)
        p2 = _project(scene, adj, Xm)
        flows[name] = (np.where(hit, p2 - pixels, 0.0)).reshape(H, W, 2)
    return GroundTruthFrame(color=color, depth=depth,
                            flow_fwd=flows["fwd"], flow_bwd=flows["bwd"],
                            mask=mask, pose=scene.track[frame], frame=frame)


def export_dataset(scene: AnalyticScene, out_dir, steps=None):
    """Write the file layout the ingestion side consumes, plus the
    ground-truth trajectory CSV. Returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("color", "depth", "flow", "mask"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    H, W = scene.spec.resolution
    f, cx, cy = scene.intrinsics
    frames = []
    traj = Trajectory()
    for i in range(scene.n_frames):
        gt = render_gt(scene, i, steps=steps)
        rec = {"index": i,
               "color": f"color/{i:04d}.png",
               "depth": f"depth/{i:04d}.pfm",
               "mask": f"mask/{i:04d}.png",
               "flow_fwd": f"flow/{i:04d}_fwd.flo" if gt.flow_fwd is not None else None,
               "flow_bwd": f"flow/{i:04d}_bwd.flo" if gt.flow_bwd is not None else None}
        dataio.write_png(os.path.join(out_dir, rec["color"]), gt.color)
        dataio.write_pfm(os.path.join(out_dir, rec["depth"]), gt.depth)
        dataio.write_png(os.path.join(out_dir, rec["mask"]),
                         gt.mask.astype(np.uint8) * 255)
        if gt.flow_fwd is not None:
            dataio.write_flo(os.path.join(out_dir, rec["flow_fwd"]), gt.flow_fwd)
        if gt.flow_bwd is not None:
            dataio.write_flo(os.path.join(out_dir, rec["flow_bwd"]), gt.flow_bwd)
        frames.append(rec)
        traj.append(i, gt.pose)
    traj.save_csv(os.path.join(out_dir, "gt_poses.csv"))
    manifest = {
        "resolution": [H, W],
        "intrinsics": {"f": f, "cx": cx, "cy": cy},
        "depth_convention": "ray_distance",
        "near": scene.spec.near,
        "far": scene.spec.far,
        "frames": frames,
        "gt_trajectory": "gt_poses.csv",
    }
    path = os.path.join(out_dir, "manifest.json")
    dataio.write_json(path, manifest)
    return path
