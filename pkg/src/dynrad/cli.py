"""Command surface.

Subcommands: synth (generate an analytic dataset), train, render (write
blended/static/dynamic color, depth, shadow map and shadow histogram from
a checkpoint), eval-poses (ATE/RPE report), eval-images (PSNR/SSIM
report), ablate (retrain with one method flag disabled).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import dataio, metrics
from .config import RunConfig
from .dataset import SceneDataset, ingest
from .fields import SceneModels, STAGE_A, STAGE_B
from .pose import PoseTable, Trajectory, evaluate_trajectories
from .render import render_image
from .scheduler import TrainState
from .synth import SynthSpec, export_dataset, make_scene
from .train import Trainer, register_view


def _load_models_from_checkpoint(prefix, dataset: SceneDataset):
    """Rebuild every sub-scene's models/pose table from a checkpoint."""
    header, sections = ckpt.load_checkpoint(prefix)
    cfg = RunConfig.from_dict(header["config"])
    state = TrainState.from_dict(header["train_state"])
    scenes = []
    for i, scene_hdr in enumerate(header["scenes"]):
        models = SceneModels(cfg.field_config(), scene_hdr["n_frames"],
                             rng=None, dtype=np.dtype(cfg.dtype))
        models.store.flat[:] = sections[f"scene{i}.params"].astype(
            models.store.dtype)
        table = PoseTable(scene_hdr["n_frames"])
        table.base_R = sections[f"scene{i}.pose_base_R"].reshape(-1, 3, 3).copy()
        table.base_t = sections[f"scene{i}.pose_base_t"].reshape(-1, 3).copy()
        scenes.append({"models": models, "table": table,
                       "frames": list(scene_hdr["frames"])})
    return cfg, state, scenes


def _scene_for_frame(scenes, frame):
    for sc in reversed(scenes):
        if frame in sc["frames"]:
            return sc
    # unseen frame (e.g. holdout): nearest by index decides the sub-scene
    best, best_d = scenes[-1], None
    for sc in scenes:
        d = min(abs(frame - f) for f in sc["frames"])
        if best_d is None or d < best_d:
            best, best_d = sc, d
    return best


def cmd_synth(args):
    spec = SynthSpec(seed=args.seed, difficulty=args.difficulty,
                     n_frames=args.frames,
                     resolution=(args.size, args.size))
    if args.spec:
        spec = SynthSpec(**dataio.read_json(args.spec))
    scene = make_scene(spec)
    path = export_dataset(scene, args.out)
    print(f"wrote synthetic dataset: {path}")
    return 0


def cmd_train(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    dataset = ingest(args.data)
    for w in dataset.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.resume:
        trainer = Trainer.resume(args.resume, dataset, args.out)
        traj = trainer.continue_run()
    else:
        trainer = Trainer(cfg, dataset, args.out)
        traj = trainer.run(status_every=args.status_every)
    print(f"trained {len(traj)} poses; outputs in {args.out}")
    return 0


def cmd_render(args):
    dataset = ingest(args.data)
    cfg, state, scenes = _load_models_from_checkpoint(args.ckpt, dataset)
    stage = STAGE_B if state.stage != STAGE_A else STAGE_A
    frames = [int(f) for f in args.frames.split(",")]
    near = cfg.near if cfg.near > 0 else dataset.near
    far = cfg.far if cfg.far > 0 else dataset.far
    n_frames = dataset.n_frames
    for sub in ("color", "static", "dynamic", "depth", "shadow"):
        os.makedirs(os.path.join(args.out, sub), exist_ok=True)
    for fr in frames:
        sc = _scene_for_frame(scenes, fr)
        models, table = sc["models"], sc["table"]
        delta = models.store.view("pose.delta").astype(np.float64)
        if fr in sc["frames"]:
            pose = table.pose(fr, delta)
        else:
            if fr < 0 or fr >= n_frames:
                raise SystemExit(f"frame {fr} outside the trained range")
            nearest = min(sc["frames"], key=lambda f: abs(f - fr))
            pose = register_view(models, dataset, fr,
                                 table.pose(nearest, delta), cfg, near, far,
                                 stage=stage)
        t_norm = fr / max(n_frames - 1, 1)
        imgs = render_image(models, pose, dataset.intrinsics, t_norm,
                            fr > 0, fr < n_frames - 1, stage,
                            dataset.resolution, cfg.samples_per_ray,
                            near, far)
        dataio.write_png(os.path.join(args.out, "color", f"{fr:04d}.png"),
                         imgs["color"])
        dataio.write_png(os.path.join(args.out, "static", f"{fr:04d}.png"),
                         imgs["static_color"])
        dataio.write_png(os.path.join(args.out, "dynamic", f"{fr:04d}.png"),
                         imgs["dynamic_color"])
        dataio.write_pfm(os.path.join(args.out, "depth", f"{fr:04d}.pfm"),
                         imgs["depth"])
        dataio.write_pfm(os.path.join(args.out, "shadow", f"{fr:04d}.pfm"),
                         imgs["shadow_map"])
        hist = metrics.shadow_histogram(np.clip(imgs["shadow_map"], 0, 1))
        metrics.save_histogram_csv(
            hist, os.path.join(args.out, "shadow", f"{fr:04d}_hist.csv"))
        metrics.save_histogram_plot(
            hist, os.path.join(args.out, "shadow", f"{fr:04d}_hist.png"))
        print(f"rendered frame {fr}")
    return 0


def cmd_eval_poses(args):
    est = Trajectory.load_csv(args.est)
    gt = Trajectory.load_csv(args.gt)
    gt_map = dict(zip(gt.indices, gt.poses))
    missing = [i for i in est.indices if i not in gt_map]
    if missing:
        raise SystemExit(f"frames missing from ground truth: {missing}")
    gt_matched = Trajectory()
    for i in est.indices:
        gt_matched.append(i, gt_map[i])
    rep = evaluate_trajectories(est, gt_matched)
    line = (f"ATE {rep['ate']:.6f}  RPE_t {rep['rpe_t']:.6f}  "
            f"RPE_r {rep['rpe_r']:.6f} deg")
    print(line)
    if args.out:
        dataio.append_csv_row(args.out, ["est", "ate", "rpe_t", "rpe_r"],
                              [args.est, rep["ate"], rep["rpe_t"],
                               rep["rpe_r"]])
    return 0


def _frame_index_of(name):
    stem = os.path.splitext(name)[0]
    digits = "".join(ch for ch in stem if ch.isdigit())
    return int(digits) if digits else None


def cmd_eval_images(args):
    rendered = {_frame_index_of(n): os.path.join(args.rendered, n)
                for n in sorted(os.listdir(args.rendered))
                if n.endswith(".png")}
    reference = {_frame_index_of(n): os.path.join(args.gt, n)
                 for n in sorted(os.listdir(args.gt))
                 if n.endswith(".png")}
    common = sorted(set(rendered) & set(reference))
    if args.holdout:
        common = [i for i in common if i != 0 and i % 10 == 0]
    if not common:
        raise SystemExit("no overlapping frames to evaluate")
    pairs = [(i, dataio.read_png(rendered[i]), dataio.read_png(reference[i]))
             for i in common]
    rows, mean_psnr, mean_ssim = metrics.image_metrics_report(pairs)
    for r in rows:
        print(f"frame {r['frame']:4d}  PSNR {r['psnr']:7.3f}  "
              f"SSIM {r['ssim']:.4f}")
    print(f"mean PSNR {mean_psnr:.3f}  mean SSIM {mean_ssim:.4f}")
    if args.out:
        metrics.save_metrics_csv(rows, mean_psnr, mean_ssim, args.out)
    return 0


ABLATION_FLAGS = ("use_motion_masks", "fix_poses_in_b", "freeze_dynamic_in_a")


def cmd_ablate(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.flag not in ABLATION_FLAGS:
        raise SystemExit(f"--flag must be one of {ABLATION_FLAGS}")
    setattr(cfg, args.flag, False)
    dataset = ingest(args.data)
    out = os.path.join(args.out, f"wo_{args.flag}")
    trainer = Trainer(cfg, dataset, out)
    traj = trainer.run(status_every=args.status_every)
    print(f"ablation wo_{args.flag}: trained {len(traj)} poses -> {out}")
    if dataset.gt_trajectory is not None:
        gt_map = dict(zip(dataset.gt_trajectory.indices,
                          dataset.gt_trajectory.poses))
        gt = Trajectory()
        for i in traj.indices:
            gt.append(i, gt_map[i])
        rep = evaluate_trajectories(traj, gt)
        print(f"ATE {rep['ate']:.6f}  RPE_t {rep['rpe_t']:.6f}  "
              f"RPE_r {rep['rpe_r']:.6f} deg")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="dynrad",
        description="pose-free static/dynamic radiance-field reconstruction")
    sp = p.add_subparsers(dest="command", required=True)

    s = sp.add_parser("synth", help="generate an analytic synthetic dataset")
    s.add_argument("--spec", help="JSON file of synthesis parameters")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--difficulty", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sp.add_parser("train", help="train on a dataset")
    s.add_argument("--config", help="RunConfig JSON (defaults when absent)")
    s.add_argument("--data", required=True, help="dataset manifest.json")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint prefix to resume from")
    s.add_argument("--status-every", type=int, default=0)
    s.set_defaults(fn=cmd_train)

    s = sp.add_parser("render", help="render frames from a checkpoint")
    s.add_argument("--ckpt", required=True, help="checkpoint prefix")
    s.add_argument("--data", required=True, help="dataset manifest.json")
    s.add_argument("--frames", required=True, help="comma-separated indices")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_render)

    s = sp.add_parser("eval-poses", help="ATE / RPE of a trajectory")
    s.add_argument("--est", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval_poses)

    s = sp.add_parser("eval-images", help="PSNR / SSIM over a directory pair")
    s.add_argument("--rendered", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--holdout", action="store_true",
                   help="restrict to the held-out view selection")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval_images)

    s = sp.add_parser("ablate", help="retrain with one method flag disabled")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--flag", required=True,
                   help="|".join(ABLATION_FLAGS))
    s.add_argument("--status-every", type=int, default=0)
    s.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
