"""End-to-end training driver.

Runs the progressive scheduler over a dataset: admits images, optimizes
poses and the static field jointly (stage A), freezes poses and activates
the dynamic field (stage B), and hands off to overlapping sub-scenes
until every training frame is consumed. Emits a per-iteration loss CSV,
a JSONL action trace, periodic checkpoints and the recovered trajectory.
"""

from __future__ import annotations

import os

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig
from .dataio import append_csv_row
from .dataset import SceneDataset
from .diffcore import Adam, GradientNanError
from .fields import SceneModels, STAGE_A, STAGE_B
from .losses import compute_batch_loss
from .pose import Pose, PoseTable, Trajectory, se3_exp
from .render import render_backward, render_rays
from .scheduler import (ACTIVATE_DYNAMIC, ADMIT, CREATE_SUBSCENE, DONE,
                        FREEZE_POSES, STOP_ADMISSION, Scheduler, TrainState,
                        make_ray_batch)

LOG_COLUMNS = ["step", "subscene", "stage", "total", "color", "depth", "flow",
               "cycle", "dynamic", "shadow", "w_color", "w_depth", "w_flow",
               "w_cycle", "w_dynamic", "w_shadow", "lr_pose_scale",
               "lr_field_scale", "excluded_reprojections"]


class TrainingAborted(RuntimeError):
    pass


class SubScene:
    """Models + pose table + optimizers for one image range."""

    def __init__(self, cfg: RunConfig, dataset: SceneDataset, rng):
        self.models = SceneModels(cfg.field_config(), dataset.n_frames, rng,
                                  dtype=np.dtype(cfg.dtype))
        self.table = PoseTable(dataset.n_frames)
        store = self.models.store
        self.adams = {}
        for group, (lo, hi) in self.models.group_slices.items():
            lr = cfg.lr_pose if group == "pose" else cfg.lr_field
            self.adams[group] = Adam(lr=lr, beta1=cfg.adam_beta1,
                                     beta2=cfg.adam_beta2, eps=cfg.adam_eps,
                                     size=store.size, lo=lo, hi=hi)
        self.frames = []          # admitted global frame indices, in order
        self.pose_frozen = False

    def current_pose(self, frame) -> Pose:
        delta = self.models.store.view("pose.delta").astype(np.float64)
        return self.table.pose(frame, delta)

    def span(self):
        if len(self.frames) < 2:
            return 0.0
        a = self.current_pose(self.frames[0]).t
        b = self.current_pose(self.frames[-1]).t
        return float(np.linalg.norm(b - a))

    def admit(self, frame, seeded_pose=None):
        if seeded_pose is None:
            if self.frames:
                seeded_pose = self.current_pose(self.frames[-1])
            else:
                seeded_pose = Pose.identity()
        self.table.set_base(frame, seeded_pose)
        self.models.store.view("pose.delta")[frame] = 0.0
        self.frames.append(frame)

    def fold_chart(self):
        delta = self.models.store.view("pose.delta")
        self.table.fold(delta.astype(np.float64))
        delta[:] = 0.0


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: SceneDataset, out_dir):
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = str(out_dir)
        os.makedirs(self.out_dir, exist_ok=True)
        self.rng = np.random.default_rng(cfg.seed)
        self.train_frames = dataset.training_indices(holdout=cfg.holdout)
        self.scheduler = Scheduler(cfg.schedule_config(), self.train_frames)
        self.near = cfg.near if cfg.near > 0 else dataset.near
        self.far = cfg.far if cfg.far > 0 else dataset.far
        self.subscenes = []           # finished + current SubScene objects
        self.state: TrainState | None = None
        self.global_step = 0
        self.final_poses = {}         # frame -> Pose
        self.log_path = os.path.join(self.out_dir, "train_log.csv")
        self.trace_path = os.path.join(self.out_dir, "actions.jsonl")
        self.last_report = None

    # ---------------- lifecycle ----------------

    def _new_subscene(self, index, cursor, seed_frames=None, seed_poses=None):
        sub = SubScene(self.cfg, self.dataset, self.rng)
        self.subscenes.append(sub)
        state, actions = self.scheduler.start_subscene(index, cursor,
                                                       seed_frames=seed_frames)
        for act in actions:
            fr = act.payload["frame"]
            if act.payload.get("seeded") and seed_poses:
                sub.admit(fr, seeded_pose=seed_poses[fr])
            else:
                sub.admit(fr)
            self._trace(act)
        self.state = state
        return sub

    def _trace(self, action):
        with open(self.trace_path, "a") as fh:
            fh.write(action.to_json() + "\n")

    def _apply_actions(self, sub: SubScene, actions):
        handoff = None
        for act in actions:
            self._trace(act)
            if act.kind == ADMIT:
                sub.admit(act.payload["frame"])
            elif act.kind == FREEZE_POSES:
                sub.pose_frozen = True
            elif act.kind in (STOP_ADMISSION, ACTIVATE_DYNAMIC):
                pass
            elif act.kind in (CREATE_SUBSCENE, DONE):
                handoff = act
        return handoff

    def _finalize_subscene(self, sub: SubScene):
        for fr in sub.frames:
            self.final_poses[fr] = sub.current_pose(fr)

    def effective_stage(self):
        if self.state.stage == STAGE_B:
            return STAGE_B
        # ablation: dynamic branch live from the start
        if not self.cfg.freeze_dynamic_in_a:
            return STAGE_B
        return STAGE_A

    # ---------------- the loop ----------------

    def run(self, max_steps=None, status_every=0):
        cfg = self.cfg
        sub = self._new_subscene(0, 0)
        sched = self.scheduler
        while True:
            if max_steps is not None and self.global_step >= max_steps:
                break
            actions = sched.tick(self.state, lambda: sub.span())
            handoff = self._apply_actions(sub, actions)
            if handoff is not None:
                self._finalize_subscene(sub)
                if handoff.kind == DONE:
                    break
                seeds = {fr: sub.current_pose(fr)
                         for fr in handoff.payload["overlap"]}
                sub = self._new_subscene(self.state.subscene + 1,
                                         handoff.payload["cursor"],
                                         seed_frames=handoff.payload["overlap"],
                                         seed_poses=seeds)
                continue
            self._train_step(sub)
            self.state.iteration += 1
            self.global_step += 1
            if status_every and self.global_step % status_every == 0:
                print(f"[step {self.global_step}] stage {self.state.stage} "
                      f"images {self.state.n_images} "
                      f"loss {self.last_report.total:.5f}", flush=True)
            if cfg.checkpoint_every and \
                    self.global_step % cfg.checkpoint_every == 0:
                self.save_checkpoint("ckpt_latest")
        self._finalize_subscene(sub)
        self.save_checkpoint("ckpt_final")
        traj = self.trajectory()
        traj.save_csv(os.path.join(self.out_dir, "trajectory.csv"))
        return traj

    def _train_step(self, sub: SubScene):
        cfg = self.cfg
        stage = self.effective_stage()
        batch = make_ray_batch(self.dataset, sub.frames, cfg.batch_size,
                               self.rng)
        grads = sub.models.store.new_grad()
        pose_grads = np.zeros((self.dataset.n_frames, 6))
        w_scale = self.scheduler.weight_scales(self.state, cfg.decay_target)
        rep, _ = compute_batch_loss(
            sub.models, sub.table, batch, stage, cfg.loss_weights(), w_scale,
            self.dataset.intrinsics, cfg.samples_per_ray, self.near, self.far,
            n_frames=self.dataset.n_frames, rng=self.rng,
            use_masks=cfg.use_motion_masks, grads=grads,
            pose_grads=pose_grads, cycle_points=cfg.cycle_points,
            loss_rng=self.rng)
        self.last_report = rep
        if not np.isfinite(rep.total):
            raise TrainingAborted(
                f"non-finite loss at step {self.global_step}; "
                f"last checkpoint retained")
        grads.view("pose.delta")[:] += pose_grads.astype(
            sub.models.store.dtype)
        pose_scale, field_scale = self.scheduler.lr_scales(
            self.state, fix_poses_in_b=cfg.fix_poses_in_b,
            target_factor=cfg.decay_target)
        if sub.pose_frozen and cfg.fix_poses_in_b:
            pose_scale = 0.0
        dyn_scale = field_scale if stage == STAGE_B else 0.0
        try:
            sub.adams["pose"].step(sub.models.store.flat, grads.flat,
                                   lr_scale=pose_scale)
            sub.adams["static"].step(sub.models.store.flat, grads.flat,
                                     lr_scale=field_scale)
            sub.adams["dynamic"].step(sub.models.store.flat, grads.flat,
                                      lr_scale=dyn_scale)
        except GradientNanError as e:
            raise TrainingAborted(str(e)) from e
        if pose_scale > 0 and cfg.chart_refresh > 0 \
                and (self.global_step + 1) % cfg.chart_refresh == 0:
            sub.fold_chart()
        if cfg.log_every and self.global_step % cfg.log_every == 0:
            t, w = rep.terms, rep.weights
            append_csv_row(self.log_path, LOG_COLUMNS, [
                self.global_step, self.state.subscene, self.state.stage,
                f"{rep.total:.8f}", f"{t['color']:.8f}", f"{t['depth']:.8f}",
                f"{t['flow']:.8f}", f"{t['cycle']:.8f}",
                f"{t['dynamic']:.8f}", f"{t['shadow']:.8f}",
                w.get("color", 0.0), w.get("depth", 0.0), w.get("flow", 0.0),
                w.get("cycle", 0.0), w.get("dynamic", 0.0),
                w.get("shadow", 0.0), pose_scale, field_scale,
                rep.excluded_reprojections])

    # ---------------- outputs ----------------

    def trajectory(self) -> Trajectory:
        traj = Trajectory()
        for fr in sorted(self.final_poses):
            traj.append(fr, self.final_poses[fr])
        return traj

    def subscene_for_frame(self, frame):
        """Latest sub-scene containing the frame."""
        for sub in reversed(self.subscenes):
            if frame in sub.frames:
                return sub
        raise KeyError(f"frame {frame} was never admitted")

    def save_checkpoint(self, name):
        subs = [{"models": s.models, "table": s.table, "adams": s.adams,
                 "frames": s.frames} for s in self.subscenes]
        return ckpt.save_checkpoint(
            os.path.join(self.out_dir, name), subs, self.state, self.rng,
            self.cfg, extra={"global_step": self.global_step,
                             "final_poses": sorted(self.final_poses)})

    @staticmethod
    def resume(path_prefix, dataset: SceneDataset, out_dir):
        """Rebuild a Trainer mid-run from a checkpoint; the subsequent
        loss trace matches an uninterrupted run exactly."""
        header, sections = ckpt.load_checkpoint(path_prefix)
        cfg = RunConfig.from_dict(header["config"])
        if cfg.hash() != header["config_hash"]:
            raise ckpt.CheckpointError("config hash mismatch")
        tr = Trainer(cfg, dataset, out_dir)
        tr.rng = ckpt.restore_rng(header)
        tr.global_step = int(header["extra"]["global_step"])
        tr.state = TrainState.from_dict(header["train_state"])
        tr.subscenes = []
        for i, scene_hdr in enumerate(header["scenes"]):
            sub = SubScene(cfg, dataset, rng=None)
            sub.models.store.flat[:] = sections[f"scene{i}.params"].astype(
                sub.models.store.dtype)
            sub.table.base_R = sections[f"scene{i}.pose_base_R"].reshape(-1, 3, 3).copy()
            sub.table.base_t = sections[f"scene{i}.pose_base_t"].reshape(-1, 3).copy()
            for gname, opt in sub.adams.items():
                opt.load_state(scene_hdr["adam"][gname],
                               sections[f"scene{i}.adam.{gname}.m"],
                               sections[f"scene{i}.adam.{gname}.v"])
            sub.frames = list(scene_hdr["frames"])
            tr.subscenes.append(sub)
        cur = tr.subscenes[-1]
        cur.pose_frozen = tr.state.stage == STAGE_B
        for s in tr.subscenes[:-1]:
            for fr in s.frames:
                tr.final_poses[fr] = s.current_pose(fr)
        return tr

    def continue_run(self):
        """Resume the loop after Trainer.resume."""
        cfg = self.cfg
        sub = self.subscenes[-1]
        sched = self.scheduler
        while True:
            actions = sched.tick(self.state, lambda: sub.span())
            handoff = self._apply_actions(sub, actions)
            if handoff is not None:
                self._finalize_subscene(sub)
                if handoff.kind == DONE:
                    break
                seeds = {fr: sub.current_pose(fr)
                         for fr in handoff.payload["overlap"]}
                sub = self._new_subscene(self.state.subscene + 1,
                                         handoff.payload["cursor"],
                                         seed_frames=handoff.payload["overlap"],
                                         seed_poses=seeds)
                continue
            self._train_step(sub)
            self.state.iteration += 1
            self.global_step += 1
        self._finalize_subscene(sub)
        self.save_checkpoint("ckpt_final")
        traj = self.trajectory()
        traj.save_csv(os.path.join(self.out_dir, "trajectory.csv"))
        return traj


def register_view(models: SceneModels, dataset: SceneDataset, frame,
                  init_pose: Pose, cfg: RunConfig, near, far, stage=STAGE_B,
                  steps=None, rng=None):
    """Held-out view registration: freeze the fields, optimize only this
    frame's pose by photometric error, starting from the nearest training
    pose. Returns the registered Pose."""
    steps = steps or cfg.registration_steps
    rng = rng or np.random.default_rng(cfg.seed + 1000 + frame)
    rec = dataset.frame(frame)
    H, W = dataset.resolution
    n_frames = dataset.n_frames
    t_norm = frame / max(n_frames - 1, 1)
    param = np.zeros(6)
    base = init_pose.copy()
    opt = Adam(lr=cfg.registration_lr, size=6)
    table = PoseTable(1)
    table.set_base(0, base)
    grads_sink = models.store.new_grad()
    for _ in range(steps):
        us = rng.integers(0, W, size=cfg.registration_rays)
        vs = rng.integers(0, H, size=cfg.registration_rays)
        pixels = np.stack([us, vs], axis=1).astype(np.float64)
        target = rec.color[vs, us]
        R_all, t_all = table.build(param[None, :])
        n = len(pixels)
        res = render_rays(models, np.repeat(R_all, n, axis=0),
                          np.repeat(t_all, n, axis=0), dataset.intrinsics,
                          pixels, np.full(n, t_norm),
                          np.full(n, frame > 0, dtype=bool),
                          np.full(n, frame < n_frames - 1, dtype=bool),
                          stage, cfg.samples_per_ray, near, far, rng=rng)
        diff = res.color - target
        dC = 2.0 * diff / n
        grads_sink.zero()
        dR, dt = render_backward(models, res, {"color": dC}, grads_sink)
        pg = table.param_grads(param[None, :], dR.sum(axis=0)[None],
                               dt.sum(axis=0)[None], frames=[0])
        opt.step(param, pg[0])
    return se3_exp(param, base=base)
