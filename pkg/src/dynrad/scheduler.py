"""Three-stage progressive training state machine.

Each sub-scene runs: (A) progressive image admission with joint pose +
static-field optimization, then a refinement block whose first part keeps
optimizing poses jointly; (B) poses frozen, dynamic field activated for
the rest of the refinement block; (C) handoff to a fresh sub-scene that
inherits the last ``overlap`` images and their poses, or Done.

The schedule is driven by tick(), which emits a deterministic, replayable
action trace. Defaults: start with 5 images, admit one every 600
iterations while the trajectory span stays within 4 units and the image
count within 70; refine for 840 iterations per admitted image, of which
the first seventh is the joint phase; pose learning rate and the
depth/flow weights decay exponentially to 0.1x over the joint phase, the
field learning rate decays to 0.1x over the dynamic phase.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .losses import RayBatch

STAGE_A = "A"   # progressive pose + static
STAGE_B = "B"   # dynamic active, poses fixed
STAGE_C = "C"   # handoff

ADMIT = "admit_image"
STOP_ADMISSION = "stop_admission"
FREEZE_POSES = "freeze_poses"
ACTIVATE_DYNAMIC = "activate_dynamic"
CREATE_SUBSCENE = "create_subscene"
DONE = "done"


@dataclass
class Action:
    kind: str
    iteration: int
    subscene: int
    payload: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({"kind": self.kind, "iteration": self.iteration,
                           "subscene": self.subscene, **self.payload},
                          sort_keys=True)


@dataclass
class ScheduleConfig:
    start_images: int = 5
    admit_interval: int = 600
    span_limit: float = 4.0
    max_images: int = 70
    iters_per_image: int = 840
    joint_divisor: int = 7
    overlap: int = 20
    batch_size: int = 4096


@dataclass
class TrainState:
    subscene: int = 0
    iteration: int = 0
    stage: str = STAGE_A
    admitted: list = field(default_factory=list)   # global frame indices
    cursor: int = 0                                # next index into frame list
    admission_stopped: bool = False
    refine_start: int = -1
    n_refine: int = -1

    @property
    def n_images(self):
        return len(self.admitted)

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return TrainState(**d)


def lr_schedule(phase, step_in_phase, horizon, target_factor=0.1):
    """(pose_scale, field_scale) learning-rate multipliers per phase.

    "admission": both 1. "joint": pose decays to target_factor across the
    phase, field constant. "dynamic": pose frozen (0), field decays."""
    if phase == "admission":
        return 1.0, 1.0
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    frac = min(step_in_phase, horizon) / horizon
    decay = target_factor ** frac
    if phase == "joint":
        return decay, 1.0
    if phase == "dynamic":
        return 0.0, decay
    raise ValueError(f"unknown phase {phase!r}")


class Scheduler:
    """Owns stage transitions for one dataset traversal.

    ``frames`` is the ordered list of global frame indices available for
    training (holdout already removed).
    """

    def __init__(self, cfg: ScheduleConfig, frames):
        self.cfg = cfg
        self.frames = list(frames)
        if not self.frames:
            raise ValueError("no training frames")

    def start_subscene(self, index, cursor, seed_frames=None):
        """Begin sub-scene ``index`` admitting ``seed_frames`` (overlap
        from the predecessor) plus fresh frames up to start_images."""
        state = TrainState(subscene=index, cursor=cursor)
        actions = []
        for fr in (seed_frames or []):
            state.admitted.append(fr)
            actions.append(Action(ADMIT, 0, index,
                                  {"frame": fr, "seeded": True}))
        while (state.n_images < self.cfg.start_images
               and state.cursor < len(self.frames)):
            fr = self.frames[state.cursor]
            state.cursor += 1
            state.admitted.append(fr)
            actions.append(Action(ADMIT, 0, index, {"frame": fr}))
        return state, actions

    def tick(self, state: TrainState, span):
        """Advance one iteration boundary; returns the emitted actions.

        Called before the optimization step of state.iteration; ``span``
        is the current head-to-tail camera distance of the sub-scene,
        given as a float or a callable (evaluated only at admission
        instants, which is also when the threshold is checked)."""
        cfg = self.cfg
        actions = []
        it = state.iteration
        if state.stage == STAGE_C:
            raise RuntimeError("sub-scene already handed off")
        if not state.admission_stopped:
            if it > 0 and it % cfg.admit_interval == 0:
                span_now = span() if callable(span) else span
                stop = (state.cursor >= len(self.frames)
                        or span_now > cfg.span_limit
                        or state.n_images >= cfg.max_images)
                if not stop:
                    fr = self.frames[state.cursor]
                    state.cursor += 1
                    state.admitted.append(fr)
                    actions.append(Action(ADMIT, it, state.subscene,
                                          {"frame": fr}))
                    stop = (state.n_images >= cfg.max_images
                            or state.cursor >= len(self.frames))
                if stop:
                    state.admission_stopped = True
                    state.refine_start = it
                    state.n_refine = cfg.iters_per_image * state.n_images
                    actions.append(Action(
                        STOP_ADMISSION, it, state.subscene,
                        {"n_images": state.n_images,
                         "n_refine": state.n_refine}))
        else:
            rel = it - state.refine_start
            joint_len = state.n_refine // cfg.joint_divisor
            if rel == joint_len and state.stage == STAGE_A:
                actions.append(Action(FREEZE_POSES, it, state.subscene))
                actions.append(Action(ACTIVATE_DYNAMIC, it, state.subscene))
                state.stage = STAGE_B
            if rel >= state.n_refine:
                state.stage = STAGE_C
                if state.cursor < len(self.frames):
                    overlap = state.admitted[-cfg.overlap:]
                    actions.append(Action(
                        CREATE_SUBSCENE, it, state.subscene,
                        {"overlap": overlap, "cursor": state.cursor}))
                else:
                    actions.append(Action(DONE, it, state.subscene))
        return actions

    def phase(self, state: TrainState):
        """(phase_name, step_in_phase, horizon) for the lr/weight decay."""
        if not state.admission_stopped:
            return "admission", state.iteration, max(state.iteration, 1)
        rel = state.iteration - state.refine_start
        joint_len = max(state.n_refine // self.cfg.joint_divisor, 1)
        if rel < joint_len:
            return "joint", rel, joint_len
        return "dynamic", rel - joint_len, max(state.n_refine - joint_len, 1)

    def lr_scales(self, state: TrainState, fix_poses_in_b=True,
                  target_factor=0.1):
        phase, step, horizon = self.phase(state)
        pose_s, field_s = lr_schedule(phase, step, horizon, target_factor)
        if phase == "dynamic" and not fix_poses_in_b:
            pose_s = target_factor  # keep optimizing at the decayed rate
        return pose_s, field_s

    def weight_scales(self, state: TrainState, target_factor=0.1):
        """Annealing multipliers for the depth and flow prior weights:
        constant through admission, decaying to 0.1x over the joint
        phase, held there afterwards."""
        phase, step, horizon = self.phase(state)
        if phase == "admission":
            s = 1.0
        elif phase == "joint":
            s = target_factor ** (min(step, horizon) / horizon)
        else:
            s = target_factor
        return {"depth": s, "flow": s}


def make_ray_batch(dataset, admitted, batch_size, rng):
    """Sample ``batch_size`` supervision rays uniformly across the
    admitted frames of ``dataset``. Flow terms are only marked valid when
    the adjacent frame is also admitted (its pose exists).
    """
    admitted = np.asarray(sorted(admitted))
    H, W = dataset.resolution
    pick = rng.integers(0, len(admitted), size=batch_size)
    frames = admitted[pick]
    us = rng.integers(0, W, size=batch_size)
    vs = rng.integers(0, H, size=batch_size)
    adm = set(int(a) for a in admitted)
    colors = np.empty((batch_size, 3))
    depths = np.zeros(batch_size)
    depth_valid = np.zeros(batch_size, dtype=bool)
    flow_fwd = np.zeros((batch_size, 2))
    flow_bwd = np.zeros((batch_size, 2))
    fwd_valid = np.zeros(batch_size, dtype=bool)
    bwd_valid = np.zeros(batch_size, dtype=bool)
    masks = np.zeros(batch_size, dtype=bool)
    for fr in np.unique(frames):
        rows = np.where(frames == fr)[0]
        u, v = us[rows], vs[rows]
        rec = dataset.frame(int(fr))
        colors[rows] = rec.color[v, u]
        if rec.depth is not None:
            depths[rows] = rec.depth[v, u]
            depth_valid[rows] = True
        if rec.flow_fwd is not None and (int(fr) + 1) in adm:
            flow_fwd[rows] = rec.flow_fwd[v, u]
            fwd_valid[rows] = True
        if rec.flow_bwd is not None and (int(fr) - 1) in adm:
            flow_bwd[rows] = rec.flow_bwd[v, u]
            bwd_valid[rows] = True
        if rec.mask is not None:
            masks[rows] = rec.mask[v, u].astype(bool)
    return RayBatch(frames=frames,
                    pixels=np.stack([us, vs], axis=1).astype(np.float64),
                    colors=colors, depths=depths, depth_valid=depth_valid,
                    flow_fwd=flow_fwd, flow_fwd_valid=fwd_valid,
                    flow_bwd=flow_bwd, flow_bwd_valid=bwd_valid, masks=masks)
