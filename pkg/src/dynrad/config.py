"""Run configuration: every tunable in one serializable place.

Schedule constants default to the reference protocol (start with 5
images, admit every 600 iterations, stop past span 4 or 70 images, refine
840 iterations per image with the first seventh joint, 4096 rays per
batch, weights/learning rates decaying to their 0.1 factor, 20-image
sub-scene overlap). Ablation flags default to the full method.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .fields import FieldConfig
from .losses import LossWeights
from .scheduler import ScheduleConfig


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "float32"

    # fields / encoders
    n_levels: int = 8
    table_size: int = 2 ** 14
    n_features: int = 2
    base_res: int = 16
    growth: float = 1.5
    geo_dim: int = 15
    base_hidden: int = 64
    color_hidden: int = 64
    shadow_hidden: int = 32
    flow_hidden: int = 64
    time_freqs: int = 4
    flow_pos_freqs: int = 4
    flow_time_freqs: int = 2
    shadow_pos_freqs: int = 2
    flow_max: float = 0.5
    density_bias: float = 0.0

    # rendering
    samples_per_ray: int = 128
    sample_mode: str = "disparity"
    near: float = -1.0              # <= 0: take from the dataset manifest
    far: float = -1.0

    # optimization
    lr_pose: float = 1e-3
    lr_field: float = 5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    chart_refresh: int = 1000       # fold pose increments every k steps
    decay_target: float = 0.1

    # loss weights
    w_color: float = 1.0
    w_depth: float = 0.05
    w_flow: float = 0.01
    w_cycle: float = 0.01
    w_dynamic: float = 0.001
    w_shadow: float = 0.01
    masked_dynamic_factor: float = 0.1
    cycle_points: int = 256

    # schedule
    start_images: int = 5
    admit_interval: int = 600
    span_limit: float = 4.0
    max_images: int = 70
    iters_per_image: int = 840
    joint_divisor: int = 7
    overlap: int = 20
    batch_size: int = 4096

    # ablation flags (full method when all True)
    use_motion_masks: bool = True
    fix_poses_in_b: bool = True
    freeze_dynamic_in_a: bool = True

    # evaluation protocol
    holdout: bool = False
    registration_steps: int = 300
    registration_lr: float = 3e-3
    registration_rays: int = 256

    # bookkeeping
    log_every: int = 20
    checkpoint_every: int = 2000

    def field_config(self) -> FieldConfig:
        return FieldConfig(
            n_levels=self.n_levels, table_size=self.table_size,
            n_features=self.n_features, base_res=self.base_res,
            growth=self.growth, geo_dim=self.geo_dim,
            base_hidden=self.base_hidden, color_hidden=self.color_hidden,
            shadow_hidden=self.shadow_hidden, flow_hidden=self.flow_hidden,
            time_freqs=self.time_freqs, flow_pos_freqs=self.flow_pos_freqs,
            flow_time_freqs=self.flow_time_freqs,
            shadow_pos_freqs=self.shadow_pos_freqs, flow_max=self.flow_max,
            density_bias=self.density_bias)

    def loss_weights(self) -> LossWeights:
        return LossWeights(color=self.w_color, depth=self.w_depth,
                           flow=self.w_flow, cycle=self.w_cycle,
                           dynamic=self.w_dynamic, shadow=self.w_shadow,
                           masked_dynamic_factor=self.masked_dynamic_factor)

    def schedule_config(self) -> ScheduleConfig:
        return ScheduleConfig(
            start_images=self.start_images,
            admit_interval=self.admit_interval, span_limit=self.span_limit,
            max_images=self.max_images, iters_per_image=self.iters_per_image,
            joint_divisor=self.joint_divisor, overlap=self.overlap,
            batch_size=self.batch_size)

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        known = {f.name for f in fields(RunConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**d)

    @staticmethod
    def load(path):
        with open(path) as fh:
            return RunConfig.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
