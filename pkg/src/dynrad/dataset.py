"""Dataset ingestion and validation.

A SceneDataset is a manifest plus per-frame color (PNG), depth (PFM),
forward/backward flow (.flo) and motion mask (PNG) files. Missing color
files or resolution mismatches are fatal; missing priors only disable the
corresponding loss term for that frame.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import dataio
from .pose import Trajectory


class IngestError(RuntimeError):
    pass


@dataclass
class FrameRecord:
    index: int
    color: np.ndarray          # [H,W,3] in [0,1]
    depth: np.ndarray | None   # [H,W] ray distance
    flow_fwd: np.ndarray | None
    flow_bwd: np.ndarray | None
    mask: np.ndarray | None    # [H,W] bool


class SceneDataset:
    def __init__(self, resolution, intrinsics, frames, near, far,
                 gt_trajectory=None, warnings=None):
        self.resolution = tuple(resolution)
        self.intrinsics = tuple(intrinsics)
        self._frames = {f.index: f for f in frames}
        self.frame_indices = sorted(self._frames)
        self.near = near
        self.far = far
        self.gt_trajectory = gt_trajectory
        self.warnings = warnings or []

    @property
    def n_frames(self):
        return len(self._frames)

    def frame(self, index) -> FrameRecord:
        return self._frames[index]

    def holdout_indices(self):
        """Held-out view selection: excluding the first image, one out of
        every ten images."""
        return [i for i in self.frame_indices if i != 0 and i % 10 == 0]

    def training_indices(self, holdout=True):
        if not holdout:
            return list(self.frame_indices)
        held = set(self.holdout_indices())
        return [i for i in self.frame_indices if i not in held]


def ingest(manifest_path) -> SceneDataset:
    """Load and validate a dataset. Missing priors produce warnings and
    disable their loss terms; missing color or wrong resolution is fatal."""
    manifest = dataio.read_json(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    H, W = manifest["resolution"]
    intr = (manifest["intrinsics"]["f"], manifest["intrinsics"]["cx"],
            manifest["intrinsics"]["cy"])
    warnings = []
    frames = []
    last_index = None
    for rec in manifest["frames"]:
        idx = int(rec["index"])
        if last_index is not None and idx <= last_index:
            raise IngestError("manifest frames must be ordered by index")
        last_index = idx

        cpath = os.path.join(root, rec["color"])
        if not os.path.exists(cpath):
            raise IngestError(f"missing color image: {cpath}")
        color = dataio.read_png(cpath)
        if color.shape[:2] != (H, W):
            raise IngestError(
                f"{cpath}: resolution {color.shape[:2]} != manifest {(H, W)}")

        def load_optional(key, reader, what):
            rel = rec.get(key)
            if rel is None:
                return None
            path = os.path.join(root, rel)
            if not os.path.exists(path):
                warnings.append(f"frame {idx}: missing {what} ({rel}); "
                                f"term disabled")
                return None
            data = reader(path)
            if data.shape[:2] != (H, W):
                raise IngestError(f"{path}: resolution mismatch")
            return data

        depth = load_optional("depth", lambda p: dataio.read_pfm(p)[0], "depth")
        flow_fwd = load_optional("flow_fwd", dataio.read_flo, "forward flow")
        flow_bwd = load_optional("flow_bwd", dataio.read_flo, "backward flow")
        mask = load_optional("mask", dataio.read_mask_png, "motion mask")
        frames.append(FrameRecord(index=idx, color=color, depth=depth,
                                  flow_fwd=flow_fwd, flow_bwd=flow_bwd,
                                  mask=mask))
    gt = None
    if manifest.get("gt_trajectory"):
        tpath = os.path.join(root, manifest["gt_trajectory"])
        if os.path.exists(tpath):
            gt = Trajectory.load_csv(tpath)
        else:
            warnings.append("ground-truth trajectory listed but missing")
    return SceneDataset(resolution=(H, W), intrinsics=intr, frames=frames,
                        near=manifest.get("near", 0.1),
                        far=manifest.get("far", 100.0),
                        gt_trajectory=gt, warnings=warnings)
