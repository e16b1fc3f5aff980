"""Rigid camera poses on SE(3) and trajectory evaluation.

Poses are camera-to-world transforms [R | t]. The optimizable chart is a
6-vector (omega, u): R = rodrigues(omega) @ R_base (world-frame rotation
increment) and t = t_base + u. The derivative of the Rodrigues map at
arbitrary omega is analytic, so pose gradients stay exact even when the
increment has drifted away from zero between chart refreshes.

Trajectory metrics follow the usual odometry protocol: Umeyama Sim(3)
alignment, then absolute trajectory error (position RMSE) and relative
pose errors per frame pair (translation norm, rotation angle in degrees).
"""

from __future__ import annotations

import csv

import numpy as np


class AlignmentError(RuntimeError):
    """Raised when a trajectory is too degenerate to align."""


def skew(w):
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def rodrigues(omega):
    """Axis-angle 3-vector -> rotation matrix."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        # second-order series keeps exp(log(R)) tight near identity
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def rotation_log(R):
    """Rotation matrix -> axis-angle 3-vector with norm in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # near pi the skew part vanishes; recover the axis from R + I
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # fix signs using the largest component
        k = int(np.argmax(axis))
        s = np.ones(3)
        for j in range(3):
            if j != k and A[k, j] < 0:
                s[j] = -1.0
        axis = axis * s
        axis /= np.linalg.norm(axis)
        return axis * theta
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return v * theta / (2.0 * np.sin(theta))


def rotation_jacobians(omega):
    """The three matrices dR/domega_i of the Rodrigues map at omega.

    Closed form valid for any omega (series below 1e-8):
      dR/dw_i = (w_i [w]x + [ w x (I - R) e_i ]x) / |w|^2 @ R
    """
    omega = np.asarray(omega, dtype=np.float64)
    theta2 = float(omega @ omega)
    R = rodrigues(omega)
    out = []
    if theta2 < 1e-16:
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            out.append(skew(e) @ R)
        return out, R
    K = skew(omega)
    ImR = np.eye(3) - R
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        term = omega[i] * K + skew(np.cross(omega, ImR @ e))
        out.append((term / theta2) @ R)
    return out, R


class Pose:
    """Rigid transform: world point = R @ local + t."""

    __slots__ = ("R", "t")

    def __init__(self, R=None, t=None):
        self.R = np.eye(3) if R is None else np.asarray(R, dtype=np.float64)
        self.t = np.zeros(3) if t is None else np.asarray(t, dtype=np.float64)

    @staticmethod
    def identity():
        return Pose()

    def copy(self):
        return Pose(self.R.copy(), self.t.copy())

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t)

    def apply(self, x):
        return np.asarray(x) @ self.R.T + self.t

    def check(self, tol=1e-6):
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) > tol or np.linalg.det(self.R) < 0:
            raise ValueError("rotation drifted off SO(3)")

    def orthonormalize(self):
        U, _, Vt = np.linalg.svd(self.R)
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
        self.R = U @ D @ Vt
        return self


def se3_exp(param, base: Pose | None = None) -> Pose:
    """6-vector (omega, u) -> Pose; with a base: rodrigues(omega) @ R_base,
    t_base + u."""
    param = np.asarray(param, dtype=np.float64)
    R = rodrigues(param[:3])
    t = param[3:6].copy()
    if base is not None:
        R = R @ base.R
        t = base.t + t
    return Pose(R, t)


def se3_log(pose: Pose):
    """Pose -> 6-vector (omega, u) with se3_exp(se3_log(P)) == P."""
    return np.concatenate([rotation_log(pose.R), pose.t])


def quat_from_rotation(R):
    """Unit quaternion (w, x, y, z) from a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


def rotation_from_quat(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


class Trajectory:
    """Ordered poses with strictly increasing frame indices."""

    def __init__(self, indices=None, poses=None):
        self.indices = list(indices) if indices else []
        self.poses = list(poses) if poses else []
        for a, b in zip(self.indices, self.indices[1:]):
            if b <= a:
                raise ValueError("frame indices must strictly increase")

    def __len__(self):
        return len(self.poses)

    def append(self, index, pose: Pose):
        if self.indices and index <= self.indices[-1]:
            raise ValueError("frame indices must strictly increase")
        self.indices.append(index)
        self.poses.append(pose)

    def positions(self):
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def transformed(self, s, R, t):
        """Apply a Sim(3) (s, R, t): R_i' = R R_i, t_i' = s R t_i + t."""
        out = Trajectory()
        for idx, p in zip(self.indices, self.poses):
            out.append(idx, Pose(R @ p.R, s * (R @ p.t) + t))
        return out

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_index", "tx", "ty", "tz", "qw", "qx", "qy", "qz"])
            for idx, p in zip(self.indices, self.poses):
                q = quat_from_rotation(p.R)
                w.writerow([idx] + [f"{v:.17g}" for v in (*p.t, *q)])

    @staticmethod
    def load_csv(path):
        out = Trajectory()
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        for row in rows[1:]:
            idx = int(row[0])
            tx, ty, tz, qw, qx, qy, qz = map(float, row[1:8])
            out.append(idx, Pose(rotation_from_quat([qw, qx, qy, qz]),
                                 np.array([tx, ty, tz])))
        return out


class PoseTable:
    """Per-frame optimizable poses: pose_i = exp(delta_i) applied to a
    stored base (world-frame rotation increment, additive translation).

    The 6-vector increments live in the model's parameter buffer; this
    class owns the non-learnable base poses and maps matrix-level
    gradients (dR, dt) to increment gradients through the analytic
    Rodrigues differential. ``fold`` refreshes the chart by absorbing the
    increments into the base.
    """

    def __init__(self, n_frames):
        self.n = int(n_frames)
        self.base_R = np.tile(np.eye(3), (self.n, 1, 1))
        self.base_t = np.zeros((self.n, 3))

    def set_base(self, i, pose: Pose):
        self.base_R[i] = pose.R
        self.base_t[i] = pose.t

    def build(self, delta):
        """delta: [n,6] -> (R: [n,3,3], t: [n,3]) current poses."""
        R = np.empty_like(self.base_R)
        for i in range(self.n):
            R[i] = rodrigues(delta[i, :3]) @ self.base_R[i]
        return R, self.base_t + delta[:, 3:]

    def pose(self, i, delta) -> Pose:
        return Pose(rodrigues(delta[i, :3]) @ self.base_R[i],
                    self.base_t[i] + delta[i, 3:])

    def param_grads(self, delta, dR, dt, frames=None):
        """Map per-frame matrix grads to per-frame 6-vector grads.

        dR: [n,3,3], dt: [n,3]; frames limits the work to touched poses.
        """
        out = np.zeros((self.n, 6))
        frames = range(self.n) if frames is None else frames
        for i in frames:
            jacs, _ = rotation_jacobians(delta[i, :3])
            for k in range(3):
                out[i, k] = np.sum(dR[i] * (jacs[k] @ self.base_R[i]))
            out[i, 3:] = dt[i]
        return out

    def fold(self, delta):
        """Absorb increments into the base and zero them, re-orthonormalizing
        to kill numeric drift."""
        for i in range(self.n):
            p = Pose(rodrigues(delta[i, :3]) @ self.base_R[i],
                     self.base_t[i] + delta[i, 3:]).orthonormalize()
            self.base_R[i] = p.R
            self.base_t[i] = p.t
        delta[:] = 0.0

    def state(self):
        return {"base_R": self.base_R.copy(), "base_t": self.base_t.copy()}

    def load(self, st):
        self.base_R = np.asarray(st["base_R"], dtype=np.float64).copy()
        self.base_t = np.asarray(st["base_t"], dtype=np.float64).copy()


def init_new_pose(traj: Trajectory):
    """Initialization for a newly admitted frame: copy of the last pose,
    or identity when the trajectory is empty."""
    if len(traj) == 0:
        return Pose.identity()
    return traj.poses[-1].copy()


def umeyama_align(est: Trajectory, gt: Trajectory):
    """Least-squares Sim(3) (s, R, t) minimizing sum |gt_i - (s R est_i + t)|^2
    over camera positions, with the determinant sign correction."""
    if len(est) != len(gt):
        raise ValueError("trajectories must have equal length")
    if len(est) < 3:
        raise AlignmentError("need at least 3 poses")
    x = est.positions()
    y = gt.positions()
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    var_x = float(np.sum(xc * xc)) / len(x)
    if var_x < 1e-18:
        raise AlignmentError("estimated positions are degenerate (zero spread)")
    cov = (yc.T @ xc) / len(x)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    rank = int(np.sum(D > 1e-12 * D[0])) if D[0] > 0 else 0
    if rank < 2:
        raise AlignmentError("positions are collinear or coincident")
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S)) / var_x
    t = my - s * (R @ mx)
    return s, R, t


def ate(est_aligned: Trajectory, gt: Trajectory):
    """Position RMSE between aligned estimate and ground truth."""
    if len(est_aligned) != len(gt):
        raise ValueError("trajectories must have equal length")
    d = est_aligned.positions() - gt.positions()
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def rpe(est_aligned: Trajectory, gt: Trajectory, delta=1):
    """Relative pose error over frame pairs (i, i+delta).

    Returns (rpe_t, rpe_r): RMSE of relative translation norms (world
    units) and RMSE of relative rotation angles (degrees)."""
    if len(est_aligned) != len(gt):
        raise ValueError("trajectories must have equal length")
    if len(gt) < delta + 1:
        raise ValueError("trajectory shorter than delta + 1")
    terrs, rerrs = [], []
    for i in range(len(gt) - delta):
        dg = gt.poses[i].inverse().compose(gt.poses[i + delta])
        de = est_aligned.poses[i].inverse().compose(est_aligned.poses[i + delta])
        E = dg.inverse().compose(de)
        terrs.append(np.linalg.norm(E.t))
        ang = np.degrees(np.linalg.norm(rotation_log(E.R)))
        rerrs.append(ang)
    rpe_t = float(np.sqrt(np.mean(np.square(terrs))))
    rpe_r = float(np.sqrt(np.mean(np.square(rerrs))))
    return rpe_t, rpe_r


def evaluate_trajectories(est: Trajectory, gt: Trajectory, delta=1):
    """Umeyama-align est to gt, then report {ate, rpe_t, rpe_r}.

    Falls back to translation-only alignment when the estimate is too
    degenerate for Umeyama (e.g. an all-identity trajectory)."""
    try:
        s, R, t = umeyama_align(est, gt)
        aligned = est.transformed(s, R, t)
    except AlignmentError:
        offset = gt.positions().mean(axis=0) - est.positions().mean(axis=0)
        aligned = est.transformed(1.0, np.eye(3), offset)
    out = {"ate": ate(aligned, gt)}
    out["rpe_t"], out["rpe_r"] = rpe(aligned, gt, delta=delta)
    return out
