"""Optimizable 2D Gaussian primitives: parameterization, activations,
initialization from the prior cloud, and checkpoint I/O.

Raw (pre-activation) parameters per splat, 13 reals total:
center (3), rotation quaternion wxyz (4), log scales (2), opacity logit (1),
color logits (3). Activated scales are exp(log_scale); opacity and color are
sigmoid. The rotation matrix columns of the unit quaternion are
(t_u, t_v, n) with n = t_u x t_v.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .plyio import read_ply, write_ply
from .priors import InitPointCloud

PARAMS_PER_SPLAT = 13
INIT_OPACITY = 0.1


def sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500))),
                    np.exp(np.clip(x, -500, 500)) / (1.0 + np.exp(np.clip(x, -500, 500))))


def logit(p):
    return np.log(p) - np.log1p(-p)


def quat_to_rotmats(quats):
    """(N,4) wxyz quaternions (normalized here) -> (N,3,3) rotation matrices."""
    q = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((len(q), 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_jacobian_wrt_quat(quats):
    """(N,4,3,3): d R(q/|q|) / d q_raw, including the normalization Jacobian."""
    q = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qh = q / norm
    w, x, y, z = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    zeros = np.zeros_like(w)
    # dR/d(unit q) components, each (N,3,3)
    d = np.empty((len(q), 4, 3, 3))
    d[:, 0] = 2 * np.stack([
        np.stack([zeros, -z, y], axis=-1),
        np.stack([z, zeros, -x], axis=-1),
        np.stack([-y, x, zeros], axis=-1)], axis=-2)
    d[:, 1] = 2 * np.stack([
        np.stack([zeros, y, z], axis=-1),
        np.stack([y, -2 * x, -w], axis=-1),
        np.stack([z, w, -2 * x], axis=-1)], axis=-2)
    d[:, 2] = 2 * np.stack([
        np.stack([-2 * y, x, w], axis=-1),
        np.stack([x, zeros, z], axis=-1),
        np.stack([-w, z, -2 * y], axis=-1)], axis=-2)
    d[:, 3] = 2 * np.stack([
        np.stack([-2 * z, -w, x], axis=-1),
        np.stack([w, -2 * z, y], axis=-1),
        np.stack([x, y, zeros], axis=-1)], axis=-2)
    # chain through normalization: d(qh)/d(q) = (I - qh qh^T) / |q|
    proj = (np.eye(4)[None] - qh[:, :, None] * qh[:, None, :]) / norm[:, :, None]
    return np.einsum("nab,nbij->naij", proj, d)


class SplatSet:
    """Structure-of-arrays splat container with matching gradient buffers."""

    def __init__(self, centers, quats, log_scales, opacity_logit, color_logit):
        self.centers = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.quats = np.ascontiguousarray(quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float64).reshape(n, 2)
        self.opacity_logit = np.ascontiguousarray(opacity_logit, dtype=np.float64).reshape(n)
        self.color_logit = np.ascontiguousarray(color_logit, dtype=np.float64).reshape(n, 3)
        self.zero_grad()
        self.reset_densify_stats()

    def __len__(self):
        return len(self.centers)

    @staticmethod
    def empty():
        return SplatSet(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)),
                        np.zeros(0), np.zeros((0, 3)))

    def zero_grad(self):
        n = len(self)
        self.g_centers = np.zeros((n, 3))
        self.g_quats = np.zeros((n, 4))
        self.g_log_scales = np.zeros((n, 2))
        self.g_opacity_logit = np.zeros(n)
        self.g_color_logit = np.zeros((n, 3))

    def reset_densify_stats(self):
        n = len(self)
        self.screen_grad_accum = np.zeros(n)
        self.screen_grad_count = np.zeros(n)

    # activations -----------------------------------------------------------

    def scales(self):
        return np.exp(self.log_scales)

    def opacities(self):
        return sigmoid(self.opacity_logit)

    def colors(self):
        return sigmoid(self.color_logit)

    def frames(self):
        """(N,3,3) rotation matrices; columns are (t_u, t_v, n)."""
        return quat_to_rotmats(self.quats)

    def normalize_quats(self):
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)

    def copy(self):
        return SplatSet(self.centers.copy(), self.quats.copy(),
                        self.log_scales.copy(), self.opacity_logit.copy(),
                        self.color_logit.copy())

    def params_flat(self):
        return np.concatenate([
            self.centers.reshape(-1), self.quats.reshape(-1),
            self.log_scales.reshape(-1), self.opacity_logit,
            self.color_logit.reshape(-1)])

    def set_params_flat(self, flat):
        n = len(self)
        c, q, s, o = 3 * n, 4 * n, 2 * n, n
        self.centers = flat[:c].reshape(n, 3).copy()
        self.quats = flat[c:c + q].reshape(n, 4).copy()
        self.log_scales = flat[c + q:c + q + s].reshape(n, 2).copy()
        self.opacity_logit = flat[c + q + s:c + q + s + o].copy()
        self.color_logit = flat[c + q + s + o:].reshape(n, 3).copy()

    def grads_flat(self):
        return np.concatenate([
            self.g_centers.reshape(-1), self.g_quats.reshape(-1),
            self.g_log_scales.reshape(-1), self.g_opacity_logit,
            self.g_color_logit.reshape(-1)])


def quat_from_normal(normals):
    """(N,4) wxyz quaternions whose rotation's third column is the given unit
    normal (tangent completion is arbitrary but deterministic)."""
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    # pick a reference axis least aligned with n
    ref = np.where(np.abs(n[:, 2:3]) < 0.9, np.array([0.0, 0.0, 1.0]),
                   np.array([1.0, 0.0, 0.0]))
    tu = np.cross(ref, n)
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = np.cross(n, tu)
    rot = np.stack([tu, tv, n], axis=-1)  # columns
    return rotmat_to_quat(rot)


def rotmat_to_quat(r):
    """(N,3,3) -> (N,4) wxyz, numerically robust branch selection."""
    r = np.asarray(r, dtype=np.float64).reshape(-1, 3, 3)
    n = len(r)
    q = np.empty((n, 4))
    tr = r[:, 0, 0] + r[:, 1, 1] + r[:, 2, 2]
    for i in range(n):
        m = r[i]
        t = tr[i]
        if t > 0:
            s = np.sqrt(t + 1.0) * 2
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s,
                    (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                    (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                    0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                    (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def splat_frame(splat_or_set, index=None):
    """(t_u, t_v, n) unit world vectors for one splat."""
    if index is None:
        r = quat_to_rotmats(np.asarray(splat_or_set).reshape(1, 4))[0]
    else:
        r = splat_or_set.frames()[index]
    return r[:, 0], r[:, 1], r[:, 2]


def init_splats(cloud: InitPointCloud, scene_extent: float) -> SplatSet:
    """One splat per prior-cloud point; scale from mean 3-NN distance."""
    from scipy.spatial import cKDTree

    n = len(cloud.points)
    if n < 4:
        raise ValueError("init cloud needs at least 4 points for kNN scales")
    tree = cKDTree(cloud.points)
    d, _ = tree.query(cloud.points, k=4)   # self + 3 neighbors
    scale = d[:, 1:].mean(axis=1)
    scale = np.clip(scale, 1e-4 * scene_extent, 0.1 * scene_extent)
    quats = quat_from_normal(cloud.normals)
    log_scales = np.stack([np.log(scale), np.log(scale)], axis=1)
    opacity_logit = np.full(n, logit(INIT_OPACITY))
    color = np.clip(cloud.colors, 1e-4, 1 - 1e-4)
    return SplatSet(cloud.points.copy(), quats, log_scales, opacity_logit,
                    logit(color))


# ---------------------------------------------------------------------------
# Checkpoint: binary-LE PLY with 13 float32 properties per splat plus an
# "iteration <n>" comment.
# ---------------------------------------------------------------------------

_CKPT_PROPS = ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3",
               "log_scale_0", "log_scale_1", "opacity_logit",
               "color_logit_0", "color_logit_1", "color_logit_2"]


def save_checkpoint(splats: SplatSet, path, iteration: int = 0):
    cols = np.concatenate([splats.centers, splats.quats, splats.log_scales,
                           splats.opacity_logit[:, None], splats.color_logit],
                          axis=1).astype(np.float32)
    write_ply(path, [("vertex", {name: cols[:, i] for i, name in enumerate(_CKPT_PROPS)})],
              comments=[f"iteration {iteration}"])


def load_checkpoint(path):
    """Returns (SplatSet, iteration)."""
    data = read_ply(path)
    v = data["vertex"].data
    missing = [p for p in _CKPT_PROPS if p not in v]
    if missing:
        raise ValueError(f"checkpoint missing properties: {missing}")
    cols = np.stack([v[p] for p in _CKPT_PROPS], axis=1).astype(np.float64)
    iteration = 0
    for c in data["__comments__"]:
        tok = c.split()
        if len(tok) == 2 and tok[0] == "iteration":
            iteration = int(tok[1])
    s = SplatSet(cols[:, 0:3], cols[:, 3:7], cols[:, 7:9], cols[:, 9],
                 cols[:, 10:13])
    return s, iteration
