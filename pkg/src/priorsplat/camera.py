"""Pinhole camera model.

Conventions: camera looks along +z in its own frame, x right, y down,
pixel (0,0) top-left, rays through pixel centers (x+0.5, y+0.5).
No lens distortion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import Ray


@dataclass(frozen=True)
class CameraView:
    id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    w2c: np.ndarray  # 4x4 world-to-camera, row-major

    def __post_init__(self):
        object.__setattr__(self, "w2c", np.asarray(self.w2c, dtype=np.float64).reshape(4, 4))
        r = self.w2c[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0:
            raise ValueError(f"view {self.id!r}: w2c rotation is not a proper rotation")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"view {self.id!r}: focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(f"view {self.id!r}: principal point outside image")

    @property
    def rotation(self):
        return self.w2c[:3, :3]

    @property
    def translation(self):
        return self.w2c[:3, 3]


def camera_center(view: CameraView) -> np.ndarray:
    """World point that maps to the camera-frame origin."""
    return -view.rotation.T @ view.translation


def to_camera(view: CameraView, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ view.rotation.T + view.translation


def project(view: CameraView, p):
    """Project a world point; returns (u, v, z) or None if behind/outside."""
    x, y, z = to_camera(view, np.asarray(p, dtype=np.float64))
    if z <= 1e-6:
        return None
    u = view.fx * x / z + view.cx
    v = view.fy * y / z + view.cy
    if not (0 <= u < view.width and 0 <= v < view.height):
        return None
    return u, v, z


def project_many(view: CameraView, pts):
    """Vectorized projection: returns (uv (N,2), z (N,), valid (N,))."""
    cam = to_camera(view, pts)
    z = cam[:, 2]
    ok = z > 1e-6
    zsafe = np.where(ok, z, 1.0)
    u = view.fx * cam[:, 0] / zsafe + view.cx
    v = view.fy * cam[:, 1] / zsafe + view.cy
    ok &= (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
    return np.stack([u, v], axis=1), z, ok


def pixel_ray(view: CameraView, x: int, y: int) -> Ray:
    """Ray through the center of pixel (x, y)."""
    if not (0 <= x < view.width and 0 <= y < view.height):
        raise ValueError(f"pixel ({x},{y}) outside {view.width}x{view.height} image")
    d_cam = np.array([(x + 0.5 - view.cx) / view.fx,
                      (y + 0.5 - view.cy) / view.fy,
                      1.0])
    d = view.rotation.T @ d_cam
    return Ray(origin=camera_center(view), direction=d / np.linalg.norm(d))


def pixel_ray_grid(view: CameraView):
    """Directions (H,W,3) of all pixel-center rays (unit, world) plus the
    per-pixel factor converting ray-parameter t into camera-frame z."""
    xs = (np.arange(view.width) + 0.5 - view.cx) / view.fx
    ys = (np.arange(view.height) + 0.5 - view.cy) / view.fy
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    norms = np.linalg.norm(d_cam, axis=-1)
    d_world = d_cam @ view.rotation   # R^T applied to each row vector
    d_world /= norms[..., None]
    # unit world direction has camera-frame z = 1/norm
    return d_world, 1.0 / norms


def save_cameras_jsonl(path, views):
    with open(path, "w") as f:
        for v in views:
            f.write(json.dumps({
                "id": v.id, "width": v.width, "height": v.height,
                "fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy,
                "w2c": [float(x) for x in v.w2c.reshape(-1)],
            }) + "\n")


def load_cameras_jsonl(path):
    views = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            o = json.loads(line)
            views.append(CameraView(
                id=o["id"], width=int(o["width"]), height=int(o["height"]),
                fx=float(o["fx"]), fy=float(o["fy"]),
                cx=float(o["cx"]), cy=float(o["cy"]),
                w2c=np.array(o["w2c"], dtype=np.float64).reshape(4, 4)))
    return views


def look_at_w2c(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera matrix for a camera at `eye` looking at `target`
    (+z forward, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-9:   # looking straight along up: pick another reference
        upv = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, upv)
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])   # rows: camera x, y, z in world coords
    w2c = np.eye(4)
    w2c[:3, :3] = r
    w2c[:3, 3] = -r @ eye
    return w2c
