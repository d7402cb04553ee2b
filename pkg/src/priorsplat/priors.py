"""Per-view depth/normal/mask priors raycast from the building mesh, and the
multi-view visibility-filtered initialization point cloud."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraView, camera_center, pixel_ray_grid, project_many
from .geometry import BvhIndex, TriangleMesh
from .imgio import read_pfm, read_png_mask, write_pfm, write_png_mask
from .plyio import read_ply, write_ply

DEFAULT_EPS = 0.05
DEFAULT_K = 2
DEFAULT_N_SAMPLES = 20_000


class EmptyInitCloudError(RuntimeError):
    pass


@dataclass
class PriorBundle:
    view_id: str
    depth: np.ndarray    # HxW camera-frame z, 0 where invalid
    normal: np.ndarray   # HxWx3 unit world normals, 0 where invalid
    mask: np.ndarray     # HxW bool


@dataclass
class InitPointCloud:
    points: np.ndarray       # (N,3)
    normals: np.ndarray      # (N,3)
    colors: np.ndarray       # (N,3) linear RGB
    observations: list = field(default_factory=list)  # per point: [(view_id, (u,v)), ...]


def raycast_priors(mesh: TriangleMesh, view: CameraView,
                   index: BvhIndex | None = None) -> PriorBundle:
    """Cast one ray per pixel center against the mesh (Eq.4-style prior maps)."""
    if index is None:
        index = BvhIndex(mesh)
    dirs, z_per_t = pixel_ray_grid(view)
    h, w = view.height, view.width
    origin = camera_center(view)
    origins = np.broadcast_to(origin, (h * w, 3))
    t, face, hit = index.closest_hit_many(origins, dirs.reshape(-1, 3))
    depth = np.where(hit, t * z_per_t.reshape(-1), 0.0).reshape(h, w)
    normals = np.zeros((h * w, 3))
    if hit.any():
        fn = mesh.face_normals()[face[hit]]
        d = dirs.reshape(-1, 3)[hit]
        flip = np.einsum("ij,ij->i", fn, d) > 0
        fn = np.where(flip[:, None], -fn, fn)
        normals[hit] = fn
    return PriorBundle(view_id=view.id, depth=depth,
                       normal=normals.reshape(h, w, 3),
                       mask=hit.reshape(h, w))


def expected_depth(p, view: CameraView) -> float:
    """Euclidean distance from the camera center (not camera-frame z)."""
    return float(np.linalg.norm(np.asarray(p, dtype=np.float64) - camera_center(view)))


def visibility(p, view: CameraView, mesh_index: BvhIndex, eps: float) -> int:
    """1 iff the ray from the camera to p first hits the mesh within eps of
    p's distance and p projects inside the image."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = camera_center(view)
    p = np.asarray(p, dtype=np.float64)
    d_exp = np.linalg.norm(p - c)
    uv, z, ok = project_many(view, p[None])
    if not ok[0]:
        return 0
    if d_exp < 1e-12:
        return 0
    t, face, hit = mesh_index.closest_hit_many(c[None], (p - c)[None] / d_exp)
    d_int = t[0] if hit[0] else np.inf
    return int(abs(d_int - d_exp) < eps)


def _visibility_matrix(points, views, index, eps):
    """(N_points, N_views) visibility per Eq.2 + frustum containment,
    plus the (N,V,2) projected pixels."""
    n = len(points)
    vis = np.zeros((n, len(views)), dtype=bool)
    pix = np.zeros((n, len(views), 2))
    for j, view in enumerate(views):
        c = camera_center(view)
        delta = points - c
        d_exp = np.linalg.norm(delta, axis=1)
        good = d_exp > 1e-12
        dirs = np.where(good[:, None], delta / np.where(good, d_exp, 1.0)[:, None], 0.0)
        t, _, hit = index.closest_hit_many(np.broadcast_to(c, points.shape), dirs)
        d_int = np.where(hit, t, np.inf)
        uv, z, in_img = project_many(view, points)
        vis[:, j] = good & in_img & (np.abs(d_int - d_exp) < eps)
        pix[:, j] = uv
    return vis, pix


def build_init_cloud(mesh: TriangleMesh, views, n_samples: int, eps: float,
                     k: int, seed: int, index: BvhIndex | None = None) -> InitPointCloud:
    """Sample the mesh surface and retain points visible in >= k views."""
    from .geometry import sample_surface

    if not views:
        raise ValueError("views must be nonempty")
    if k < 1 or n_samples < 1:
        raise ValueError("k and n_samples must be >= 1")
    if index is None:
        index = BvhIndex(mesh)
    pts, normals, _ = sample_surface(mesh, n_samples, seed)
    vis, pix = _visibility_matrix(pts, views, index, eps)
    keep = vis.sum(axis=1) >= k
    if not keep.any():
        raise EmptyInitCloudError(
            f"no sampled point is visible in >= {k} views (eps={eps}); "
            "lower k or raise eps")
    pts, normals, vis, pix = pts[keep], normals[keep], vis[keep], pix[keep]
    observations = []
    for i in range(len(pts)):
        obs = [(views[j].id, (float(pix[i, j, 0]), float(pix[i, j, 1])))
               for j in np.flatnonzero(vis[i])]
        observations.append(obs)
    colors = np.full((len(pts), 3), 0.5)
    return InitPointCloud(points=pts, normals=normals, colors=colors,
                          observations=observations)


# ---------------------------------------------------------------------------
# On-disk layout: depth .pfm, normal .pfm, mask .png per view; init cloud as
# PLY plus a JSON-lines observations sidecar.
# ---------------------------------------------------------------------------

def save_prior_bundle(dirpath, bundle: PriorBundle):
    import os
    os.makedirs(dirpath, exist_ok=True)
    write_pfm(os.path.join(dirpath, f"{bundle.view_id}_depth.pfm"), bundle.depth)
    write_pfm(os.path.join(dirpath, f"{bundle.view_id}_normal.pfm"), bundle.normal)
    write_png_mask(os.path.join(dirpath, f"{bundle.view_id}_mask.png"), bundle.mask)


def load_prior_bundle(dirpath, view_id) -> PriorBundle:
    import os
    return PriorBundle(
        view_id=view_id,
        depth=read_pfm(os.path.join(dirpath, f"{view_id}_depth.pfm")),
        normal=read_pfm(os.path.join(dirpath, f"{view_id}_normal.pfm")),
        mask=read_png_mask(os.path.join(dirpath, f"{view_id}_mask.png")))


def save_init_cloud(ply_path, obs_path, cloud: InitPointCloud):
    write_ply(ply_path, [("vertex", {
        "x": cloud.points[:, 0].astype(np.float32),
        "y": cloud.points[:, 1].astype(np.float32),
        "z": cloud.points[:, 2].astype(np.float32),
        "nx": cloud.normals[:, 0].astype(np.float32),
        "ny": cloud.normals[:, 1].astype(np.float32),
        "nz": cloud.normals[:, 2].astype(np.float32),
        "red": (np.clip(cloud.colors[:, 0], 0, 1) * 255 + 0.5).astype(np.uint8),
        "green": (np.clip(cloud.colors[:, 1], 0, 1) * 255 + 0.5).astype(np.uint8),
        "blue": (np.clip(cloud.colors[:, 2], 0, 1) * 255 + 0.5).astype(np.uint8),
    })])
    with open(obs_path, "w") as f:
        for i, obs in enumerate(cloud.observations):
            for view_id, (u, v) in obs:
                f.write(json.dumps({"point_index": i, "view_id": view_id,
                                    "u": u, "v": v}) + "\n")


def load_init_cloud(ply_path, obs_path=None) -> InitPointCloud:
    data = read_ply(ply_path)["vertex"].data
    pts = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    if "nx" in data:
        normals = np.stack([data["nx"], data["ny"], data["nz"]], axis=1).astype(np.float64)
    else:
        normals = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    if "red" in data:
        colors = np.stack([data["red"], data["green"], data["blue"]],
                          axis=1).astype(np.float64) / 255.0
    else:
        colors = np.full((len(pts), 3), 0.5)
    observations = [[] for _ in range(len(pts))]
    if obs_path is not None:
        import os
        if os.path.exists(obs_path):
            with open(obs_path) as f:
                for line in f:
                    line = line.strip()
                    if not line:
                        continue
                    o = json.loads(line)
                    observations[o["point_index"]].append(
                        (o["view_id"], (o["u"], o["v"])))
    return InitPointCloud(points=pts, normals=normals, colors=colors,
                          observations=observations)
