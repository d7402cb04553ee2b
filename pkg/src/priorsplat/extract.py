"""TSDF fusion of rendered median-depth maps and marching-cubes meshing."""

from __future__ import annotations

import numpy as np
from skimage import measure

from .camera import CameraView
from .geometry import TriangleMesh
from .renderer import render
from .splats import SplatSet

TRUNCATION_VOXELS = 4.0
ALPHA_GATE = 0.5


class TsdfVolume:
    """Axis-aligned voxel grid of truncated signed distances.

    Unobserved voxels keep tsdf=+1 with weight 0; |tsdf| stays within 1.
    """

    def __init__(self, origin, voxel_size: float, dims):
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(voxel_size)
        self.dims = tuple(int(d) for d in dims)
        if self.voxel_size <= 0 or any(d <= 0 for d in self.dims):
            raise ValueError("voxel_size and dims must be positive")
        self.tsdf = np.ones(self.dims, dtype=np.float64)
        self.weight = np.zeros(self.dims, dtype=np.float64)
        self.color = np.zeros(self.dims + (3,), dtype=np.float64)

    @property
    def truncation(self) -> float:
        return TRUNCATION_VOXELS * self.voxel_size

    def voxel_centers(self):
        ii, jj, kk = np.meshgrid(*(np.arange(d) for d in self.dims),
                                 indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        return self.origin + (idx + 0.5) * self.voxel_size

    @staticmethod
    def for_bounds(lo, hi, voxel_size: float, pad_voxels: int = 4):
        lo = np.asarray(lo, dtype=np.float64) - pad_voxels * voxel_size
        hi = np.asarray(hi, dtype=np.float64) + pad_voxels * voxel_size
        dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int), 1)
        return TsdfVolume(lo, voxel_size, dims)


def integrate(volume: TsdfVolume, depth, color, alpha, view: CameraView):
    """Fuse one view's median depth into the volume (weight-1 running average)."""
    h, w = view.height, view.width
    if depth.shape != (h, w) or alpha.shape != (h, w):
        raise ValueError("depth/alpha shape does not match the view")
    centers = volume.voxel_centers()
    cam = centers @ view.w2c[:3, :3].T + view.w2c[:3, 3]
    z = cam[:, 2]
    infront = z > 1e-6
    px = np.full(len(z), -1, dtype=np.int64)
    py = np.full(len(z), -1, dtype=np.int64)
    px[infront] = np.floor(view.fx * cam[infront, 0] / z[infront] + view.cx).astype(np.int64)
    py[infront] = np.floor(view.fy * cam[infront, 1] / z[infront] + view.cy).astype(np.int64)
    inside = infront & (px >= 0) & (px < w) & (py >= 0) & (py < h)
    if not inside.any():
        return volume
    pix_alpha = alpha[py[inside], px[inside]]
    pix_depth = depth[py[inside], px[inside]]
    ok = (pix_alpha >= ALPHA_GATE) & (pix_depth > 0)
    sel = np.flatnonzero(inside)[ok]
    sdf = pix_depth[ok] - z[sel]
    tau = volume.truncation
    keep = sdf >= -tau
    sel = sel[keep]
    if not len(sel):
        return volume
    tsdf_obs = np.clip(sdf[keep] / tau, -1.0, 1.0)
    if color is not None:
        col_obs = color[py[sel], px[sel]]
    else:
        col_obs = np.zeros((len(sel), 3))

    flat_t = volume.tsdf.reshape(-1)
    flat_w = volume.weight.reshape(-1)
    flat_c = volume.color.reshape(-1, 3)
    w_old = flat_w[sel]
    w_new = w_old + 1.0
    # weight-0 voxels take the observation outright (init value discarded)
    flat_t[sel] = np.where(w_old > 0, (flat_t[sel] * w_old + tsdf_obs) / w_new,
                           tsdf_obs)
    flat_c[sel] = np.where(w_old[:, None] > 0,
                           (flat_c[sel] * w_old[:, None] + col_obs) / w_new[:, None],
                           col_obs)
    flat_w[sel] = w_new
    return volume


def marching_cubes(volume: TsdfVolume) -> TriangleMesh:
    """Iso-level-0 surface; only cubes with all 8 corners observed emit
    geometry; triangles oriented toward positive tsdf."""
    if min(volume.dims) < 2:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    observed = volume.weight > 0
    if not (observed.any() and (volume.tsdf[observed] <= 0).any()
            and (volume.tsdf[observed] > 0).any()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    mask = observed
    try:
        verts, faces, _, _ = measure.marching_cubes(
            volume.tsdf, level=0.0, spacing=(volume.voxel_size,) * 3,
            mask=mask, allow_degenerate=False)
    except (ValueError, RuntimeError):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    if len(verts) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    # grid index (i,j,k) maps to origin + (idx + 0.5) * voxel
    verts = verts + volume.origin + 0.5 * volume.voxel_size
    mesh = TriangleMesh(verts, faces.astype(np.int64))
    mesh = _orient_outward(mesh, volume)
    return mesh


def _orient_outward(mesh: TriangleMesh, volume: TsdfVolume) -> TriangleMesh:
    """Flip faces whose normals point against the local tsdf gradient."""
    if len(mesh.faces) == 0:
        return mesh
    v = mesh.vertices
    f = mesh.faces
    tri_c = v[f].mean(axis=1)
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    gi, gj, gk = np.gradient(volume.tsdf)
    idx = np.clip(((tri_c - volume.origin) / volume.voxel_size - 0.5).round()
                  .astype(int), 0, np.array(volume.dims) - 1)
    grad = np.stack([g[idx[:, 0], idx[:, 1], idx[:, 2]]
                     for g in (gi, gj, gk)], axis=1)
    flip = np.einsum("ij,ij->i", n, grad) < 0
    f = f.copy()
    f[flip] = f[flip][:, ::-1]
    return TriangleMesh(v, f)


def extract_mesh(splats: SplatSet, views, voxel_size: float | None = None,
                 bounds=None, pad_voxels: int = 4) -> TriangleMesh:
    """Render median depth for every view, fuse, and run marching cubes."""
    if len(splats) == 0 or not views:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    if bounds is None:
        lo = splats.centers.min(axis=0)
        hi = splats.centers.max(axis=0)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    extent = float(np.linalg.norm(hi - lo))
    if voxel_size is None:
        voxel_size = max(extent, 1e-6) / 256.0
    volume = TsdfVolume.for_bounds(lo, hi, voxel_size, pad_voxels)
    for view in views:
        out = render(splats, view)
        integrate(volume, out.median_depth, out.color, out.alpha, view)
    return marching_cubes(volume)
