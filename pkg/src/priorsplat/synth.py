"""Deterministic synthetic scenes: a gabled house with recessed door and
window details, a coarse planar envelope proxy, optional occluders, a camera
ring, and Lambertian ground-truth renders."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .camera import CameraView, look_at_w2c, pixel_ray_grid, save_cameras_jsonl
from .geometry import TriangleMesh, build_bvh, sample_surface, save_mesh_ply
from .imgio import write_pfm, write_png_srgb

PRESETS = ("open", "occluded", "sparse")
LIGHT_DIR = np.array([0.45, -0.65, 0.9]) / np.linalg.norm([0.45, -0.65, 0.9])
AMBIENT = 0.3
RECESS = 0.05

# face albedos
WALL = (0.85, 0.80, 0.72)
ROOF = (0.55, 0.22, 0.18)
DOOR = (0.35, 0.22, 0.12)
WINDOW = (0.25, 0.35, 0.55)
OCCLUDER = (0.20, 0.45, 0.25)
GROUND = (0.40, 0.42, 0.38)


@dataclass
class SyntheticScene:
    gt_mesh: TriangleMesh
    lod2_mesh: TriangleMesh
    occluders: list
    views: list
    gt_images: dict          # view id -> HxWx3 linear float
    gt_depths: dict          # view id -> HxW camera z (0 = miss)
    gt_surface_cloud: np.ndarray
    preset: str = "open"
    seed: int = 0

    def render_meshes(self):
        return [self.gt_mesh] + list(self.occluders)


def _quads_to_tris(quads):
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return faces


class _Builder:
    """Incremental vertex/face accumulator with per-face albedo."""

    def __init__(self):
        self.verts = []
        self.faces = []
        self.albedo = []
        self._lookup = {}

    def v(self, p):
        key = tuple(round(float(c), 9) for c in p)
        if key not in self._lookup:
            self._lookup[key] = len(self.verts)
            self.verts.append(key)
        return self._lookup[key]

    def quad(self, a, b, c, d, color):
        ia, ib, ic, id_ = (self.v(p) for p in (a, b, c, d))
        for tri in _quads_to_tris([(ia, ib, ic, id_)]):
            self.faces.append(tri)
            self.albedo.append(color)

    def tri(self, a, b, c, color):
        self.faces.append(tuple(self.v(p) for p in (a, b, c)))
        self.albedo.append(color)

    def mesh(self):
        return TriangleMesh(np.array(self.verts, dtype=np.float64),
                            np.array(self.faces, dtype=np.int64),
                            np.array(self.albedo, dtype=np.float64))


# house proportions: 2x2 footprint, 1.5 wall height, ridge rise 1.0
HX, HY, WALL_H, RIDGE_H = 1.0, 1.0, 1.5, 2.5
DOOR_X = (-0.25, 0.25)
DOOR_Z = (0.0, 0.8)
WIN_X = (0.45, 0.85)
WIN_Z = (0.8, 1.2)


def _gable_wall(b, y, sy, color):
    """Wall at y=+-HY including the gable triangle, outward normal sign sy."""
    def p(x, z):
        return (x, y, z)
    if sy > 0:
        b.quad(p(HX, 0), p(-HX, 0), p(-HX, WALL_H), p(HX, WALL_H), color)
        b.tri(p(HX, WALL_H), p(-HX, WALL_H), p(0, RIDGE_H), color)
    else:
        b.quad(p(-HX, 0), p(HX, 0), p(HX, WALL_H), p(-HX, WALL_H), color)
        b.tri(p(-HX, WALL_H), p(HX, WALL_H), p(0, RIDGE_H), color)


def _side_wall_plain(b, x, sx, color):
    def p(y, z):
        return (x, y, z)
    if sx > 0:
        b.quad(p(-HY, 0), p(HY, 0), p(HY, WALL_H), p(-HY, WALL_H), color)
    else:
        b.quad(p(HY, 0), p(-HY, 0), p(-HY, WALL_H), p(HY, WALL_H), color)


def _front_wall_detailed(b):
    """Wall at y=-HY (outward -y) with a recessed door and window."""
    y = -HY
    xs = [-HX, DOOR_X[0], DOOR_X[1], WIN_X[0], WIN_X[1], HX]
    zs = sorted({0.0, DOOR_Z[1], WIN_Z[0], WIN_Z[1], WALL_H})
    holes = {(1, zs.index(DOOR_Z[0])), (3, zs.index(WIN_Z[0]))}
    for i in range(len(xs) - 1):
        for j in range(len(zs) - 1):
            if (i, j) in holes:
                continue
            x0, x1 = xs[i], xs[i + 1]
            z0, z1 = zs[j], zs[j + 1]
            b.quad((x1, y, z0), (x0, y, z0), (x0, y, z1), (x1, y, z1), WALL)
    yi = y + RECESS   # recessed plane
    for (x0, x1), (z0, z1), color, with_bottom in (
            (DOOR_X, DOOR_Z, DOOR, False), (WIN_X, WIN_Z, WINDOW, True)):
        b.quad((x1, yi, z0), (x0, yi, z0), (x0, yi, z1), (x1, yi, z1), color)
        # reveal faces bridging the opening rim to the recessed plane
        b.quad((x0, y, z0), (x0, yi, z0), (x0, yi, z1), (x0, y, z1), WALL)
        b.quad((x1, yi, z0), (x1, y, z0), (x1, y, z1), (x1, yi, z1), WALL)
        b.quad((x0, y, z1), (x0, yi, z1), (x1, yi, z1), (x1, y, z1), WALL)
        if with_bottom:
            b.quad((x0, yi, z0), (x0, y, z0), (x1, y, z0), (x1, yi, z0), WALL)


def _roof(b, color):
    for sx in (+1, -1):
        eave = ((sx * HX, -HY, WALL_H), (sx * HX, HY, WALL_H))
        ridge = ((0, HY, RIDGE_H), (0, -HY, RIDGE_H))
        if sx > 0:
            b.quad(eave[0], eave[1], ridge[0], ridge[1], color)
        else:
            b.quad(eave[1], eave[0], ridge[1], ridge[0], color)


def house_mesh(detailed: bool) -> TriangleMesh:
    """The ground-truth house, or (detailed=False) its planar LoD2 envelope."""
    b = _Builder()
    if detailed:
        _front_wall_detailed(b)
    else:
        def p(x, z):
            return (x, -HY, z)
        b.quad(p(HX, 0), p(-HX, 0), p(-HX, WALL_H), p(HX, WALL_H), WALL)
    b.quad((-HX, HY, 0), (HX, HY, 0), (HX, HY, WALL_H), (-HX, HY, WALL_H), WALL)
    b.tri((-HX, HY, WALL_H), (HX, HY, WALL_H), (0, HY, RIDGE_H), WALL)
    b.tri((HX, -HY, WALL_H), (-HX, -HY, WALL_H), (0, -HY, RIDGE_H), WALL)
    _side_wall_plain(b, HX, +1, WALL)
    _side_wall_plain(b, -HX, -1, WALL)
    _roof(b, ROOF)
    return b.mesh()


def box_mesh(center, size, color=OCCLUDER) -> TriangleMesh:
    cx, cy, cz = center
    sx, sy, sz = (s / 2 for s in size)
    b = _Builder()
    x0, x1, y0, y1, z0, z1 = cx - sx, cx + sx, cy - sy, cy + sy, cz - sz, cz + sz
    b.quad((x1, y0, z0), (x0, y0, z0), (x0, y0, z1), (x1, y0, z1), color)
    b.quad((x0, y1, z0), (x1, y1, z0), (x1, y1, z1), (x0, y1, z1), color)
    b.quad((x0, y0, z0), (x0, y1, z0), (x0, y1, z1), (x0, y0, z1), color)
    b.quad((x1, y1, z0), (x1, y0, z0), (x1, y0, z1), (x1, y1, z1), color)
    b.quad((x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1), color)
    b.quad((x0, y1, z0), (x1, y1, z0), (x1, y0, z0), (x0, y0, z0), color)
    return b.mesh()


def ground_mesh(half=6.0, color=GROUND) -> TriangleMesh:
    b = _Builder()
    b.quad((-half, -half, 0), (half, -half, 0),
           (half, half, 0), (-half, half, 0), color)
    return b.mesh()


def camera_ring(n_views, width, height, radius=4.5, eye_z=1.8,
                target=(0.0, 0.0, 1.0)):
    focal = 0.85 * max(width, height)
    views = []
    for k in range(n_views):
        ang = 2 * np.pi * k / n_views
        eye = np.array([radius * np.sin(ang), -radius * np.cos(ang), eye_z])
        w2c = look_at_w2c(eye, np.asarray(target, dtype=np.float64))
        views.append(CameraView(f"view_{k:03d}", width, height, focal, focal,
                                width / 2.0, height / 2.0, w2c))
    return views


def render_gt(meshes, view: CameraView):
    """Raycast Lambertian render over a mesh union.

    Returns (color HxWx3 linear in [0,1], depth HxW camera z with 0 at
    misses). Shading: albedo * (max(0, n.l) + ambient), normals flipped
    toward the camera.
    """
    meshes = [m for m in meshes if len(m.faces)]
    h, w = view.height, view.width
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    if not meshes:
        return color, depth
    union = meshes[0].concatenated(meshes[1:])
    index = build_bvh(union)
    dirs, z_per_t = pixel_ray_grid(view)
    from .camera import camera_center
    origin = camera_center(view)
    origins = np.broadcast_to(origin, (h * w, 3))
    t, face, valid = index.closest_hit_many(origins, dirs.reshape(-1, 3))
    if not valid.any():
        return color, depth
    normals = union.face_normals()
    albedo = union.albedo if union.albedo is not None \
        else np.full((len(union.faces), 3), 0.7)
    n = normals[face[valid]]
    d = dirs.reshape(-1, 3)[valid]
    flip = np.einsum("ij,ij->i", n, d) > 0
    n = np.where(flip[:, None], -n, n)
    lam = np.maximum(0.0, n @ LIGHT_DIR) + AMBIENT
    shade = np.clip(albedo[face[valid]] * lam[:, None], 0.0, 1.0)
    color.reshape(-1, 3)[valid] = shade
    depth.reshape(-1)[valid] = t[valid] * z_per_t.reshape(-1)[valid]
    return color, depth


def _default_occluders(views):
    """Ground plane plus boxes between cameras and the house facades."""
    boxes = []
    # boxes sit on the ground in front of three facades, sized to cover a
    # quarter-plus of the facade from the nearest ring cameras
    for ang, size in (
            (0.0, (1.9, 0.8, 1.7)),
            (2 * np.pi / 3, (1.8, 0.8, 1.6)),
            (4 * np.pi / 3, (1.8, 0.8, 1.6))):
        r = 2.4
        c = np.array([r * np.sin(ang), -r * np.cos(ang), 0.0])
        boxes.append(box_mesh((c[0], c[1], size[2] / 2), size))
    return [ground_mesh()] + boxes


def facade_occlusion_fraction(scene: SyntheticScene, view: CameraView) -> float:
    """Fraction of pixels seeing the bare house that an occluder blocks."""
    h, w = view.height, view.width
    dirs, _ = pixel_ray_grid(view)
    from .camera import camera_center
    origins = np.broadcast_to(camera_center(view), (h * w, 3))
    d = dirs.reshape(-1, 3)
    t_house, _, hit_house = build_bvh(scene.gt_mesh).closest_hit_many(origins, d)
    if not hit_house.any():
        return 0.0
    occ = [o for o in scene.occluders if len(o.faces)]
    if not occ:
        return 0.0
    union = occ[0].concatenated(occ[1:])
    t_occ, _, hit_occ = build_bvh(union).closest_hit_many(origins, d)
    blocked = hit_house & hit_occ & (t_occ < t_house)
    return float(blocked.sum() / hit_house.sum())


def generate_scene(preset: str, n_views: int = 16, resolution=(128, 96),
                   seed: int = 0, n_cloud_samples: int = 50_000) -> SyntheticScene:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    if n_views < 4:
        raise ValueError("n_views must be >= 4")
    if preset == "sparse":
        n_views = min(n_views, 11)
    width, height = resolution
    gt = house_mesh(detailed=True)
    lod2 = house_mesh(detailed=False)
    views = camera_ring(n_views, width, height)
    occluders = _default_occluders(views) if preset == "occluded" else []
    scene = SyntheticScene(gt_mesh=gt, lod2_mesh=lod2, occluders=occluders,
                           views=views, gt_images={}, gt_depths={},
                           gt_surface_cloud=np.zeros((0, 3)),
                           preset=preset, seed=seed)
    meshes = scene.render_meshes()
    for v in views:
        img, dep = render_gt(meshes, v)
        scene.gt_images[v.id] = img
        scene.gt_depths[v.id] = dep
    pts = sample_surface(gt, n_cloud_samples, seed=seed)[0]
    scene.gt_surface_cloud = pts
    return scene


def save_scene(scene: SyntheticScene, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    save_mesh_ply(os.path.join(out_dir, "gt.ply"), scene.gt_mesh)
    save_mesh_ply(os.path.join(out_dir, "lod2.ply"), scene.lod2_mesh)
    for i, occ in enumerate(scene.occluders):
        save_mesh_ply(os.path.join(out_dir, f"occluder_{i:02d}.ply"), occ)
    save_cameras_jsonl(os.path.join(out_dir, "cameras.jsonl"), scene.views)
    img_dir = os.path.join(out_dir, "images")
    dep_dir = os.path.join(out_dir, "gt_depth")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(dep_dir, exist_ok=True)
    for v in scene.views:
        write_png_srgb(os.path.join(img_dir, f"{v.id}.png"),
                       scene.gt_images[v.id])
        write_pfm(os.path.join(dep_dir, f"{v.id}.pfm"),
                  scene.gt_depths[v.id].astype(np.float32))
    from .plyio import write_ply
    cloud = scene.gt_surface_cloud.astype(np.float32)
    write_ply(os.path.join(out_dir, "gt_cloud.ply"),
              [("vertex", {"x": cloud[:, 0], "y": cloud[:, 1],
                           "z": cloud[:, 2]})])


def load_scene(scene_dir) -> SyntheticScene:
    """Read a scene directory back (images decoded to linear float)."""
    from .camera import load_cameras_jsonl
    from .geometry import load_mesh_ply
    from .imgio import read_pfm, read_png_linear
    from .plyio import read_ply

    gt = load_mesh_ply(os.path.join(scene_dir, "gt.ply"))
    lod2 = load_mesh_ply(os.path.join(scene_dir, "lod2.ply"))
    occluders = []
    for name in sorted(os.listdir(scene_dir)):
        if name.startswith("occluder_") and name.endswith(".ply"):
            occluders.append(load_mesh_ply(os.path.join(scene_dir, name)))
    views = load_cameras_jsonl(os.path.join(scene_dir, "cameras.jsonl"))
    images, depths = {}, {}
    for v in views:
        images[v.id] = read_png_linear(
            os.path.join(scene_dir, "images", f"{v.id}.png"))
        pfm = os.path.join(scene_dir, "gt_depth", f"{v.id}.pfm")
        if os.path.exists(pfm):
            depths[v.id] = read_pfm(pfm).astype(np.float64)
    vert = read_ply(os.path.join(scene_dir, "gt_cloud.ply"))["vertex"].data
    cloud = np.column_stack([vert["x"], vert["y"], vert["z"]]).astype(np.float64)
    return SyntheticScene(gt_mesh=gt, lod2_mesh=lod2, occluders=occluders,
                          views=views, gt_images=images, gt_depths=depths,
                          gt_surface_cloud=cloud)


def sfm_surrogate_cloud(scene: SyntheticScene, n_points: int = 4000,
                        noise_sigma: float = 0.01, seed: int = 0):
    """Sparse noisy cloud standing in for an SfM reconstruction: back-projected
    ground-truth depth pixels with Gaussian jitter."""
    rng = np.random.default_rng(seed)
    pts = []
    per_view = max(1, n_points // max(len(scene.views), 1))
    for v in scene.views:
        dep = scene.gt_depths[v.id]
        ys, xs = np.nonzero(dep > 0)
        if not len(ys):
            continue
        take = rng.choice(len(ys), size=min(per_view, len(ys)), replace=False)
        x, y = xs[take], ys[take]
        z = dep[y, x]
        xc = (x + 0.5 - v.cx) / v.fx * z
        yc = (y + 0.5 - v.cy) / v.fy * z
        cam = np.column_stack([xc, yc, z])
        R = v.w2c[:3, :3]
        t = v.w2c[:3, 3]
        pts.append((cam - t) @ R)
    pts = np.concatenate(pts)
    return pts + rng.normal(0.0, noise_sigma, pts.shape)
