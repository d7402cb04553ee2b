"""Triangle meshes, BVH ray queries, surface sampling, rigid/similarity transforms."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .plyio import read_ply, write_ply

log = logging.getLogger(__name__)

# Intersections closer than this along the ray are ignored (self-hit guard).
T_MIN = 1e-6
DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    pass


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            self.direction = self.direction / n


@dataclass
class RayHit:
    t: float
    face_index: int
    point: np.ndarray
    normal: np.ndarray  # unit, flipped to oppose the ray direction


@dataclass
class SimilarityTransform:
    rotation: np.ndarray   # 3x3, orthonormal, det +1
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must have det +1")

    @staticmethod
    def identity():
        return SimilarityTransform(np.eye(3), np.zeros(3), 1.0)

    def inverse(self):
        r = self.rotation.T
        s = 1.0 / self.scale
        return SimilarityTransform(r, -s * (r @ self.translation), s)

    def apply_points(self, pts):
        return self.scale * (np.asarray(pts) @ self.rotation.T) + self.translation


class TriangleMesh:
    """Indexed triangle surface.

    Degenerate faces (area < 1e-12) are dropped at construction; the number
    dropped is logged and kept in `dropped_degenerate`.
    """

    def __init__(self, vertices, faces, albedo=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and faces.max() >= len(self.vertices):
            raise MeshError("face index out of range")
        if faces.size and faces.min() < 0:
            raise MeshError("negative face index")
        areas = _face_areas(self.vertices, faces)
        keep = areas > DEGENERATE_AREA
        self.dropped_degenerate = int((~keep).sum())
        if self.dropped_degenerate:
            log.warning("dropped %d degenerate faces", self.dropped_degenerate)
        self.faces = faces[keep]
        if albedo is not None:
            albedo = np.asarray(albedo, dtype=np.float64).reshape(-1, 3)
            if len(albedo) != len(faces):
                raise MeshError("albedo length mismatch")
            albedo = albedo[keep]
        self.albedo = albedo

    @property
    def n_faces(self):
        return len(self.faces)

    def face_areas(self):
        return _face_areas(self.vertices, self.faces)

    def face_normals(self):
        """Unit geometric normals following the CCW-outward winding."""
        v0, v1, v2 = (self.vertices[self.faces[:, i]] for i in range(3))
        n = np.cross(v1 - v0, v2 - v0)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def concatenated(self, others):
        """Union of this mesh with others (albedo kept where all have it)."""
        meshes = [self] + list(others)
        verts = np.concatenate([m.vertices for m in meshes])
        offs = np.cumsum([0] + [len(m.vertices) for m in meshes[:-1]])
        faces = np.concatenate([m.faces + o for m, o in zip(meshes, offs)])
        if all(m.albedo is not None for m in meshes):
            albedo = np.concatenate([m.albedo for m in meshes])
        else:
            albedo = None
        return TriangleMesh(verts, faces, albedo)


def _face_areas(vertices, faces):
    if len(faces) == 0:
        return np.zeros(0)
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)


def apply_transform(mesh: TriangleMesh, xf: SimilarityTransform) -> TriangleMesh:
    return TriangleMesh(xf.apply_points(mesh.vertices), mesh.faces, mesh.albedo)


def sample_surface(mesh: TriangleMesh, n: int, seed: int):
    """Area-weighted surface samples.

    Returns (points (n,3), normals (n,3), face_indices (n,)), deterministic
    for a given seed.
    """
    if mesh.n_faces == 0:
        raise MeshError("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    fi = rng.choice(mesh.n_faces, size=n, p=areas / areas.sum())
    r1 = rng.random(n)
    r2 = rng.random(n)
    su = np.sqrt(r1)
    b0 = 1.0 - su
    b1 = r2 * su
    v0 = mesh.vertices[mesh.faces[fi, 0]]
    v1 = mesh.vertices[mesh.faces[fi, 1]]
    v2 = mesh.vertices[mesh.faces[fi, 2]]
    pts = b0[:, None] * v0 + b1[:, None] * v1 + (1 - b0 - b1)[:, None] * v2
    normals = mesh.face_normals()[fi]
    return pts, normals, fi


# ---------------------------------------------------------------------------
# Ray-triangle intersection (Moller-Trumbore, float64, inclusive edges).
# ---------------------------------------------------------------------------

def _intersect_faces(origin, direction, vertices, faces, t_min=T_MIN, t_max=np.inf):
    """Intersect one ray against a face subset; returns (t array, valid mask)."""
    v0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - v0
    e2 = vertices[faces[:, 2]] - v0
    pvec = np.cross(direction[None, :], e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin[None, :] - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    ok &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > t_min) & (t <= t_max)
    return t, ok


class BvhIndex:
    """Median-split BVH over a mesh; immutable after construction."""

    LEAF_SIZE = 4

    def __init__(self, mesh: TriangleMesh):
        if mesh.n_faces == 0:
            raise MeshError("cannot build a BVH over an empty mesh")
        self.mesh = mesh
        v = mesh.vertices
        f = mesh.faces
        tri = v[f]  # (F,3,3)
        self._tri_lo = tri.min(axis=1)
        self._tri_hi = tri.max(axis=1)
        cent = tri.mean(axis=1)

        # Flat node arrays: bounds, child pointers (-1 for leaf), face ranges.
        lo, hi, left, right, start, count = [], [], [], [], [], []
        order = np.arange(mesh.n_faces)

        def build(idx):
            node = len(lo)
            lo.append(self._tri_lo[idx].min(axis=0))
            hi.append(self._tri_hi[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(-1)
            count.append(0)
            if len(idx) <= self.LEAF_SIZE:
                start[node] = len(self._leaf_faces)
                count[node] = len(idx)
                self._leaf_faces.extend(idx.tolist())
                return node
            axis = int(np.argmax(hi[node] - lo[node]))
            mid = len(idx) // 2
            part = idx[np.argsort(cent[idx, axis], kind="stable")]
            left[node] = build(part[:mid])
            right[node] = build(part[mid:])
            return node

        self._leaf_faces = []
        import sys
        old = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old, 10000))
        try:
            build(order)
        finally:
            sys.setrecursionlimit(old)
        self._lo = np.array(lo)
        self._hi = np.array(hi)
        self._left = np.array(left)
        self._right = np.array(right)
        self._start = np.array(start)
        self._count = np.array(count)
        self._leaf_faces = np.array(self._leaf_faces, dtype=np.int64)

    def _slab(self, node, origin, inv_dir, t_best):
        t0 = (self._lo[node] - origin) * inv_dir
        t1 = (self._hi[node] - origin) * inv_dir
        near = np.minimum(t0, t1).max()
        far = np.maximum(t0, t1).min()
        return near <= far and far >= T_MIN and near <= t_best

    def closest_hit(self, ray: Ray, t_max: float = np.inf):
        """First intersection with t in (1e-6, t_max], ties to lowest face index."""
        origin, direction = ray.origin, ray.direction
        with np.errstate(divide="ignore"):
            inv_dir = 1.0 / direction
        best_t = t_max
        best_face = -1
        stack = [0]
        while stack:
            node = stack.pop()
            if not self._slab(node, origin, inv_dir, best_t):
                continue
            if self._left[node] < 0:
                s, c = self._start[node], self._count[node]
                fids = self._leaf_faces[s:s + c]
                t, ok = _intersect_faces(origin, direction,
                                         self.mesh.vertices, self.mesh.faces[fids],
                                         t_max=best_t)
                for ti, oki, fid in zip(t, ok, fids):
                    if oki and (ti < best_t or (ti == best_t and fid < best_face)):
                        best_t = ti
                        best_face = int(fid)
            else:
                stack.append(int(self._right[node]))
                stack.append(int(self._left[node]))
        if best_face < 0:
            return None
        point = origin + best_t * direction
        normal = self.mesh.face_normals()[best_face]
        if normal @ direction > 0:
            normal = -normal
        return RayHit(t=float(best_t), face_index=best_face, point=point, normal=normal)

    def closest_hit_many(self, origins, directions, t_max=np.inf, chunk=4096):
        """Vectorized first-hit for a batch of rays.

        Exhaustive over faces per chunk; identical results to closest_hit
        (same intersection arithmetic, ties to lowest face index).
        Returns (t (N,), face (N,), valid (N,)). t is inf where invalid.
        """
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        n = len(origins)
        v = self.mesh.vertices
        f = self.mesh.faces
        v0 = v[f[:, 0]]
        e1 = v[f[:, 1]] - v0
        e2 = v[f[:, 2]] - v0
        out_t = np.full(n, np.inf)
        out_face = np.full(n, -1, dtype=np.int64)
        for s in range(0, n, chunk):
            o = origins[s:s + chunk]          # (R,3)
            d = directions[s:s + chunk]
            pvec = np.cross(d[:, None, :], e2[None, :, :])     # (R,F,3)
            det = np.einsum("fj,rfj->rf", e1, pvec)
            ok = np.abs(det) > 1e-14
            inv = np.where(ok, 1.0, 0.0) / np.where(ok, det, 1.0)
            tvec = o[:, None, :] - v0[None, :, :]
            u = np.einsum("rfj,rfj->rf", tvec, pvec) * inv
            qvec = np.cross(tvec, e1[None, :, :])
            vv = np.einsum("rfj,rj->rf", qvec, d) * inv
            t = np.einsum("fj,rfj->rf", e2, qvec) * inv
            ok &= (u >= 0) & (vv >= 0) & (u + vv <= 1) & (t > T_MIN)
            if np.isscalar(t_max) or np.ndim(t_max) == 0:
                ok &= t <= t_max
            else:
                ok &= t <= np.asarray(t_max)[s:s + chunk, None]
            t = np.where(ok, t, np.inf)
            fi = np.argmin(t, axis=1)   # first minimum = lowest face on ties
            tb = t[np.arange(len(o)), fi]
            hit = np.isfinite(tb)
            out_t[s:s + chunk] = tb
            out_face[s:s + chunk] = np.where(hit, fi, -1)
        return out_t, out_face, np.isfinite(out_t)


def build_bvh(mesh: TriangleMesh) -> BvhIndex:
    return BvhIndex(mesh)


def brute_force_hit(mesh: TriangleMesh, ray: Ray, t_max=np.inf):
    """Exhaustive per-face first hit; the BVH oracle."""
    t, ok = _intersect_faces(ray.origin, ray.direction, mesh.vertices, mesh.faces,
                             t_max=t_max)
    t = np.where(ok, t, np.inf)
    if not np.isfinite(t).any():
        return None
    fi = int(np.argmin(t))
    ti = float(t[fi])
    point = ray.origin + ti * ray.direction
    normal = mesh.face_normals()[fi]
    if normal @ ray.direction > 0:
        normal = -normal
    return RayHit(t=ti, face_index=fi, point=point, normal=normal)


# ---------------------------------------------------------------------------
# Mesh I/O: ASCII OBJ (read) and binary-LE PLY (read/write).
# ---------------------------------------------------------------------------

def load_obj(path) -> TriangleMesh:
    verts = []
    faces = []
    with open(path) as f:
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):   # fan triangulation
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


def load_mesh_ply(path) -> TriangleMesh:
    data = read_ply(path)
    v = data["vertex"]
    verts = np.stack([v.data["x"], v.data["y"], v.data["z"]], axis=1).astype(np.float64)
    rows = data["face"].data["vertex_indices"]
    faces = []
    for row in rows:
        for k in range(1, len(row) - 1):
            faces.append([row[0], row[k], row[k + 1]])
    return TriangleMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_mesh_ply(path, mesh: TriangleMesh, vertex_colors=None):
    vprops = {
        "x": mesh.vertices[:, 0].astype(np.float32),
        "y": mesh.vertices[:, 1].astype(np.float32),
        "z": mesh.vertices[:, 2].astype(np.float32),
    }
    if vertex_colors is not None:
        c = np.clip(np.asarray(vertex_colors), 0, 1)
        for i, name in enumerate(("red", "green", "blue")):
            vprops[name] = (c[:, i] * 255 + 0.5).astype(np.uint8)
    write_ply(path, [
        ("vertex", vprops),
        ("face", {"vertex_indices": [f for f in mesh.faces]}),
    ])


def load_mesh(path) -> TriangleMesh:
    p = str(path)
    if p.endswith(".obj"):
        return load_obj(p)
    return load_mesh_ply(p)
