"""Image and geometry evaluation: PSNR, SSIM, Chamfer, M3C2, completeness,
voxel occupancy completeness, and report assembly."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import TriangleMesh, sample_surface

PSNR_CAP = 99.0


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_CAP)


def _to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img


def _gauss_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window_size=11, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """Mean local SSIM on grayscale, 'valid' windows only."""
    x = _to_gray(a)
    y = _to_gray(b)
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    if min(x.shape) < window_size:
        raise ValueError(f"image smaller than the {window_size}px window")
    w = _gauss_window(window_size, sigma)

    def filt(img):
        full = ndimage.correlate(img, w, mode="constant")
        r = window_size // 2
        return full[r:img.shape[0] - r, r:img.shape[1] - r]

    c1 = k1 * k1
    c2 = k2 * k2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def _as_points(cloud):
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("point cloud must be (N,3)")
    if not np.isfinite(pts).all():
        raise ValueError("point cloud has non-finite coordinates")
    return pts


def chamfer(a, b) -> float:
    """Mean bidirectional nearest-neighbor Euclidean distance (not squared)."""
    a = _as_points(a)
    b = _as_points(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer requires two nonempty clouds")
    d_ab, _ = cKDTree(b).query(a, workers=-1)
    d_ba, _ = cKDTree(a).query(b, workers=-1)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def m3c2(reference, compared, normal_scale=0.25, projection_scale=0.25,
         max_depth=None, core_count=5000, seed=0, min_cylinder_points=5):
    """Orientation-aware cloud-to-cloud distance at seeded core points.

    Normals come from PCA over reference neighbors within normal_scale/2;
    distances are differences of mean projections inside a cylinder of
    radius projection_scale/2 and half-length max_depth (default 5*d/2).
    Returns (mean_abs, signed_mean, valid_fraction).
    """
    ref = _as_points(reference)
    cmp_ = _as_points(compared)
    if len(ref) < 10:
        raise ValueError("m3c2 needs at least 10 reference points")
    if max_depth is None:
        max_depth = 5 * projection_scale / 2
    rng = np.random.default_rng(seed)
    n_core = min(core_count, len(ref))
    cores = ref[rng.choice(len(ref), size=n_core, replace=False)]

    ref_tree = cKDTree(ref)
    cmp_tree = cKDTree(cmp_)
    cmp_centroid = cmp_.mean(axis=0)
    dists = []
    for c in cores:
        nb = ref[ref_tree.query_ball_point(c, normal_scale / 2)]
        if len(nb) < 3:
            continue
        cov = np.cov((nb - nb.mean(axis=0)).T)
        evals, evecs = np.linalg.eigh(cov)
        n = evecs[:, 0]
        if np.dot(n, cmp_centroid - c) < 0:
            n = -n
        r = projection_scale / 2
        search = np.hypot(r, max_depth)
        proj = []
        for pts, tree in ((ref, ref_tree), (cmp_, cmp_tree)):
            cand = pts[tree.query_ball_point(c, search)]
            rel = cand - c
            along = rel @ n
            radial2 = np.einsum("ij,ij->i", rel, rel) - along * along
            sel = along[(radial2 <= r * r) & (np.abs(along) <= max_depth)]
            proj.append(sel)
        if len(proj[0]) < min_cylinder_points or len(proj[1]) < min_cylinder_points:
            continue
        dists.append(proj[1].mean() - proj[0].mean())
    if not dists:
        raise ValueError("m3c2 found no valid core points")
    dists = np.array(dists)
    return (float(np.abs(dists).mean()), float(dists.mean()),
            len(dists) / n_core)


def completeness(reference, recon, thresholds):
    """Fraction of reference points with an NN in recon closer than t."""
    ref = _as_points(reference)
    if len(ref) == 0:
        raise ValueError("empty reference cloud")
    rec = _as_points(recon)
    if len(rec) == 0:
        return {float(t): 0.0 for t in thresholds}
    d, _ = cKDTree(rec).query(ref, workers=-1)
    return {float(t): float((d < t).mean()) for t in thresholds}


def voc(reference, recon, voxel_size=0.05, min_points=1) -> float:
    """Voxel occupancy completeness: intersection over reference occupancy."""
    ref = _as_points(reference)
    if len(ref) == 0:
        raise ValueError("empty reference cloud")
    rec = _as_points(recon)
    anchor = ref.min(axis=0)

    def occupied(pts):
        if len(pts) == 0:
            return set()
        idx = np.floor((pts - anchor) / voxel_size).astype(np.int64)
        uniq, counts = np.unique(idx, axis=0, return_counts=True)
        return {tuple(v) for v, c in zip(uniq, counts) if c >= min_points}

    occ_ref = occupied(ref)
    if not occ_ref:
        raise ValueError("reference occupies no voxels at this threshold")
    occ_rec = occupied(rec)
    return len(occ_ref & occ_rec) / len(occ_ref)


@dataclass
class MetricReport:
    psnr: float | None = None
    ssim: float | None = None
    cd: float | None = None
    m3c2_mean_abs: float | None = None
    m3c2_signed_mean: float | None = None
    m3c2_valid_fraction: float | None = None
    completeness_at: dict = field(default_factory=dict)
    voc: float | None = None

    def to_dict(self):
        return {"psnr": self.psnr, "ssim": self.ssim, "cd": self.cd,
                "m3c2_mean_abs": self.m3c2_mean_abs,
                "m3c2_signed_mean": self.m3c2_signed_mean,
                "m3c2_valid_fraction": self.m3c2_valid_fraction,
                "completeness_at": {str(k): v for k, v in
                                    self.completeness_at.items()},
                "voc": self.voc}

    @staticmethod
    def from_dict(d):
        r = MetricReport(**{k: d.get(k) for k in
                            ("psnr", "ssim", "cd", "m3c2_mean_abs",
                             "m3c2_signed_mean", "m3c2_valid_fraction", "voc")})
        r.completeness_at = {float(k): v for k, v in
                             d.get("completeness_at", {}).items()}
        return r

    def save_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def load_json(path):
        with open(path) as f:
            return MetricReport.from_dict(json.load(f))

    def append_csv(self, path, label=""):
        comp_keys = sorted(self.completeness_at)
        cols = (["label", "psnr", "ssim", "cd", "m3c2_mean_abs", "voc"]
                + [f"comp@{t:g}" for t in comp_keys])
        row = ([label, self.psnr, self.ssim, self.cd, self.m3c2_mean_abs,
                self.voc] + [self.completeness_at[t] for t in comp_keys])
        write_header = not os.path.exists(path)
        with open(path, "a", newline="") as f:
            wcsv = csv.writer(f)
            if write_header:
                wcsv.writerow(cols)
            wcsv.writerow(row)


def evaluate(recon, reference_cloud, rendered_images=None, target_images=None,
             thresholds=(0.1, 0.2, 0.5), voc_voxel=0.05,
             m3c2_scale=0.25, n_samples=50_000, seed=0) -> MetricReport:
    """Full report. recon is a TriangleMesh (sampled to n_samples points)
    or an (N,3) cloud; image metrics are averaged over paired lists."""
    if isinstance(recon, TriangleMesh):
        recon_pts = sample_surface(recon, n_samples, seed=seed)[0] \
            if len(recon.faces) else np.zeros((0, 3))
    else:
        recon_pts = _as_points(recon)
    ref = _as_points(reference_cloud)
    report = MetricReport()
    if len(recon_pts):
        report.cd = chamfer(recon_pts, ref)
        ma, sm, vf = m3c2(ref, recon_pts, normal_scale=m3c2_scale,
                          projection_scale=m3c2_scale, seed=seed)
        report.m3c2_mean_abs = ma
        report.m3c2_signed_mean = sm
        report.m3c2_valid_fraction = vf
        report.voc = voc(ref, recon_pts, voxel_size=voc_voxel)
    report.completeness_at = completeness(ref, recon_pts, thresholds)
    if rendered_images:
        ps = [psnr(r, t) for r, t in zip(rendered_images, target_images)]
        ss = [ssim(r, t) for r, t in zip(rendered_images, target_images)]
        report.psnr = float(np.mean(ps))
        report.ssim = float(np.mean(ss))
    return report
