"""Training losses and the two-phase loss-weight schedule.

The photometric term is 0.8*L1 + 0.2*(1 - SSIM) with an 11-tap Gaussian
window (sigma 1.5, K1 0.01, K2 0.03, dynamic range 1). Local statistics use
border-renormalized windows so constant images have exact closed-form SSIM
everywhere. Depth-to-normal conversion and the prior depth scale factor are
treated as constants of the iteration (no gradient through them).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

from .camera import CameraView, camera_center, pixel_ray_grid


@dataclass
class LossWeights:
    lambda_d: float = 0.0
    lambda_n: float = 0.0
    lambda_db: float = 0.0
    lambda_nb: float = 0.0

    def __post_init__(self):
        for name in ("lambda_d", "lambda_n", "lambda_db", "lambda_nb"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class WeightRamp:
    start_value: float
    end_value: float
    activation_iter: int = 0


@dataclass
class Schedule:
    total_iters: int = 2000
    phase1_end: int | None = None   # default: half the run
    ramp_db: WeightRamp | None = None
    ramp_nb: WeightRamp | None = None
    ramp_d: WeightRamp | None = None
    ramp_n: WeightRamp | None = None

    def __post_init__(self):
        if self.phase1_end is None:
            self.phase1_end = self.total_iters // 2
        if not (0 < self.phase1_end <= self.total_iters):
            raise ValueError("phase1_end must be in (0, total_iters]")
        if self.ramp_db is None:
            self.ramp_db = WeightRamp(1.0, 0.1, 0)
        if self.ramp_nb is None:
            self.ramp_nb = WeightRamp(0.05, 0.005, 0)
        if self.ramp_d is None:
            self.ramp_d = WeightRamp(100.0, 100.0, self.phase1_end)
        if self.ramp_n is None:
            self.ramp_n = WeightRamp(0.05, 0.05, self.phase1_end)


def weights_at(schedule: Schedule, iteration: int) -> LossWeights:
    """Phase 1: prior weights at start values, 2DGS regularizers off.
    Phase 2: prior weights decay linearly to their end values; the
    regularizers step on at phase1_end."""
    if not 0 <= iteration <= schedule.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {schedule.total_iters}]")

    def value(ramp: WeightRamp):
        if iteration < ramp.activation_iter:
            return 0.0
        if iteration < schedule.phase1_end:
            return ramp.start_value
        span = schedule.total_iters - schedule.phase1_end
        if span == 0:
            return ramp.end_value
        f = (iteration - schedule.phase1_end) / span
        return ramp.start_value + (ramp.end_value - ramp.start_value) * f

    return LossWeights(lambda_d=value(schedule.ramp_d),
                       lambda_n=value(schedule.ramp_n),
                       lambda_db=value(schedule.ramp_db),
                       lambda_nb=value(schedule.ramp_nb))


# ---------------------------------------------------------------------------
# Photometric loss
# ---------------------------------------------------------------------------

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_SSIM_WIN = 11
_SSIM_SIGMA = 1.5


def _gauss_kernel():
    r = _SSIM_WIN // 2
    x = np.arange(-r, r + 1)
    k1 = np.exp(-x * x / (2 * _SSIM_SIGMA ** 2))
    k = np.outer(k1, k1)
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _local_mean(x, wmass):
    return correlate(x, _KERNEL, mode="constant", cval=0.0) / wmass


def _local_mean_adjoint(y, wmass):
    # adjoint of x -> correlate(x,k)/W with a symmetric kernel
    return correlate(y / wmass, _KERNEL, mode="constant", cval=0.0)


def _ssim_and_grad(a, b, valid):
    """Mean SSIM over valid pixels (per channel) and d(meanSSIM)/da.

    a, b: HxWx3 in [0,1] (already masked by the caller); valid: HxW bool.
    """
    h, w = valid.shape
    wmass = correlate(np.ones((h, w)), _KERNEL, mode="constant", cval=0.0)
    nvalid = valid.sum() * a.shape[2]
    y = np.where(valid, 1.0, 0.0) / nvalid
    total = 0.0
    grad = np.zeros_like(a)
    for ch in range(a.shape[2]):
        ac, bc = a[:, :, ch], b[:, :, ch]
        mu_a = _local_mean(ac, wmass)
        mu_b = _local_mean(bc, wmass)
        e_aa = _local_mean(ac * ac, wmass)
        e_ab = _local_mean(ac * bc, wmass)
        e_bb = _local_mean(bc * bc, wmass)
        var_a = e_aa - mu_a ** 2
        var_b = e_bb - mu_b ** 2
        cov = e_ab - mu_a * mu_b
        a1 = 2 * mu_a * mu_b + _SSIM_C1
        a2 = 2 * cov + _SSIM_C2
        b1 = mu_a ** 2 + mu_b ** 2 + _SSIM_C1
        b2 = var_a + var_b + _SSIM_C2
        s = (a1 * a2) / (b1 * b2)
        total += float(np.sum(y * s))
        ds_da1 = a2 / (b1 * b2)
        ds_da2 = a1 / (b1 * b2)
        ds_db1 = -s / b1
        ds_db2 = -s / b2
        g_mu = y * (ds_da1 * 2 * mu_b + ds_db1 * 2 * mu_a
                    + ds_db2 * (-2 * mu_a) + ds_da2 * (-2 * mu_b))
        g_eaa = y * ds_db2
        g_eab = y * ds_da2 * 2
        grad[:, :, ch] = (_local_mean_adjoint(g_mu, wmass)
                          + _local_mean_adjoint(g_eaa, wmass) * 2 * ac
                          + _local_mean_adjoint(g_eab, wmass) * bc)
    return total, grad


def photometric_loss(rendered, target, valid):
    """0.8*L1 + 0.2*(1-SSIM) over valid pixels; returns (loss, adjoint map)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if rendered.shape != target.shape or valid.shape != rendered.shape[:2]:
        raise ValueError("dimension mismatch")
    if not valid.any():
        raise ValueError("photometric loss needs a nonempty valid mask")
    m3 = valid[:, :, None]
    n = valid.sum() * 3
    diff = np.where(m3, rendered - target, 0.0)
    l1 = np.abs(diff).sum() / n
    g_l1 = np.sign(diff) / n
    rm = np.where(m3, rendered, 0.0)
    tm = np.where(m3, target, 0.0)
    ssim_val, g_ssim = _ssim_and_grad(rm, tm, valid)
    g_ssim = np.where(m3, g_ssim, 0.0)
    loss = 0.8 * l1 + 0.2 * (1.0 - ssim_val)
    grad = 0.8 * g_l1 - 0.2 * g_ssim
    return loss, grad


# ---------------------------------------------------------------------------
# Fragment regularizers (depth distortion, normal consistency)
# ---------------------------------------------------------------------------

def _segment_prefix(values, pix):
    """Exclusive per-segment prefix sums for fragments sorted by pixel."""
    cs = np.concatenate([[0.0], np.cumsum(values)])
    seg_first = np.searchsorted(pix, pix, side="left")
    return cs[np.arange(len(values))] - cs[seg_first]


def _segment_suffix(values, pix):
    cs = np.concatenate([[0.0], np.cumsum(values)])
    seg_last = np.searchsorted(pix, pix, side="right")
    return cs[seg_last] - cs[np.arange(len(values)) + 1]


def depth_distortion_loss(fragments, ray_mask=None):
    """Per-ray sum over pairs omega_i omega_j |z_i - z_j|, averaged over rays
    with at least one fragment. O(n) single pass over depth-sorted fragments.

    Returns (loss, g_omega, g_z). ray_mask (flat, optional) restricts which
    pixels count as rays.
    """
    z, om, pix = fragments.z, fragments.omega, fragments.pix
    if len(z) == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    if ray_mask is not None:
        keepf = ray_mask[pix]
    else:
        keepf = np.ones(len(pix), dtype=bool)
    zs, oms, pixs = z[keepf], om[keepf], pix[keepf]
    nrays = len(np.unique(pixs))
    if nrays == 0:
        return 0.0, np.zeros(len(z)), np.zeros(len(z))
    w_pre = _segment_prefix(oms, pixs)
    s_pre = _segment_prefix(oms * zs, pixs)
    w_post = _segment_suffix(oms, pixs)
    s_post = _segment_suffix(oms * zs, pixs)
    contrib = oms * (zs * w_pre - s_pre)
    loss = contrib.sum() / nrays
    g_om_s = ((zs * w_pre - s_pre) + (s_post - zs * w_post)) / nrays
    g_z_s = oms * (w_pre - w_post) / nrays
    g_om = np.zeros(len(z))
    g_z = np.zeros(len(z))
    g_om[keepf] = g_om_s
    g_z[keepf] = g_z_s
    return float(loss), g_om, g_z


def depth_to_camera_normals(mean_depth, view: CameraView):
    """Normals from the rendered depth gradient: back-project to camera-space
    points, cross the central-difference tangents (one-sided at borders),
    normalize, and orient toward the camera. Invalid (non-positive-depth
    neighborhoods) pixels get a zero normal."""
    h, w = mean_depth.shape
    xs = (np.arange(w) + 0.5 - view.cx) / view.fx
    ys = (np.arange(h) + 0.5 - view.cy) / view.fy
    gx, gy = np.meshgrid(xs, ys)
    pts = mean_depth[:, :, None] * np.stack([gx, gy, np.ones_like(gx)], axis=-1)

    def diff(p, axis):
        d = np.empty_like(p)
        if axis == 1:
            d[:, 1:-1] = (p[:, 2:] - p[:, :-2]) / 2.0
            d[:, 0] = p[:, 1] - p[:, 0]
            d[:, -1] = p[:, -1] - p[:, -2]
        else:
            d[1:-1] = (p[2:] - p[:-2]) / 2.0
            d[0] = p[1] - p[0]
            d[-1] = p[-1] - p[-2]
        return d

    dpdx = diff(pts, 1)
    dpdy = diff(pts, 0)
    n = np.cross(dpdx, dpdy)
    ln = np.linalg.norm(n, axis=-1)

    def shifted_ok(depth, axis, step):
        s = np.roll(depth, -step, axis=axis)
        if axis == 1:
            if step > 0:
                s[:, -step:] = depth[:, -step:]
            else:
                s[:, :-step] = depth[:, :-step]
        else:
            if step > 0:
                s[-step:] = depth[-step:]
            else:
                s[:-step] = depth[:-step]
        return s > 0

    ok = (mean_depth > 0) & (ln > 1e-12)
    for axis in (0, 1):
        ok &= shifted_ok(mean_depth, axis, 1) & shifted_ok(mean_depth, axis, -1)
    # orient toward the camera: the scene is at positive z, so flip to -z side
    nrm = np.where(ok[:, :, None], -n / np.where(ok, ln, 1.0)[:, :, None], 0.0)
    return nrm, ok


def normal_consistency_loss(fragments, mean_depth, view: CameraView,
                            splat_normals_world, ray_mask=None, target=None):
    """Agreement between per-fragment splat normals and normals derived from
    the rendered depth (the latter treated as a constant target).

    splat_normals_world: (M,3) flipped world normals per fragment.
    target: optional precomputed (nmap, ok) pair overriding the
    depth-derived target, useful when the target must stay fixed.
    Returns (loss, g_omega, g_normal_world).
    """
    if target is not None:
        nmap, ok = target
    else:
        nmap, ok = depth_to_camera_normals(mean_depth, view)
    flat_ok = ok.reshape(-1)
    if ray_mask is not None:
        flat_ok = flat_ok & ray_mask
    pix, om = fragments.pix, fragments.omega
    m = len(pix)
    if m == 0:
        return 0.0, np.zeros(0), np.zeros((0, 3))
    keep = flat_ok[pix]
    r = view.rotation
    n_cam = splat_normals_world @ r.T
    target = nmap.reshape(-1, 3)[pix]
    dots = np.einsum("ij,ij->i", n_cam, target)
    nrays = len(np.unique(pix[keep])) if keep.any() else 0
    if nrays == 0:
        return 0.0, np.zeros(m), np.zeros((m, 3))
    per = np.where(keep, om * (1.0 - dots), 0.0)
    loss = per.sum() / nrays
    g_om = np.where(keep, (1.0 - dots) / nrays, 0.0)
    g_ncam = np.where(keep[:, None], -om[:, None] * target / nrays, 0.0)
    g_nworld = g_ncam @ r
    return float(loss), g_om, g_nworld


# ---------------------------------------------------------------------------
# Prior-guided losses
# ---------------------------------------------------------------------------

def prior_depth_scale(rendered_depth, prior_depth, mask):
    """Median ratio prior/rendered over masked pixels with rendered depth;
    1.0 when undefined. Treated as a constant (no gradient)."""
    sel = mask & (rendered_depth > 1e-6)
    if not sel.any():
        return 1.0
    return float(np.median(prior_depth[sel] / rendered_depth[sel]))


def prior_depth_loss(rendered_depth, prior, alpha_scale=None):
    """Scale-adjusted L1 between rendered and prior depth over the prior mask.

    Returns (loss, adjoint on the rendered depth map, alpha_scale, empty_flag).
    """
    mask = prior.mask.astype(bool)
    if not mask.any():
        return 0.0, np.zeros_like(rendered_depth), 1.0, True
    if alpha_scale is None:
        alpha_scale = prior_depth_scale(rendered_depth, prior.depth, mask)
    n = mask.sum()
    resid = np.where(mask, alpha_scale * rendered_depth - prior.depth, 0.0)
    loss = np.abs(resid).sum() / n
    grad = np.where(mask, alpha_scale * np.sign(resid) / n, 0.0)
    return float(loss), grad, alpha_scale, False


def prior_normal_loss(rendered_normal, prior):
    """Mean (1 - <N_hat, N_prior>) over the prior mask; unrendered masked
    pixels contribute 1. Returns (loss, adjoint on the normal map, empty_flag)."""
    mask = prior.mask.astype(bool)
    if not mask.any():
        return 0.0, np.zeros_like(rendered_normal), True
    n = mask.sum()
    nhat_len = np.linalg.norm(rendered_normal, axis=-1)
    rendered_ok = nhat_len > 1e-6
    sel = mask & rendered_ok
    dots = np.einsum("ijk,ijk->ij", rendered_normal, prior.normal)
    per = np.where(sel, 1.0 - dots, 0.0)
    per = per + np.where(mask & ~rendered_ok, 1.0, 0.0)
    loss = per.sum() / n
    grad = np.where(sel[:, :, None], -prior.normal / n, 0.0)
    return float(loss), grad, False


def total_loss(components: dict, weights: LossWeights) -> float:
    """L_c + lambda_d L_d + lambda_n L_n + lambda_db L_db + lambda_nb L_nb."""
    for name, val in components.items():
        if not np.isfinite(val):
            raise FloatingPointError(f"loss component {name!r} is not finite: {val}")
    return (components.get("l_c", 0.0)
            + weights.lambda_d * components.get("l_d", 0.0)
            + weights.lambda_n * components.get("l_n", 0.0)
            + weights.lambda_db * components.get("l_db", 0.0)
            + weights.lambda_nb * components.get("l_nb", 0.0))
