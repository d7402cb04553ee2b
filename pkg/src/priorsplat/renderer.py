"""Differentiable forward rendering of a splat set via explicit ray-splat
intersection and front-to-back alpha compositing, plus the matching
analytic backward pass.

Semantics per pixel: gather splats whose opacity-weighted Gaussian value
alpha_i = o_i * G_i is at least ALPHA_CUTOFF, sort by camera depth (ties by
center lexicographic so the result is invariant to splat array order),
composite front to back over a black background. Candidate generation uses
conservative projected bounding boxes, so the result equals an exhaustive
per-pixel compositor exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraView, camera_center, pixel_ray_grid, to_camera
from .splats import SplatSet, rotmat_jacobian_wrt_quat

ALPHA_CUTOFF = 1.0 / 255.0
T_MIN = 1e-6
PLANE_EPS = 1e-9
NORMAL_ALPHA_MIN = 1e-3
FOOTPRINT_CLAMP_PX = 0.7


@dataclass
class Fragments:
    """Per-fragment arrays, sorted by (pixel, z, center lexicographic).

    pix indexes row-major into the HxW image. seg_start[p]..seg_end[p] is
    the fragment range of pixel p (seg arrays are dense over all pixels).
    """
    pix: np.ndarray
    splat: np.ndarray
    t: np.ndarray        # ray parameter of the plane hit
    z: np.ndarray        # camera-frame depth of the hit
    u: np.ndarray        # scale-normalized splat-local coordinates
    v: np.ndarray
    gauss: np.ndarray    # G = exp(-(u^2+v^2)/2)
    alpha: np.ndarray
    trans: np.ndarray    # transmittance before this fragment
    omega: np.ndarray    # alpha * trans
    flip: np.ndarray     # +-1: sign making the splat normal oppose the ray
    kappa: np.ndarray    # dz/dt for this fragment's pixel ray
    denom: np.ndarray    # n . ray_dir
    s_eff: np.ndarray    # (M,2) effective (possibly clamped) scales
    clamped: np.ndarray  # (M,2) bool, True where the footprint clamp is active
    seg_start: np.ndarray
    seg_end: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray        # HxWx3 linear RGB over black
    mean_depth: np.ndarray   # HxW omega-weighted mean camera z
    median_depth: np.ndarray  # HxW z at the 0.5 accumulated-opacity crossing
    normal: np.ndarray       # HxWx3 unit world normals (0 where alpha <= 1e-3)
    alpha: np.ndarray        # HxW accumulated opacity
    fragments: Fragments | None = None


def gaussian_weight(u, v):
    return np.exp(-(np.square(u) + np.square(v)) / 2.0)


def ray_splat_intersect(ray, splat_center, splat_quat, splat_log_scales):
    """Single ray vs single splat; returns (u, v, z_along_ray) or None.

    z here is the ray parameter t (the caller owns the camera conversion).
    """
    from .splats import quat_to_rotmats

    r = quat_to_rotmats(np.asarray(splat_quat).reshape(1, 4))[0]
    tu, tv, n = r[:, 0], r[:, 1], r[:, 2]
    d = ray.direction
    denom = n @ d
    if abs(denom) < PLANE_EPS:
        return None
    center = np.asarray(splat_center, dtype=np.float64)
    t = (n @ (center - ray.origin)) / denom
    if t <= T_MIN:
        return None
    local = ray.origin + t * d - center
    s = np.exp(np.asarray(splat_log_scales, dtype=np.float64))
    return (local @ tu) / s[0], (local @ tv) / s[1], float(t)


def _candidate_pairs(splats: SplatSet, view: CameraView):
    """Conservative (splat, pixel) candidate pairs via projected bounds."""
    n = len(splats)
    if n == 0:
        return (np.zeros(0, dtype=np.int64),) * 3 + (np.zeros((0, 2)), np.zeros((0, 2), dtype=bool))
    cam = to_camera(view, splats.centers)
    o = splats.opacities()
    s = splats.scales()
    # opacity below the cutoff can never produce a visible fragment
    alive = o > ALPHA_CUTOFF
    # footprint clamp: effective scales keep the projected footprint >= 0.7 px
    z = np.maximum(cam[:, 2], 1e-6)
    s_min = np.stack([FOOTPRINT_CLAMP_PX * z / view.fx,
                      FOOTPRINT_CLAMP_PX * z / view.fy], axis=1)
    clamped = s < s_min
    s_eff = np.maximum(s, s_min)
    # support radius where alpha could still reach the cutoff
    cut = np.sqrt(2.0 * np.log(np.maximum(o / ALPHA_CUTOFF, 1.0 + 1e-12)))
    r_world = cut * s_eff.max(axis=1)
    alive &= cam[:, 2] + r_world > T_MIN
    zc = cam[:, 2]
    straddle = alive & (zc - r_world <= 1e-3)
    zmin = np.maximum(zc - r_world, 1e-3)
    with np.errstate(divide="ignore", invalid="ignore"):
        # perspective stretches the projected support by sec^2 of the
        # off-axis angle, per image direction
        un = cam[:, 0] / np.maximum(zc, 1e-12)
        vn = cam[:, 1] / np.maximum(zc, 1e-12)
        rpx = (max(view.fx, view.fy) * r_world / zmin
               * (1.0 + un * un + vn * vn) + 1.0)
        u = view.fx * un + view.cx
        v = view.fy * vn + view.cy
    safe = alive & ~straddle
    rpx = np.where(safe, rpx, 0.0)
    u = np.where(safe, u, 0.0)
    v = np.where(safe, v, 0.0)
    x0 = np.clip(np.floor(u - rpx), 0, view.width).astype(np.int64)
    x1 = np.clip(np.ceil(u + rpx) + 1, 0, view.width).astype(np.int64)
    y0 = np.clip(np.floor(v - rpx), 0, view.height).astype(np.int64)
    y1 = np.clip(np.ceil(v + rpx) + 1, 0, view.height).astype(np.int64)
    # anisotropic tightening: the support is a planar ellipse with semi-axes
    # cut*s_eff along the splat tangent axes; its camera-frame axis-aligned
    # box has half-extents e_k = cut*sqrt((s1*tu_k)^2 + (s2*tv_k)^2).  Under
    # perspective, u = fx*x/z + cx attains its extrema over that box at box
    # corners, so projecting the corners gives a conservative screen rect.
    rot = view.rotation
    tu_c = splats.frames()[:, :, 0] @ rot.T
    tv_c = splats.frames()[:, :, 1] @ rot.T
    e = cut[:, None] * np.sqrt(np.square(s_eff[:, 0, None] * tu_c)
                               + np.square(s_eff[:, 1, None] * tv_c))
    with np.errstate(divide="ignore", invalid="ignore"):
        zlo = np.maximum(zc - e[:, 2], 1e-3)
        zhi = np.maximum(zc + e[:, 2], 1e-3)
        xlo, xhi = cam[:, 0] - e[:, 0], cam[:, 0] + e[:, 0]
        ylo, yhi = cam[:, 1] - e[:, 1], cam[:, 1] + e[:, 1]
        umin = view.fx * np.minimum(xlo / zlo, xlo / zhi) + view.cx
        umax = view.fx * np.maximum(xhi / zlo, xhi / zhi) + view.cx
        vmin = view.fy * np.minimum(ylo / zlo, ylo / zhi) + view.cy
        vmax = view.fy * np.maximum(yhi / zlo, yhi / zhi) + view.cy
    # both rects are conservative supersets of the true support, so their
    # intersection is too (skip straddlers, which keep the full image)
    x0 = np.where(safe, np.maximum(x0, np.clip(np.floor(umin - 0.5), 0, view.width).astype(np.int64)), x0)
    x1 = np.where(safe, np.minimum(x1, np.clip(np.ceil(umax - 0.5) + 1, 0, view.width).astype(np.int64)), x1)
    y0 = np.where(safe, np.maximum(y0, np.clip(np.floor(vmin - 0.5), 0, view.height).astype(np.int64)), y0)
    y1 = np.where(safe, np.minimum(y1, np.clip(np.ceil(vmax - 0.5) + 1, 0, view.height).astype(np.int64)), y1)
    # splats straddling the near plane fall back to the full image
    x0[straddle], x1[straddle] = 0, view.width
    y0[straddle], y1[straddle] = 0, view.height
    wid = np.maximum(x1 - x0, 0)
    hei = np.maximum(y1 - y0, 0)
    counts = wid * hei
    counts[~alive] = 0
    total = int(counts.sum())
    splat_ids = np.repeat(np.arange(n), counts)
    # per-pair pixel coordinates: row-major offset within each splat's bbox
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    offset = np.arange(total) - np.repeat(start, counts)
    wrep = np.repeat(np.maximum(wid, 1), counts)
    px = np.repeat(x0, counts) + offset % wrep
    py = np.repeat(y0, counts) + offset // wrep
    # drop bbox corners outside the (conservative) support circle
    du = px + 0.5 - np.repeat(u, counts)
    dv = py + 0.5 - np.repeat(v, counts)
    rrep = np.repeat(rpx, counts)
    inside = (du * du + dv * dv <= rrep * rrep) | np.repeat(straddle, counts)
    return splat_ids[inside], px[inside], py[inside], s_eff, clamped


def render(splats: SplatSet, view: CameraView, with_fragments: bool = False) -> RenderOutput:
    h, w = view.height, view.width
    npix = h * w
    dirs, z_per_t = pixel_ray_grid(view)
    dirs_flat = dirs.reshape(-1, 3)
    kappa_flat = z_per_t.reshape(-1)
    origin = camera_center(view)

    splat_ids, px, py, s_eff_all, clamped_all = _candidate_pairs(splats, view)
    out = RenderOutput(
        color=np.zeros((h, w, 3)), mean_depth=np.zeros((h, w)),
        median_depth=np.zeros((h, w)), normal=np.zeros((h, w, 3)),
        alpha=np.zeros((h, w)))
    if len(splat_ids) == 0:
        if with_fragments:
            out.fragments = _empty_fragments(npix)
        return out

    frames = splats.frames()
    centers = splats.centers
    opac = splats.opacities()
    colors = splats.colors()

    pix = py * w + px
    d = dirs_flat[pix]                      # (M,3)
    tu = frames[splat_ids, :, 0]
    tv = frames[splat_ids, :, 1]
    nn = frames[splat_ids, :, 2]
    p = centers[splat_ids]
    denom = np.einsum("ij,ij->i", nn, d)
    ok = np.abs(denom) >= PLANE_EPS
    denom_safe = np.where(ok, denom, 1.0)
    t = np.einsum("ij,ij->i", nn, p - origin[None, :]) / denom_safe
    ok &= t > T_MIN
    local = origin[None, :] + t[:, None] * d - p
    se = s_eff_all[splat_ids]
    u = np.einsum("ij,ij->i", local, tu) / se[:, 0]
    v = np.einsum("ij,ij->i", local, tv) / se[:, 1]
    g = gaussian_weight(u, v)
    alpha = opac[splat_ids] * g
    ok &= alpha >= ALPHA_CUTOFF
    if not ok.any():
        if with_fragments:
            out.fragments = _empty_fragments(npix)
        return out

    splat_ids, pix, t, u, v, g, alpha, denom = (
        a[ok] for a in (splat_ids, pix, t, u, v, g, alpha, denom))
    se = se[ok]
    cl = clamped_all[splat_ids]
    kappa = kappa_flat[pix]
    z = t * kappa

    # permutation-stable sort: pixel, depth, then center lexicographic
    c = centers[splat_ids]
    order = np.lexsort((c[:, 2], c[:, 1], c[:, 0], z, pix))
    splat_ids, pix, t, u, v, g, alpha, denom, kappa, z = (
        a[order] for a in (splat_ids, pix, t, u, v, g, alpha, denom, kappa, z))
    se = se[order]
    cl = cl[order]

    # segment bounds per pixel (dense over all pixels)
    seg_start = np.searchsorted(pix, np.arange(npix), side="left")
    seg_end = np.searchsorted(pix, np.arange(npix), side="right")

    # segmented transmittance: T_i = prod_{j<i in segment} (1 - alpha_j)
    lw = np.log1p(-alpha)
    cs = np.concatenate([[0.0], np.cumsum(lw)])
    trans = np.exp(cs[np.arange(len(alpha))] - cs[seg_start[pix]])
    omega = alpha * trans

    flip = np.where(denom > 0, -1.0, 1.0)
    nrm = frames[splat_ids, :, 2] * flip[:, None]

    acc_alpha = np.bincount(pix, weights=omega, minlength=npix)
    acc_color = np.stack([
        np.bincount(pix, weights=omega * colors[splat_ids, i], minlength=npix)
        for i in range(3)], axis=1)
    acc_zsum = np.bincount(pix, weights=omega * z, minlength=npix)
    acc_nsum = np.stack([
        np.bincount(pix, weights=omega * nrm[:, i], minlength=npix)
        for i in range(3)], axis=1)

    out.alpha = acc_alpha.reshape(h, w)
    out.color = acc_color.reshape(h, w, 3)
    with np.errstate(invalid="ignore", divide="ignore"):
        md = np.where(acc_alpha > 0, acc_zsum / np.where(acc_alpha > 0, acc_alpha, 1.0), 0.0)
    out.mean_depth = md.reshape(h, w)
    nlen = np.linalg.norm(acc_nsum, axis=1)
    valid_n = (acc_alpha > NORMAL_ALPHA_MIN) & (nlen > 1e-12)
    nmap = np.where(valid_n[:, None], acc_nsum / np.where(valid_n, nlen, 1.0)[:, None], 0.0)
    out.normal = nmap.reshape(h, w, 3)

    # median depth: z of the first fragment where accumulated opacity >= 0.5
    cum = np.cumsum(omega)
    cum_seg = cum - np.concatenate([[0.0], cum])[seg_start[pix]]
    crossed = cum_seg >= 0.5
    med = np.zeros(npix)
    if crossed.any():
        cpix = pix[crossed]
        cz = z[crossed]
        # fragments are depth-sorted, so the first crossing per pixel wins
        uniq, first_pos = np.unique(cpix, return_index=True)
        med[uniq] = cz[first_pos]
    out.median_depth = med.reshape(h, w)

    if with_fragments:
        out.fragments = Fragments(
            pix=pix, splat=splat_ids, t=t, z=z, u=u, v=v, gauss=g, alpha=alpha,
            trans=trans, omega=omega, flip=flip, kappa=kappa, denom=denom,
            s_eff=se, clamped=cl, seg_start=seg_start, seg_end=seg_end)
    return out


def _empty_fragments(npix):
    z0 = np.zeros(0)
    zi = np.zeros(0, dtype=np.int64)
    return Fragments(pix=zi, splat=zi.copy(), t=z0, z=z0.copy(), u=z0.copy(),
                     v=z0.copy(), gauss=z0.copy(), alpha=z0.copy(),
                     trans=z0.copy(), omega=z0.copy(), flip=z0.copy(),
                     kappa=z0.copy(), denom=z0.copy(), s_eff=np.zeros((0, 2)),
                     clamped=np.zeros((0, 2), dtype=bool),
                     seg_start=np.zeros(npix, dtype=np.int64),
                     seg_end=np.zeros(npix, dtype=np.int64))


def backward(splats: SplatSet, view: CameraView, output: RenderOutput,
             grad_color=None, grad_alpha=None, grad_mean_depth=None,
             grad_normal=None, grad_omega_frag=None, grad_z_frag=None,
             grad_normal_frag=None):
    """Accumulate dL/dtheta into the splat set's gradient buffers.

    Map adjoints are HxW(x3) arrays; fragment adjoints are per-fragment
    arrays aligned with output.fragments. grad_normal is the adjoint on the
    *normalized* normal map; grad_normal_frag on the flipped world normal of
    each fragment.
    """
    fr = output.fragments
    if fr is None:
        raise ValueError("backward requires a render with with_fragments=True")
    m = len(fr.pix)
    if m == 0:
        return
    h, w = view.height, view.width
    npix = h * w
    dirs, _ = pixel_ray_grid(view)
    d = dirs.reshape(-1, 3)[fr.pix]
    origin = camera_center(view)

    frames = splats.frames()
    colors = splats.colors()
    opac = splats.opacities()
    sid = fr.splat

    acc_alpha = np.bincount(fr.pix, weights=fr.omega, minlength=npix)
    acc_zsum = np.bincount(fr.pix, weights=fr.omega * fr.z, minlength=npix)
    nrm = frames[sid, :, 2] * fr.flip[:, None]
    acc_nsum = np.stack([
        np.bincount(fr.pix, weights=fr.omega * nrm[:, i], minlength=npix)
        for i in range(3)], axis=1)

    g_omega = np.zeros(m)
    g_z = np.zeros(m)
    g_nrm = np.zeros((m, 3))

    if grad_color is not None:
        gc = grad_color.reshape(npix, 3)[fr.pix]
        g_omega += np.einsum("ij,ij->i", gc, colors[sid])
        # color-logit gradient
        gcol = gc * fr.omega[:, None]
        c = colors[sid]
        contrib = gcol * c * (1 - c)
        np.add.at(splats.g_color_logit, sid, contrib)
    if grad_alpha is not None:
        g_omega += grad_alpha.reshape(npix)[fr.pix]
    if grad_mean_depth is not None:
        gd = grad_mean_depth.reshape(npix)
        a = acc_alpha[fr.pix]
        good = a > 0
        asafe = np.where(good, a, 1.0)
        s_here = acc_zsum[fr.pix]
        g_omega += np.where(good, gd[fr.pix] * (fr.z * a - s_here) / (asafe * asafe), 0.0)
        g_z += np.where(good, gd[fr.pix] * fr.omega / asafe, 0.0)
    if grad_normal is not None:
        gn = grad_normal.reshape(npix, 3)
        nlen = np.linalg.norm(acc_nsum, axis=1)
        valid = (acc_alpha > NORMAL_ALPHA_MIN) & (nlen > 1e-12)
        nhat = np.where(valid[:, None], acc_nsum / np.where(valid, nlen, 1.0)[:, None], 0.0)
        # d(normalize(M))/dM applied to the map adjoint
        gproj = np.where(valid[:, None],
                         (gn - nhat * np.einsum("ij,ij->i", gn, nhat)[:, None])
                         / np.where(valid, nlen, 1.0)[:, None],
                         0.0)
        gM = gproj[fr.pix]
        g_omega += np.einsum("ij,ij->i", gM, nrm)
        g_nrm += gM * fr.omega[:, None]
    if grad_omega_frag is not None:
        g_omega += grad_omega_frag
    if grad_z_frag is not None:
        g_z += grad_z_frag
    if grad_normal_frag is not None:
        g_nrm += grad_normal_frag

    # compositing chain: omega_i = alpha_i * T_i
    rev = g_omega * fr.omega
    cs = np.cumsum(rev)
    cs0 = np.concatenate([[0.0], cs])
    seg_last_cs = cs0[fr.seg_end[fr.pix]]       # sum over segment up to its end
    suffix = seg_last_cs - cs                    # sum over j > i in the segment
    g_alpha = g_omega * fr.trans - suffix / (1.0 - fr.alpha)

    # alpha = o * G
    g_big_g = g_alpha * opac[sid]
    g_o = g_alpha * fr.gauss
    np.add.at(splats.g_opacity_logit, sid, g_o * opac[sid] * (1 - opac[sid]))

    gG = g_big_g * fr.gauss          # dG contribution factor
    g_u = -fr.u * gG
    g_v = -fr.v * gG
    # log-scale gradient (zero where the footprint clamp is active)
    gls0 = np.where(fr.clamped[:, 0], 0.0, -fr.u * g_u)
    gls1 = np.where(fr.clamped[:, 1], 0.0, -fr.v * g_v)
    np.add.at(splats.g_log_scales[:, 0], sid, gls0)
    np.add.at(splats.g_log_scales[:, 1], sid, gls1)

    tu = frames[sid, :, 0]
    tv = frames[sid, :, 1]
    nn = frames[sid, :, 2]
    g_u_raw = g_u / fr.s_eff[:, 0]
    g_v_raw = g_v / fr.s_eff[:, 1]
    local = origin[None, :] + fr.t[:, None] * d - splats.centers[sid]
    g_t_total = g_z * fr.kappa \
        + g_u_raw * np.einsum("ij,ij->i", tu, d) \
        + g_v_raw * np.einsum("ij,ij->i", tv, d)
    inv_denom = 1.0 / fr.denom
    g_p = (g_t_total * inv_denom)[:, None] * nn \
        - g_u_raw[:, None] * tu - g_v_raw[:, None] * tv
    g_n_geom = (-g_t_total * inv_denom)[:, None] * local
    g_tu = g_u_raw[:, None] * local
    g_tv = g_v_raw[:, None] * local
    g_n = g_n_geom + g_nrm * fr.flip[:, None]

    np.add.at(splats.g_centers, sid, g_p)

    # quaternion chain, chunked to bound memory
    gR = np.stack([g_tu, g_tv, g_n], axis=-1)   # (M,3,3), columns
    touched = np.unique(sid)
    dRdq = np.zeros((len(splats), 4, 3, 3))
    dRdq[touched] = rotmat_jacobian_wrt_quat(splats.quats[touched])
    for s in range(0, m, 65536):
        sl = slice(s, min(s + 65536, m))
        gq = np.einsum("maij,mij->ma", dRdq[sid[sl]], gR[sl])
        np.add.at(splats.g_quats, sid[sl], gq)

    # densification statistic: screen-space-equivalent positional gradient
    cam = to_camera(view, splats.centers)
    zc = np.maximum(cam[:, 2], 1e-6)
    per_splat_gp = np.zeros((len(splats), 3))
    np.add.at(per_splat_gp, sid, g_p)
    gp_norm = np.linalg.norm(per_splat_gp, axis=1)
    scale = 0.5 * (view.fx + view.fy) / zc
    contributed = np.zeros(len(splats), dtype=bool)
    contributed[sid] = True
    splats.screen_grad_accum[contributed] += (gp_norm * scale)[contributed]
    splats.screen_grad_count[contributed] += 1
