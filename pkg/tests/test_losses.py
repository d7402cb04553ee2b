import numpy as np
import pytest
from types import SimpleNamespace

from priorsplat.losses import (
    LossWeights,
    Schedule,
    WeightRamp,
    weights_at,
    photometric_loss,
    depth_distortion_loss,
    depth_to_camera_normals,
    normal_consistency_loss,
    prior_depth_scale,
    prior_depth_loss,
    prior_normal_loss,
    total_loss,
)
from priorsplat.priors import PriorBundle

from conftest import make_view


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_weights_phase1():
    s = Schedule(total_iters=2000)
    w = weights_at(s, 0)
    assert w.lambda_d == 0.0 and w.lambda_n == 0.0
    assert w.lambda_db == 1.0 and w.lambda_nb == 0.05
    w = weights_at(s, 999)
    assert w.lambda_d == 0.0 and w.lambda_db == 1.0


def test_weights_phase2_activation_and_decay():
    s = Schedule(total_iters=2000)
    w = weights_at(s, 1000)
    assert w.lambda_d == 100.0 and w.lambda_n == 0.05
    assert w.lambda_db == 1.0 and w.lambda_nb == 0.05
    w = weights_at(s, 2000)
    assert w.lambda_d == 100.0 and w.lambda_n == 0.05
    np.testing.assert_allclose(w.lambda_db, 0.1)
    np.testing.assert_allclose(w.lambda_nb, 0.005)
    # halfway through phase 2
    w = weights_at(s, 1500)
    np.testing.assert_allclose(w.lambda_db, 0.55)
    np.testing.assert_allclose(w.lambda_nb, 0.0275)


def test_weights_out_of_range():
    s = Schedule(total_iters=100)
    with pytest.raises(ValueError):
        weights_at(s, 101)
    with pytest.raises(ValueError):
        weights_at(s, -1)


def test_loss_weights_validation():
    with pytest.raises(ValueError, match="lambda_d"):
        LossWeights(lambda_d=-1.0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule(total_iters=100, phase1_end=0)
    with pytest.raises(ValueError):
        Schedule(total_iters=100, phase1_end=101)


# ---------------------------------------------------------------------------
# photometric
# ---------------------------------------------------------------------------

def test_photometric_zero_on_identical(rng):
    img = rng.uniform(0.1, 0.9, size=(16, 14, 3))
    valid = np.ones((16, 14), dtype=bool)
    loss, grad = photometric_loss(img, img, valid)
    assert abs(loss) < 1e-12


def test_photometric_constant_images_closed_form():
    # constant images a, b: L1 = |a-b|; SSIM has the closed form
    # (2ab+C1)(C2) / ((a^2+b^2+C1)(C2)) everywhere with renormalized windows
    a, b = 0.7, 0.3
    ra = np.full((12, 12, 3), a)
    tb = np.full((12, 12, 3), b)
    valid = np.ones((12, 12), dtype=bool)
    loss, _ = photometric_loss(ra, tb, valid)
    c1 = 0.01 ** 2
    ssim = (2 * a * b + c1) / (a * a + b * b + c1)
    np.testing.assert_allclose(loss, 0.8 * abs(a - b) + 0.2 * (1 - ssim),
                               atol=1e-12)


def test_photometric_adjoint_matches_fd(rng):
    h, w = 9, 8
    rendered = rng.uniform(0.2, 0.8, size=(h, w, 3))
    target = rng.uniform(0.0, 1.0, size=(h, w, 3))
    valid = rng.uniform(size=(h, w)) > 0.2
    _, grad = photometric_loss(rendered, target, valid)
    eps = 1e-6
    idx = [(2, 3, 0), (0, 0, 1), (8, 7, 2), (4, 4, 1), (6, 2, 2)]
    for i, j, c in idx:
        rp = rendered.copy(); rp[i, j, c] += eps
        rm = rendered.copy(); rm[i, j, c] -= eps
        lp, _ = photometric_loss(rp, target, valid)
        lm, _ = photometric_loss(rm, target, valid)
        fd = (lp - lm) / (2 * eps)
        np.testing.assert_allclose(grad[i, j, c], fd, rtol=1e-5, atol=1e-9)


def test_photometric_requires_valid_pixels():
    img = np.zeros((4, 4, 3))
    with pytest.raises(ValueError):
        photometric_loss(img, img, np.zeros((4, 4), dtype=bool))


# ---------------------------------------------------------------------------
# depth distortion
# ---------------------------------------------------------------------------

def _fake_fragments(rng, npix=6, max_per_pix=5):
    pix, z, om = [], [], []
    for p in range(npix):
        k = rng.integers(0, max_per_pix + 1)
        zs = np.sort(rng.uniform(1.0, 5.0, size=k))
        pix.extend([p] * k)
        z.extend(zs)
        om.extend(rng.uniform(0.05, 0.4, size=k))
    return SimpleNamespace(pix=np.array(pix, dtype=np.int64),
                           z=np.array(z), omega=np.array(om))


def _distortion_brute(frags, ray_mask=None):
    pixels = np.unique(frags.pix)
    total, nrays = 0.0, 0
    for p in pixels:
        if ray_mask is not None and not ray_mask[p]:
            continue
        sel = frags.pix == p
        z, om = frags.z[sel], frags.omega[sel]
        nrays += 1
        for i in range(len(z)):
            for j in range(i):
                total += om[i] * om[j] * abs(z[i] - z[j])
    return total / max(nrays, 1)


def test_depth_distortion_matches_quadratic_reference(rng):
    for _ in range(10):
        f = _fake_fragments(rng)
        if len(f.pix) == 0:
            continue
        loss, _, _ = depth_distortion_loss(f)
        np.testing.assert_allclose(loss, _distortion_brute(f), atol=1e-12)


def test_depth_distortion_ray_mask(rng):
    f = _fake_fragments(rng, npix=8)
    mask = np.array([True, False] * 4)
    loss, g_om, g_z = depth_distortion_loss(f, ray_mask=mask)
    np.testing.assert_allclose(loss, _distortion_brute(f, mask), atol=1e-12)
    # masked-out fragments get zero gradient
    dead = ~mask[f.pix]
    assert np.all(g_om[dead] == 0) and np.all(g_z[dead] == 0)


def test_depth_distortion_gradients_fd(rng):
    f = _fake_fragments(rng, npix=4, max_per_pix=4)
    loss, g_om, g_z = depth_distortion_loss(f)
    eps = 1e-7
    for i in range(len(f.pix)):
        for arr, g in ((f.omega, g_om), (f.z, g_z)):
            orig = arr[i]
            arr[i] = orig + eps
            lp = depth_distortion_loss(f)[0]
            arr[i] = orig - eps
            lm = depth_distortion_loss(f)[0]
            arr[i] = orig
            np.testing.assert_allclose(g[i], (lp - lm) / (2 * eps),
                                       rtol=1e-5, atol=1e-8)


def test_depth_distortion_empty():
    f = SimpleNamespace(pix=np.zeros(0, dtype=np.int64),
                        z=np.zeros(0), omega=np.zeros(0))
    loss, g_om, g_z = depth_distortion_loss(f)
    assert loss == 0.0 and len(g_om) == 0 and len(g_z) == 0


def test_depth_distortion_single_fragment_per_ray():
    f = SimpleNamespace(pix=np.array([0, 1, 2]),
                        z=np.array([1.0, 2.0, 3.0]),
                        omega=np.array([0.5, 0.5, 0.5]))
    loss, g_om, g_z = depth_distortion_loss(f)
    assert loss == 0.0
    np.testing.assert_allclose(g_om, 0.0)
    np.testing.assert_allclose(g_z, 0.0)


# ---------------------------------------------------------------------------
# depth-derived normals / normal consistency
# ---------------------------------------------------------------------------

def test_depth_normals_frontoparallel_plane():
    view = make_view(width=16, height=12)
    depth = np.full((12, 16), 2.5)
    nmap, ok = depth_to_camera_normals(depth, view)
    assert ok.all()
    np.testing.assert_allclose(nmap, np.broadcast_to([0, 0, -1.0], nmap.shape),
                               atol=1e-12)


def test_depth_normals_tilted_plane():
    # plane z = 2 + 0.5 * x in camera frame  =>  normal prop to (0.5, 0, -1)
    view = make_view(width=20, height=16)
    xs = (np.arange(20) + 0.5 - view.cx) / view.fx
    ys = (np.arange(16) + 0.5 - view.cy) / view.fy
    gx, _ = np.meshgrid(xs, ys)
    # z * (1 - 0.5 x_n) = 2 for a point (x_n z, y_n z, z) on the plane
    depth = 2.0 / (1.0 - 0.5 * gx)
    nmap, ok = depth_to_camera_normals(depth, view)
    expected = np.array([0.5, 0.0, -1.0])
    expected /= np.linalg.norm(expected)
    interior = nmap[2:-2, 2:-2]
    np.testing.assert_allclose(interior,
                               np.broadcast_to(expected, interior.shape),
                               atol=1e-6)


def test_depth_normals_invalid_pixels():
    view = make_view(width=8, height=8)
    depth = np.full((8, 8), 2.0)
    depth[3, 3] = 0.0
    nmap, ok = depth_to_camera_normals(depth, view)
    # the zero pixel and its 4-neighborhood are invalidated
    for di, dj in ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)):
        assert not ok[3 + di, 3 + dj]
        np.testing.assert_allclose(nmap[3 + di, 3 + dj], 0.0)
    assert ok[0, 0]


def test_normal_consistency_constructed():
    view = make_view(width=4, height=3)
    h, w = 3, 4
    depth = np.full((h, w), 2.0)   # target normal (0,0,-1) in camera frame
    # one fragment on pixel 0 with a splat normal aligned with the target,
    # one on pixel 1 opposing it
    r = view.rotation
    aligned_world = np.array([0.0, 0.0, -1.0]) @ r   # maps to (0,0,-1) cam
    opposed_world = -aligned_world
    frags = SimpleNamespace(pix=np.array([0, 1]),
                            omega=np.array([1.0, 1.0]))
    normals = np.stack([aligned_world, opposed_world])
    loss, g_om, g_n = normal_consistency_loss(frags, depth, view, normals)
    # per-ray: aligned -> 0, opposed -> 2; averaged over 2 rays -> 1
    np.testing.assert_allclose(loss, 1.0, atol=1e-12)
    np.testing.assert_allclose(g_om, [0.0, 1.0], atol=1e-12)


def test_normal_consistency_explicit_target(rng):
    view = make_view(width=6, height=5)
    nmap = rng.normal(size=(5, 6, 3))
    nmap /= np.linalg.norm(nmap, axis=-1, keepdims=True)
    ok = np.ones((5, 6), dtype=bool)
    frags = SimpleNamespace(pix=np.array([7, 12]),
                            omega=np.array([0.6, 0.3]))
    normals = rng.normal(size=(2, 3))
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    loss, _, g_n = normal_consistency_loss(
        frags, np.zeros((5, 6)), view, normals, target=(nmap, ok))
    n_cam = normals @ view.rotation.T
    tgt = nmap.reshape(-1, 3)[frags.pix]
    expected = np.mean(frags.omega * (1 - np.einsum("ij,ij->i", n_cam, tgt)))
    np.testing.assert_allclose(loss, expected, atol=1e-12)
    # FD on the world normals (loss is linear in them)
    eps = 1e-6
    for i in range(2):
        for c in range(3):
            orig = normals[i, c]
            normals[i, c] = orig + eps
            lp = normal_consistency_loss(frags, np.zeros((5, 6)), view,
                                         normals, target=(nmap, ok))[0]
            normals[i, c] = orig - eps
            lm = normal_consistency_loss(frags, np.zeros((5, 6)), view,
                                         normals, target=(nmap, ok))[0]
            normals[i, c] = orig
            np.testing.assert_allclose(g_n[i, c], (lp - lm) / (2 * eps),
                                       rtol=1e-6, atol=1e-10)


def test_normal_consistency_no_valid_rays():
    view = make_view(width=4, height=3)
    frags = SimpleNamespace(pix=np.array([0]), omega=np.array([1.0]))
    loss, g_om, g_n = normal_consistency_loss(
        frags, np.zeros((3, 4)), view, np.array([[0.0, 0.0, 1.0]]),
        ray_mask=np.zeros(12, dtype=bool))
    assert loss == 0.0
    np.testing.assert_allclose(g_om, 0.0)
    np.testing.assert_allclose(g_n, 0.0)


# ---------------------------------------------------------------------------
# prior depth / prior normal
# ---------------------------------------------------------------------------

def _bundle(depth, normal, mask):
    return PriorBundle(view_id="v0", depth=depth, normal=normal, mask=mask)


def test_prior_depth_scale_median():
    rendered = np.array([[1.0, 2.0], [4.0, 0.0]])
    prior = np.array([[2.0, 5.0], [8.0, 3.0]])
    mask = np.ones((2, 2), dtype=bool)
    # ratios over rendered>0: 2.0, 2.5, 2.0 -> median 2.0
    assert prior_depth_scale(rendered, prior, mask) == 2.0
    assert prior_depth_scale(np.zeros((2, 2)), prior, mask) == 1.0


def test_prior_depth_global_scale_invariance(rng):
    h, w = 10, 12
    rendered = rng.uniform(1.0, 4.0, size=(h, w))
    prior_d = rendered * 1.7 + rng.normal(0, 0.05, size=(h, w))
    mask = rng.uniform(size=(h, w)) > 0.3
    prior = _bundle(prior_d, np.zeros((h, w, 3)), mask)
    l0 = prior_depth_loss(rendered, prior)[0]
    for c in (0.5, 2.0, 10.0):
        lc = prior_depth_loss(c * rendered, prior)[0]
        np.testing.assert_allclose(lc, l0, atol=1e-12)


def test_prior_depth_adjoint_fd(rng):
    h, w = 6, 7
    rendered = rng.uniform(1.0, 4.0, size=(h, w))
    prior = _bundle(rng.uniform(1.0, 4.0, size=(h, w)),
                    np.zeros((h, w, 3)),
                    rng.uniform(size=(h, w)) > 0.3)
    loss, grad, scale, empty = prior_depth_loss(rendered, prior)
    assert not empty
    eps = 1e-6
    for i, j in ((0, 0), (3, 4), (5, 6), (2, 2)):
        rp = rendered.copy(); rp[i, j] += eps
        rm = rendered.copy(); rm[i, j] -= eps
        lp = prior_depth_loss(rp, prior, alpha_scale=scale)[0]
        lm = prior_depth_loss(rm, prior, alpha_scale=scale)[0]
        np.testing.assert_allclose(grad[i, j], (lp - lm) / (2 * eps),
                                   rtol=1e-5, atol=1e-10)


def test_prior_depth_empty_mask():
    prior = _bundle(np.ones((3, 3)), np.zeros((3, 3, 3)),
                    np.zeros((3, 3), dtype=bool))
    loss, grad, scale, empty = prior_depth_loss(np.ones((3, 3)), prior)
    assert empty and loss == 0.0 and scale == 1.0


def test_prior_normal_constructed_cases():
    h, w = 1, 3
    prior_n = np.zeros((h, w, 3))
    prior_n[:, :, 2] = 1.0
    mask = np.ones((h, w), dtype=bool)
    prior = _bundle(np.ones((h, w)), prior_n, mask)
    rendered = np.zeros((h, w, 3))
    rendered[0, 0] = [0, 0, 1]    # aligned -> 0
    rendered[0, 1] = [0, 0, -1]   # opposed -> 2
    rendered[0, 2] = [0, 0, 0]    # unrendered -> 1
    loss, grad, empty = prior_normal_loss(rendered, prior)
    np.testing.assert_allclose(loss, (0 + 2 + 1) / 3, atol=1e-12)
    np.testing.assert_allclose(grad[0, 0], [0, 0, -1 / 3])
    np.testing.assert_allclose(grad[0, 2], 0.0)   # unrendered: no gradient


def test_prior_normal_empty_mask():
    prior = _bundle(np.ones((2, 2)), np.zeros((2, 2, 3)),
                    np.zeros((2, 2), dtype=bool))
    loss, grad, empty = prior_normal_loss(np.zeros((2, 2, 3)), prior)
    assert empty and loss == 0.0


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------

def test_total_loss_combination():
    comps = {"l_c": 1.0, "l_d": 2.0, "l_n": 3.0, "l_db": 4.0, "l_nb": 5.0}
    w = LossWeights(lambda_d=0.1, lambda_n=0.2, lambda_db=0.3, lambda_nb=0.4)
    np.testing.assert_allclose(total_loss(comps, w),
                               1.0 + 0.2 + 0.6 + 1.2 + 2.0)


def test_total_loss_nonfinite_names_component():
    comps = {"l_c": 1.0, "l_db": float("nan")}
    with pytest.raises(FloatingPointError, match="l_db"):
        total_loss(comps, LossWeights())
