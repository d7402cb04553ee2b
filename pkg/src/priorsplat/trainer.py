"""Optimization loop: view scheduling, forward/backward, Adam updates,
adaptive density control, and the building-only / building-enhanced modes."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .camera import CameraView
from .losses import (LossWeights, Schedule, WeightRamp, depth_distortion_loss,
                     normal_consistency_loss, photometric_loss,
                     prior_depth_loss, prior_normal_loss, total_loss,
                     weights_at)
from .renderer import NORMAL_ALPHA_MIN, backward, render
from .splats import SplatSet, init_splats, save_checkpoint

MODES = ("building_only", "building_enhanced")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DensifyConfig:
    # the 2e-4 threshold conventional in megapixel splatting pipelines sits
    # far below the per-pixel gradient scale of desk-sized images and would
    # densify every splat; the default here targets the same "top few
    # percent" behavior at this image scale
    interval: int = 100
    grad_threshold: float = 0.05
    opacity_prune: float = 5e-3
    start_iter: int | None = None   # default min(500, end_iter)
    end_iter: int | None = None     # default 0.75 * total_iters
    max_splats: int = 6000          # split/clone pause above this count

@dataclass
class LearningRates:
    center: float = 1.6e-4    # scaled by scene_extent, exp-decayed x0.01
    rot: float = 1e-3
    scales: float = 5e-3
    opacity: float = 5e-2
    color: float = 2.5e-3


@dataclass
class TrainConfig:
    mode: str = "building_enhanced"
    total_iters: int = 2000
    phase1_end: int | None = None
    seed: int = 0
    lr: LearningRates = field(default_factory=LearningRates)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    use_depth_prior: bool = True
    use_normal_prior: bool = True
    init_source: str = "prior_cloud"   # or "external_cloud"
    external_cloud_path: str | None = None
    lambda_db: tuple = (1.0, 0.1)
    lambda_nb: tuple = (0.05, 0.005)
    lambda_d: float = 100.0
    lambda_n: float = 0.05

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.densify.end_iter is None:
            self.densify.end_iter = int(0.75 * self.total_iters)
        if self.densify.start_iter is None:
            self.densify.start_iter = min(500, self.densify.end_iter)
        for name, v in asdict(self.lr).items():
            if v <= 0:
                raise ValueError(f"learning rate {name} must be positive")


def _build_schedule(config: TrainConfig) -> Schedule:
    sched = Schedule(total_iters=config.total_iters, phase1_end=config.phase1_end)
    sched.ramp_db = WeightRamp(config.lambda_db[0], config.lambda_db[1], 0)
    sched.ramp_nb = WeightRamp(config.lambda_nb[0], config.lambda_nb[1], 0)
    sched.ramp_d = WeightRamp(config.lambda_d, config.lambda_d, sched.phase1_end)
    sched.ramp_n = WeightRamp(config.lambda_n, config.lambda_n, sched.phase1_end)
    if not config.use_depth_prior:
        sched.ramp_db = WeightRamp(0.0, 0.0, 0)
    if not config.use_normal_prior:
        sched.ramp_nb = WeightRamp(0.0, 0.0, 0)
    return sched


_GROUPS = ("centers", "quats", "log_scales", "opacity_logit", "color_logit")


class AdamState:
    """Per-parameter adaptive-moment state (beta1 0.9, beta2 0.999, eps 1e-15)."""

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-15

    def __init__(self, splats: SplatSet):
        self.step_count = 0
        self.m = {g: np.zeros_like(getattr(splats, g)) for g in _GROUPS}
        self.v = {g: np.zeros_like(getattr(splats, g)) for g in _GROUPS}

    def step(self, splats: SplatSet, lrs: dict):
        self.step_count += 1
        bc1 = 1 - self.BETA1 ** self.step_count
        bc2 = 1 - self.BETA2 ** self.step_count
        for g in _GROUPS:
            grad = getattr(splats, "g_" + g)
            self.m[g] = self.BETA1 * self.m[g] + (1 - self.BETA1) * grad
            self.v[g] = self.BETA2 * self.v[g] + (1 - self.BETA2) * grad * grad
            mhat = self.m[g] / bc1
            vhat = self.v[g] / bc2
            getattr(splats, g)[...] -= lrs[g] * mhat / (np.sqrt(vhat) + self.EPS)

    def remap(self, keep_idx, n_new):
        """Keep moments of surviving splats; zero state for appended ones."""
        for d in (self.m, self.v):
            for g in _GROUPS:
                old = d[g][keep_idx]
                pad_shape = (n_new - len(keep_idx),) + old.shape[1:]
                d[g] = np.concatenate([old, np.zeros(pad_shape)])


@dataclass
class TrainState:
    splats: SplatSet
    iteration: int
    optimizer: AdamState
    rng: np.random.Generator
    scene_extent: float
    view_order: list = field(default_factory=list)
    loss_log: list = field(default_factory=list)


def _learning_rates(config: TrainConfig, state: TrainState) -> dict:
    frac = state.iteration / max(config.total_iters, 1)
    center_lr = config.lr.center * state.scene_extent * (0.01 ** frac)
    return {"centers": center_lr, "quats": config.lr.rot,
            "log_scales": config.lr.scales, "opacity_logit": config.lr.opacity,
            "color_logit": config.lr.color}


def forward_backward(splats: SplatSet, view: CameraView, target, prior,
                     weights: LossWeights, mode: str, compute_grads: bool = True):
    """One view's losses plus gradient accumulation into the splat buffers.

    Returns (components dict, render output).
    """
    out = render(splats, view, with_fragments=True)
    h, w = view.height, view.width
    rendered_ok = out.alpha > NORMAL_ALPHA_MIN
    if mode == "building_only":
        if prior is None:
            raise ValueError("building_only mode requires priors")
        pixmask = prior.mask.astype(bool)
    else:
        pixmask = np.ones((h, w), dtype=bool)
    ray_mask = pixmask.reshape(-1)

    comps = {"l_c": 0.0, "l_d": 0.0, "l_n": 0.0, "l_db": 0.0, "l_nb": 0.0}
    g_color = None
    g_depth = None
    g_normal_map = None
    fr = out.fragments
    g_om = np.zeros(len(fr.pix))
    g_zf = np.zeros(len(fr.pix))
    g_nf = np.zeros((len(fr.pix), 3))

    valid_c = rendered_ok & pixmask
    if valid_c.any():
        comps["l_c"], g_color = photometric_loss(out.color, target, valid_c)

    frames = splats.frames()
    frag_normals = frames[fr.splat, :, 2] * fr.flip[:, None]

    if weights.lambda_d > 0:
        comps["l_d"], go, gz = depth_distortion_loss(fr, ray_mask)
        g_om += weights.lambda_d * go
        g_zf += weights.lambda_d * gz
    if weights.lambda_n > 0:
        comps["l_n"], go, gn = normal_consistency_loss(
            fr, out.mean_depth, view, frag_normals, ray_mask)
        g_om += weights.lambda_n * go
        g_nf += weights.lambda_n * gn
    if prior is not None and weights.lambda_db > 0:
        comps["l_db"], gd, _, _ = prior_depth_loss(out.mean_depth, prior)
        g_depth = weights.lambda_db * gd
    if prior is not None and weights.lambda_nb > 0:
        comps["l_nb"], gn, _ = prior_normal_loss(out.normal, prior)
        g_normal_map = weights.lambda_nb * gn

    if compute_grads and len(fr.pix):
        backward(splats, view, out,
                 grad_color=g_color, grad_mean_depth=g_depth,
                 grad_normal=g_normal_map,
                 grad_omega_frag=g_om if g_om.any() else None,
                 grad_z_frag=g_zf if g_zf.any() else None,
                 grad_normal_frag=g_nf if g_nf.any() else None)
    return comps, out


def train_step(state: TrainState, views, targets, priors, config: TrainConfig,
               schedule: Schedule, out_dir=None):
    """One optimization iteration; views sampled without replacement per epoch."""
    if not state.view_order:
        order = state.rng.permutation(len(views)).tolist()
        state.view_order = order
    vi = state.view_order.pop(0)
    view = views[vi]
    target = targets[view.id]
    prior = priors.get(view.id) if priors else None
    weights = weights_at(schedule, state.iteration)

    state.splats.zero_grad()
    comps, out = forward_backward(state.splats, view, target, prior,
                                  weights, config.mode)
    try:
        total = total_loss(comps, weights)
    except FloatingPointError as e:
        snap = None
        if out_dir is not None:
            snap = os.path.join(out_dir, f"diverged_iter{state.iteration}.ply")
            save_checkpoint(state.splats, snap, state.iteration)
        raise TrainingDiverged(
            f"non-finite loss at iteration {state.iteration} on view {view.id}: {e}"
            + (f" (snapshot: {snap})" if snap else ""))

    state.optimizer.step(state.splats, _learning_rates(config, state))
    state.splats.normalize_quats()
    state.loss_log.append({
        "iter": state.iteration, **comps, "total": total,
        "lambda_d": weights.lambda_d, "lambda_n": weights.lambda_n,
        "lambda_db": weights.lambda_db, "lambda_nb": weights.lambda_nb})
    state.iteration += 1
    return state


def densify_and_prune(state: TrainState, config: TrainConfig):
    """Split/clone high-gradient splats, prune near-transparent ones."""
    s = state.splats
    n = len(s)
    count = np.maximum(s.screen_grad_count, 1.0)
    mean_grad = s.screen_grad_accum / count
    dense = mean_grad >= config.densify.grad_threshold
    if config.densify.max_splats and n >= config.densify.max_splats:
        dense[:] = False
    big = s.scales().max(axis=1) > 0.02 * state.scene_extent
    split = dense & big
    clone = dense & ~big
    alive = s.opacities() >= config.densify.opacity_prune

    keep = alive & ~split
    keep_idx = np.flatnonzero(keep)

    new_centers = [s.centers[keep_idx]]
    new_quats = [s.quats[keep_idx]]
    new_ls = [s.log_scales[keep_idx]]
    new_op = [s.opacity_logit[keep_idx]]
    new_col = [s.color_logit[keep_idx]]

    def append(idx, centers, quats, ls, op, col):
        new_centers.append(centers)
        new_quats.append(quats)
        new_ls.append(ls)
        new_op.append(op)
        new_col.append(col)

    clone_idx = np.flatnonzero(clone & alive)
    if len(clone_idx):
        append(clone_idx, s.centers[clone_idx], s.quats[clone_idx],
               s.log_scales[clone_idx], s.opacity_logit[clone_idx],
               s.color_logit[clone_idx])

    split_idx = np.flatnonzero(split & alive)
    if len(split_idx):
        frames = s.frames()[split_idx]
        tu = frames[:, :, 0]
        su = np.exp(s.log_scales[split_idx, 0])
        child_ls = s.log_scales[split_idx] - np.log(1.6)
        for sign in (+0.5, -0.5):
            append(split_idx,
                   s.centers[split_idx] + sign * su[:, None] * tu,
                   s.quats[split_idx], child_ls,
                   s.opacity_logit[split_idx], s.color_logit[split_idx])

    new = SplatSet(np.concatenate(new_centers), np.concatenate(new_quats),
                   np.concatenate(new_ls), np.concatenate(new_op),
                   np.concatenate(new_col))
    state.optimizer.remap(keep_idx, len(new))
    state.splats = new
    state.splats.reset_densify_stats()
    return state


def run(config: TrainConfig, views, targets, priors, init_cloud=None,
        out_dir=None, scene_extent=None, initial_splats=None,
        progress=False):
    """Full training run; writes checkpoints at 25/50/100% and the loss CSV."""
    if initial_splats is None:
        if init_cloud is None:
            raise ValueError("either init_cloud or initial_splats is required")
        pts = init_cloud.points
        if scene_extent is None:
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            scene_extent = float(np.linalg.norm(hi - lo))
        splats = init_splats(init_cloud, scene_extent)
    else:
        splats = initial_splats
        if scene_extent is None:
            lo, hi = splats.centers.min(axis=0), splats.centers.max(axis=0)
            scene_extent = float(np.linalg.norm(hi - lo))
    if (config.use_depth_prior or config.use_normal_prior
            or config.mode == "building_only"):
        missing = [v.id for v in views if v.id not in (priors or {})]
        if missing:
            raise ValueError(f"priors missing for views: {missing}")

    d = config.densify
    if not (0 <= d.start_iter <= d.end_iter <= config.total_iters):
        raise ValueError("densify window must satisfy 0 <= start <= end <= total")
    schedule = _build_schedule(config)
    state = TrainState(splats=splats, iteration=0,
                       optimizer=AdamState(splats),
                       rng=np.random.default_rng(config.seed),
                       scene_extent=scene_extent)
    milestones = {int(config.total_iters * f): tag
                  for f, tag in ((0.25, "25"), (0.5, "50"), (1.0, "100"))}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    d = config.densify
    while state.iteration < config.total_iters:
        train_step(state, views, targets, priors, config, schedule, out_dir)
        it = state.iteration
        if (d.start_iter <= it <= d.end_iter and d.interval > 0
                and it % d.interval == 0):
            densify_and_prune(state, config)
        if out_dir and it in milestones:
            save_checkpoint(state.splats,
                            os.path.join(out_dir, f"ckpt_{it:06d}.ply"), it)
        if progress and it % 200 == 0:
            last = state.loss_log[-1]
            print(f"iter {it}: total={last['total']:.4f} "
                  f"n_splats={len(state.splats)}", flush=True)
    if out_dir:
        write_loss_csv(os.path.join(out_dir, "losses.csv"), state.loss_log)
    return state


def write_loss_csv(path, loss_log):
    cols = ["iter", "l_c", "l_d", "l_n", "l_db", "l_nb", "total",
            "lambda_d", "lambda_n", "lambda_db", "lambda_nb"]
    with open(path, "w", newline="") as f:
        wcsv = csv.writer(f)
        wcsv.writerow(cols)
        for row in loss_log:
            wcsv.writerow([row[c] for c in cols])


# exact-resume state file (float64; the PLY checkpoint quantizes to float32)

def save_state(path, state: TrainState, config: TrainConfig):
    np.savez(path,
             centers=state.splats.centers, quats=state.splats.quats,
             log_scales=state.splats.log_scales,
             opacity_logit=state.splats.opacity_logit,
             color_logit=state.splats.color_logit,
             iteration=state.iteration,
             step_count=state.optimizer.step_count,
             scene_extent=state.scene_extent,
             view_order=np.array(state.view_order, dtype=np.int64),
             rng_state=json.dumps(state.rng.bit_generator.state),
             **{f"m_{g}": state.optimizer.m[g] for g in _GROUPS},
             **{f"v_{g}": state.optimizer.v[g] for g in _GROUPS})


def load_state(path) -> TrainState:
    z = np.load(path, allow_pickle=False)
    splats = SplatSet(z["centers"], z["quats"], z["log_scales"],
                      z["opacity_logit"], z["color_logit"])
    opt = AdamState(splats)
    opt.step_count = int(z["step_count"])
    for g in _GROUPS:
        opt.m[g] = z[f"m_{g}"]
        opt.v[g] = z[f"v_{g}"]
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(str(z["rng_state"]))
    return TrainState(splats=splats, iteration=int(z["iteration"]),
                      optimizer=opt, rng=rng,
                      scene_extent=float(z["scene_extent"]),
                      view_order=z["view_order"].tolist())
