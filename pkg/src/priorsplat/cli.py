"""Command-line entry points: synth, priors, train, extract, eval, sweep.

Exit codes: 0 success, 1 partial failure, 2 usage/validation error,
3 pipeline produced an empty result.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2
EXIT_EMPTY = 3


class UsageError(Exception):
    pass


class EmptyResultError(Exception):
    pass


def _fail(msg, code=EXIT_USAGE):
    print(f"error: {msg}", file=sys.stderr)
    return code


def _parse_resolution(text):
    try:
        w, h = text.lower().split("x")
        w, h = int(w), int(h)
        if w < 16 or h < 16:
            raise ValueError
        return w, h
    except ValueError:
        raise UsageError(f"--res expects WIDTHxHEIGHT with both >= 16, got {text!r}")


def _require_dir(path, flag):
    if not os.path.isdir(path):
        raise UsageError(f"{flag}: directory not found: {path}")


def _require_file(path, flag):
    if not os.path.isfile(path):
        raise UsageError(f"{flag}: file not found: {path}")


def _prepare_out(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force)")
    os.makedirs(path, exist_ok=True)


def _load_config_file(path):
    _require_file(path, "--config")
    if path.endswith(".json"):
        with open(path) as f:
            return json.load(f)
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as f:
            return tomllib.load(f)
    raise UsageError(f"--config must be .toml or .json, got {path}")


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    from .synth import generate_scene, save_scene
    res = _parse_resolution(args.res)
    if args.views < 4:
        raise UsageError("--views must be >= 4")
    _prepare_out(args.out, args.force)
    scene = generate_scene(args.preset, n_views=args.views, resolution=res,
                           seed=args.seed)
    save_scene(scene, args.out)
    print(f"wrote scene ({len(scene.views)} views, preset {args.preset}) "
          f"to {args.out}")
    return EXIT_OK


def cmd_priors(args):
    from .geometry import build_bvh, load_mesh_ply
    from .priors import (EmptyInitCloudError, build_init_cloud,
                         raycast_priors, save_init_cloud, save_prior_bundle)
    from .synth import load_scene

    _require_dir(args.scene, "--scene")
    _require_file(os.path.join(args.scene, "lod2.ply"), "--scene/lod2.ply")
    if args.eps <= 0 or args.k < 1 or args.n_samples < 1:
        raise UsageError("--eps must be > 0; --k and --n-samples >= 1")
    _prepare_out(args.out, args.force)
    scene = load_scene(args.scene)
    index = build_bvh(scene.lod2_mesh)

    summary = {"per_view_mask_pixels": {}}
    for v in scene.views:
        bundle = raycast_priors(scene.lod2_mesh, v, index)
        save_prior_bundle(args.out, bundle)
        summary["per_view_mask_pixels"][v.id] = int(bundle.mask.sum())
    try:
        cloud = build_init_cloud(scene.lod2_mesh, scene.views,
                                 n_samples=args.n_samples, eps=args.eps,
                                 k=args.k, seed=args.seed, index=index)
    except EmptyInitCloudError as e:
        raise EmptyResultError(str(e))
    save_init_cloud(os.path.join(args.out, "init_cloud.ply"),
                    os.path.join(args.out, "init_observations.jsonl"), cloud)
    summary["retained_points"] = len(cloud.points)
    summary["eps"] = args.eps
    summary["k"] = args.k
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"retained {len(cloud.points)} init points; priors for "
          f"{len(scene.views)} views in {args.out}")
    return EXIT_OK


def _load_priors_dir(priors_dir, views):
    from .priors import load_prior_bundle
    priors = {}
    for v in views:
        try:
            priors[v.id] = load_prior_bundle(priors_dir, v.id)
        except FileNotFoundError:
            pass
    return priors


def _render_grid_png(path, splats, views):
    from .imgio import write_png_srgb
    from .renderer import render
    imgs = [render(splats, v).color for v in views]
    cols = int(np.ceil(np.sqrt(len(imgs))))
    rows = int(np.ceil(len(imgs) / cols))
    h, w, _ = imgs[0].shape
    grid = np.zeros((rows * h, cols * w, 3))
    for i, img in enumerate(imgs):
        r, c = divmod(i, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = img
    write_png_srgb(path, grid)


def cmd_train(args):
    from .priors import InitPointCloud, load_init_cloud
    from .synth import load_scene
    from .trainer import TrainConfig, run

    _require_dir(args.scene, "--scene")
    cfg_dict = _load_config_file(args.config) if args.config else {}
    cfg = TrainConfig(
        mode=args.mode or cfg_dict.get("mode", "building_enhanced"),
        total_iters=args.iters or cfg_dict.get("total_iters", 2000),
        seed=args.seed if args.seed is not None else cfg_dict.get("seed", 0),
        use_depth_prior=(not args.no_depth_prior)
        and cfg_dict.get("use_depth_prior", True),
        use_normal_prior=(not args.no_normal_prior)
        and cfg_dict.get("use_normal_prior", True),
    )
    for key in ("phase1_end", "lambda_d", "lambda_n"):
        if key in cfg_dict:
            setattr(cfg, key, cfg_dict[key])
    for key in ("interval", "grad_threshold", "opacity_prune",
                "start_iter", "end_iter"):
        if f"densify_{key}" in cfg_dict:
            setattr(cfg.densify, key, cfg_dict[f"densify_{key}"])
    if cfg.total_iters < 1:
        raise UsageError("--iters must be >= 1")

    scene = load_scene(args.scene)
    prior_losses_on = cfg.use_depth_prior or cfg.use_normal_prior
    priors = {}
    if args.priors:
        _require_dir(args.priors, "--priors")
        priors = _load_priors_dir(args.priors, scene.views)
    if (prior_losses_on or cfg.mode == "building_only") and \
            len(priors) < len(scene.views):
        raise UsageError(
            "priors are required for every view while prior losses or "
            "building_only mode are enabled (pass --priors, or disable with "
            "--no-depth-prior --no-normal-prior)")

    if args.init.startswith("external:"):
        cloud_path = args.init.split(":", 1)[1]
        _require_file(cloud_path, "--init external")
        cloud = load_init_cloud(cloud_path)
    elif args.init == "prior_cloud":
        if not args.priors:
            raise UsageError("--init prior_cloud requires --priors")
        cloud = load_init_cloud(
            os.path.join(args.priors, "init_cloud.ply"),
            os.path.join(args.priors, "init_observations.jsonl"))
    else:
        raise UsageError(f"--init must be prior_cloud or external:PATH, "
                         f"got {args.init!r}")
    if len(cloud.points) < 4:
        raise EmptyResultError("initialization cloud has fewer than 4 points")

    _prepare_out(args.out, args.force)
    state = run(cfg, scene.views, scene.gt_images, priors, init_cloud=cloud,
                out_dir=args.out, progress=not args.quiet)
    _render_grid_png(os.path.join(args.out, "final_renders.png"),
                     state.splats, scene.views)
    print(f"trained {cfg.total_iters} iterations, {len(state.splats)} splats; "
          f"outputs in {args.out}")
    return EXIT_OK


def cmd_extract(args):
    from .extract import extract_mesh
    from .geometry import save_mesh_ply
    from .splats import load_checkpoint
    from .synth import load_scene

    _require_file(args.checkpoint, "--checkpoint")
    _require_dir(args.scene, "--scene")
    if args.voxel is not None and args.voxel <= 0:
        raise UsageError("--voxel must be > 0")
    scene = load_scene(args.scene)
    splats, _ = load_checkpoint(args.checkpoint)
    mesh = extract_mesh(splats, scene.views, voxel_size=args.voxel)
    save_mesh_ply(args.out, mesh)
    if len(mesh.faces) == 0:
        print("warning: extracted mesh is empty", file=sys.stderr)
    print(f"extracted {len(mesh.vertices)} vertices / {len(mesh.faces)} "
          f"faces to {args.out}")
    return EXIT_OK


def _load_cloud_or_mesh(path):
    from .geometry import TriangleMesh, load_mesh_ply
    from .plyio import read_ply
    elems = read_ply(path)
    if "face" in elems and elems["face"].count > 0:
        return load_mesh_ply(path)
    v = elems["vertex"].data
    return np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)


def cmd_eval(args):
    from .imgio import read_png_linear
    from .metrics import evaluate

    _require_file(args.recon, "--recon")
    _require_file(args.reference, "--reference")
    try:
        thresholds = [float(t) for t in args.thresholds.split(",") if t]
    except ValueError:
        raise UsageError(f"--thresholds expects a comma list of numbers, "
                         f"got {args.thresholds!r}")
    if not thresholds:
        raise UsageError("--thresholds is empty")
    renders, targets = None, None
    if args.renders_dir or args.images_dir:
        if not (args.renders_dir and args.images_dir):
            raise UsageError("--renders-dir and --images-dir go together")
        _require_dir(args.renders_dir, "--renders-dir")
        _require_dir(args.images_dir, "--images-dir")
        names = sorted(n for n in os.listdir(args.renders_dir)
                       if n.endswith(".png"))
        if not names:
            raise UsageError("--renders-dir contains no .png files")
        for n in names:
            _require_file(os.path.join(args.images_dir, n), "--images-dir")
        renders = [read_png_linear(os.path.join(args.renders_dir, n))
                   for n in names]
        targets = [read_png_linear(os.path.join(args.images_dir, n))
                   for n in names]

    recon = _load_cloud_or_mesh(args.recon)
    reference = _load_cloud_or_mesh(args.reference)
    if not isinstance(reference, np.ndarray):
        from .geometry import sample_surface
        reference = sample_surface(reference, 50_000, seed=args.seed)[0]
    report = evaluate(recon, reference, rendered_images=renders,
                      target_images=targets, thresholds=thresholds,
                      voc_voxel=args.voc_voxel, seed=args.seed)
    report.save_json(args.out)
    if args.csv:
        report.append_csv(args.csv, label=args.label)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


SWEEP_ROWS = ("sfm_init", "no_depth", "no_normal", "full")


def cmd_sweep(args):
    """Table-style ablation: init source and prior-loss axes."""
    from .extract import extract_mesh
    from .metrics import evaluate
    from .priors import load_init_cloud
    from .synth import load_scene, sfm_surrogate_cloud
    from .trainer import TrainConfig, run

    _require_dir(args.scene, "--scene")
    _require_dir(args.priors, "--priors")
    rows = [r for r in (args.rows.split(",") if args.rows else SWEEP_ROWS) if r]
    if not rows:
        raise UsageError("--rows is empty")
    unknown = [r for r in rows if r not in SWEEP_ROWS]
    if unknown:
        raise UsageError(f"unknown sweep rows {unknown}; "
                         f"choose from {SWEEP_ROWS}")
    os.makedirs(args.out, exist_ok=True)
    scene = load_scene(args.scene)
    priors = _load_priors_dir(args.priors, scene.views)
    if len(priors) < len(scene.views):
        raise UsageError("--priors does not cover every view")
    cloud = load_init_cloud(
        os.path.join(args.priors, "init_cloud.ply"),
        os.path.join(args.priors, "init_observations.jsonl"))

    failures = []
    for row in rows:
        row_dir = os.path.join(args.out, row)
        report_path = os.path.join(row_dir, "report.json")
        if os.path.exists(report_path):
            print(f"[{row}] report exists, skipping")
            continue
        print(f"[{row}] training {args.iters} iterations")
        cfg = TrainConfig(mode="building_enhanced", total_iters=args.iters,
                          seed=args.seed,
                          use_depth_prior=row != "no_depth",
                          use_normal_prior=row != "no_normal")
        row_cloud = cloud
        if row == "sfm_init":
            from .priors import InitPointCloud
            pts = sfm_surrogate_cloud(scene, seed=args.seed)
            row_cloud = InitPointCloud(
                points=pts, normals=np.tile([0.0, 0.0, 1.0], (len(pts), 1)),
                colors=np.full((len(pts), 3), 0.5),
                observations=[[] for _ in range(len(pts))])
        try:
            os.makedirs(row_dir, exist_ok=True)
            state = run(cfg, scene.views, scene.gt_images, priors,
                        init_cloud=row_cloud, out_dir=row_dir,
                        progress=not args.quiet)
            mesh = extract_mesh(state.splats, scene.views,
                                voxel_size=args.voxel)
            from .geometry import save_mesh_ply
            save_mesh_ply(os.path.join(row_dir, "mesh.ply"), mesh)
            from .renderer import render
            renders = [render(state.splats, v).color for v in scene.views]
            targets = [scene.gt_images[v.id] for v in scene.views]
            report = evaluate(mesh, scene.gt_surface_cloud,
                              rendered_images=renders, target_images=targets,
                              thresholds=(0.1, 0.2, 0.5), seed=args.seed)
            report.save_json(report_path)
            report.append_csv(os.path.join(args.out, "sweep.csv"), label=row)
        except Exception as e:   # record per-row failure, keep sweeping
            failures.append(row)
            with open(os.path.join(args.out, "failures.log"), "a") as f:
                f.write(f"{row}: {e}\n")
            print(f"[{row}] FAILED: {e}", file=sys.stderr)
    if failures:
        print(f"{len(failures)} row(s) failed: {failures}", file=sys.stderr)
        return EXIT_PARTIAL
    print(f"sweep complete; table at {os.path.join(args.out, 'sweep.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="priorsplat",
        description="Prior-guided 2D Gaussian splatting for building "
                    "surface reconstruction")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP thread pools (best effort)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene directory")
    s.add_argument("--preset", choices=("open", "occluded", "sparse"),
                   default="open")
    s.add_argument("--views", type=int, default=16)
    s.add_argument("--res", default="128x96")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("priors", help="raycast prior maps and init cloud")
    s.add_argument("--scene", required=True)
    s.add_argument("--eps", type=float, default=0.05)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--n-samples", type=int, default=20_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_priors)

    s = sub.add_parser("train", help="optimize splats on a scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--priors")
    s.add_argument("--config", help="TOML/JSON config; flags override")
    s.add_argument("--mode", choices=("building_only", "building_enhanced"))
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--no-depth-prior", action="store_true")
    s.add_argument("--no-normal-prior", action="store_true")
    s.add_argument("--init", default="prior_cloud",
                   help="prior_cloud or external:CLOUD.ply")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("extract", help="TSDF-fuse a checkpoint into a mesh")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--voxel", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("eval", help="score a reconstruction")
    s.add_argument("--recon", required=True, help="mesh or cloud PLY")
    s.add_argument("--reference", required=True, help="reference cloud PLY")
    s.add_argument("--renders-dir")
    s.add_argument("--images-dir")
    s.add_argument("--thresholds", default="0.1,0.2,0.5")
    s.add_argument("--voc-voxel", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="report JSON path")
    s.add_argument("--csv", help="append a CSV row here")
    s.add_argument("--label", default="")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run the ablation table")
    s.add_argument("--scene", required=True)
    s.add_argument("--priors", required=True)
    s.add_argument("--rows", help=f"comma list from {SWEEP_ROWS}")
    s.add_argument("--iters", type=int, default=2000)
    s.add_argument("--voxel", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _set_threads(args.threads)
        return args.func(args)
    except UsageError as e:
        return _fail(str(e), EXIT_USAGE)
    except EmptyResultError as e:
        return _fail(str(e), EXIT_EMPTY)


if __name__ == "__main__":
    sys.exit(main())
