"""Command-line pipeline: scene -> train -> estimate -> render/eval/nbv.

Every command writes its artifacts plus a manifest (config hash, seed,
input hashes, outputs, timings) into the output directory; `verify`
re-hashes the recorded inputs.  Exit codes: 0 success, 2 usage or config
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import evaluation, io_utils, planner, ufield
from .field import FieldConfig, init_field, load_checkpoint, save_checkpoint
from .geometry import BoxSceneSpec, CameraRig, build_box_scene, gt_render, sample_hemisphere_rig
from .grid import load_grid, save_grid
from .render import default_step, render_image
from .train import TrainConfig, TrainDataset, TrainingDiverged, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


DEFAULT_SCENE = {
    "seed": 0,
    "image": {"width": 64, "height": 64, "fov_deg": None},
    "box": {
        "center": [0.0, 0.0, 0.0],
        "outer_size": 1.0,
        "wall_thickness": 0.08,
        "opening_axis": "+x",
        "opening_fraction": 0.6,
        "wall_albedo": [0.45, 0.52, 0.62],
        "solid_density": 500.0,
    },
    "background": [1.0, 1.0, 1.0],
    "bbox_margin": 0.2,
    "rig": {
        "train": 5,
        "candidate": 50,
        "test": 12,
        "train_hemisphere": "-x",
        "cap_degrees": 90.0,
        "radius_scale": 3.0,
    },
    "quadrature_step": None,  # None -> half of a 64-cube voxel edge
}

DEFAULT_TRAIN = {
    "grid_resolution": 64,
    "iterations": 10000,
    "batch_rays": 4096,
    "k_train": 16,
    "lambda_reg": 0.001,
    "lr_density_mean": 0.1,
    "lr_density_var": 0.01,
    "lr_color": 0.1,
    "seed": 0,
}


def _merge(defaults: dict, override: dict) -> dict:
    out = json.loads(json.dumps(defaults))
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def _load_json(path) -> dict:
    if not os.path.isfile(path):
        raise UsageError(f"no such file: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"invalid JSON in {path}: {exc}") from exc


def scene_step(spec: dict, resolution: int = 64) -> float:
    """Default quadrature step for a scene: half the voxel edge at `resolution`."""
    if spec.get("quadrature_step"):
        return float(spec["quadrature_step"])
    scene = build_box_scene(BoxSceneSpec.from_dict(spec))
    return 0.5 * float(scene.bbox.size.min()) / (resolution - 1)


def load_scene_dir(scene_dir):
    """(spec dict, ground-truth scene, rig, images dict keyed by split)."""
    spec = _load_json(os.path.join(scene_dir, "scene.json"))
    scene = build_box_scene(BoxSceneSpec.from_dict(spec))
    rig = CameraRig.load(os.path.join(scene_dir, "rig.json"))
    images = {}
    for split in ("train", "candidate", "test"):
        imgs = []
        for j, _ in enumerate(rig.indices(split)):
            path = os.path.join(scene_dir, "images", f"{split}_{j:03d}.png")
            if os.path.isfile(path):
                imgs.append(io_utils.read_png(path))
        images[split] = imgs
    return spec, scene, rig, images


def cmd_scene(args) -> int:
    t0 = time.perf_counter()
    override = _load_json(args.spec) if args.spec else {}
    spec = _merge(DEFAULT_SCENE, override)
    if args.seed is not None:
        spec["seed"] = args.seed
    if args.emit_spec:
        with open(args.emit_spec, "w") as fh:
            json.dump(spec, fh, indent=1, sort_keys=True)
        print(f"wrote {args.emit_spec}")
        return EXIT_OK
    scene = build_box_scene(BoxSceneSpec.from_dict(spec))
    rig_spec = spec["rig"]
    rig = sample_hemisphere_rig(
        scene.bbox,
        train=rig_spec["train"], candidate=rig_spec["candidate"], test=rig_spec["test"],
        hemisphere=rig_spec["train_hemisphere"], cap_degrees=rig_spec["cap_degrees"],
        radius_scale=rig_spec["radius_scale"],
        width=spec["image"]["width"], height=spec["image"]["height"],
        fov_deg=spec["image"]["fov_deg"], seed=spec["seed"],
    )
    step = scene_step(spec)
    os.makedirs(args.out, exist_ok=True)
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "depth"), exist_ok=True)
    outputs = []
    counters = {"train": 0, "candidate": 0, "test": 0}
    for cam, split in zip(rig.cameras, rig.splits):
        j = counters[split]
        counters[split] += 1
        img, depth = gt_render(scene, cam, step)
        img_path = os.path.join(args.out, "images", f"{split}_{j:03d}.png")
        dep_path = os.path.join(args.out, "depth", f"{split}_{j:03d}.csv")
        io_utils.write_png(img, img_path)
        io_utils.write_csv_matrix(depth, dep_path)
        outputs += [img_path, dep_path]
    rig_path = os.path.join(args.out, "rig.json")
    rig.save(rig_path)
    spec_path = os.path.join(args.out, "scene.json")
    with open(spec_path, "w") as fh:
        json.dump(spec, fh, indent=1, sort_keys=True)
    outputs += [rig_path, spec_path]
    inputs = {args.spec: args.spec} if args.spec else {}
    io_utils.write_manifest(args.out, "scene", spec, spec["seed"], inputs, outputs,
                            {"wall_seconds": time.perf_counter() - t0})
    print(f"scene: {counters['train']} train / {counters['candidate']} candidate / "
          f"{counters['test']} test images in {args.out}")
    return EXIT_OK


def _train_config(args) -> dict:
    cfg = dict(DEFAULT_TRAIN)
    if args.config:
        cfg = _merge(cfg, _load_json(args.config))
    for key in ("iterations", "batch_rays", "k_train", "lambda_reg", "seed",
                "grid_resolution", "lr_density_mean", "lr_density_var", "lr_color"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = _train_config(args)
    spec, scene, rig, images = load_scene_dir(args.scene)
    if not images["train"]:
        raise UsageError(f"no training images found in {args.scene}")
    n = int(cfg["grid_resolution"])
    field = init_field((n, n, n), scene.bbox, FieldConfig(background=tuple(spec["background"])))
    train_cfg = TrainConfig(**{k: v for k, v in cfg.items() if k != "grid_resolution"})
    dataset = TrainDataset(rig.cameras_of("train"), images["train"])
    result = train(field, dataset, train_cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt_dir = os.path.join(args.out, "checkpoint")
    save_checkpoint(result.field, ckpt_dir,
                    metadata={"iterations": train_cfg.iterations, "seed": train_cfg.seed,
                              "scene": os.path.abspath(args.scene),
                              "color_model": "view_independent_grid"})
    log_path = os.path.join(args.out, "train_log.csv")
    with open(log_path, "w") as fh:
        fh.write("iteration,nll,regularizer,batch_psnr,wall_seconds\n")
        for row in result.log:
            fh.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r},{row[4]:.3f}\n")
    outputs = [os.path.join(ckpt_dir, f) for f in ("density.grid", "color.grid", "field.json")]
    inputs = {os.path.join(args.scene, "scene.json"): os.path.join(args.scene, "scene.json"),
              os.path.join(args.scene, "rig.json"): os.path.join(args.scene, "rig.json")}
    io_utils.write_manifest(args.out, "train", cfg, cfg["seed"], inputs,
                            outputs + [log_path], {"wall_seconds": time.perf_counter() - t0})
    final = result.log[-1] if result.log else (0, float("nan"), float("nan"), float("nan"), 0.0)
    print(f"train: {train_cfg.iterations} iterations, final batch PSNR {final[3]:.2f} dB")
    return EXIT_OK


def cmd_estimate(args) -> int:
    t0 = time.perf_counter()
    if not os.path.isdir(args.checkpoint):
        raise UsageError(f"no such checkpoint: {args.checkpoint}")
    field = load_checkpoint(args.checkpoint)
    if args.resolution is not None and tuple([args.resolution] * 3) != tuple(field.resolution):
        raise UsageError(
            f"requested resolution {args.resolution} does not match checkpoint {field.resolution}")
    spec, scene, rig, _ = load_scene_dir(args.scene)
    step = args.step or scene_step(spec, field.resolution[0])
    vh = ufield.estimate_uncertainty_field(field, rig.cameras_of("train"),
                                           tau=args.tau, step=step)
    os.makedirs(args.out, exist_ok=True)
    grid_path = os.path.join(args.out, "vh.grid")
    ply_path = os.path.join(args.out, "vh.ply")
    save_grid(vh.grid, grid_path)
    ufield.export_uncertainty_ply(vh, ply_path)
    inputs = {p: p for p in (os.path.join(args.checkpoint, "density.grid"),
                             os.path.join(args.scene, "rig.json"))}
    io_utils.write_manifest(args.out, "estimate",
                            {"tau": args.tau, "step": step}, spec["seed"], inputs,
                            [grid_path, ply_path],
                            {"wall_seconds": time.perf_counter() - t0},
                            extra={"unseen_fraction": vh.unseen_fraction()})
    print(f"estimate: tau={args.tau}, unseen fraction {vh.unseen_fraction():.3f}")
    return EXIT_OK


def _find_camera(rig: CameraRig, camera_id: str):
    try:
        split, num = camera_id.rsplit("_", 1)
        j = int(num)
    except ValueError as exc:
        raise UsageError(f"bad camera id {camera_id!r}, expected e.g. test_003") from exc
    idxs = rig.indices(split)
    if split not in ("train", "candidate", "test") or j >= len(idxs):
        raise UsageError(f"unknown camera id {camera_id!r}")
    return rig.cameras[idxs[j]], split, j


def cmd_render(args) -> int:
    t0 = time.perf_counter()
    field = load_checkpoint(args.checkpoint)
    spec, scene, rig, images = load_scene_dir(args.scene)
    camera, split, j = _find_camera(rig, args.camera)
    step = args.step or scene_step(spec, field.resolution[0])
    os.makedirs(args.out, exist_ok=True)
    mean_img, _ = render_image(field, camera, mode="mean", step=step, threads=args.threads)
    _, u_c = render_image(field, camera, K=args.k, seed=args.seed, mode="stochastic",
                          step=step, threads=args.threads)
    outputs = []

    def emit(name, img, csv_map=None):
        path = os.path.join(args.out, name)
        io_utils.write_png(img, path)
        outputs.append(path)
        if csv_map is not None:
            cpath = path.replace(".png", ".csv")
            io_utils.write_csv_matrix(csv_map, cpath)
            outputs.append(cpath)

    emit("rgb.png", mean_img)
    emit("u_c.png", io_utils.false_color(u_c), u_c)
    extra = {"color_model": "view_independent_grid"}
    if args.vh:
        vh_grid = load_grid(args.vh)
        vh = ufield.UncertaintyGrid(vh_grid, args.tau)
        u_h = ufield.uh_map(vh, field, camera, step=step, threads=args.threads)
        emit("u_h.png", io_utils.false_color(u_h), u_h)
        u = ufield.combined_pixel_uncertainty(u_c, u_h)
        emit("u.png", io_utils.false_color(u), u)
    gt = images[split][j] if j < len(images[split]) else None
    if gt is not None:
        extra["psnr_vs_gt"] = evaluation.psnr(mean_img, gt)
    io_utils.write_manifest(args.out, "render",
                            {"camera": args.camera, "k": args.k, "step": step, "tau": args.tau},
                            args.seed, {}, outputs,
                            {"wall_seconds": time.perf_counter() - t0}, extra=extra)
    msg = f"render: {args.camera}"
    if "psnr_vs_gt" in extra:
        msg += f", PSNR {extra['psnr_vs_gt']:.2f} dB"
    print(msg)
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    field = load_checkpoint(args.checkpoint)
    spec, scene, rig, images = load_scene_dir(args.scene)
    if not images["test"]:
        raise UsageError("scene dir has no test split")
    step = args.step or scene_step(spec, field.resolution[0])
    vh = None
    if args.vh:
        vh = ufield.UncertaintyGrid(load_grid(args.vh), args.tau)
    report = evaluation.eval_views(field, vh, rig.cameras_of("test"), images["test"],
                                   k_render=args.k, seed=args.seed, step=step,
                                   threads=args.threads, keep_curves=True)
    os.makedirs(args.out, exist_ok=True)
    curve_dir = os.path.join(args.out, "curves")
    os.makedirs(curve_dir, exist_ok=True)
    outputs = []
    csv_path = os.path.join(args.out, "report.csv")
    with open(csv_path, "w") as fh:
        fh.write("view_id,psnr,ause_uc,ause_uh,ause_combined\n")
        for v in report.views:
            fh.write(f"{v.view_id},{v.psnr!r},{v.ause_uc!r},{v.ause_uh!r},{v.ause_combined!r}\n")
    outputs.append(csv_path)
    json_path = os.path.join(args.out, "report.json")
    with open(json_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
    outputs.append(json_path)
    for v in report.views:
        for name, curve in v.curves.items():
            path = os.path.join(curve_dir, f"view_{v.view_id:03d}_{name}.csv")
            io_utils.write_csv_matrix(
                np.stack([curve.fractions, curve.by_uncertainty, curve.by_error]), path)
            outputs.append(path)
    io_utils.write_manifest(args.out, "eval", {"k": args.k, "step": step, "tau": args.tau},
                            args.seed, {}, outputs,
                            {"wall_seconds": time.perf_counter() - t0})
    print(f"eval: PSNR {report.mean_psnr:.2f} dB | AUSE U_C {report.mean_ause_uc:.4f} "
          f"U_H {report.mean_ause_uh:.4f} combined {report.mean_ause_combined:.4f}")
    return EXIT_OK


def _run_nbv_strategy(strategy, seed, initial_field, rig, images_by_index, spec,
                      train_cfg, args, step):
    cams = rig.cameras
    train_idx = rig.indices("train")
    cand_idx = rig.indices("candidate")
    test_idx = rig.indices("test")
    vh = ufield.estimate_uncertainty_field(initial_field, [cams[i] for i in train_idx],
                                           tau=args.tau, step=step)
    state = planner.NBVState(list(train_idx), list(cand_idx), initial_field.copy(), vh)
    pcfg = planner.PlannerConfig(n_per_round=args.n_per_round, rounds=args.rounds,
                                 strategy=strategy, seed=seed, tau=args.tau)
    rows = [{"round": 0, "psnr": planner.test_psnr(state.field, cams, images_by_index,
                                                   test_idx, step=step, threads=args.threads),
             "selected": [], "scores": []}]
    for rnd in range(args.rounds):
        cfg = TrainConfig(**{**train_cfg.__dict__, "seed": seed + 1000 * (rnd + 1)})
        state = planner.nbv_round(state, cams, images_by_index, cfg, pcfg,
                                  round_index=rnd, step=step, threads=args.threads)
        selected = [idx for r, idx, _ in state.history if r == rnd]
        scores = [s for r, _, s in state.history if r == rnd]
        rows.append({"round": rnd + 1,
                     "psnr": planner.test_psnr(state.field, cams, images_by_index,
                                               test_idx, step=step, threads=args.threads),
                     "selected": selected, "scores": scores})
    return state, rows


def cmd_nbv(args) -> int:
    t0 = time.perf_counter()
    spec, scene, rig, images = load_scene_dir(args.scene)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        raise UsageError("need at least one seed")
    needed = args.rounds * args.n_per_round
    if len(rig.indices("candidate")) < needed:
        raise UsageError(f"{len(rig.indices('candidate'))} candidates < budget {needed}")
    # Images indexed by global camera index.
    images_by_index = {}
    for split in ("train", "candidate", "test"):
        for j, idx in enumerate(rig.indices(split)):
            images_by_index[idx] = images[split][j]
    n = int(args.grid_resolution)
    step = args.step or scene_step(spec, n)
    base_train = {k: v for k, v in DEFAULT_TRAIN.items() if k != "grid_resolution"}
    if args.config:
        base_train = _merge(base_train, {k: v for k, v in _load_json(args.config).items()
                                         if k in base_train})
    if args.iterations is not None:
        base_train["iterations"] = args.iterations
    if args.batch_rays is not None:
        base_train["batch_rays"] = args.batch_rays
    if args.k_train is not None:
        base_train["k_train"] = args.k_train
    base_train["step"] = step
    os.makedirs(args.out, exist_ok=True)
    strategies = ("uncertainty", "random") if args.strategy == "both" else (args.strategy,)
    all_rows = []
    outputs = []
    for seed in seeds:
        train_cfg = TrainConfig(**{**base_train, "seed": seed})
        dataset = TrainDataset(rig.cameras_of("train"),
                               [images_by_index[i] for i in rig.indices("train")])
        initial = init_field((n, n, n), scene.bbox,
                             FieldConfig(background=tuple(spec["background"])))
        initial = train(initial, dataset, train_cfg).field
        for strategy in strategies:
            state, rows = _run_nbv_strategy(strategy, seed, initial, rig, images_by_index,
                                            spec, train_cfg, args, step)
            run_dir = os.path.join(args.out, f"{strategy}_seed{seed}")
            os.makedirs(run_dir, exist_ok=True)
            with open(os.path.join(run_dir, "rounds.json"), "w") as fh:
                json.dump(rows, fh, indent=1, sort_keys=True)
            ply_path = os.path.join(run_dir, f"vh_round_{args.rounds:02d}.ply")
            ufield.export_uncertainty_ply(state.vh, ply_path)
            outputs += [os.path.join(run_dir, "rounds.json"), ply_path]
            for row in rows:
                all_rows.append((strategy, seed, row["round"], row["psnr"]))
    curve_path = os.path.join(args.out, "curve.csv")
    with open(curve_path, "w") as fh:
        fh.write("strategy,seed,round,psnr\n")
        for strategy, seed, rnd, val in all_rows:
            fh.write(f"{strategy},{seed},{rnd},{val!r}\n")
    outputs.append(curve_path)
    io_utils.write_manifest(args.out, "nbv",
                            {"train": base_train, "n_per_round": args.n_per_round,
                             "rounds": args.rounds, "tau": args.tau,
                             "strategies": list(strategies)},
                            seeds, {}, outputs, {"wall_seconds": time.perf_counter() - t0})
    print(f"nbv: {len(strategies)} strategies x {len(seeds)} seeds -> {curve_path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    manifest = io_utils.load_manifest(args.dir)
    bad = []
    for path, digest in manifest.get("inputs", {}).items():
        if not os.path.isfile(path):
            bad.append(f"missing input {path}")
        elif io_utils.sha256_file(path) != digest:
            bad.append(f"hash mismatch for {path}")
    if bad:
        for line in bad:
            print(line, file=sys.stderr)
        return EXIT_USAGE
    print(f"verify: {len(manifest.get('inputs', {}))} inputs match {args.dir}/manifest.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uncfield", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scene", help="generate a procedural scene dataset")
    s.add_argument("--spec", help="scene spec JSON (defaults merged underneath)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--emit-spec", help="write the resolved default spec and exit")
    s.set_defaults(func=cmd_scene)

    t = sub.add_parser("train", help="train the stochastic field on a scene dir")
    t.add_argument("--scene", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="training config JSON; flags win")
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-rays", dest="batch_rays", type=int)
    t.add_argument("--k-train", dest="k_train", type=int)
    t.add_argument("--lambda-reg", dest="lambda_reg", type=float)
    t.add_argument("--lr-density-mean", dest="lr_density_mean", type=float)
    t.add_argument("--lr-density-var", dest="lr_density_var", type=float)
    t.add_argument("--lr-color", dest="lr_color", type=float)
    t.add_argument("--grid-resolution", dest="grid_resolution", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate", help="estimate the uncertainty field offline")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--tau", type=float, default=0.1)
    e.add_argument("--step", type=float)
    e.add_argument("--resolution", type=int)
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_estimate)

    r = sub.add_parser("render", help="render RGB and uncertainty maps for one camera")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--camera", required=True, help="e.g. test_003")
    r.add_argument("--out", required=True)
    r.add_argument("--vh", help="uncertainty grid file; omit to skip U_H outputs")
    r.add_argument("--tau", type=float, default=0.1)
    r.add_argument("--k", type=int, default=16)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--step", type=float)
    r.add_argument("--threads", type=int, default=1)
    r.set_defaults(func=cmd_render)

    v = sub.add_parser("eval", help="PSNR + AUSE report over the test split")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--vh")
    v.add_argument("--scene", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--tau", type=float, default=0.1)
    v.add_argument("--k", type=int, default=16)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--step", type=float)
    v.add_argument("--threads", type=int, default=1)
    v.set_defaults(func=cmd_eval)

    nb = sub.add_parser("nbv", help="next-best-view rounds for both strategies")
    nb.add_argument("--scene", required=True)
    nb.add_argument("--out", required=True)
    nb.add_argument("--config", help="training config JSON")
    nb.add_argument("--strategy", choices=["uncertainty", "random", "both"], default="both")
    nb.add_argument("--seeds", default="0,1,2")
    nb.add_argument("--rounds", type=int, default=1)
    nb.add_argument("--n-per-round", dest="n_per_round", type=int, default=10)
    nb.add_argument("--iterations", type=int)
    nb.add_argument("--batch-rays", dest="batch_rays", type=int)
    nb.add_argument("--k-train", dest="k_train", type=int)
    nb.add_argument("--grid-resolution", dest="grid_resolution", type=int, default=64)
    nb.add_argument("--tau", type=float, default=0.1)
    nb.add_argument("--step", type=float)
    nb.add_argument("--threads", type=int, default=1)
    nb.set_defaults(func=cmd_nbv)

    w = sub.add_parser("verify", help="re-hash a run directory's recorded inputs")
    w.add_argument("--dir", required=True)
    w.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
