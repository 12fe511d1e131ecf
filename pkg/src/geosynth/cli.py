"""Command-line interface.

Subcommands: gen, train, finetune, render, eval, depth, gradcheck. All accept
--config (TOML) and --seed. Exit codes: 0 success, 1 validation/usage error,
2 runtime error. Report paths write figures next to their delimited outputs.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


class ValidationError(Exception):
    pass


def build_parser():
    p = _Parser(prog="geosynth", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="TOML configuration file")
        sp.add_argument("--seed", type=int, help="override every seed in the config")

    g = sub.add_parser("gen", help="render a synthetic dataset to a directory")
    common(g)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--no-depth", action="store_true", help="omit ground-truth depth maps")

    t = sub.add_parser("train", help="train from random initialization")
    common(t)
    t.add_argument("--data", type=Path, nargs="+", required=True, help="dataset directories")
    t.add_argument("--out", type=Path, required=True, help="run directory")
    t.add_argument("--iterations", type=int)
    t.add_argument("--rgbd", action="store_true", help="feed low-res depth guidance")
    t.add_argument("--no-holdout", action="store_true",
                   help="train on every view instead of excluding the held-out eighth")

    f = sub.add_parser("finetune", help="resume a checkpoint, optimize the color loss only")
    common(f)
    f.add_argument("--checkpoint", type=Path, required=True)
    f.add_argument("--data", type=Path, nargs="+", required=True)
    f.add_argument("--out", type=Path, required=True)
    f.add_argument("--iterations", type=int)
    f.add_argument("--no-holdout", action="store_true")

    r = sub.add_parser("render", help="render one view's pose to PNG + PFM")
    common(r)
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--data", type=Path, required=True)
    r.add_argument("--view", type=int, required=True, help="view id whose pose to render")
    r.add_argument("--out", type=Path, required=True, help="output directory")
    r.add_argument("--dump-depth", action="store_true",
                   help="write per-level geometry depth maps under debug/")

    e = sub.add_parser("eval", help="held-out-view evaluation report (CSV + figures)")
    common(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True, help="report CSV path")

    d = sub.add_parser("depth", help="dump geometry-reasoner depth maps as PFM")
    common(d)
    d.add_argument("--checkpoint", type=Path, required=True)
    d.add_argument("--data", type=Path, required=True)
    d.add_argument("--out", type=Path, required=True, help="output directory")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification suite")
    common(gc)
    return p


def _load(args, mode=None):
    from . import config as configmod

    overrides = {}
    if getattr(args, "iterations", None):
        overrides["train.iterations"] = args.iterations
    if getattr(args, "rgbd", False):
        overrides["geometry.rgbd"] = True
    if args.seed is not None:
        overrides["train.seed"] = args.seed
        overrides["scene.seed"] = args.seed
        overrides["eval.seed"] = args.seed
    return configmod.load_config(args.config, overrides)


def _model_for(cfg, checkpoint=None):
    from . import pipeline

    model = pipeline.Model(planes=tuple(cfg["geometry"]["planes"]),
                           rgbd=cfg["geometry"]["rgbd"],
                           delta_weighted=cfg["renderer"]["delta_weighted"])
    if checkpoint is not None:
        model.load(checkpoint)
    else:
        model.initialize(cfg["train"]["seed"])
    return model


def _scene_datasets(cfg, paths, exclude_holdout=True):
    from .metrics import holdout_split
    from .scenes import load_dataset
    from .train import SceneData

    scenes = []
    for path in paths:
        if not (Path(path) / "cameras.json").exists():
            raise ValidationError(f"{path} is not a dataset directory (no cameras.json)")
        if exclude_holdout:
            n = len(load_dataset(path))
            _, held = holdout_split(n, cfg["eval"]["seed"])
            ids = sorted(r.view_id for r in load_dataset(path))
            exclude = [ids[i] for i in held]
        else:
            exclude = []
        scenes.append(SceneData(path, exclude_ids=exclude))
    return scenes


def _guidance_fn(cfg):
    import torch

    from .train import corrupt_guidance

    if not cfg["geometry"]["rgbd"]:
        return None

    def fn(sources):
        near = min(r.camera.near for r in sources)
        far = max(r.camera.far for r in sources)
        planes = np.linspace(near, far, cfg["geometry"]["planes"][2])
        rng = np.random.default_rng(cfg["train"]["seed"] + 7)
        gs = [corrupt_guidance(r.depth, r.camera, planes, cfg["geometry"]["rgbd_drop"], rng)
              for r in sources]
        return torch.stack([torch.as_tensor(g) for g in gs])

    return fn


def cmd_gen(args):
    from . import config as configmod
    from .scenes import generate_dataset

    cfg = _load(args)
    scene, rig = configmod.build_scene(cfg)
    out = generate_dataset(scene, rig, cfg["scene"]["n_views"], args.out,
                           no_depth=args.no_depth or cfg["scene"]["no_depth"])
    print(f"dataset written to {out}")
    return 0


def cmd_train(args, mode="generalizable", checkpoint=None):
    from . import config as configmod
    from .figures import loss_curve_figure
    from .train import Trainer

    cfg = _load(args)
    tc = configmod.train_config(cfg, mode=mode)
    model = _model_for(cfg, checkpoint)
    scenes = _scene_datasets(cfg, args.data, exclude_holdout=not args.no_holdout)
    run_name = "finetune" if mode == "finetune" else "train"
    trainer = Trainer(model, scenes, tc, args.out, run_name=run_name)
    curve = trainer.run()
    fig = loss_curve_figure(curve)
    print(f"loss curve: {curve}\nfigure: {fig}\ncheckpoint: "
          f"{Path(args.out) / (run_name + '_final.bin')}")
    return 0


def cmd_finetune(args):
    return cmd_train(args, mode="finetune", checkpoint=args.checkpoint)


def cmd_render(args):
    from . import config as configmod, pipeline
    from .figures import depth_figure
    from .scenes import load_dataset, save_image_png, select_source_views, write_pfm

    cfg = _load(args)
    model = _model_for(cfg, args.checkpoint)
    records = load_dataset(args.data)
    by_id = {r.view_id: r for r in records}
    if args.view not in by_id:
        raise ValidationError(f"view {args.view} not in dataset")
    target = by_id[args.view]
    pool = [r for r in records if r.view_id != args.view]
    v = min(cfg["eval"]["v_eval"], len(pool))
    sources = select_source_views(target.camera, pool, v)
    guidance_fn = _guidance_fn(cfg)
    guidance = guidance_fn(sources) if guidance_fn else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    image, depth = pipeline.render_image(
        model, sources, target.camera, n_coarse=cfg["sampler"]["n_coarse"],
        n_fine=cfg["sampler"]["n_fine"], chunk=cfg["renderer"]["eval_chunk"],
        guidance=guidance)
    save_image_png(out_dir / f"render_{args.view:03d}.png", image)
    write_pfm(out_dir / f"render_{args.view:03d}.pfm", depth)
    depth_figure(depth, out_dir / f"render_{args.view:03d}_depth.png",
                 target.camera.near, target.camera.far)
    if args.dump_depth:
        _dump_geometry_depths(model, sources, guidance, out_dir / "debug")
    print(f"rendered view {args.view} to {out_dir}")
    return 0


def _dump_geometry_depths(model, sources, guidance, out_dir):
    import torch

    from . import pipeline
    from .scenes import write_pfm

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    with torch.no_grad():
        geom = pipeline.run_geometry(model, sources, guidance=guidance)
    for level in (0, 1, 2):
        for i, r in enumerate(sources):
            write_pfm(out_dir / f"depth_l{level}_view{r.view_id:03d}.pfm",
                      geom.depth[level][i].cpu().numpy())


def cmd_eval(args):
    from . import config as configmod
    from .figures import depth_figure, eval_report_figure
    from .metrics import evaluate_holdout
    from .scenes import load_dataset, save_image_png, write_pfm

    cfg = _load(args)
    model = _model_for(cfg, args.checkpoint)
    records = load_dataset(args.data)
    report, renders = evaluate_holdout(
        model, records, cfg["eval"]["seed"], v_eval=cfg["eval"]["v_eval"],
        n_coarse=cfg["sampler"]["n_coarse"], n_fine=cfg["sampler"]["n_fine"],
        fingerprint=configmod.fingerprint(cfg), guidance_fn=_guidance_fn(cfg),
        chunk=cfg["renderer"]["eval_chunk"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    eval_report_figure(report, out.with_suffix(".png"))
    for vid, (image, depth) in renders.items():
        save_image_png(out.parent / f"eval_view{vid:03d}.png", image)
        write_pfm(out.parent / f"eval_view{vid:03d}.pfm", depth)
        depth_figure(depth, out.parent / f"eval_view{vid:03d}_depth.png")
    print(f"held-out views {report.held_out}: mean PSNR {report.mean_psnr:.2f} dB, "
          f"mean SSIM {report.mean_ssim:.4f}\nreport: {out}")
    return 0


def cmd_depth(args):
    from . import config as configmod
    from .scenes import load_dataset

    cfg = _load(args)
    model = _model_for(cfg, args.checkpoint)
    records = load_dataset(args.data)
    guidance_fn = _guidance_fn(cfg)
    guidance = guidance_fn(records) if guidance_fn else None
    _dump_geometry_depths(model, records, guidance, args.out)
    print(f"geometry depth maps written to {args.out}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_gradcheck

    results = run_gradcheck(verbose=True)
    worst = max(results.values())
    print(f"worst {worst:.3e} (tolerance {TOLERANCE:g})")
    return 0 if worst < TOLERANCE else 1


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handlers = {
        "gen": cmd_gen, "train": cmd_train, "finetune": cmd_finetune,
        "render": cmd_render, "eval": cmd_eval, "depth": cmd_depth,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ValidationError,) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        kind = type(e).__name__
        if kind in ("ConfigError", "SceneError", "CameraError", "FileNotFoundError"):
            print(f"error: {e}", file=sys.stderr)
            return 1
        print(f"runtime error ({kind}): {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
