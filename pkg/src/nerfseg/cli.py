"""Command line surface: one subcommand per pipeline stage.

Artifacts live under --out with fixed names, so the stages chain without
extra plumbing:

  synth         scene_gt.json, train_rgb/, train_mask/, train_multiclass/,
                heldout_rgb/, heldout_mask/, heldout_multiclass/
  train         checkpoint_stage1.ckpt, train_log_stage1.csv
  finetune      checkpoint_stage2.ckpt, train_log_stage2.csv
  joint         checkpoint_joint.ckpt, train_log_joint.csv
  sa3d          cloud_sa3d.ply
  extract       cloud_invnerf.ply
  cluster       clusters.ply, count_report.csv
  eval          eval_report.csv, renders/
  density-diff  density_delta.csv

Every write is atomic, so rerunning a stage replaces its outputs without
ever leaving a partial file. With a fixed --seed and one thread, reruns
produce byte-identical checkpoints and result CSVs (the train log's
wall-clock seconds column is the one exception).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _build_parser():
    # the shared flags parse in either position: nerfseg --out DIR synth and
    # nerfseg synth --out DIR. The subcommand copies default to SUPPRESS so a
    # second parse never clobbers values the top-level parse already set.
    def shared_flags(parser, suppress):
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--config", metavar="PATH", default=d(None),
                            help="pipeline config JSON (default: built-in defaults)")
        parser.add_argument("--out", metavar="DIR", default=d("runs/default"),
                            help="artifact directory")
        parser.add_argument("--seed", metavar="U64", type=int, default=d(None),
                            help="override every RNG seed")
        parser.add_argument("--threads", metavar="N", type=int, default=d(None),
                            help="cap BLAS/worker threads")
        # --set accumulates across both positions, so the subcommand copy
        # collects into its own dest and _load_config concatenates
        parser.add_argument(
            "--set",
            metavar="KEY=VALUE",
            action="append",
            default=[],
            dest="overrides_sub" if suppress else "overrides",
            help="config override, e.g. --set train_stage1.steps=500 (repeatable)",
        )

    common = argparse.ArgumentParser(add_help=False)
    shared_flags(common, suppress=True)
    p = argparse.ArgumentParser(
        prog="nerfseg",
        description="Radiance-field orchard segmentation pipeline",
    )
    shared_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.add_parser("synth", parents=[common], help="generate the synthetic orchard datasets")
    sub.add_parser("train", parents=[common], help="stage 1: fit the rgb field")
    ft = sub.add_parser("finetune", parents=[common],
                        help="stage 2: fine-tune on masks (same loss, mask targets)")
    ft.add_argument("--masks", metavar="DIR", help="mask dataset dir (default OUT/train_mask)")
    sub.add_parser("joint", parents=[common], help="baseline: train rgb + mask head jointly")
    sa = sub.add_parser("sa3d", parents=[common],
                        help="baseline: back-project masks through the frozen stage-1 field")
    sa.add_argument("--masks", metavar="DIR", help="mask dataset dir (default OUT/train_mask)")
    sub.add_parser("extract", parents=[common], help="threshold the fine-tuned density into a point cloud")
    cl = sub.add_parser("cluster", parents=[common], help="cluster a cloud and count fruits")
    cl.add_argument("--cloud", metavar="PLY", help="input cloud (default OUT/cloud_invnerf.ply)")
    sub.add_parser("eval", parents=[common], help="score held-out views for every checkpoint present")
    sub.add_parser("density-diff", parents=[common],
                   help="density change profiles between stage 1 and stage 2")
    return p


def _load_config(args):
    from .config import apply_overrides, config_from_dict

    if args.config:
        with open(args.config) as f:
            data = json.load(f)
    else:
        data = {}
    overrides = list(args.overrides) + list(getattr(args, "overrides_sub", []))
    apply_overrides(data, overrides)
    cfg = config_from_dict(data)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _progress(stage):
    def cb(step, total, loss, elapsed):
        rate = elapsed / step
        eta = rate * (total - step)
        print(
            f"[{stage}] step {step}/{total} loss {loss:.6f} eta {eta:.0f}s",
            file=sys.stderr,
            flush=True,
        )

    return cb


def _need(path, what):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing {what}: {path} (run the producing stage first)")
    return path


def _out(args, name):
    return os.path.join(args.out, name)


def cmd_synth(args, cfg):
    from .dataio import Dataset, atomic_write_text, save_dataset
    from .scene import generate_orchard, ray_trace_view

    scene = generate_orchard(cfg.scene)
    train_cams, held_cams = cfg.make_cameras()
    n_k = scene.n_classes
    levels = [(k + 1) / n_k for k in range(n_k)]
    fruit_classes = set(range(1, n_k + 1))

    for prefix, cams in (("train", train_cams), ("heldout", held_cams)):
        rgb = Dataset("rgb", [(c, ray_trace_view(scene, c, "rgb")) for c in cams])
        mask = Dataset(
            "binary_mask",
            [(c, ray_trace_view(scene, c, "mask", target_classes=fruit_classes)) for c in cams],
            class_levels=[1.0],
        )
        multi = Dataset(
            "multiclass_mask",
            [(c, ray_trace_view(scene, c, "multiclass", class_levels=levels)) for c in cams],
            class_levels=levels,
        )
        save_dataset(rgb, _out(args, f"{prefix}_rgb"))
        save_dataset(mask, _out(args, f"{prefix}_mask"))
        save_dataset(multi, _out(args, f"{prefix}_multiclass"))

    gt = {
        "fruit_count": cfg.scene.fruit_count,
        "fruit_radius": cfg.scene.fruit_radius,
        "fruits": [
            {"class_id": f.class_id, "center": [float(v) for v in f.center], "radius": f.radius}
            for f in scene.fruits
        ],
        "canopy_center": [float(v) for v in cfg.scene.canopy_center],
        "canopy_radius": cfg.scene.canopy_radius,
    }
    atomic_write_text(_out(args, "scene_gt.json"), json.dumps(gt, indent=2) + "\n")
    print(
        f"synth: {len(train_cams)} train + {len(held_cams)} held-out views, "
        f"{cfg.scene.fruit_count} fruits -> {args.out}",
        file=sys.stderr,
    )
    return 0


def cmd_train(args, cfg):
    from .dataio import load_dataset, save_checkpoint
    from .training import train, write_train_log

    ds = load_dataset(_need(_out(args, "train_rgb"), "rgb dataset"))
    ckpt, log = train(
        ds, cfg.train_stage1, cfg.field, cfg.render_config(), progress=_progress("stage1")
    )
    save_checkpoint(ckpt, _out(args, "checkpoint_stage1.ckpt"))
    write_train_log(log, _out(args, "train_log_stage1.csv"))
    return 0


def cmd_finetune(args, cfg):
    from .dataio import load_checkpoint, load_dataset, save_checkpoint
    from .training import train, write_train_log

    init = load_checkpoint(
        _need(_out(args, "checkpoint_stage1.ckpt"), "stage-1 checkpoint"), expect_config=cfg.field
    )
    mask_dir = args.masks or _out(args, "train_mask")
    ds = load_dataset(_need(mask_dir, "mask dataset"))
    ckpt, log = train(
        ds,
        cfg.train_stage2,
        cfg.field,
        cfg.render_config(),
        init=init,
        progress=_progress("stage2"),
    )
    save_checkpoint(ckpt, _out(args, "checkpoint_stage2.ckpt"))
    write_train_log(log, _out(args, "train_log_stage2.csv"))
    return 0


def cmd_joint(args, cfg):
    import dataclasses

    from .dataio import load_dataset, save_checkpoint
    from .training import train, write_train_log

    rgb = load_dataset(_need(_out(args, "train_rgb"), "rgb dataset"))
    mask = load_dataset(_need(_out(args, "train_mask"), "mask dataset"))
    field_cfg = dataclasses.replace(cfg.field, head_type="rgb_sigma_mask")
    ckpt, log = train(
        rgb,
        cfg.joint,
        field_cfg,
        cfg.render_config(),
        mask_dataset=mask,
        progress=_progress("joint"),
    )
    save_checkpoint(ckpt, _out(args, "checkpoint_joint.ckpt"))
    write_train_log(log, _out(args, "train_log_joint.csv"))
    return 0


def cmd_sa3d(args, cfg):
    from .dataio import load_checkpoint, load_dataset, write_ply
    from .extract import sa3d_backproject

    ckpt = load_checkpoint(_need(_out(args, "checkpoint_stage1.ckpt"), "stage-1 checkpoint"))
    mask_dir = args.masks or _out(args, "train_mask")
    ds = load_dataset(_need(mask_dir, "mask dataset"))
    cloud = sa3d_backproject(ckpt, ds, cfg.extract, cfg.render_config(jitter=False))
    write_ply(cloud, _out(args, "cloud_sa3d.ply"))
    print(f"sa3d: {len(cloud)} points -> cloud_sa3d.ply", file=sys.stderr)
    return 0


def cmd_extract(args, cfg):
    from .dataio import load_checkpoint, write_ply
    from .extract import extract_grid

    ckpt = load_checkpoint(_need(_out(args, "checkpoint_stage2.ckpt"), "stage-2 checkpoint"))
    cloud = extract_grid(ckpt, cfg.extract)
    write_ply(cloud, _out(args, "cloud_invnerf.ply"))
    print(f"extract: {len(cloud)} points -> cloud_invnerf.ply", file=sys.stderr)
    return 0


def cmd_cluster(args, cfg):
    from .clustering import cluster_pipeline
    from .dataio import read_ply, write_csv, write_ply

    cloud_path = args.cloud or _out(args, "cloud_invnerf.ply")
    cloud = read_ply(_need(cloud_path, "point cloud"))
    gt_count = None
    gt_path = _out(args, "scene_gt.json")
    if os.path.exists(gt_path):
        with open(gt_path) as f:
            gt_count = int(json.load(f)["fruit_count"])
    clustered, report = cluster_pipeline(cloud, cfg.cluster, ground_truth_count=gt_count)
    write_ply(clustered, _out(args, "clusters.ply"))
    write_csv(
        _out(args, "count_report.csv"),
        ("kind", "cluster_id", "size", "cx", "cy", "cz"),
        report.rows(),
    )
    gt_text = "unknown" if gt_count is None else str(gt_count)
    print(
        f"cluster: predicted {report.predicted_count} fruits (ground truth {gt_text})",
        file=sys.stderr,
    )
    return 0


def cmd_eval(args, cfg):
    from .dataio import load_checkpoint, load_dataset, write_ppm, write_pgm
    from .metrics import render_eval_views, write_eval_report_csv

    pairs = []  # (checkpoint path, dataset dir, tag)
    for name, ds_dir in (
        ("checkpoint_stage1.ckpt", "heldout_rgb"),
        ("checkpoint_stage2.ckpt", "heldout_mask"),
    ):
        if os.path.exists(_out(args, name)):
            pairs.append((name, ds_dir))
    if os.path.exists(_out(args, "checkpoint_joint.ckpt")):
        pairs.append(("checkpoint_joint.ckpt", "heldout_rgb"))
        pairs.append(("checkpoint_joint.ckpt", "heldout_mask"))
    if not pairs:
        raise FileNotFoundError(f"missing checkpoint: none of stage1/stage2/joint found in {args.out}")

    render_cfg = cfg.render_config(jitter=False)
    renders_dir = _out(args, "renders")
    os.makedirs(renders_dir, exist_ok=True)
    rows = []
    for ckpt_name, ds_dir in pairs:
        ckpt = load_checkpoint(_out(args, ckpt_name))
        ds = load_dataset(_need(_out(args, ds_dir), f"dataset {ds_dir}"))
        held = cfg.eval.heldout_indices
        held = list(range(len(ds.frames))) if held is None else list(held)
        images, view_rows = render_eval_views(ckpt, ds, held, render_cfg)
        tag = ckpt.stage
        for v, img in images.items():
            arr = np.clip(np.asarray(img), 0.0, 1.0)
            out_img = np.round(arr * 255.0).astype(np.uint8)
            if out_img.ndim == 3:
                write_ppm(os.path.join(renders_dir, f"{tag}_{ds_dir}_view{v:02d}.ppm"), out_img)
            else:
                write_pgm(os.path.join(renders_dir, f"{tag}_{ds_dir}_view{v:02d}.pgm"), out_img)
        rows.extend((f"{tag}/{ds_dir}/view{v:02d}", metric, value) for v, metric, value in view_rows)
    write_eval_report_csv(rows, _out(args, "eval_report.csv"))
    for row in rows:
        print(f"eval: {row[0]} {row[1]} = {row[2]:.4f}", file=sys.stderr)
    return 0


def cmd_density_diff(args, cfg):
    from .dataio import load_checkpoint, load_dataset
    from .metrics import density_delta, write_density_delta_csv

    pre = load_checkpoint(_need(_out(args, "checkpoint_stage1.ckpt"), "stage-1 checkpoint"))
    post = load_checkpoint(_need(_out(args, "checkpoint_stage2.ckpt"), "stage-2 checkpoint"))
    masks = load_dataset(_need(_out(args, "train_mask"), "mask dataset"))
    profiles, summary = density_delta(
        pre,
        post,
        masks,
        n_rays_per_category=cfg.eval.density_rays_per_category,
        samples_per_ray=cfg.eval.density_samples_per_ray,
        seed=cfg.eval.rng_seed,
    )
    write_density_delta_csv(profiles, _out(args, "density_delta.csv"))
    print(
        f"density-diff: mean delta object {summary['object']:.4f}, "
        f"background {summary['background']:.4f}",
        file=sys.stderr,
    )
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "joint": cmd_joint,
    "sa3d": cmd_sa3d,
    "extract": cmd_extract,
    "cluster": cmd_cluster,
    "eval": cmd_eval,
    "density-diff": cmd_density_diff,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return 2
    if args.threads is not None:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=max(1, args.threads))
    try:
        cfg = _load_config(args)
        os.makedirs(args.out, exist_ok=True)
        from .config import save_config

        save_config(cfg, _out(args, "resolved_config.json"))
        return _COMMANDS[args.command](args, cfg)
    except Exception as e:  # one-line diagnostic, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
