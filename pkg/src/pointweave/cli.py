"""Batch command-line driver.

Subcommands: synth (render an oracle trajectory to a frame-exchange
directory), run (the lift -> reproject -> inpaint -> fuse pipeline with
oracle callbacks or a frame directory), dcm-train, dcm-eval, plus the x-t
slice smoothness diagnostic used by run and dcm-eval.

Exit codes are a stable contract: 0 success, 2 usage, 3 data error
(unreadable or malformed inputs), 4 numeric failure (degenerate alignment,
non-finite training loss). Reports are line-delimited JSON records so
metrics stay machine-parseable; every command is deterministic for a fixed
config and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import formats
from . import oracle as orc
from .camera import DepthMap, make_trajectory
from .consistency import (
    DcmNetwork,
    TrainConfig,
    TrainingSequence,
    consistency_loss,
    correct_sequence,
    load_network,
    save_network,
    train_dcm,
)
from .errors import (
    AlignmentError,
    DegenerateGeometryError,
    FormatError,
    PipelineError,
    PointweaveError,
    TrainingError,
    ValidationError,
)
from .mapping import PointCloudMap, fuse, initial_record, run_pipeline


class UsageError(PointweaveError):
    """Config or invocation problem the caller must fix (exit code 2)."""


_DESK = {
    "seed": 0,
    "poses": 7,
    "resolution": 64,
    "step": [0.08, 0.0, 0.0],
    "yaw_step": 0.0,
    "alpha": 50.0,
    "planted_scales": None,
    "train_resolution": 96,
    "sequences": 20,
    "holdout_sequences": 2,
    "iterations": 500,
    "batch_size": 4,
    "crop": 64,
    "lr": 1e-4,
    "base_channels": 8,
    "xt_row": None,
    "xt_pgm": False,
}

_PAPER = {
    "resolution": 384,
    "train_resolution": 448,
    "iterations": 20000,
    "crop": 384,
    "base_channels": 16,
}


def _load_config(args) -> dict:
    cfg = dict(_DESK)
    if args.preset == "paper":
        cfg.update(_PAPER)
    if args.config is not None:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                user = json.load(f)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise UsageError("config root must be a JSON object")
        for key in user:
            if key not in _DESK:
                raise UsageError(f"unknown config key {key!r}")
        cfg.update(user)
    if args.seed is not None:
        cfg["seed"] = args.seed
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    if not isinstance(cfg["poses"], int) or cfg["poses"] < 1:
        raise UsageError(f"pose count must be an integer >= 1, got {cfg['poses']!r}")
    for key in ("resolution", "train_resolution"):
        r = cfg[key]
        if not isinstance(r, int) or r < 4 or r % 4:
            raise UsageError(f"{key} must be a positive multiple of 4, got {r!r}")
    step = cfg["step"]
    if not (isinstance(step, (list, tuple)) and len(step) == 3):
        raise UsageError(f"step must be a 3-vector, got {step!r}")
    ps = cfg["planted_scales"]
    if ps is not None:
        if not isinstance(ps, (list, tuple)) or any(not (isinstance(x, (int, float)) and x > 0) for x in ps):
            raise UsageError("planted_scales must be a list of positive numbers")
        if len(ps) != cfg["poses"] - 1:
            raise UsageError(
                f"planted_scales must cover the {cfg['poses'] - 1} non-initial poses, got {len(ps)}"
            )
    if cfg["iterations"] < 0:
        raise UsageError(f"iterations must be >= 0, got {cfg['iterations']}")
    if cfg["sequences"] < 1 or cfg["holdout_sequences"] < 1:
        raise UsageError("sequence counts must be >= 1")


def xt_slice_tv(depth_seq, row: int) -> float:
    """Smoothness of one scanline tracked over time: stack `row` from each
    frame into an x-t image and average |temporal difference| over pixel
    pairs valid in both frames."""
    if len(depth_seq) < 2:
        raise ValidationError(f"x-t slice needs >= 2 frames, got {len(depth_seq)}")
    h, w = depth_seq[0].shape
    if not 0 <= row < h:
        raise ValidationError(f"row {row} outside height {h}")
    for d in depth_seq:
        if d.shape != (h, w):
            raise ValidationError("x-t slice frames must share one resolution")
    vals = np.stack([d.values[row] for d in depth_seq])
    ok = np.stack([d.valid[row] for d in depth_seq])
    pairs = ok[1:] & ok[:-1]
    if not np.any(pairs):
        raise DegenerateGeometryError(f"row {row} has no temporally valid pixel pairs")
    return float(np.abs(vals[1:] - vals[:-1])[pairs].mean())


def _emit(stream, record: dict) -> None:
    stream.write(json.dumps(record, sort_keys=True) + "\n")


def _scene_and_rigs(cfg: dict):
    scene = orc.make_scene(cfg["seed"])
    k = orc.desk_intrinsics(cfg["resolution"])
    rigs = make_trajectory(k, cfg["poses"], step_translation=tuple(cfg["step"]), yaw_step_deg=cfg["yaw_step"])
    return scene, rigs


# ----------------------------------------------------------------- synth


def cmd_synth(cfg: dict, out: str) -> int:
    scene, rigs = _scene_and_rigs(cfg)
    frames = orc.render_trajectory(scene, rigs)
    os.makedirs(out, exist_ok=True)
    for i, (rig, fr) in enumerate(zip(rigs, frames)):
        flow = occ = None
        if i > 0:
            res = orc.ground_truth_flow(scene, rigs[i - 1], rig)
            flow, occ = res.flow, res.occlusion
        formats.write_frame(out, i, rig, "oracle", color=fr.color, depth=fr.depth, flow=flow, occlusion=occ)
    _emit(sys.stdout, {"command": "synth", "frames": len(rigs), "out": out})
    return 0


# ------------------------------------------------------------------- run


def _oracle_callbacks(cfg: dict, scene):
    planted = cfg["planted_scales"]

    def inpaint(fid, rig, raw_color, hole_mask):
        return orc.render(scene, rig).color

    def depth_est(fid, rig, color):
        d = orc.render(scene, rig).depth
        if planted is not None:
            f = float(planted[fid - 1])
            return DepthMap(np.where(d.valid, f * d.values, 0.0), d.valid)
        return d

    return inpaint, depth_est


def _directory_callbacks(manifests: dict):
    def inpaint(fid, rig, raw_color, hole_mask):
        return formats.read_color_ppm(manifests[fid].resolve("color"))

    def depth_est(fid, rig, color):
        return formats.read_depth_pfm(manifests[fid].resolve("depth"))

    return inpaint, depth_est


def _sequence_report(cfg, scene, rigs, colors, aligned):
    """Consistency of the emitted depths, measured with oracle flow and a
    zero network (pure data term, no correction)."""
    from .consistency import SEQUENCE_LENGTH

    if scene is None or len(rigs) != SEQUENCE_LENGTH:
        return None
    flows, occs = [], []
    for i in range(len(rigs) - 1):
        res = orc.ground_truth_flow(scene, rigs[i], rigs[i + 1])
        flows.append(res.flow)
        occs.append(res.occlusion)
    gt = [orc.render(scene, rig).depth for rig in rigs]
    seq = TrainingSequence(colors=colors, depth_gt=gt, depth_init=aligned, flows=flows, occlusion=occs)
    return consistency_loss(seq, DcmNetwork(cfg["base_channels"], seed=0), alpha=cfg["alpha"])


def cmd_run(cfg: dict, out: str, dcm_path, frames_dir) -> int:
    scene = None
    if frames_dir is not None:
        paths = formats.list_frame_manifests(frames_dir)
        if not paths:
            raise FormatError(f"no frame manifests found under {frames_dir!r}")
        ms = [formats.read_manifest(p) for p in paths]
        by_id = {m.frame_id: m for m in ms}
        rigs = [m.rig for m in ms]
        init_color = formats.read_color_ppm(ms[0].resolve("color"))
        init_depth = formats.read_depth_pfm(ms[0].resolve("depth"))
        initial = initial_record(ms[0].frame_id, ms[0].rig, init_color, init_depth)
        inpaint, depth_est = _directory_callbacks(by_id)
    else:
        scene, rigs = _scene_and_rigs(cfg)
        fr0 = orc.render(scene, rigs[0])
        initial = initial_record(0, rigs[0], fr0.color, fr0.depth)
        inpaint, depth_est = _oracle_callbacks(cfg, scene)

    net = load_network(dcm_path) if dcm_path is not None else None
    estimates = {}

    def capturing_depth(fid, rig, color):
        d = depth_est(fid, rig, color)
        estimates[fid] = d
        return d

    records = []
    if len(rigs) > 1:
        mp = run_pipeline(
            initial, rigs[1:], inpaint, capturing_depth, dcm=net,
            on_frame=lambda rec, s, r: records.append((rec, s, r)),
        )
    else:
        mp = fuse(PointCloudMap(), initial, 1.0)

    os.makedirs(out, exist_ok=True)
    planted = cfg["planted_scales"]
    inpaint_masks = {initial.frame_id: initial.inpaint_mask}
    colors, est_seq, final_seq = [initial.color], [initial.depth], [initial.depth]
    report_rows = []
    all_frames = [(initial, 1.0, 0.0)] + records
    for rec, s, resid in all_frames:
        inpaint_masks[rec.frame_id] = rec.inpaint_mask
        aligned = DepthMap(s * rec.depth.values, rec.depth.valid)
        if rec.frame_id != initial.frame_id:
            colors.append(rec.color)
            est = estimates[rec.frame_id]
            est_seq.append(DepthMap(s * est.values, est.valid))
            final_seq.append(aligned)
        formats.write_frame(
            out, rec.frame_id, rec.rig, "engine",
            color=rec.color, raw_color=rec.raw_color, depth=aligned,
            inpaint_mask=rec.inpaint_mask, loss_mask=rec.inpaint_mask,
        )
        row = {
            "type": "frame", "frame": rec.frame_id, "scale": s, "residual": resid,
            "hole_fraction": float(rec.inpaint_mask.mean()),
        }
        if planted is not None and rec.frame_id != initial.frame_id:
            row["planted"] = float(planted[rec.frame_id - 1])
        report_rows.append(row)

    gp = mp.global_points
    conf = np.empty(len(gp))
    pos = 0
    for fid, cloud in mp.fragments:
        n = len(cloud)
        r, c = cloud.source_pixel[:, 1], cloud.source_pixel[:, 2]
        conf[pos : pos + n] = 1.0 - inpaint_masks[fid][r, c]
        pos += n
    seed_cloud = formats.GaussianSeedCloud(gp.positions, gp.colors, conf)
    formats.write_ply_seeds(os.path.join(out, "seeds.ply"), seed_cloud)

    row_idx = cfg["xt_row"] if cfg["xt_row"] is not None else cfg["resolution"] // 2
    tv_est = tv_final = None
    if len(final_seq) >= 2:
        tv_est = xt_slice_tv(est_seq, row_idx)
        tv_final = xt_slice_tv(final_seq, row_idx)
    if cfg["xt_pgm"] and len(final_seq) >= 2:
        stack = np.stack([d.values[row_idx] for d in final_seq])
        peak = stack.max()
        formats.write_gray_pgm(os.path.join(out, "xt_slice.pgm"), stack / peak if peak > 0 else stack)

    summary = {
        "type": "summary", "frames": len(all_frames), "points": mp.point_count,
        "sequence_lc": _sequence_report(cfg, scene, rigs, colors, final_seq),
        "xt_row": row_idx, "xt_tv_estimator": tv_est, "xt_tv_final": tv_final,
        "ply": os.path.join(out, "seeds.ply"),
    }
    report_rows.append(summary)
    with open(os.path.join(out, "report.jsonl"), "w", encoding="utf-8") as f:
        for row in report_rows:
            _emit(f, row)
    _emit(sys.stdout, summary)
    return 0


# ------------------------------------------------------------------- dcm


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        iterations=cfg["iterations"], batch_size=cfg["batch_size"], crop=cfg["crop"],
        lr=cfg["lr"], alpha=cfg["alpha"], base_channels=cfg["base_channels"], seed=cfg["seed"],
    )


def cmd_dcm_train(cfg: dict, out: str) -> int:
    dataset = orc.make_training_set(cfg["seed"], cfg["sequences"], resolution=cfg["train_resolution"])
    rows = []
    net = train_dcm(dataset, _train_config(cfg), on_iteration=rows.append)
    os.makedirs(out, exist_ok=True)
    ckpt = os.path.join(out, "dcm.ckpt")
    save_network(ckpt, net)
    with open(os.path.join(out, "loss_curve.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["iteration", "loss", "consistency", "depth"])
        writer.writeheader()
        writer.writerows(rows)
    _emit(sys.stdout, {
        "command": "dcm-train", "iterations": cfg["iterations"],
        "final_loss": rows[-1]["loss"] if rows else None, "checkpoint": ckpt,
    })
    return 0


def cmd_dcm_eval(cfg: dict, dcm_path) -> int:
    holdout = orc.make_training_set(cfg["seed"] + 1, cfg["holdout_sequences"], resolution=cfg["train_resolution"])
    zero = DcmNetwork(cfg["base_channels"], seed=0)
    net = load_network(dcm_path) if dcm_path is not None else zero
    row_idx = cfg["xt_row"] if cfg["xt_row"] is not None else cfg["train_resolution"] // 2
    befores, afters, ratios = [], [], []
    for i, seq in enumerate(holdout):
        before = consistency_loss(seq, zero, alpha=cfg["alpha"])
        after = consistency_loss(seq, net, alpha=cfg["alpha"])
        tv_before = xt_slice_tv(seq.depth_init, row_idx)
        tv_after = xt_slice_tv(correct_sequence(seq, net, alpha=cfg["alpha"]), row_idx)
        ratio = tv_after / tv_before if tv_before > 0 else 1.0
        befores.append(before)
        afters.append(after)
        ratios.append(ratio)
        _emit(sys.stdout, {
            "type": "sequence", "index": i, "lc_before": before, "lc_after": after,
            "tv_before": tv_before, "tv_after": tv_after, "tv_ratio": ratio,
        })
    _emit(sys.stdout, {
        "type": "summary", "sequences": len(holdout),
        "lc_before_mean": float(np.mean(befores)), "lc_after_mean": float(np.mean(afters)),
        "tv_ratio_mean": float(np.mean(ratios)),
    })
    return 0


# ------------------------------------------------------------------ main


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointweave", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")
    for name, needs_out in (("synth", True), ("run", True), ("dcm-train", True), ("dcm-eval", False)):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; keys override the preset")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--preset", choices=("desk", "paper"), default="desk")
        p.add_argument("--out", required=needs_out, help="output directory")
        p.add_argument("--dcm", help="consistency-network checkpoint path")
        p.add_argument("--frames", help="frame-exchange input directory (run only)")
        p.add_argument("--xt-pgm", action="store_true", help="also write the x-t slice as a PGM image")
    return parser


def _dispatch(args, cfg: dict) -> int:
    if args.xt_pgm:
        cfg["xt_pgm"] = True
    if args.command == "synth":
        return cmd_synth(cfg, args.out)
    if args.command == "run":
        return cmd_run(cfg, args.out, args.dcm, args.frames)
    if args.command == "dcm-train":
        return cmd_dcm_train(cfg, args.out)
    if args.command == "dcm-eval":
        return cmd_dcm_eval(cfg, args.dcm)
    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = _load_config(args)
        return _dispatch(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        data = isinstance(exc.__cause__, (FormatError, OSError))
        print(f"pipeline error: {exc}", file=sys.stderr)
        return 3 if data else 4
    except (DegenerateGeometryError, AlignmentError, TrainingError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (FormatError, ValidationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
