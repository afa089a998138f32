"""Command-line entry point ``uniugg-mini``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .conditioner import VOCAB, build_qa_items, save_qa
from .config import RunConfig, default_stage_config
from .data import generate_pairs, load_pairs
from .errors import ConfigurationError, GenerationError, NumericError, ValidationError
from .geometry import Pose, SceneConfig
from .pipeline import Pipeline, evaluate_pairs, scale_from_reference
from .scene_io import load_scene_pair, save_scene_pair, write_f32
from .training import configure_determinism, run_stage

log = logging.getLogger("uniugg_mini")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def stage_config(stage: str, args) -> RunConfig:
    """Stage defaults, then the JSON config file, then ``--set key=value`` overrides."""
    cfg = default_stage_config(stage)
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        cfg = cfg.override(data)
    updates = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        updates[key] = _parse_value(value)
    for key, value in (("out_dir", args.out_dir), ("dataset.data_dir", args.data_dir)):
        if value is not None:
            updates[key] = value
    updates["stage"] = stage
    return cfg.override(updates)


def _train(stage: str, args, init_ckpt: str | None = None) -> int:
    cfg = stage_config(stage, args)
    if init_ckpt is not None:
        cfg = cfg.override({"init_ckpt": init_ckpt})
    result = run_stage(cfg, resume=args.resume)
    print(json.dumps({"checkpoint": str(result.checkpoint), "metrics": str(result.metrics), **result.last}))
    return 0


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    scene_cfg = SceneConfig(**json.loads(Path(args.scene_config).read_text())) if args.scene_config else None
    pairs = generate_pairs(range(args.seed, args.seed + args.n), scene_cfg)
    for pair in pairs:
        save_scene_pair(pair, out / f"scene_{pair.seed:06d}")
    save_qa(build_qa_items(pairs, VOCAB), out / "qa.jsonl")
    VOCAB.save(out / "vocab.json")
    print(json.dumps({"out": str(out), "n": len(pairs)}))
    return 0


def cmd_generate(args) -> int:
    pipe = Pipeline.from_checkpoint(args.ckpt)
    pair = load_scene_pair(args.scene_dir)
    rel = Pose.from_axis_angle(args.pose[:3], args.pose[3:])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace = open(out / "sampler_trace.jsonl", "w") if args.trace else None
    try:
        scene = pipe.generate_scene(pair.image_i, rel, pair.intrinsics, args.seed, out, args.conf_threshold,
                                    args.mode, trace)
    finally:
        if trace is not None:
            trace.close()
    write_f32(out / "latent.f32", scene.latent[0].numpy())
    summary = {
        "seed": args.seed, "pose": list(args.pose), "mode": args.mode,
        "latent_shape": list(scene.latent.shape[1:]),
        "ref_vertices": int((scene.ref_confidence >= args.conf_threshold).sum()),
        "gen_vertices": int((scene.gen_confidence >= args.conf_threshold).sum()),
    }
    if args.question:
        if not pipe.vqa_trained:
            raise ConfigurationError("checkpoint has no stage-3 VQA training; cannot answer questions")
        answer = VOCAB.decode(pipe.describe_scene(scene.z_gen, args.question))
        (out / "answer.txt").write_text(answer + "\n")
        summary["answer"] = answer
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _write_csv(report: dict, path: Path) -> None:
    cols = ["seed", "recon_ref_abs_rel", "recon_ref_delta_125", "recon_chamfer", "gen_chamfer",
            "baseline_chamfer", "gen_depth_abs_rel", "recon_ref_chamfer", "self_chamfer"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for s in report["scenes"]:
            d = s["recon_ref_depth"]
            w.writerow([s["seed"], repr(d["abs_rel"]), repr(d["delta_125"]), repr(s["recon_chamfer"]),
                        repr(s["gen_chamfer"]), repr(s["baseline_chamfer"]), repr(s["gen_depth_abs_rel"]),
                        repr(s["recon_ref_chamfer"]), repr(s["self_chamfer"])])


def cmd_evaluate(args) -> int:
    from .plotting import plot_chamfer, plot_depth_panel

    pipe = Pipeline.from_checkpoint(args.ckpt)
    pairs = load_pairs(args.data_dir)
    if not pairs:
        raise ConfigurationError(f"no scenes found in {args.data_dir}")
    report = evaluate_pairs(pipe, pairs, tuple(range(args.n_seeds)))
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    stem = report_path.with_suffix("")
    _write_csv(report, stem.with_suffix(".csv"))
    figures = [plot_chamfer(report, f"{stem}_chamfer.png")]
    pair = pairs[0]
    z_i = pipe.encode(pair.image_i)
    _, p_ref, p_gen = pipe.decode_latent(z_i, pipe.generate_latent(z_i, pair.rel, pair.intrinsics, 0))
    ref, gen = (p.pointmap[0].numpy().astype(np.float64) for p in (p_ref, p_gen))
    s = scale_from_reference(ref, pair.gt_pointmap_ii, pair.valid_mask_i)
    rel = pair.rel
    depths = {
        "reference GT": np.where(pair.valid_mask_i, pair.gt_pointmap_ii[..., 2], np.nan),
        "reference pred": np.where(pair.valid_mask_i, s * ref[..., 2], np.nan),
        "target GT": np.where(pair.valid_mask_j, rel.apply(pair.gt_pointmap_ji)[..., 2], np.nan),
        "target generated": np.where(pair.valid_mask_j, rel.apply(s * gen)[..., 2], np.nan),
    }
    figures.append(plot_depth_panel(depths, f"{stem}_depth.png", f"scene {pair.seed}"))
    report["files"] = {"csv": str(stem.with_suffix(".csv")), "figures": [str(f) for f in figures]}
    report_path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(json.dumps(report["aggregate"], sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uniugg-mini", description="Desk-scale unified 3D understanding/generation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic scene pairs")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=8)
    g.add_argument("--out", required=True)
    g.add_argument("--scene-config", help="JSON file with scene generator settings")
    g.set_defaults(func=cmd_gen_data)

    def training_args(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
        sp.add_argument("--out-dir")
        sp.add_argument("--data-dir", help="scene directory written by gen-data")
        sp.add_argument("--resume", help="continue an interrupted run from its checkpoint")

    t = sub.add_parser("pretrain-encoder", help="encoder + spatial decoder pretraining")
    training_args(t)
    t.set_defaults(func=lambda a: _train("encoder_pretrain", a))

    t = sub.add_parser("train-vae", help="Spatial-VAE with decoder fine-tuning")
    training_args(t)
    t.add_argument("--encoder-ckpt", required=True)
    t.set_defaults(func=lambda a: _train("vae", a, a.encoder_ckpt))

    t = sub.add_parser("train-unified", help="conditioner/diffusion stages")
    training_args(t)
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--init-ckpt", help="checkpoint of the previous stage")
    t.set_defaults(func=lambda a: _train(f"unified_s{a.stage}", a, a.init_ckpt))

    t = sub.add_parser("generate", help="generate a target view and decode both views to PLY")
    t.add_argument("--ckpt", required=True)
    t.add_argument("--scene-dir", required=True)
    t.add_argument("--pose", type=float, nargs=6, required=True, metavar=("RX", "RY", "RZ", "TX", "TY", "TZ"),
                   help="reference->target camera transform: axis-angle then translation")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--question")
    t.add_argument("--mode", choices=("ancestral", "deterministic"), default="ancestral")
    t.add_argument("--conf-threshold", type=float, default=1.0)
    t.add_argument("--trace", action="store_true", help="write per-step sampler statistics")
    t.set_defaults(func=cmd_generate)

    t = sub.add_parser("evaluate", help="metrics report (JSON + CSV + PNG figures)")
    t.add_argument("--ckpt", required=True)
    t.add_argument("--data-dir", required=True)
    t.add_argument("--report", required=True)
    t.add_argument("--n-seeds", type=int, default=4)
    t.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_determinism()
    try:
        return args.func(args)
    except (ConfigurationError, ValidationError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
