"""Command-line interface: train, freeze, eval, classify, serve."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import sceneio
from .anchoring import AnchorConfig
from .errors import ConfigurationError, SceneFileError
from .metrics import evaluate_freeze
from .model import Model
from .scenegen import SceneSpec, generate, init_cloud_from_gt
from .supervision import dump_table_csv, supervision_table
from .trainer import TrainConfig, train

DEFAULT_INIT_NOISE_POS = 0.03
DEFAULT_INIT_NOISE_COLOR = 0.1


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="freezesplat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a dataset (or a generated scene)")
    t.add_argument("--dataset", type=Path, help="path to a scene file with images")
    t.add_argument("--generate", metavar="SPEC", help='"default" or a JSON object of SceneSpec fields')
    t.add_argument("--out", type=Path, default=Path("runs/run0"), help="output directory (default %(default)s)")
    t.add_argument("--iters", type=int, default=3000, help="training iterations (default %(default)s)")
    t.add_argument("--seed", type=int, default=0, help="RNG seed (default %(default)s)")
    t.add_argument(
        "--ablate",
        action="append",
        default=[],
        choices=["no_hidden", "no_defective", "no_confidence"],
        help="disable a regularizer component (repeatable)",
    )
    t.add_argument("--lambda-hidden", type=float, default=10.0, help="hidden anchor weight (default %(default)s)")
    t.add_argument(
        "--lambda-defective", type=float, default=10.0, help="defective anchor weight (default %(default)s)"
    )
    t.add_argument("--tau", type=float, default=5.0, help="confidence decay factor (default %(default)s)")
    t.add_argument("--w-ssim", type=float, default=0.2, help="SSIM weight in the photometric loss (default %(default)s)")
    t.add_argument("--events-log", action="store_true", help="also write anchor_events.jsonl")

    f = sub.add_parser("freeze", help="render every training pose at fixed timestamps")
    f.add_argument("checkpoint", type=Path)
    f.add_argument("--t", type=float, action="append", help="freeze timestamp in [0,1] (repeatable)")
    f.add_argument("--stride", type=int, help="freeze at every Nth frame timestamp")
    f.add_argument("--out", type=Path, required=True, help="output directory for PNG sequences")

    e = sub.add_parser("eval", help="freeze-time evaluation against synthetic ground truth")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("--dataset", type=Path, help="defaults to the GT embedded in the checkpoint")
    e.add_argument("--stride", type=int, default=8, help="every Nth frame is a freeze target (default %(default)s)")
    e.add_argument("--out", type=Path, default=None, help="directory for report files (default: checkpoint dir)")

    c = sub.add_parser("classify", help="dump the supervision-state table as CSV")
    c.add_argument("checkpoint", type=Path)
    c.add_argument("--dataset", type=Path, required=True)
    c.add_argument("--frames", type=str, default="all", help='"all" or comma-separated frame indices')
    c.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("serve", help="HTTP rendering service for the scrubber UI")
    s.add_argument(
        "--checkpoint",
        action="append",
        required=True,
        metavar="VARIANT=PATH",
        help="variant name and checkpoint path (repeatable)",
    )
    s.add_argument("--port", type=int, default=int(os.environ.get("FREEZESPLAT_PORT", "8090")),
                   help="port (default %(default)s; env FREEZESPLAT_PORT overrides)")
    s.add_argument("--host", default="127.0.0.1", help="bind address (default %(default)s)")
    s.add_argument("--static-dir", type=Path, default=None, help="directory served at / (the scrubber UI bundle)")
    return p


def _load_or_generate(args, parser):
    if args.dataset is not None and args.generate is not None:
        parser.error("pass either --dataset or --generate, not both")
    if args.dataset is not None:
        return sceneio.load_dataset(args.dataset)
    if args.generate is None:
        parser.error("a dataset is required: pass --dataset PATH or --generate default")
    if args.generate == "default":
        spec = SceneSpec()
    else:
        try:
            spec = SceneSpec(**json.loads(args.generate))
        except (json.JSONDecodeError, TypeError) as err:
            parser.error(f"bad --generate spec: {err}")
    dataset, _ = generate(spec)
    return dataset


def _cmd_train(args, parser) -> int:
    dataset = _load_or_generate(args, parser)
    trajectory = dataset.meta.get("trajectory")
    if trajectory is not None:
        init = init_cloud_from_gt(
            trajectory.canonical, DEFAULT_INIT_NOISE_POS, DEFAULT_INIT_NOISE_COLOR, seed=args.seed + 100
        )
    else:
        raise ConfigurationError("dataset has no ground-truth cloud to initialize from")

    cfg = TrainConfig(total_iters=args.iters, seed=args.seed, w_ssim=args.w_ssim)
    cfg.anchor = AnchorConfig(
        lambda_hidden=args.lambda_hidden,
        lambda_defective=args.lambda_defective,
        tau=args.tau,
        start_iter=max(1, args.iters // 3),
        l1_switch_iter=max(2, 2 * args.iters // 3),
        no_hidden="no_hidden" in args.ablate,
        no_defective="no_defective" in args.ablate,
        no_confidence="no_confidence" in args.ablate,
    )

    model, log = train(dataset, init, cfg)

    args.out.mkdir(parents=True, exist_ok=True)
    config_echo = {
        "iters": args.iters,
        "seed": args.seed,
        "ablate": sorted(args.ablate),
        "lambda_hidden": args.lambda_hidden,
        "lambda_defective": args.lambda_defective,
        "tau": args.tau,
        "w_ssim": args.w_ssim,
    }
    ckpt = args.out / "checkpoint.splq"
    sceneio.save_checkpoint(ckpt, model, dataset, config_echo)
    with open(args.out / "metrics.jsonl", "w") as fh:
        for rec in log.records:
            fh.write(json.dumps(rec) + "\n")
    if args.events_log:
        with open(args.out / "anchor_events.jsonl", "w") as fh:
            for it, ev in log.anchor_events:
                fh.write(json.dumps({"iter": it, **asdict(ev)}) + "\n")
    print(f"wrote {ckpt} (K={model.cloud.count}, {len(log.records)} iterations)")
    return 0


def _cmd_freeze(args, parser) -> int:
    model, poses, timestamps, _ = sceneio.load_checkpoint(args.checkpoint)
    t_stars = list(args.t or [])
    if args.stride:
        t_stars.extend(timestamps[:: args.stride])
    if not t_stars:
        parser.error("pass --t and/or --stride")
    for t_star in t_stars:
        if not 0.0 <= t_star <= 1.0:
            raise ConfigurationError(f"freeze timestamp {t_star} outside [0, 1]")

    for t_star in t_stars:
        out_dir = args.out if len(t_stars) == 1 else args.out / f"t_{t_star:.4f}"
        out_dir.mkdir(parents=True, exist_ok=True)
        state = model.deform_at(t_star)  # one deformation for all poses
        for n, pose in enumerate(poses):
            img, _ = model.render_state(state, pose)
            sceneio.write_png(out_dir / f"frame_{n:04d}.png", img.pixels)
        print(f"froze t*={t_star:.4f}: {len(poses)} frames -> {out_dir}")
    return 0


def _cmd_eval(args, parser) -> int:
    model, _, _, scene = sceneio.load_checkpoint(args.checkpoint)
    if args.dataset is not None:
        dataset = sceneio.load_dataset(args.dataset)
    else:
        dataset = sceneio.checkpoint_dataset(scene)
    if dataset.meta.get("trajectory") is None:
        print("GT required: this dataset has no ground-truth trajectory", file=sys.stderr)
        return 1
    report = evaluate_freeze(model, dataset, stride=args.stride)
    out_dir = args.out or args.checkpoint.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    table = report.to_table()
    (out_dir / "eval_report.txt").write_text(table + "\n")
    with open(out_dir / "eval_records.jsonl", "w") as fh:
        for rec in report.to_records():
            fh.write(json.dumps(rec) + "\n")
    print(table)
    return 0


def _cmd_classify(args, parser) -> int:
    model, _, _, _ = sceneio.load_checkpoint(args.checkpoint)
    dataset = sceneio.load_dataset(args.dataset)
    if args.frames == "all":
        frames = range(len(dataset))
    else:
        frames = [int(x) for x in args.frames.split(",")]
    table = supervision_table(model, dataset, frames)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    dump_table_csv(table, args.out)
    print(f"wrote {args.out} ({len(table)} rows)")
    return 0


def _cmd_serve(args, parser) -> int:
    from .service import RenderService

    checkpoints = {}
    for item in args.checkpoint:
        if "=" not in item:
            parser.error(f"--checkpoint expects VARIANT=PATH, got {item!r}")
        variant, _, path = item.partition("=")
        checkpoints[variant] = Path(path)
    service = RenderService.from_checkpoints(checkpoints, static_dir=args.static_dir)
    print(f"serving variants {sorted(checkpoints)} on http://{args.host}:{args.port}")
    service.serve_forever(args.host, args.port)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "freeze": _cmd_freeze,
        "eval": _cmd_eval,
        "classify": _cmd_classify,
        "serve": _cmd_serve,
    }
    try:
        return handlers[args.command](args, parser)
    except (ConfigurationError, SceneFileError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
