"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis as A
from . import model as M
from . import synthdata as S
from .errors import NumericError, ValidationError
from .formats import load_checkpoint, save_checkpoint
from .metrics import aggregate
from .tracker import TrackSet
from .training import TrainConfig, train, write_loss_csv

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _load_dataset(directory):
    return [(p.name, *S.read_video(p)) for p in S.list_videos(directory)]


def _model_config(args, ckpt=None) -> M.ModelConfig:
    path = getattr(args, "config", None)
    if path is None and ckpt is not None:
        guess = Path(ckpt).with_name("model.cfg")
        path = guess if guess.is_file() else None
    if path is not None:
        if not Path(path).is_file():
            raise ValidationError(f"model config not found: {path}")
        return M.ModelConfig.load(path)
    return M.ModelConfig()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    overrides = dict(n_frames=args.frames, n_points=args.points, height=args.height,
                     width=args.width, n_sprites=args.sprites)
    specs = S.video_specs(args.n_videos, args.seed, args.style, **overrides)
    out = Path(args.out)
    names = S.write_dataset(out, specs)
    _write_json(out / "dataset.json", {"seed": args.seed, "style": args.style,
                                       "videos": names, **overrides})
    _log(f"wrote {len(names)} videos to {out}")


def _override(cfg, args, fields):
    kw = {f: getattr(args, f) for f in fields if getattr(args, f, None) is not None}
    return cfg.replace(**kw) if kw else cfg


def cmd_train(args):
    videos = [(f, g) for _, f, g in _load_dataset(args.data)]
    cfg = _model_config(args)
    cfg = _override(cfg, args, ("d", "n_decoder", "mode"))
    if args.train_config:
        tc = TrainConfig.load(args.train_config)
    else:
        tc = TrainConfig()
    tc = _override(tc, args, ("steps", "lr", "seed", "batch_size", "accumulate"))
    frames_hw = videos[0][0].shape[2:]
    if tuple(frames_hw) != tuple(cfg.image_size):
        cfg = cfg.replace(image_size=tuple(int(x) for x in frames_hw))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tc = tc.replace(log_every=args.log_every)
    res = train(videos, cfg, tc, log=_log)
    cfg.save(out / "model.cfg")
    tc.save(out / "train.cfg")
    save_checkpoint(out / "model.ckpt", res.params)
    save_checkpoint(out / "ema.ckpt", res.opt.ema)
    write_loss_csv(out / "loss.csv", res.history)
    _log(f"trained {tc.steps} steps; final loss {res.history[-1][1]:.5f}" if res.history
         else "no steps run")


def cmd_eval(args):
    cfg = _model_config(args, args.ckpt)
    params = load_checkpoint(args.ckpt)
    videos = _load_dataset(args.data)
    out = Path(args.out)
    (out / "tracks").mkdir(parents=True, exist_ok=True)
    entries, reports = [], []
    for name, frames, gt in videos:
        tracks, rep = A.evaluate_video(frames, gt, params, cfg, args.mode)
        tracks.save(out / "tracks" / f"{name}.json")
        entries.append(rep.to_json(name))
        reports.append(rep)
        _log(f"{name}: AJ {rep.AJ:.4f} delta_avg {rep.delta_avg:.4f} OA {rep.OA:.4f}")
    _write_json(out / "metrics.json", {"mode": args.mode, "videos": entries,
                                       "aggregate": aggregate(reports)})


def cmd_ablate(args):
    grids = {"ladder": A.LADDER, "components": A.COMPONENTS}
    grid = {}
    for g in args.grid.split(","):
        if g not in grids:
            raise ValidationError(f"unknown grid {g!r}; choose from {sorted(grids)}")
        grid.update(grids[g])
    if args.rows:
        wanted = args.rows.split(",")
        missing = [r for r in wanted if r not in grid]
        if missing:
            raise ValidationError(f"unknown rows {missing}")
        grid = {k: grid[k] for k in wanted}
    data = A.AblationData.synthetic(args.n_train, args.n_val, seed=args.seed,
                                    n_frames=args.frames, val_frames=args.val_frames)
    tc = TrainConfig(steps=args.steps, seed=args.seed)
    rows = A.ablation_harness(grid, data, M.ModelConfig(), tc, args.mode, log=_log)
    A.write_rows_csv(args.out, rows)


def cmd_profile(args):
    cfg = _model_config(args).replace(self_attn=args.self_attn == "on")
    points = [int(x) for x in args.points.split(",")]
    if any(n < 0 for n in points):
        raise ValidationError("point counts must be non-negative")
    rep = A.profile_modes(cfg, points, measure=not args.no_timing, repeats=args.repeats)
    doc = rep.to_json()
    doc["extra_macs_per_point"] = A.cost_volume_extra_per_point(cfg)
    doc["self_attn"] = cfg.self_attn
    for r in rep.rows:
        _log(f"N={r.n_points:6d} {r.mode:22s} MACs {r.macs:>15d}"
             + (f"  {r.seconds:.3f}s" if r.seconds is not None else ""))
    if args.out:
        _write_json(args.out, doc)
    else:
        print(json.dumps(doc, indent=2))


def cmd_overlay(args):
    frames, gt = S.read_video(args.video)
    if args.tracks:
        tracks = TrackSet.load(args.tracks)
    else:
        q = gt.query_frames
        keep = np.flatnonzero(q >= 0)
        tracks = TrackSet(q[keep], gt.xy[keep], gt.vis[keep].astype(float), frames.shape[2:])
    records = A.export_overlay(frames, tracks, args.out, scale=args.scale)
    _log(f"wrote {frames.shape[0]} frames with {len(records)} markers to {args.out}")


def cmd_attn_dump(args):
    cfg = _model_config(args, args.ckpt)
    params = load_checkpoint(args.ckpt)
    batch = []
    for _, frames, gt in _load_dataset(args.data)[:args.max_videos]:
        from .training import sample_from_video
        s = sample_from_video(frames, gt, 0, min(cfg.window, frames.shape[0]))
        if s.seeds.n_points:
            batch.append((s.frames, s.seeds))
    hist = A.dump_attention_distributions(params, cfg, batch)
    hist.write_csv(args.out)
    _log(f"total variation between content and position weights: {hist.tv_distance:.6f}")


# --------------------------------------------------------------------------
# parser


def _parser():
    def new(sub, name, help_):
        p = sub.add_parser(name, help=help_, add_help=False, allow_abbrev=False)
        p.add_argument("--help", action="help", help="show this message and exit")
        return p

    top = argparse.ArgumentParser(prog="pointtrack", add_help=False, allow_abbrev=False,
                                  description="Desk-scale point tracker.")
    top.add_argument("--help", action="help", help="show this message and exit")
    sub = top.add_subparsers(dest="command", required=True)

    p = new(sub, "generate", "render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-videos", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--style", choices=S.STYLES, default="in_domain")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--points", type=int, default=16)
    p.add_argument("--sprites", type=int, default=3)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.set_defaults(func=cmd_generate)

    p = new(sub, "train", "train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="model config (key=value)")
    p.add_argument("--train-config", help="training config (key=value)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--accumulate", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--n-decoder", type=int)
    p.add_argument("--mode", choices=M.MODES)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = new(sub, "eval", "track and score a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="model config; defaults to model.cfg beside the checkpoint")
    p.add_argument("--mode", choices=("first", "strided"), default="first")
    p.set_defaults(func=cmd_eval)

    p = new(sub, "ablate", "train and compare toggle settings")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default="ladder", help="comma list of: ladder, components")
    p.add_argument("--rows", help="subset of rows to run")
    p.add_argument("--steps", type=int, default=800)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=24)
    p.add_argument("--n-val", type=int, default=8)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--val-frames", type=int, default=16)
    p.add_argument("--mode", choices=("first", "strided"), default="first")
    p.set_defaults(func=cmd_ablate)

    p = new(sub, "profile", "MAC counts and wall time of both position-update designs")
    p.add_argument("--points", default="0,10,100,1000")
    p.add_argument("--config")
    p.add_argument("--self-attn", choices=("on", "off"), default="on")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--no-timing", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_profile)

    p = new(sub, "overlay", "draw trajectories onto frames as PPM images")
    p.add_argument("--video", required=True, help="video directory (frames.bin, gt.json)")
    p.add_argument("--tracks", help="TrackSet JSON; ground truth when omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_overlay)

    p = new(sub, "attn-dump", "histograms of content vs position attention weights")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--max-videos", type=int, default=4)
    p.set_defaults(func=cmd_attn_dump)
    return top


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    try:
        args.func(args)
    except ValidationError as exc:
        _log(f"error: {exc}")
        return EXIT_INVALID
    except NumericError as exc:
        _log(f"numeric error: {exc}")
        return EXIT_NUMERIC
    except (FileNotFoundError, PermissionError, IsADirectoryError, NotADirectoryError) as exc:
        _log(f"error: {exc}")
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
