"""Train a small tracker on synthetic sprites, then track and score a held-out clip.

    python3 demos/quickstart.py --steps 300 --out /tmp/quickstart

Everything goes through the public Python API; the same flow is available as
``pointtrack generate / train / eval / overlay`` on the command line.
"""

import argparse
from pathlib import Path

from pointtrack import analysis as A
from pointtrack import model as M
from pointtrack import synthdata as S
from pointtrack.formats import save_checkpoint
from pointtrack.training import TrainConfig, train, write_loss_csv


def main():
    ap = argparse.ArgumentParser(allow_abbrev=False)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--out", default="quickstart_out")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    videos = [S.generate_video(s) for s in S.video_specs(12, args.seed)]
    held_out = S.generate_video(S.SceneSpec(seed=args.seed + 999, n_frames=16))

    cfg = M.ModelConfig()
    result = train(videos, cfg, TrainConfig(steps=args.steps, seed=args.seed, log_every=50),
                   log=print)
    save_checkpoint(out / "model.ckpt", result.params)
    cfg.save(out / "model.cfg")
    write_loss_csv(out / "loss.csv", result.history)

    frames, gt = held_out
    tracks, report = A.evaluate_video(frames, gt, result.params, cfg, "first")
    print(f"held-out clip: AJ {report.AJ:.3f}  delta_avg {report.delta_avg:.3f}  OA {report.OA:.3f}")
    tracks.save(out / "tracks.json")
    A.export_overlay(frames, tracks, out / "overlay")
    print(f"overlay frames in {out / 'overlay'}")


if __name__ == "__main__":
    main()
