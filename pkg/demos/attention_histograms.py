"""Compare the attention weights that update content with those that update position.

Trains briefly, then histograms softmax(A) and softmax(Disentangler(A)) over
every query and layer. At initialisation the Disentangler is the identity and
the two distributions match exactly; training pulls them apart.

    python3 demos/attention_histograms.py --steps 200 --out attn.csv
"""

import argparse

from pointtrack import analysis as A
from pointtrack import model as M
from pointtrack import synthdata as S
from pointtrack.training import TrainConfig, sample_from_video, train


def main():
    ap = argparse.ArgumentParser(allow_abbrev=False)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--out", default="attn.csv")
    args = ap.parse_args()

    cfg = M.ModelConfig()
    videos = [S.generate_video(s) for s in S.video_specs(8, seed=0)]
    batch = []
    for frames, gt in videos[:4]:
        s = sample_from_video(frames, gt, 0, cfg.window)
        batch.append((s.frames, s.seeds))

    before = A.dump_attention_distributions(M.init_params(cfg), cfg, batch)
    params = train(videos, cfg, TrainConfig(steps=args.steps)).params
    after = A.dump_attention_distributions(params, cfg, batch)
    after.write_csv(args.out)
    print(f"total variation before training {before.tv_distance:.4f}, "
          f"after {args.steps} steps {after.tv_distance:.4f}")


if __name__ == "__main__":
    main()
