"""Multiply-accumulate counts and wall time of APU vs the cost-volume baseline.

The baseline adds a dense correlation map per query, so its extra cost grows
linearly with the number of tracked points.

    python3 demos/compute_profile.py --points 0,100,1000,5000
"""

import argparse

from pointtrack import analysis as A
from pointtrack import model as M


def main():
    ap = argparse.ArgumentParser(allow_abbrev=False)
    ap.add_argument("--points", default="0,100,1000")
    ap.add_argument("--no-timing", action="store_true")
    args = ap.parse_args()
    points = [int(x) for x in args.points.split(",")]

    # self-attention costs the same in both modes and is quadratic in N
    cfg = M.ModelConfig(self_attn=False)
    print(f"extra MACs per point in the baseline: {A.cost_volume_extra_per_point(cfg):,}")
    rep = A.profile_modes(cfg, points, measure=not args.no_timing)
    for n in points:
        apu, cv = rep.get(n, "apu"), rep.get(n, "cost_volume_baseline")
        line = f"N={n:6d}  apu {apu.macs:>15,}  baseline {cv.macs:>15,}  ratio {rep.ratio(n):.3f}"
        if apu.seconds is not None:
            line += f"  time ratio {rep.ratio(n, 'seconds'):.3f}"
        print(line)


if __name__ == "__main__":
    main()
