"""Does a shallow xUnit network keep up with a deeper ReLU network?

A 5-layer ConvNet (about 112K parameters) and a 3-layer xNet (about 49K)
are trained on identical noisy crops and scored on held-out images.  The
defaults are the full desk-scale setting: 4000 steps of batch 64 on 80x80
crops.  On a single core that takes the better part of a day, so flags
allow a reduced run; results from reduced runs are indicative only.

    python demos/trend_check.py --steps 1000 --batch 16 --patch 40 --out runs/reduced
"""

import argparse
import json
import logging
import time

from xunit.benchmark import TrendConfig, config_dict, run_trend, scaled


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=TrendConfig.steps)
    ap.add_argument("--batch", type=int, default=TrendConfig.batch_size)
    ap.add_argument("--patch", type=int, default=TrendConfig.patch)
    ap.add_argument("--seed", type=int, default=TrendConfig.seed)
    ap.add_argument("--log-interval", type=int, default=TrendConfig.log_interval)
    ap.add_argument("--out", default="runs/trend")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = scaled(TrendConfig(), steps=args.steps, batch_size=args.batch, patch=args.patch,
                 seed=args.seed, log_interval=args.log_interval)
    print("config", json.dumps(config_dict(cfg)))
    start = time.time()
    results = run_trend(cfg, args.out)
    for family, r in results.items():
        print(f"{family:<8} params {r['params']:>7}  held-out PSNR {r['psnr']:.3f} dB")
    gap = results["xnet"]["psnr"] - results["convnet"]["psnr"]
    ratio = results["xnet"]["params"] / results["convnet"]["params"]
    print(f"xnet - convnet = {gap:+.3f} dB with {ratio:.1%} of the parameters "
          f"({time.time() - start:.0f} s)")
    with open(f"{args.out}/summary.json", "w") as fh:
        json.dump({"config": config_dict(cfg), "results": results, "gap_db": gap}, fh, indent=2)


if __name__ == "__main__":
    main()
