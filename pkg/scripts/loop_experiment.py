"""Drift with and without loop closure on the synthetic single-agent loop.

    python scripts/loop_experiment.py --seeds 0 1 2
"""
import argparse
import time

from splatslam.pipeline.agent import run_agent
from splatslam.pipeline.config import SlamConfig
from splatslam.pipeline.metrics import ate_rmse
from splatslam.pipeline.synth import SynthParams, synth_scene


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--params", default="configs/synth_loop.yaml")
    ap.add_argument("--config", default="configs/loop.yaml")
    args = ap.parse_args()
    cfg = SlamConfig.from_file(args.config)
    for seed in args.seeds:
        ds = synth_scene(seed, SynthParams.from_file(args.params)).datasets[0]
        row = {}
        for lc in (False, True):
            t0 = time.time()
            r = run_agent(ds, cfg, loop_closure=lc)
            row[lc] = ate_rmse(r.trajectory, ds.groundtruth)
            print(f"seed {seed} LC={lc} ATE {row[lc] * 100:.2f} cm closures {len(r.closures)} {time.time() - t0:.0f}s")
            for line in r.closure_log:
                print("   ", line)
        print(f"seed {seed} ratio {row[True] / row[False]:.2f}")


if __name__ == "__main__":
    main()
