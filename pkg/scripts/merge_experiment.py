"""Multi-agent merge: recovered start offsets and merged vs single-agent PSNR.

    python scripts/merge_experiment.py --params configs/synth_two_agents.yaml
    python scripts/merge_experiment.py --params configs/synth_three_agents.yaml
"""
import argparse

import numpy as np

from splatslam.geometry import compose, inverse, pose_distance
from splatslam.pipeline.agent import run_agent
from splatslam.pipeline.cli import _render_metrics, agent_gaussians, agent_views
from splatslam.pipeline.config import SlamConfig
from splatslam.pipeline.server import server_merge
from splatslam.pipeline.synth import SynthParams, synth_scene


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--params", default="configs/synth_two_agents.yaml")
    ap.add_argument("--config", default="configs/multi_agent.yaml")
    args = ap.parse_args()
    p = SynthParams.from_file(args.params)
    cfg = SlamConfig.from_file(args.config)
    sc = synth_scene(args.seed, p)
    intr = p.intrinsics()
    rs = [run_agent(ds, cfg, i) for i, ds in enumerate(sc.datasets)]
    single = [_render_metrics(agent_gaussians(r), agent_views(r), intr)["psnr"] for r in rs]
    m = server_merge(rs, intr, cfg)
    print("components", m.components)
    for line in m.closure_log:
        print("   ", line)
    g0 = sc.datasets[0].groundtruth.poses[0]
    for i in range(1, len(rs)):
        truth = compose(inverse(g0), sc.datasets[i].groundtruth.poses[0])
        t, r = pose_distance(m.agents[i].trajectory.poses[0], truth)
        print(f"agent {i} offset error {t * 100:.2f} cm / {np.rad2deg(r):.2f} deg")
    merged = _render_metrics(m.gaussians, [v for r in m.agents for v in agent_views(r)], intr)["psnr"]
    print("single-agent PSNR", [round(s, 2) for s in single], "merged", round(merged, 2))


if __name__ == "__main__":
    main()
