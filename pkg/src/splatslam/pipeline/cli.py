"""Command-line entry point: run, merge, eval, eval-render, synth, export-ply."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from ..geometry import compose
from ..renderer import render
from ..posegraph import write_g2o
from ..splat import Gaussians, load_submaps, save_submaps
from .agent import AgentResult, load_agent_result, run_agent, save_agent_result
from .config import SlamConfig
from .dataset import DatasetError, Trajectory, load_dataset, read_intrinsics, read_tum, write_intrinsics, write_tum
from .metrics import ate_rmse, image_metrics
from .server import server_merge
from .synth import SynthParams, synth_scene, write_synth

log = logging.getLogger("splatslam")


def _set_threads(n: int | None) -> None:
    if not n:
        return
    import numba

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:
        pass


def _load_config(path) -> SlamConfig:
    return SlamConfig.from_file(path) if path else SlamConfig()


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _render_metrics(gaussians: Gaussians, views, intr) -> dict:
    """Mean PSNR/SSIM/Depth-L1 over (keyframe, global pose) training views."""
    rows = [image_metrics(render(gaussians, pose, intr), kf) for kf, pose in views]
    if not rows:
        return {}
    return {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "depth_l1")}


def agent_views(result: AgentResult):
    return [(k, compose(s.anchor, k.pose)) for s in result.submaps for k in s.keyframes]


def agent_gaussians(result: AgentResult) -> Gaussians:
    return Gaussians.concatenate([s.global_gaussians() for s in result.submaps])


def _print_table(title: str, metrics: dict) -> None:
    print(title)
    for k in sorted(metrics):
        v = metrics[k]
        print(f"  {k:<22} {v:.6g}" if isinstance(v, float) else f"  {k:<22} {v}")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    ds = load_dataset(args.dataset)
    if len(ds) == 0:
        print("dataset has no frames", file=sys.stderr)
        return 2
    out = Path(args.out)
    t0 = time.perf_counter()
    result = run_agent(ds, cfg, args.agent_id, loop_closure=not args.no_loop_closure)
    wall = time.perf_counter() - t0
    save_agent_result(out, result)
    write_intrinsics(out / "intrinsics.txt", ds.intrinsics)
    if ds.groundtruth is not None:
        write_tum(out / "groundtruth.txt", ds.groundtruth)
    metrics = {
        "agent_id": result.agent_id,
        "frames": len(result.frames),
        "submaps": len(result.submaps),
        "keyframes": sum(len(s.keyframes) for s in result.submaps),
        "closures_evaluated": len(result.closure_log),
        "closures_accepted": len(result.closures),
        "loop_closure": not args.no_loop_closure,
    }
    if ds.groundtruth is not None:
        metrics["ate_rmse"] = ate_rmse(result.trajectory, ds.groundtruth)
    metrics.update(_render_metrics(agent_gaussians(result), agent_views(result), ds.intrinsics))
    _write_json(out / "metrics.json", metrics)
    _write_json(out / "timing.json", {**{k: round(v, 3) for k, v in result.timing.items()}, "total": round(wall, 3)})
    _print_table(f"run {ds.name or args.dataset}", metrics)
    return 0


def cmd_merge(args) -> int:
    cfg = _load_config(args.config)
    dirs = [Path(d) for d in args.agents]
    results = [load_agent_result(d) for d in dirs]
    ids = [r.agent_id for r in results]
    if len(set(ids)) != len(ids):
        print(f"agent ids must be distinct, got {ids}", file=sys.stderr)
        return 2
    intr = read_intrinsics(dirs[0] / "intrinsics.txt")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    merged = server_merge(results, intr, cfg)
    wall = time.perf_counter() - t0
    for w in merged.warnings:
        print(f"warning: {w}", file=sys.stderr)
    save_submaps(out / "global_map.bin", merged.submaps)
    (out / "closures.log").write_text("".join(l + "\n" for l in merged.closure_log))
    if merged.graph is not None:
        for nid, node in merged.graph.nodes.items():
            node.pose = merged.solve.poses[nid]
        write_g2o(out / "graph.g2o", merged.graph)
    metrics = {
        "agents": ids,
        "components": merged.components,
        "inter_closures_evaluated": len(merged.closure_log),
        "inter_closures_accepted": len(merged.closures),
    }
    if merged.solve is not None:
        metrics["graph_objective_initial"] = merged.solve.initial_objective
        metrics["graph_objective_final"] = merged.solve.objective
        metrics["graph_iterations"] = merged.solve.iterations
    est_all, gt_all = [], []
    for d, r in zip(dirs, merged.agents):
        traj = r.trajectory
        write_tum(out / f"agent_{r.agent_id}_trajectory.txt", traj)
        if (d / "groundtruth.txt").exists():
            gt = read_tum(d / "groundtruth.txt")
            metrics[f"ate_rmse_agent_{r.agent_id}"] = ate_rmse(traj, gt)
            est_all.append(traj)
            gt_all.append(gt)
    if len(est_all) > 1 and len(merged.components) == 1:
        metrics["ate_rmse_joint"] = ate_rmse(_join(est_all), _join(gt_all))
    views = [v for r in merged.agents for v in agent_views(r)]
    metrics.update(_render_metrics(merged.gaussians, views, intr))
    _write_json(out / "metrics.json", metrics)
    _write_json(out / "timing.json", {"total": round(wall, 3)})
    _print_table("merge", metrics)
    return 0


def _join(trajs: list[Trajectory]) -> Trajectory:
    items = sorted(((t, p) for tr in trajs for t, p in zip(tr.timestamps, tr.poses)), key=lambda x: x[0])
    return Trajectory(np.array([t for t, _ in items]), [p for _, p in items])


def cmd_eval(args) -> int:
    value = ate_rmse(read_tum(args.est), read_tum(args.gt))
    print(f"ate_rmse {value:.6f} m")
    return 0


def cmd_eval_render(args) -> int:
    submaps = load_submaps(args.map)
    ds = load_dataset(args.dataset)
    frames = {round(f.timestamp, 6): f for f in ds.frames}
    gaussians = Gaussians.concatenate([s.global_gaussians() for s in submaps])
    views = []
    for s in submaps:
        for k in s.keyframes:
            f = frames.get(round(k.timestamp, 6))
            if f is not None:
                kf = type(k)(k.frame_index, k.pose, f.color, f.depth, k.timestamp)
                views.append((kf, compose(s.anchor, k.pose)))
    if not views:
        print("no keyframe of the map matches a dataset frame", file=sys.stderr)
        return 2
    metrics = _render_metrics(gaussians, views, ds.intrinsics)
    metrics["views"] = len(views)
    _print_table("eval-render", metrics)
    if args.json:
        _write_json(args.json, metrics)
    return 0


def cmd_synth(args) -> int:
    params = SynthParams.from_file(args.params) if args.params else SynthParams()
    scene = synth_scene(args.seed, params)
    dirs = write_synth(scene, args.out)
    for d in dirs:
        print(d)
    return 0


def write_ply(path, gaussians: Gaussians) -> None:
    cols = np.round(np.clip(gaussians.colors, 0, 1) * 255).astype(int)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(gaussians)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(gaussians.means, cols):
        lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_export_ply(args) -> int:
    submaps = load_submaps(args.map)
    write_ply(args.out, Gaussians.concatenate([s.global_gaussians() for s in submaps]))
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splatslam", description="Multi-agent RGB-D Gaussian-splatting SLAM")
    ap.add_argument("--threads", type=int, default=None, help="worker threads for numerical kernels")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="track and map one agent's sequence")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--no-loop-closure", action="store_true")
    p.add_argument("--out", default="out")
    p.add_argument("--agent-id", type=int, default=0)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("merge", help="inter-agent loop closure and global optimization")
    p.add_argument("--agents", nargs="+", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="ATE RMSE between two TUM trajectories")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eval-render", help="PSNR/SSIM/Depth-L1 of a map on a dataset's keyframes")
    p.add_argument("--map", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--json")
    p.set_defaults(func=cmd_eval_render)

    p = sub.add_parser("synth", help="write seeded synthetic multi-agent datasets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-ply", help="ASCII PLY of splat means and colors")
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ply)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _set_threads(args.threads)
    try:
        return args.func(args)
    except (DatasetError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
