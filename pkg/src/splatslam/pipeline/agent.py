"""Single-agent run: tracking, submap mapping, intra-agent loop closure and
pose-graph correction, plus the on-disk form handed to the server."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import Pose, compose, inverse
from ..loopclosure import (
    DBEntry,
    DescriptorDatabase,
    LoopCandidate,
    LoopClosure,
    build_loop_constraint,
    coarse_register,
    compute_descriptor,
    format_log_line,
    gate,
    icp_refine,
    query,
    submap_cloud,
)
from ..mapping import integrate_keyframe, should_start_submap
from ..posegraph import PoseGraph, odometry_information, optimize
from ..splat import Keyframe, Submap, load_submaps, save_submaps
from ..tracking import InsufficientOverlap, TrackingLost, track_frame
from .config import SlamConfig
from .dataset import Dataset, Trajectory, write_tum

log = logging.getLogger(__name__)


@dataclass
class FrameRecord:
    timestamp: float
    submap: int
    local: Pose  # pose in the frame of its submap


@dataclass
class AgentResult:
    agent_id: int
    submaps: list[Submap]
    frames: list[FrameRecord]
    db: DescriptorDatabase
    closures: list[LoopClosure] = field(default_factory=list)
    closure_log: list[str] = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    @property
    def trajectory(self) -> Trajectory:
        anchors = {s.index: s.anchor for s in self.submaps}
        return Trajectory(
            np.array([f.timestamp for f in self.frames]),
            [compose(anchors[f.submap], f.local) for f in self.frames],
        )

    def keyframe_nodes(self) -> tuple[list, list[Pose]]:
        """Node ids and global poses of all keyframes in capture order."""
        items = []
        for s in self.submaps:
            for k in s.keyframes:
                items.append((k.frame_index, (self.agent_id, s.index, k.frame_index), compose(s.anchor, k.pose)))
        items.sort(key=lambda x: x[0])
        return [i for _, i, _ in items], [p for _, _, p in items]


def _path_lengths(frames: list[FrameRecord], anchors: dict) -> np.ndarray:
    pos = np.array([compose(anchors[f.submap], f.local).t for f in frames]).reshape(-1, 3)
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1) if len(pos) > 1 else np.zeros(0)
    return np.concatenate([[0.0], np.cumsum(steps)])


def evaluate_candidates(cands: list[LoopCandidate], submaps: dict, intr, cfg: SlamConfig):
    """Register and gate candidates; keeps the best-similarity candidate per submap pair.

    ``submaps`` maps (agent, submap) -> Submap. Returns (closures, log lines).
    """
    best: dict = {}
    for c in cands:
        key = (c.query[:2], c.match[:2])
        if key not in best or c.similarity > best[key].similarity:
            best[key] = c
    closures, lines = [], []
    for key in sorted(best):
        c = best[key]
        sq, sm = submaps[c.query[:2]], submaps[c.match[:2]]
        kq = next(k for k in sq.keyframes if k.frame_index == c.query[2])
        km = next(k for k in sm.keyframes if k.frame_index == c.match[2])
        T_init = c.T_init
        if T_init is None:
            try:
                T_init = coarse_register(kq.frame(), km.frame(), intr, cfg.tracking)
            except InsufficientOverlap:
                lines.append(format_log_line(c, 0.0, np.inf, False))
                continue
        src = submap_cloud(sq, intr, kq.pose, cfg.loop, cfg.mapping.max_depth)
        tgt = submap_cloud(sm, intr, km.pose, cfg.loop, cfg.mapping.max_depth)
        if len(src) == 0 or tgt.normals is None or not tgt.normal_valid.any():
            lines.append(format_log_line(c, 0.0, np.inf, False))
            continue
        L = cfg.loop
        T, f, rho = icp_refine(src, tgt, T_init, L.d_max_corr, L.n_iter, L.rel_fitness_tol, L.rel_rmse_tol)
        ok = gate(f, rho, L.tau_f, L.tau_rho)
        lines.append(format_log_line(c, f, rho, ok))
        if ok:
            closures.append(build_loop_constraint(c, T, f, rho, kq.pose, km.pose, L))
    return closures, lines


def build_agent_graph(result: AgentResult, cfg: SlamConfig, graph: PoseGraph | None = None,
                      fix_first: bool = True, pose_map=None) -> PoseGraph:
    """Keyframe nodes, tracking edges and intra-agent loop edges of one agent."""
    g = graph if graph is not None else PoseGraph(cfg.graph.max_iters, cfg.graph.lambda_init, cfg.graph.tol,
                                                  cfg.loop.huber)
    ids, poses = result.keyframe_nodes()
    if pose_map is not None:
        poses = [pose_map(p) for p in poses]
    for i, (n, p) in enumerate(zip(ids, poses)):
        g.add_node(n, p, fixed=fix_first and i == 0)
    # tracking edges keep the agent's own relative estimates
    _, own = result.keyframe_nodes()
    info = odometry_information(cfg.graph.odometry_weight, cfg.graph.rotation_factor)
    for (a, Ta), (b, Tb) in zip(zip(ids, own), zip(ids[1:], own[1:])):
        g.add_edge(a, b, compose(inverse(Ta), Tb), info, "tracking")
    first = {s.index: (result.agent_id, s.index, s.keyframes[0].frame_index) for s in result.submaps if s.keyframes}
    for c in result.closures:
        g.add_edge(first[c.a[1]], first[c.b[1]], c.T_ab, c.information, "intra")
    return g


def apply_graph(result: AgentResult, poses: dict) -> None:
    """Re-anchor each submap at the optimized pose of its first keyframe."""
    for s in result.submaps:
        if s.keyframes:
            s.anchor = poses[(result.agent_id, s.index, s.keyframes[0].frame_index)]


def run_agent(dataset: Dataset, cfg: SlamConfig | None = None, agent_id: int = 0,
              loop_closure: bool = True) -> AgentResult:
    """Process every frame: track, select keyframes, grow or start submaps,
    and close loops whenever a submap is completed."""
    cfg = cfg or SlamConfig()
    if len(dataset) == 0:
        raise ValueError("dataset has no frames")
    intr = dataset.intrinsics
    mcfg, tcfg = cfg.mapping, cfg.tracking
    use_loops = loop_closure and cfg.loop.enabled
    timing = {"tracking": 0.0, "mapping": 0.0, "loop_closure": 0.0, "pose_graph": 0.0}
    db = DescriptorDatabase()
    submaps: list[Submap] = []
    frames: list[FrameRecord] = []
    closures: list[LoopClosure] = []
    lines: list[str] = []

    def add_keyframe(sub: Submap, frame, local: Pose) -> Submap:
        kf = Keyframe.from_frame(frame, local)
        kf.descriptor = compute_descriptor(frame)
        t0 = time.perf_counter()
        sub = integrate_keyframe(sub, kf, intr, mcfg)
        timing["mapping"] += time.perf_counter() - t0
        return sub

    def close_loops(done: Submap) -> None:
        anchors = {s.index: s.anchor for s in submaps}
        path = _path_lengths(frames, anchors)
        for k in done.keyframes:
            db.add(DBEntry(agent_id, done.index, k.frame_index, k.descriptor, compose(done.anchor, k.pose),
                           float(path[k.frame_index])))
        if not use_loops:
            return
        t0 = time.perf_counter()
        L = cfg.loop
        cands = []
        for e in [e for e in db.entries if e.submap_id == done.index]:
            cands.extend(query(db, e, L.k, L.tau_sim, L.delta_min, L.long_range))
        index = {(agent_id, s.index): s for s in submaps}
        new, new_lines = evaluate_candidates(cands, index, intr, cfg)
        lines.extend(new_lines)
        timing["loop_closure"] += time.perf_counter() - t0
        if not new:
            return
        closures.extend(new)
        t0 = time.perf_counter()
        res = AgentResult(agent_id, submaps, frames, db, closures)
        graph = build_agent_graph(res, cfg)
        opt = optimize(graph)
        apply_graph(res, opt.poses)
        timing["pose_graph"] += time.perf_counter() - t0
        # refresh global estimates held by the database
        anchors = {s.index: s.anchor for s in submaps}
        for e in db.entries:
            s = submaps[e.submap_id]
            kf = next(k for k in s.keyframes if k.frame_index == e.keyframe_id)
            e.pose = compose(anchors[e.submap_id], kf.pose)

    first = dataset.frames[0]
    active = add_keyframe(Submap(agent_id, 0), first, Pose.identity())
    submaps.append(active)
    frames.append(FrameRecord(first.timestamp, 0, Pose.identity()))
    prev, prev_local = first, Pose.identity()
    velocity = Pose.identity()
    for i in range(1, len(dataset)):
        curr = dataset.frames[i]
        t0 = time.perf_counter()
        try:
            local = track_frame(prev_local, prev, curr, active, intr, tcfg, velocity)
        except TrackingLost as e:
            raise TrackingLost(f"frame {i}: {e}") from None
        timing["tracking"] += time.perf_counter() - t0
        velocity = compose(inverse(prev_local), local)
        is_kf = i % mcfg.keyframe_every == 0
        if is_kf and should_start_submap(local, mcfg):
            close_loops(active)
            anchor = compose(active.anchor, local)
            active = add_keyframe(Submap(agent_id, len(submaps), anchor=anchor), curr, Pose.identity())
            submaps.append(active)
            local = Pose.identity()
        elif is_kf:
            active = add_keyframe(active, curr, local)
            submaps[-1] = active
        frames.append(FrameRecord(curr.timestamp, active.index, local))
        prev, prev_local = curr, local
    close_loops(active)
    return AgentResult(agent_id, submaps, frames, db, closures, lines, timing)


# --------------------------------------------------------------------------
# on-disk exchange between agents and the server
# --------------------------------------------------------------------------


def closure_to_dict(c: LoopClosure) -> dict:
    return {
        "a": list(c.a), "b": list(c.b),
        "q": c.T_ab.q.tolist(), "t": c.T_ab.t.tolist(),
        "fitness": c.fitness, "inlier_rmse": c.inlier_rmse,
        "information": c.information.tolist(),
        "query": list(c.query) if c.query else None, "match": list(c.match) if c.match else None,
    }


def closure_from_dict(d: dict) -> LoopClosure:
    return LoopClosure(tuple(d["a"]), tuple(d["b"]), Pose(d["q"], d["t"]), d["fitness"], d["inlier_rmse"],
                       np.array(d["information"]), tuple(d["query"]) if d["query"] else None,
                       tuple(d["match"]) if d["match"] else None)


def save_agent_result(out, result: AgentResult) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "trajectory.txt", result.trajectory)
    save_submaps(out / "submaps.bin", result.submaps)
    (out / "closures.log").write_text("".join(l + "\n" for l in result.closure_log))
    (out / "closures.json").write_text(json.dumps([closure_to_dict(c) for c in result.closures], indent=1) + "\n")
    rows = []
    for f in result.frames:
        w, x, y, z = f.local.q
        rows.append(f"{f.timestamp:.9f} {f.submap} " + " ".join(repr(float(v)) for v in [*f.local.t, x, y, z, w]))
    (out / "frames.txt").write_text("# timestamp submap tx ty tz qx qy qz qw (submap frame)\n" + "\n".join(rows) + "\n")


def load_agent_result(path) -> AgentResult:
    path = Path(path)
    submaps = load_submaps(path / "submaps.bin")
    if not submaps:
        raise ValueError(f"{path}: no submaps")
    agent_id = submaps[0].agent_id
    frames = []
    for line in (path / "frames.txt").read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        v = line.split()
        t = [float(x) for x in v[2:]]
        frames.append(FrameRecord(float(v[0]), int(v[1]), Pose([t[6], t[3], t[4], t[5]], t[:3])))
    anchors = {s.index: s.anchor for s in submaps}
    path_len = _path_lengths(frames, anchors) if frames else np.zeros(0)
    ts_index = {round(f.timestamp, 6): i for i, f in enumerate(frames)}
    db = DescriptorDatabase()
    for s in submaps:
        for k in s.keyframes:
            d = np.asarray(k.descriptor, dtype=np.float64)
            d = d / np.linalg.norm(d)
            k.descriptor = d
            p = path_len[ts_index[round(k.timestamp, 6)]] if round(k.timestamp, 6) in ts_index else 0.0
            db.add(DBEntry(agent_id, s.index, k.frame_index, d, compose(s.anchor, k.pose), p))
    closures = [closure_from_dict(d) for d in json.loads((path / "closures.json").read_text())] \
        if (path / "closures.json").exists() else []
    lines = (path / "closures.log").read_text().splitlines() if (path / "closures.log").exists() else []
    return AgentResult(agent_id, submaps, frames, db, closures, lines)
