"""Server stage: inter-agent loop closure over finished agent runs, a joint
pose graph, and re-anchoring of every submap into one global frame."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..geometry import Pose, compose, inverse
from ..loopclosure import LoopClosure, query
from ..posegraph import OptimizeResult, PoseGraph, anchor_submaps, optimize
from ..mapping import optimize_submap
from ..splat import Gaussians, Submap
from .agent import AgentResult, apply_graph, build_agent_graph, evaluate_candidates
from .config import SlamConfig
from .dataset import Trajectory

log = logging.getLogger(__name__)


@dataclass
class MergeResult:
    agents: list[AgentResult]  # copies carrying the optimized anchors
    submaps: list[Submap]  # content expressed in the global frame
    closures: list[LoopClosure] = field(default_factory=list)
    closure_log: list[str] = field(default_factory=list)
    graph: PoseGraph | None = None
    solve: OptimizeResult | None = None
    frames_of: dict = field(default_factory=dict)  # agent id -> frame transform applied before solving
    components: list = field(default_factory=list)  # groups of agent ids sharing a frame
    warnings: list[str] = field(default_factory=list)

    @property
    def gaussians(self) -> Gaussians:
        return Gaussians.concatenate([s.gaussians for s in self.submaps])

    def trajectories(self) -> dict[int, Trajectory]:
        return {a.agent_id: a.trajectory for a in self.agents}


def _copy_result(r: AgentResult) -> AgentResult:
    return AgentResult(r.agent_id, [s.copy() for s in r.submaps], list(r.frames), r.db, list(r.closures),
                       list(r.closure_log), dict(r.timing))


def inter_agent_closures(results: list[AgentResult], intr, cfg: SlamConfig):
    """Query every agent's keyframes against the databases of agents listed before it."""
    L = cfg.loop
    cands = []
    for qi, qr in enumerate(results):
        for mr in results[:qi]:
            for e in qr.db.entries:
                cands.extend(query(mr.db, e, L.k, L.tau_sim, L.delta_min, L.long_range))
    index = {s.id: s for r in results for s in r.submaps}
    return evaluate_candidates(cands, index, intr, cfg)


def _agent_frames(results: list[AgentResult], closures: list[LoopClosure]):
    """Spread agent-0's frame over the closure graph, strongest closure first."""
    ids = [r.agent_id for r in results]
    anchors = {s.id: s.anchor for r in results for s in r.submaps}
    frames: dict[int, Pose] = {}
    components = []
    for root in ids:
        if root in frames:
            continue
        frames[root] = Pose.identity()
        comp = [root]
        grew = True
        while grew:
            grew = False
            ranked = sorted(closures, key=lambda c: (-c.fitness, c.a, c.b))
            for c in ranked:
                A, B = c.a[0], c.b[0]
                if (A in frames) == (B in frames):
                    continue
                if A in frames:
                    # global anchor of b = G_A anchor_a T_ab
                    G = compose(compose(compose(frames[A], anchors[c.a]), c.T_ab), inverse(anchors[c.b]))
                    frames[B] = G
                    comp.append(B)
                else:
                    G = compose(compose(compose(frames[B], anchors[c.b]), inverse(c.T_ab)), inverse(anchors[c.a]))
                    frames[A] = G
                    comp.append(A)
                grew = True
                break
        components.append(sorted(comp))
    return frames, components


def server_merge(results: list[AgentResult], intr, cfg: SlamConfig | None = None) -> MergeResult:
    """Inter-agent closures, joint optimization with agent 0's first keyframe fixed, re-anchoring."""
    cfg = cfg or SlamConfig()
    if not results:
        raise ValueError("server_merge needs at least one agent result")
    agents = [_copy_result(r) for r in results]
    if len(agents) == 1:
        return MergeResult(agents, [_globalize(s) for s in agents[0].submaps], frames_of={agents[0].agent_id: Pose.identity()},
                           components=[[agents[0].agent_id]])
    closures, lines = inter_agent_closures(agents, intr, cfg)
    frames, components = _agent_frames(agents, closures)
    warnings = []
    if len(components) > 1:
        msg = f"agents split into {len(components)} frames {components}; no inter-agent closure links them"
        log.warning(msg)
        warnings.append(msg)
    graph = PoseGraph(cfg.graph.max_iters, cfg.graph.lambda_init, cfg.graph.tol, cfg.loop.huber)
    roots = {comp[0] for comp in components}
    for r in agents:
        G = frames[r.agent_id]
        build_agent_graph(r, cfg, graph, fix_first=r.agent_id in roots, pose_map=lambda p, G=G: compose(G, p))
    first = {s.id: (s.agent_id, s.index, s.keyframes[0].frame_index) for r in agents for s in r.submaps if s.keyframes}
    for c in closures:
        graph.add_edge(first[c.a], first[c.b], c.T_ab, c.information, "inter")
    solve = optimize(graph)
    for r in agents:
        apply_graph(r, solve.poses)
    submaps = [_globalize(s) for r in agents for s in r.submaps]
    submaps = refine_global_map(submaps, intr, cfg)
    return MergeResult(agents, submaps, closures, lines, graph, solve, frames, components, warnings)


def refine_global_map(submaps: list[Submap], intr, cfg: SlamConfig) -> list[Submap]:
    """Jointly optimize all globalized Gaussians against every keyframe, poses frozen.

    Overlapping submaps from different agents occlude each other once merged;
    a short joint pass makes them agree. The result is split back per submap.
    """
    kfs = [k for s in submaps for k in s.keyframes]
    n_iter = cfg.merge.map_refine_iters_per_keyframe * len(kfs)
    if n_iter == 0:
        return submaps
    merged = Submap(-1, 0, Gaussians.concatenate([s.gaussians for s in submaps]), kfs)
    g = optimize_submap(merged, intr, cfg.mapping, iters=n_iter).gaussians
    out, start = [], 0
    for s in submaps:
        n = len(s.gaussians)
        out.append(Submap(s.agent_id, s.index, g.subset(np.arange(start, start + n)), s.keyframes, s.anchor))
        start += n
    return out


def _globalize(s: Submap) -> Submap:
    if not s.keyframes:
        return s.copy()
    return anchor_submaps({(s.agent_id, s.index, s.keyframes[0].frame_index): s.anchor}, [s])[0]


def merged_render_views(merge: MergeResult):
    """(keyframe, global pose) pairs over every agent, for training-view evaluation."""
    views = []
    for r in merge.agents:
        for s in r.submaps:
            for k in s.keyframes:
                views.append((k, compose(s.anchor, k.pose)))
    return views
