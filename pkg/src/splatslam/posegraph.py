"""Keyframe pose graph over one or more agents, solved with Levenberg-Marquardt
on SE(3) using right increments, plus re-anchoring of submaps afterwards."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .geometry import Pose, adjoint, compose, inverse, se3_exp, se3_log_vec, se3_right_jacobian_inv
from .splat import Submap, transform_submap

NodeId = tuple[int, int, int]  # (agent, submap, keyframe frame index)
EDGE_KINDS = ("tracking", "intra", "inter")


class GraphError(ValueError):
    pass


def odometry_information(base: float = 1e2, rot_factor: float = 2.0) -> np.ndarray:
    return np.diag([base] * 3 + [base * rot_factor] * 3)


def _check_spd(info: np.ndarray) -> np.ndarray:
    info = np.asarray(info, dtype=np.float64)
    if info.shape != (6, 6) or not np.all(np.isfinite(info)):
        raise GraphError("information must be a finite 6x6 matrix")
    if not np.allclose(info, info.T, rtol=0, atol=1e-12 * max(1.0, np.abs(info).max())):
        raise GraphError("information matrix is not symmetric")
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise GraphError("information matrix is not positive definite") from None
    return info


@dataclass
class GraphNode:
    id: NodeId
    pose: Pose
    fixed: bool = False


@dataclass
class GraphEdge:
    frm: NodeId
    to: NodeId
    measured: Pose
    information: np.ndarray
    kind: str = "tracking"

    def __post_init__(self):
        if self.frm == self.to:
            raise GraphError("edge endpoints must differ")
        if self.kind not in EDGE_KINDS:
            raise GraphError(f"unknown edge kind {self.kind!r}")
        self.information = _check_spd(self.information)


@dataclass
class OptimizeResult:
    poses: dict
    objective: float
    initial_objective: float
    iterations: int
    history: list = field(default_factory=list)  # objective after each accepted step


class PoseGraph:
    def __init__(self, max_iters: int = 100, lambda_init: float = 1e-4, tol: float = 1e-10, huber: float = 0.0):
        self.nodes: dict[NodeId, GraphNode] = {}
        self.edges: list[GraphEdge] = []
        self.max_iters = max_iters
        self.lambda_init = lambda_init
        self.tol = tol
        self.huber = huber  # robust kernel width on loop edges (Mahalanobis units); 0 = off

    def add_node(self, nid, pose: Pose, fixed: bool = False) -> None:
        nid = tuple(nid)
        if nid in self.nodes:
            raise GraphError(f"duplicate node {nid}")
        self.nodes[nid] = GraphNode(nid, pose, fixed)

    def add_edge(self, frm, to, measured: Pose, information, kind: str = "tracking") -> GraphEdge:
        frm, to = tuple(frm), tuple(to)
        for n in (frm, to):
            if n not in self.nodes:
                raise GraphError(f"edge endpoint {n} is not a node")
        e = GraphEdge(frm, to, measured, information, kind)
        self.edges.append(e)
        return e

    def components(self) -> list[list[NodeId]]:
        adj: dict[NodeId, list[NodeId]] = {n: [] for n in self.nodes}
        for e in self.edges:
            adj[e.frm].append(e.to)
            adj[e.to].append(e.frm)
        seen, comps = set(), []
        for start in self.nodes:
            if start in seen:
                continue
            comp, queue = [], deque([start])
            seen.add(start)
            while queue:
                n = queue.popleft()
                comp.append(n)
                for m in adj[n]:
                    if m not in seen:
                        seen.add(m)
                        queue.append(m)
            comps.append(comp)
        return comps

    def check_connectivity(self) -> None:
        for comp in self.components():
            if not any(self.nodes[n].fixed for n in comp):
                raise GraphError(f"disconnected component without a fixed node (contains {comp[0]})")


def add_tracking_edges(graph: PoseGraph, node_ids: list, poses: list[Pose], information=None) -> list[GraphEdge]:
    """One edge per consecutive keyframe pair, measured = T_i^-1 T_j."""
    info = odometry_information() if information is None else information
    out = []
    for (a, Ta), (b, Tb) in zip(zip(node_ids, poses), zip(node_ids[1:], poses[1:])):
        out.append(graph.add_edge(a, b, compose(inverse(Ta), Tb), info, "tracking"))
    return out


def _residual(e: GraphEdge, Ti: Pose, Tj: Pose) -> np.ndarray:
    return se3_log_vec(compose(inverse(e.measured), compose(inverse(Ti), Tj)))


def _edge_weight(graph: PoseGraph, e: GraphEdge, r: np.ndarray) -> tuple[float, float]:
    """(IRLS weight, robust cost) of one edge."""
    s2 = float(r @ e.information @ r)
    k = graph.huber
    if k > 0 and e.kind != "tracking":
        s = np.sqrt(s2)
        if s > k:
            return k / s, 2 * k * s - k * k
    return 1.0, s2


def objective(graph: PoseGraph, poses: dict | None = None) -> float:
    poses = poses or {n: g.pose for n, g in graph.nodes.items()}
    total = 0.0
    for e in graph.edges:
        total += _edge_weight(graph, e, _residual(e, poses[e.frm], poses[e.to]))[1]
    return total


def _linearize(graph: PoseGraph, poses: dict, index: dict):
    n = len(index)
    rows, cols, vals = [], [], []
    b = np.zeros(6 * n)
    total = 0.0
    for e in graph.edges:
        Ti, Tj = poses[e.frm], poses[e.to]
        r = _residual(e, Ti, Tj)
        w, cost = _edge_weight(graph, e, r)
        total += cost
        Jr_inv = se3_right_jacobian_inv(r)
        Jj = Jr_inv
        Ji = -Jr_inv @ adjoint(compose(inverse(Tj), Ti))
        Om = w * e.information
        blocks = [(index.get(e.frm), Ji), (index.get(e.to), Jj)]
        for a, Ja in blocks:
            if a is None:
                continue
            b[6 * a:6 * a + 6] += Ja.T @ Om @ r
            for c, Jc in blocks:
                if c is None:
                    continue
                blk = Ja.T @ Om @ Jc
                ii, jj = np.meshgrid(np.arange(6 * a, 6 * a + 6), np.arange(6 * c, 6 * c + 6), indexing="ij")
                rows.append(ii.ravel())
                cols.append(jj.ravel())
                vals.append(blk.ravel())
    if rows:
        H = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(6 * n, 6 * n))
    else:
        H = sp.csc_matrix((6 * n, 6 * n))
    return H, b, total


def optimize(graph: PoseGraph) -> OptimizeResult:
    """Minimize sum of ||log(T_hat^-1 T_i^-1 T_j)||^2_Omega with T <- T exp(delta) updates.

    Damping starts at ``graph.lambda_init`` and is multiplied by 10 on a
    rejected step and divided by 10 on an accepted one. Fixed nodes never move.
    """
    if not graph.nodes:
        return OptimizeResult({}, 0.0, 0.0, 0)
    graph.check_connectivity()
    poses = {n: g.pose for n, g in graph.nodes.items()}
    free = [n for n, g in graph.nodes.items() if not g.fixed]
    index = {n: i for i, n in enumerate(free)}
    f0 = objective(graph, poses)
    f = f0
    history = [f0]
    lam = graph.lambda_init
    it = 0
    if not free or not graph.edges:
        return OptimizeResult(poses, f0, f0, 0, history)
    while it < graph.max_iters:
        it += 1
        H, b, _ = _linearize(graph, poses, index)
        diag = H.diagonal()
        accepted = False
        while lam < 1e12:
            A = H + sp.diags(lam * np.maximum(diag, 1e-12)).tocsc()
            delta = -spsolve(A, b)
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            trial = dict(poses)
            for n, i in index.items():
                trial[n] = compose(poses[n], se3_exp(delta[6 * i:6 * i + 6]))
            f_new = objective(graph, trial)
            if f_new <= f:
                accepted = True
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
        if not accepted:
            break
        rel = (f - f_new) / max(f, 1e-300)
        poses, f = trial, f_new
        history.append(f)
        if rel < graph.tol or f == 0.0:
            break
    return OptimizeResult(poses, f, f0, it, history)


def anchor_submaps(poses: dict, submaps: list[Submap]) -> list[Submap]:
    """Move each submap into the global frame given by its first keyframe's optimized pose."""
    out = []
    for s in submaps:
        if not s.keyframes:
            out.append(s.copy())
            continue
        nid = (s.agent_id, s.index, s.keyframes[0].frame_index)
        G = poses.get(nid, s.anchor)
        placed = Submap(s.agent_id, s.index, s.gaussians.copy(), list(s.keyframes), G)
        out.append(transform_submap(placed, G))
    return out


# --------------------------------------------------------------------------
# g2o text format
# --------------------------------------------------------------------------


def _fmt(values) -> str:
    return " ".join(f"{float(v):.9g}" for v in values)


def write_g2o(path, graph: PoseGraph) -> dict:
    """Write vertices, FIX lines and edges; node triples ride along in comment lines.

    Returns the node-id -> integer mapping used in the file.
    """
    ids = {n: i for i, n in enumerate(graph.nodes)}
    lines = []
    for n, i in ids.items():
        lines.append(f"# NODE {i} {n[0]} {n[1]} {n[2]}")
    for n, g in graph.nodes.items():
        w, x, y, z = g.pose.q
        lines.append(f"VERTEX_SE3:QUAT {ids[n]} " + _fmt([*g.pose.t, x, y, z, w]))
    for n, g in graph.nodes.items():
        if g.fixed:
            lines.append(f"FIX {ids[n]}")
    for e in graph.edges:
        w, x, y, z = e.measured.q
        upper = e.information[np.triu_indices(6)]
        lines.append(f"EDGE_SE3:QUAT {ids[e.frm]} {ids[e.to]} " + _fmt([*e.measured.t, x, y, z, w]) + " " + _fmt(upper))
        lines.append(f"# KIND {e.kind}")
    Path(path).write_text("\n".join(lines) + "\n")
    return ids


def read_g2o(path) -> PoseGraph:
    graph = PoseGraph()
    names: dict[int, NodeId] = {}
    fixed: list[int] = []
    pending = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "#":
            if len(tok) == 6 and tok[1] == "NODE":
                names[int(tok[2])] = (int(tok[3]), int(tok[4]), int(tok[5]))
            elif len(tok) == 3 and tok[1] == "KIND" and pending:
                pending[-1][-1] = tok[2]
            continue
        if tok[0] == "VERTEX_SE3:QUAT":
            if len(tok) != 9:
                raise GraphError(f"{path}:{ln}: malformed vertex")
            i = int(tok[1])
            v = [float(x) for x in tok[2:]]
            graph.add_node(names.get(i, (0, 0, i)), Pose([v[6], v[3], v[4], v[5]], v[:3]))
            names.setdefault(i, (0, 0, i))
        elif tok[0] == "FIX":
            fixed.extend(int(x) for x in tok[1:])
        elif tok[0] == "EDGE_SE3:QUAT":
            if len(tok) != 3 + 7 + 21:
                raise GraphError(f"{path}:{ln}: malformed edge")
            v = [float(x) for x in tok[3:]]
            info = np.zeros((6, 6))
            info[np.triu_indices(6)] = v[7:]
            info = info + np.triu(info, 1).T
            pending.append([int(tok[1]), int(tok[2]), Pose([v[6], v[3], v[4], v[5]], v[:3]), info, "tracking"])
        else:
            raise GraphError(f"{path}:{ln}: unsupported record {tok[0]}")
    for i in fixed:
        graph.nodes[names[i]].fixed = True
    for a, b, meas, info, kind in pending:
        graph.add_edge(names[a], names[b], meas, info, kind)
    return graph
