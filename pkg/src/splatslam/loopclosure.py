"""Loop-closure detection: keyframe descriptors, retrieval, initial alignment,
point-to-plane ICP and quality gating, ending in a relative-pose constraint
between two submap frames."""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .geometry import (
    CameraIntrinsics,
    PointCloud,
    Pose,
    compose,
    estimate_normals,
    inverse,
    se3_exp,
)
from .splat import RGBDFrame, Submap
from .tracking import TrackingConfig, coarse_odometry

Ids = tuple[int, int, int]  # (agent, submap, keyframe)

GRID = 3
HUE_BINS = 8
ORIENT_BINS = 8
DESCRIPTOR_DIM = GRID * GRID * (HUE_BINS + ORIENT_BINS)


@dataclass
class LoopConfig:
    enabled: bool = True
    k: int = 3
    tau_sim: float = 0.85
    delta_min: float = 1.0  # m of travelled path between query and match
    long_range: float = 20.0  # path distance beyond which T_init comes from registration
    tau_f: float = 0.5
    tau_rho: float = 0.05
    d_max_corr: float = 0.1
    n_iter: int = 50
    rel_fitness_tol: float = 1e-6
    rel_rmse_tol: float = 1e-6
    voxel: float = 0.02
    normal_k: int = 10
    w_trans: float = 1e2
    w_rot: float = 2e2
    huber: float = 0.0  # 0 disables the robust kernel on loop edges


# --------------------------------------------------------------------------
# descriptor
# --------------------------------------------------------------------------


def _hue_saturation(rgb: np.ndarray):
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    c = mx - mn
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    safe = np.where(c > 0, c, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0, np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(c > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, c / np.where(mx > 0, mx, 1.0), 0.0)
    return h, s


def _soft_weights(coord: np.ndarray, n: int, circular: bool):
    """Linear interpolation of continuous bin coordinates onto ``n`` bins."""
    c = coord - 0.5
    lo = np.floor(c).astype(np.int64)
    frac = c - lo
    pairs = []
    for idx, w in ((lo, 1.0 - frac), (lo + 1, frac)):
        if circular:
            pairs.append((idx % n, w))
        else:
            ok = (idx >= 0) & (idx < n)
            pairs.append((np.clip(idx, 0, n - 1), w * ok))
    return pairs


def _cell_histograms(value: np.ndarray, weights: np.ndarray, nbins: int) -> np.ndarray:
    """Histograms of ``value`` in [0, 1) per grid cell, soft-assigned in space and in value.

    Soft assignment keeps the descriptor stable under small viewpoint shifts.
    """
    H, W = value.shape
    ys = _soft_weights((np.arange(H) + 0.5) / H * GRID, GRID, False)
    xs = _soft_weights((np.arange(W) + 0.5) / W * GRID, GRID, False)
    bs = _soft_weights(value * nbins, nbins, True)
    out = np.zeros(GRID * GRID * nbins)
    for yi, yw in ys:
        for xi, xw in xs:
            cell = yi[:, None] * GRID + xi[None, :]
            wcell = yw[:, None] * xw[None, :] * weights
            for bi, bw in bs:
                out += np.bincount((cell * nbins + bi).ravel(), weights=(wcell * bw).ravel(), minlength=out.size)
    return out


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _centered(v: np.ndarray) -> np.ndarray:
    # raw histograms are non-negative, so their cosines crowd near 1; centering
    # turns the cosine into a correlation that separates places
    return _unit(v - v.mean())


def compute_descriptor(frame: RGBDFrame) -> np.ndarray:
    """144-d unit vector: per grid cell, a saturation-weighted hue histogram and a
    magnitude-weighted gradient-orientation histogram, square-rooted.

    Both halves are centered and normalized separately, so scaling the image
    brightness leaves the descriptor unchanged.
    """
    rgb = np.clip(np.asarray(frame.color, dtype=np.float64), 0.0, 1.0)
    h, s = _hue_saturation(rgb)
    hue = _cell_histograms(h, s, HUE_BINS)
    gray = gaussian_filter(rgb.mean(axis=2), 1.0)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = (np.arctan2(gy, gx) % np.pi) / np.pi  # unsigned orientation
    ori = _cell_histograms(ang, mag, ORIENT_BINS)
    d = np.concatenate([_centered(np.sqrt(hue)), _centered(np.sqrt(ori))])
    n = np.linalg.norm(d)
    if n == 0:
        d = np.ones(DESCRIPTOR_DIM)
        n = np.linalg.norm(d)
    return d / n


# --------------------------------------------------------------------------
# database and retrieval
# --------------------------------------------------------------------------


@dataclass
class DBEntry:
    agent_id: int
    submap_id: int
    keyframe_id: int
    descriptor: np.ndarray
    pose: Pose  # global-frame estimate
    path: float = 0.0  # cumulative travelled distance of the agent at this keyframe

    @property
    def ids(self) -> Ids:
        return (self.agent_id, self.submap_id, self.keyframe_id)


@dataclass
class LoopCandidate:
    query: Ids
    match: Ids
    similarity: float
    T_init: Pose | None  # None: to be estimated by dense registration
    baseline: float


@dataclass
class LoopClosure:
    a: tuple[int, int]  # match submap
    b: tuple[int, int]  # query submap
    T_ab: Pose
    fitness: float
    inlier_rmse: float
    information: np.ndarray
    query: Ids | None = None
    match: Ids | None = None


class DescriptorDatabase:
    """Append-only keyframe descriptor store; reads may run concurrently with one writer."""

    def __init__(self, entries: list[DBEntry] | None = None):
        self._entries: list[DBEntry] = []
        self._ids: set[Ids] = set()
        self._lock = threading.Lock()
        for e in entries or []:
            self.add(e)

    def add(self, entry: DBEntry) -> None:
        d = np.asarray(entry.descriptor, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("descriptor must be unit norm")
        with self._lock:
            if entry.ids in self._ids:
                raise ValueError(f"duplicate database entry {entry.ids}")
            self._ids.add(entry.ids)
            self._entries = self._entries + [entry]

    @property
    def entries(self) -> list[DBEntry]:
        return self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)


def baseline(q: DBEntry, e: DBEntry) -> float:
    """Travelled distance between two keyframes of one agent; infinite across agents."""
    if q.agent_id != e.agent_id:
        return np.inf
    return abs(q.path - e.path)


def query(db: DescriptorDatabase, q: DBEntry, k: int, tau_sim: float, delta_min: float,
          long_range: float = np.inf) -> list[LoopCandidate]:
    """Top-k cosine neighbours of ``q`` among eligible entries, kept if similarity >= tau_sim.

    Eligible entries lie outside the query's own submap and at least
    ``delta_min`` of baseline away. Ties keep database order.
    """
    entries = [e for e in db.entries
               if (e.agent_id, e.submap_id) != (q.agent_id, q.submap_id) and baseline(q, e) >= delta_min]
    if not entries or k <= 0:
        return []
    D = np.stack([e.descriptor for e in entries])
    sims = D @ q.descriptor
    order = np.argsort(-sims, kind="stable")[:k]
    out = []
    for i in order:
        s = float(sims[i])
        if s < tau_sim:
            continue
        e = entries[i]
        b = baseline(q, e)
        pose_based = e.agent_id == q.agent_id and b <= long_range
        T_init = compose(inverse(e.pose), q.pose) if pose_based else None
        out.append(LoopCandidate(q.ids, e.ids, s, T_init, b))
    return out


def coarse_register(query_frame: RGBDFrame, match_frame: RGBDFrame, intr: CameraIntrinsics,
                    cfg: TrackingConfig) -> Pose:
    """Dense hybrid registration returning the query-to-match camera transform."""
    return coarse_odometry(match_frame, query_frame, intr, cfg)


# --------------------------------------------------------------------------
# ICP and gating
# --------------------------------------------------------------------------


def _icp_eval(src_pts, tree, tgt_pts, tgt_n, T: Pose, d_max: float):
    p = src_pts @ T.R.T + T.t
    dist, idx = tree.query(p, k=1, distance_upper_bound=d_max)
    inl = np.isfinite(dist)
    idx = idx[inl]
    p = p[inl]
    r = np.einsum("ij,ij->i", tgt_n[idx], p - tgt_pts[idx])
    return p, idx, r, inl.sum()


def icp_refine(src: PointCloud, tgt: PointCloud, T_init: Pose, d_max_corr: float = 0.1, n_iter: int = 50,
               rel_fitness_tol: float = 1e-6, rel_rmse_tol: float = 1e-6) -> tuple[Pose, float, float]:
    """Point-to-plane ICP aligning ``src`` onto ``tgt``; returns (T, fitness, inlier RMSE).

    Only target points with a valid normal take part. Zero correspondences at the
    initial pose give (T_init, 0, inf).
    """
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("ICP needs nonempty clouds")
    if tgt.normals is None:
        raise ValueError("target cloud needs normals")
    ok = tgt.normal_valid
    tgt_pts, tgt_n = tgt.points[ok], tgt.normals[ok]
    if len(tgt_pts) == 0:
        raise ValueError("target cloud has no valid normals")
    tree = cKDTree(tgt_pts)
    n_src = len(src)
    T = T_init
    prev_f, prev_rmse = None, None
    for _ in range(n_iter):
        p, idx, r, n_in = _icp_eval(src.points, tree, tgt_pts, tgt_n, T, d_max_corr)
        if n_in == 0:
            if prev_f is None:
                return T_init, 0.0, np.inf
            break
        f = n_in / n_src
        rmse = float(np.sqrt(np.mean(r * r)))
        if prev_f is not None:
            df = abs(f - prev_f) / max(prev_f, 1e-12)
            dr = abs(rmse - prev_rmse) / max(prev_rmse, 1e-12)
            if df < rel_fitness_tol and dr < rel_rmse_tol:
                break
        prev_f, prev_rmse = f, rmse
        n = tgt_n[idx]
        J = np.concatenate([n, np.cross(p, n)], axis=1)  # d r / d(rho, phi) of exp(delta) T
        A = J.T @ J
        b = J.T @ r
        A += 1e-12 * max(np.trace(A), 1e-12) * np.eye(6)
        delta = -np.linalg.solve(A, b)
        T = compose(se3_exp(delta), T)
        if np.linalg.norm(delta) < 1e-12:
            break
    p, idx, r, n_in = _icp_eval(src.points, tree, tgt_pts, tgt_n, T, d_max_corr)
    if n_in == 0:
        return T, 0.0, np.inf
    return T, n_in / n_src, float(np.sqrt(np.mean(r * r)))


def gate(f: float, rho: float, tau_f: float, tau_rho: float) -> bool:
    return bool(f > tau_f and rho < tau_rho)


def loop_information(f: float, cfg: LoopConfig) -> np.ndarray:
    return f * np.diag([cfg.w_trans] * 3 + [cfg.w_rot] * 3)


def build_loop_constraint(cand: LoopCandidate, T_loop: Pose, f: float, rho: float, P_q: Pose, P_j: Pose,
                          cfg: LoopConfig) -> LoopClosure:
    """Turn a keyframe-to-keyframe alignment into a submap-to-submap constraint.

    ``T_loop`` maps query-camera coordinates into match-camera coordinates;
    ``P_q`` and ``P_j`` are the keyframes' poses in their submap frames. The
    result maps the query submap frame (b) into the match submap frame (a).
    """
    T_ab = compose(compose(P_j, T_loop), inverse(P_q))
    return LoopClosure(
        a=cand.match[:2],
        b=cand.query[:2],
        T_ab=T_ab,
        fitness=float(f),
        inlier_rmse=float(rho),
        information=loop_information(f, cfg),
        query=cand.query,
        match=cand.match,
    )


def submap_cloud(submap: Submap, intr: CameraIntrinsics, kf_pose_local: Pose, cfg: LoopConfig,
                 max_depth: float = 20.0) -> PointCloud:
    """Voxelized submap cloud with normals, expressed in the frame of one of its keyframes."""
    cloud = submap.point_cloud(intr, cfg.voxel, max_depth)
    cloud = cloud.transformed(inverse(kf_pose_local))
    if len(cloud) < cfg.normal_k:
        return cloud
    origins = np.array([inverse(kf_pose_local).apply(k.pose.t[None])[0] for k in submap.keyframes])
    return estimate_normals(cloud, cfg.normal_k, origins.mean(axis=0))


def format_log_line(cand: LoopCandidate, f: float, rho: float, accepted: bool) -> str:
    q, m = cand.query, cand.match
    return (f"query={q[0]},{q[1]},{q[2]} match={m[0]},{m[1]},{m[2]} sim={cand.similarity:.6f} "
            f"fitness={f:.6f} rmse={rho:.6f} accepted={int(accepted)}")
