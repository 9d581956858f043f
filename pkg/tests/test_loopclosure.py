import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatslam.geometry import PointCloud, Pose, compose, estimate_normals, inverse, pose_distance, se3_exp
from splatslam.loopclosure import (
    DESCRIPTOR_DIM,
    DBEntry,
    DescriptorDatabase,
    LoopCandidate,
    LoopConfig,
    build_loop_constraint,
    coarse_register,
    compute_descriptor,
    format_log_line,
    gate,
    icp_refine,
    query,
)
from splatslam.pipeline.synth import SynthParams, synth_scene
from splatslam.splat import RGBDFrame
from splatslam.tracking import InsufficientOverlap, TrackingConfig

from conftest import random_pose
from support import random_small_motion, structured_cloud


@pytest.fixture(scope="module")
def scene():
    return synth_scene(2, SynthParams(frames_per_agent=24))


def _unit(v):
    return v / np.linalg.norm(v)


def test_descriptor_is_unit_and_deterministic(scene):
    f = scene.datasets[0].frames[3]
    d = compute_descriptor(f)
    assert d.shape == (DESCRIPTOR_DIM,) and abs(np.linalg.norm(d) - 1) < 1e-9
    assert np.array_equal(d, compute_descriptor(RGBDFrame(0.0, f.color.copy(), f.depth)))


def test_descriptor_brightness_invariance(scene):
    f = scene.datasets[0].frames[5]
    dim = RGBDFrame(0.0, f.color * 0.5, f.depth)
    assert compute_descriptor(f) @ compute_descriptor(dim) > 0.99


def test_descriptor_degenerate_frame():
    d = compute_descriptor(RGBDFrame(0.0, np.full((20, 30, 3), 0.4), np.ones((20, 30))))
    assert abs(np.linalg.norm(d) - 1) < 1e-9


def test_descriptor_separates_places(scene):
    frames = scene.datasets[0].frames
    other = synth_scene(9, SynthParams(frames_per_agent=24)).datasets[0].frames
    D = np.stack([compute_descriptor(f) for f in frames])
    E = np.stack([compute_descriptor(f) for f in other])
    matched = np.array([D[i] @ D[i + 1] for i in range(len(D) - 1)])
    disjoint = (D @ E.T).ravel()
    assert np.median(disjoint) < np.percentile(matched, 10)


def _db(rng, n=20, dim=16):
    entries = []
    for i in range(n):
        entries.append(DBEntry(0, i // 4, i, _unit(rng.normal(size=dim)), Pose.identity(), path=0.5 * i))
    return DescriptorDatabase(entries)


def test_query_own_submap_only_is_empty(rng):
    db = DescriptorDatabase([DBEntry(0, 0, i, _unit(rng.normal(size=8)), Pose.identity(), 3.0 * i) for i in range(4)])
    assert query(db, db.entries[0], 3, -1.0, 0.0) == []


def test_query_duplicate_keyframe_similarity_one(rng):
    d = _unit(rng.normal(size=8))
    db = DescriptorDatabase([DBEntry(0, 0, 0, d, Pose.identity(), 0.0), DBEntry(0, 3, 9, d, Pose(t=[2, 0, 0]), 5.0)])
    c = query(db, db.entries[1], 3, 0.85, 1.0)
    assert len(c) == 1 and np.isclose(c[0].similarity, 1.0) and c[0].match == (0, 0, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_query_matches_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    db = _db(rng)
    q = db.entries[int(rng.integers(0, 20))]
    got = [c.match for c in query(db, q, k, -1.0, 1.0)]
    eligible = [e for e in db.entries if e.submap_id != q.submap_id and abs(e.path - q.path) >= 1.0]
    sims = sorted(((-float(e.descriptor @ q.descriptor), i, e.ids) for i, e in enumerate(eligible)))
    assert got == [ids for _, _, ids in sims[:k]]


def test_query_threshold_and_pose_init(rng):
    db = _db(rng)
    q = db.entries[0]
    for c in query(db, q, 5, 0.0, 1.0, long_range=4.0):
        assert c.similarity >= 0.0 and c.baseline >= 1.0
        e = next(x for x in db.entries if x.ids == c.match)
        if c.baseline <= 4.0:
            assert np.allclose(c.T_init.matrix(), compose(inverse(e.pose), q.pose).matrix())
        else:
            assert c.T_init is None


def test_query_across_agents_defers_registration(rng):
    d = _unit(rng.normal(size=8))
    db = DescriptorDatabase([DBEntry(1, 0, 0, d, Pose.identity(), 0.0)])
    c = query(db, DBEntry(0, 0, 0, d, Pose.identity(), 0.0), 3, 0.5, 1.0)
    assert len(c) == 1 and c[0].T_init is None


def test_database_rejects_bad_entries(rng):
    db = _db(rng, 4)
    with pytest.raises(ValueError):
        db.add(DBEntry(0, 0, 0, _unit(rng.normal(size=16)), Pose.identity()))
    with pytest.raises(ValueError):
        db.add(DBEntry(0, 9, 9, rng.normal(size=16) * 3, Pose.identity()))


def test_coarse_register(scene, rng):
    intr = scene.params.intrinsics()
    P0 = scene.datasets[0].groundtruth.poses[0]
    color, depth = scene.geometry.render(P0, intr)
    a = RGBDFrame(0.0, color, depth)
    T = coarse_register(a, a, intr, TrackingConfig())
    assert pose_distance(T, Pose.identity())[0] < 1e-6
    rel = se3_exp(np.r_[_unit(rng.normal(size=3)) * 0.10, _unit(rng.normal(size=3)) * np.deg2rad(5)])
    c2, d2 = scene.geometry.render(compose(P0, rel), intr)
    T = coarse_register(RGBDFrame(0.0, c2, d2), a, intr, TrackingConfig())
    t, r = pose_distance(T, rel)
    assert t < 0.01 and np.rad2deg(r) < 0.5
    far, fard = scene.geometry.render(compose(P0, se3_exp([0, 0, 0, 0, np.pi * 0.9, 0])), intr)
    with pytest.raises(InsufficientOverlap):
        coarse_register(RGBDFrame(0.0, far, np.zeros_like(fard)), a, intr, TrackingConfig())


def _with_normals(points, viewpoint=(0, 0, 5.0)):
    return estimate_normals(PointCloud(points), 10, np.array(viewpoint))


def test_icp_identity(rng):
    P = structured_cloud(rng, 1500)
    T, f, rho = icp_refine(PointCloud(P), _with_normals(P), Pose.identity())
    assert f == 1.0 and rho < 1e-6 and pose_distance(T, Pose.identity())[0] < 1e-9


def test_icp_recovers_known_transform(rng):
    for _ in range(5):
        P = structured_cloud(rng)
        T = random_small_motion(rng, 0.05, 3.0)
        init = compose(T, se3_exp(rng.normal(size=6) * 0.01))
        Te, f, rho = icp_refine(PointCloud(P), _with_normals(T.apply(P)), init, d_max_corr=0.2, n_iter=100)
        t, r = pose_distance(Te, T)
        assert t < 1e-3 and np.rad2deg(r) < 0.1 and f > 0.95


def test_icp_initialization_consistent(rng):
    P = structured_cloud(rng)
    T = random_small_motion(rng, 0.05, 3.0)
    tgt = _with_normals(T.apply(P))
    a = icp_refine(PointCloud(P), tgt, T, 0.2, 100)[0]
    b = icp_refine(PointCloud(P), tgt, compose(T, se3_exp(rng.normal(size=6) * 5e-3)), 0.2, 100)[0]
    assert np.abs(a.matrix() - b.matrix()).max() < 1e-4


def test_icp_disjoint_clouds_low_fitness(rng):
    P = structured_cloud(rng)
    Q = structured_cloud(rng) + [5.0, 0, 0]
    _, f, _ = icp_refine(PointCloud(P), _with_normals(Q), Pose.identity())
    assert f < 0.1


def test_icp_no_correspondence(rng):
    P = structured_cloud(rng, 300)
    T, f, rho = icp_refine(PointCloud(P + 100.0), _with_normals(P), Pose.identity())
    assert f == 0.0 and rho == np.inf


def test_icp_input_errors(rng):
    P = structured_cloud(rng, 300)
    with pytest.raises(ValueError):
        icp_refine(PointCloud(P), PointCloud(P), Pose.identity())
    with pytest.raises(ValueError):
        icp_refine(PointCloud(np.zeros((0, 3))), _with_normals(P), Pose.identity())


def test_gate_examples():
    assert gate(1.0, 0.0, 0.5, 0.05)
    assert not gate(0.5, 0.0, 0.5, 0.05)
    assert not gate(0.9, 0.05, 0.5, 0.05)


@settings(max_examples=200)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 0.5), st.floats(0, 0.5))
def test_gate_predicate_and_monotone(f, tf, df, rho, tr, dr):
    assert gate(f, rho, tf, tr) == (f > tf and rho < tr)
    if gate(f, rho, tf, tr):
        assert gate(min(1.0, f + df), max(0.0, rho - dr), tf, tr)


def test_loop_constraint_offsets(rng):
    cfg = LoopConfig()
    cand = LoopCandidate((0, 4, 40), (0, 1, 10), 0.9, None, 5.0)
    T_loop = random_pose(rng, 0.5, 0.5)
    c = build_loop_constraint(cand, T_loop, 0.5, 0.01, Pose.identity(), Pose.identity(), cfg)
    assert np.allclose(c.T_ab.matrix(), T_loop.matrix())
    assert np.allclose(np.diag(c.information), 0.5 * np.array([cfg.w_trans] * 3 + [cfg.w_rot] * 3))
    # ground truth: two submap frames and keyframes inside them
    A, B = random_pose(rng), random_pose(rng)
    P_j, P_q = random_pose(rng, 0.4, 0.4), random_pose(rng, 0.4, 0.4)
    cam_q, cam_j = compose(B, P_q), compose(A, P_j)
    T_loop = compose(inverse(cam_j), cam_q)
    c = build_loop_constraint(cand, T_loop, 0.8, 0.01, P_q, P_j, cfg)
    assert np.allclose(c.T_ab.matrix(), compose(inverse(A), B).matrix(), atol=1e-9)
    assert c.a == (0, 1) and c.b == (0, 4)
    assert np.all(np.linalg.eigvalsh(c.information) > 0)


def test_log_line_format():
    line = format_log_line(LoopCandidate((0, 2, 10), (1, 0, 5), 0.9, None, 1.0), 0.75, 0.01, True)
    assert line == "query=0,2,10 match=1,0,5 sim=0.900000 fitness=0.750000 rmse=0.010000 accepted=1"
