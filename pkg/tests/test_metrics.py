import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from globalsfm.errors import AlignmentDegenerate
from globalsfm.metrics import auc, compute_pose_metrics, recall, rotation_angle, sim3_align

from conftest import random_rotations


def _scene(n, seed):
    rng = np.random.default_rng(seed)
    rs = random_rotations(n, seed)
    return {i: (rs[i], rng.normal(size=3)) for i in range(n)}


def _noisy(gt, seed, deg=2.0, sigma=0.05):
    rng = np.random.default_rng(seed)
    out = {}
    for i, (r, c) in gt.items():
        dr = Rotation.from_rotvec(np.radians(deg) * rng.normal(size=3)).as_matrix()
        out[i] = (dr @ r, c + sigma * rng.normal(size=3))
    return out


def _similarity(poses, s, g, t):
    return {i: (r @ g.T, s * g @ c + t) for i, (r, c) in poses.items()}


def test_sim3_identity():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    s, r, t = sim3_align(pts, pts)
    assert s == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(r, np.eye(3), atol=1e-12)
    assert np.allclose(t, 0, atol=1e-12)


def test_sim3_exact_similarity():
    gt = np.random.default_rng(1).normal(size=(10, 3))
    g = Rotation.from_rotvec(np.radians(30) * np.array([0, 0, 1.0])).as_matrix()
    est = 2.0 * gt @ g.T
    s, r, t = sim3_align(est, gt)
    assert s == pytest.approx(0.5, abs=1e-12)
    assert np.abs(s * est @ r.T + t - gt).max() < 1e-12


def test_sim3_matches_numeric_minimization():
    rng = np.random.default_rng(2)
    gt = rng.normal(size=(12, 3))
    est = 1.7 * gt @ Rotation.random(random_state=3).as_matrix().T + 0.4 + 0.05 * rng.normal(size=(12, 3))
    s, r, t = sim3_align(est, gt)
    closed = np.sum((s * est @ r.T + t - gt) ** 2)

    def cost(p):
        rr = Rotation.from_rotvec(p[1:4]).as_matrix()
        return np.sum((p[0] * est @ rr.T + p[4:] - gt) ** 2)

    p0 = np.r_[s, Rotation.from_matrix(r).as_rotvec(), t] + 0.01
    res = minimize(cost, p0, method="BFGS", options=dict(gtol=1e-12))
    assert abs(res.fun - closed) < 1e-8
    assert closed <= res.fun + 1e-12


def test_sim3_degenerate():
    with pytest.raises(AlignmentDegenerate):
        sim3_align(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(AlignmentDegenerate):
        sim3_align(line, np.random.default_rng(0).normal(size=(5, 3)))


def test_perfect_estimate():
    gt = _scene(8, 0)
    m = compute_pose_metrics(gt, gt)
    assert m.ate < 1e-12
    assert all(v == 100.0 for v in m.rra.values())
    assert all(v == 100.0 for v in m.rta.values())
    assert all(v == pytest.approx(100.0) for v in m.auc_rt.values())


def test_one_camera_rotated():
    gt = _scene(10, 1)
    est = dict(gt)
    r, c = gt[4]
    est[4] = (Rotation.from_rotvec(np.radians(5) * np.array([0, 1.0, 0])).as_matrix() @ r, c)
    m = compute_pose_metrics(est, gt, [3.0])
    assert m.rra[3.0] == pytest.approx(100 * math.comb(9, 2) / math.comb(10, 2))
    assert m.rra[3.0] == pytest.approx(80.0)


def _brute_force_rta(est, gt, delta):
    hits = total = 0
    for a, b in itertools.combinations(sorted(gt), 2):
        te = est[b][0] @ (est[a][1] - est[b][1])
        tg = gt[b][0] @ (gt[a][1] - gt[b][1])
        cos = te @ tg / (np.linalg.norm(te) * np.linalg.norm(tg))
        ang = math.degrees(math.acos(max(-1.0, min(1.0, cos))))
        hits += ang < delta
        total += 1
    return 100.0 * hits / total


@pytest.mark.parametrize("seed", range(5))
def test_rta_matches_brute_force(seed):
    gt = _scene(15, seed)
    est = _noisy(gt, seed + 100)
    m = compute_pose_metrics(est, gt, [1.0, 3.0, 5.0, 10.0])
    for d in m.rta:
        assert abs(m.rta[d] - _brute_force_rta(est, gt, d)) < 1e-9


@given(st.integers(0, 1000), st.floats(0.1, 10.0))
@settings(max_examples=30, deadline=None)
def test_metrics_invariant_under_similarity(seed, scale):
    gt = _scene(9, seed)
    est = _noisy(gt, seed + 1)
    moved = _similarity(est, scale, Rotation.random(random_state=seed).as_matrix(), np.array([1.0, -2.0, 0.5]))
    a = compute_pose_metrics(est, gt)
    b = compute_pose_metrics(moved, gt)
    assert a.rra == b.rra and a.rta == b.rta
    assert abs(a.ate - b.ate) < 1e-12


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_recall_monotone_and_bounded(seed):
    gt = _scene(9, seed)
    m = compute_pose_metrics(_noisy(gt, seed, deg=4.0, sigma=0.2), gt, [0.5, 1, 2, 4, 8, 16])
    for table in (m.rra, m.rta):
        vals = [table[d] for d in sorted(table)]
        assert all(0 <= v <= 100 for v in vals)
        assert vals == sorted(vals)
    for d in m.auc_rt:
        assert 0 <= m.auc_rt[d] <= min(m.rra[d], m.rta[d]) + 1e-9


def test_auc_simple_cases():
    assert auc([0.0, 0.0], 1.0) == pytest.approx(100.0)
    assert auc([2.0], 1.0) == 0.0
    # trapezoid through (0, 0), (0.5, 1), (1, 1)
    assert auc([0.5], 1.0) == pytest.approx(75.0)
    assert recall([0.5, 2.0, np.nan], 1.0) == 50.0


def test_rotation_angle_near_pi():
    r = Rotation.from_rotvec(np.array([0, 0, np.pi - 1e-9])).as_matrix()
    assert rotation_angle(r) == pytest.approx(np.pi - 1e-9, abs=1e-8)
    assert rotation_angle(np.eye(3)) == 0.0
