import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from globalsfm.epipolar import (
    Correspondences,
    EpipolarLoss,
    FilterSchedule,
    irls_epipolar_adjust,
    l1_loss,
    point_errors,
    precompute_pair_quadratics,
)
from globalsfm.errors import OverFiltering
from globalsfm.geometry import essential_from_relative, homogeneous, relative_pose
from globalsfm.intrinsics import calibrate_graph, refit_models
from globalsfm.metrics import compute_pose_metrics
from globalsfm.synth import SynthConfig, generate_scene


def _calibrated(scene, intrinsics=None):
    g = refit_models(scene.graph, {c: cam.alpha for c, cam in scene.intrinsics.items()})[0]
    return calibrate_graph(g, intrinsics or scene.intrinsics)


def _split(poses):
    return {i: r for i, (r, _) in poses.items()}, {i: c for i, (_, c) in poses.items()}


@pytest.fixture(scope="module")
def clean(clean_scene):
    return _calibrated(clean_scene)


def _direct_sum(graph, rotations, centers):
    total, z = 0.0, 0
    for p in graph.pairs:
        x1, x2 = p.active_points()
        e = essential_from_relative(*relative_pose(rotations[p.i], centers[p.i], rotations[p.j], centers[p.j]))
        eps = np.einsum("mi,ij,mj->m", homogeneous(x2), e, homogeneous(x1))
        total += float(np.sum(eps ** 2))
        z += len(eps)
    return total / z


def _random_poses(images, seed, spread=1.0):
    rng = np.random.default_rng(seed)
    rs = Rotation.random(len(images), random_state=seed).as_matrix()
    return ({i: rs[k] for k, i in enumerate(images)},
            {i: spread * rng.normal(size=3) for i in images})


def test_single_point_rank_one(rng):
    x1 = np.r_[rng.normal(size=2), 1.0]
    x2 = np.r_[rng.normal(size=2), 1.0]
    w = np.outer(x2, x1).ravel()
    W = np.outer(w, w)
    assert np.linalg.matrix_rank(W) == 1
    for _ in range(10):
        e = rng.normal(size=(3, 3))
        assert np.isclose(e.ravel() @ W @ e.ravel(), (x2 @ e @ x1) ** 2, rtol=1e-12)


def test_quadratics_symmetric_psd_with_expected_trace(clean):
    corr = Correspondences.from_graph(clean)
    for q in precompute_pair_quadratics(corr):
        assert np.allclose(q.W, q.W.T, atol=0)
        assert np.linalg.eigvalsh(q.W).min() >= -1e-12 * np.abs(q.W).max()
        p = corr.pairs[q.n]
        x1, x2 = p.active_points()
        w = (homogeneous(x2)[:, :, None] * homogeneous(x1)[:, None, :]).reshape(-1, 9)
        assert np.isclose(np.trace(q.W), np.sum(w ** 2), rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_quadratic_form_matches_direct_sum(clean, seed):
    rotations, centers = _random_poses(clean.image_ids, seed)
    quads = precompute_pair_quadratics(Correspondences.from_graph(clean))
    ev = EpipolarLoss(quads, clean.image_ids)
    fused = ev(ev.pack(rotations, centers))[0]
    direct = _direct_sum(clean, rotations, centers)
    assert abs(fused - direct) / direct < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_irls_weighted_loss_equals_l1(clean, seed):
    rotations, centers = _random_poses(clean.image_ids, seed)
    corr = Correspondences.from_graph(clean)
    ev = EpipolarLoss(precompute_pair_quadratics(corr), clean.image_ids)
    ev.slots = np.arange(len(corr.pairs))
    x = ev.pack(rotations, centers)
    eps = np.abs(point_errors(ev, x, corr))
    weighted = EpipolarLoss(precompute_pair_quadratics(corr, 1.0 / eps), clean.image_ids)
    l1 = l1_loss(rotations, centers, clean)
    assert abs(weighted(x)[0] - l1) / l1 < 1e-12
    # with the weight floor, points below it contribute eps^2 / floor instead of |eps|
    floored = EpipolarLoss(precompute_pair_quadratics(corr, 1.0 / np.maximum(eps, 1e-6)), clean.image_ids)
    expected = np.mean(eps ** 2 / np.maximum(eps, 1e-6))
    assert abs(floored(x)[0] - expected) / expected < 1e-12


def test_ground_truth_loss_vanishes(clean, clean_scene):
    rotations, centers = _split(clean_scene.pose_dict())
    quads = precompute_pair_quadratics(Correspondences.from_graph(clean))
    ev = EpipolarLoss(quads, clean.image_ids)
    assert ev(ev.pack(rotations, centers))[0] < 1e-16


@given(st.integers(0, 10_000), st.floats(0.05, 20.0))
@settings(max_examples=25, deadline=None)
def test_loss_invariant_under_similarity(seed, scale):
    scene = _SCENE
    rotations, centers = _random_poses(scene.image_ids, seed)
    g = Rotation.random(random_state=seed + 1).as_matrix()
    shift = np.random.default_rng(seed).normal(size=3) * 5
    quads = _QUADS
    ev = EpipolarLoss(quads, scene.image_ids)
    base = ev(ev.pack(rotations, centers))[0]
    moved = ev(ev.pack({i: r @ g.T for i, r in rotations.items()},
                       {i: scale * g @ c + shift for i, c in centers.items()}))[0]
    assert abs(base - moved) <= 1e-12 * max(base, 1.0)


_SCENE = None
_QUADS = None


@pytest.fixture(autouse=True, scope="module")
def _hypothesis_scene(clean):
    global _SCENE, _QUADS
    _SCENE = clean
    _QUADS = precompute_pair_quadratics(Correspondences.from_graph(clean))


def _fd_check(ev, x, h=1e-6):
    _, g = ev(x)
    fd = np.empty_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        fd[k] = (ev(x + e)[0] - ev(x - e)[0]) / (2 * h)
    return np.linalg.norm(fd - g) / np.linalg.norm(g)


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(clean, seed):
    images = clean.image_ids[:6]
    keep = [p for p in clean.pairs if p.i in images and p.j in images]
    sub = clean.with_pairs(keep)
    corr = Correspondences.from_graph(sub)
    rotations, centers = _random_poses(images, seed)
    cams = {i: clean.camera_of(i) for i in images}
    focals = {c: clean.intrinsics[c].focal for c in set(cams.values())}
    ev = EpipolarLoss(precompute_pair_quadratics(corr), images, cams, focals, refine_focal=True)
    x = ev.pack(rotations, centers, {c: f * 1.02 for c, f in focals.items()})
    assert _fd_check(ev, x) < 1e-4


def test_ground_truth_is_fixed_point(clean, clean_scene):
    rotations, centers = _split(clean_scene.pose_dict())
    out = irls_epipolar_adjust(rotations, centers, clean)
    before = sum(p.n_active for p in clean.pairs)
    assert sum(p.n_active for p in out.graph.pairs) == before
    for i in rotations:
        assert np.abs(out.rotations[i] - rotations[i]).max() < 1e-8
        assert np.abs(out.centers[i] - centers[i]).max() < 1e-8


def _perturb(rotations, centers, seed, deg=1.0, rel=0.02):
    rng = np.random.default_rng(seed)
    scale = np.mean([np.linalg.norm(c) for c in centers.values()])
    r = {i: Rotation.from_rotvec(np.radians(deg) * rng.normal(size=3) / np.sqrt(3)).as_matrix() @ m
         for i, m in rotations.items()}
    c = {i: v + rel * scale * rng.normal(size=3) for i, v in centers.items()}
    return r, c


def test_adjustment_improves_noisy_scene_with_outliers():
    scene = generate_scene(SynthConfig(n_cameras=15, n_points=1500, pixel_noise_sigma=1.0,
                                       outlier_fraction=0.10, seed=3))
    graph = _calibrated(scene)
    gt = scene.pose_dict()
    r0, c0 = _perturb(*_split(gt), seed=3)
    out = irls_epipolar_adjust(r0, c0, graph)
    before = compute_pose_metrics({i: (r0[i], c0[i]) for i in r0}, gt, [1.0]).rta[1.0]
    est = {i: (out.rotations[i], out.centers[i]) for i in out.rotations}
    after = compute_pose_metrics(est, gt, [1.0]).rta[1.0]
    assert after > before
    l1s = [r.l1_after for r in out.rounds]
    assert all(b <= a + 1e-12 for a, b in zip(l1s, l1s[1:]))


def test_focal_refinement_exact_without_noise():
    scene = generate_scene(SynthConfig(n_cameras=12, n_points=1000, seed=4, quantize=False))
    wrong = {c: dataclasses.replace(cam, focal=cam.focal * 1.03) for c, cam in scene.intrinsics.items()}
    graph = _calibrated(scene, wrong)
    out = irls_epipolar_adjust(*_split(scene.pose_dict()), graph, refine_focal=True)
    for c, cam in scene.intrinsics.items():
        assert abs(out.focals[c] / cam.focal - 1) < 1e-4


def test_focal_refinement_recovers_three_percent_error():
    scene = generate_scene(SynthConfig(n_cameras=12, n_points=1000, pixel_noise_sigma=0.5, seed=4))
    wrong = {c: dataclasses.replace(cam, focal=cam.focal * 1.03) for c, cam in scene.intrinsics.items()}
    graph = _calibrated(scene, wrong)
    rotations, centers = _split(scene.pose_dict())
    # noisy data needs more reweighting rounds than the default for the
    # IRLS iterate to settle near the L1 minimum in the focal direction
    out = irls_epipolar_adjust(rotations, centers, graph, refine_focal=True,
                               schedule=FilterSchedule(rounds=16))
    for c, cam in scene.intrinsics.items():
        assert abs(out.focals[c] / cam.focal - 1) < 5e-3


def test_overfiltering_aborts(clean, clean_scene):
    rotations, centers = _random_poses(clean.image_ids, 0)
    with pytest.raises(OverFiltering):
        irls_epipolar_adjust(rotations, centers, clean, schedule=FilterSchedule(1e-9, 1e-9, 1))


def test_schedule_is_geometric():
    th = FilterSchedule(0.01, 0.001, 3).thresholds()
    assert np.allclose(th, [0.01, np.sqrt(1e-5), 0.001])
    with pytest.raises(ValueError):
        FilterSchedule(0.001, 0.01)
