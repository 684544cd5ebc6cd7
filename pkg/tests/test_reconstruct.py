from dataclasses import replace

import numpy as np
import pytest

from globalsfm.intrinsics import calibrate_graph, refit_models
from globalsfm.reconstruct import merge_and_filter_points, ray_midpoints, triangulate_pairs
from globalsfm.synth import SynthConfig, generate_scene
from globalsfm.tracks import build_tracks, complete_matches


def _prepare(scene):
    g = refit_models(scene.graph, {c: cam.alpha for c, cam in scene.intrinsics.items()})[0]
    g = calibrate_graph(g, scene.intrinsics)
    tracks = build_tracks(g)
    return complete_matches(g, tracks), tracks


def _poses(scene):
    p = scene.pose_dict()
    return {i: r for i, (r, _) in p.items()}, {i: c for i, (_, c) in p.items()}


@pytest.fixture(scope="module")
def clean(clean_scene):
    graph, tracks = _prepare(clean_scene)
    return clean_scene, graph, tracks


def test_point_on_baseline_is_skipped():
    # cameras at (+-1, 0, 0) looking at the origin: both rays lie on the x axis
    c1, c2 = np.array([[-1.0, 0, 0]]), np.array([[1.0, 0, 0]])
    _, ok = ray_midpoints(c1, -c1, c2, -c2)
    assert not ok.any()


def test_symmetric_midpoint():
    c1, c2 = np.array([[-1.0, 0, 0]]), np.array([[1.0, 0, 0]])
    target = np.array([[0.0, 0.0, 1.0]])
    mid, ok = ray_midpoints(c1, target - c1, c2, target - c2)
    assert ok.all()
    assert np.abs(mid - target).max() < 1e-12
    c3 = np.array([[0.0, 1.0, 0.0]])
    mid, ok = ray_midpoints(c1, -c1, c3, -c3)
    assert ok.all() and np.abs(mid).max() < 1e-12


def test_parallel_rays_skipped():
    c1, c2 = np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])
    d = np.array([[0.0, 0.0, 1.0]])
    _, ok = ray_midpoints(c1, d, c2, d)
    assert not ok.any()


def test_noiseless_points_match_ground_truth(clean):
    scene, graph, tracks = clean
    rotations, centers = _poses(scene)
    raw = triangulate_pairs(rotations, centers, graph, tracks)
    xyz, cnt = raw.merged(len(tracks))
    labels = scene.keypoint_labels
    errs = []
    for t in range(len(tracks)):
        if cnt[t] == 0:
            continue
        ids = {int(labels[im][kp]) for im, kp in tracks[t].members}
        assert len(ids) == 1
        errs.append(np.linalg.norm(xyz[t] - scene.points[ids.pop()]))
    scale = np.linalg.norm(scene.centers - scene.centers.mean(0), axis=1).mean()
    assert np.sqrt(np.mean(np.square(errs))) < 1e-8 * scale


def test_noiseless_tracks_all_survive(clean):
    scene, graph, tracks = clean
    rotations, centers = _poses(scene)
    raw = triangulate_pairs(rotations, centers, graph, tracks)
    points = merge_and_filter_points(raw, rotations, centers, graph, tracks)
    eligible = np.count_nonzero(tracks.sizes >= 3)
    assert len(points) == eligible
    assert all(len(p.observations) >= 3 for p in points)


def _move_keypoint(graph, image, kp, delta):
    table = graph.keypoints[image].copy()
    table[kp] += delta
    keypoints = dict(graph.keypoints)
    keypoints[image] = table
    pairs = []
    for p in graph.pairs:
        if p.i == image:
            p = replace(p, points1=table[p.kp1])
        elif p.j == image:
            p = replace(p, points2=table[p.kp2])
        pairs.append(p)
    return replace(graph, keypoints=keypoints, pairs=tuple(pairs))


def test_outlier_observation_filtered(clean):
    scene, graph, tracks = clean
    rotations, centers = _poses(scene)
    t = int(np.argmax(tracks.sizes))
    image, kp = tracks[t].members[0]
    f = graph.intrinsics[graph.camera_of(image)].focal
    bad = _move_keypoint(graph, image, kp, np.array([50.0, 0.0]) / f)
    raw = triangulate_pairs(rotations, centers, bad, tracks)
    points = {p.track_id: p for p in merge_and_filter_points(raw, rotations, centers, bad, tracks)}
    assert t in points
    kept = {(im, k) for im, k, _ in points[t].observations}
    assert (image, kp) not in kept
    assert len(kept) == len(tracks[t]) - 1


def test_two_view_track_dropped(clean):
    scene, graph, tracks = clean
    rotations, centers = _poses(scene)
    raw = triangulate_pairs(rotations, centers, graph, tracks)
    ids = {p.track_id for p in merge_and_filter_points(raw, rotations, centers, graph, tracks)}
    two = np.flatnonzero(tracks.sizes == 2)
    assert len(two) > 0
    assert not ids & set(two.tolist())


@pytest.fixture(scope="module")
def noisy():
    scene = generate_scene(SynthConfig(n_cameras=12, n_points=800, pixel_noise_sigma=1.5,
                                       outlier_fraction=0.05, seed=6))
    graph, tracks = _prepare(scene)
    rotations, centers = _poses(scene)
    return graph, tracks, rotations, centers, triangulate_pairs(rotations, centers, graph, tracks)


def test_emitted_points_satisfy_invariants(noisy):
    graph, tracks, rotations, centers, raw = noisy
    min_angle = 1.5
    for p in merge_and_filter_points(raw, rotations, centers, graph, tracks, min_angle_deg=min_angle):
        assert len(p.observations) >= 3
        assert p.max_angle >= np.radians(min_angle)
        assert all(err <= 4.0 for _, _, err in p.observations)
        assert np.all(np.isfinite(p.xyz))
        assert all(im in rotations for im, _, _ in p.observations)


def test_filter_monotone_in_threshold(noisy):
    graph, tracks, rotations, centers, raw = noisy
    prev = set()
    for thr in (0.5, 1.0, 2.0, 4.0, 8.0, 100.0):
        ids = {p.track_id for p in merge_and_filter_points(raw, rotations, centers, graph, tracks,
                                                           max_reproj_error=thr)}
        assert prev <= ids
        prev = ids
