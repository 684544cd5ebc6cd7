import hashlib

import numpy as np
import pytest

from globalsfm.errors import ConfigError
from globalsfm.ingest import filter_graph_connectivity, load_match_graph
from globalsfm.intrinsics import undistort_points
from globalsfm.synth import SynthConfig, generate_scene, read_gt_poses


def _digest(root):
    h = hashlib.sha256()
    for f in sorted(root.iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@pytest.mark.parametrize("alpha", [0.0, 0.1])
def test_noiseless_matches_satisfy_pair_model(alpha):
    scene = generate_scene(SynthConfig(n_cameras=8, n_points=400, alpha=alpha, seed=3, quantize=False))
    cams = scene.intrinsics
    for p in scene.graph.pairs:
        cam_i = cams[scene.camera_of[p.i]]
        cam_j = cams[scene.camera_of[p.j]]
        x1 = np.c_[undistort_points(p.points1, cam_i), np.ones(len(p))]
        x2 = np.c_[undistort_points(p.points2, cam_j), np.ones(len(p))]
        m = p.model.m / np.linalg.norm(p.model.m)
        if p.model.kind == "F":
            err = np.abs(np.einsum("ni,ij,nj->n", x2, m, x1))
        else:
            y = x1 @ m.T
            err = np.linalg.norm(y[:, :2] / y[:, 2:] - x2[:, :2], axis=1) / 1e3
        assert err.max() < 1e-10


def test_orbit_graph_is_connected():
    scene = generate_scene(SynthConfig(n_cameras=50, n_points=3000, seed=0))
    kept = filter_graph_connectivity(scene.graph)[0]
    assert kept.image_ids == scene.graph.image_ids


def test_planar_scene_pairs_are_homographies():
    scene = generate_scene(SynthConfig(n_cameras=12, n_points=800, planar_fraction=1.0, seed=1))
    kinds = [p.model.kind for p in scene.graph.pairs]
    assert kinds.count("H") >= 0.9 * len(kinds)


def test_outliers_are_labelled():
    scene = generate_scene(SynthConfig(n_cameras=8, n_points=500, outlier_fraction=0.1, seed=2))
    labels = scene.keypoint_labels
    assert any((v == -1).any() for v in labels.values())
    clean = generate_scene(SynthConfig(n_cameras=8, n_points=500, seed=2))
    assert all((v >= 0).all() for v in clean.keypoint_labels.values())


def test_byte_identical_for_fixed_seed(tmp_path):
    cfg = SynthConfig(n_cameras=10, n_points=600, pixel_noise_sigma=1.0, outlier_fraction=0.05, seed=9)
    generate_scene(cfg, out_dir=tmp_path / "a")
    generate_scene(cfg, out_dir=tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    generate_scene(cfg.__class__(**{**cfg.__dict__, "seed": 10}), out_dir=tmp_path / "c")
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_written_scene_reloads(tmp_path):
    scene = generate_scene(SynthConfig(n_cameras=6, n_points=300, seed=4), out_dir=tmp_path)
    g = load_match_graph(tmp_path)
    assert g.image_ids == scene.graph.image_ids
    assert len(g.pairs) == len(scene.graph.pairs)
    gt = read_gt_poses(tmp_path / "gt_poses.tsv")
    for k, i in enumerate(scene.image_ids):
        assert np.allclose(gt[i][0], scene.rotations[k], atol=1e-9)
        assert np.allclose(gt[i][1], scene.centers[k], atol=1e-9)


@pytest.mark.parametrize("trajectory", ["orbit", "line", "grid", "random_sphere"])
def test_trajectories_generate(trajectory):
    scene = generate_scene(SynthConfig(n_cameras=9, n_points=800, trajectory=trajectory, seed=0))
    assert len(scene.graph.pairs) > 0
    r = scene.rotations
    assert np.allclose(r @ np.swapaxes(r, 1, 2), np.eye(3), atol=1e-12)


@pytest.mark.parametrize("kw", [dict(n_cameras=1), dict(n_points=7), dict(outlier_fraction=1.0),
                                dict(trajectory="spiral")])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        SynthConfig(**kw)
