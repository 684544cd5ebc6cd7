"""Sparse point cloud from tracks and final poses.

Every active within-track correspondence is triangulated by the midpoint of
the two viewing rays; a track's point is the average of its pairwise
triangulations. Observations with a large reprojection error are dropped,
then points with fewer than three inliers or a small triangulation angle.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import homogeneous


@dataclass
class SparsePoint:
    xyz: np.ndarray
    track_id: int
    observations: list  # (image_id, keypoint_index, reprojection error in pixels)
    max_angle: float
    color: tuple = (0, 0, 0)


@dataclass
class RawPoints:
    """Pairwise triangulations grouped by track."""

    track: np.ndarray
    image_a: np.ndarray
    kp_a: np.ndarray
    image_b: np.ndarray
    kp_b: np.ndarray
    xyz: np.ndarray
    n_skipped: int

    def merged(self, n_tracks, keep=None):
        """Per-track mean of the pairwise points; rows of ``keep`` only. Returns ``(xyz, count)``."""
        sel = np.ones(len(self.track), bool) if keep is None else keep
        t = self.track[sel]
        cnt = np.bincount(t, minlength=n_tracks)
        xyz = np.stack([np.bincount(t, self.xyz[sel, k], n_tracks) for k in range(3)], 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            xyz = xyz / cnt[:, None]
        return xyz, cnt


def ray_midpoints(c1, d1, c2, d2, min_angle=1e-4):
    """Midpoint of the closest points of rays ``c + s d``; ``valid`` false for near-parallel rays.

    Points on the baseline (antiparallel rays) are invalid as well: every
    point of the shared line is then equally close to both rays.
    """
    d1 = d1 / np.linalg.norm(d1, axis=-1, keepdims=True)
    d2 = d2 / np.linalg.norm(d2, axis=-1, keepdims=True)
    w = c1 - c2
    b = np.sum(d1 * d2, -1)
    d = np.sum(d1 * w, -1)
    e = np.sum(d2 * w, -1)
    den = 1.0 - b * b
    # angle between the lines, so antiparallel rays count as parallel too
    angle = np.arctan2(np.linalg.norm(np.cross(d1, d2), axis=-1), np.abs(b))
    valid = angle >= min_angle
    safe = np.where(valid, den, 1.0)
    s = (b * e - d) / safe
    t = (e - b * d) / safe
    mid = 0.5 * ((c1 + s[..., None] * d1) + (c2 + t[..., None] * d2))
    return mid, valid


def _track_lookup(graph, tracks):
    """Per image, an array mapping keypoint index to track id (-1 when untracked)."""
    table = {im: np.full(len(kp), -1, dtype=int) for im, kp in graph.keypoints.items()}
    tof = tracks.track_of
    for im in np.unique(tracks.image):
        sel = tracks.image == im
        table[int(im)][tracks.keypoint[sel]] = tof[sel]
    return table


def triangulate_pairs(rotations, centers, graph, tracks, min_angle=1e-4):
    """Midpoint triangulation of every active correspondence inside a track."""
    table = _track_lookup(graph, tracks)
    out = {k: [] for k in ("track", "ia", "ka", "ib", "kb", "xyz")}
    skipped = 0
    for p in graph.pairs:
        if p.i not in rotations or p.j not in rotations:
            continue
        ta = table[p.i][p.kp1]
        tb = table[p.j][p.kp2]
        sel = p.active & (ta >= 0) & (ta == tb)
        if not sel.any():
            continue
        x1 = homogeneous(p.points1[sel])
        x2 = homogeneous(p.points2[sel])
        d1 = x1 @ rotations[p.i]
        d2 = x2 @ rotations[p.j]
        n = len(x1)
        mid, ok = ray_midpoints(np.broadcast_to(centers[p.i], (n, 3)), d1,
                                np.broadcast_to(centers[p.j], (n, 3)), d2, min_angle)
        skipped += int(np.count_nonzero(~ok))
        out["track"].append(ta[sel][ok])
        out["ia"].append(np.full(int(ok.sum()), p.i))
        out["ka"].append(p.kp1[sel][ok])
        out["ib"].append(np.full(int(ok.sum()), p.j))
        out["kb"].append(p.kp2[sel][ok])
        out["xyz"].append(mid[ok])
    cat = {k: (np.concatenate(v) if v else np.zeros((0, 3) if k == "xyz" else 0, dtype=float if k == "xyz" else int))
           for k, v in out.items()}
    return RawPoints(cat["track"], cat["ia"], cat["ka"], cat["ib"], cat["kb"], cat["xyz"], skipped)


def merge_and_filter_points(raw, rotations, centers, graph, tracks, max_reproj_error=4.0,
                            min_track_inliers=3, min_angle_deg=1.5, iterations=3):
    """Merge pairwise triangulations per track and filter by reprojection and angle.

    Reprojection errors are measured in pixels using each camera's focal
    length from ``graph.intrinsics`` (1.0 when absent). Each of the first
    ``iterations - 1`` passes removes, per track, the single worst
    observation above ``max_reproj_error`` and re-averages the point from
    the pairwise triangulations that avoid every removed observation. One
    bad observation contaminates every pair it takes part in, so dropping
    all observations above the threshold at once would also discard the
    good ones it dragged along.
    """
    n_tracks = len(tracks)
    tof = tracks.track_of
    img = tracks.image
    kp = tracks.keypoint
    obs = np.stack([graph.keypoints[int(i)][k] for i, k in zip(img, kp)]) if len(img) else np.zeros((0, 2))
    intr = graph.intrinsics or {}
    focal = np.array([intr[graph.camera_of(int(i))].focal if intr else 1.0 for i in img])
    rot = np.stack([rotations[int(i)] for i in img]) if len(img) else np.zeros((0, 3, 3))
    cen = np.stack([centers[int(i)] for i in img]) if len(img) else np.zeros((0, 3))

    kmax = max((len(v) for v in graph.keypoints.values()), default=0) + 1
    member_key = img.astype(np.int64) * kmax + kp
    order = np.argsort(member_key, kind="stable")

    def member(i, k):
        key = np.asarray(i, np.int64) * kmax + k
        return order[np.searchsorted(member_key[order], key)] if len(key) else np.zeros(0, int)

    raw_a = member(raw.image_a, raw.kp_a)
    raw_b = member(raw.image_b, raw.kp_b)
    kept = np.ones(len(img), dtype=bool)
    xyz, cnt = raw.merged(n_tracks)
    for it in range(max(iterations, 1)):
        pts = xyz[tof]
        cam = np.einsum("nij,nj->ni", rot, pts - cen)
        z = cam[:, 2]
        with np.errstate(invalid="ignore", divide="ignore"):
            proj = cam[:, :2] / z[:, None]
        err = np.linalg.norm(proj - obs, axis=1) * focal
        err[~(z > 0) | ~np.isfinite(err)] = np.inf
        if it + 1 >= iterations:
            break
        over = np.where(kept & (err > max_reproj_error), err, -1.0)
        if not (over >= 0).any():
            break
        # worst offender of each track (ties broken by member order)
        worst = np.full(n_tracks, -1.0)
        np.maximum.at(worst, tof, over)
        drop = (over >= 0) & (over == worst[tof])
        first = np.full(n_tracks, len(img))
        np.minimum.at(first, tof[drop], np.flatnonzero(drop))
        drop &= np.arange(len(img)) == first[tof]
        kept &= ~drop
        new_xyz, new_cnt = raw.merged(n_tracks, kept[raw_a] & kept[raw_b])
        xyz = np.where((new_cnt > 0)[:, None], new_xyz, xyz)
    inlier = kept & (err <= max_reproj_error)

    points = []
    rays = pts - cen
    rays /= np.maximum(np.linalg.norm(rays, axis=1, keepdims=True), 1e-300)
    min_angle = np.radians(min_angle_deg)
    for t in range(n_tracks):
        if cnt[t] == 0:
            continue
        s, e = tracks.offsets[t], tracks.offsets[t + 1]
        good = np.flatnonzero(inlier[s:e]) + s
        if len(good) < min_track_inliers:
            continue
        r = rays[good]
        cosines = np.clip(r @ r.T, -1.0, 1.0)
        max_angle = float(np.arccos(cosines.min()))
        if max_angle < min_angle:
            continue
        points.append(SparsePoint(
            xyz[t].copy(), int(t),
            [(int(img[g]), int(kp[g]), float(err[g])) for g in good],
            max_angle,
        ))
    return points
