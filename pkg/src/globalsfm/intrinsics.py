"""Per-camera self-calibration: division-model distortion and focal length.

Both quantities are found by brute-force search over candidates, each of
which is scored independently; the reduction is an index-ordered argmin or
argmax so results do not depend on evaluation order.

The distortion coefficient acts on coordinates centered at the principal
point and divided by ``max(width, height) / 2``.
"""

import warnings
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import (
    AlreadyCalibrated,
    DegenerateConfiguration,
    DistortionSingularity,
    HomographyDominated,
    InsufficientMatches,
    NoReadyPairs,
    OutsideInvertibleRange,
)
from .ingest import (
    TwoViewModel,
    fit_fundamental_batch,
    fit_homography_batch,
    pad_pairs,
)


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float
    alpha: float
    width: int
    height: int
    cx: float = None
    cy: float = None

    def __post_init__(self):
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2.0)

    @property
    def scale(self):
        return max(self.width, self.height) / 2.0

    @property
    def center(self):
        return np.array([self.cx, self.cy])

    def K(self):
        return np.array([[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]])

    def with_(self, **kw):
        return replace(self, **kw)


def focal_from_fov(fov_deg, width, height):
    return (max(width, height) / 2.0) / np.tan(np.radians(fov_deg) / 2.0)


def fov_from_focal(focal, width, height):
    return float(np.degrees(2.0 * np.arctan((max(width, height) / 2.0) / focal)))


@dataclass(frozen=True)
class SearchSchedule:
    lo: float = -0.9
    hi: float = 0.9
    candidates_per_level: int = 33
    levels: int = 4

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")
        if self.candidates_per_level < 3 or self.levels < 1:
            raise ValueError("need >= 3 candidates per level and >= 1 level")


# ---------------------------------------------------------------------------
# division model


def _undistort_normalized(p, alpha):
    r2 = np.sum(p * p, axis=-1, keepdims=True)
    denom = 1.0 + alpha * r2
    if np.any(denom <= 1e-9):
        raise DistortionSingularity(f"1 + alpha r^2 <= 0 for alpha={alpha}")
    return p / denom


def _distort_normalized(p, alpha):
    r2 = np.sum(p * p, axis=-1, keepdims=True)
    disc = 1.0 - 4.0 * alpha * r2
    if np.any(disc < 0):
        raise OutsideInvertibleRange(f"point outside the invertible range of alpha={alpha}")
    return p * (2.0 / (1.0 + np.sqrt(disc)))


def undistort_points(pts, cam):
    """Pixel coordinates after removing division-model distortion."""
    pts = np.asarray(pts, dtype=float)
    if cam.alpha == 0.0:
        return pts.copy()
    c = cam.center
    return _undistort_normalized((pts - c) / cam.scale, cam.alpha) * cam.scale + c


def distort_points(pts, cam):
    """Closed-form inverse of :func:`undistort_points`."""
    pts = np.asarray(pts, dtype=float)
    if cam.alpha == 0.0:
        return pts.copy()
    c = cam.center
    return _distort_normalized((pts - c) / cam.scale, cam.alpha) * cam.scale + c


def normalize_points(pts, cam):
    """Undistorted, normalized camera coordinates ``K^-1 x`` (2-vectors)."""
    return (undistort_points(pts, cam) - cam.center) / cam.focal


# ---------------------------------------------------------------------------
# readiness and scheduling


def _ready_pairs(graph, camera_id, known, kinds=("F",)):
    out = []
    for p in graph.pairs:
        if p.model.kind not in kinds:
            continue
        ci, cj = graph.camera_of(p.i), graph.camera_of(p.j)
        if ci == camera_id and cj == camera_id:
            out.append(p)
        elif ci == camera_id and cj in known or cj == camera_id and ci in known:
            out.append(p)
    return out


def schedule_camera_order(graph, cameras=None, known=()):
    """Greedy processing order: most ready pairs first, lower id on ties."""
    remaining = sorted(graph.cameras if cameras is None else cameras)
    done = set(known)
    order = []
    while remaining:
        counts = [len(_ready_pairs(graph, c, done)) for c in remaining]
        best = int(np.argmax(counts))
        if counts[best] == 0:
            warnings.warn(f"cameras {remaining} have no ready pairs", stacklevel=2)
            order.extend(remaining)
            break
        c = remaining.pop(best)
        order.append(c)
        done.add(c)
    return order


# ---------------------------------------------------------------------------
# distortion


def _pair_sides(graph, pairs, camera_id):
    """Which side of each pair belongs to ``camera_id``."""
    own1 = np.array([graph.camera_of(p.i) == camera_id for p in pairs])
    own2 = np.array([graph.camera_of(p.j) == camera_id for p in pairs])
    return own1, own2


def distortion_score(alpha, x1, x2, mask, own1, own2, other1, other2):
    """Mean over pairs of the mean algebraic error of a refit F at ``alpha``.

    Inputs are padded normalized distorted coordinates; ``other*`` hold the
    already-known coefficient of the side not owned by the camera.
    """
    a1 = np.where(own1, alpha, other1)[:, None, None]
    a2 = np.where(own2, alpha, other2)[:, None, None]
    try:
        u1 = _undistort_batch(x1, a1, mask)
        u2 = _undistort_batch(x2, a2, mask)
        _, res = fit_fundamental_batch(u1, u2, mask, return_residuals=True)
    except (DistortionSingularity, DegenerateConfiguration, InsufficientMatches):
        return np.inf
    return float(np.mean(res))


def _undistort_batch(p, alpha, mask):
    r2 = np.sum(p * p, axis=-1, keepdims=True)
    denom = 1.0 + alpha * r2
    if np.any((denom <= 1e-9) & mask[..., None]):
        raise DistortionSingularity("candidate alpha hits the singular radius")
    return p / np.where(denom > 1e-9, denom, 1.0)


def _candidate_grid(lo, hi, n):
    return np.linspace(lo, hi, n)


def estimate_distortion(graph, camera_id, known_alphas, schedule=SearchSchedule(),
                        max_pairs=256, max_points=256, mapper=map, return_trace=False):
    """Hierarchical interval search for one camera's distortion coefficient.

    Ready pairs are fundamental-matrix pairs inside the camera, or pairs to a
    camera whose coefficient is already in ``known_alphas``. At most
    ``max_pairs`` ready pairs (most inliers first) and ``max_points`` evenly
    strided matches per pair enter the score.
    """
    ready = _ready_pairs(graph, camera_id, set(known_alphas))
    if not ready:
        raise NoReadyPairs(f"camera {camera_id} has no ready pairs")
    ready = sorted(ready, key=lambda p: (-p.n_active, p.index))[:max_pairs]
    own1, own2 = _pair_sides(graph, ready, camera_id)
    sets = []
    other1 = np.zeros(len(ready))
    other2 = np.zeros(len(ready))
    for k, p in enumerate(ready):
        im1, im2 = graph.image(p.i), graph.image(p.j)
        s1, s2 = max(im1.width, im1.height) / 2.0, max(im2.width, im2.height) / 2.0
        a, b = p.active_points()
        sets.append(((a - [im1.width / 2.0, im1.height / 2.0]) / s1,
                     (b - [im2.width / 2.0, im2.height / 2.0]) / s2))
        if not own1[k]:
            other1[k] = known_alphas[im1.camera_id]
        if not own2[k]:
            other2[k] = known_alphas[im2.camera_id]
    x1, x2, mask = pad_pairs(sets, max_points)

    def score(alpha):
        return distortion_score(alpha, x1, x2, mask, own1, own2, other1, other2)

    lo, hi, n = schedule.lo, schedule.hi, schedule.candidates_per_level
    trace = []
    for _ in range(schedule.levels):
        grid = _candidate_grid(lo, hi, n)
        scores = np.array(list(mapper(score, grid)))
        k = int(np.argmin(scores))
        trace.append((grid, scores))
        best = grid[k]
        lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, n - 1)]
    return (float(best), trace) if return_trace else float(best)


# ---------------------------------------------------------------------------
# focal length


class FocalScore(NamedTuple):
    score: float
    skipped: int


def _validity_terms(fi, fj, funds, ci, cj, tau):
    ki = np.zeros((len(funds), 3, 3))
    kj = np.zeros((len(funds), 3, 3))
    for k, f, c in ((ki, fi, ci), (kj, fj, cj)):
        k[:, 0, 0] = f
        k[:, 1, 1] = f
        k[:, 0, 2] = c[:, 0]
        k[:, 1, 2] = c[:, 1]
        k[:, 2, 2] = 1.0
    e = np.swapaxes(kj, 1, 2) @ funds @ ki
    s = np.linalg.svd(e, compute_uv=False)
    ok = s[:, 1] >= 1e-12 * s[:, 0]
    ratio = s[:, 0] / np.where(ok, s[:, 1], 1.0)
    terms = np.where(ok, np.exp((1.0 - ratio) / tau), 0.0)
    return terms, int(np.count_nonzero(~ok))


def focal_validity(f, funds, cams, tau=0.01, free=None):
    """Singular-value vote for candidate focal ``f`` over fundamental matrices.

    ``cams`` holds the ``(intrinsics_i, intrinsics_j)`` of each pair; sides
    flagged in ``free`` (default: both) take the candidate focal, the others
    keep their own. Pairs whose second singular value vanishes are skipped
    and counted.
    """
    funds = np.asarray(funds, dtype=float).reshape(-1, 3, 3)
    if free is None:
        free = [(True, True)] * len(funds)
    fi = np.array([f if fr[0] else c[0].focal for c, fr in zip(cams, free)], dtype=float)
    fj = np.array([f if fr[1] else c[1].focal for c, fr in zip(cams, free)], dtype=float)
    ci = np.array([c[0].center for c in cams])
    cj = np.array([c[1].center for c in cams])
    terms, skipped = _validity_terms(fi, fj, funds, ci, cj, tau)
    return FocalScore(float(terms.sum()), skipped)


class FocalEstimate(NamedTuple):
    focal: float
    fov_deg: float
    score: float
    low_confidence: bool
    ratio_to_runner_up: float
    scores: np.ndarray


def default_fov_grid():
    return np.arange(10.0, 170.0 + 1e-9, 0.5)


def estimate_focal(graph, camera_id, known_focals, fov_grid=None, tau=0.01, mapper=map):
    """Single-level grid search maximizing :func:`focal_validity`.

    ``graph`` must carry fundamental matrices re-estimated on undistorted
    pixel keypoints. ``known_focals`` maps camera id to a known focal.
    """
    fov_grid = default_fov_grid() if fov_grid is None else np.asarray(fov_grid, dtype=float)
    ready = _ready_pairs(graph, camera_id, set(known_focals), kinds=("F", "H"))
    if not ready:
        raise NoReadyPairs(f"camera {camera_id} has no ready pairs")
    ready = [p for p in ready if p.model.kind == "F"]
    if not ready:
        raise HomographyDominated(f"camera {camera_id} only has homography pairs")
    own1, own2 = _pair_sides(graph, ready, camera_id)
    funds = np.array([p.model.m for p in ready])
    im1 = [graph.image(p.i) for p in ready]
    im2 = [graph.image(p.j) for p in ready]
    ci = np.array([[im.width / 2.0, im.height / 2.0] for im in im1])
    cj = np.array([[im.width / 2.0, im.height / 2.0] for im in im2])
    kf1 = np.array([0.0 if o else known_focals[im.camera_id] for o, im in zip(own1, im1)])
    kf2 = np.array([0.0 if o else known_focals[im.camera_id] for o, im in zip(own2, im2)])
    ref = graph.image(ready[0].i if own1[0] else ready[0].j)

    def score(fov):
        f = focal_from_fov(fov, ref.width, ref.height)
        terms, _ = _validity_terms(np.where(own1, f, kf1), np.where(own2, f, kf2), funds, ci, cj, tau)
        return terms.sum()

    scores = np.array(list(mapper(score, fov_grid)))
    k = int(np.argmax(scores))
    others = np.delete(scores, k)
    runner = others.max() if len(others) else 0.0
    ratio = float(scores[k] / runner) if runner > 0 else np.inf
    at_edge = k == 0 or k == len(fov_grid) - 1
    fov = float(fov_grid[k])
    return FocalEstimate(
        focal_from_fov(fov, ref.width, ref.height), fov, float(scores[k]),
        bool(at_edge or ratio < 1.05), ratio, scores,
    )


# ---------------------------------------------------------------------------
# graph transforms


def refit_models(graph, alphas):
    """Refit every pair's two-view model on undistorted pixel keypoints.

    Keypoints in the returned graph stay as they were (distorted pixels);
    only the models change. Pairs whose model cannot be refit are dropped
    and their indices returned alongside the new graph.
    """
    undist = {}
    for im in graph.images:
        cam = CameraIntrinsics(1.0, alphas[im.camera_id], im.width, im.height)
        undist[im.id] = undistort_points(graph.keypoints[im.id], cam)
    pairs, dropped = [], []
    for p in graph.pairs:
        x1, x2 = undist[p.i][p.kp1[p.active]], undist[p.j][p.kp2[p.active]]
        fit = fit_fundamental_batch if p.model.kind == "F" else fit_homography_batch
        try:
            m = fit(x1[None], x2[None], np.ones((1, len(x1)), dtype=bool))[0]
        except (DegenerateConfiguration, InsufficientMatches):
            dropped.append(p.index)
            continue
        pairs.append(replace(p, model=TwoViewModel(p.model.kind, m, p.model.inlier_count)))
    return replace(graph, pairs=tuple(pairs)), dropped


def calibrate_graph(graph, intrinsics):
    """Map keypoints to normalized camera coordinates and models to calibrated form.

    ``graph`` holds distorted pixel keypoints and models estimated on
    undistorted pixel keypoints (see :func:`refit_models`); ``intrinsics`` maps camera id to
    :class:`CameraIntrinsics`. F becomes ``E = Kj^T F Ki`` and H becomes
    ``Kj^-1 H Ki``, both renormalized to unit Frobenius norm.
    """
    if graph.calibrated:
        raise AlreadyCalibrated("graph is already calibrated")
    keypoints = {
        k: normalize_points(v, intrinsics[graph.camera_of(k)]) for k, v in graph.keypoints.items()
    }
    pairs = []
    for p in graph.pairs:
        ki = intrinsics[graph.camera_of(p.i)].K()
        kj = intrinsics[graph.camera_of(p.j)].K()
        if p.model.kind == "F":
            m = kj.T @ p.model.m @ ki
        else:
            m = np.linalg.solve(kj, p.model.m @ ki)
        m = m / np.linalg.norm(m)
        pairs.append(replace(p, points1=keypoints[p.i][p.kp1], points2=keypoints[p.j][p.kp2],
                             model=TwoViewModel(p.model.kind, m, p.model.inlier_count)))
    return replace(graph, pairs=tuple(pairs), keypoints=keypoints, calibrated=True,
                   intrinsics=dict(intrinsics))
