"""Relative translation re-estimation and global camera centers.

With rotations fixed, each pair's epipolar constraint is linear in the unit
translation: ``x2^T [t]x R x1 = t . ((R x1) x x2)``. A sphere search over
``t`` therefore only needs the per-point vectors ``c = (R x1) x x2``.
Camera centers are then fitted to the resulting unit directions with an L1
loss from several random starts.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import homogeneous, triangulate_depths
from .optim import OptimConfig, run_adam
from .rng import SplitMix64

NORM_GUARD = 1e-9


@dataclass
class RelativeDirectionSet:
    """Unit world-frame directions ``o_j - o_i`` per pair."""

    i: np.ndarray
    j: np.ndarray
    d: np.ndarray
    pair_index: np.ndarray
    score: np.ndarray = None
    skipped: list = None

    def __len__(self):
        return len(self.i)

    @classmethod
    def from_centers(cls, pairs, centers):
        i = np.array([a for a, _ in pairs], dtype=int)
        j = np.array([b for _, b in pairs], dtype=int)
        d = np.stack([centers[b] - centers[a] for a, b in pairs])
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return cls(i, j, d, np.arange(len(pairs)))


def fibonacci_sphere(n):
    """``n`` near-uniform unit vectors (golden-angle spiral)."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], 1)


def fibonacci_cap(n, radius):
    """``n`` near-uniform unit vectors within ``radius`` radians of +z."""
    k = np.arange(n) + 0.5
    z = 1.0 - (1.0 - np.cos(radius)) * k / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], 1)


def _frame_to(v):
    """Rotation whose third column is the unit vector ``v``."""
    a = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(a, v)
    e1 /= np.linalg.norm(e1)
    return np.column_stack([e1, np.cross(v, e1), v])


def _polish(c, t, score, iterations):
    """Reweighted smallest-eigenvector steps on ``mean |t . c|``, kept only while the score drops."""
    for _ in range(iterations):
        w = 1.0 / np.maximum(np.abs(c @ t), 1e-12)
        _, vecs = np.linalg.eigh((c * w[:, None]).T @ c)
        cand = vecs[:, 0] if vecs[:, 0] @ t >= 0 else -vecs[:, 0]
        cand_score = float(np.abs(c @ cand).mean())
        if not cand_score < score:
            break
        t, score = cand, cand_score
    return t, score


def search_direction(c, n_samples=4096, refine_levels=2, refine_samples=1024, coarse_points=128,
                     polish_iterations=10):
    """Unit ``t`` minimizing ``mean |t . c_m|`` (sign undetermined).

    The full-sphere pass scores an evenly thinned subset of at most
    ``coarse_points`` vectors; each refinement level re-samples a cap of
    twice the previous spacing around the incumbent using all of ``c``.
    The sampled score is anisotropic, so the best sample can sit more than
    one spacing from the minimum; a few reweighted eigenvector steps finish
    the search. Returns ``(t, score, resolution)`` where ``resolution`` is
    the angular spacing of the final candidate set.
    """
    cand = fibonacci_sphere(n_samples)
    cand = cand[cand[:, 2] >= 0]  # the score is even in t
    spacing = np.sqrt(4.0 * np.pi / n_samples)
    sub = c
    if len(c) > coarse_points:
        sub = c[np.linspace(0, len(c) - 1, coarse_points).round().astype(int)]
    k = int(np.argmin(np.abs(sub @ cand.T).sum(0)))
    best = cand[k]
    best_score = float(np.abs(c @ best).mean())
    for _ in range(refine_levels):
        radius = 2.0 * spacing
        local = fibonacci_cap(refine_samples, radius) @ _frame_to(best).T
        scores = np.abs(c @ local.T).mean(0)
        k = int(np.argmin(scores))
        if scores[k] <= best_score:
            best, best_score = local[k], float(scores[k])
        spacing = np.sqrt(2.0 * np.pi * (1.0 - np.cos(radius)) / refine_samples)
    best, best_score = _polish(c, best, best_score, polish_iterations)
    return best, best_score, spacing


def pair_direction(r_ij, x1, x2, sphere_samples=4096, refine_levels=2, refine_samples=1024):
    """Unit translation ``t_ij`` (camera ``j`` frame) of one pair under a known rotation.

    The sign is the one placing more triangulated points in front of both
    cameras. Returns ``(t, score, resolution)``, or ``None`` when every
    ``c`` vector vanishes (no baseline is observable).
    """
    x1 = homogeneous(x1)
    x2 = homogeneous(x2)
    c = np.cross(x1 @ r_ij.T, x2)
    if np.all(np.linalg.norm(c, axis=1) < 1e-9):
        return None
    t, score, res = search_direction(c, sphere_samples, refine_levels, refine_samples)
    d1, d2, ok = triangulate_depths(r_ij, t, x1, x2)
    pos = np.count_nonzero(ok & (d1 > 0) & (d2 > 0))
    neg = np.count_nonzero(ok & (d1 < 0) & (d2 < 0))
    return (-t if neg > pos else t), score, res


def reestimate_relative_translations(graph, rotations, sphere_samples=4096, refine_levels=2,
                                     min_pair_inliers=16, max_points=256, exclude=(), mapper=map,
                                     refine_samples=1024):
    """Unit relative directions for every usable pair under fixed rotations.

    Pairs with fewer than ``min_pair_inliers`` active correspondences, pairs
    listed in ``exclude`` (pure-rotation homographies) and pairs whose
    vectors ``c`` all vanish are skipped and reported in ``skipped``.
    """
    exclude = set(exclude)
    jobs, skipped = [], []
    for p in graph.pairs:
        if p.i not in rotations or p.j not in rotations:
            continue
        if p.index in exclude:
            skipped.append((p.index, "pure rotation"))
            continue
        if p.n_active < min_pair_inliers:
            skipped.append((p.index, "too few correspondences"))
            continue
        x1, x2 = p.active_points()
        if len(x1) > max_points:
            sel = np.linspace(0, len(x1) - 1, max_points).round().astype(int)
            x1, x2 = x1[sel], x2[sel]
        jobs.append((p.index, p.i, p.j, homogeneous(x1), homogeneous(x2)))

    def solve(job):
        index, i, j, x1, x2 = job
        found = pair_direction(rotations[j] @ rotations[i].T, x1, x2, sphere_samples, refine_levels,
                               refine_samples)
        if found is None:
            return None
        t, score, _ = found
        return -rotations[j].T @ t, score

    out_i, out_j, out_d, out_k, out_s = [], [], [], [], []
    for job, res in zip(jobs, mapper(solve, jobs)):
        if res is None:
            skipped.append((job[0], "degenerate (pure rotation)"))
            continue
        out_k.append(job[0])
        out_i.append(job[1])
        out_j.append(job[2])
        out_d.append(res[0])
        out_s.append(res[1])
    return RelativeDirectionSet(
        np.array(out_i, dtype=int), np.array(out_j, dtype=int), np.array(out_d).reshape(-1, 3),
        np.array(out_k, dtype=int), np.array(out_s), skipped,
    )


class TranslationLoss:
    """Fused evaluator of the mean L1 direction residual over stacked centers."""

    def __init__(self, dirs, images):
        self.images = list(images)
        slot = {im: k for k, im in enumerate(self.images)}
        self.a = np.array([slot[i] for i in dirs.i], dtype=int)
        self.b = np.array([slot[j] for j in dirs.j], dtype=int)
        self.d = dirs.d
        self.n = len(self.images)
        self.dim = 3 * self.n

    def residuals(self, x):
        o = x.reshape(self.n, 3)
        v = o[self.b] - o[self.a]
        nv = np.maximum(np.linalg.norm(v, axis=1), NORM_GUARD)
        return v / nv[:, None] - self.d

    def pair_losses(self, x):
        return np.abs(self.residuals(x)).sum(1)

    def __call__(self, x):
        o = x.reshape(self.n, 3)
        v = o[self.b] - o[self.a]
        raw = np.linalg.norm(v, axis=1)
        nv = np.maximum(raw, NORM_GUARD)
        u = v / nv[:, None]
        r = u - self.d
        m = max(len(r), 1)
        gu = np.sign(r) / m
        gv = np.where(
            (raw > NORM_GUARD)[:, None],
            (gu - u * np.sum(u * gu, 1, keepdims=True)) / nv[:, None],
            gu / NORM_GUARD,
        )
        g = np.zeros((self.n, 3))
        np.add.at(g, self.b, gv)
        np.add.at(g, self.a, -gv)
        return float(np.abs(r).sum() / m), g.ravel()

    def image_losses(self, x):
        """Average loss of the pairs incident to each image (``inf`` if none)."""
        pl = self.pair_losses(x)
        tot = np.bincount(self.a, pl, self.n) + np.bincount(self.b, pl, self.n)
        cnt = np.bincount(self.a, minlength=self.n) + np.bincount(self.b, minlength=self.n)
        return np.where(cnt > 0, tot / np.maximum(cnt, 1), np.inf)


def normalize_centers(o):
    """Center at the origin and rescale to unit average norm."""
    o = o - o.mean(0)
    s = np.linalg.norm(o, axis=1).mean()
    return o / s if s > 0 else o


@dataclass
class TranslationResult:
    centers: dict
    loss: float
    run_losses: list
    trace: np.ndarray = None


DEFAULT_TRANSLATION_OPTIM = OptimConfig(iterations=3000, step_size=1e-2, min_step_size=1e-4)


def align_global_translations(dirs, images=None, n_inits=4, cfg=DEFAULT_TRANSLATION_OPTIM,
                              seed=0, mapper=map):
    """Camera centers from unit pair directions, merged over ``n_inits`` random starts."""
    if images is None:
        images = sorted(set(dirs.i.tolist()) | set(dirs.j.tolist()))
    ev = TranslationLoss(dirs, images)

    def run(k):
        x0 = SplitMix64(seed * 1_000_003 + k).normal(ev.dim)
        res = run_adam(ev, x0, cfg)
        return normalize_centers(res.x.reshape(ev.n, 3)), res.loss

    runs = list(mapper(run, range(n_inits)))
    per_image = np.stack([ev.image_losses(o.ravel()) for o, _ in runs])
    pick = np.argmin(per_image, axis=0)
    merged = np.stack([runs[k][0][n] for n, k in enumerate(pick)])
    final = run_adam(ev, merged.ravel(), cfg)
    o = normalize_centers(final.x.reshape(ev.n, 3))
    return TranslationResult({im: o[k] for k, im in enumerate(ev.images)}, final.loss,
                             [loss for _, loss in runs], final.trace)


def translation_loss(centers, dirs):
    images = sorted(centers)
    ev = TranslationLoss(dirs, images)
    return ev(np.concatenate([centers[i] for i in images]))[0]
