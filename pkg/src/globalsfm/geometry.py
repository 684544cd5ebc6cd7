"""Rotation parameterizations and two-view geometry.

Conventions used throughout the package:

* ``R`` is a world-to-camera rotation and ``o`` the camera center, so a world
  point maps to camera coordinates as ``X_cam = R @ (X - o)``.
* The relative motion of pair ``(i, j)`` is ``X_j = R_ij @ X_i + t_ij`` with
  ``R_ij = R_j R_i^T`` and ``t_ij = R_j (o_i - o_j)``.
* Matrices are flattened row-major, so ``flatten(x2 x1^T) . flatten(E)`` is
  exactly ``x2^T E x1``.

Functions accept a single item or a leading batch dimension where noted.
"""

from typing import NamedTuple

import numpy as np

from .errors import (
    CheiralityFailure,
    DegenerateParameterization,
    DegenerateTranslation,
    HomographyDecompositionFailure,
)

GEODESIC_CLAMP = 1e-7
_GS_EPS = 1e-12


def skew(v):
    """Cross-product matrix, batched over leading dimensions."""
    v = np.asarray(v, dtype=float)
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack(
        [np.stack([z, -w, y], -1), np.stack([w, z, -x], -1), np.stack([-y, x, z], -1)], -2
    )


def homogeneous(x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] == 3:
        return x
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def rot6d_to_matrix(a):
    """Map 6D parameters (two stacked 3-vectors) to a rotation by Gram-Schmidt.

    The first three entries give the first column direction, the last three
    are orthogonalized against it for the second column. Accepts ``(..., 6)``.
    """
    a = np.asarray(a, dtype=float)
    a1, a2 = a[..., :3], a[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < _GS_EPS):
        raise DegenerateParameterization("first 6D vector has (near) zero norm")
    b1 = a1 / n1
    v = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(nv < _GS_EPS):
        raise DegenerateParameterization("second 6D vector is parallel to the first")
    b2 = v / nv
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rot6d_backward(a, grad_r):
    """Pull a gradient w.r.t. the rotation matrix back to the 6D parameters."""
    a = np.asarray(a, dtype=float)
    a1, a2 = a[..., :3], a[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    b1 = a1 / n1
    d12 = np.sum(b1 * a2, axis=-1, keepdims=True)
    v = a2 - d12 * b1
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    b2 = v / nv
    g1, g2, g3 = grad_r[..., :, 0], grad_r[..., :, 1], grad_r[..., :, 2]
    # b3 = b1 x b2
    gb1 = g1 + np.cross(b2, g3)
    gb2 = g2 + np.cross(g3, b1)
    gv = (gb2 - b2 * np.sum(b2 * gb2, axis=-1, keepdims=True)) / nv
    b1gv = np.sum(b1 * gv, axis=-1, keepdims=True)
    ga2 = gv - b1 * b1gv
    gb1 = gb1 - d12 * gv - a2 * b1gv
    ga1 = (gb1 - b1 * np.sum(b1 * gb1, axis=-1, keepdims=True)) / n1
    return np.concatenate([ga1, ga2], axis=-1)


def matrix_to_rot6d(r):
    r = np.asarray(r, dtype=float)
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1)


def project_to_rotation(m):
    """Nearest rotation in Frobenius norm, with determinant forced to +1."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    d = np.where(d == 0, 1.0, d)
    fix = np.ones(u.shape[:-2] + (3,))
    fix[..., 2] = d
    return (u * fix[..., None, :]) @ vt


def geodesic_distance(r, r2):
    """Angle of ``r^T r2`` in radians; the arccos argument is clamped."""
    r = np.asarray(r, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    tr = np.einsum("...ij,...ij->...", r, r2)
    x = np.clip((tr - 1.0) / 2.0, -1.0 + GEODESIC_CLAMP, 1.0 - GEODESIC_CLAMP)
    return np.arccos(x)


def geodesic_distance_grad(r, r2):
    """Distance and its gradients w.r.t. both arguments (zero where clamped)."""
    tr = np.einsum("...ij,...ij->...", r, r2)
    x = (tr - 1.0) / 2.0
    lo, hi = -1.0 + GEODESIC_CLAMP, 1.0 - GEODESIC_CLAMP
    inside = (x > lo) & (x < hi)
    xc = np.clip(x, lo, hi)
    d = np.arccos(xc)
    dd_dtr = np.where(inside, -0.5 / np.sqrt(1.0 - xc * xc), 0.0)
    return d, dd_dtr[..., None, None] * r2, dd_dtr[..., None, None] * r


def angle_between(u, v):
    """Unsigned angle between vectors (radians), numerically stable."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    c = np.linalg.norm(np.cross(u, v), axis=-1)
    d = np.sum(u * v, axis=-1)
    return np.arctan2(c, d)


def relative_pose(r_i, o_i, r_j, o_j):
    """Relative rotation and (non-normalized) translation of pair ``(i, j)``."""
    r_ij = r_j @ np.swapaxes(r_i, -1, -2)
    t_ij = np.einsum("...ij,...j->...i", r_j, o_i - o_j)
    return r_ij, t_ij


def essential_from_relative(r_rel, t_rel):
    """``[t]_x R`` for a unit translation; raises on zero translation."""
    t = np.asarray(t_rel, dtype=float)
    n = np.linalg.norm(t, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise DegenerateTranslation("zero translation has no essential matrix")
    return skew(t / n) @ np.asarray(r_rel, dtype=float)


def epipolar_error(e, x1, x2):
    """Absolute algebraic error ``|x2^T E x1|`` on calibrated coordinates."""
    x1 = homogeneous(x1)
    x2 = homogeneous(x2)
    return np.abs(np.einsum("...i,...ij,...j->...", x2, e, x1))


def project_essential(e):
    u, _, vt = np.linalg.svd(np.asarray(e, dtype=float))
    return u @ np.diag([1.0, 1.0, 0.0]) @ vt


def essential_candidates(e):
    """The four ``(R, t)`` factorizations of an essential matrix, fixed order."""
    u, _, vt = np.linalg.svd(np.asarray(e, dtype=float))
    if np.linalg.det(u) < 0:
        u[:, 2] *= -1
    if np.linalg.det(vt) < 0:
        vt[2, :] *= -1
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1 = u @ w @ vt
    r2 = u @ w.T @ vt
    t = u[:, 2]
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def triangulate_depths(r, t, x1, x2, min_sin=1e-6):
    """Depths of each correspondence in both cameras under motion ``(r, t)``.

    Solves ``d1 * R x1 - d2 * x2 = -t`` in the least-squares sense. Returns
    ``(d1, d2, valid)`` where ``valid`` is false for near-parallel rays.
    """
    x1 = homogeneous(x1)
    x2 = homogeneous(x2)
    a = x1 @ np.asarray(r).T
    b = x2
    aa = np.sum(a * a, -1)
    bb = np.sum(b * b, -1)
    ab = np.sum(a * b, -1)
    at = a @ t
    bt = b @ t
    det = aa * bb - ab * ab
    valid = det > (min_sin**2) * aa * bb
    safe = np.where(valid, det, 1.0)
    d1 = (-at * bb + ab * bt) / safe
    d2 = (aa * bt - ab * at) / safe
    return d1 * x1[:, 2], d2 * x2[:, 2], valid


def cheirality_count(r, t, x1, x2):
    d1, d2, valid = triangulate_depths(r, t, x1, x2)
    return int(np.count_nonzero(valid & (d1 > 0) & (d2 > 0)))


def decompose_essential(e, x1, x2):
    """Pick the factorization of ``e`` that puts most points in front of both cameras.

    Ties go to the lowest candidate index. Returns ``(R, t)`` with unit ``t``.
    """
    cands = essential_candidates(project_essential(e))
    counts = [cheirality_count(r, t, x1, x2) for r, t in cands]
    best = int(np.argmax(counts))
    if counts[best] == 0:
        raise CheiralityFailure("no essential decomposition has points in front of both cameras")
    r, t = cands[best]
    return r, t / np.linalg.norm(t)


class HomographyPose(NamedTuple):
    r: np.ndarray
    t: np.ndarray
    normal: np.ndarray
    pure_rotation: bool


def homography_candidates(h, pure_tol=1e-9):
    """Closed-form SVD decomposition of a calibrated homography.

    ``h`` is rescaled so its middle singular value is one; it is assumed to
    be sign-normalized already. Returns a list of ``HomographyPose`` with the
    plane normal in the first camera frame and ``t`` scaled by the inverse
    plane distance, i.e. ``h = R + t n^T``.
    """
    h = np.asarray(h, dtype=float)
    _, s, vt = np.linalg.svd(h)
    h = h / s[1]
    s = s / s[1]
    if s[0] - s[2] < pure_tol:
        r = project_to_rotation(h)
        return [HomographyPose(r, np.zeros(3), np.array([0.0, 0.0, 1.0]), True)]
    v = vt.T
    if np.linalg.det(v) < 0:
        v = -v
    v1, v2, v3 = v[:, 0], v[:, 1], v[:, 2]
    s1, s3 = s[0] ** 2, s[2] ** 2
    den = np.sqrt(s1 - s3)
    p = np.sqrt(max(1.0 - s3, 0.0))
    q = np.sqrt(max(s1 - 1.0, 0.0))
    out = []
    for u in ((p * v1 + q * v3) / den, (p * v1 - q * v3) / den):
        umat = np.column_stack([v2, u, np.cross(v2, u)])
        hv2, hu = h @ v2, h @ u
        wmat = np.column_stack([hv2, hu, np.cross(hv2, hu)])
        r = wmat @ umat.T
        n = np.cross(v2, u)
        t = (h - r) @ n
        out.append((r, t, n))
    (r1, t1, n1), (r2, t2, n2) = out
    return [
        HomographyPose(r1, t1, n1, False),
        HomographyPose(r2, t2, n2, False),
        HomographyPose(r1, -t1, -n1, False),
        HomographyPose(r2, -t2, -n2, False),
    ]


def decompose_homography(h, x1, x2, pure_tol=1e-9):
    """Relative pose from a calibrated homography and its correspondences.

    Candidates whose plane normal faces away from the first camera are
    discarded; the rest are ranked by cheirality count (lowest index wins
    ties). Returns a ``HomographyPose``; ``t`` may be (near) zero.
    """
    h = np.asarray(h, dtype=float)
    x1 = homogeneous(x1)
    x2 = homogeneous(x2)
    if np.sum(np.sign(np.einsum("ni,ij,nj->n", x2, h, x1))) < 0:
        h = -h
    cands = homography_candidates(h, pure_tol)
    if cands[0].pure_rotation:
        return cands[0]
    best, best_count = None, -1
    for c in cands:
        if c.normal[2] <= 0:
            continue
        if np.linalg.norm(c.t) < 1e-12:
            count = len(x1)
        else:
            count = cheirality_count(c.r, c.t, x1, x2)
        if count > best_count:
            best, best_count = c, count
    if best is None:
        raise HomographyDecompositionFailure("no homography decomposition faces the first camera")
    if np.linalg.norm(best.t) < 1e-8:
        return best._replace(pure_rotation=True)
    return best


def quat_to_matrix(q):
    """Rotation matrices from ``(w, x, y, z)`` quaternions."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def matrix_to_quat(r):
    """``(w, x, y, z)`` with ``w >= 0`` for a single rotation matrix."""
    r = np.asarray(r, dtype=float)
    k = np.array(
        [
            [r[0, 0] - r[1, 1] - r[2, 2], 0, 0, 0],
            [r[1, 0] + r[0, 1], r[1, 1] - r[0, 0] - r[2, 2], 0, 0],
            [r[2, 0] + r[0, 2], r[2, 1] + r[1, 2], r[2, 2] - r[0, 0] - r[1, 1], 0],
            [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1], r[0, 0] + r[1, 1] + r[2, 2]],
        ]
    ) / 3.0
    vals, vecs = np.linalg.eigh(k)
    q = vecs[[3, 0, 1, 2], np.argmax(vals)]
    if q[0] < 0:
        q = -q
    return q
