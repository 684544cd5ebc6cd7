"""Pose accuracy: similarity alignment, ATE and pairwise recall / AUC."""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import AlignmentDegenerate

DEFAULT_DELTAS = (1.0, 3.0, 5.0, 10.0)


def rotation_angle(r):
    """Rotation angle in radians, accurate near 0 and pi (no clamping)."""
    r = np.asarray(r, dtype=float)
    sin2 = np.stack([r[..., 2, 1] - r[..., 1, 2], r[..., 0, 2] - r[..., 2, 0], r[..., 1, 0] - r[..., 0, 1]], -1)
    cos = (np.trace(r, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arctan2(np.linalg.norm(sin2, axis=-1) / 2.0, cos)


def sim3_align(est, gt):
    """Similarity ``(s, R, t)`` minimizing ``sum ||s R est_k + t - gt_k||^2`` (Umeyama)."""
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if len(est) < 3 or len(est) != len(gt):
        raise AlignmentDegenerate("similarity alignment needs at least 3 matched cameras")
    me, mg = est.mean(0), gt.mean(0)
    de, dg = est - me, gt - mg
    sv = np.linalg.svd(de, compute_uv=False)
    if sv[0] == 0 or sv[1] < 1e-9 * sv[0]:
        raise AlignmentDegenerate("estimated cameras are collinear")
    if np.linalg.svd(dg, compute_uv=False)[1] < 1e-9 * max(np.abs(dg).max(), 1e-300):
        raise AlignmentDegenerate("ground-truth cameras are collinear")
    cov = dg.T @ de / len(est)
    u, d, vt = np.linalg.svd(cov)
    fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        fix[2, 2] = -1.0
    r = u @ fix @ vt
    var = np.mean(np.sum(de * de, 1))
    s = float(np.trace(np.diag(d) @ fix) / var)
    t = mg - s * r @ me
    return s, r, t


@dataclass
class PoseMetrics:
    ate: float
    rta: dict
    rra: dict
    auc_rt: dict
    n_images: int
    n_pairs: int

    def to_json(self, path=None):
        d = asdict(self)
        for k in ("rta", "rra", "auc_rt"):
            d[k] = {f"{float(a):g}": float(v) for a, v in d[k].items()}
        text = json.dumps(d, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


def pairwise_errors(est, gt, ids=None, min_baseline=1e-9):
    """Relative rotation and translation-direction errors (degrees) over all pairs.

    ``est`` and ``gt`` map image id to ``(R, center)``. Translation errors
    for pairs whose ground-truth baseline is below ``min_baseline`` (times
    the scene extent) are ``nan``.
    """
    ids = sorted(set(est) & set(gt)) if ids is None else list(ids)
    re = np.stack([est[i][0] for i in ids])
    ce = np.stack([est[i][1] for i in ids])
    rg = np.stack([gt[i][0] for i in ids])
    cg = np.stack([gt[i][1] for i in ids])
    a, b = np.triu_indices(len(ids), 1)
    rel_e = re[b] @ np.swapaxes(re[a], 1, 2)
    rel_g = rg[b] @ np.swapaxes(rg[a], 1, 2)
    rot_err = np.degrees(rotation_angle(np.swapaxes(rel_e, 1, 2) @ rel_g))
    te = np.einsum("pij,pj->pi", re[b], ce[a] - ce[b])
    tg = np.einsum("pij,pj->pi", rg[b], cg[a] - cg[b])
    extent = max(np.linalg.norm(cg - cg.mean(0), axis=1).max(), 1e-300)
    cross = np.linalg.norm(np.cross(te, tg), axis=1)
    dot = np.sum(te * tg, 1)
    trans_err = np.degrees(np.arctan2(cross, dot))
    trans_err[np.linalg.norm(tg, axis=1) < min_baseline * extent] = np.nan
    return rot_err, trans_err


def recall(errors, delta):
    errors = np.asarray(errors, dtype=float)
    errors = errors[~np.isnan(errors)]
    if len(errors) == 0:
        return 0.0
    return 100.0 * float(np.count_nonzero(errors < delta)) / len(errors)


def auc(errors, delta):
    """Normalized area under the cumulative error curve on ``[0, delta]`` (percent)."""
    errors = np.sort(np.asarray(errors, dtype=float)[~np.isnan(errors)])
    if len(errors) == 0:
        return 0.0
    rec = np.arange(1, len(errors) + 1) / len(errors)
    errors = np.r_[0.0, errors]
    rec = np.r_[0.0, rec]
    last = int(np.searchsorted(errors, delta))
    e = np.r_[errors[:last], delta]
    r = np.r_[rec[:last], rec[last - 1]]
    return 100.0 * float(np.trapezoid(r, e) / delta)


def absolute_trajectory_error(est, gt, ids=None):
    """RMSE of Sim(3)-aligned centers against ground truth normalized to unit average norm."""
    ids = sorted(set(est) & set(gt)) if ids is None else list(ids)
    ce = np.stack([est[i][1] for i in ids])
    cg = np.stack([gt[i][1] for i in ids])
    cg = cg - cg.mean(0)
    cg = cg / np.linalg.norm(cg, axis=1).mean()
    s, r, t = sim3_align(ce, cg)
    aligned = s * ce @ r.T + t
    return float(np.sqrt(np.mean(np.sum((aligned - cg) ** 2, 1))))


def compute_pose_metrics(est, gt, deltas=DEFAULT_DELTAS):
    """ATE and RRA/RTA/AUC at every ``delta`` (degrees) over common images."""
    ids = sorted(set(est) & set(gt))
    if len(ids) < 2:
        raise AlignmentDegenerate("need at least two common images")
    rot_err, trans_err = pairwise_errors(est, gt, ids)
    ate = absolute_trajectory_error(est, gt, ids) if len(ids) >= 3 else float("nan")
    both = np.fmax(rot_err, trans_err)
    both[np.isnan(trans_err)] = np.nan
    return PoseMetrics(
        ate,
        {float(d): recall(trans_err, d) for d in deltas},
        {float(d): recall(rot_err, d) for d in deltas},
        {float(d): auc(both, d) for d in deltas},
        len(ids),
        len(rot_err),
    )
