"""Epipolar adjustment without 3D points.

Each correspondence contributes ``(w^T e)^2`` with ``w = flatten(x2 x1^T)``
and ``e = flatten(E)``, so all correspondences of a pair collapse into one
9x9 matrix ``W = sum w w^T``. After that precompute, evaluating the loss and
its gradient costs the same whatever the number of points. Robustness comes
from re-weighting: with weights ``1/|eps_hat|`` the quadratic loss equals the
L1 loss at the poses the weights were computed from.

Focal refinement works on the already calibrated coordinates: replacing the
focal ``f0`` used for calibration by ``f`` scales the first two coordinates
of every normalized point by ``s = f0 / f``, i.e. ``E -> S_j E S_i`` with
``S = diag(s, s, 1)``.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import OverFiltering
from .geometry import homogeneous, matrix_to_rot6d, rot6d_backward, rot6d_to_matrix
from .optim import OptimConfig, run_adam

WEIGHT_FLOOR = 1e-6
NORM_GUARD = 1e-12


@dataclass(frozen=True)
class FilterSchedule:
    initial_threshold: float = 0.01
    final_threshold: float = 0.002
    rounds: int = 4

    def __post_init__(self):
        if not self.initial_threshold >= self.final_threshold > 0:
            raise ValueError("need initial_threshold >= final_threshold > 0")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")

    def thresholds(self):
        if self.rounds == 1:
            return [self.final_threshold]
        ratio = self.final_threshold / self.initial_threshold
        return [self.initial_threshold * ratio ** (k / (self.rounds - 1)) for k in range(self.rounds)]


@dataclass
class PairQuadratic:
    n: int
    i: int
    j: int
    W: np.ndarray
    z: int


# ---------------------------------------------------------------------------
# correspondence table


@dataclass
class Correspondences:
    """Flat table of calibrated correspondences over all pairs.

    ``w`` rows are ``flatten(x2 x1^T)``; ``pair`` gives the owning slot in
    ``pairs``; ``row`` is the position inside the owning ``MatchPair``.
    """

    pairs: list
    w: np.ndarray
    pair: np.ndarray
    row: np.ndarray
    active: np.ndarray

    @classmethod
    def from_graph(cls, graph):
        if not graph.calibrated:
            raise ValueError("epipolar adjustment needs a calibrated graph")
        ws, pid, rows, act, pairs = [], [], [], [], []
        for p in graph.pairs:
            x1 = homogeneous(p.points1)
            x2 = homogeneous(p.points2)
            ws.append((x2[:, :, None] * x1[:, None, :]).reshape(-1, 9))
            pid.append(np.full(len(p), len(pairs)))
            rows.append(np.arange(len(p)))
            act.append(p.active.copy())
            pairs.append(p)
        if not pairs:
            return cls([], np.zeros((0, 9)), np.zeros(0, int), np.zeros(0, int), np.zeros(0, bool))
        return cls(pairs, np.concatenate(ws), np.concatenate(pid), np.concatenate(rows),
                   np.concatenate(act))

    def apply_to(self, graph):
        """Copy the active masks back onto the graph's pairs."""
        masks = np.split(self.active, np.cumsum([len(p) for p in self.pairs])[:-1]) if self.pairs else []
        by_index = {p.index: m for p, m in zip(self.pairs, masks)}
        return graph.with_pairs(
            replace(p, active=by_index[p.index].copy()) if p.index in by_index else p for p in graph.pairs
        )


def precompute_pair_quadratics(corr, weights=None):
    """Per-pair ``W = sum u w w^T`` over active correspondences.

    Pairs without active correspondences are left out. ``weights`` gives
    ``u`` per row of ``corr``; ``None`` means unit weights.
    """
    u = np.ones(len(corr.w)) if weights is None else np.asarray(weights, float)
    out = []
    bounds = np.flatnonzero(np.r_[True, corr.pair[1:] != corr.pair[:-1], True]) if len(corr.pair) else [0]
    for s, e in zip(bounds[:-1], bounds[1:]):
        a = corr.active[s:e]
        if not a.any():
            continue
        w = corr.w[s:e][a]
        k = int(corr.pair[s])
        p = corr.pairs[k]
        out.append(PairQuadratic(k, p.i, p.j, w.T @ (w * u[s:e][a][:, None]), int(a.sum())))
    return out


# ---------------------------------------------------------------------------
# fused loss


class EpipolarLoss:
    """Fused evaluator of ``(1/Z) sum_n e_n^T W_n e_n`` over poses (and log focals).

    Parameter layout: ``6N`` rotation parameters, ``3N`` centers, then one
    log focal per camera group when focal refinement is on.
    """

    def __init__(self, quads, images, camera_of=None, focals=None, refine_focal=False, z=None):
        self.images = list(images)
        slot = {im: k for k, im in enumerate(self.images)}
        self.n = len(self.images)
        self.a = np.array([slot[q.i] for q in quads], dtype=int)
        self.b = np.array([slot[q.j] for q in quads], dtype=int)
        self.W = np.stack([q.W for q in quads]) if quads else np.zeros((0, 9, 9))
        self.z = float(z if z is not None else sum(q.z for q in quads))
        self.refine_focal = refine_focal
        if refine_focal:
            self.cameras = sorted(focals)
            cslot = {c: k for k, c in enumerate(self.cameras)}
            self.cam = np.array([cslot[camera_of[im]] for im in self.images], dtype=int)
            self.f0 = np.array([focals[c] for c in self.cameras], dtype=float)
        else:
            self.cameras, self.cam, self.f0 = [], np.zeros(self.n, int), np.zeros(0)
        self.dim = 9 * self.n + len(self.cameras)
        self.guarded = 0

    # parameter packing -------------------------------------------------

    def pack(self, rotations, centers, focals=None):
        x = [np.concatenate([matrix_to_rot6d(rotations[i]) for i in self.images]),
             np.concatenate([centers[i] for i in self.images])]
        if self.refine_focal:
            f = self.f0 if focals is None else np.array([focals[c] for c in self.cameras])
            x.append(np.log(f))
        return np.concatenate(x)

    def unpack(self, x):
        n = self.n
        r = rot6d_to_matrix(x[: 6 * n].reshape(n, 6))
        o = x[6 * n: 9 * n].reshape(n, 3)
        rotations = {im: r[k] for k, im in enumerate(self.images)}
        centers = {im: o[k].copy() for k, im in enumerate(self.images)}
        focals = {c: float(np.exp(x[9 * n + k])) for k, c in enumerate(self.cameras)}
        return rotations, centers, focals

    def scales(self, x):
        """Per-image coordinate scale ``s = f0 / f``."""
        if not self.refine_focal:
            return np.ones(self.n)
        logf = x[9 * self.n:]
        return (self.f0 / np.exp(logf))[self.cam]

    def essentials(self, x):
        """``E'`` per pair (already focal-scaled) and the intermediates of the forward pass."""
        n = self.n
        params = x[: 6 * n].reshape(n, 6)
        r = rot6d_to_matrix(params)
        o = x[6 * n: 9 * n].reshape(n, 3)
        ri, rj = r[self.a], r[self.b]
        rrel = rj @ np.swapaxes(ri, 1, 2)
        dvec = o[self.a] - o[self.b]
        v = np.einsum("pij,pj->pi", rj, dvec)
        raw = np.linalg.norm(v, axis=1)
        nv = np.maximum(raw, NORM_GUARD)
        t = v / nv[:, None]
        tx = _skew(t)
        e = tx @ rrel
        s = self.scales(x)
        si = _diag_scale(s[self.a])
        sj = _diag_scale(s[self.b])
        ep = sj[:, :, None] * e * si[:, None, :]
        return ep, dict(params=params, r=r, ri=ri, rj=rj, rrel=rrel, dvec=dvec, raw=raw, nv=nv,
                        t=t, tx=tx, e=e, s=s, si=si, sj=sj)

    def __call__(self, x):
        ep, c = self.essentials(x)
        z = max(self.z, 1.0)
        ev = ep.reshape(-1, 9)
        we = np.einsum("pij,pj->pi", self.W, ev)
        loss = float(np.sum(ev * we) / z)
        self.guarded = int(np.count_nonzero(c["raw"] < NORM_GUARD))

        g_ep = (2.0 / z) * we.reshape(-1, 3, 3)
        g_e = c["sj"][:, :, None] * g_ep * c["si"][:, None, :]
        g_t_mat = g_e @ np.swapaxes(c["rrel"], 1, 2)
        g_rrel = np.swapaxes(c["tx"], 1, 2) @ g_e
        g_t = np.stack([g_t_mat[:, 2, 1] - g_t_mat[:, 1, 2],
                        g_t_mat[:, 0, 2] - g_t_mat[:, 2, 0],
                        g_t_mat[:, 1, 0] - g_t_mat[:, 0, 1]], 1)
        t = c["t"]
        g_v = np.where((c["raw"] >= NORM_GUARD)[:, None],
                       (g_t - t * np.sum(t * g_t, 1, keepdims=True)), g_t) / c["nv"][:, None]
        rj, ri = c["rj"], c["ri"]
        g_dvec = np.einsum("pji,pj->pi", rj, g_v)
        g_rj = g_v[:, :, None] * c["dvec"][:, None, :] + g_rrel @ ri
        g_ri = np.swapaxes(g_rrel, 1, 2) @ rj

        n = self.n
        g_r = np.zeros((n, 3, 3))
        np.add.at(g_r, self.b, g_rj)
        np.add.at(g_r, self.a, g_ri)
        g_o = np.zeros((n, 3))
        np.add.at(g_o, self.a, g_dvec)
        np.add.at(g_o, self.b, -g_dvec)
        grad = [rot6d_backward(c["params"], g_r).ravel(), g_o.ravel()]
        if self.refine_focal:
            e = c["e"]
            # d E'_ab / d s_j = E_ab si_b for rows a < 2; columns b < 2 for s_i
            g_sj = np.sum(g_ep[:, :2, :] * e[:, :2, :] * c["si"][:, None, :], axis=(1, 2))
            g_si = np.sum(g_ep[:, :, :2] * e[:, :, :2] * c["sj"][:, :, None], axis=(1, 2))
            s = c["s"]
            g_img = np.zeros(n)
            np.add.at(g_img, self.b, g_sj)
            np.add.at(g_img, self.a, g_si)
            g_logf = np.bincount(self.cam, -s * g_img, len(self.cameras))
            grad.append(g_logf)
        return loss, np.concatenate(grad)


def _skew(t):
    z = np.zeros(len(t))
    x, y, w = t[:, 0], t[:, 1], t[:, 2]
    return np.stack([np.stack([z, -w, y], 1), np.stack([w, z, -x], 1), np.stack([-y, x, z], 1)], 1)


def _diag_scale(s):
    return np.stack([s, s, np.ones_like(s)], 1)


def point_errors(loss, x, corr):
    """Signed algebraic error of every row of ``corr`` under parameters ``x``.

    ``loss`` must have been built over all pairs of ``corr`` (one quad per
    pair slot, in order); rows of pairs missing from it get ``nan``.
    """
    ep, _ = loss.essentials(x)
    e_rows = np.full((len(corr.pairs), 9), np.nan)
    e_rows[loss.slots] = ep.reshape(-1, 9)
    return np.einsum("mi,mi->m", corr.w, e_rows[corr.pair])


def epipolar_quadratic_loss(rotations, centers, quads, focals=None, camera_of=None, base_focals=None):
    """``(1/Z) sum_n e_n^T W_n e_n`` for pose dictionaries."""
    images = sorted(rotations)
    refine = focals is not None
    ev = EpipolarLoss(quads, images, camera_of, base_focals if refine else None, refine)
    return ev(ev.pack(rotations, centers, focals))[0]


# ---------------------------------------------------------------------------
# IRLS driver


@dataclass
class RoundRecord:
    round: int
    active_points: int
    threshold: float
    loss_before: float
    loss_after: float
    l1_after: float

    def as_dict(self):
        return dict(round=self.round, active_points=self.active_points, threshold=self.threshold,
                    loss_before=self.loss_before, loss_after=self.loss_after)


@dataclass
class EpipolarResult:
    rotations: dict
    centers: dict
    focals: dict
    graph: object
    rounds: list = field(default_factory=list)
    final_l1: float = float("nan")
    guarded_pairs: int = 0


DEFAULT_EPIPOLAR_OPTIM = OptimConfig(iterations=500, step_size=1e-3)


def _build_loss(corr, weights, images, camera_of, focals, refine_focal):
    quads = precompute_pair_quadratics(corr, weights)
    loss = EpipolarLoss(quads, images, camera_of, focals, refine_focal)
    loss.slots = np.array([q.n for q in quads], dtype=int)
    return loss


def l1_loss(rotations, centers, graph, focals=None, camera_of=None, base_focals=None):
    """Mean absolute algebraic error over the active correspondences of ``graph``."""
    corr = Correspondences.from_graph(graph)
    images = sorted(rotations)
    refine = focals is not None
    ev = _build_loss(corr, None, images, camera_of, base_focals if refine else None, refine)
    eps = point_errors(ev, ev.pack(rotations, centers, focals), corr)
    a = corr.active
    return float(np.mean(np.abs(eps[a]))) if a.any() else 0.0


def irls_epipolar_adjust(rotations, centers, graph, schedule=FilterSchedule(),
                         cfg=DEFAULT_EPIPOLAR_OPTIM, refine_focal=False, max_drop_fraction=0.9,
                         step_ratio=1.0):
    """Re-weighted, filtered epipolar refinement of all poses.

    Each round computes the algebraic errors at the current poses,
    deactivates correspondences above the round's threshold, rebuilds the
    weighted quadratics and runs the optimizer. Returns the refined poses,
    the graph with updated active masks and one record per round.

    The step size of a round is ``min(cfg.step_size, step_ratio * L1)`` with
    ``L1`` the mean absolute error at the round's start: a parameter change
    of ``delta`` moves algebraic errors by roughly ``delta``, so once the
    residual is small, large steps can only overshoot. ``step_ratio=None``
    keeps ``cfg.step_size`` throughout.
    """
    images = sorted(rotations)
    corr = Correspondences.from_graph(graph)
    intr = graph.intrinsics or {}
    camera_of = {im: graph.camera_of(im) for im in images}
    base = {c: intr[c].focal for c in sorted({camera_of[i] for i in images})} if refine_focal else None
    ev = _build_loss(corr, None, images, camera_of, base, refine_focal)
    x = ev.pack(rotations, centers)
    records = []
    guarded = 0
    for k, thr in enumerate(schedule.thresholds()):
        eps = np.abs(point_errors(ev, x, corr))
        before = int(corr.active.sum())
        drop = corr.active & ~(eps <= thr)
        if before and drop.sum() > max_drop_fraction * before:
            raise OverFiltering(
                f"round {k} would deactivate {int(drop.sum())} of {before} correspondences "
                f"(threshold {thr:g})"
            )
        corr.active &= ~drop
        weights = 1.0 / np.maximum(eps, WEIGHT_FLOOR)
        weights[~np.isfinite(weights)] = 0.0
        ev = _build_loss(corr, weights, images, camera_of, base, refine_focal)
        round_cfg = cfg
        if step_ratio is not None:
            l1_now = float(np.mean(eps[corr.active])) if corr.active.any() else 0.0
            step = min(cfg.step_size, step_ratio * l1_now)
            if step > 0:
                round_cfg = cfg.with_(step_size=step, min_step_size=min(cfg.min_step_size, step))
        res = run_adam(ev, x, round_cfg)
        guarded = max(guarded, ev.guarded)
        x = res.x
        eps_after = np.abs(point_errors(ev, x, corr))
        l1 = float(np.mean(eps_after[corr.active])) if corr.active.any() else 0.0
        records.append(RoundRecord(k, int(corr.active.sum()), float(thr), res.initial_loss, res.loss, l1))
    rot, cen, foc = ev.unpack(x)
    new_graph = corr.apply_to(graph)
    if refine_focal:
        focals = foc
    else:
        focals = {c: intr[c].focal for c in intr} if intr else {}
    return EpipolarResult(rot, cen, focals, new_graph, records,
                          records[-1].l1_after if records else float("nan"), guarded)
