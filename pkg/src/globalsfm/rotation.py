"""Global rotation averaging.

Relative rotations come from decomposing each calibrated two-view model.
The global rotations are initialized one column at a time by a smallest
eigenvector problem, then refined on the mean geodesic distance with Adam.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .errors import (
    CheiralityFailure,
    DegenerateConfiguration,
    DisconnectedGraph,
    HomographyDecompositionFailure,
    SolverFailure,
)
from .geometry import (
    decompose_essential,
    decompose_homography,
    geodesic_distance,
    geodesic_distance_grad,
    matrix_to_rot6d,
    project_to_rotation,
    rot6d_backward,
    rot6d_to_matrix,
)
from .ingest import components
from .optim import OptimConfig, run_adam

DENSE_LIMIT = 1500  # unknowns above which the sparse eigen solver is used


@dataclass
class RelativeRotationSet:
    """Relative rotations ``R_ij = R_j R_i^T`` keyed by image-id pairs."""

    i: np.ndarray
    j: np.ndarray
    r: np.ndarray
    pair_index: np.ndarray
    t: np.ndarray = None
    pure_rotation: np.ndarray = None
    skipped: list = field(default_factory=list)

    def __len__(self):
        return len(self.i)

    def subset(self, keep):
        keep = np.asarray(keep, dtype=bool)
        return RelativeRotationSet(
            self.i[keep], self.j[keep], self.r[keep], self.pair_index[keep],
            None if self.t is None else self.t[keep],
            None if self.pure_rotation is None else self.pure_rotation[keep],
            list(self.skipped),
        )

    @classmethod
    def from_poses(cls, pairs, rotations):
        """Exact relative rotations for ``pairs`` from a dict of global rotations."""
        i = np.array([a for a, _ in pairs], dtype=int)
        j = np.array([b for _, b in pairs], dtype=int)
        r = np.stack([rotations[b] @ rotations[a].T for a, b in pairs])
        return cls(i, j, r, np.arange(len(pairs)))


@dataclass
class RotationResult:
    rotations: dict
    loss: float
    initial_loss: float
    trace: np.ndarray = None
    best_iteration: int = 0


def relative_rotations(graph):
    """Decompose every calibrated pair model into a relative rotation and translation.

    Pairs whose decomposition fails are recorded in ``skipped`` as
    ``(pair_index, reason)`` and left out.
    """
    if not graph.calibrated:
        raise ValueError("relative_rotations needs a calibrated graph")
    ii, jj, rs, ts, pure, idx, skipped = [], [], [], [], [], [], []
    for p in graph.pairs:
        x1, x2 = p.active_points()
        try:
            if p.model.kind == "F":
                r, t = decompose_essential(p.model.m, x1, x2)
                is_pure = False
            else:
                hp = decompose_homography(p.model.m, x1, x2)
                r, t, is_pure = hp.r, hp.t, hp.pure_rotation
        except (CheiralityFailure, HomographyDecompositionFailure, DegenerateConfiguration) as exc:
            skipped.append((p.index, type(exc).__name__))
            continue
        n = np.linalg.norm(t)
        ii.append(p.i)
        jj.append(p.j)
        rs.append(r)
        ts.append(t / n if n > 1e-12 else np.zeros(3))
        pure.append(bool(is_pure))
        idx.append(p.index)
    return RelativeRotationSet(
        np.array(ii, dtype=int), np.array(jj, dtype=int),
        np.array(rs).reshape(-1, 3, 3), np.array(idx, dtype=int),
        np.array(ts).reshape(-1, 3), np.array(pure, dtype=bool), skipped,
    )


# ---------------------------------------------------------------------------
# initialization


def _column_system(rels, slot, n_images):
    """Sparse ``Q`` with ``x^T Q x = sum ||c_j - R_ij c_i||^2`` over stacked columns."""
    a = slot[rels.i]
    b = slot[rels.j]
    n = len(rels)
    # per pair: [ R^T R, -R^T ; -R, I ] in block (a, b) coordinates
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    blocks = [(a, a, eye), (a, b, -np.swapaxes(rels.r, 1, 2)), (b, a, -rels.r), (b, b, eye)]
    rows, cols, vals = [], [], []
    r3, c3 = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
    for ra, cb, m in blocks:
        rows.append((3 * ra[:, None, None] + r3).ravel())
        cols.append((3 * cb[:, None, None] + c3).ravel())
        vals.append(np.asarray(m).ravel())
    q = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(3 * n_images, 3 * n_images),
    )
    return q.tocsr()


def _smallest_eigvec(q):
    """Unit eigenvector of the smallest eigenvalue, with a deterministic sign."""
    dim = q.shape[0]
    if dim <= DENSE_LIMIT:
        vals, vecs = np.linalg.eigh(q.toarray())
        v = vecs[:, 0]
    else:
        try:
            vals, vecs = eigsh(q, k=1, sigma=-1e-6, which="LM", v0=np.ones(dim), tol=1e-10,
                               maxiter=10_000)
        except ArpackNoConvergence as exc:
            raise SolverFailure("sparse eigen solver did not converge") from exc
        v = vecs[:, 0]
    if not np.all(np.isfinite(v)):
        raise SolverFailure("eigen solve produced non-finite values")
    k = int(np.argmax(np.abs(v)))
    return v if v[k] >= 0 else -v


def init_global_rotations(rels, images):
    """Column-wise least-squares rotation initialization.

    The first columns minimize the relative-rotation residual under a unit
    norm constraint; the second columns additionally pay a penalty for not
    being orthogonal to the first. The third column is the cross product.
    """
    images = list(images)
    slot_of = {im: k for k, im in enumerate(images)}
    n = len(images)
    if n == 0:
        return {}
    labels = components(images, list(zip(rels.i.tolist(), rels.j.tolist())))
    if len(set(labels.tolist())) > 1:
        raise DisconnectedGraph("relative rotation graph is disconnected")
    if n == 1:
        return {images[0]: np.eye(3)}
    slot = np.zeros(max(images) + 1, dtype=int)
    for im, k in slot_of.items():
        slot[im] = k
    q = _column_system(rels, slot, n)

    c1 = _smallest_eigvec(q).reshape(n, 3)
    c1 = _normalize_rows(c1)

    n_pairs = max(len(rels), 1)
    penalty = sp.block_diag([np.outer(c, c) for c in c1], format="csr")
    q2 = q / n_pairs + penalty / n
    c2 = _smallest_eigvec(q2).reshape(n, 3)
    c2 = _normalize_rows(c2)
    c2 = c2 - np.sum(c1 * c2, 1, keepdims=True) * c1
    c2 = _normalize_rows(c2)
    c3 = np.cross(c1, c2)
    rots = project_to_rotation(np.stack([c1, c2, c3], axis=-1))
    return {im: rots[k] for im, k in slot_of.items()}


def _normalize_rows(c):
    nrm = np.linalg.norm(c, axis=1, keepdims=True)
    if np.any(nrm < 1e-300):
        raise SolverFailure("eigenvector has a zero block; graph too weakly constrained")
    return c / nrm


# ---------------------------------------------------------------------------
# refinement


class RotationLoss:
    """Fused evaluator of the mean geodesic residual over 6D parameters."""

    def __init__(self, rels, images):
        self.images = list(images)
        slot = {im: k for k, im in enumerate(self.images)}
        self.a = np.array([slot[i] for i in rels.i], dtype=int)
        self.b = np.array([slot[j] for j in rels.j], dtype=int)
        self.rel = rels.r
        self.n = len(self.images)
        self.dim = 6 * self.n

    def rotations(self, x):
        return rot6d_to_matrix(x.reshape(self.n, 6))

    def loss(self, x):
        r = self.rotations(x)
        pred = self.rel @ r[self.a]
        return float(np.mean(geodesic_distance(r[self.b], pred))) if len(self.a) else 0.0

    def __call__(self, x):
        params = x.reshape(self.n, 6)
        r = rot6d_to_matrix(params)
        ri, rj = r[self.a], r[self.b]
        pred = self.rel @ ri
        d, g_rj, g_pred = geodesic_distance_grad(rj, pred)
        m = max(len(d), 1)
        g_ri = np.swapaxes(self.rel, 1, 2) @ g_pred
        grad_r = np.zeros((self.n, 3, 3))
        np.add.at(grad_r, self.b, g_rj / m)
        np.add.at(grad_r, self.a, g_ri / m)
        return float(d.sum() / m), rot6d_backward(params, grad_r).ravel()


def rotation_loss(rotations, rels):
    """Mean geodesic distance ``d(R_j, R_ij R_i)`` for a dict of rotations."""
    images = sorted(rotations)
    ev = RotationLoss(rels, images)
    return ev.loss(np.concatenate([matrix_to_rot6d(rotations[i]) for i in images]))


def refine_global_rotations(init, rels, cfg=OptimConfig(iterations=2000, step_size=1e-2)):
    """First-order refinement of the mean geodesic objective from ``init``.

    The objective has a global rotation gauge along which Adam drifts; the
    result is mapped back into the gauge of ``init`` by the global rotation
    that best aligns the two, so refining ``R_i G`` gives ``R_i' G``.
    """
    images = sorted(init)
    ev = RotationLoss(rels, images)
    r0 = np.stack([init[i] for i in images])
    res = run_adam(ev, matrix_to_rot6d(r0).ravel(), cfg)
    r = ev.rotations(res.x)
    g = project_to_rotation(np.einsum("nki,nkj->ij", r, r0))
    r = r @ g
    return RotationResult({im: r[k] for k, im in enumerate(images)}, res.loss, res.initial_loss,
                          res.trace, res.best_iteration)
