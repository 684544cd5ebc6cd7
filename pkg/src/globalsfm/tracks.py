"""Feature tracks and match completion.

A track is a connected component of the graph whose nodes are
``(image, keypoint)`` and whose edges are active matches. Tracks that hold
two keypoints of one image are inconsistent and dropped whole.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .ingest import MatchPair


@dataclass(frozen=True)
class Track:
    id: int
    members: tuple  # ((image_id, keypoint_index), ...) sorted by image id

    def __len__(self):
        return len(self.members)


@dataclass
class TrackSet:
    """Flat storage: member ``k`` of track ``t`` lives at ``offsets[t] + k``."""

    image: np.ndarray
    keypoint: np.ndarray
    offsets: np.ndarray
    n_discarded: int = 0

    def __len__(self):
        return len(self.offsets) - 1

    @property
    def sizes(self):
        return np.diff(self.offsets)

    @property
    def track_of(self):
        return np.repeat(np.arange(len(self)), self.sizes)

    def __getitem__(self, t):
        s, e = self.offsets[t], self.offsets[t + 1]
        return Track(int(t), tuple(zip(self.image[s:e].tolist(), self.keypoint[s:e].tolist())))

    def __iter__(self):
        return (self[t] for t in range(len(self)))

    def lookup(self):
        """``{(image, keypoint): track id}``."""
        return dict(zip(zip(self.image.tolist(), self.keypoint.tolist()), self.track_of.tolist()))


def _node_offsets(graph):
    ids = graph.image_ids
    counts = np.array([len(graph.keypoints[i]) for i in ids], dtype=np.int64)
    offs = np.concatenate([[0], np.cumsum(counts)])
    return ids, dict(zip(ids, offs[:-1].tolist())), int(offs[-1])


def build_tracks(graph):
    """Connected components of the keypoint match graph with at least two members."""
    ids, base, n_nodes = _node_offsets(graph)
    rows, cols = [], []
    for p in graph.pairs:
        a = p.active
        rows.append(base[p.i] + p.kp1[a])
        cols.append(base[p.j] + p.kp2[a])
    if n_nodes == 0:
        return TrackSet(np.zeros(0, int), np.zeros(0, int), np.zeros(1, int))
    r = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    c = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    adj = coo_matrix((np.ones(len(r)), (r, c)), shape=(n_nodes, n_nodes))
    _, label = connected_components(adj, directed=False)

    node_image = np.repeat(np.array(ids), [len(graph.keypoints[i]) for i in ids])
    node_kp = np.concatenate([np.arange(len(graph.keypoints[i])) for i in ids])
    sizes = np.bincount(label)
    keep = sizes[label] >= 2
    # sort by (component, image, keypoint); component order follows smallest node id
    order = np.lexsort((node_kp[keep], node_image[keep], label[keep]))
    lab = label[keep][order]
    img = node_image[keep][order]
    kp = node_kp[keep][order]
    dup = (lab[1:] == lab[:-1]) & (img[1:] == img[:-1])
    bad = np.unique(lab[1:][dup])
    ok = ~np.isin(lab, bad)
    lab, img, kp = lab[ok], img[ok], kp[ok]
    starts = np.flatnonzero(np.r_[True, lab[1:] != lab[:-1]]) if len(lab) else np.zeros(0, int)
    offsets = np.r_[starts, len(lab)].astype(int)
    return TrackSet(img.astype(int), kp.astype(int), offsets, int(len(bad)))


def complete_matches(graph, tracks, max_track_size=50):
    """Add every within-track correspondence that the graph does not hold yet.

    Added correspondences are appended to the existing pair (or a new pair
    is created with ``model=None``) and flagged in ``MatchPair.synthetic``.
    Tracks larger than ``max_track_size`` are skipped.
    """
    ids = sorted(graph.image_ids)
    slot = {im: k for k, im in enumerate(ids)}
    n_img = len(ids)
    kmax = max((len(v) for v in graph.keypoints.values()), default=0) + 1

    def keys(i, j, k1, k2):
        return ((np.asarray(i, np.int64) * n_img + j) * kmax + k1) * kmax + k2

    existing = []
    for p in graph.pairs:
        existing.append(keys(slot[p.i], slot[p.j], p.kp1, p.kp2))
    existing = np.concatenate(existing) if existing else np.zeros(0, np.int64)

    sizes = tracks.sizes
    slots_of_image = np.array([slot[i] for i in tracks.image], dtype=np.int64)
    new_keys = []
    for m in np.unique(sizes):
        if m < 2 or m > max_track_size:
            continue
        starts = tracks.offsets[:-1][sizes == m]
        members = starts[:, None] + np.arange(m)
        ua, ub = np.triu_indices(m, 1)
        a, b = members[:, ua].ravel(), members[:, ub].ravel()
        new_keys.append(keys(slots_of_image[a], slots_of_image[b], tracks.keypoint[a], tracks.keypoint[b]))
    if not new_keys:
        return graph
    cand = np.unique(np.concatenate(new_keys))
    cand = cand[~np.isin(cand, existing)]
    if len(cand) == 0:
        return graph
    k2 = cand % kmax
    k1 = (cand // kmax) % kmax
    pslot = cand // (kmax * kmax)
    si, sj = pslot // n_img, pslot % n_img

    next_index = max((p.index for p in graph.pairs), default=-1) + 1
    bounds = np.flatnonzero(np.r_[True, pslot[1:] != pslot[:-1], True])
    added = {}
    for s, e in zip(bounds[:-1], bounds[1:]):
        added[(ids[si[s]], ids[sj[s]])] = (k1[s:e], k2[s:e])

    pairs = []
    for p in graph.pairs:
        if (p.i, p.j) in added:
            a1, a2 = added.pop((p.i, p.j))
            n = len(a1)
            p = replace(
                p,
                kp1=np.r_[p.kp1, a1], kp2=np.r_[p.kp2, a2],
                points1=np.r_[p.points1, graph.keypoints[p.i][a1]],
                points2=np.r_[p.points2, graph.keypoints[p.j][a2]],
                active=np.r_[p.active, np.ones(n, bool)],
                synthetic=np.r_[p.synthetic, np.ones(n, bool)],
            )
        pairs.append(p)
    for (i, j), (a1, a2) in sorted(added.items(), key=lambda kv: (slot[kv[0][0]], slot[kv[0][1]])):
        n = len(a1)
        pairs.append(MatchPair(next_index, i, j, a1, a2, graph.keypoints[i][a1], graph.keypoints[j][a2],
                               None, np.ones(n, bool), np.ones(n, bool)))
        next_index += 1
    return graph.with_pairs(pairs)
