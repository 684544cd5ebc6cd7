"""Match database: loading, saving, two-view model fitting and graph filtering.

On-disk layout of a match directory (little-endian)::

    manifest.tsv     image_id  name  width  height  camera_id
    pairs.tsv        pair_index  i  j  kind(F|H)  inlier_count  m00 .. m22
    pair_<k>.bin     u32 count, then count x 4 f32 (x1, y1, x2, y2) in pixels

Lines starting with ``#`` are comments. Pixel origin is the top-left
corner, +x right, +y down. Keypoint identity inside an image is the exact
f32 coordinate, which is what lets tracks span several pairs.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import (
    DegenerateConfiguration,
    InsufficientMatches,
    IntegrityError,
    ParseError,
)

MANIFEST = "manifest.tsv"
PAIRS = "pairs.tsv"


@dataclass(frozen=True)
class ImageRecord:
    id: int
    name: str
    width: int
    height: int
    camera_id: int


@dataclass(frozen=True)
class TwoViewModel:
    kind: str
    m: np.ndarray
    inlier_count: int

    def __post_init__(self):
        if self.kind not in ("F", "H"):
            raise ValueError(f"unknown model kind {self.kind!r}")


@dataclass(frozen=True)
class MatchPair:
    """Correspondences between images ``i < j``.

    ``kp1``/``kp2`` index the per-image keypoint tables of the owning graph;
    ``points1``/``points2`` are the matching coordinates (pixels, or
    normalized camera coordinates once the graph is calibrated).
    """

    index: int
    i: int
    j: int
    kp1: np.ndarray
    kp2: np.ndarray
    points1: np.ndarray
    points2: np.ndarray
    model: TwoViewModel
    active: np.ndarray
    synthetic: np.ndarray = None

    def __post_init__(self):
        if self.synthetic is None:
            object.__setattr__(self, "synthetic", np.zeros(len(self.kp1), dtype=bool))

    def __len__(self):
        return len(self.kp1)

    @property
    def n_active(self):
        return int(np.count_nonzero(self.active))

    def active_points(self):
        return self.points1[self.active], self.points2[self.active]


@dataclass(frozen=True)
class MatchGraph:
    images: tuple
    pairs: tuple
    keypoints: dict
    calibrated: bool = False
    intrinsics: dict = None
    _index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        index = {im.id: k for k, im in enumerate(self.images)}
        if len(index) != len(self.images):
            raise IntegrityError("duplicate image ids")
        for p in self.pairs:
            if p.i not in index or p.j not in index:
                raise IntegrityError(f"pair {p.index} references unknown image")
            if p.i >= p.j:
                raise IntegrityError(f"pair {p.index} must satisfy i < j")
        object.__setattr__(self, "_index", index)

    @property
    def image_ids(self):
        return [im.id for im in self.images]

    @property
    def cameras(self):
        return sorted({im.camera_id for im in self.images})

    def image(self, image_id):
        return self.images[self._index[image_id]]

    def camera_of(self, image_id):
        return self.images[self._index[image_id]].camera_id

    def adjacency(self):
        adj = {im.id: [] for im in self.images}
        for k, p in enumerate(self.pairs):
            adj[p.i].append(k)
            adj[p.j].append(k)
        return adj

    def with_pairs(self, pairs, **kw):
        return replace(self, pairs=tuple(pairs), **kw)


# ---------------------------------------------------------------------------
# file IO


def _read_lines(path):
    if not path.exists():
        raise ParseError("file not found", path)
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield lineno, line.split("\t") if "\t" in line else line.split()


def load_match_graph(path):
    """Read a match directory into an indexed ``MatchGraph``."""
    root = Path(path)
    if not root.is_dir():
        raise ParseError("not a directory", root)
    images = []
    for lineno, cols in _read_lines(root / MANIFEST):
        if len(cols) != 5:
            raise ParseError(f"expected 5 columns, got {len(cols)}", root / MANIFEST, lineno)
        try:
            rec = ImageRecord(int(cols[0]), cols[1], int(cols[2]), int(cols[3]), int(cols[4]))
        except ValueError as exc:
            raise ParseError(str(exc), root / MANIFEST, lineno) from None
        if rec.width <= 0 or rec.height <= 0:
            raise ParseError("image size must be positive", root / MANIFEST, lineno)
        images.append(rec)
    if not images:
        raise ParseError("manifest lists no images", root / MANIFEST)
    known = {im.id for im in images}
    if len(known) != len(images):
        raise IntegrityError("duplicate image ids in manifest")

    raw = []
    for lineno, cols in _read_lines(root / PAIRS):
        if len(cols) != 14:
            raise ParseError(f"expected 14 columns, got {len(cols)}", root / PAIRS, lineno)
        try:
            index, i, j = int(cols[0]), int(cols[1]), int(cols[2])
            kind, count = cols[3], int(cols[4])
            m = np.array([float(c) for c in cols[5:]]).reshape(3, 3)
        except ValueError as exc:
            raise ParseError(str(exc), root / PAIRS, lineno) from None
        if kind not in ("F", "H"):
            raise ParseError(f"model kind must be F or H, got {kind!r}", root / PAIRS, lineno)
        if i not in known or j not in known:
            raise IntegrityError(f"{root / PAIRS}:{lineno}: pair references unknown image")
        if i >= j:
            raise ParseError("pairs must satisfy i < j", root / PAIRS, lineno)
        pts = _read_pair_bin(root / f"pair_{index}.bin")
        if kind == "F" and len(pts) < 8:
            raise IntegrityError(f"{root / PAIRS}:{lineno}: F pair with fewer than 8 matches")
        raw.append((index, i, j, TwoViewModel(kind, m, count), pts))

    return assemble_graph(images, raw)


def assemble_graph(images, raw):
    """Build a graph from ``(index, i, j, model, (n, 4) points)`` records.

    Keypoint tables are the sorted unique coordinates seen per image. Points
    are f32 as stored on disk; float64 records (in-memory synthetic scenes
    that skip quantization) keep full precision.
    """
    obs = {im.id: [] for im in images}
    for _, i, j, _, pts in raw:
        obs[i].append(pts[:, :2])
        obs[j].append(pts[:, 2:])
    keypoints, lookup = {}, {}
    exact = any(np.asarray(pts).dtype == np.float64 for *_, pts in raw)
    for im in images:
        xy = np.concatenate(obs[im.id]) if obs[im.id] else np.zeros((0, 2))
        if exact:
            table, inverse = np.unique(np.asarray(xy, np.float64), axis=0, return_inverse=True)
            keypoints[im.id] = table
        else:
            xy = np.ascontiguousarray(xy, dtype=np.float32)
            table, inverse = np.unique(xy.view(np.uint64).ravel(), return_inverse=True)
            keypoints[im.id] = table.view(np.float32).reshape(-1, 2).astype(np.float64)
        lookup[im.id] = inverse.ravel()
    cursor = {im.id: 0 for im in images}
    pairs = []
    for index, i, j, model, pts in raw:
        n = len(pts)
        kp1 = lookup[i][cursor[i]:cursor[i] + n]
        kp2 = lookup[j][cursor[j]:cursor[j] + n]
        cursor[i] += n
        cursor[j] += n
        pairs.append(
            MatchPair(index, i, j, kp1, kp2, keypoints[i][kp1], keypoints[j][kp2], model,
                      np.ones(n, dtype=bool))
        )
    return MatchGraph(tuple(images), tuple(pairs), keypoints)


def _read_pair_bin(path):
    if not path.exists():
        raise ParseError("pair file not found", path)
    data = path.read_bytes()
    if len(data) < 4:
        raise ParseError("truncated header", path)
    count = int(np.frombuffer(data[:4], dtype="<u4")[0])
    if len(data) != 4 + 16 * count:
        raise ParseError(f"expected {4 + 16 * count} bytes, found {len(data)}", path)
    return np.frombuffer(data[4:], dtype="<f4").reshape(count, 4).astype(np.float32)


def save_match_graph(graph, path):
    """Write ``graph`` in the match directory layout (pixel graphs only)."""
    if graph.calibrated:
        raise ValueError("calibrated graphs have no pixel coordinates to save")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# image_id\tname\twidth\theight\tcamera_id\n")
        for im in graph.images:
            fh.write(f"{im.id}\t{im.name}\t{im.width}\t{im.height}\t{im.camera_id}\n")
    with open(root / PAIRS, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# pair_index\ti\tj\tkind\tinlier_count\tm00..m22\n")
        for p in graph.pairs:
            vals = "\t".join(repr(float(v)) for v in np.asarray(p.model.m).ravel())
            fh.write(f"{p.index}\t{p.i}\t{p.j}\t{p.model.kind}\t{p.model.inlier_count}\t{vals}\n")
    for p in graph.pairs:
        body = np.concatenate([p.points1, p.points2], axis=1).astype("<f4")
        with open(root / f"pair_{p.index}.bin", "wb") as fh:
            fh.write(np.array([len(p)], dtype="<u4").tobytes())
            fh.write(body.tobytes())


# ---------------------------------------------------------------------------
# two-view model fitting


def _hartley(x, mask):
    """Similarity transforms sending each padded point set to centroid 0, mean distance sqrt(2)."""
    w = mask.astype(float)
    n = np.maximum(w.sum(1), 1.0)
    c = (x * w[..., None]).sum(1) / n[:, None]
    d = np.linalg.norm(x - c[:, None], axis=-1)
    md = (d * w).sum(1) / n
    if np.any(md < 1e-12):
        raise DegenerateConfiguration("all points of a pair coincide")
    s = np.sqrt(2.0) / md
    t = np.zeros((len(x), 3, 3))
    t[:, 0, 0] = s
    t[:, 1, 1] = s
    t[:, 0, 2] = -s * c[:, 0]
    t[:, 1, 2] = -s * c[:, 1]
    t[:, 2, 2] = 1.0
    xn = (x - c[:, None]) * s[:, None, None]
    return t, xn


def pad_pairs(point_sets, max_points=None):
    """Stack ragged ``(x1, x2)`` lists into zero-padded arrays plus a mask.

    With ``max_points``, larger sets are thinned by an even stride.
    """
    sel = []
    for x1, x2 in point_sets:
        n = len(x1)
        if max_points is not None and n > max_points:
            idx = np.linspace(0, n - 1, max_points).round().astype(int)
            x1, x2 = x1[idx], x2[idx]
        sel.append((x1, x2))
    m = max((len(a) for a, _ in sel), default=0)
    p = len(sel)
    x1p = np.zeros((p, m, 2))
    x2p = np.zeros((p, m, 2))
    mask = np.zeros((p, m), dtype=bool)
    for k, (a, b) in enumerate(sel):
        x1p[k, : len(a)] = a
        x2p[k, : len(b)] = b
        mask[k, : len(a)] = True
    return x1p, x2p, mask


def fit_fundamental_batch(x1, x2, mask, return_residuals=False):
    """Normalized 8-point fit for a batch of padded pairs.

    Returns ``(P, 3, 3)`` fundamental matrices in the input coordinates with
    unit Frobenius norm and exact rank 2. With ``return_residuals`` also
    returns the mean absolute algebraic error per pair, measured in each
    pair's normalized frame (so values are comparable across coordinate
    scalings).
    """
    counts = mask.sum(1)
    if np.any(counts < 8):
        raise InsufficientMatches("fundamental fit needs at least 8 active correspondences")
    t1, n1 = _hartley(x1, mask)
    t2, n2 = _hartley(x2, mask)
    h1 = np.concatenate([n1, np.ones(n1.shape[:-1] + (1,))], -1)
    h2 = np.concatenate([n2, np.ones(n2.shape[:-1] + (1,))], -1)
    a = (h2[..., :, None] * h1[..., None, :]).reshape(*h1.shape[:-1], 9)
    a *= mask[..., None]
    _, s, vt = np.linalg.svd(a, full_matrices=False)
    if np.any(s[:, 7] <= 1e-12 * s[:, 0]):
        raise DegenerateConfiguration("8-point design matrix has a null space of dimension > 1")
    fn = vt[:, 8].reshape(-1, 3, 3)
    u, sv, vt2 = np.linalg.svd(fn)
    sv[:, 2] = 0.0
    fn = (u * sv[:, None, :]) @ vt2
    res = None
    if return_residuals:
        fn_unit = fn / np.linalg.norm(fn, axis=(1, 2), keepdims=True)
        r = np.abs(np.einsum("pni,pij,pnj->pn", h2, fn_unit, h1)) * mask
        res = r.sum(1) / counts
    f = np.swapaxes(t2, 1, 2) @ fn @ t1
    f = _rank2(f)
    f /= np.linalg.norm(f, axis=(1, 2), keepdims=True)
    return (f, res) if return_residuals else f


def _rank2(f):
    u, s, vt = np.linalg.svd(f)
    s[:, 2] = 0.0
    return (u * s[:, None, :]) @ vt


def fit_homography_batch(x1, x2, mask):
    """Normalized DLT homographies (unit Frobenius norm) for padded pairs."""
    if np.any(mask.sum(1) < 4):
        raise InsufficientMatches("homography fit needs at least 4 active correspondences")
    t1, n1 = _hartley(x1, mask)
    t2, n2 = _hartley(x2, mask)
    x, y = n1[..., 0], n1[..., 1]
    u, v = n2[..., 0], n2[..., 1]
    o, z = np.ones_like(x), np.zeros_like(x)
    r1 = np.stack([-x, -y, -o, z, z, z, u * x, u * y, u], -1)
    r2 = np.stack([z, z, z, -x, -y, -o, v * x, v * y, v], -1)
    a = np.concatenate([r1 * mask[..., None], r2 * mask[..., None]], axis=1)
    _, s, vt = np.linalg.svd(a, full_matrices=False)
    if np.any(s[:, 7] <= 1e-12 * s[:, 0]):
        raise DegenerateConfiguration("homography design matrix is rank deficient")
    hn = vt[:, 8].reshape(-1, 3, 3)
    h = np.linalg.inv(t2) @ hn @ t1
    return h / np.linalg.norm(h, axis=(1, 2), keepdims=True)


def reestimate_fundamental(pair):
    """Least-squares fundamental matrix on the pair's active correspondences."""
    if pair.n_active < 8:
        raise InsufficientMatches(f"pair ({pair.i}, {pair.j}) has {pair.n_active} active matches")
    x1, x2 = pair.active_points()
    f = fit_fundamental_batch(x1[None], x2[None], np.ones((1, len(x1)), dtype=bool))[0]
    return TwoViewModel("F", f, pair.n_active)


def reestimate_homography(pair):
    x1, x2 = pair.active_points()
    h = fit_homography_batch(x1[None], x2[None], np.ones((1, len(x1)), dtype=bool))[0]
    return TwoViewModel("H", h, pair.n_active)


# ---------------------------------------------------------------------------
# connectivity


def components(node_ids, edges):
    """Connected-component labels for ``node_ids`` given ``(a, b)`` edges."""
    index = {n: k for k, n in enumerate(node_ids)}
    n = len(node_ids)
    if n == 0:
        return np.zeros(0, dtype=int)
    e = np.array([(index[a], index[b]) for a, b in edges], dtype=int).reshape(-1, 2)
    adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return labels


def largest_component(node_ids, edges):
    """Members of the largest component; ties go to the one holding the smallest id."""
    labels = components(node_ids, edges)
    if len(labels) == 0:
        return set()
    sizes = np.bincount(labels)
    order = sorted(node_ids)
    lab_of = dict(zip(node_ids, labels))
    best = max(range(len(sizes)), key=lambda c: (sizes[c], -min(n for n in order if lab_of[n] == c)))
    return {n for n in node_ids if lab_of[n] == best}


def connectivity_threshold(graph, start_threshold=64, min_threshold=4):
    """Inlier threshold chosen by halving from ``start_threshold`` until connected."""
    if not start_threshold >= min_threshold >= 1:
        raise ValueError("need start_threshold >= min_threshold >= 1")
    ids = graph.image_ids
    threshold = start_threshold
    while ids:
        kept = [(p.i, p.j) for p in graph.pairs if p.model.inlier_count >= threshold]
        if len(set(components(ids, kept).tolist())) <= 1 or threshold == min_threshold:
            break
        threshold = max(threshold // 2, min_threshold)
    return threshold


def filter_graph_connectivity(graph, start_threshold=64, min_threshold=4):
    """Drop weak pairs while keeping the image graph connected.

    The inlier threshold starts at ``start_threshold`` and is halved (never
    below ``min_threshold``) while the surviving graph is disconnected. Images
    still disconnected at the minimal threshold are returned as outliers and
    removed together with their pairs.
    """
    ids = graph.image_ids
    if not ids:
        return graph, []
    threshold = connectivity_threshold(graph, start_threshold, min_threshold)
    kept = [p for p in graph.pairs if p.model.inlier_count >= threshold]
    main = largest_component(ids, [(p.i, p.j) for p in kept])
    outliers = sorted(set(ids) - main)
    images = tuple(im for im in graph.images if im.id in main)
    pairs = tuple(p for p in kept if p.i in main and p.j in main)
    keypoints = {k: v for k, v in graph.keypoints.items() if k in main}
    return replace(graph, images=images, pairs=pairs, keypoints=keypoints), outliers
