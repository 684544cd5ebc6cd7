"""Ground-truth scenes and match directories for testing and evaluation.

The generator knows everything the pipeline has to recover (poses,
intrinsics, 3D points, which keypoint belongs to which point), so every
downstream stage can be checked against it. All randomness comes from the
portable SplitMix64 stream, so a seed fully determines the output bytes.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, RetryExhausted
from .geometry import matrix_to_quat, quat_to_matrix, skew
from .ingest import ImageRecord, TwoViewModel, assemble_graph, save_match_graph
from .intrinsics import CameraIntrinsics, focal_from_fov
from .rng import SplitMix64

TRAJECTORIES = ("orbit", "line", "grid", "random_sphere")


@dataclass(frozen=True)
class SynthConfig:
    n_cameras: int = 50
    n_points: int = 5000
    trajectory: str = "orbit"
    fov_deg: float = 60.0
    alpha: float = 0.0
    width: int = 1024
    height: int = 768
    pixel_noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    match_dropout: float = 0.2
    planar_fraction: float = 0.0
    seed: int = 0
    camera_groups: int = 1
    group_fov_deg: tuple = None
    group_alpha: tuple = None
    visibility_cone_deg: float = 60.0
    outlier_band_px: float = 4.0
    min_pair_matches: int = 16
    quantize: bool = True  # f32 keypoints, as stored on disk
    radius: float = 3.0
    homography_share: float = 0.9

    def __post_init__(self):
        if self.n_cameras < 2 or self.n_points < 8:
            raise ConfigError("need n_cameras >= 2 and n_points >= 8")
        for name in ("outlier_fraction", "match_dropout", "planar_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0 and not (name == "planar_fraction" and v == 1.0):
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.trajectory not in TRAJECTORIES:
            raise ConfigError(f"unknown trajectory {self.trajectory!r}")

    def group_intrinsics(self):
        fovs = self.group_fov_deg or (self.fov_deg,) * self.camera_groups
        alphas = self.group_alpha or (self.alpha,) * self.camera_groups
        return {
            g + 1: CameraIntrinsics(focal_from_fov(fovs[g], self.width, self.height), alphas[g],
                                    self.width, self.height)
            for g in range(self.camera_groups)
        }


@dataclass
class SynthScene:
    config: SynthConfig
    image_ids: list
    rotations: np.ndarray
    centers: np.ndarray
    intrinsics: dict
    camera_of: dict
    points: np.ndarray
    graph: object
    keypoint_labels: dict = field(repr=False)

    def pose_dict(self):
        return {i: (self.rotations[k], self.centers[k]) for k, i in enumerate(self.image_ids)}


# ---------------------------------------------------------------------------
# cameras


def look_at(center, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation for a camera at ``center`` facing ``target`` (x right, y down)."""
    fwd = np.asarray(target, float) - np.asarray(center, float)
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, float)
    if abs(fwd @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd])


def _trajectory(cfg, rng):
    n, r = cfg.n_cameras, cfg.radius
    jitter = 0.1 * rng.normal((n, 3))
    up = (0.0, 0.0, 1.0)
    if cfg.trajectory == "orbit":
        th = 2 * np.pi * np.arange(n) / n
        centers = np.stack([r * np.cos(th), r * np.sin(th), 1.0 + 0.3 * np.sin(3 * th)], 1)
        targets = jitter
    elif cfg.trajectory == "line":
        x = np.linspace(-2.0, 2.0, n)
        centers = np.stack([x, np.full(n, -r), np.full(n, 0.5)], 1)
        targets = np.stack([0.3 * x, np.zeros(n), np.zeros(n)], 1) + jitter
    elif cfg.trajectory == "grid":
        side = int(np.ceil(np.sqrt(n)))
        gx, gy = np.meshgrid(np.linspace(-1.5, 1.5, side), np.linspace(-1.5, 1.5, side))
        centers = np.stack([gx.ravel()[:n], gy.ravel()[:n], np.full(n, r)], 1)
        targets = np.concatenate([0.3 * centers[:, :2], np.zeros((n, 1))], 1) + jitter
        up = (0.0, 1.0, 0.0)
    else:
        d = rng.unit_vectors(n)
        d[:, 2] = np.abs(d[:, 2]) * 0.8 + 0.2
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        centers = r * d
        targets = jitter
    rots = np.stack([look_at(c, t, up) for c, t in zip(centers, targets)])
    return rots, centers


# ---------------------------------------------------------------------------
# projection


def project(rotations, centers, cam, points):
    """Distorted pixel projections ``(N, n, 2)`` and a validity mask."""
    xc = np.einsum("cij,cnj->cni", rotations, points[None] - centers[:, None])
    z = xc[..., 2]
    front = z > 0.1
    zs = np.where(front, z, 1.0)
    pn = xc[..., :2] / zs[..., None]
    pix_u = pn * cam.focal + cam.center
    q = (pix_u - cam.center) / cam.scale
    r2 = np.sum(q * q, -1)
    disc = 1.0 - 4.0 * cam.alpha * r2
    ok = front & (disc >= 0)
    q = q * (2.0 / (1.0 + np.sqrt(np.where(ok, disc, 1.0))))[..., None]
    pix = q * cam.scale + cam.center
    inside = (pix[..., 0] >= 0) & (pix[..., 0] < cam.width) & (pix[..., 1] >= 0) & (pix[..., 1] < cam.height)
    return pix, ok & inside


def _distort_pixels(pix_u, cam):
    q = (pix_u - cam.center) / cam.scale
    disc = 1.0 - 4.0 * cam.alpha * np.sum(q * q, -1)
    if disc < 0:
        return None
    return q * (2.0 / (1.0 + np.sqrt(disc))) * cam.scale + cam.center


def fundamental_from_poses(r_i, o_i, cam_i, r_j, o_j, cam_j):
    """Ground-truth F in undistorted pixel coordinates."""
    r_ij = r_j @ r_i.T
    t_ij = r_j @ (o_i - o_j)
    e = skew(t_ij / np.linalg.norm(t_ij)) @ r_ij
    f = np.linalg.inv(cam_j.K()).T @ e @ np.linalg.inv(cam_i.K())
    return f / np.linalg.norm(f)


def homography_from_plane(r_i, o_i, cam_i, r_j, o_j, cam_j, normal_w, offset_w):
    """Homography induced by the plane ``normal_w . X = offset_w`` (undistorted pixels)."""
    r_ij = r_j @ r_i.T
    t_ij = r_j @ (o_i - o_j)
    n_i = r_i @ normal_w
    d_i = offset_w - normal_w @ o_i
    h = r_ij + np.outer(t_ij, n_i) / d_i
    hp = cam_j.K() @ h @ np.linalg.inv(cam_i.K())
    return hp / np.linalg.norm(hp)


# ---------------------------------------------------------------------------
# generator


def generate_scene(cfg: SynthConfig, out_dir=None, max_retries=10) -> SynthScene:
    """Generate a scene; write it as a match directory when ``out_dir`` is given.

    Re-seeds up to ``max_retries`` times if a camera sees fewer than 8 points.
    """
    for attempt in range(max_retries + 1):
        scene = _generate(cfg, cfg.seed + 1_000_003 * attempt)
        if scene is not None:
            break
    else:
        raise RetryExhausted(f"every camera must see >= 8 points; gave up after {max_retries} re-seeds")
    if out_dir is not None:
        write_scene(scene, out_dir)
    return scene


def _generate(cfg, seed):
    rng = SplitMix64(seed)
    n_cam, n_pts = cfg.n_cameras, cfg.n_points
    rotations, centers = _trajectory(cfg, rng)
    groups = cfg.group_intrinsics()
    camera_of = np.arange(n_cam) % cfg.camera_groups + 1

    n_planar = int(round(cfg.planar_fraction * n_pts))
    pts = rng.uniform((n_pts, 3), -1.0, 1.0)
    planar = np.zeros(n_pts, dtype=bool)
    planar[:n_planar] = True
    pts[:n_planar, :2] *= 1.5
    pts[:n_planar, 2] = -1.0
    plane_normal, plane_offset = np.array([0.0, 0.0, 1.0]), -1.0

    # surface orientation: each point faces a random camera, so it is seen from a cone around it
    facing = rng.integers(n_cam, n_pts)
    normals = centers[facing] - pts + 0.3 * rng.normal((n_pts, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    pix = np.zeros((n_cam, n_pts, 2))
    vis = np.zeros((n_cam, n_pts), dtype=bool)
    for g, cam in groups.items():
        sel = camera_of == g
        p, v = project(rotations[sel], centers[sel], cam, pts)
        pix[sel], vis[sel] = p, v
    view = centers[:, None, :] - pts[None]
    view /= np.linalg.norm(view, axis=-1, keepdims=True)
    cone = np.einsum("cnk,nk->cn", view, normals) > np.cos(np.radians(cfg.visibility_cone_deg))
    vis &= cone | planar[None]
    if np.any(vis.sum(1) < 8):
        return None

    noise = rng.normal((n_cam, n_pts, 2), cfg.pixel_noise_sigma) if cfg.pixel_noise_sigma > 0 else 0.0
    obs = (pix + noise).astype(np.float32 if cfg.quantize else np.float64)
    for g, cam in groups.items():
        sel = camera_of == g
        o = obs[sel]
        bad = (o[..., 0] < 0) | (o[..., 0] >= cam.width) | (o[..., 1] < 0) | (o[..., 1] >= cam.height)
        vis[sel] &= ~bad

    image_ids = list(range(1, n_cam + 1))
    images = [
        ImageRecord(image_ids[k], f"img_{image_ids[k]:04d}.png", cfg.width, cfg.height, int(camera_of[k]))
        for k in range(n_cam)
    ]
    cams_by_image = [groups[int(camera_of[k])] for k in range(n_cam)]

    raw, labels_by_image = [], {i: {} for i in image_ids}
    for k in range(n_cam):
        for n in np.flatnonzero(vis[k]):
            labels_by_image[image_ids[k]][obs[k, n].tobytes()] = int(n)
    pair_index = 0
    for a in range(n_cam):
        for b in range(a + 1, n_cam):
            shared = np.flatnonzero(vis[a] & vis[b])
            if len(shared) == 0:
                continue
            keep = rng.uniform(len(shared)) >= cfg.match_dropout
            shared = shared[keep]
            if len(shared) < cfg.min_pair_matches:
                continue
            x1 = obs[a, shared].copy()
            x2 = obs[b, shared].copy()
            cam_a, cam_b = cams_by_image[a], cams_by_image[b]
            f_u = fundamental_from_poses(rotations[a], centers[a], cam_a, rotations[b], centers[b], cam_b)
            n_out = int(round(cfg.outlier_fraction * len(shared)))
            if n_out:
                which = np.sort(rng.permutation(len(shared))[:n_out])
                for m in which:
                    q = _epipolar_outlier(x1[m], f_u, cam_a, cam_b, cfg.outlier_band_px, rng)
                    if q is not None:
                        x2[m] = q.astype(x2.dtype)
                        labels_by_image[image_ids[b]].setdefault(x2[m].tobytes(), -1)
            share_planar = planar[shared].mean()
            if share_planar >= cfg.homography_share:
                model = TwoViewModel("H", homography_from_plane(
                    rotations[a], centers[a], cam_a, rotations[b], centers[b], cam_b,
                    plane_normal, plane_offset), len(shared))
            else:
                model = TwoViewModel("F", f_u, len(shared))
            raw.append((pair_index, image_ids[a], image_ids[b], model, np.concatenate([x1, x2], 1)))
            pair_index += 1

    graph = assemble_graph(images, raw)
    labels = {}
    for i in image_ids:
        table = graph.keypoints[i].astype(np.float32 if cfg.quantize else np.float64)
        labels[i] = np.array([labels_by_image[i].get(row.tobytes(), -1) for row in table], dtype=int)
    return SynthScene(
        cfg, image_ids, rotations, centers, groups,
        {image_ids[k]: int(camera_of[k]) for k in range(n_cam)}, pts, graph, labels,
    )


def _epipolar_outlier(x1, f_u, cam_a, cam_b, band, rng, tries=8):
    """A wrong match that still lies within ``band`` pixels of the epipolar line."""
    from .intrinsics import undistort_points

    xu = undistort_points(np.asarray(x1, float)[None], cam_a)[0]
    line = f_u @ np.array([xu[0], xu[1], 1.0])
    nrm = np.hypot(line[0], line[1])
    if nrm == 0:
        return None
    line = line / nrm
    for _ in range(tries):
        q = rng.uniform(2) * [cam_b.width, cam_b.height]
        dist = line @ np.array([q[0], q[1], 1.0])
        q = q - dist * line[:2] + rng.uniform(None, -band, band) * line[:2]
        qd = _distort_pixels(q, cam_b)
        if qd is None:
            continue
        if 0 <= qd[0] < cam_b.width and 0 <= qd[1] < cam_b.height:
            return qd
    return None


def write_scene(scene, out_dir):
    """Match directory plus ground-truth tables."""
    root = Path(out_dir)
    save_match_graph(scene.graph, root)
    with open(root / "gt_poses.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# image_id\tqw\tqx\tqy\tqz\tcx\tcy\tcz\n")
        for k, i in enumerate(scene.image_ids):
            q = matrix_to_quat(scene.rotations[k])
            vals = "\t".join(repr(float(v)) for v in (*q, *scene.centers[k]))
            fh.write(f"{i}\t{vals}\n")
    with open(root / "gt_points.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# point_id\tx\ty\tz\n")
        for n, p in enumerate(scene.points):
            fh.write(f"{n}\t{p[0]!r}\t{p[1]!r}\t{p[2]!r}\n")
    with open(root / "gt_cameras.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# camera_id\tfocal\talpha\twidth\theight\n")
        for c, cam in sorted(scene.intrinsics.items()):
            fh.write(f"{c}\t{cam.focal!r}\t{cam.alpha!r}\t{cam.width}\t{cam.height}\n")
    with open(root / "gt_keypoints.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# image_id\tkeypoint\tpoint_id\n")
        for i in scene.image_ids:
            for k, lab in enumerate(scene.keypoint_labels[i]):
                fh.write(f"{i}\t{k}\t{lab}\n")


def read_gt_poses(path):
    """``{image_id: (R, center)}`` from a ``gt_poses.tsv`` file."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            c = line.split()
            q = np.array([float(v) for v in c[1:5]])
            out[int(c[0])] = (quat_to_matrix(q), np.array([float(v) for v in c[5:8]]))
    return out


def read_gt_cameras(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            c = line.split()
            out[int(c[0])] = CameraIntrinsics(float(c[1]), float(c[2]), int(c[3]), int(c[4]))
    return out
