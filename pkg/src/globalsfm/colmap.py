"""COLMAP-style sparse text model (cameras.txt, images.txt, points3D.txt).

Cameras use the model name ``DIVISION`` with parameters ``f cx cy alpha``;
it is not one of COLMAP's built-in models and the file header says so.
``alpha`` acts on pixel coordinates centered at the principal point and
divided by ``max(width, height) / 2``.
"""

from pathlib import Path

import numpy as np

from .errors import ParseError
from .geometry import matrix_to_quat, quat_to_matrix
from .intrinsics import CameraIntrinsics


def _f(v):
    return repr(float(v))


def write_text_model(path, intrinsics, images, rotations, centers, points, keypoints):
    """Write the three text files.

    ``images`` is a sequence of ``ImageRecord``; ``keypoints`` maps image id
    to the pixel keypoint table listed on each image's second line.
    ``points`` is a list of ``SparsePoint`` whose observations index those tables.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "cameras.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        fh.write("# MODEL DIVISION is not a built-in COLMAP model. PARAMS = f cx cy alpha with\n")
        fh.write("#   x_u = x_d / (1 + alpha r_d^2) on coordinates divided by max(WIDTH, HEIGHT) / 2\n")
        fh.write(f"# Number of cameras: {len(intrinsics)}\n")
        for c in sorted(intrinsics):
            cam = intrinsics[c]
            fh.write(f"{c} DIVISION {cam.width} {cam.height} {_f(cam.focal)} {_f(cam.center[0])} "
                     f"{_f(cam.center[1])} {_f(cam.alpha)}\n")

    point_ids = {}
    obs_of = {}
    for pid, pt in enumerate(points, 1):
        for im, kp, _ in pt.observations:
            obs_of[(im, kp)] = pid
        point_ids[pid] = pt
    posed = [im for im in images if im.id in rotations]
    with open(root / "images.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        fh.write(f"# Number of images: {len(posed)}\n")
        for im in posed:
            r = rotations[im.id]
            q = matrix_to_quat(r)
            t = -r @ centers[im.id]
            fh.write(f"{im.id} {' '.join(_f(v) for v in q)} {' '.join(_f(v) for v in t)} "
                     f"{im.camera_id} {im.name}\n")
            kps = keypoints.get(im.id, np.zeros((0, 2)))
            fh.write(" ".join(f"{_f(x)} {_f(y)} {obs_of.get((im.id, k), -1)}"
                              for k, (x, y) in enumerate(kps)) + "\n")
    with open(root / "points3D.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        fh.write(f"# Number of points: {len(points)}\n")
        for pid, pt in point_ids.items():
            err = np.mean([e for _, _, e in pt.observations]) if pt.observations else 0.0
            track = " ".join(f"{im} {kp}" for im, kp, _ in pt.observations)
            rgb = " ".join(str(int(c)) for c in pt.color)
            fh.write(f"{pid} {' '.join(_f(v) for v in pt.xyz)} {rgb} {_f(err)} {track}\n")


def _lines(path):
    if not path.exists():
        raise ParseError("file not found", path)
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if raw.startswith("#"):
                continue
            yield lineno, raw.rstrip("\n")


def read_text_model(path):
    """Read a text model back.

    Returns ``(intrinsics, poses, points)`` with ``poses`` mapping image id
    to ``(R, center, camera_id, name)`` and ``points`` mapping point id to xyz.
    """
    root = Path(path)
    intrinsics = {}
    for lineno, line in _lines(root / "cameras.txt"):
        c = line.split()
        if not c:
            continue
        try:
            cid, width, height = int(c[0]), int(c[2]), int(c[3])
            f, cx, cy, alpha = (float(v) for v in c[4:8])
        except (ValueError, IndexError):
            raise ParseError("malformed camera line", root / "cameras.txt", lineno) from None
        intrinsics[cid] = CameraIntrinsics(f, alpha, width, height, cx, cy)
    poses = {}
    it = iter(_lines(root / "images.txt"))
    for lineno, line in it:
        c = line.split()
        if not c:
            continue
        try:
            iid = int(c[0])
            q = np.array([float(v) for v in c[1:5]])
            t = np.array([float(v) for v in c[5:8]])
            cam, name = int(c[8]), c[9]
        except (ValueError, IndexError):
            raise ParseError("malformed image line", root / "images.txt", lineno) from None
        next(it, None)
        r = quat_to_matrix(q)
        poses[iid] = (r, -r.T @ t, cam, name)
    points = {}
    for lineno, line in _lines(root / "points3D.txt"):
        c = line.split()
        if not c:
            continue
        try:
            points[int(c[0])] = np.array([float(v) for v in c[1:4]])
        except (ValueError, IndexError):
            raise ParseError("malformed point line", root / "points3D.txt", lineno) from None
    return intrinsics, poses, points
