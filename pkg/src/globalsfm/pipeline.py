"""End-to-end solve: match directory in, intrinsics, poses and points out."""

import json
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .colmap import write_text_model
from .config import PipelineConfig
from .epipolar import FilterSchedule, irls_epipolar_adjust
from .errors import NoReadyPairs, SfMError, StageError
from .ingest import MatchGraph, components, filter_graph_connectivity, load_match_graph
from .intrinsics import (
    CameraIntrinsics,
    SearchSchedule,
    calibrate_graph,
    estimate_distortion,
    estimate_focal,
    focal_from_fov,
    refit_models,
    schedule_camera_order,
)
from .optim import OptimConfig
from .reconstruct import merge_and_filter_points, triangulate_pairs
from .rotation import init_global_rotations, refine_global_rotations, relative_rotations
from .tracks import build_tracks, complete_matches
from .translation import align_global_translations, reestimate_relative_translations

STAGES = (
    "ingest", "connectivity", "distortion", "focal", "calibrate", "relative_pose",
    "rotation_init", "rotation_refine", "tracks", "relative_translation",
    "translation_align", "epipolar", "reconstruct",
)


@dataclass
class SceneEstimate:
    intrinsics: dict
    rotations: dict
    centers: dict
    points: list
    images: tuple
    keypoints: dict
    outliers: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    stage_poses: dict = field(default_factory=dict)

    def poses(self):
        return {i: (self.rotations[i], self.centers[i]) for i in self.rotations}

    def export(self, path):
        write_text_model(path, self.intrinsics, self.images, self.rotations, self.centers,
                         self.points, self.keypoints)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else str(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


class _Run:
    def __init__(self, cfg, dump_dir):
        self.cfg = cfg
        self.dump_dir = Path(dump_dir) / "stages" if (cfg.stage_dump and dump_dir is not None) else None
        self.diag = {}
        self.timings = {}
        self.pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def mapper(self, fn, items):
        return self.pool.map(fn, items) if self.pool is not None else map(fn, items)

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        self.diag[name] = {}
        try:
            yield self.diag[name]
        except SfMError as exc:
            self.diag[name]["error"] = f"{type(exc).__name__}: {exc}"
            self.dump(name, failed=True)
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = time.perf_counter() - t0
        self.dump(name)

    def dump(self, name, failed=False):
        if self.dump_dir is None:
            return
        self.dump_dir.mkdir(parents=True, exist_ok=True)
        k = STAGES.index(name) if name in STAGES else 99
        suffix = "_failed" if failed else ""
        with open(self.dump_dir / f"{k:02d}_{name}{suffix}.json", "w", encoding="utf-8") as fh:
            json.dump(_jsonable(self.diag[name]), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def run_pipeline(source, config=None, dump_dir=None):
    """Run every stage on a match directory (or an in-memory ``MatchGraph``).

    Stage failures are re-raised as ``StageError`` naming the stage. With
    ``config.stage_dump`` each stage's diagnostics are written under
    ``dump_dir/stages`` as they complete, including the failing one.
    """
    cfg = config or PipelineConfig()
    run = _Run(cfg, dump_dir)
    try:
        with threadpool_limits(limits=1):
            return _solve(source, cfg, run)
    finally:
        run.close()


def _solve(source, cfg, run):
    with run.stage("ingest") as d:
        graph = source if isinstance(source, MatchGraph) else load_match_graph(source)
        pixel_keypoints = dict(graph.keypoints)
        d.update(images=len(graph.images), pairs=len(graph.pairs),
                 correspondences=int(sum(len(p) for p in graph.pairs)))

    with run.stage("connectivity") as d:
        graph, outliers = filter_graph_connectivity(graph, cfg.filter_start_threshold, cfg.filter_min_threshold)
        outliers = list(outliers)
        d.update(outliers=outliers, pairs=len(graph.pairs))

    with run.stage("distortion") as d:
        alphas = {}
        if cfg.estimate_distortion:
            sched = SearchSchedule(cfg.alpha_lo, cfg.alpha_hi, cfg.alpha_candidates, cfg.alpha_levels)
            for cam in schedule_camera_order(graph):
                try:
                    alphas[cam] = estimate_distortion(graph, cam, alphas, sched, cfg.distortion_max_pairs,
                                                      cfg.distortion_max_points, run.mapper)
                except NoReadyPairs:
                    alphas[cam] = 0.0
                    d.setdefault("no_ready_pairs", []).append(cam)
        else:
            alphas = {c: 0.0 for c in graph.cameras}
        graph, dropped = refit_models(graph, alphas)
        d.update(alpha=alphas, refit_dropped=dropped)

    with run.stage("focal") as d:
        focals, low = {}, []
        if cfg.estimate_focal:
            grid = np.arange(cfg.fov_min, cfg.fov_max + 1e-9, cfg.fov_step)
            for cam in schedule_camera_order(graph):
                est = estimate_focal(graph, cam, focals, grid, cfg.focal_tau, run.mapper)
                focals[cam] = est.focal
                if est.low_confidence:
                    low.append(cam)
        for cam in graph.cameras:
            if cam not in focals:
                im = next(im for im in graph.images if im.camera_id == cam)
                focals[cam] = focal_from_fov(cfg.default_fov, im.width, im.height)
        d.update(focal=focals, low_confidence=low)

    with run.stage("calibrate") as d:
        intr = {}
        for cam in graph.cameras:
            im = next(im for im in graph.images if im.camera_id == cam)
            intr[cam] = CameraIntrinsics(focals[cam], alphas[cam], im.width, im.height)
        graph = calibrate_graph(graph, intr)

    with run.stage("relative_pose") as d:
        rels = relative_rotations(graph)
        d.update(decomposed=len(rels), skipped=rels.skipped, pure_rotation=int(rels.pure_rotation.sum()))

    with run.stage("rotation_init") as d:
        ids = graph.image_ids
        labels = components(ids, list(zip(rels.i.tolist(), rels.j.tolist())))
        main_label = np.bincount(labels).argmax() if len(labels) else 0
        keep_ids = [i for i, lab in zip(ids, labels) if lab == main_label]
        dropped_ids = sorted(set(ids) - set(keep_ids))
        outliers += dropped_ids
        keep = set(keep_ids)
        rels = rels.subset([i in keep and j in keep for i, j in zip(rels.i, rels.j)])
        init = init_global_rotations(rels, keep_ids)
        d.update(images=len(keep_ids), dropped=dropped_ids)

    with run.stage("rotation_refine") as d:
        rcfg = OptimConfig(iterations=cfg.rotation_iterations, step_size=cfg.rotation_step, seed=cfg.seed)
        rres = refine_global_rotations(init, rels, rcfg)
        rotations = rres.rotations
        d.update(initial_loss=rres.initial_loss, loss=rres.loss, best_iteration=rres.best_iteration)

    with run.stage("tracks") as d:
        graph = _restrict(graph, set(rotations))
        if cfg.complete_tracks:
            tracks = build_tracks(graph)
            before = sum(len(p) for p in graph.pairs)
            graph = complete_matches(graph, tracks, cfg.max_track_size)
            d.update(tracks=len(tracks), discarded=tracks.n_discarded,
                     added=int(sum(len(p) for p in graph.pairs) - before))

    with run.stage("relative_translation") as d:
        pure = set(rels.pair_index[rels.pure_rotation].tolist()) if len(rels) else set()
        dirs = reestimate_relative_translations(
            graph, rotations, cfg.sphere_samples, cfg.sphere_refine_levels, cfg.min_pair_inliers,
            cfg.translation_max_points, pure, run.mapper, refine_samples=cfg.sphere_refine_samples,
        )
        d.update(directions=len(dirs), skipped=len(dirs.skipped))

    with run.stage("translation_align") as d:
        ids = sorted(rotations)
        labels = components(ids, list(zip(dirs.i.tolist(), dirs.j.tolist())))
        main_label = np.bincount(labels).argmax() if len(labels) else 0
        keep = {i for i, lab in zip(ids, labels) if lab == main_label}
        dropped_ids = sorted(set(ids) - keep)
        outliers += dropped_ids
        sel = np.array([i in keep and j in keep for i, j in zip(dirs.i, dirs.j)], dtype=bool)
        dirs = type(dirs)(dirs.i[sel], dirs.j[sel], dirs.d[sel], dirs.pair_index[sel], dirs.score[sel])
        tcfg = OptimConfig(iterations=cfg.translation_iterations, step_size=cfg.translation_step,
                           min_step_size=cfg.translation_min_step, seed=cfg.seed)
        tres = align_global_translations(dirs, sorted(keep), cfg.translation_inits, tcfg, cfg.seed, run.mapper)
        rotations = {i: rotations[i] for i in sorted(keep)}
        centers = tres.centers
        graph = _restrict(graph, keep)
        d.update(loss=tres.loss, run_losses=tres.run_losses, dropped=dropped_ids)

    stage_poses = {"translation": {i: (rotations[i].copy(), centers[i].copy()) for i in rotations}}

    with run.stage("epipolar") as d:
        if cfg.epipolar_adjust:
            sched = FilterSchedule(cfg.filter_initial_threshold, cfg.filter_final_threshold, cfg.epipolar_rounds)
            ecfg = OptimConfig(iterations=cfg.epipolar_iterations, step_size=cfg.epipolar_step,
                               min_step_size=cfg.epipolar_min_step, seed=cfg.seed)
            eres = irls_epipolar_adjust(rotations, centers, graph, sched, ecfg, cfg.refine_focal,
                                        step_ratio=cfg.epipolar_step_ratio)
            rotations, centers, graph = eres.rotations, eres.centers, eres.graph
            if cfg.refine_focal:
                intr = {c: v.with_(focal=eres.focals.get(c, v.focal)) for c, v in intr.items()}
            d.update(rounds=[r.as_dict() for r in eres.rounds], final_l1=eres.final_l1,
                     guarded_pairs=eres.guarded_pairs)
            if cfg.refine_focal:
                d["focal"] = {c: intr[c].focal for c in intr}
        else:
            d["skipped"] = True

    with run.stage("reconstruct") as d:
        points = []
        if cfg.reconstruct:
            if cfg.refine_focal and cfg.epipolar_adjust:
                graph = _rescale_calibrated(graph, eres.focals, focals)
            tracks = build_tracks(graph)
            raw = triangulate_pairs(rotations, centers, graph, tracks)
            points = merge_and_filter_points(
                raw, rotations, centers, graph, tracks, cfg.max_reproj_error,
                cfg.min_track_inliers, cfg.min_triangulation_angle_deg, cfg.reproj_iterations,
            )
            d.update(tracks=len(tracks), points=len(points), skipped_rays=raw.n_skipped)

    diagnostics = dict(run.diag)
    diagnostics["timings"] = dict(run.timings)
    images = tuple(im for im in graph.images if im.id in rotations)
    return SceneEstimate(intr, rotations, centers, points, images,
                         {i: pixel_keypoints[i] for i in rotations}, sorted(set(outliers)),
                         diagnostics, stage_poses)


def _restrict(graph, keep):
    images = tuple(im for im in graph.images if im.id in keep)
    pairs = tuple(p for p in graph.pairs if p.i in keep and p.j in keep)
    keypoints = {k: v for k, v in graph.keypoints.items() if k in keep}
    return replace(graph, images=images, pairs=pairs, keypoints=keypoints)


def _rescale_calibrated(graph, new_focals, old_focals):
    """Re-express calibrated coordinates for refined focals (``x -> x f_old / f_new``)."""
    keypoints = {}
    for im in graph.images:
        c = im.camera_id
        s = old_focals[c] / new_focals.get(c, old_focals[c])
        keypoints[im.id] = graph.keypoints[im.id] * s
    pairs = [replace(p, points1=keypoints[p.i][p.kp1], points2=keypoints[p.j][p.kp2]) for p in graph.pairs]
    intr = {c: v.with_(focal=new_focals.get(c, v.focal)) for c, v in (graph.intrinsics or {}).items()}
    return replace(graph, pairs=tuple(pairs), keypoints=keypoints, intrinsics=intr)
