"""Synthesize a scene, solve it, and score the result against ground truth.

Run:  python demos/01_end_to_end.py [--cams 30] [--points 3000]
"""

import argparse
import tempfile
import time
from pathlib import Path

from globalsfm import PipelineConfig, SynthConfig, compute_pose_metrics, generate_scene, run_pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cams", type=int, default=30)
    ap.add_argument("--points", type=int, default=3000)
    ap.add_argument("--alpha", type=float, default=0.1)
    args = ap.parse_args()

    work = Path(tempfile.mkdtemp(prefix="globalsfm_demo_"))
    cfg = SynthConfig(n_cameras=args.cams, n_points=args.points, alpha=args.alpha,
                      pixel_noise_sigma=1.0, outlier_fraction=0.05, seed=1)
    scene = generate_scene(cfg, out_dir=work / "matches")
    print(f"wrote {len(scene.image_ids)} images and {len(scene.graph.pairs)} matched pairs to {work / 'matches'}")
    print("the solver only sees keypoints, matches and a fundamental matrix or homography per pair\n")

    t0 = time.perf_counter()
    est = run_pipeline(work / "matches", PipelineConfig(stage_dump=True), dump_dir=work / "model")
    est.export(work / "model")
    print(f"solved in {time.perf_counter() - t0:.1f}s; per-stage seconds:")
    for name, sec in est.diagnostics["timings"].items():
        print(f"  {name:22s}{sec:7.2f}")

    cam, truth = est.intrinsics[1], scene.intrinsics[1]
    print(f"\nfocal {cam.focal:.2f} (true {truth.focal:.2f}), alpha {cam.alpha:.4f} (true {truth.alpha:.4f})")
    m = compute_pose_metrics(est.poses(), scene.pose_dict())
    print(f"ATE {m.ate:.2e} on unit-normalized centers")
    for d in m.rra:
        print(f"  @{d:>4g} deg  RRA {m.rra[d]:6.2f}  RTA {m.rta[d]:6.2f}  AUC {m.auc_rt[d]:6.2f}")
    print(f"\n{len(est.points)} triangulated points; text model and stage dumps in {work / 'model'}")


if __name__ == "__main__":
    main()
