"""Outlier-rejection ablation on the noisy figure eight: full / no RANSAC / no gate / neither."""
import argparse
import logging
from pathlib import Path

from ekfvio.experiments import relative_ate, scene_run

SCENE = Path(__file__).resolve().parents[1] / "configs" / "scenes" / "figure8_noisy.toml"

VARIANTS = {
    "full": {},
    "no-ransac": {"use_ransac": False},
    "no-gate": {"use_gate": False},
    "no-ransac-no-gate": {"use_ransac": False, "use_gate": False},
    "no-median-selection": {"use_median_selection": False},
    "no-reuse-guard": {"use_reuse_guard": False},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scene", default=str(SCENE))
    ap.add_argument("--variants", nargs="*", default=list(VARIANTS))
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)
    scene_kw = {"seed": args.seed} if args.seed is not None else None
    for name in args.variants:
        data, res = scene_run(args.scene, scene_kw=scene_kw, **VARIANTS[name])
        s = res.metrics.summary()
        print(f"{name:22s} ATE {100 * relative_ate(res.online, data):7.3f}% of path  "
              f"gated {s['gated_updates']:5d}  ransac-rejected {s['ransac_rejected']:5d}  "
              f"{s['mean_frame_ms']:.1f} ms/frame")


if __name__ == "__main__":
    main()
