"""Monte-Carlo position NEES on the line scene.

    python3 scripts/nees_monte_carlo.py --runs 50
    python3 scripts/nees_monte_carlo.py --runs 20 --fresh-anchor   # diagnostic, see below

``--fresh-anchor`` drops the anchor frame from the update subset once a track
has been used, so every pixel enters the filter at most once. It exists only to
measure how much of the overconfidence comes from re-using that observation.
"""
import argparse
import dataclasses
import logging
import time
from pathlib import Path

import numpy as np
from scipy.stats import chi2

import ekfvio.msckf as msckf
import ekfvio.pipeline as pipeline
from ekfvio.evaluation import position_nees
from ekfvio.experiments import scene_config
from ekfvio.synthetic import generate_synthetic, load_scene

SCENE = Path(__file__).resolve().parents[1] / "configs" / "scenes" / "nees_line.toml"


def fresh_anchor_subset(track, i, trail, reuse_guard=True):
    s = msckf.update_subset(track, i, trail, reuse_guard)
    if track.last_used is not None and s and s[0] <= track.last_used:
        s = s[1:]
    return s


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scene", default=str(SCENE))
    ap.add_argument("--runs", type=int, default=50)
    ap.add_argument("--preset", default=None)
    ap.add_argument("--fresh-anchor", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)
    if args.fresh_anchor:
        pipeline.update_subset = fresh_anchor_subset

    scene, doc = load_scene(args.scene)
    t0 = time.perf_counter()
    per_run, final = [], []
    for k in range(args.runs):
        data = generate_synthetic(dataclasses.replace(scene, seed=scene.seed + k))
        cfg = scene_config(data, doc, args.preset, seed=k)
        res = pipeline.run_pipeline(data.sequence, cfg)
        nees = position_nees(res.online, data.sequence.ground_truth)[1:]
        per_run.append(nees.mean())
        final.append(nees[-1])
        print(f"run {k:3d}  mean NEES {nees.mean():6.2f}  final {nees[-1]:6.2f}")
    n = args.runs
    lo, hi = chi2.ppf(0.025, 3 * n) / n, chi2.ppf(0.975, 3 * n) / n
    print(f"mean NEES {np.mean(per_run):.3f}  final-frame mean {np.mean(final):.3f}")
    print(f"95% envelope [{lo:.2f}, {hi:.2f}], with 20% slack [{0.8 * lo:.2f}, {1.2 * hi:.2f}]")
    print(f"{time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
