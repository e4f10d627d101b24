"""Square loop with injected gyro drift: VIO vs online SLAM vs post-processed ATE.

Writes the three trajectories and a plot next to ``--out`` when given.
"""
import argparse
import logging
from pathlib import Path

from ekfvio.evaluation import evaluate_ate
from ekfvio.experiments import max_step_error, scene_run
from ekfvio.trajectory import write_trajectory

SCENE = Path(__file__).resolve().parents[1] / "configs" / "scenes" / "square_slam.toml"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scene", default=str(SCENE))
    ap.add_argument("--preset")
    ap.add_argument("--out", help="directory for trajectories and plots")
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)
    data, res = scene_run(args.scene, args.preset)
    gt = data.sequence.ground_truth
    trajs = {"vio": res.vio, "online": res.online, "post": res.postprocessed}
    for name, tr in trajs.items():
        if tr is None:
            continue
        print(f"{name:7s} ATE {evaluate_ate(tr, gt).rmse_m:.4f} m  "
              f"largest step error {1000 * max_step_error(tr, gt):.1f} mm")
    kinds = [e.kind for e in res.slam.events]
    print(f"keyframes {len(res.slam.map.keyframes)}  points {len(res.slam.map.points)}  "
          f"events {dict((k, kinds.count(k)) for k in set(kinds))}")
    if args.out:
        from ekfvio.plotting import plot_trajectory
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, tr in trajs.items():
            if tr is not None:
                write_trajectory(out / f"{name}.txt", tr)
                plot_trajectory(tr, gt, out / f"{name}.svg", out / f"{name}.csv", title=name)


if __name__ == "__main__":
    main()
