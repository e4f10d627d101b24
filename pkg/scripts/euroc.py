"""Run one EuRoC sequence and report ATE and the real-time factor.

    python3 scripts/euroc.py /data/euroc/V1_01_easy --preset normal-slam
"""
import argparse
import logging
import time
from pathlib import Path

from ekfvio.config import load_config
from ekfvio.dataset import load_euroc
from ekfvio.evaluation import evaluate_ate
from ekfvio.pipeline import run_pipeline
from ekfvio.trajectory import write_trajectory

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "euroc_stereo.toml"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("sequence", help="directory containing mav0/")
    ap.add_argument("--config", default=str(CONFIG))
    ap.add_argument("--preset", default="normal-slam")
    ap.add_argument("--mode", choices=["mono", "stereo"])
    ap.add_argument("--output", help="trajectory file to write")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    cfg = load_config(args.config, args.preset).with_mode(args.mode)
    seq = load_euroc(args.sequence, stereo=cfg.stereo)
    t0 = time.perf_counter()

    def progress(k, n):
        if k % 200 == 0:
            print(f"frame {k}/{n}  {time.perf_counter() - t0:.0f} s", flush=True)

    res = run_pipeline(seq, cfg, progress=progress)
    wall = time.perf_counter() - t0
    span = seq.frame_times[-1] - seq.frame_times[0]
    if args.output:
        write_trajectory(args.output, res.online)
    print(f"ATE {evaluate_ate(res.online, seq.ground_truth).rmse_m:.3f} m")
    if res.postprocessed is not None:
        print(f"ATE post-processed {evaluate_ate(res.postprocessed, seq.ground_truth).rmse_m:.3f} m")
    print(f"{res.metrics.summary()['mean_frame_ms']:.1f} ms/frame, real-time factor {span / wall:.2f}")


if __name__ == "__main__":
    main()
