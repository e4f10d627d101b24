"""Drift and trail spread while holding still, with stationarity detection ON and OFF."""
import argparse
import logging
from pathlib import Path

from ekfvio.experiments import scene_run, still_drift, trail_spread

SCENE = Path(__file__).resolve().parents[1] / "configs" / "scenes" / "stationary.toml"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scene", default=str(SCENE))
    ap.add_argument("--mono", action="store_true", help="left camera only")
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)
    for on in (True, False):
        scene_kw = {"stereo": False} if args.mono else None
        data, res = scene_run(args.scene, scene_kw=scene_kw, use_stationarity=on)
        tr = res.online
        end = tr.positions[-1]
        st = res.final_state
        print(f"stationarity {'ON ' if on else 'OFF'}  max drift {100 * still_drift(data, res):.2f} cm  "
              f"trail spread {trail_spread(st):.4f} m  "
              f"still frames flagged {sum(res.metrics.stationary)}  end position {end.round(3)}")
        print(f"  trail frames {st.slot_frames}")


if __name__ == "__main__":
    main()
