"""Command line entry point: ``run``, ``eval``, ``synth`` and ``plot``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, DatasetConfig, apply_overrides, config_to_toml, load_config
from .dataset import DatasetError, load_euroc, read_groundtruth_csv, write_asl_directory
from .evaluation import EvaluationError, evaluate_ate
from .experiments import scene_config
from .pipeline import PipelineError, run_pipeline
from .synthetic import generate_synthetic, load_scene
from .trajectory import read_trajectory, write_trajectory

log = logging.getLogger("ekfvio")


def _parse_value(text: str):
    try:
        import tomllib
    except ModuleNotFoundError:  # pragma: no cover
        import tomli as tomllib
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v.strip())
    return out


def _scene_config(data, doc: dict, preset_name=None) -> DatasetConfig:
    try:
        return scene_config(data, doc, preset_name)
    except TypeError as exc:
        raise ConfigError(f"bad [imu] or [overrides] table: {exc}") from exc


def _load_truth(path):
    path = Path(path)
    if path.suffix == ".csv":
        return read_groundtruth_csv(path)
    return read_trajectory(path)


def cmd_run(args) -> int:
    src = Path(args.input)
    truth = None
    if src.is_file() and src.suffix == ".toml":
        scene, doc = load_scene(src)
        data = generate_synthetic(scene)
        cfg = _scene_config(data, doc, args.preset)
        seq = data.sequence
        truth = seq.ground_truth
    else:
        cfg_path = Path(args.config) if args.config else src / "calibration.toml"
        if not cfg_path.exists():
            raise ConfigError(f"no config given and {cfg_path} does not exist")
        cfg = load_config(cfg_path, args.preset)
        cfg = cfg.with_mode(args.mode)
        seq = load_euroc(src, stereo=cfg.stereo, time_shift=0.0)
        for note in seq.notes:
            log.warning("%s: %s", src, note)
        truth = seq.ground_truth
    if args.mode and src.suffix == ".toml":
        cfg = cfg.with_mode(args.mode)
    cfg.params = apply_overrides(cfg.params, _overrides(args.set))
    if args.seed is not None:
        cfg.params = apply_overrides(cfg.params, {"seed": args.seed})
    res = run_pipeline(seq, cfg)
    write_trajectory(args.output, res.online)
    if res.postprocessed is not None and args.postprocessed:
        write_trajectory(args.postprocessed, res.postprocessed)
    if res.slam is not None and args.map_dump:
        res.slam.map.dump(args.map_dump)
    summary = res.metrics.summary()
    if truth is not None and len(res.online) >= 3:
        try:
            summary["rmse_m"] = evaluate_ate(res.online, truth).rmse_m
            if res.postprocessed is not None:
                summary["rmse_post_m"] = evaluate_ate(res.postprocessed, truth).rmse_m
        except EvaluationError as exc:
            log.warning("evaluation skipped: %s", exc)
    print(json.dumps(summary, indent=None, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    est = read_trajectory(args.estimate)
    gt = _load_truth(args.truth)
    res = evaluate_ate(est, gt)
    print(f"rmse_m={res.rmse_m:.6f}")
    if args.verbose:
        print(f"matches={res.matches} path_length_m={gt.path_length():.3f}")
    return 0


def cmd_synth(args) -> int:
    scene, doc = load_scene(args.scene)
    data = generate_synthetic(scene)
    cfg = _scene_config(data, doc)
    root = write_asl_directory(args.out, data.sequence, config_to_toml(cfg))
    print(f"wrote {root} ({data.sequence.n_frames} frames, {len(data.sequence.imu)} IMU samples)")
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_trajectory

    est = read_trajectory(args.trajectory)
    gt = _load_truth(args.truth) if args.truth else None
    out = Path(args.out)
    svg = out if out.suffix == ".svg" else out.with_suffix(".svg")
    csv_path = Path(args.csv) if args.csv else svg.with_suffix(".csv")
    plot_trajectory(est, gt, svg, csv_path, title=args.title or est_title(args.trajectory))
    print(f"wrote {svg} and {csv_path}")
    return 0


def est_title(path) -> str:
    return Path(path).stem


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ekfvio", description="Hybrid EKF visual-inertial odometry")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="process an ASL directory or a synthetic scene file")
    r.add_argument("input", help="dataset directory (ASL layout) or scene .toml")
    r.add_argument("--config", help="calibration/config TOML (default: <dir>/calibration.toml)")
    r.add_argument("--preset", choices=["fast-vio", "normal-vio", "normal-slam", "postprocess-slam"])
    r.add_argument("--mode", choices=["mono", "stereo"])
    r.add_argument("--output", required=True, help="trajectory file to write")
    r.add_argument("--postprocessed", help="also write the post-processed trajectory here")
    r.add_argument("--map-dump", help="write the SLAM map tables here")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="parameter override")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="RMS ATE after rigid alignment")
    e.add_argument("estimate")
    e.add_argument("truth", help="trajectory file or ASL ground-truth CSV")
    e.add_argument("--verbose", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic scene as an ASL directory with tracks")
    s.add_argument("scene")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    p = sub.add_parser("plot", help="top-down plot (SVG) plus a CSV of the plotted values")
    p.add_argument("trajectory")
    p.add_argument("truth", nargs="?")
    p.add_argument("--out", required=True, help="SVG path")
    p.add_argument("--csv", help="CSV path (default: next to the SVG)")
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, EvaluationError, PipelineError, ValueError, OSError) as exc:
        print(f"ekfvio {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
