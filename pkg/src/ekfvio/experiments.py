"""Helpers shared by the experiment scripts and the acceptance suite."""
from __future__ import annotations

import dataclasses

import numpy as np

from .config import DatasetConfig, preset
from .evaluation import evaluate_ate
from .filter import FilterState, NoiseParams, slot_slice
from .pipeline import RunResult, run_pipeline
from .synthetic import SyntheticData, generate_synthetic, load_scene


def scene_config(data: SyntheticData, doc: dict, preset_name=None, noise_kw=None,
                 **overrides) -> DatasetConfig:
    """Filter configuration for a scene document, with optional overrides on top."""
    nx = dict(doc.get("imu", {}))
    nx.update(noise_kw or {})
    shift = float(nx.pop("time_shift", 0.0))
    name = preset_name or doc.get("preset", {}).get("name", "normal-vio")
    kw = dict(doc.get("overrides", {}))
    kw.update(overrides)
    return DatasetConfig(data.sequence.rig, NoiseParams(**nx), preset(name, **kw), name, shift)


def scene_run(path, preset_name=None, scene_kw=None, noise_kw=None,
              **overrides) -> tuple[SyntheticData, RunResult]:
    """Generate the scene in ``path`` and run the pipeline on it."""
    scene, doc = load_scene(path)
    if scene_kw:
        scene = dataclasses.replace(scene, **scene_kw)
    data = generate_synthetic(scene)
    cfg = scene_config(data, doc, preset_name, noise_kw, **overrides)
    return data, run_pipeline(data.sequence, cfg)


def relative_ate(traj, data: SyntheticData) -> float:
    gt = data.sequence.ground_truth
    return evaluate_ate(traj, gt).rmse_m / gt.path_length()


def trail_spread(state: FilterState) -> float:
    """Largest distance of a stored trail position from the trail centroid."""
    P = np.array([state.mean[slot_slice(s)][:3]
                  for s, f in enumerate(state.slot_frames, start=1) if f is not None])
    return float(np.linalg.norm(P - P.mean(axis=0), axis=1).max())


def still_drift(data: SyntheticData, res: RunResult) -> float:
    """Largest displacement from the first pose of the final still segment."""
    tr = res.online
    i0 = np.searchsorted(tr.times, data.scene.duration - data.scene.still_end)
    return float(np.linalg.norm(tr.positions[i0:] - tr.positions[i0], axis=1).max())


def max_step_error(traj, gt) -> float:
    """Largest frame-to-frame displacement error after rigid alignment (jump detector)."""
    a = evaluate_ate(traj, gt)
    return float(np.linalg.norm(np.diff(a.aligned, axis=0) - np.diff(a.truth, axis=0), axis=1).max())
