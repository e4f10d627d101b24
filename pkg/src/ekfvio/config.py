"""Parameter presets and the TOML calibration/config format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .camera import CameraRig, make_camera
from .filter import NoiseParams
from .geometry import RigidTransform


class ConfigError(ValueError):
    pass


@dataclass
class PipelineParams:
    """Everything the orchestration loop needs besides calibration and noise."""

    # feature tracking
    detector: str = "gftt"
    subpixel: bool = True
    max_features_stereo: int = 200
    max_features_mono: int = 200
    lk_max_iterations: int = 20
    lk_window: int = 31
    min_distance: float = 15.0
    replenish_ratio: float = 0.8
    epipolar_tol: float = 2e-3
    nominal_depth: float = 5.0
    # pose trail / updates
    n_a: int = 20
    n_target: int = 20
    n_fifo: int = 17
    max_attempts_factor: int = 3
    gn_iters: int = 5
    gate_percentile: float = 0.95
    stationary_px: float = 1.0
    ransac_threshold_px: float = 3.0
    ransac_iters: int = 50
    # ablation switches
    use_ransac: bool = True
    use_gate: bool = True
    use_stationarity: bool = True
    use_reuse_guard: bool = True
    use_median_selection: bool = True
    use_hanoi: bool = True
    # slam
    slam: bool = False
    n_ba: int = 20
    n_matching: int = 20
    slam_every: int = 8
    keyframe_distance: float = 0.15
    keyframe_covisibility: float = 0.70
    match_gate_px: float = 4.0
    ba_iterations: int = 10
    ba_huber_sigma: float = 2.5
    ba_penalty_scale: float = 1.0
    slam_async: bool = False
    postprocess: bool = False
    # misc
    imu_midpoint: bool = True
    seed: int = 0
    divergence_trace: float = 1e8


def _preset(**kw) -> PipelineParams:
    return replace(PipelineParams(), **kw)


PRESETS = {
    "fast-vio": _preset(detector="fast", subpixel=False, max_features_stereo=70,
                        max_features_mono=100, lk_max_iterations=8, lk_window=13,
                        n_a=6, n_target=5, n_fifo=2),
    "normal-vio": _preset(),
    "normal-slam": _preset(slam=True, n_ba=20, n_matching=20),
    "postprocess-slam": _preset(slam=True, n_ba=100, n_matching=50, postprocess=True),
}


def preset(name: str, **overrides) -> PipelineParams:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return apply_overrides(PRESETS[name], overrides)


def apply_overrides(params, overrides: dict):
    names = {f.name: f for f in fields(params)}
    clean = {}
    for k, v in overrides.items():
        if k not in names:
            raise ConfigError(f"unknown parameter {k!r}")
        current = getattr(params, k)
        if isinstance(current, bool):
            clean[k] = bool(v)
        elif isinstance(current, int) and not isinstance(v, bool):
            clean[k] = int(v)
        elif isinstance(current, float):
            clean[k] = float(v)
        else:
            clean[k] = v
    return replace(params, **clean)


@dataclass
class DatasetConfig:
    rig: CameraRig
    noise: NoiseParams = field(default_factory=NoiseParams)
    params: PipelineParams = field(default_factory=PipelineParams)
    preset_name: str = "normal-vio"
    time_shift: float = 0.0      # added to camera timestamps at ingestion

    @property
    def stereo(self) -> bool:
        return self.rig.stereo

    def with_mode(self, mode: Optional[str]) -> "DatasetConfig":
        """Restrict to the left camera for ``mode='mono'``."""
        if mode in (None, "stereo"):
            if mode == "stereo" and not self.rig.stereo:
                raise ConfigError("stereo mode needs two cameras in the config")
            return self
        if mode != "mono":
            raise ConfigError(f"unknown mode {mode!r}")
        rig = CameraRig(self.rig.cameras[:1], self.rig.imu_from_camera[:1])
        return replace(self, rig=rig)

    @property
    def max_features(self) -> int:
        return self.params.max_features_stereo if self.stereo else self.params.max_features_mono

    @property
    def sigma_normalized(self) -> float:
        return self.noise.visual_noise_px / self.rig.cameras[0].mean_focal


def _transform(rows) -> RigidTransform:
    T = np.asarray(rows, dtype=float)
    if T.shape == (16,) or T.shape == (12,):
        T = T.reshape(-1, 4)
    if T.shape not in ((3, 4), (4, 4)):
        raise ConfigError("imu_from_camera must be a 3x4 or 4x4 matrix")
    R = T[:3, :3]
    # re-orthonormalize printed calibration matrices
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return RigidTransform(R, T[:3, 3])


_IMU_KEYS = {
    "gyro_noise": "gyro_noise", "acc_noise": "acc_noise",
    "gyro_bias_sigma": "gyro_bias_sigma", "acc_bias_sigma": "acc_bias_sigma",
    "gyro_bias_alpha": "gyro_bias_alpha", "acc_bias_alpha": "acc_bias_alpha",
    "gravity": "gravity", "visual_noise_px": "visual_noise_px", "max_dt": "max_dt",
}


def config_from_dict(doc: dict, preset_name: Optional[str] = None) -> DatasetConfig:
    cams = doc.get("cameras")
    if not cams:
        raise ConfigError("config needs at least one [[cameras]] table")
    models, exts = [], []
    for k, c in enumerate(cams):
        try:
            models.append(make_camera(c.get("model", "pinhole-radtan"), c["intrinsics"],
                                      c.get("distortion", []), c.get("resolution", (752, 480))))
            exts.append(_transform(c.get("imu_from_camera", np.eye(4))))
        except KeyError as exc:
            raise ConfigError(f"camera {k}: missing key {exc}") from exc
    imu = dict(doc.get("imu", {}))
    time_shift = float(imu.pop("time_shift", 0.0))
    noise_kw = {}
    for key, val in imu.items():
        if key in _IMU_KEYS:
            noise_kw[_IMU_KEYS[key]] = float(val)
        elif key in {f.name for f in fields(NoiseParams)}:
            noise_kw[key] = float(val)
        else:
            raise ConfigError(f"unknown [imu] key {key!r}")
    name = preset_name or doc.get("preset", {}).get("name", "normal-vio")
    params = preset(name, **doc.get("overrides", {}))
    return DatasetConfig(CameraRig(models, exts), NoiseParams(**noise_kw), params, name, time_shift)


def load_config(path, preset_name: Optional[str] = None) -> DatasetConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc, preset_name)


def config_to_toml(cfg: DatasetConfig) -> str:
    """Serialize calibration + noise + preset (overrides of non-default values only)."""
    out = []
    for cam, ext in zip(cfg.rig.cameras, cfg.rig.imu_from_camera):
        model = "kannala-brandt" if type(cam).__name__ == "KannalaBrandt" else "pinhole-radtan"
        dist = [cam.k1, cam.k2, cam.k3, cam.k4] if model == "kannala-brandt" else \
            [cam.k1, cam.k2, cam.p1, cam.p2]
        T = ext.as_matrix()
        out += ["[[cameras]]", f'model = "{model}"',
                f"intrinsics = [{cam.fx!r}, {cam.fy!r}, {cam.cx!r}, {cam.cy!r}]",
                "distortion = [" + ", ".join(repr(float(d)) for d in dist) + "]",
                f"resolution = [{cam.width}, {cam.height}]",
                "imu_from_camera = ["]
        out += ["  [" + ", ".join(repr(float(v)) for v in row) + "]," for row in T]
        out += ["]", ""]
    out.append("[imu]")
    defaults = NoiseParams()
    for f in fields(NoiseParams):
        v = getattr(cfg.noise, f.name)
        if v != getattr(defaults, f.name) or f.name in ("gyro_noise", "acc_noise"):
            out.append(f"{f.name} = {float(v)!r}")
    out.append(f"time_shift = {cfg.time_shift!r}")
    out += ["", "[preset]", f'name = "{cfg.preset_name}"', "", "[overrides]"]
    base = PRESETS.get(cfg.preset_name, PipelineParams())
    for f in fields(PipelineParams):
        v = getattr(cfg.params, f.name)
        if v != getattr(base, f.name):
            out.append(f"{f.name} = " + (f'"{v}"' if isinstance(v, str) else
                                          str(v).lower() if isinstance(v, bool) else repr(v)))
    return "\n".join(out) + "\n"


def as_dict(params) -> dict:
    return dataclasses.asdict(params)
