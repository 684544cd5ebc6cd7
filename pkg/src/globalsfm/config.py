"""Pipeline configuration: every tunable default in one flat key = value table."""

import dataclasses
import sys
from dataclasses import dataclass, fields

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    stage_dump: bool = False

    # ingest / graph filtering
    filter_start_threshold: int = 64
    filter_min_threshold: int = 4

    # intrinsics
    estimate_distortion: bool = True
    alpha_lo: float = -0.9
    alpha_hi: float = 0.9
    alpha_candidates: int = 33
    alpha_levels: int = 4
    distortion_max_pairs: int = 256
    distortion_max_points: int = 256
    estimate_focal: bool = True
    fov_min: float = 10.0
    fov_max: float = 170.0
    fov_step: float = 0.5
    focal_tau: float = 0.01
    default_fov: float = 60.0

    # rotation
    rotation_iterations: int = 2000
    rotation_step: float = 1e-2

    # tracks
    complete_tracks: bool = True
    max_track_size: int = 50
    min_pair_inliers: int = 16

    # translation
    sphere_samples: int = 4096
    sphere_refine_levels: int = 2
    sphere_refine_samples: int = 1024
    translation_max_points: int = 256
    translation_inits: int = 4
    translation_iterations: int = 3000
    translation_step: float = 1e-2
    translation_min_step: float = 1e-4

    # epipolar adjustment
    epipolar_adjust: bool = True
    epipolar_rounds: int = 4
    epipolar_iterations: int = 500
    epipolar_step: float = 1e-3
    epipolar_min_step: float = 0.0
    epipolar_step_ratio: float = 1.0
    filter_initial_threshold: float = 0.01
    filter_final_threshold: float = 0.002
    refine_focal: bool = False

    # reconstruction
    reconstruct: bool = True
    max_reproj_error: float = 4.0
    min_track_inliers: int = 3
    min_triangulation_angle_deg: float = 1.5
    reproj_iterations: int = 3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            want = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool}[f.type]
            if want is float and isinstance(v, int) and not isinstance(v, bool):
                object.__setattr__(self, f.name, float(v))
            elif want is bool and not isinstance(v, bool):
                raise ConfigError(f"{f.name} must be true or false, got {v!r}")
            elif want is int and (isinstance(v, bool) or not isinstance(v, int)):
                raise ConfigError(f"{f.name} must be an integer, got {v!r}")
            elif want is float and not isinstance(getattr(self, f.name), float):
                raise ConfigError(f"{f.name} must be a number, got {v!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not self.filter_start_threshold >= self.filter_min_threshold >= 1:
            raise ConfigError("need filter_start_threshold >= filter_min_threshold >= 1")
        if self.alpha_candidates < 3 or self.alpha_levels < 1 or not self.alpha_lo < self.alpha_hi:
            raise ConfigError("invalid distortion search schedule")
        if not self.filter_initial_threshold >= self.filter_final_threshold > 0:
            raise ConfigError("need filter_initial_threshold >= filter_final_threshold > 0")
        if self.translation_inits < 1:
            raise ConfigError("translation_inits must be >= 1")

    def with_(self, **kw):
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides):
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        nested = [k for k, v in values.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"tables are not supported: {', '.join(nested)}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)

    def to_text(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else repr(v)}")
        return "\n".join(out) + "\n"
