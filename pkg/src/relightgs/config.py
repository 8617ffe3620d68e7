"""Pipeline configuration: a flat schema with defaults and strict validation."""

import hashlib
import json
from dataclasses import asdict, dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    # geometry refinement energy weights and schedule
    lambda_color: float = 1.0
    lambda_smooth: float = 0.001
    lambda_temp: float = 0.00005
    lambda_normal: float = 0.03
    appearance_iters: int = 7000
    normal_iters: int = 5000
    step_pos: float = 1e-3
    step_rot: float = 1e-2
    step_scale: float = 1e-2
    step_color: float = 1e-1
    knn: int = 8
    # ray tracing
    early_stop_T: float = 1e-4
    ray_offset_eps: float = 0.02
    proxy_sigma: float = 3.0
    # material decomposition
    spp_ao: int = 50
    spp_basecolor: int = 100
    exposure_k: float = 1.0
    metallic: float = 0.0
    f0: float = 0.04
    denoise: bool = True
    env_importance: bool = False
    # baking
    bake_iters: int = 5000
    bake_tol: float = 1e-6
    lambda_temporal_bake: float = 0.01
    roughness_default: float = 0.7
    roughness_dmax: float = 0.1
    strict_reparam: bool = True
    # meshing
    voxel_size: float = 0.01
    truncation: float = 0.0  # 0 selects 4 * voxel_size
    # rendering
    spp_render: int = 64
    indirect_bounce: bool = False
    specular: bool = True
    # execution
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("float", float):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"{f.name} must be a number")
                object.__setattr__(self, f.name, float(v))
            elif f.type in ("int", int):
                if isinstance(v, bool) or not isinstance(v, int):
                    if isinstance(v, float) and v.is_integer():
                        object.__setattr__(self, f.name, int(v))
                    else:
                        raise ConfigError(f"{f.name} must be an integer")
            elif f.type in ("bool", bool) and not isinstance(v, bool):
                raise ConfigError(f"{f.name} must be true or false")
        for name in ("lambda_color", "lambda_smooth", "lambda_temp", "lambda_normal", "lambda_temporal_bake"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("spp_ao", "spp_basecolor", "spp_render"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.metallic != 0.0:
            raise ConfigError("metallic is fixed at 0")
        if self.exposure_k <= 0:
            raise ConfigError("exposure_k must be > 0")
        if self.ray_offset_eps < 0:
            raise ConfigError("ray_offset_eps must be >= 0")

    @property
    def truncation_distance(self):
        return self.truncation if self.truncation > 0 else 4.0 * self.voxel_size

    def to_dict(self):
        return asdict(self)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def updated(self, **overrides):
        return from_dict({**self.to_dict(), **overrides})


KEYS = tuple(f.name for f in fields(Config))


def from_dict(d):
    unknown = sorted(set(d) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return Config(**d)


def load_config(path=None, overrides=None):
    """Read a JSON config file and apply ``key=value`` overrides (overrides win)."""
    d = {}
    if path is not None:
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"unknown config key: {key}")
        d[key] = _parse_value(raw.strip())
    return from_dict(d)


def _parse_value(raw):
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r}") from None
