import os
import json
import dataclasses
from dataclasses import dataclass, field

from dotenv import load_dotenv

from src.utils import ConfigError


load_dotenv() # Load environment variables from .env file

# Runtime Configuration
THREADS = int(os.getenv("GRIDLOC_THREADS") or os.cpu_count() or 1)
OUTPUT_DIR = os.getenv("GRIDLOC_OUTPUT_DIR", "output_files")
LOG_FILE = os.getenv("GRIDLOC_LOG_FILE", "log.txt")
LOG_LEVEL = os.getenv("GRIDLOC_LOG_LEVEL", "INFO")

EFFECTIVE_CONFIG_FILE = "effective_config.json"
REQUIRED_KEYS = ("seed", "output_dir")


@dataclass
class WorldConfig:
    extent: tuple = (120.0, 80.0)
    cell_size: float = 0.10
    asphalt_mean: float = 25.0
    marking_mean: float = 90.0
    speckle_sigma: float = 4.0
    speckle_scale: float = 0.3
    patch_count: int = 12
    lane_width: float = 3.5
    line_width: float = 0.15
    dash_length: float = 3.0
    dash_gap: float = 6.0
    crosswalk_spacing: float = 30.0


@dataclass
class LaserConfig:
    count: int = 64
    gain_range: tuple = (0.7, 1.3)
    offset_range: tuple = (-10.0, 10.0)
    noise_sigma: float = 2.0
    angle_exponent: float = 1.0
    range_exponent: float = 1.0
    sensor_height: float = 2.0
    min_ring: float = 3.0
    max_ring: float = 18.0
    azimuth_count: int = 360
    footprint: float = 0.3
    max_range: float = 20.0
    occluders: list = field(default_factory=list)


@dataclass
class TrajectoryConfig:
    survey_kind: str = "stop-and-go"
    survey_duration: float = 60.0
    drive_kind: str = "stop-and-go"
    drive_duration: float = 60.0
    speed: float = 5.0
    rate: float = 10.0
    start: tuple = (60.0, 22.0, 0.0)
    odometry_sigma: tuple = (0.02, 0.02, 0.0034906585)  # 2 cm, 2 cm, 0.2 deg per step
    block_size: tuple = (60.0, 30.0)
    corner_radius: float = 6.0


@dataclass
class MapConfig:
    cell_size: float = 0.10
    local_extent: float = 40.0
    window: int = 8
    key_mode: str = "laser"
    save_stack: bool = False


@dataclass
class DenoiseSettings:
    enabled: bool = False
    lam: float = 0.5
    step: float = 1.0
    max_iters: int = 500
    rel_tol: float = 1e-6


@dataclass
class SearchConfig:
    bin_count: int = 64
    min_overlap: int = 100
    bin_mode: str = "range"
    coarse_step: tuple = (0.6, 0.6, 0.0261799388)    # 1.5 deg
    fine_step: tuple = (0.2, 0.2, 0.0087266463)      # 0.5 deg
    fine_half_extent: tuple = (1.0, 1.0, 0.0261799388)
    match: str = "edges"


@dataclass
class FilterSettings:
    process_sigma: tuple = (0.02, 0.02, 0.0034906585)
    init_sigma: tuple = (2.2360679775, 2.2360679775, 0.1745329252)  # variances 5 m^2, 5 m^2, (10 deg)^2
    gps_sigma: tuple = (1.0, 1.0, 0.0349065850)  # spread of the simulated initial fix
    gate_sigma: float = 4.0
    min_half_extent: tuple = (1.0, 1.0, 0.0261799388)
    max_half_extent: tuple = (4.0, 4.0, 0.1745329252)
    registration_enabled: bool = True


@dataclass
class EvalConfig:
    min_samples: int = 30
    min_perspectives: int = 2
    compare_lut: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = OUTPUT_DIR
    world: WorldConfig = field(default_factory=WorldConfig)
    lasers: LaserConfig = field(default_factory=LaserConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    map: MapConfig = field(default_factory=MapConfig)
    denoise: DenoiseSettings = field(default_factory=DenoiseSettings)
    search: SearchConfig = field(default_factory=SearchConfig)
    filter: FilterSettings = field(default_factory=FilterSettings)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data, require=False):
        """
        Builds a RunConfig from nested dictionaries. Unknown keys are rejected; with
        `require`, the top-level REQUIRED_KEYS must be present.
        """
        if not isinstance(data, dict):
            raise ConfigError("Configuration must be a JSON object")
        if require:
            for key in REQUIRED_KEYS:
                if key not in data:
                    raise ConfigError(f"Missing required field '{key}'")
        return _build(cls, data, "")


def _to_plain(value):
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def _coerce(default, value, path):
    """Casts a JSON value to the type of the field default it replaces."""
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(default):
                raise TypeError
            return tuple(float(v) for v in value)
        if isinstance(default, list):
            if not isinstance(value, list):
                raise TypeError
            return [[list(map(float, p)) for p in poly] for poly in value]
    except (TypeError, ValueError):
        raise ConfigError(f"Field '{path}' has an invalid value: {value!r}")
    return value


def _build(cls, data, prefix):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown configuration field(s): {', '.join(prefix + k for k in unknown)}")

    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"Field '{prefix + name}' must be an object")
            kwargs[name] = _build(type(current), value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(current, value, prefix + name)
    return cls(**kwargs)


def load_config(path=None, overrides=None):
    """
    Reads a JSON RunConfig (defaults when `path` is None) and applies dotted-path
    overrides such as {"seed": 7, "denoise.lam": 0.5}.
    """
    if path is None:
        data = {}
    else:
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Configuration file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Configuration file {path} is not valid JSON: {e}")
    cfg = RunConfig.from_dict(data, require=path is not None)

    if overrides:
        merged = cfg.to_dict()
        for dotted, value in overrides.items():
            node = merged
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = value
        cfg = RunConfig.from_dict(merged)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if cfg.world.extent[0] <= 0 or cfg.world.extent[1] <= 0:
        raise ConfigError("world.extent must be positive")
    if cfg.world.cell_size <= 0 or cfg.map.cell_size <= 0:
        raise ConfigError("cell sizes must be positive")
    if cfg.lasers.count < 1:
        raise ConfigError("lasers.count must be at least 1")
    if cfg.lasers.gain_range[0] <= 0:
        raise ConfigError("lasers.gain_range must stay positive")
    if cfg.lasers.noise_sigma < 0:
        raise ConfigError("lasers.noise_sigma must be non-negative")
    if cfg.trajectory.survey_duration <= 0 or cfg.trajectory.drive_duration <= 0 or cfg.trajectory.speed <= 0:
        raise ConfigError("trajectory durations and speed must be positive")
    if cfg.map.window < 1:
        raise ConfigError("map.window must be at least 1")
    if cfg.denoise.lam <= 0 or cfg.denoise.step <= 0:
        raise ConfigError("denoise.lam and denoise.step must be positive")
    if cfg.search.bin_count < 2:
        raise ConfigError("search.bin_count must be at least 2")
    if cfg.search.match not in ("edges", "intensity"):
        raise ConfigError(f"search.match must be 'edges' or 'intensity', got '{cfg.search.match}'")
    if cfg.search.bin_mode not in ("range", "quantile"):
        raise ConfigError(f"search.bin_mode must be 'range' or 'quantile', got '{cfg.search.bin_mode}'")
    if cfg.map.key_mode not in ("laser", "laser_geometry"):
        raise ConfigError(f"map.key_mode must be 'laser' or 'laser_geometry', got '{cfg.map.key_mode}'")


def write_effective_config(cfg, directory):
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, EFFECTIVE_CONFIG_FILE)
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=4, sort_keys=True)
    return path
