"""
Configuration Module

This module provides the run configuration: a tree of dataclasses read from
one JSON document, with every default materialized, dotted-path overrides
(`--set ao.rays=64`) and validation errors that name the offending key.
It also turns a validated Config into the objects the renderer runs on.
"""

import json
import logging
import math
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from .compose import ShadingParams
from .denoise import FilterParams
from .errors import ConfigError
from .netsim import TRACE_MODES, LinkConfig, load_latency_trace
from .raytrace import SHADOW_MODES
from .scene import SCENE_NAMES, Camera, MeshAnimation, Scene, generate_scene, load_triangle_soup
from .trajectory import Trajectory, standard_trajectory, static_trajectory
from .transport import CODECS, MIN_PAYLOAD_CAPACITY, Codec, get_codec

logger = logging.getLogger(__name__)

SHADOW_CHOICES = ("none",) + SHADOW_MODES
TRAJECTORY_KINDS = ("standard", "static", "keyframes")


@dataclass
class SceneConfig:
    name: str = "box-room"
    params: Dict[str, Any] = field(default_factory=dict)
    soup: Optional[str] = None
    animations: List[Dict[str, Any]] = field(default_factory=list)


@dataclass
class CameraConfig:
    width: int = 320
    height: int = 180
    vertical_fov_deg: float = 60.0


@dataclass
class ShadowConfig:
    mode: str = "soft"
    filter: bool = False


@dataclass
class AoConfig:
    enabled: bool = True
    rays: int = 32
    radius: float = 1.0


@dataclass
class FilterConfig:
    enabled: bool = True
    alpha: float = 0.2
    h_min: int = 4
    iterations: int = 5
    sigma_z: float = 1.0
    sigma_n: float = 128.0
    tau_z: float = 0.1
    tau_n: float = 0.9
    history_cap: int = 32
    sigma_ao: float = 0.0


@dataclass
class LinkSection:
    one_way_delay_ms: float = 0.0
    jitter_ms: float = 0.0
    loss_prob: float = 0.0
    bandwidth_bps: Optional[float] = None


@dataclass
class NetworkConfig:
    uplink: LinkSection = field(default_factory=LinkSection)
    downlink: LinkSection = field(default_factory=LinkSection)
    trace: Optional[str] = None
    trace_mode: str = "cycle"
    trace_direction: str = "uplink"
    host: str = "127.0.0.1"
    server_port: int = 47800
    client_port: int = 47801

    _NESTED = {"uplink": LinkSection, "downlink": LinkSection}


@dataclass
class TransportConfig:
    codec: str = "lz4"
    payload_capacity: int = 1200
    expiry_ms: float = 250.0
    max_backlog_ms: Optional[float] = None


@dataclass
class PredictionConfig:
    enabled: bool = True


@dataclass
class ShadingConfig:
    ambient: float = 0.15
    clear_color: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    tau_z: float = 0.1


@dataclass
class TrajectoryConfig:
    kind: str = "standard"
    ticks: int = 300
    tick_rate: float = 60.0
    position: List[float] = field(default_factory=lambda: [0.0, 2.0, 3.5])
    target: List[float] = field(default_factory=lambda: [0.0, 1.0, -1.5])
    keyframes: List[Dict[str, Any]] = field(default_factory=list)


@dataclass
class RemoteConfig:
    enabled: bool = False


@dataclass
class OutputConfig:
    directory: str = "out"
    save_frames: bool = False
    reference_spp: int = 64


@dataclass
class Config:
    seed: int = 1
    scene: SceneConfig = field(default_factory=SceneConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    shadows: ShadowConfig = field(default_factory=ShadowConfig)
    ao: AoConfig = field(default_factory=AoConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    shading: ShadingConfig = field(default_factory=ShadingConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    remote: RemoteConfig = field(default_factory=RemoteConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    _NESTED = {"scene": SceneConfig, "camera": CameraConfig, "shadows": ShadowConfig, "ao": AoConfig,
               "filter": FilterConfig, "network": NetworkConfig, "transport": TransportConfig,
               "prediction": PredictionConfig, "shading": ShadingConfig, "trajectory": TrajectoryConfig,
               "remote": RemoteConfig, "output": OutputConfig}

    # Builders for the objects the renderer consumes.

    def build_scene(self) -> Scene:
        if self.scene.soup:
            return load_triangle_soup(self.scene.soup)
        return generate_scene(self.scene.name, self.scene.params)

    def build_camera(self, scene: Optional[Scene] = None) -> Camera:
        base = scene.default_camera if scene is not None else Camera()
        return Camera(base.position, base.orientation, math.radians(self.camera.vertical_fov_deg),
                      (self.camera.width, self.camera.height))

    def animations(self) -> List[MeshAnimation]:
        return [MeshAnimation(int(a["mesh_id"]), tuple(a.get("axis", (0.0, 1.0, 0.0))),
                              tuple(a.get("pivot", (0.0, 0.0, 0.0))), float(a.get("degrees_per_tick", 1.0)))
                for a in self.scene.animations]

    def filter_params(self) -> FilterParams:
        values = asdict(self.filter)
        values.pop("enabled")
        return FilterParams(**values)

    def shading_params(self) -> ShadingParams:
        return ShadingParams(self.shading.ambient, tuple(self.shading.clear_color), self.shading.tau_z)

    def codec(self) -> Codec:
        return get_codec(self.transport.codec)

    def link_config(self, direction: str) -> LinkConfig:
        """LinkConfig for "uplink", "downlink" or "remote" (a copy of the downlink)."""
        section = self.network.downlink if direction == "remote" else getattr(self.network, direction)
        salt = {"uplink": 1, "downlink": 2, "remote": 3}[direction]
        trace = None
        if self.network.trace and direction == self.network.trace_direction:
            trace = tuple(load_latency_trace(self.network.trace))
        return LinkConfig(section.one_way_delay_ms, section.jitter_ms, section.loss_prob, section.bandwidth_bps,
                          seed=self.seed * 1000 + salt, trace=trace, trace_mode=self.network.trace_mode)

    def build_trajectory(self) -> Trajectory:
        t = self.trajectory
        if t.kind == "standard":
            return standard_trajectory(t.ticks, t.tick_rate)
        if t.kind == "static":
            return static_trajectory(t.position, t.target, t.ticks, t.tick_rate)
        return Trajectory.from_dict({"tick_rate": t.tick_rate, "ticks": t.ticks, "keyframes": t.keyframes})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, filepath: str) -> None:
        Path(filepath).write_text(self.to_json(), encoding="utf-8")


def _check_type(value, default, path: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {value!r}")
    return value


def _from_dict(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {data!r}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        prefix = f"{path}." if path else ""
        raise ConfigError(f"{prefix}{unknown[0]}: unknown key")
    nested = getattr(cls, "_NESTED", {})
    values = {}
    for name, f in known.items():
        key_path = f"{path}.{name}" if path else name
        if name in nested:
            values[name] = _from_dict(nested[name], data.get(name, {}), key_path)
            continue
        if name not in data:
            continue
        default = f.default if f.default is not MISSING else f.default_factory()
        values[name] = data[name] if default is None else _check_type(data[name], default, key_path)
    return cls(**values)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _optional_number(value, path: str, positive: bool = True) -> None:
    if value is None:
        return
    _require(isinstance(value, (int, float)) and not isinstance(value, bool), f"{path}: expected a number or null")
    if positive:
        _require(value > 0, f"{path}: must be positive")


def validate(config: Config) -> Config:
    """
    Check every value range and referenced file.

    Raises:
        ConfigError: Naming the first offending key
    """
    _require(config.scene.soup is not None or config.scene.name in SCENE_NAMES,
             f"scene.name: unknown scene '{config.scene.name}' (expected one of {', '.join(SCENE_NAMES)})")
    if config.scene.soup is not None:
        _require(Path(config.scene.soup).is_file(), f"scene.soup: file '{config.scene.soup}' not found")
    for i, anim in enumerate(config.scene.animations):
        _require(isinstance(anim, dict) and "mesh_id" in anim, f"scene.animations[{i}]: needs a mesh_id")

    _require(1 <= config.camera.width <= 0xFFFF, "camera.width: must be in [1, 65535]")
    _require(1 <= config.camera.height <= 0xFFFF, "camera.height: must be in [1, 65535]")
    _require(0 < config.camera.vertical_fov_deg < 180, "camera.vertical_fov_deg: must be in (0, 180)")

    _require(config.shadows.mode in SHADOW_CHOICES,
             f"shadows.mode: must be one of {', '.join(SHADOW_CHOICES)}")
    _require(1 <= config.ao.rays <= 255, "ao.rays: must be in [1, 255]")
    _require(config.ao.radius > 0, "ao.radius: must be positive")
    try:
        config.filter_params()
    except ValueError as e:
        raise ConfigError(f"filter: {e}") from None

    for direction in ("uplink", "downlink"):
        section = getattr(config.network, direction)
        prefix = f"network.{direction}"
        _require(section.one_way_delay_ms >= 0, f"{prefix}.one_way_delay_ms: must be >= 0")
        _require(section.jitter_ms >= 0, f"{prefix}.jitter_ms: must be >= 0")
        _require(0 <= section.loss_prob <= 1, f"{prefix}.loss_prob: must be in [0, 1]")
        _optional_number(section.bandwidth_bps, f"{prefix}.bandwidth_bps")
    _require(config.network.trace_mode in TRACE_MODES,
             f"network.trace_mode: must be one of {', '.join(TRACE_MODES)}")
    _require(config.network.trace_direction in ("uplink", "downlink"),
             "network.trace_direction: must be uplink or downlink")
    if config.network.trace is not None:
        _require(Path(config.network.trace).is_file(), f"network.trace: file '{config.network.trace}' not found")

    _require(config.transport.codec in {c.name for c in CODECS.values()},
             f"transport.codec: must be one of {', '.join(c.name for c in CODECS.values())}")
    _require(config.transport.payload_capacity >= MIN_PAYLOAD_CAPACITY,
             f"transport.payload_capacity: must be >= {MIN_PAYLOAD_CAPACITY}")
    _require(config.transport.expiry_ms > 0, "transport.expiry_ms: must be positive")
    _optional_number(config.transport.max_backlog_ms, "transport.max_backlog_ms")

    try:
        config.shading_params()
    except (ValueError, TypeError) as e:
        raise ConfigError(f"shading: {e}") from None

    _require(config.trajectory.kind in TRAJECTORY_KINDS,
             f"trajectory.kind: must be one of {', '.join(TRAJECTORY_KINDS)}")
    _require(config.trajectory.ticks >= 1, "trajectory.ticks: must be >= 1")
    _require(config.trajectory.tick_rate > 0, "trajectory.tick_rate: must be positive")
    try:
        config.build_trajectory()
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"trajectory: {e}") from None

    _require(config.output.reference_spp >= 1, "output.reference_spp: must be >= 1")
    return config


def parse_config(data: Dict[str, Any]) -> Config:
    """Build and validate a Config from a (possibly partial) nested dict."""
    return validate(_from_dict(Config, data, ""))


def parse_value(text: str) -> Any:
    """Override values parse as JSON, falling back to the bare string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(data: Dict[str, Any], assignment: str) -> Dict[str, Any]:
    """
    Apply one `dotted.path=value` override to a raw config dict in place.

    Raises:
        ConfigError: If the assignment has no '=' or walks through a non-object
    """
    if "=" not in assignment:
        raise ConfigError(f"{assignment}: override must look like dotted.path=value")
    path, text = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = data
    for depth, key in enumerate(keys[:-1]):
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"{'.'.join(keys[:depth + 1])}: not a section")
        node = child
    node[keys[-1]] = parse_value(text)
    return data


def load_config(filepath: Optional[str] = None, overrides: Optional[List[str]] = None) -> Config:
    """
    Read a JSON config file (or start from defaults) and apply overrides.

    Raises:
        FileNotFoundError: If the config file doesn't exist
        ConfigError: For malformed JSON or invalid values
    """
    data: Dict[str, Any] = {}
    if filepath:
        try:
            text = Path(filepath).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise FileNotFoundError(f"Config file '{filepath}' not found.") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{filepath}:{e.lineno}: invalid JSON: {e.msg}") from None
    for assignment in overrides or []:
        apply_override(data, assignment)
    config = parse_config(data)
    logger.debug("loaded config%s with %d overrides", f" from {filepath}" if filepath else "", len(overrides or []))
    return config


def derive(config: Config, changes: Dict[str, Any]) -> Config:
    """A validated copy of `config` with dotted-path keys replaced."""
    data = config.to_dict()
    for path, value in changes.items():
        keys = path.split(".")
        node = data
        for key in keys[:-1]:
            node = node[key]
        node[keys[-1]] = value
    return parse_config(data)
