"""Run configuration: a strict schema over YAML (or JSON) text.

Every section maps onto a frozen dataclass. Unknown keys, wrong types and
out-of-range values raise ``ConfigError`` naming the offending field and,
when the value came from a file, its line.
"""

import dataclasses
import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .env import EnvConfig, PhysicsConfig
from .exceptions import ConfigError, DimensionMismatch
from .oracle import OracleKind
from .ppo import PpoConfig
from .terrain import ModeParamRanges

SWEEP_AXES = ("rho", "oracle", "horizon", "obs_mask")
# type prototypes for fields without defaults
REQUIRED_PROTOTYPES = {"seeds": (), "output_dir": ""}


@dataclass(frozen=True)
class TrackConfig:
    episode_limit: int = 400
    track_length: float = 10.0
    obstacle_density: float = 0.2
    obstacle_kinds: tuple = ("block", "gap")
    min_flat: float = 1.0
    start_flat: float = 1.0
    frame_stack: int = 4
    scan_points: int = 10
    scan_span: float = 1.5

    def __post_init__(self):
        unknown = set(self.obstacle_kinds) - {"block", "gap"}
        if unknown or not self.obstacle_kinds:
            raise ValueError("obstacle_kinds must be a non-empty subset of {block, gap}")


@dataclass(frozen=True)
class EncoderConfig:
    enabled: bool = True
    n_per_mode: int = 1000
    hidden: int = 32
    epochs: int = 200
    lr: float = 3e-3
    batch_size: int = 64
    holdout: float = 0.2

    def __post_init__(self):
        if self.n_per_mode < 2 or self.epochs < 0 or self.hidden < 1 or self.batch_size < 1:
            raise ValueError("encoder sizes must be positive (n_per_mode >= 2)")
        if not 0 <= self.holdout < 1:
            raise ValueError("holdout must lie in [0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 100
    deterministic: bool = True

    def __post_init__(self):
        if self.n_episodes < 0:
            raise ValueError("n_episodes must be >= 0")


@dataclass(frozen=True)
class SweepConfig:
    axis: str = "rho"
    values: tuple = (0.05, 0.1, 0.3, 0.5, 0.8, 1e10)
    workers: int = 1

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ValueError(f"axis must be one of {SWEEP_AXES}")
        if not self.values:
            raise ValueError("values must be non-empty")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class GridConfig:
    kinds: tuple = ("block", "gap")
    n_width: int = 5
    n_size: int = 5
    episodes_per_cell: int = 4
    speed: float = 0.55

    def __post_init__(self):
        if self.n_width < 1 or self.n_size < 1 or self.episodes_per_cell < 1:
            raise ValueError("grid sizes must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple
    output_dir: str
    name: str = "run"
    rho: float = 0.5
    W: tuple = (1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    horizon: int = 30
    obs_mask: tuple = ("z", "c", "h")
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    ranges: ModeParamRanges = field(default_factory=ModeParamRanges)
    oracle: OracleKind = field(default_factory=OracleKind)
    track: TrackConfig = field(default_factory=TrackConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must list at least one seed")
        self.env_config()  # range checks live on EnvConfig

    def env_config(self, **overrides):
        t = self.track
        kw = dict(
            physics=self.physics, ranges=self.ranges, oracle=self.oracle, rho=self.rho,
            W=self.W, horizon=self.horizon, obs_mask=self.obs_mask,
            episode_limit=t.episode_limit, track_length=t.track_length,
            obstacle_density=t.obstacle_density, obstacle_kinds=t.obstacle_kinds,
            min_flat=t.min_flat, start_flat=t.start_flat, frame_stack=t.frame_stack,
            scan_points=t.scan_points, scan_span=t.scan_span,
        )
        kw.update(overrides)
        return EnvConfig(**kw)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# -- parsing -------------------------------------------------------------------

class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent-only floats such as ``1e-3``."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?|\.[0-9_]+)[eE][-+]?[0-9]+$"),
    list("-+0123456789."),
)


def _line_map(text):
    """Key path -> 1-based line of its value, from the YAML node tree."""
    lines = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                p = f"{path}.{key.value}" if path else str(key.value)
                lines[p] = key.start_mark.line + 1
                walk(value, p)

    try:
        walk(yaml.compose(text, Loader=_Loader), "")
    except yaml.YAMLError:
        pass
    return lines


def _check_type(value, default, path, line):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"expected {type(default).__name__}, got {type(value).__name__}", path, line)
    if isinstance(default, float):
        return float(value)
    if isinstance(value, list):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _build(cls, data, path, lines):
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", path or None, lines.get(path))
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            p = f"{path}.{key}" if path else str(key)
            raise ConfigError("unknown field", p, lines.get(p))
    kwargs = {}
    for name, f in known.items():
        p = f"{path}.{name}" if path else name
        if name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError("missing required field", p, None)
            continue
        value = data[name]
        if f.default_factory is not dataclasses.MISSING and dataclasses.is_dataclass(f.default_factory):
            kwargs[name] = _build(f.default_factory, value, p, lines)
            continue
        if f.default is not dataclasses.MISSING:
            default = f.default
        else:
            default = REQUIRED_PROTOTYPES.get(name)
        if value is None or default is None:
            # untyped slots (oracle weights left to per-kind defaults)
            kwargs[name] = tuple(value) if isinstance(value, list) else value
        else:
            kwargs[name] = _check_type(value, default, p, lines.get(p))
    try:
        return cls(**kwargs)
    except (ValueError, TypeError, DimensionMismatch) as exc:
        msg = str(exc)
        culprit = next((n for n in known if msg.startswith(n + " ") or msg.startswith(n + ",")), None)
        if culprit is not None:
            p = f"{path}.{culprit}" if path else culprit
            raise ConfigError(msg, p, lines.get(p)) from exc
        raise ConfigError(msg, path or None, lines.get(path)) from exc


def parse_config(text):
    """RunConfig from YAML or JSON text."""
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"unparseable config: {exc}", None, mark.line + 1 if mark else None) from exc
    if data is None:
        data = {}
    cfg = _build(RunConfig, data, "", _line_map(text))
    if any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in cfg.seeds):
        raise ConfigError("seeds must be non-negative integers", "seeds", _line_map(text).get("seeds"))
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", None, None) from exc
    return parse_config(text)


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def resolved_dict(cfg):
    """Every field with its effective value, defaults included."""
    return _plain(cfg)


def dump_resolved(cfg):
    return json.dumps(resolved_dict(cfg), indent=2, sort_keys=True) + "\n"


def schema():
    """Published schema: section -> field -> default."""
    out = {}
    for f in fields(RunConfig):
        if f.default_factory is not dataclasses.MISSING:
            out[f.name] = _plain(f.default_factory())
        elif f.default is dataclasses.MISSING:
            out[f.name] = "<required>"
        else:
            out[f.name] = _plain(f.default)
    return out
