"""Pipeline configuration: dataclass schema plus a flat ``key = value`` text
format with dotted section prefixes.

Values are JSON (numbers, booleans, null, strings, lists, objects); anything
that does not parse as JSON is taken as a bare string. ``#`` starts a comment.
Unknown keys are rejected. A JSON object (for example an output manifest,
whose ``config`` entry is used) is accepted as well.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .dnr import DnrConfig
from .infotheory import MiConfig
from .scene import SceneSpec
from .train import LossWeights, TrainConfig

EDIT_OPS = ("remove", "rotate", "translate", "scale", "shear")
STAGES = ("scene", "edit", "dnr", "train")


class ConfigError(ValueError):
    pass


@dataclass
class RenderOptions:
    samples_per_ray: int = 64
    max_neighbors: int = 8
    r_agg: Optional[float] = None  # None: taken from the scene
    background: tuple = (0.0, 0.0, 0.0)
    jitter: bool = False
    jitter_seed: int = 0
    chunk_rays: int = 1024


@dataclass
class SegmentOptions:
    cameras: Optional[list] = None  # None: every camera
    mask_dir: Optional[str] = None  # None: the scene's own masks
    radius: Optional[float] = None


@dataclass
class EvalOptions:
    stage: str = "train"  # which stage's cloud render/metrics/mi read, or a .npc path


@dataclass
class EditSpec:
    op: str = "remove"
    mask: str = "segment"  # "segment" or a path to a MSK3 file
    axis: tuple = (0.0, 1.0, 0.0)
    degrees: float = 0.0
    pivot: tuple = (0.0, 0.0, 0.0)
    vector: tuple = (0.0, 0.0, 0.0)
    factors: tuple = (1.0, 1.0, 1.0)
    matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def __post_init__(self):
        if self.op not in EDIT_OPS:
            raise ConfigError(f"edit op must be one of {EDIT_OPS}, got {self.op!r}")


# section name -> (dataclass, fields not exposed because `seed` drives them)
SECTIONS = {
    "scene": (SceneSpec, {"seed"}),
    "segment": (SegmentOptions, set()),
    "dnr": (DnrConfig, set()),
    "render": (RenderOptions, set()),
    "train": (TrainConfig, {"seed"}),
    "loss": (LossWeights, set()),
    "mi": (MiConfig, {"seed"}),
    "eval": (EvalOptions, set()),
}
TOP_LEVEL = ("seed", "out", "edits")


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "run"
    scene: SceneSpec = field(default_factory=SceneSpec)
    segment: SegmentOptions = field(default_factory=SegmentOptions)
    edits: list = field(default_factory=lambda: [EditSpec()])
    dnr: DnrConfig = field(default_factory=DnrConfig)
    render: RenderOptions = field(default_factory=RenderOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    mi: MiConfig = field(default_factory=MiConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def to_flat(self) -> dict:
        flat = {"seed": self.seed, "out": self.out, "edits": [dataclasses.asdict(e) for e in self.edits]}
        for name, (_, hidden) in SECTIONS.items():
            _flatten(getattr(self, name), name, hidden, flat)
        return _jsonable(flat)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _flatten(obj, prefix, hidden, out):
    for f in dataclasses.fields(obj):
        if f.name in hidden:
            continue
        v = getattr(obj, f.name)
        key = f"{prefix}.{f.name}"
        if dataclasses.is_dataclass(v):
            _flatten(v, key, set(), out)
        else:
            out[key] = v


def schema() -> dict:
    """Every accepted key with its default value."""
    return PipelineConfig().to_flat()


def _coerce(value, default):
    """Match container types of the default (JSON lists -> tuples)."""
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(_coerce(v, default[0] if default else None) for v in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _build(cls, prefix, hidden, flat, used):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in hidden:
            continue
        key = f"{prefix}.{f.name}"
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), key, set(), flat, used)
        elif key in flat:
            used.add(key)
            kwargs[f.name] = _coerce(flat[key], default)
    return cls(**kwargs)


def from_flat(flat: dict) -> PipelineConfig:
    allowed = set(schema())
    unknown = sorted(set(flat) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    used = set()
    try:
        seed = int(flat.get("seed", 0))
        sections = {name: _build(cls, name, hidden, flat, used) for name, (cls, hidden) in SECTIONS.items()}
        sections["scene"].seed = seed
        sections["train"].seed = seed
        sections["mi"].seed = seed
        sections["scene"].validate()
        sections["train"].__post_init__()
        edits_raw = flat.get("edits", [dataclasses.asdict(EditSpec())])
        if not isinstance(edits_raw, list):
            raise ConfigError("edits must be a list of objects")
        edits = [_edit(e) for e in edits_raw]
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if any(e.op == "remove" for e in edits[:-1]):
        raise ConfigError("a remove edit must be the last edit")
    if sections["eval"].stage not in STAGES and not sections["eval"].stage.endswith(".npc"):
        raise ConfigError(f"eval.stage must be one of {STAGES} or a .npc path")
    return PipelineConfig(seed=seed, out=str(flat.get("out", "run")), edits=edits, **sections)


def _edit(raw) -> EditSpec:
    if not isinstance(raw, dict):
        raise ConfigError("each edit must be an object")
    names = {f.name: f for f in dataclasses.fields(EditSpec)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"unknown edit key(s): {', '.join(unknown)}")
    defaults = EditSpec()
    return EditSpec(**{k: _coerce(v, getattr(defaults, k)) for k, v in raw.items()})


def parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_text(text: str) -> dict:
    flat = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        flat[key] = parse_value(_strip_comment(value))
    return flat


def _strip_comment(value: str) -> str:
    # a '#' outside a JSON string starts a trailing comment
    in_str = False
    for i, ch in enumerate(value):
        if ch == '"' and (i == 0 or value[i - 1] != "\\"):
            in_str = not in_str
        elif ch == "#" and not in_str:
            return value[:i]
    return value


def _flatten_json(obj, prefix="", out=None) -> dict:
    out = {} if out is None else out
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key not in ("edits",):
            _flatten_json(v, key + ".", out)
        else:
            out[key] = v
    return out


def load(path, overrides=()) -> PipelineConfig:
    """Read a config file (text or JSON) and apply ``key=value`` overrides."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if text.lstrip().startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if "config" in obj and isinstance(obj["config"], dict):
            obj = obj["config"]
        flat = _flatten_json(obj)
    else:
        flat = parse_text(text)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must look like key=value")
        k, v = ov.split("=", 1)
        flat[k.strip()] = parse_value(v)
    return from_flat(flat)


def dump_text(cfg: PipelineConfig) -> str:
    lines = []
    for k, v in cfg.to_flat().items():
        lines.append(f"{k} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"
