"""Strict JSON run configuration.

A run config has a required ``version``, a global ``seed`` and ``output``
root, and one section per component.  Unknown keys and wrongly typed
values are rejected with the line they appear on.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field

from .fusion import LatentConfig
from .metrics import DbaConfig
from .scene import SceneConfig
from .task import TaskConfig
from .trainer import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line else msg)


@dataclass
class PipelineConfig:
    """Settings of the ablation pipeline."""

    test_fraction: float = 0.2
    fractions: tuple = (1.0, 0.2, 0.05)
    # give every aligned fraction the same number of optimizer updates
    equal_updates: bool = True

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        if not self.fractions or any(not 0 < f <= 1 for f in self.fractions):
            raise ValueError("align fractions must lie in (0, 1]")


SECTIONS = {
    "scene": SceneConfig,
    "latent": LatentConfig,
    "train": TrainConfig,
    "task": TaskConfig,
    "metrics": DbaConfig,
    "pipeline": PipelineConfig,
}
# the global seed feeds every component; per-section seeds are not accepted
SEEDED = {"scene", "train"}


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    output: str = "runs"
    scene: SceneConfig = field(default_factory=SceneConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    metrics: DbaConfig = field(default_factory=DbaConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def to_dict(self):
        out = {"version": self.version, "seed": self.seed, "output": self.output}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            if name in SEEDED:
                d.pop("seed", None)
            out[name] = json.loads(json.dumps(d))
        return out


def _line_of(text, key, start=0):
    m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, start)
    if m is None:
        return None, start
    return text.count("\n", 0, m.start()) + 1, m.start()


def _kind_ok(value, default):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, (tuple, list)):
        return isinstance(value, list)
    if isinstance(default, dict):
        return isinstance(value, dict)
    return True


def _build(cls, name, values, text, pos, seed):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object", _line_of(text, name)[0])
    fields = {f.name: f for f in dataclasses.fields(cls)}
    allowed = set(fields) - ({"seed"} if name in SEEDED else set())
    defaults = cls()
    for key, val in values.items():
        line, _ = _line_of(text, key, pos)
        if key not in allowed:
            hint = " (use the top-level seed)" if key == "seed" else ""
            raise ConfigError(f"unknown key {name}.{key}{hint}", line)
        if not _kind_ok(val, getattr(defaults, key)):
            raise ConfigError(f"{name}.{key}: wrong type {type(val).__name__}", line)
    kwargs = dict(values)
    if name in SEEDED:
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {name!r}: {exc}", _line_of(text, name)[0]) from exc


def parse_config(text):
    """Parse and validate a RunConfig from JSON text."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg}", exc.lineno) from exc
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object", 1)
    if "version" not in raw:
        raise ConfigError("missing required key 'version'", 1)
    top = {"version", "seed", "output"} | set(SECTIONS)
    for key in raw:
        if key not in top:
            raise ConfigError(f"unknown key {key!r}", _line_of(text, key)[0])
    if raw["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {raw['version']!r}",
                          _line_of(text, "version")[0])
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer", _line_of(text, "seed")[0])
    output = raw.get("output", "runs")
    if not isinstance(output, str):
        raise ConfigError("output must be a string", _line_of(text, "output")[0])
    sections = {}
    for name, cls in SECTIONS.items():
        _, pos = _line_of(text, name)
        sections[name] = _build(cls, name, raw.get(name, {}), text, pos, seed)
    return RunConfig(CONFIG_VERSION, seed, output, **sections)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def default_config(seed=0, output="runs"):
    return RunConfig(seed=seed, output=output, scene=SceneConfig(seed=seed),
                     train=TrainConfig(seed=seed))


def dump_config(cfg):
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
