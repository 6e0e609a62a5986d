"""Flat ``key = value`` run configuration shared by every CLI command.

One file covers the model, the token-optimisation hyper-parameters, CAM
thresholding, the synthetic scenes, training and the output directory.
Unknown keys are rejected and every section is re-validated on load.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .cam import CamConfig
from .doei import ConfigError, DoeiConfig
from .encoder import ModelConfig
from .scenes import SceneSpec, default_classes, default_rules
from .train import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    objects_min: int = 1
    objects_max: int = 3
    cooccurrence: float = 0.8
    noise_std: float = 0.03
    data_seed: int = 1
    train_count: int = 500
    eval_count: int = 100
    eval_start: int = 100000  # eval samples use indices disjoint from training


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    doei: DoeiConfig = field(default_factory=lambda: DoeiConfig(active_layers=frozenset(range(1, ModelConfig().depth + 1))))
    cam: CamConfig = field(default_factory=CamConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "out"

    def scene_spec(self) -> SceneSpec:
        c = self.model.num_classes
        return SceneSpec(
            canvas=self.model.image_size,
            classes=default_classes(c),
            objects_min=self.data.objects_min,
            objects_max=self.data.objects_max,
            cooccurrence_rules=default_rules(c, self.data.cooccurrence),
            noise_std=self.data.noise_std,
            seed=self.data.data_seed,
        )

    def validate(self) -> "RunConfig":
        try:
            self.model.validate()
            self.doei.validate(self.model.depth)
            self.cam.validate()
            self.train.validate()
            self.scene_spec().validate(self.model.num_classes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        d = self.data
        if d.train_count < 1 or d.eval_count < 1:
            raise ConfigError("train_count and eval_count must be >= 1")
        if d.eval_start < d.train_count:
            raise ConfigError("eval_start must not overlap the training indices")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        return self


# key -> (section, field). Section names double as the dataclass attributes above.
_SECTIONS = {"model": ModelConfig, "doei": DoeiConfig, "cam": CamConfig, "data": DataConfig, "train": TrainConfig}
_ALIASES = {"model.seed": "seed", "train.seed": None}  # one seed drives init and shuffling
_KEYS: dict[str, tuple[str, str]] = {}
for _sec, _cls in _SECTIONS.items():
    for _f in fields(_cls):
        key = _ALIASES.get(f"{_sec}.{_f.name}", _f.name)
        if key is not None:
            _KEYS[key] = (_sec, _f.name)


def known_keys() -> list[str]:
    return sorted([*_KEYS, "seeds", "out_dir"])


def _field_type(section: str, name: str):
    for f in fields(_SECTIONS[section]):
        if f.name == name:
            return f.type
    raise KeyError(name)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def _convert(key: str, text: str, depth: int):
    if key == "seeds":
        return tuple(_parse_ints(text))
    if key == "out_dir":
        return text
    section, name = _KEYS[key]
    if name == "active_layers":
        low = text.lower()
        if low == "all":
            return frozenset(range(1, depth + 1))
        if low in ("none", ""):
            return frozenset()
        return frozenset(_parse_ints(text))
    ftype = str(_field_type(section, name))
    if "bool" in ftype:
        return _parse_bool(text)
    if "None" in ftype and text.lower() == "none":
        return None
    if "float" in ftype:
        return float(text)
    if "int" in ftype:
        return int(text)
    return text


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse config text on top of ``base`` (defaults when omitted)."""
    pairs: list[tuple[int, str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS and key not in ("seeds", "out_dir"):
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        pairs.append((lineno, key, value))
    return apply(base or RunConfig(), [(k, v) for _, k, v in pairs])


def apply(cfg: RunConfig, pairs) -> RunConfig:
    """Override keys (as strings) and re-validate."""
    pairs = list(pairs)
    # depth first so "active_layers = all" expands against the final depth
    depth = cfg.model.depth
    for key, value in pairs:
        if key == "depth":
            depth = int(value)
    updates: dict[str, dict] = {s: {} for s in _SECTIONS}
    top: dict = {}
    for key, value in pairs:
        if key not in _KEYS and key not in ("seeds", "out_dir"):
            raise ConfigError(f"unknown key {key!r}")
        try:
            converted = _convert(key, value, depth)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        if key in ("seeds", "out_dir"):
            top[key] = converted
        else:
            section, name = _KEYS[key]
            updates[section][name] = converted
    # a config that ran DOEI at every layer keeps doing so when only depth changes
    full_before = cfg.doei.active_layers == frozenset(range(1, cfg.model.depth + 1))
    if depth != cfg.model.depth and "active_layers" not in updates["doei"] and full_before:
        updates["doei"]["active_layers"] = frozenset(range(1, depth + 1))
    kw = {s: replace(getattr(cfg, s), **u) for s, u in updates.items() if u}
    if "seed" in updates["model"]:
        kw["train"] = replace(kw.get("train", cfg.train), seed=updates["model"]["seed"])
    return replace(cfg, **kw, **top).validate()


def load(path) -> RunConfig:
    with open(path) as fh:
        return parse(fh.read())


def dump(cfg: RunConfig) -> str:
    """Canonical text form; ``parse(dump(c)) == c``."""
    lines = []
    for key in sorted(_KEYS):
        section, name = _KEYS[key]
        value = getattr(getattr(cfg, section), name)
        if isinstance(value, frozenset):
            value = ",".join(str(i) for i in sorted(value)) or "none"
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    lines.append(f"seeds = {','.join(str(s) for s in cfg.seeds)}")
    lines.append(f"out_dir = {cfg.out_dir}")
    return "\n".join(lines) + "\n"
