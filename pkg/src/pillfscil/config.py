"""Run configuration and its sectioned ``key = value`` file format.

Every key is optional; missing keys keep the defaults below. Values may be
bare numbers/booleans or quoted strings, so a flat TOML file with one table
per section parses the same way.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

SWITCHES = ("vcg", "ct", "pfs", "us")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_base_classes: int = 20
    n_sessions: int = 4
    n_way: int = 2
    k_shot: int = 5
    train_per_class: int = 200
    test_per_class: int = 100
    image_size: int = 32
    position_jitter: float = 0.12
    rotation: bool = True
    brightness_jitter: float = 0.12
    noise_std: float = 0.06
    scale_jitter: float = 0.06
    distractor_prob: float = 0.25
    hue_clusters: int = 4
    hue_spread: float = 0.03


@dataclass
class ModelConfig:
    hidden_dims: tuple = (256, 128)
    feature_dim: int = 64
    head_bias: bool = False
    head_init: str = "imprint"  # or "random"


@dataclass
class Stage1Config:
    epochs: int = 100
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 128
    schedule: str = "cosine"  # or "constant"
    ct_weight: float = 0.05
    margin: float = 1.0
    center_rate: float = 0.1
    fold: int = 1


@dataclass
class Stage2Config:
    enabled: bool = True
    epochs: int = 50
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32
    schedule: str = "cosine"
    n_stored: int = 5


@dataclass
class Stage3Config:
    epochs: int = 50
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32
    schedule: str = "cosine"
    kd_weight: float = 0.4
    temperature: float = 3.0
    reverse_kd: bool = False


@dataclass
class PfsConfig:
    n_pseudo: int = 10
    entropy_threshold: float | None = None
    threshold_fraction: float = 0.5
    attempts_per_feature: int = 100
    replay_stored: bool = True


@dataclass
class EvalConfig:
    track: str = "both"
    similarity: str = "cosine"


@dataclass
class RunConfig:
    seed: int = 0
    epoch_scale: float = 1.0
    vcg: bool = True
    ct: bool = True
    pfs: bool = True
    us: bool = True


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    pfs: PfsConfig = field(default_factory=PfsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def epochs(self, stage):
        base = getattr(self, stage).epochs
        return max(1, int(round(base * self.run.epoch_scale)))

    def switches(self):
        return {s: getattr(self.run, s) for s in SWITCHES}

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        cfg = cls()
        for section, values in d.items():
            _apply_section(cfg, section, values)
        cfg.validate()
        return cfg

    def replace(self, **sections):
        """Copy with some keys changed, e.g. ``replace(stage3={"kd_weight": 0})``."""
        cfg = Config.from_dict(self.to_dict())
        for section, values in sections.items():
            _apply_section(cfg, section, values)
        cfg.validate()
        return cfg

    def with_ablation(self, tokens):
        """Copy with the named switches turned off."""
        bad = [t for t in tokens if t not in SWITCHES]
        if bad:
            raise ConfigError(f"unknown ablation token(s) {bad}; expected a subset of {list(SWITCHES)}")
        return self.replace(run={t: False for t in tokens})

    def validate(self):
        s1 = self.stage1
        if s1.ct_weight < 0 or s1.margin < 0:
            raise ConfigError("stage1.ct_weight and stage1.margin must be non-negative")
        if s1.fold not in (0, 1, 2):
            raise ConfigError("stage1.fold must be 0, 1 or 2")
        if not 0 < s1.center_rate <= 1:
            raise ConfigError("stage1.center_rate must lie in (0, 1]")
        if self.stage3.kd_weight < 0 or self.stage3.temperature <= 0:
            raise ConfigError("stage3.kd_weight must be >= 0 and temperature > 0")
        if self.stage2.n_stored < 1 or self.pfs.n_pseudo < 0:
            raise ConfigError("stage2.n_stored must be >= 1 and pfs.n_pseudo >= 0")
        if self.pfs.attempts_per_feature < 1:
            raise ConfigError("pfs.attempts_per_feature must be >= 1")
        d = self.data
        if d.n_base_classes < 2 or d.n_way < 1 or d.k_shot < 1 or d.n_sessions < 0:
            raise ConfigError("data: need >= 2 base classes, n_way >= 1, k_shot >= 1, n_sessions >= 0")
        if d.train_per_class < 2 or d.test_per_class < 1:
            raise ConfigError("data: need >= 2 train and >= 1 test samples per class")
        if not 0 <= self.run.seed < 2**64:
            raise ConfigError("run.seed must be an unsigned 64-bit integer")
        if self.eval.track not in ("softmax", "ncm", "both"):
            raise ConfigError("eval.track must be softmax, ncm or both")
        if self.eval.similarity not in ("cosine", "euclidean"):
            raise ConfigError("eval.similarity must be cosine or euclidean")
        for st in (self.stage1, self.stage2, self.stage3):
            if st.schedule not in ("cosine", "constant"):
                raise ConfigError(f"unknown learning-rate schedule {st.schedule!r}")
            if st.learning_rate < 0 or st.batch_size < 1:
                raise ConfigError("learning rates must be >= 0 and batch sizes >= 1")
        if self.model.head_init not in ("imprint", "random"):
            raise ConfigError("model.head_init must be imprint or random")


def _coerce(current, raw, key):
    if isinstance(raw, str):
        text = raw.strip()
        if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
            text = text[1:-1]
    else:
        text = raw
    try:
        if isinstance(current, bool):
            if isinstance(text, bool):
                return text
            low = str(text).lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("true", "1", "yes", "on")
        if isinstance(current, tuple):
            if isinstance(text, (list, tuple)):
                return tuple(int(v) for v in text)
            body = str(text).strip("[]() ")
            return tuple(int(v) for v in body.split(",") if v.strip())
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if current is None:
            if text is None or str(text).lower() in ("", "none", "auto"):
                return None
            return float(text)
        return str(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value {raw!r} for {key}") from exc


def _apply_section(cfg, section, values):
    if not hasattr(cfg, section):
        raise ConfigError(f"unknown config section [{section}]")
    obj = getattr(cfg, section)
    known = {f.name for f in dataclasses.fields(obj)}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        setattr(obj, key, _coerce(getattr(obj, key), raw, f"{section}.{key}"))


def load_config(path):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return Config.from_dict({s: dict(parser.items(s)) for s in parser.sections()})


def dump_config(cfg, path):
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            if isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, (tuple, list)):
                v = "[" + ", ".join(str(x) for x in v) + "]"
            elif isinstance(v, str):
                v = f'"{v}"'
            elif v is None:
                v = '"auto"'
            lines.append(f"{k} = {v}")
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
