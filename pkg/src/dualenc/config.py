"""Run configuration as flat ``dotted.key=value`` lines.

Precedence when resolving a run: command-line flags, then the config file, then
the defaults below.
"""

import dataclasses
from dataclasses import dataclass, field

from .datapipe import PRESET_SECONDS, AugmentParams, seconds_to_frames
from .encoders import DEFAULT_CHUNK_FRAMES, DEFAULT_EMBED_DIM, EncoderConfig
from .errors import ConfigError
from .optim import AdamConfig


@dataclass
class ModelSection:
    embed_dim: int = DEFAULT_EMBED_DIM
    precision: str = "float32"
    scoring: str = "dot"        # cosine L2-normalizes both towers' outputs
    temperature: float = 1.0


@dataclass
class ReplicaSection:
    n_replicas: int = 32
    per_replica: int = 32

    @property
    def global_batch(self):
        return self.n_replicas * self.per_replica


@dataclass
class DataSection:
    manifest: str = ""
    preset: str = "facc"
    target_frames: int = 0      # 0: derive from preset
    chunk_window: int = DEFAULT_CHUNK_FRAMES
    crop_mode: str = "head"
    eval_split: str = "dev"


@dataclass
class SyntheticSection:
    out_dir: str = "synthetic"
    n_pairs: int = 256
    dev_pairs: int = 64
    test_pairs: int = 0
    latent_dim: int = 16
    speech_T: int = 64
    speech_D: int = 32
    image_D: int = 32
    noise_sigma: float = 0.1


def _image_default():
    return EncoderConfig(kind="projection-only", widths=[], kernels=[], strides=[],
                         input_dim=1792)


@dataclass
class TrainConfig:
    seed: int = 0
    max_steps: int = 1000
    eval_interval: int = 100
    checkpoint_dir: str = ""
    k_list: list = field(default_factory=lambda: [1, 5, 10])
    optim: AdamConfig = field(default_factory=AdamConfig)
    replicas: ReplicaSection = field(default_factory=ReplicaSection)
    model: ModelSection = field(default_factory=ModelSection)
    speech: EncoderConfig = field(default_factory=EncoderConfig)
    image: EncoderConfig = field(default_factory=_image_default)
    data: DataSection = field(default_factory=DataSection)
    augment: AugmentParams = field(default_factory=AugmentParams)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)

    @property
    def target_frames(self):
        if self.data.target_frames > 0:
            return self.data.target_frames
        try:
            return seconds_to_frames(PRESET_SECONDS[self.data.preset])
        except KeyError:
            raise ConfigError(f"unknown dataset preset {self.data.preset!r}; "
                              f"choose from {sorted(PRESET_SECONDS)}") from None

    @property
    def chunk_window(self):
        """Chunk window to apply, or None when utterances fit the tower input."""
        return self.data.chunk_window if self.target_frames > self.data.chunk_window else None

    def speech_config(self):
        return dataclasses.replace(self.speech, embed_dim=self.model.embed_dim).validate()

    def image_config(self):
        return dataclasses.replace(self.image, embed_dim=self.model.embed_dim).validate()

    def validate(self):
        self.speech_config()
        self.image_config()
        if self.max_steps < 0 or self.eval_interval < 1:
            raise ConfigError("max_steps must be >= 0 and eval_interval >= 1")
        if self.replicas.n_replicas < 1 or self.replicas.per_replica < 1:
            raise ConfigError("replica counts must be positive")
        if self.model.scoring not in ("dot", "cosine"):
            raise ConfigError(f"model.scoring must be dot or cosine, got {self.model.scoring!r}")
        if self.model.precision not in ("float32", "float64"):
            raise ConfigError(f"model.precision must be float32 or float64")
        _ = self.target_frames
        return self


# -- flat key=value serialization -------------------------------------------------

def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_flat(obj, prefix=""):
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(to_flat(value, key + "."))
        else:
            out[key] = _format(value)
    return out


def _parse(text, like, key):
    try:
        if isinstance(like, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return low in ("true", "1")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, (list, tuple)):
            parts = [p for p in text.split(",") if p.strip()]
            elem = like[0] if like else 0
            values = [_parse(p, elem, key) for p in parts]
            return tuple(values) if isinstance(like, tuple) else values
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {key}={text!r} as {type(like).__name__}") from None


def _set(obj, parts, text, key):
    name = parts[0]
    if not any(f.name == name for f in dataclasses.fields(obj)):
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, name)
    if len(parts) > 1:
        if not dataclasses.is_dataclass(current):
            raise ConfigError(f"unknown config key {key!r}")
        return dataclasses.replace(obj, **{name: _set(current, parts[1:], text, key)})
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{key!r} names a section, not a value")
    return dataclasses.replace(obj, **{name: _parse(text, current, key)})


def apply_overrides(config, overrides):
    for key, text in overrides.items():
        config = _set(config, key.split("."), str(text), key)
    return config


def parse_lines(text, source="<config>"):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path, base=None):
    with open(path, encoding="utf-8") as f:
        return apply_overrides(base or TrainConfig(), parse_lines(f.read(), path))


def dump_config(config):
    return "".join(f"{k}={v}\n" for k, v in to_flat(config).items())


def save_config(path, config):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dump_config(config))
