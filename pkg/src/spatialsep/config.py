"""Run configuration and the shipped presets.

A run config is a single JSON document::

    {"features": {...}, "encoder": {...}, "separator": {...}, "training": {...}}

Any missing key falls back to the dataclass default. Presets live in
``spatialsep/presets/*.json``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

from .errors import ConfigError
from .features import FEATURE_CONFIGS, W2_MODES, PairSpec


@dataclass
class EncoderConfig:
    num_filters: int = 256
    window_len: int = 40
    stride: int = 20

    def validate(self):
        if self.num_filters < 1 or self.window_len < 1 or not 1 <= self.stride <= self.window_len:
            raise ConfigError(f"invalid encoder config {self}")


@dataclass
class SeparatorConfig:
    bottleneck: int = 32        # B
    hidden: int = 64            # H
    kernel_size: int = 3        # P
    blocks: int = 4             # X
    repeats: int = 2            # R
    speakers: int = 2           # S
    mask: str = "sigmoid"

    def validate(self):
        if min(self.bottleneck, self.hidden, self.blocks, self.repeats) < 1:
            raise ConfigError(f"invalid separator config {self}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("separator kernel size must be odd")
        if self.speakers != 2:
            raise ConfigError("only two-speaker separation is supported")
        if self.mask != "sigmoid":
            raise ConfigError(f"unsupported mask nonlinearity {self.mask!r}")

    def receptive_field(self) -> int:
        """Receptive field of the dilated stack, in encoder frames."""
        per_repeat = sum((self.kernel_size - 1) * 2 ** x for x in range(self.blocks))
        return 1 + self.repeats * per_repeat


@dataclass
class FeatureConfig:
    kind: str = "encoder"                 # encoder | ipd | mcs | icd | icd_ipd
    channels: int = 6
    icd_filters: int = 33
    w2_mode: str = "init. -1"
    mcs_filters: int = 256
    pairs: list = field(default_factory=lambda: [
        {"dilation": 3, "stride": 1, "channels": 6},
        {"dilation": 1, "stride": 2, "channels": 6},
    ])
    n_fft: int = 64

    def validate(self):
        if self.kind not in FEATURE_CONFIGS:
            raise ConfigError(f"unknown feature config {self.kind!r}; expected one of {FEATURE_CONFIGS}")
        if self.w2_mode not in W2_MODES:
            raise ConfigError(f"unknown w2 mode {self.w2_mode!r}; expected one of {W2_MODES}")
        for spec in self.pair_specs():
            spec.pairs  # raises on out-of-range pairs

    def pair_specs(self) -> list[PairSpec]:
        return [PairSpec.from_dict(p) for p in self.pairs]

    @property
    def uses_ipd(self) -> bool:
        return self.kind in ("ipd", "icd_ipd")

    @property
    def uses_icd(self) -> bool:
        return self.kind in ("icd", "icd_ipd")

    @property
    def uses_mcs(self) -> bool:
        return self.kind == "mcs"


@dataclass
class TrainingConfig:
    chunk_seconds: float = 4.0
    batch_size: int = 32
    steps: int = 20000
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 1000
    plateau_patience: int = 3
    sample_rate: int = 16000


@dataclass
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    name: str = "custom"

    def validate(self) -> "RunConfig":
        self.features.validate()
        self.encoder.validate()
        self.separator.validate()
        if self.training.batch_size < 1 or self.training.chunk_seconds <= 0:
            raise ConfigError("batch size and chunk length must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        def build(klass, sub):
            sub = dict(sub or {})
            known = {f.name for f in fields(klass)}
            unknown = set(sub) - known
            if unknown:
                raise ConfigError(f"unknown {klass.__name__} keys: {sorted(unknown)}")
            return klass(**sub)

        unknown = set(d) - {"features", "encoder", "separator", "training", "name"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(
            features=build(FeatureConfig, d.get("features")),
            encoder=build(EncoderConfig, d.get("encoder")),
            separator=build(SeparatorConfig, d.get("separator")),
            training=build(TrainingConfig, d.get("training")),
            name=d.get("name", "custom"),
        )
        return cfg.validate()


PRESET_NAMES = ("encoder", "ipd", "mcs_256", "icd_fix_256", "icd_init_256", "icd_rand_256",
                "icd_fix_33", "icd_init_33", "icd_rand_33", "icd_plus_ipd")


def load_preset(name: str) -> RunConfig:
    try:
        text = resources.files("spatialsep").joinpath("presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}") from None
    return RunConfig.from_dict(json.loads(text))


def load_config(path_or_preset: str) -> RunConfig:
    """Load a JSON config file, or a preset when the argument names one."""
    if path_or_preset in PRESET_NAMES:
        return load_preset(path_or_preset)
    try:
        with open(path_or_preset) as fh:
            return RunConfig.from_dict(json.load(fh))
    except FileNotFoundError:
        raise ConfigError(f"config {path_or_preset!r} is neither a file nor a preset") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path_or_preset!r} is not valid JSON: {exc}") from None
