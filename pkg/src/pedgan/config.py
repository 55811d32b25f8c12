"""Model profiles and training configuration."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import InputError


@dataclass(frozen=True)
class ModelConfig:
    base_res: int = 64          # resolution of the first stage
    stages: int = 3             # m
    gf: int = 32                # generator hidden channels
    df: int = 64                # first discriminator encoder width
    word_dim: int = 256         # N_w
    sent_dim: int = 256         # raw sentence dimension
    region_dim: int = 512       # N_r
    cond_dim: int = 100         # augmented N_s
    z_dim: int = 100
    max_len: int = 30           # T
    emb_dim: int = 300
    match_res: int = 128        # input size of the matching image encoder
    match_grid: int = 8

    def __post_init__(self):
        if self.stages < 1:
            raise InputError("stages must be >= 1")
        if self.base_res < 8 or self.base_res & (self.base_res - 1):
            raise InputError(f"base_res must be a power of two >= 8, got {self.base_res}")
        if self.word_dim % 2:
            raise InputError("word_dim must be even (bidirectional encoder)")

    @property
    def resolutions(self) -> list[int]:
        return [self.base_res * 2 ** i for i in range(self.stages)]

    @property
    def final_res(self) -> int:
        return self.resolutions[-1]


PROFILES = {
    "paper": ModelConfig(),
    "tiny": ModelConfig(
        base_res=8, gf=16, df=16, word_dim=32, sent_dim=32, region_dim=32,
        emb_dim=32, max_len=20, match_res=32, match_grid=4,
    ),
}


def model_config(profile: str) -> ModelConfig:
    try:
        return PROFILES[profile]
    except KeyError:
        raise InputError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}") from None


@dataclass
class AblationFlags:
    use_hpd: bool = True
    use_visa: bool = True    # discriminator-side word attention only
    use_sca: bool = True

    @classmethod
    def from_names(cls, names) -> "AblationFlags":
        flags = cls()
        for name in names:
            if name == "no-hpd":
                flags.use_hpd = False
            elif name == "no-visa":
                flags.use_visa = False
            elif name == "no-sca":
                flags.use_sca = False
            else:
                raise InputError(f"unknown ablation {name!r}")
        return flags

    def label(self) -> str:
        if not self.use_hpd:
            return "BL+SCA" if self.use_sca else "BL"
        parts = ["BL", "HPD"]
        if self.use_visa:
            parts.append("VISA")
        if self.use_sca:
            parts.append("SCA")
        return "+".join(parts)


# Fields that only control run length / IO; excluded from the config hash.
_UNHASHED = ("steps", "dataset", "log_every", "checkpoint_every")


@dataclass
class TrainConfig:
    profile: str = "tiny"
    seed: int = 0
    batch_size: int = 16
    steps: int = 1000
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    lambda_cond: float = 1.0
    lambda_damsm: float = 5.0
    matching_steps: int = 200     # encoder pre-training budget
    matching_lr: float = 1e-3
    ablation: AblationFlags = field(default_factory=AblationFlags)
    dataset: str | None = None
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AblationFlags(**self.ablation)
        self.betas = tuple(self.betas)
        model_config(self.profile)
        if self.batch_size < 2:
            raise InputError("batch_size must be >= 2")
        if self.steps < 0 or self.matching_steps < 0:
            raise InputError("step counts must be non-negative")

    @property
    def model(self) -> ModelConfig:
        return model_config(self.profile)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> TrainConfig:
    """Read a JSON or YAML config file into a TrainConfig."""
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        if str(path).endswith((".yaml", ".yml")):
            import yaml
            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
    except Exception as exc:
        raise InputError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InputError(f"config {path} must be a mapping")
    try:
        return TrainConfig.from_dict(data)
    except TypeError as exc:
        raise InputError(f"invalid config {path}: {exc}") from exc
