from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from ..errors import ConfigError

MODALITIES = ("location", "velocity", "state", "ego")
MODALITY_DIMS = {"location": 4, "velocity": 4, "state": 2, "ego": 5}


@dataclass(frozen=True)
class ModelConfig:
    obs_len: int = 15
    pred_len: int = 45
    embed_dim: int = 64
    model_dim: int = 128
    heads: int = 2
    cvae_hidden: tuple[int, ...] = (256, 128)
    latent_dim: int = 32
    k_samples: int = 20
    train_samples: int = 20
    alpha: float = 10.0
    beta: float = 2.0
    gamma: float = 0.1
    use_hsf: bool = True
    use_sft: bool = True
    use_rot: bool = True
    use_poft: bool = False
    deterministic: bool = False
    enc_layers: int = 1
    dec_layers: int = 1
    ff_mult: int = 2
    modality_order: tuple[str, ...] = MODALITIES
    logvar_clamp: float = 10.0
    ratio: float = 0.34
    edge_eps: float = 1.0
    lr: float = 4e-4
    epochs: int = 100
    batch_size: int = 128
    max_steps: int | None = None
    seed: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.model_dim % self.heads or self.embed_dim % self.heads:
            raise ConfigError("embed_dim and model_dim must be divisible by heads")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.use_rot and self.use_poft:
            raise ConfigError("use_rot and use_poft are mutually exclusive")
        if len(self.modality_order) < 2:
            raise ConfigError("at least two modalities are required")
        unknown = set(self.modality_order) - set(MODALITY_DIMS)
        if unknown:
            raise ConfigError(f"unknown modalities {sorted(unknown)}")
        if self.k_samples < 1 or self.train_samples < 1:
            raise ConfigError("sample counts must be >= 1")

    def replace(self, **kwargs) -> "ModelConfig":
        if kwargs.get("use_poft") and "use_rot" not in kwargs:
            kwargs["use_rot"] = False
        if kwargs.get("use_rot") and "use_poft" not in kwargs:
            kwargs["use_poft"] = False
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("extra")
        d["cvae_hidden"] = list(self.cvae_hidden)
        d["modality_order"] = list(self.modality_order)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)} - {"extra"}
        kwargs = {k: v for k, v in d.items() if k in known}
        for key in ("cvae_hidden", "modality_order"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    @classmethod
    def tiny(cls, **kwargs) -> "ModelConfig":
        """Desk-scale dimensions used by tests and the learnability checks."""
        base = dict(
            embed_dim=8,
            model_dim=16,
            cvae_hidden=(16, 8),
            latent_dim=4,
            k_samples=5,
            train_samples=3,
            lr=3e-3,
            batch_size=32,
        )
        return cls(**base).replace(**kwargs)


# ablation configurations: name -> flag overrides
ABLATIONS = {
    "none": dict(use_hsf=False, use_sft=False, use_rot=False, use_poft=False),
    "HSF": dict(use_hsf=True, use_sft=False, use_rot=False, use_poft=False),
    "HSF+sFT": dict(use_hsf=True, use_sft=True, use_rot=False, use_poft=False),
    "HSF+sFT+POFT": dict(use_hsf=True, use_sft=True, use_rot=False, use_poft=True),
    "HSF+sFT+ROT": dict(use_hsf=True, use_sft=True, use_rot=True, use_poft=False),
}
