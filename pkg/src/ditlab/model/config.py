"""Model configuration: the size table, block variants, and config files."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Union

from ditlab.errors import ConfigError


class BlockVariant(str, Enum):
    """How conditioning enters a transformer block."""

    IN_CONTEXT = "in-context"
    CROSS_ATTENTION = "cross-attention"
    ADALN = "adaln"
    ADALN_ZERO = "adaln-zero"


# size name -> (depth, hidden width, attention heads)
STANDARD_SIZES: dict[str, tuple[int, int, int]] = {
    "S": (12, 384, 6),
    "B": (12, 768, 12),
    "L": (24, 1024, 16),
    "XL": (28, 1152, 16),
}

TIME_FREQ_DIM = 256  # width of the raw sinusoidal timestep vector
MLP_RATIO = 4


@dataclass(frozen=True)
class DiTConfig:
    """Everything that determines the parameter set and forward pass.

    input_size and channels describe the latent the model denoises (for the
    published 256x256-image setting that latent is 32x32x4).
    """

    depth: int
    hidden: int
    heads: int
    patch: int
    input_size: int
    channels: int
    num_classes: int
    variant: BlockVariant = BlockVariant.ADALN_ZERO
    class_dropout_prob: float = 0.1

    def __post_init__(self):
        if self.depth < 1 or self.hidden < 1 or self.heads < 1:
            raise ConfigError("depth, hidden, and heads must be positive")
        if self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )
        if self.hidden % 4 != 0:
            raise ConfigError(
                f"hidden ({self.hidden}) must be divisible by 4 "
                "for the 2-D positional embedding"
            )
        if self.input_size % self.patch != 0:
            raise ConfigError(
                f"input_size ({self.input_size}) must be divisible by "
                f"patch ({self.patch})"
            )
        if self.channels < 1 or self.num_classes < 1:
            raise ConfigError("channels and num_classes must be positive")
        if not 0.0 <= self.class_dropout_prob <= 1.0:
            raise ConfigError("class_dropout_prob must lie in [0, 1]")
        if not isinstance(self.variant, BlockVariant):
            object.__setattr__(self, "variant", BlockVariant(self.variant))

    @property
    def grid(self) -> int:
        return self.input_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def null_class(self) -> int:
        """Index of the learned unconditional embedding row."""
        return self.num_classes

    @property
    def out_channels(self) -> int:
        return 2 * self.channels  # noise estimate and covariance channel

    def to_dict(self) -> dict:
        d = asdict(self)
        return {
            "depth": d["depth"],
            "hidden": d["hidden"],
            "heads": d["heads"],
            "patch": d["patch"],
            "input": d["input_size"],
            "channels": d["channels"],
            "classes": d["num_classes"],
            "variant": self.variant.value,
            "dropout": d["class_dropout_prob"],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DiTConfig":
        try:
            return cls(
                depth=int(data["depth"]),
                hidden=int(data["hidden"]),
                heads=int(data["heads"]),
                patch=int(data["patch"]),
                input_size=int(data["input"]),
                channels=int(data["channels"]),
                num_classes=int(data["classes"]),
                variant=BlockVariant(data.get("variant", "adaln-zero")),
                class_dropout_prob=float(data.get("dropout", 0.1)),
            )
        except KeyError as exc:
            raise ConfigError(f"config file missing field {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"bad config value: {exc}") from None


def parse_model_name(name: str) -> tuple[str, int]:
    """Split shorthand like "XL/2" into (size, patch)."""
    parts = name.split("/")
    if len(parts) != 2 or parts[0] not in STANDARD_SIZES:
        raise ConfigError(
            f"unknown model name {name!r}; expected SIZE/PATCH with SIZE in "
            f"{sorted(STANDARD_SIZES)} (e.g. 'XL/2')"
        )
    try:
        patch = int(parts[1])
    except ValueError:
        raise ConfigError(f"bad patch size in model name {name!r}") from None
    if patch < 1:
        raise ConfigError(f"patch size must be positive in {name!r}")
    return parts[0], patch


def named_config(
    name: str,
    input_size: int = 32,
    channels: int = 4,
    num_classes: int = 1000,
    variant: Union[BlockVariant, str] = BlockVariant.ADALN_ZERO,
    class_dropout_prob: float = 0.1,
) -> DiTConfig:
    """Config for a "SIZE/PATCH" shorthand with the published defaults."""
    size, patch = parse_model_name(name)
    depth, hidden, heads = STANDARD_SIZES[size]
    return DiTConfig(
        depth=depth,
        hidden=hidden,
        heads=heads,
        patch=patch,
        input_size=input_size,
        channels=channels,
        num_classes=num_classes,
        variant=BlockVariant(variant),
        class_dropout_prob=class_dropout_prob,
    )


def standard_configs(
    input_size: int = 32, channels: int = 4, num_classes: int = 1000
) -> dict[str, DiTConfig]:
    """All size x patch combinations from the published design space."""
    out = {}
    for size in STANDARD_SIZES:
        for patch in (2, 4, 8):
            name = f"{size}/{patch}"
            out[name] = named_config(
                name, input_size=input_size, channels=channels, num_classes=num_classes
            )
    return out


def mini_config(variant: Union[BlockVariant, str] = BlockVariant.ADALN_ZERO) -> DiTConfig:
    """The desk-scale config used for training demos and gradient checks."""
    return DiTConfig(
        depth=2,
        hidden=32,
        heads=2,
        patch=4,
        input_size=8,
        channels=2,
        num_classes=4,
        variant=BlockVariant(variant),
    )


def save_config(config: DiTConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def load_config(path: Union[str, Path]) -> DiTConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return DiTConfig.from_dict(data)


def resolve_config(spec: str) -> DiTConfig:
    """Accept a config file path, a "SIZE/PATCH" shorthand, or "mini"."""
    if spec == "mini":
        return mini_config()
    if "/" in spec and spec.split("/")[0] in STANDARD_SIZES:
        return named_config(spec)
    path = Path(spec)
    if path.exists():
        return load_config(path)
    raise ConfigError(
        f"{spec!r} is neither a config file, a SIZE/PATCH shorthand, nor 'mini'"
    )
