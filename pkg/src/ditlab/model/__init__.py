"""Transformer denoiser: configuration, embeddings, blocks, forward pass."""

from ditlab.model.config import (
    BlockVariant,
    DiTConfig,
    STANDARD_SIZES,
    load_config,
    mini_config,
    named_config,
    parse_model_name,
    resolve_config,
    save_config,
    standard_configs,
)
from ditlab.model.embeddings import pos_embed_2d, timestep_frequency
from ditlab.model.network import (
    ParameterStore,
    dit_block,
    embed_label,
    embed_timestep,
    final_layer,
    forward,
    init_parameters,
    patchify,
    unpatchify,
)

__all__ = [
    "BlockVariant",
    "DiTConfig",
    "STANDARD_SIZES",
    "ParameterStore",
    "dit_block",
    "embed_label",
    "embed_timestep",
    "final_layer",
    "forward",
    "init_parameters",
    "load_config",
    "mini_config",
    "named_config",
    "parse_model_name",
    "patchify",
    "resolve_config",
    "pos_embed_2d",
    "save_config",
    "standard_configs",
    "timestep_frequency",
    "unpatchify",
]
