"""Closed-form complexity model: exact MAC and parameter counts.

Counting convention: one multiply-accumulate = one flop.  All linear layers
count, including conditioning regressors and the attention score/value
matmuls; normalizations, activations, softmax, bias adds, and embedding
lookups do not.  This convention reproduces the reference Gflop figures for
the standard model suite to within 1%.

The parameter model is kept deliberately independent of init_parameters: it
is symbolic arithmetic over the config, and the test suite checks exact
equality against the instantiated store.  If the two ever disagree, one of
them is wrong about the architecture.
"""

from __future__ import annotations

from dataclasses import dataclass

from ditlab.model.config import (
    BlockVariant,
    DiTConfig,
    MLP_RATIO,
    TIME_FREQ_DIM,
    named_config,
)

# conditioning sequence length: one timestep token + one label token
COND_TOKENS = 2


@dataclass(frozen=True)
class FlopReport:
    """Multiply-accumulate counts for one forward pass of one sample.

    Per-block fields hold the count for a single block; total applies the
    block multiplier.
    """

    blocks: int
    attn_projections: int  # qkv + output projections
    attn_matmuls: int  # scores and weighted values
    mlp: int
    conditioning_mlp: int  # adaLN/adaLN-Zero regressor
    cross_attention: int  # q/k/v/out projections + matmuls against cond tokens
    patch_embed: int
    timestep_embed: int
    label_lookup: int
    final_layer: int

    @property
    def per_block(self) -> int:
        return (
            self.attn_projections
            + self.attn_matmuls
            + self.mlp
            + self.conditioning_mlp
            + self.cross_attention
        )

    @property
    def transformer_core(self) -> int:
        """Token-carrying block terms only; this is the part that must grow
        at least 4x when the patch size halves."""
        return self.blocks * (self.attn_projections + self.attn_matmuls + self.mlp)

    @property
    def total(self) -> int:
        return (
            self.blocks * self.per_block
            + self.patch_embed
            + self.timestep_embed
            + self.label_lookup
            + self.final_layer
        )

    @property
    def gflops(self) -> float:
        return self.total / 1e9


@dataclass(frozen=True)
class ParamReport:
    """Learnable parameter counts per component (biases included)."""

    blocks: int
    attn: int  # per block
    mlp: int  # per block
    conditioning: int  # per block: regressor, norm affines, cross projections
    patch_embed: int
    timestep_embed: int
    label_embed: int
    final_layer: int

    @property
    def per_block(self) -> int:
        return self.attn + self.mlp + self.conditioning

    @property
    def total(self) -> int:
        return (
            self.blocks * self.per_block
            + self.patch_embed
            + self.timestep_embed
            + self.label_embed
            + self.final_layer
        )

    @property
    def millions(self) -> float:
        return self.total / 1e6


def count_flops(config: DiTConfig, input_size: int | None = None) -> FlopReport:
    """Exact MAC count for one forward pass at the given latent edge size."""
    if input_size is None:
        input_size = config.input_size
    d = config.hidden
    p = config.patch
    c = config.channels
    t = (input_size // p) ** 2
    # in-context conditioning rides through every block as two extra tokens
    t_eff = t + COND_TOKENS if config.variant is BlockVariant.IN_CONTEXT else t

    attn_projections = 4 * t_eff * d * d
    attn_matmuls = 2 * t_eff * t_eff * d
    mlp = 2 * MLP_RATIO * t_eff * d * d

    if config.variant is BlockVariant.ADALN_ZERO:
        conditioning_mlp = 6 * d * d
    elif config.variant is BlockVariant.ADALN:
        conditioning_mlp = 4 * d * d
    else:
        conditioning_mlp = 0

    if config.variant is BlockVariant.CROSS_ATTENTION:
        # queries and output over t tokens, keys/values over the two
        # conditioning tokens, plus both attention matmuls
        cross = (
            2 * t * d * d
            + 2 * COND_TOKENS * d * d
            + 2 * t * COND_TOKENS * d
        )
    else:
        cross = 0

    adaptive_final = config.variant in (BlockVariant.ADALN, BlockVariant.ADALN_ZERO)
    final = t * d * p * p * 2 * c + (2 * d * d if adaptive_final else 0)

    return FlopReport(
        blocks=config.depth,
        attn_projections=attn_projections,
        attn_matmuls=attn_matmuls,
        mlp=mlp,
        conditioning_mlp=conditioning_mlp,
        cross_attention=cross,
        patch_embed=input_size * input_size * c * d,
        timestep_embed=TIME_FREQ_DIM * d + d * d,
        label_lookup=0,
        final_layer=final,
    )


def count_params(config: DiTConfig) -> ParamReport:
    """Exact symbolic parameter count; equals the instantiated store."""
    d = config.hidden
    attn = (3 * d * d + 3 * d) + (d * d + d)
    mlp = d * MLP_RATIO * d + MLP_RATIO * d + MLP_RATIO * d * d + d

    if config.variant is BlockVariant.ADALN_ZERO:
        conditioning = d * 6 * d + 6 * d
    elif config.variant is BlockVariant.ADALN:
        conditioning = d * 4 * d + 4 * d
    elif config.variant is BlockVariant.IN_CONTEXT:
        conditioning = 4 * d  # two affine norms
    else:
        conditioning = 6 * d + 4 * (d * d + d)  # three affine norms + q/k/v/out

    out_dim = config.patch * config.patch * config.out_channels
    if config.variant in (BlockVariant.ADALN, BlockVariant.ADALN_ZERO):
        final = d * 2 * d + 2 * d + d * out_dim + out_dim
    else:
        final = 2 * d + d * out_dim + out_dim

    return ParamReport(
        blocks=config.depth,
        attn=attn,
        mlp=mlp,
        conditioning=conditioning,
        patch_embed=config.patch_dim * d + d,
        timestep_embed=TIME_FREQ_DIM * d + d + d * d + d,
        label_embed=(config.num_classes + 1) * d,
        final_layer=final,
    )


def training_compute(gflops_per_forward: float, batch: int, steps: int) -> float:
    """Total training Gflops: forward cost x batch x steps x 3.

    The factor 3 books the backward pass at twice the forward cost.
    """
    return gflops_per_forward * batch * steps * 3


def sampling_compute(
    gflops_per_forward: float, num_steps: int, guided: bool = False
) -> float:
    """Per-image sampling cost in Tflops; guidance doubles the model evals."""
    evals = 2 if guided else 1
    return gflops_per_forward * num_steps * evals / 1000.0


# -- conformance against the well-known complexity figures -------------------
#
# Reference values for the standard suite on 32x32x4 latents (256px images):
# the size table quotes Gflops at p=4; the per-model table quotes Gflops and
# parameter millions for every size/patch pair, the XL/2 block variants, and
# XL/2 on 64x64 latents (512px images).


REFERENCE_SIZE_TABLE_GFLOPS = {"S": 1.4, "B": 5.6, "L": 19.7, "XL": 29.1}

REFERENCE_GFLOPS = {
    "S/8": 0.36, "S/4": 1.41, "S/2": 6.06,
    "B/8": 1.42, "B/4": 5.56, "B/2": 23.01,
    "L/8": 5.01, "L/4": 19.70, "L/2": 80.71,
    "XL/8": 7.39, "XL/4": 29.05, "XL/2": 118.64,
}

REFERENCE_VARIANT_GFLOPS = {
    BlockVariant.IN_CONTEXT: 119.37,
    BlockVariant.CROSS_ATTENTION: 137.62,
    BlockVariant.ADALN: 118.56,
    BlockVariant.ADALN_ZERO: 118.64,
}

REFERENCE_GFLOPS_512 = 524.60  # XL/2 on 64x64 latents

REFERENCE_PARAMS_M = {
    "S/8": 33, "S/4": 33, "S/2": 33,
    "B/8": 131, "B/4": 130, "B/2": 130,
    "L/8": 459, "L/4": 458, "L/2": 458,
    "XL/8": 676, "XL/4": 675, "XL/2": 675,
}

REFERENCE_VARIANT_PARAMS_M = {
    BlockVariant.IN_CONTEXT: 449,
    BlockVariant.CROSS_ATTENTION: 598,
    BlockVariant.ADALN: 600,
    BlockVariant.ADALN_ZERO: 675,
}


@dataclass(frozen=True)
class ConformanceRow:
    label: str
    quantity: str  # "Gflops" or "params(M)"
    computed: float
    published: float
    tolerance: float  # relative

    @property
    def rel_err(self) -> float:
        return abs(self.computed - self.published) / abs(self.published)

    @property
    def ok(self) -> bool:
        return self.rel_err <= self.tolerance


def conformance_table() -> list[ConformanceRow]:
    """Every published complexity figure next to this package's count."""
    rows: list[ConformanceRow] = []

    for size, published in REFERENCE_SIZE_TABLE_GFLOPS.items():
        cfg = named_config(f"{size}/4")
        rows.append(ConformanceRow(
            label=f"{size}/4 size-table", quantity="Gflops",
            computed=count_flops(cfg).gflops, published=published,
            tolerance=0.02,
        ))

    for name, published in REFERENCE_GFLOPS.items():
        rows.append(ConformanceRow(
            label=name, quantity="Gflops",
            computed=count_flops(named_config(name)).gflops,
            published=published, tolerance=0.01,
        ))

    for variant, published in REFERENCE_VARIANT_GFLOPS.items():
        cfg = named_config("XL/2", variant=variant)
        rows.append(ConformanceRow(
            label=f"XL/2 {variant.value}", quantity="Gflops",
            computed=count_flops(cfg).gflops, published=published,
            tolerance=0.01,
        ))

    rows.append(ConformanceRow(
        label="XL/2 512px", quantity="Gflops",
        computed=count_flops(named_config("XL/2", input_size=64)).gflops,
        published=REFERENCE_GFLOPS_512, tolerance=0.01,
    ))

    for name, published in REFERENCE_PARAMS_M.items():
        rows.append(ConformanceRow(
            label=name, quantity="params(M)",
            computed=count_params(named_config(name)).millions,
            published=float(published), tolerance=0.02,
        ))

    for variant, published in REFERENCE_VARIANT_PARAMS_M.items():
        cfg = named_config("XL/2", variant=variant)
        rows.append(ConformanceRow(
            label=f"XL/2 {variant.value}", quantity="params(M)",
            computed=count_params(cfg).millions, published=float(published),
            tolerance=0.02,
        ))

    return rows
