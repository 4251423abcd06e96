"""The denoiser network: parameters, blocks, and the forward pass.

Implementation constraint carried throughout: every matmul keeps the batch
axis stacked ([B,T,d] @ [d,n], [B,h,T,k] @ [B,h,k,T]); the batch is never
folded into GEMM rows.  numpy evaluates stacked products slice by slice with
a fixed kernel shape, which is what makes each sample's output bitwise
independent of how a batch is chunked (see diffcore.ops).  Conditioning
vectors ride along as length-1 token sequences [B,1,d] for the same reason.
"""

from __future__ import annotations

from typing import Iterator, Mapping, Optional

import numpy as np

from ditlab.diffcore import Tensor, ops
from ditlab.errors import ShapeError
from ditlab import rng as rngmod
from ditlab.model.config import (
    BlockVariant,
    DiTConfig,
    MLP_RATIO,
    TIME_FREQ_DIM,
)
from ditlab.model.embeddings import pos_embed_2d, timestep_frequency


class ParameterStore:
    """Ordered name -> Tensor map of all learnable parameters."""

    def __init__(self, params: Mapping[str, Tensor]) -> None:
        self._params: dict[str, Tensor] = dict(params)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    @property
    def dtype(self):
        return next(iter(self._params.values())).dtype

    def total_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        """Current values, for serialization (copies)."""
        return {name: t.data.copy() for name, t in self._params.items()}

    @classmethod
    def from_state(
        cls, arrays: Mapping[str, np.ndarray], requires_grad: bool = True
    ) -> "ParameterStore":
        return cls(
            {n: Tensor(a.copy(), requires_grad=requires_grad) for n, a in arrays.items()}
        )

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore(
            {
                n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                for n, t in self._params.items()
            }
        )

    def view(self, prefix: str) -> "ParamView":
        return ParamView(self, prefix)

    def __repr__(self) -> str:
        return f"ParameterStore({len(self._params)} tensors, {self.total_parameters()} parameters)"


class ParamView:
    """Name-prefixed read access into a store (blocks use 'blocks.i.')."""

    __slots__ = ("_store", "_prefix")

    def __init__(self, store: ParameterStore, prefix: str) -> None:
        self._store = store
        self._prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self._store[self._prefix + name]


# -- patch layout ---------------------------------------------------------


def _ensure_batched(z: Tensor) -> tuple[Tensor, bool]:
    if z.ndim == 3:
        return ops.reshape(z, (1,) + z.shape), False
    if z.ndim == 4:
        return z, True
    raise ShapeError(f"expected [I,I,C] or [B,I,I,C], got shape {z.shape}")


def patchify(z, patch: int) -> Tensor:
    """Cut [B,I,I,C] into row-major p x p patches: [B, T, p*p*C].

    Patches follow raster order over the patch grid; within a patch, values
    are flattened row-major with the channel axis fastest.
    """
    z = ops.as_tensor(z)
    z, batched = _ensure_batched(z)
    b, h, w, c = z.shape
    if h != w:
        raise ShapeError(f"expected a square latent, got shape {z.shape}")
    if h % patch != 0:
        raise ShapeError(f"input edge {h} not divisible by patch {patch}")
    g = h // patch
    x = ops.reshape(z, (b, g, patch, g, patch, c))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    x = ops.reshape(x, (b, g * g, patch * patch * c))
    return x if batched else ops.reshape(x, (g * g, patch * patch * c))


def unpatchify(tokens, patch: int, input_size: int, channels: int) -> Tensor:
    """Exact inverse of patchify for `channels` values per position."""
    tokens = ops.as_tensor(tokens)
    if tokens.ndim == 2:
        tokens = ops.reshape(tokens, (1,) + tokens.shape)
        batched = False
    else:
        batched = True
    b, t, dim = tokens.shape
    g = input_size // patch
    if t != g * g or dim != patch * patch * channels:
        raise ShapeError(
            f"token array {tokens.shape} does not match grid {g}x{g} "
            f"with {patch * patch * channels} values per token"
        )
    x = ops.reshape(tokens, (b, g, g, patch, patch, channels))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    x = ops.reshape(x, (b, input_size, input_size, channels))
    return x if batched else ops.reshape(x, (input_size, input_size, channels))


# -- conditioning embeddings ----------------------------------------------


def embed_timestep(t, params: ParameterStore, config: DiTConfig) -> Tensor:
    """Sinusoid(256) -> linear -> SiLU -> linear, as a [B,1,d] sequence."""
    t = np.atleast_1d(np.asarray(t))
    freq = timestep_frequency(t, TIME_FREQ_DIM).astype(params.dtype)
    x = Tensor(freq.reshape(len(t), 1, TIME_FREQ_DIM))
    x = ops.add(ops.matmul(x, params["time_embed.fc1.weight"]), params["time_embed.fc1.bias"])
    x = ops.silu(x)
    x = ops.add(ops.matmul(x, params["time_embed.fc2.weight"]), params["time_embed.fc2.bias"])
    return x


def embed_label(
    c,
    params: ParameterStore,
    config: DiTConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Class-table lookup as [B,1,d]; rows may drop to the null class.

    c holds indices in 0..num_classes, where num_classes selects the learned
    unconditional row explicitly.  With training=True each row is replaced by
    the null row with probability class_dropout_prob.
    """
    c = np.atleast_1d(np.asarray(c, dtype=np.int64))
    if c.size and (c.min() < 0 or c.max() > config.num_classes):
        raise IndexError(
            f"class index out of range 0..{config.num_classes}: "
            f"min={c.min()}, max={c.max()}"
        )
    if training and config.class_dropout_prob > 0.0:
        if rng is None:
            raise ValueError("label dropout needs an rng when training")
        drop = rng.random(c.shape) < config.class_dropout_prob
        c = np.where(drop, config.null_class, c)
    emb = ops.embedding(params["label_embed.table"], c)
    return ops.reshape(emb, (c.shape[0], 1, config.hidden))


# -- attention and MLP -----------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    x = ops.reshape(x, (b, t, heads, d // heads))
    return ops.transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, k = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, t, h * k))


def _scores_to_values(q: Tensor, k: Tensor, v: Tensor, return_weights: bool):
    head_dim = q.shape[-1]
    scores = ops.scale(
        ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim)
    )
    weights = ops.softmax_lastdim(scores)
    out = _merge_heads(ops.matmul(weights, v))
    return (out, weights) if return_weights else (out, None)


def self_attention(
    x: Tensor, view: ParamView, heads: int, return_weights: bool = False
):
    """Multi-head self-attention with a fused qkv projection."""
    d = x.shape[-1]
    qkv = ops.add(ops.matmul(x, view["attn.qkv.weight"]), view["attn.qkv.bias"])
    q, k, v = (_split_heads(part, heads) for part in ops.split(qkv, 2, [d, d, d]))
    out, weights = _scores_to_values(q, k, v, return_weights)
    out = ops.add(ops.matmul(out, view["attn.proj.weight"]), view["attn.proj.bias"])
    return (out, weights) if return_weights else out


def cross_attention(
    x: Tensor, y: Tensor, view: ParamView, heads: int, return_weights: bool = False
):
    """Queries from x, keys/values from the conditioning sequence y."""
    q = _split_heads(
        ops.add(ops.matmul(x, view["cross.q.weight"]), view["cross.q.bias"]), heads
    )
    k = _split_heads(
        ops.add(ops.matmul(y, view["cross.k.weight"]), view["cross.k.bias"]), heads
    )
    v = _split_heads(
        ops.add(ops.matmul(y, view["cross.v.weight"]), view["cross.v.bias"]), heads
    )
    out, weights = _scores_to_values(q, k, v, return_weights)
    out = ops.add(ops.matmul(out, view["cross.proj.weight"]), view["cross.proj.bias"])
    return (out, weights) if return_weights else out


def _mlp(x: Tensor, view: ParamView) -> Tensor:
    x = ops.add(ops.matmul(x, view["mlp.fc1.weight"]), view["mlp.fc1.bias"])
    x = ops.gelu_tanh(x)
    return ops.add(ops.matmul(x, view["mlp.fc2.weight"]), view["mlp.fc2.bias"])


def _affine_ln(x: Tensor, view: ParamView, name: str) -> Tensor:
    return ops.add(
        ops.mul(ops.layer_norm(x), view[name + ".gamma"]), view[name + ".beta"]
    )


def modulate(x: Tensor, shift: Tensor, scale_: Tensor) -> Tensor:
    """x * (1 + scale_) + shift, broadcasting [B,1,d] over tokens."""
    one = Tensor(np.asarray(1.0, dtype=x.dtype))
    return ops.add(ops.mul(x, ops.add(one, scale_)), shift)


# -- blocks ----------------------------------------------------------------


def dit_block(
    x: Tensor,
    cond: Optional[Tensor],
    view: ParamView,
    config: DiTConfig,
) -> Tensor:
    """One transformer block.  `cond` is [B,1,d] (summed t+c embeddings) for
    the adaLN variants, the [B,2,d] conditioning sequence for cross-attention,
    and None for in-context (whose conditioning tokens travel inside x)."""
    variant = config.variant
    heads = config.heads
    d = config.hidden

    if variant in (BlockVariant.ADALN, BlockVariant.ADALN_ZERO):
        if cond is None or cond.shape[-2:] != (1, d):
            raise ShapeError(
                f"{variant.value} block needs [B,1,{d}] conditioning, got "
                f"{None if cond is None else cond.shape}"
            )
        regressed = ops.add(
            ops.matmul(ops.silu(cond), view["ada.weight"]), view["ada.bias"]
        )
        if variant is BlockVariant.ADALN_ZERO:
            (
                shift_attn,
                scale_attn,
                gate_attn,
                shift_mlp,
                scale_mlp,
                gate_mlp,
            ) = ops.split(regressed, 2, [d] * 6)
        else:
            shift_attn, scale_attn, shift_mlp, scale_mlp = ops.split(
                regressed, 2, [d] * 4
            )
            gate_attn = gate_mlp = None
        h = self_attention(
            modulate(ops.layer_norm(x), shift_attn, scale_attn), view, heads
        )
        if gate_attn is not None:
            h = ops.mul(gate_attn, h)
        x = ops.add(x, h)
        h = _mlp(modulate(ops.layer_norm(x), shift_mlp, scale_mlp), view)
        if gate_mlp is not None:
            h = ops.mul(gate_mlp, h)
        return ops.add(x, h)

    if variant is BlockVariant.IN_CONTEXT:
        if cond is not None:
            raise ShapeError("in-context blocks take no conditioning bundle")
        x = ops.add(x, self_attention(_affine_ln(x, view, "ln_attn"), view, heads))
        return ops.add(x, _mlp(_affine_ln(x, view, "ln_mlp"), view))

    if variant is BlockVariant.CROSS_ATTENTION:
        if cond is None or cond.ndim != 3 or cond.shape[-1] != d:
            raise ShapeError(
                f"cross-attention block needs a [B,M,{d}] conditioning "
                f"sequence, got {None if cond is None else cond.shape}"
            )
        x = ops.add(x, self_attention(_affine_ln(x, view, "ln_attn"), view, heads))
        y = ops.layer_norm(cond)
        x = ops.add(
            x, cross_attention(_affine_ln(x, view, "ln_cross"), y, view, heads)
        )
        return ops.add(x, _mlp(_affine_ln(x, view, "ln_mlp"), view))

    raise ShapeError(f"unknown block variant {variant!r}")


def final_layer(
    x: Tensor,
    cond: Optional[Tensor],
    params: ParameterStore,
    config: DiTConfig,
) -> Tensor:
    """Final norm (adaptive for adaLN variants), decode, unpatchify to 2C."""
    if config.variant in (BlockVariant.ADALN, BlockVariant.ADALN_ZERO):
        if cond is None:
            raise ShapeError("adaLN final layer needs the conditioning vector")
        d = config.hidden
        reg = ops.add(
            ops.matmul(ops.silu(cond), params["final.ada.weight"]),
            params["final.ada.bias"],
        )
        shift, scale_ = ops.split(reg, 2, [d, d])
        x = modulate(ops.layer_norm(x), shift, scale_)
    else:
        x = ops.add(
            ops.mul(ops.layer_norm(x), params["final.norm.gamma"]),
            params["final.norm.beta"],
        )
    x = ops.add(ops.matmul(x, params["final.linear.weight"]), params["final.linear.bias"])
    return unpatchify(x, config.patch, config.input_size, config.out_channels)


# -- full forward -----------------------------------------------------------


def forward(
    z,
    t,
    c,
    params: ParameterStore,
    config: DiTConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, Tensor]:
    """Denoise latents: returns (eps_hat, v), each shaped like z.

    z: [B,I,I,C] (or a single [I,I,C]); t: per-sample steps (or one shared
    int); c: per-sample class indices, a shared int, or None for
    unconditional (the null embedding).  Inference is deterministic; label
    dropout happens only with training=True.
    """
    z = ops.as_tensor(z)
    z, batched = _ensure_batched(z)
    b = z.shape[0]
    if z.shape[1:] != (config.input_size, config.input_size, config.channels):
        raise ShapeError(
            f"latent shape {z.shape[1:]} does not match config "
            f"({config.input_size}, {config.input_size}, {config.channels})"
        )
    if z.dtype != params.dtype:
        if z.requires_grad:
            raise TypeError(
                f"latent dtype {z.dtype} does not match parameter dtype "
                f"{params.dtype}; cast explicitly to keep the graph intact"
            )
        z = Tensor(z.data.astype(params.dtype))

    t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.int64)), (b,))
    if c is None:
        c = np.full(b, config.null_class, dtype=np.int64)
    else:
        c = np.broadcast_to(np.atleast_1d(np.asarray(c, dtype=np.int64)), (b,))

    x = patchify(z, config.patch)
    x = ops.add(ops.matmul(x, params["patch_embed.weight"]), params["patch_embed.bias"])
    pos = Tensor(pos_embed_2d(config.grid, config.hidden).astype(params.dtype))
    x = ops.add(x, pos)

    t_vec = embed_timestep(t, params, config)
    c_vec = embed_label(c, params, config, training=training, rng=rng)

    cond: Optional[Tensor]
    if config.variant in (BlockVariant.ADALN, BlockVariant.ADALN_ZERO):
        cond = ops.add(t_vec, c_vec)
    elif config.variant is BlockVariant.CROSS_ATTENTION:
        cond = ops.concat([t_vec, c_vec], axis=1)
    else:
        x = ops.concat([x, t_vec, c_vec], axis=1)
        cond = None

    for i in range(config.depth):
        x = dit_block(x, cond, params.view(f"blocks.{i}."), config)

    if config.variant is BlockVariant.IN_CONTEXT:
        x = ops.narrow(x, 1, 0, config.tokens)

    out = final_layer(x, cond, params, config)
    eps_hat, v = ops.split(out, 3, [config.channels, config.channels])
    if not batched:
        shape = (config.input_size, config.input_size, config.channels)
        eps_hat, v = ops.reshape(eps_hat, shape), ops.reshape(v, shape)
    return eps_hat, v


# -- initialization ----------------------------------------------------------


INIT_STD = 0.02


def init_parameters(
    config: DiTConfig, seed: int, dtype=np.float32
) -> ParameterStore:
    """Freshly initialized parameters, deterministic in (config, seed).

    Linear weights are N(0, 0.02^2), biases zero, norm affines identity; the
    final decoder linear is zeroed, and for adaln-zero so is each block's
    regressor, which makes every block the identity at init.  Draws happen in
    float64 in a fixed order, so stores for different dtypes hold the same
    values up to rounding.
    """
    gen = rngmod.keyed_generator(seed, rngmod.INIT)
    d = config.hidden
    params: dict[str, Tensor] = {}

    def add(name: str, shape: tuple, kind: str = "normal") -> None:
        if kind == "normal":
            value = gen.standard_normal(shape) * INIT_STD
        elif kind == "zeros":
            value = np.zeros(shape)
        elif kind == "ones":
            value = np.ones(shape)
        else:
            raise ValueError(kind)
        params[name] = Tensor(value.astype(dtype), requires_grad=True)

    add("patch_embed.weight", (config.patch_dim, d))
    add("patch_embed.bias", (d,), "zeros")
    add("time_embed.fc1.weight", (TIME_FREQ_DIM, d))
    add("time_embed.fc1.bias", (d,), "zeros")
    add("time_embed.fc2.weight", (d, d))
    add("time_embed.fc2.bias", (d,), "zeros")
    add("label_embed.table", (config.num_classes + 1, d))

    for i in range(config.depth):
        p = f"blocks.{i}."
        if config.variant is BlockVariant.ADALN_ZERO:
            add(p + "ada.weight", (d, 6 * d), "zeros")
            add(p + "ada.bias", (6 * d,), "zeros")
        elif config.variant is BlockVariant.ADALN:
            add(p + "ada.weight", (d, 4 * d))
            add(p + "ada.bias", (4 * d,), "zeros")
        else:
            add(p + "ln_attn.gamma", (d,), "ones")
            add(p + "ln_attn.beta", (d,), "zeros")
        add(p + "attn.qkv.weight", (d, 3 * d))
        add(p + "attn.qkv.bias", (3 * d,), "zeros")
        add(p + "attn.proj.weight", (d, d))
        add(p + "attn.proj.bias", (d,), "zeros")
        if config.variant is BlockVariant.CROSS_ATTENTION:
            add(p + "ln_cross.gamma", (d,), "ones")
            add(p + "ln_cross.beta", (d,), "zeros")
            for part in ("q", "k", "v", "proj"):
                add(p + f"cross.{part}.weight", (d, d))
                add(p + f"cross.{part}.bias", (d,), "zeros")
        if config.variant in (BlockVariant.IN_CONTEXT, BlockVariant.CROSS_ATTENTION):
            add(p + "ln_mlp.gamma", (d,), "ones")
            add(p + "ln_mlp.beta", (d,), "zeros")
        add(p + "mlp.fc1.weight", (d, MLP_RATIO * d))
        add(p + "mlp.fc1.bias", (MLP_RATIO * d,), "zeros")
        add(p + "mlp.fc2.weight", (MLP_RATIO * d, d))
        add(p + "mlp.fc2.bias", (d,), "zeros")

    if config.variant in (BlockVariant.ADALN, BlockVariant.ADALN_ZERO):
        add("final.ada.weight", (d, 2 * d))
        add("final.ada.bias", (2 * d,), "zeros")
    else:
        add("final.norm.gamma", (d,), "ones")
        add("final.norm.beta", (d,), "zeros")
    out_dim = config.patch * config.patch * config.out_channels
    add("final.linear.weight", (d, out_dim), "zeros")
    add("final.linear.bias", (out_dim,), "zeros")

    return ParameterStore(params)
