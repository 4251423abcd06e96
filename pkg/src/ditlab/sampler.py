"""Reverse-process generation: guided, respaced ancestral sampling.

Noise is drawn from counter-based generators keyed by (seed, purpose, step,
sample index), so the bits of each sample depend only on the request, never
on batch composition or chunking.  Combined with the batch-stacked forward
pass this makes sample() reproducible across any chunk_size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from ditlab import rng as rngmod
from ditlab.diffcore import Tensor, no_grad, ops
from ditlab.errors import ConfigError, ShapeError
from ditlab.model import DiTConfig, forward
from ditlab.model.network import ParameterStore
from ditlab.schedule import (
    DiffusionSchedule,
    model_log_variance,
    posterior_mean_variance,
    predict_x0_from_eps,
    respace,
)


@dataclass(frozen=True)
class SampleRequest:
    count: int
    labels: Optional[Union[int, Sequence[int]]] = None  # None = unconditional
    guidance_scale: float = 1.0
    num_steps: int = 250
    seed: int = 0
    clamp_x0: bool = False  # clip x0 predictions to [-1,1] (pixel-like data)

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ConfigError(f"count must be positive, got {self.count}")
        if self.guidance_scale < 1.0:
            raise ConfigError(
                f"guidance scale must be >= 1 (1 = unguided), got "
                f"{self.guidance_scale}"
            )
        if self.num_steps < 1:
            raise ConfigError(f"num_steps must be positive, got {self.num_steps}")
        if self.labels is None and self.guidance_scale > 1.0:
            raise ConfigError(
                "guidance needs class labels; unconditional sampling must use "
                "scale 1"
            )

    def label_array(self, num_classes: int) -> Optional[np.ndarray]:
        if self.labels is None:
            return None
        labels = np.broadcast_to(
            np.atleast_1d(np.asarray(self.labels, dtype=np.int64)), (self.count,)
        ).copy()
        if labels.min() < 0 or labels.max() >= num_classes:
            raise IndexError(
                f"labels must lie in 0..{num_classes - 1}, got "
                f"[{labels.min()}, {labels.max()}]"
            )
        return labels


@dataclass
class SampleResult:
    samples: np.ndarray  # [count, I, I, C]
    labels: Optional[np.ndarray]
    num_steps: int
    model_evals_per_image: int
    kept_timesteps: np.ndarray  # original-schedule steps actually visited


def cfg_combine(eps_cond: Tensor, eps_uncond: Tensor, s: float) -> Tensor:
    """Guided noise estimate: eps_uncond + s * (eps_cond - eps_uncond).

    s = 1 short-circuits to eps_cond unchanged, bit for bit.
    """
    eps_cond = ops.as_tensor(eps_cond)
    eps_uncond = ops.as_tensor(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(
            f"guidance branches disagree: {eps_cond.shape} vs {eps_uncond.shape}"
        )
    if s == 1.0:
        return eps_cond
    return ops.add(eps_uncond, ops.scale(ops.sub(eps_cond, eps_uncond), float(s)))


def p_sample_step(
    eps_hat,
    v,
    xt,
    t,
    schedule: DiffusionSchedule,
    noise: Optional[np.ndarray] = None,
    clamp_x0: bool = False,
) -> np.ndarray:
    """One reverse step x_t -> x_{t-1}; noise=None returns the mean (final step)."""
    with no_grad():
        xt = ops.as_tensor(xt)
        eps_hat = ops.as_tensor(eps_hat)
        x0 = predict_x0_from_eps(schedule, xt, t, eps_hat)
        if clamp_x0:
            x0 = Tensor(np.clip(x0.numpy(), -1.0, 1.0))
        mean, _, _ = posterior_mean_variance(schedule, x0, xt, t)
        if noise is None:
            return mean.numpy().copy()
        log_sigma2 = model_log_variance(schedule, v, t)
        sigma = np.exp(0.5 * log_sigma2.numpy())
        return mean.numpy() + sigma * noise.astype(mean.dtype)


def _init_noise(seed: int, index: int, shape: tuple) -> np.ndarray:
    return rngmod.keyed_generator(seed, rngmod.SAMPLE_INIT, index).standard_normal(shape)


def _step_noise(seed: int, step: int, index: int, shape: tuple) -> np.ndarray:
    gen = rngmod.keyed_generator(seed, rngmod.SAMPLE_STEP, step, index)
    return gen.standard_normal(shape)


def sample(
    params: ParameterStore,
    config: DiTConfig,
    schedule: DiffusionSchedule,
    request: SampleRequest,
    chunk_size: Optional[int] = None,
) -> SampleResult:
    """Generate request.count latents by ancestral sampling.

    The schedule is respaced to request.num_steps.  With guidance_scale > 1
    each step evaluates the conditional and the null branch and combines the
    noise estimates; the learned covariance comes from the conditional
    branch.  Scale 1 runs the conditional branch only.
    """
    if request.num_steps > schedule.t_max:
        raise ConfigError(
            f"num_steps {request.num_steps} exceeds schedule length {schedule.t_max}"
        )
    resp = respace(schedule, request.num_steps)
    labels = request.label_array(config.num_classes)
    shape = (config.input_size, config.input_size, config.channels)
    dtype = params.dtype
    guided = request.guidance_scale > 1.0

    if chunk_size is None:
        chunk_size = request.count
    if chunk_size < 1:
        raise ConfigError(f"chunk_size must be positive, got {chunk_size}")

    out = np.empty((request.count,) + shape, dtype=dtype)
    model_evals = 0

    for lo in range(0, request.count, chunk_size):
        hi = min(lo + chunk_size, request.count)
        idx = range(lo, hi)
        x = np.stack([_init_noise(request.seed, i, shape) for i in idx]).astype(dtype)
        chunk_labels = None if labels is None else labels[lo:hi]
        for j in range(request.num_steps, 0, -1):
            t = np.full(hi - lo, j, dtype=np.int64)
            t_orig = resp.original_t(t)
            with no_grad():
                eps_cond, v_cond = forward(x, t_orig, chunk_labels, params, config)
                model_evals += 1
                if guided:
                    eps_null, _ = forward(x, t_orig, None, params, config)
                    model_evals += 1
                    eps = cfg_combine(eps_cond, eps_null, request.guidance_scale)
                else:
                    eps = eps_cond
            if j == 1:
                noise = None
            else:
                noise = np.stack(
                    [_step_noise(request.seed, j, i, shape) for i in idx]
                )
            x = p_sample_step(
                eps, v_cond, x, t, resp, noise=noise, clamp_x0=request.clamp_x0
            )
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(
                    f"non-finite latents at respaced step {j} "
                    f"(original t={int(t_orig[0])})"
                )
            x = x.astype(dtype, copy=False)
        out[lo:hi] = x

    chunks = -(-request.count // chunk_size)
    per_image = model_evals // chunks
    return SampleResult(
        samples=out,
        labels=labels,
        num_steps=request.num_steps,
        model_evals_per_image=per_image,
        kept_timesteps=resp.timestep_map.copy(),
    )


def write_ppm(path, latent: np.ndarray) -> None:
    """Binary portable pixmap preview of one latent.

    Channels beyond the third are dropped; with fewer than three, the last
    channel repeats.  Each displayed channel is min/max normalized on its
    own, so previews show structure, not calibrated values.
    """
    if latent.ndim != 3:
        raise ShapeError(f"expected one [I,I,C] latent, got shape {latent.shape}")
    h, w, c = latent.shape
    channels = [latent[..., min(i, c - 1)] for i in range(3)]
    planes = []
    for chan in channels:
        lo, hi = float(chan.min()), float(chan.max())
        span = hi - lo if hi > lo else 1.0
        planes.append(np.round((chan - lo) / span * 255.0).astype(np.uint8))
    rgb = np.stack(planes, axis=-1)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
