"""Noise schedules, the diffusion posterior, and the training losses.

Conventions used throughout:

* Timesteps are 1-based: t runs over 1..t_max, and cache arrays index t-1.
* By convention the cumulative signal level at t=0 is 1, which forces the
  t=1 posterior to collapse onto x0 with zero variance.
* All schedule arrays are float64 and frozen after construction.
* Batched tensors put the sample axis first; per-sample reductions sum over
  every other axis.  t may be a scalar or a per-sample integer vector.

The learned covariance is carried as a raw channel v in [-1, 1] that
interpolates log-variance between beta_t (v=+1) and the posterior variance
(v=-1).  Because the t=1 posterior variance is exactly zero, its log is
replaced by the t=2 value so every log in the interpolation stays finite.
"""

from __future__ import annotations

import csv
import math
from typing import Optional, Union

import numpy as np

from ditlab.diffcore import Tensor, ops
from ditlab.errors import ConfigError

LOG_TWO_PI = math.log(2.0 * math.pi)


class DiffusionSchedule:
    """Per-timestep constants for a discrete Gaussian diffusion.

    Constructed from betas; every derived array is cached eagerly.  When
    alpha_bars is given explicitly (respacing does this) it is taken verbatim
    instead of being recomputed, so downstream quantities keep the original
    values bit for bit.
    """

    def __init__(
        self, betas: np.ndarray, alpha_bars: Optional[np.ndarray] = None
    ) -> None:
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigError(f"betas must be a nonempty 1-D array, got shape {betas.shape}")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        if alpha_bars is None:
            alpha_bars = np.cumprod(self.alphas)
        else:
            alpha_bars = np.asarray(alpha_bars, dtype=np.float64)
            if alpha_bars.shape != betas.shape:
                raise ConfigError("alpha_bars must match betas in shape")
        self.alpha_bars = alpha_bars
        self.alpha_bars_prev = np.concatenate(([1.0], alpha_bars[:-1]))

        self.sqrt_alpha_bars = np.sqrt(alpha_bars)
        self.sqrt_one_minus_alpha_bars = np.sqrt(1.0 - alpha_bars)
        self.sqrt_recip_alpha_bars = np.sqrt(1.0 / alpha_bars)
        self.sqrt_recipm1_alpha_bars = np.sqrt(1.0 / alpha_bars - 1.0)
        self.log_betas = np.log(betas)

        self.posterior_variance = (
            betas * (1.0 - self.alpha_bars_prev) / (1.0 - alpha_bars)
        )
        # the t=1 posterior variance is identically 0; reuse the t=2 entry so
        # the log cache stays finite (single-step schedules fall back to beta)
        if betas.size > 1:
            clipped = np.concatenate(
                ([self.posterior_variance[1]], self.posterior_variance[1:])
            )
        else:
            clipped = betas.copy()
        self.posterior_log_variance_clipped = np.log(clipped)

        self.posterior_mean_coef_x0 = (
            betas * np.sqrt(self.alpha_bars_prev) / (1.0 - alpha_bars)
        )
        self.posterior_mean_coef_xt = (
            (1.0 - self.alpha_bars_prev) * np.sqrt(self.alphas) / (1.0 - alpha_bars)
        )

        if np.any(np.diff(alpha_bars) >= 0.0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        for arr in vars(self).values():
            if isinstance(arr, np.ndarray):
                arr.flags.writeable = False

    @property
    def t_max(self) -> int:
        return int(self.betas.size)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(t_max={self.t_max})"


class RespacedSchedule(DiffusionSchedule):
    """A schedule over a kept subsequence of another schedule's timesteps.

    timestep_map[j-1] gives the original (1-based) timestep for new step j;
    the network must be fed these original values, while all schedule math
    runs over the shortened index range.
    """

    def __init__(
        self,
        betas: np.ndarray,
        alpha_bars: np.ndarray,
        timestep_map: np.ndarray,
    ) -> None:
        super().__init__(betas, alpha_bars)
        self.timestep_map = np.asarray(timestep_map, dtype=np.int64)
        self.timestep_map.flags.writeable = False

    def original_t(self, t: Union[int, np.ndarray]) -> np.ndarray:
        """Map respaced timestep(s) in 1..num_steps to original timesteps."""
        return self.timestep_map[np.asarray(t) - 1]


def linear_schedule(
    t_max: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2
) -> DiffusionSchedule:
    """Betas linearly spaced from beta_start to beta_end inclusive."""
    if t_max < 1:
        raise ConfigError(f"t_max must be >= 1, got {t_max}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    if t_max == 1:
        betas = np.array([beta_start])
    else:
        betas = np.linspace(beta_start, beta_end, t_max)
    return DiffusionSchedule(betas)


def respace(schedule: DiffusionSchedule, num_steps: int) -> RespacedSchedule:
    """Keep num_steps evenly spaced timesteps, always including the last.

    Kept step j (1-based) is round(j * t_max / num_steps).  The shortened
    alpha_bar is copied from the original at the kept steps, so signal levels
    are preserved exactly; betas between kept steps are ratios of those
    alpha_bars (or the original beta when the kept steps are adjacent, which
    makes full-length respacing the identity).
    """
    t_max = schedule.t_max
    if not 1 <= num_steps <= t_max:
        raise ConfigError(f"num_steps must be in 1..{t_max}, got {num_steps}")
    kept = np.array(
        [int(math.floor(j * t_max / num_steps + 0.5)) for j in range(1, num_steps + 1)],
        dtype=np.int64,
    )
    alpha_bars = schedule.alpha_bars[kept - 1].copy()
    prev_t = np.concatenate(([0], kept[:-1]))
    prev_bar = np.concatenate(([1.0], alpha_bars[:-1]))
    betas = np.where(
        kept - prev_t == 1,
        schedule.betas[kept - 1],
        1.0 - alpha_bars / prev_bar,
    )
    return RespacedSchedule(betas, alpha_bars, kept)


# -- indexing helpers ----------------------------------------------------


def _check_t(schedule: DiffusionSchedule, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if t.size and (t.min() < 1 or t.max() > schedule.t_max):
        raise IndexError(
            f"timestep out of range 1..{schedule.t_max}: "
            f"min={t.min()}, max={t.max()}"
        )
    return t


def coef(schedule: DiffusionSchedule, name: str, t, like: Tensor) -> Tensor:
    """Gather a cached per-step array at t as a constant tensor.

    The result has the batch shape of t followed by singleton axes, so it
    broadcasts against `like` ([B] + t, [B,...] x  ->  [B,1,...,1] factor).
    """
    t = _check_t(schedule, t)
    values = getattr(schedule, name)[t - 1]
    shape = values.shape + (1,) * (like.ndim - values.ndim)
    return Tensor(values.reshape(shape).astype(like.dtype))


# -- forward process and posterior ---------------------------------------


def q_sample(schedule: DiffusionSchedule, x0, t, eps) -> Tensor:
    """Sample x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0, eps = ops.as_tensor(x0), ops.as_tensor(eps)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} must match x0 shape {x0.shape}")
    c_signal = coef(schedule, "sqrt_alpha_bars", t, x0)
    c_noise = coef(schedule, "sqrt_one_minus_alpha_bars", t, x0)
    return ops.add(ops.mul(c_signal, x0), ops.mul(c_noise, eps))


def posterior_mean_variance(
    schedule: DiffusionSchedule, x0, xt, t
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Moments of q(x_{t-1} | x_t, x_0).

    Returns (mean, variance, log_variance_clipped); the variance arrays have
    the shape of t (per-step scalars, not per-dimension).
    """
    x0, xt = ops.as_tensor(x0), ops.as_tensor(xt)
    c0 = coef(schedule, "posterior_mean_coef_x0", t, x0)
    ct = coef(schedule, "posterior_mean_coef_xt", t, xt)
    mean = ops.add(ops.mul(c0, x0), ops.mul(ct, xt))
    t = _check_t(schedule, t)
    variance = schedule.posterior_variance[t - 1]
    log_variance = schedule.posterior_log_variance_clipped[t - 1]
    return mean, variance, log_variance


def predict_x0_from_eps(schedule: DiffusionSchedule, xt, t, eps_hat) -> Tensor:
    """Invert q_sample for the noise estimate: x0 = (xt - sqrt(1-abar) eps)/sqrt(abar)."""
    xt, eps_hat = ops.as_tensor(xt), ops.as_tensor(eps_hat)
    c_recip = coef(schedule, "sqrt_recip_alpha_bars", t, xt)
    c_noise = coef(schedule, "sqrt_recipm1_alpha_bars", t, xt)
    return ops.sub(ops.mul(c_recip, xt), ops.mul(c_noise, eps_hat))


def model_log_variance(schedule: DiffusionSchedule, v, t) -> Tensor:
    """Map the raw v channel to per-dimension log variance.

    f = (v+1)/2 interpolates in log space between beta_t (f=1) and the
    clipped posterior variance (f=0).  Differentiable in v.
    """
    v = ops.as_tensor(v)
    hi = coef(schedule, "log_betas", t, v)
    lo = coef(schedule, "posterior_log_variance_clipped", t, v)
    half = ops.scale(ops.add(v, Tensor(np.asarray(1.0, dtype=v.dtype.type))), 0.5)
    one_minus = ops.sub(Tensor(np.asarray(1.0, dtype=v.dtype.type)), half)
    return ops.add(ops.mul(half, hi), ops.mul(one_minus, lo))


# -- divergences and losses ----------------------------------------------


def gaussian_kl(mean1, logvar1, mean2, logvar2) -> Tensor:
    """Elementwise KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)), in nats."""
    mean1, mean2 = ops.as_tensor(mean1), ops.as_tensor(mean2)
    logvar1, logvar2 = ops.as_tensor(logvar1), ops.as_tensor(logvar2)
    dm = ops.sub(mean2, mean1)
    ratio = ops.exp(ops.sub(logvar1, logvar2))
    sq = ops.mul(ops.mul(dm, dm), ops.exp(ops.scale(logvar2, -1.0)))
    inner = ops.add(ops.add(ops.sub(logvar2, logvar1), ratio), sq)
    return ops.scale(
        ops.sub(inner, Tensor(np.asarray(1.0, dtype=inner.dtype.type))), 0.5
    )


def gaussian_nll(x, mean, logvar) -> Tensor:
    """Elementwise negative log density of x under N(mean, e^logvar), nats."""
    x, mean, logvar = ops.as_tensor(x), ops.as_tensor(mean), ops.as_tensor(logvar)
    d = ops.sub(x, mean)
    quad = ops.mul(ops.mul(d, d), ops.exp(ops.scale(logvar, -1.0)))
    const = Tensor(np.asarray(LOG_TWO_PI, dtype=x.dtype.type))
    return ops.scale(ops.add(ops.add(const, logvar), quad), 0.5)


def _per_sample_sum(x: Tensor) -> Tensor:
    if x.ndim == 0:
        raise ValueError("expected a batched tensor, got a scalar")
    if x.ndim == 1:
        return x
    return ops.sum_(x, axis=tuple(range(1, x.ndim)))


def vlb_term(
    schedule: DiffusionSchedule, model_mean: Tensor, model_logvar: Tensor, x0, xt, t
) -> Tensor:
    """Per-sample variational term in nats.

    KL(q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t)) for t > 1; at t = 1 the
    continuous Gaussian negative log-likelihood of x0 under the model
    (these latents are unbounded, so no discretization is involved).
    """
    x0 = ops.as_tensor(x0)
    true_mean, _, _ = posterior_mean_variance(schedule, x0, xt, t)
    true_logvar = coef(schedule, "posterior_log_variance_clipped", t, x0)
    kl = _per_sample_sum(gaussian_kl(true_mean, true_logvar, model_mean, model_logvar))
    nll = _per_sample_sum(gaussian_nll(x0, model_mean, model_logvar))
    t_arr = _check_t(schedule, t)
    is_first = (t_arr == 1).astype(np.float64)
    is_first = np.broadcast_to(is_first, kl.shape).astype(kl.dtype.type)
    mask = Tensor(is_first.copy())
    inv_mask = Tensor((1.0 - is_first).astype(kl.dtype.type))
    return ops.add(ops.mul(mask, nll), ops.mul(inv_mask, kl))


def hybrid_loss(
    schedule: DiffusionSchedule,
    eps_hat: Tensor,
    v: Tensor,
    eps,
    x0,
    xt,
    t,
    vlb_weight: float = 1.0,
    detach_mean: bool = True,
) -> tuple[Tensor, dict]:
    """Noise-prediction MSE plus the weighted variational term.

    The VLB part sees a gradient-blocked copy of eps_hat by default, so it
    trains only the covariance head; the mean is trained by the MSE alone.
    detach_mean=False keeps the full graph, which is what finite-difference
    verification needs (a difference quotient cannot honor a stop-gradient).

    Returns (scalar loss, components) where components holds float values
    of the two terms for logging.
    """
    eps = ops.as_tensor(eps)
    diff = ops.sub(eps_hat, eps)
    loss_simple = ops.mean(ops.mul(diff, diff))

    mean_source = ops.stop_gradient(eps_hat) if detach_mean else eps_hat
    x0_hat = predict_x0_from_eps(schedule, xt, t, mean_source)
    model_mean, _, _ = posterior_mean_variance(schedule, x0_hat, xt, t)
    model_logvar = model_log_variance(schedule, v, t)
    per_sample = vlb_term(schedule, model_mean, model_logvar, x0, xt, t)
    loss_vlb = ops.mean(per_sample)

    total = ops.add(loss_simple, ops.scale(loss_vlb, vlb_weight))
    components = {"simple": float(loss_simple.item()), "vlb": float(loss_vlb.item())}
    return total, components


# -- reporting ------------------------------------------------------------


def write_schedule_csv(schedule: DiffusionSchedule, fileobj) -> None:
    """Dump t, beta_t, alpha_bar_t, posterior variance as CSV."""
    writer = csv.writer(fileobj)
    writer.writerow(["t", "beta", "alpha_bar", "posterior_variance"])
    for i in range(schedule.t_max):
        writer.writerow(
            [
                i + 1,
                repr(float(schedule.betas[i])),
                repr(float(schedule.alpha_bars[i])),
                repr(float(schedule.posterior_variance[i])),
            ]
        )
