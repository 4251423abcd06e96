"""Desk-scale training: toy data, AdamW, EMA shadow weights, checkpoints.

Every random draw in the loop comes from a generator keyed by
(seed, purpose, step), never from sequential state.  Resuming from a
checkpoint therefore replays the exact stream the uninterrupted run would
have seen; no generator state needs to be serialized.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from ditlab import rng as rngmod
from ditlab.diffcore import Tensor, save_tensors, load_tensors
from ditlab.errors import ConfigError, TrainingDiverged
from ditlab.model import DiTConfig, forward, init_parameters
from ditlab.model.network import ParameterStore
from ditlab.schedule import DiffusionSchedule, hybrid_loss, linear_schedule, q_sample


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 32
    learning_rate: float = 1e-4  # constant; no schedule or warmup
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 500
    keep_checkpoints: int = 3

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {b}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


# -- toy data ----------------------------------------------------------------


class ToyLatents:
    """Procedural class-conditional latents.

    Each class k carries an anisotropic cosine grating at angle pi*k/(2K),
    built from even factors cos(w (u-1/2)) so the pattern is invariant under
    horizontal flips (labels stay valid under the flip augmentation).  The
    angles stay inside a quarter turn: the even factors cannot tell theta
    from pi-theta, so a half-turn spread would collide classes.  A Gaussian
    texture rides on top.  The stream is normalized to zero mean and unit
    variance per channel, with calibration constants estimated once over a
    fixed 4096-sample draw.
    """

    TEXTURE_STD = 0.5
    CALIBRATION_SAMPLES = 4096

    def __init__(self, num_classes: int, input_size: int, channels: int, seed: int):
        if num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.input_size = input_size
        self.channels = channels
        self.seed = seed
        self._patterns = self._build_patterns()
        self._mean, self._std = self._calibrate()

    def _build_patterns(self) -> np.ndarray:
        k = self.num_classes
        coords = (np.arange(self.input_size) + 0.5) / self.input_size - 0.5
        u = coords[None, :]  # columns
        v = coords[:, None]  # rows
        patterns = np.empty((k, self.input_size, self.input_size, self.channels))
        for label in range(k):
            theta = np.pi * label / (2 * k)
            for c in range(self.channels):
                w = 2.0 * np.pi * (1.5 + 0.5 * c)
                patterns[label, :, :, c] = 1.6 * (
                    np.cos(w * np.cos(theta) * u) * np.cos(w * np.sin(theta) * v)
                )
        return patterns

    def _raw_batch(self, gen: np.random.Generator, labels: np.ndarray) -> np.ndarray:
        shape = (len(labels), self.input_size, self.input_size, self.channels)
        texture = gen.standard_normal(shape) * self.TEXTURE_STD
        return self._patterns[labels] + texture

    def _calibrate(self) -> tuple[np.ndarray, np.ndarray]:
        gen = rngmod.keyed_generator(self.seed, rngmod.DATA)
        labels = rngmod.keyed_generator(self.seed, rngmod.LABEL_DRAW).integers(
            0, self.num_classes, self.CALIBRATION_SAMPLES
        )
        raw = self._raw_batch(gen, labels)
        mean = raw.mean(axis=(0, 1, 2))
        std = raw.std(axis=(0, 1, 2))
        return mean, std

    def batch(self, batch_size: int, step: int) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic batch for a training step: (latents, labels)."""
        labels = rngmod.keyed_generator(self.seed, rngmod.LABEL_DRAW, step).integers(
            0, self.num_classes, batch_size
        )
        gen = rngmod.keyed_generator(self.seed, rngmod.DATA, step)
        raw = self._raw_batch(gen, labels)
        return ((raw - self._mean) / self._std).astype(np.float32), labels

    def class_means(self) -> np.ndarray:
        """Normalized noise-free pattern per class, for separability checks."""
        return ((self._patterns - self._mean) / self._std).astype(np.float32)

    def reference_set(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        """Held-out draw for evaluation statistics, disjoint from batches."""
        labels = rngmod.keyed_generator(self.seed, rngmod.REFERENCE, 0).integers(
            0, self.num_classes, count
        )
        gen = rngmod.keyed_generator(self.seed, rngmod.REFERENCE, 1)
        raw = self._raw_batch(gen, labels)
        return ((raw - self._mean) / self._std).astype(np.float32), labels


def hflip(z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Reverse the column axis of each sample independently with prob 1/2."""
    if z.ndim == 3:
        return np.ascontiguousarray(z[:, ::-1, :]) if rng.random() < 0.5 else z
    out = z.copy()
    mask = rng.random(z.shape[0]) < 0.5
    out[mask] = out[mask, :, ::-1, :]
    return out


# -- optimizer and EMA ---------------------------------------------------------


def init_moments(params: ParameterStore) -> dict[str, list[np.ndarray]]:
    return {
        name: [np.zeros_like(t.data), np.zeros_like(t.data)]
        for name, t in params.items()
    }


def adamw_step(
    params: ParameterStore,
    grads: Mapping[str, np.ndarray],
    moments: dict[str, list[np.ndarray]],
    config: TrainConfig,
    step: int,
) -> None:
    """In-place AdamW update with bias correction; step is 1-based."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr, eps = config.learning_rate, config.adam_eps
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m, v = moments[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if config.weight_decay:
            update = update + config.weight_decay * tensor.data
        tensor.data[...] = tensor.data - lr * update


def ema_update(
    ema: dict[str, np.ndarray], params: ParameterStore, decay: float
) -> None:
    """ema <- decay * ema + (1 - decay) * params, elementwise, in place."""
    for name, tensor in params.items():
        shadow = ema[name]
        shadow *= decay
        shadow += (1.0 - decay) * tensor.data


# -- checkpoints ---------------------------------------------------------------


@dataclass
class TrainState:
    params: ParameterStore
    ema: dict[str, np.ndarray]
    moments: dict[str, list[np.ndarray]]
    step: int

    def ema_store(self) -> ParameterStore:
        """EMA weights wrapped for inference."""
        return ParameterStore.from_state(self.ema, requires_grad=False)


def fresh_state(config: DiTConfig, seed: int) -> TrainState:
    params = init_parameters(config, seed)
    ema = {name: t.data.copy() for name, t in params.items()}
    return TrainState(params=params, ema=ema, moments=init_moments(params), step=0)


def save_checkpoint(
    path,
    state: TrainState,
    model_config: DiTConfig,
    train_config: TrainConfig,
    schedule_meta: Optional[dict] = None,
) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, t in state.params.items():
        tensors["params." + name] = t.data
    for name, arr in state.ema.items():
        tensors["ema." + name] = arr
    for name, (m, v) in state.moments.items():
        tensors["adam_m." + name] = m
        tensors["adam_v." + name] = v
    meta = {
        "step": state.step,
        "model": model_config.to_dict(),
        "train": dataclasses.asdict(train_config),
        "schedule": schedule_meta or {},
    }
    save_tensors(path, tensors, meta)


def load_checkpoint(path) -> tuple[TrainState, DiTConfig, TrainConfig, dict]:
    arrays, meta = load_tensors(path)
    model_config = DiTConfig.from_dict(meta["model"])
    train_config = TrainConfig(**meta["train"])
    params: dict[str, Tensor] = {}
    ema: dict[str, np.ndarray] = {}
    moments: dict[str, list[np.ndarray]] = {}
    for key, arr in arrays.items():
        prefix, name = key.split(".", 1)
        if prefix == "params":
            params[name] = Tensor(arr, requires_grad=True)
        elif prefix == "ema":
            ema[name] = arr
        elif prefix == "adam_m":
            moments.setdefault(name, [None, None])[0] = arr
        elif prefix == "adam_v":
            moments.setdefault(name, [None, None])[1] = arr
        else:
            raise ValueError(f"unrecognized checkpoint entry {key!r}")
    state = TrainState(
        params=ParameterStore(params), ema=ema, moments=moments, step=meta["step"]
    )
    return state, model_config, train_config, meta


def _prune_checkpoints(directory: Path, keep: int) -> None:
    found = sorted(directory.glob("step-*.ntc"))
    for stale in found[:-keep] if keep > 0 else found:
        stale.unlink()


# -- training loop --------------------------------------------------------------


def train(
    model_config: DiTConfig,
    train_config: TrainConfig,
    dataset: ToyLatents,
    schedule: Optional[DiffusionSchedule] = None,
    out_dir=None,
    resume=None,
) -> TrainState:
    """Run the training loop; returns the final state.

    With out_dir set, writes loss.csv plus periodic checkpoints under
    checkpoints/.  resume may name a checkpoint file; training continues
    from its step counter with identical bits to an uninterrupted run.
    A non-finite loss aborts with a diagnostic snapshot.
    """
    if schedule is None:
        schedule = linear_schedule()
    if dataset.input_size != model_config.input_size or dataset.channels != model_config.channels:
        raise ConfigError(
            f"dataset emits {dataset.input_size}x{dataset.input_size}x"
            f"{dataset.channels}, model wants {model_config.input_size}x"
            f"{model_config.input_size}x{model_config.channels}"
        )

    if resume is not None:
        state, ckpt_model, ckpt_train, _ = load_checkpoint(resume)
        if ckpt_model != model_config:
            raise ConfigError("checkpoint was written for a different model config")
        if ckpt_train != train_config:
            raise ConfigError("checkpoint was written for a different train config")
    else:
        state = fresh_state(model_config, train_config.seed)

    ckpt_dir = None
    log_file = None
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss.csv"
        fresh_log = not log_path.exists() or resume is None
        log_file = open(log_path, "w" if fresh_log else "a", newline="")
        writer = csv.writer(log_file)
        if fresh_log:
            writer.writerow(["step", "loss_simple", "loss_vlb", "seconds"])

    schedule_meta = {
        "t_max": schedule.t_max,
        "beta_start": float(schedule.betas[0]),
        "beta_end": float(schedule.betas[-1]),
    }
    seed = train_config.seed
    started = time.monotonic()

    try:
        for step in range(state.step + 1, train_config.steps + 1):
            x0, labels = dataset.batch(train_config.batch_size, step)
            x0 = hflip(x0, rngmod.keyed_generator(seed, rngmod.FLIP, step))
            t = rngmod.keyed_generator(seed, rngmod.TIMESTEP, step).integers(
                1, schedule.t_max + 1, train_config.batch_size
            )
            eps = (
                rngmod.keyed_generator(seed, rngmod.NOISE, step)
                .standard_normal(x0.shape)
                .astype(x0.dtype)
            )
            xt = q_sample(schedule, x0, t, eps)
            drop_rng = rngmod.keyed_generator(seed, rngmod.LABEL_DROP, step)
            eps_hat, v = forward(
                xt, t, labels, state.params, model_config,
                training=True, rng=drop_rng,
            )
            loss, parts = hybrid_loss(schedule, eps_hat, v, eps, x0, xt, t)

            if not np.isfinite(loss.item()):
                if ckpt_dir is not None:
                    state.step = step
                    save_checkpoint(
                        ckpt_dir / f"diverged-step-{step:06d}.ntc",
                        state, model_config, train_config, schedule_meta,
                    )
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: simple={parts['simple']!r} "
                    f"vlb={parts['vlb']!r}"
                )

            state.params.zero_grads()
            loss.backward()
            grads = {
                name: tensor.grad
                for name, tensor in state.params.items()
                if tensor.grad is not None
            }
            adamw_step(state.params, grads, state.moments, train_config, step)
            ema_update(state.ema, state.params, train_config.ema_decay)
            state.step = step

            if writer is not None:
                writer.writerow([
                    step,
                    repr(parts["simple"]),
                    repr(parts["vlb"]),
                    f"{time.monotonic() - started:.3f}",
                ])

            if ckpt_dir is not None and (
                step % train_config.checkpoint_every == 0
                or step == train_config.steps
            ):
                save_checkpoint(
                    ckpt_dir / f"step-{step:06d}.ntc",
                    state, model_config, train_config, schedule_meta,
                )
                _prune_checkpoints(ckpt_dir, train_config.keep_checkpoints)
    finally:
        if log_file is not None:
            log_file.close()

    return state


def read_loss_log(path) -> dict[str, np.ndarray]:
    """Columns of loss.csv as float arrays keyed by header name."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(cell) for cell in row] for row in reader]
    data = np.asarray(rows) if rows else np.empty((0, len(header)))
    return {name: data[:, i] for i, name in enumerate(header)}
