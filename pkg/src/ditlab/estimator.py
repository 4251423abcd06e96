"""Estimator-style front end: fit on labeled latents, then sample and score.

DiTGenerator follows the scikit-learn estimator protocol (constructor args
stored verbatim, get_params/set_params, trailing-underscore fitted
attributes) without importing scikit-learn; the generative surface mirrors
mixture models: fit(X, y), sample(n), score(X).
"""

from __future__ import annotations

import numpy as np

from ditlab import rng as rngmod
from ditlab.errors import NotFitted
from ditlab.metrics import extract_features, frechet_distance, gaussian_stats
from ditlab.model import DiTConfig
from ditlab.sampler import SampleRequest, sample
from ditlab.schedule import linear_schedule
from ditlab.trainer import TrainConfig, train
from ditlab.validation import check_latent_array, check_labels


class ArrayDataset:
    """Bootstrap batches from a fixed labeled array, keyed by step.

    Implements the same protocol as the procedural toy dataset (batch,
    reference_set, shape attributes), so the training loop and reference
    statistics treat user arrays and generated streams identically.
    """

    def __init__(self, latents: np.ndarray, labels: np.ndarray, num_classes: int, seed: int):
        self.latents = latents
        self.labels = labels
        self.num_classes = num_classes
        self.input_size = latents.shape[1]
        self.channels = latents.shape[3]
        self.seed = seed

    def _draw(self, purpose: int, key: int, count: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rngmod.keyed_generator(self.seed, purpose, key).integers(
            0, len(self.latents), count
        )
        return self.latents[idx], self.labels[idx]

    def batch(self, batch_size: int, step: int) -> tuple[np.ndarray, np.ndarray]:
        return self._draw(rngmod.DATA, step, batch_size)

    def reference_set(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        return self._draw(rngmod.REFERENCE, 0, count)


class DiTGenerator:
    """Class-conditional latent generator trained with the hybrid objective.

    All constructor arguments are hyperparameters in the scikit-learn sense;
    nothing is validated or derived until fit.  Shapes (input size, channel
    count, number of classes) are inferred from the training arrays unless
    pinned explicitly, which the flattened [n, d] input layout requires.
    """

    _PARAM_NAMES = (
        "depth",
        "hidden",
        "heads",
        "patch",
        "variant",
        "class_dropout_prob",
        "steps",
        "batch_size",
        "learning_rate",
        "weight_decay",
        "ema_decay",
        "t_max",
        "beta_start",
        "beta_end",
        "sample_steps",
        "guidance_scale",
        "clamp_x0",
        "input_size",
        "channels",
        "num_classes",
        "random_state",
    )

    def __init__(
        self,
        depth=2,
        hidden=32,
        heads=2,
        patch=4,
        variant="adaln-zero",
        class_dropout_prob=0.1,
        steps=500,
        batch_size=32,
        learning_rate=1e-4,
        weight_decay=0.0,
        ema_decay=0.99,
        t_max=1000,
        beta_start=1e-4,
        beta_end=2e-2,
        sample_steps=16,
        guidance_scale=1.0,
        clamp_x0=True,
        input_size=None,
        channels=None,
        num_classes=None,
        random_state=0,
    ):
        self.depth = depth
        self.hidden = hidden
        self.heads = heads
        self.patch = patch
        self.variant = variant
        self.class_dropout_prob = class_dropout_prob
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.ema_decay = ema_decay
        self.t_max = t_max
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.sample_steps = sample_steps
        self.guidance_scale = guidance_scale
        self.clamp_x0 = clamp_x0
        self.input_size = input_size
        self.channels = channels
        self.num_classes = num_classes
        self.random_state = random_state

    # -- estimator protocol ------------------------------------------------

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **params) -> "DiTGenerator":
        for name, value in params.items():
            if name not in self._PARAM_NAMES:
                raise ValueError(
                    f"invalid parameter {name!r} for DiTGenerator; "
                    f"valid parameters: {sorted(self._PARAM_NAMES)}"
                )
            setattr(self, name, value)
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "state_"):
            raise NotFitted(
                "this DiTGenerator instance is not fitted yet; call fit first"
            )

    # -- fitting -----------------------------------------------------------

    def fit(self, X, y) -> "DiTGenerator":
        """Train on labeled latents; X is [n, I, I, C] or flattened [n, d]."""
        X = check_latent_array(X, self.input_size, self.channels)
        y = check_labels(y, X.shape[0], self.num_classes)
        num_classes = (
            int(y.max()) + 1 if self.num_classes is None else self.num_classes
        )

        config = DiTConfig(
            depth=self.depth,
            hidden=self.hidden,
            heads=self.heads,
            patch=self.patch,
            input_size=X.shape[1],
            channels=X.shape[3],
            num_classes=num_classes,
            variant=self.variant,
            class_dropout_prob=self.class_dropout_prob,
        )
        train_config = TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            ema_decay=self.ema_decay,
            seed=self.random_state,
        )
        dataset = ArrayDataset(X, y, num_classes, seed=self.random_state)
        schedule = linear_schedule(self.t_max, self.beta_start, self.beta_end)

        state = train(config, train_config, dataset, schedule=schedule)

        self.config_ = config
        self.schedule_ = schedule
        self.state_ = state
        self.dataset_ = dataset
        self.classes_ = np.arange(num_classes)
        return self

    # -- generation and scoring ---------------------------------------------

    def sample(self, n: int, labels=None, seed: int = 0) -> np.ndarray:
        """Generate n latents from the EMA weights; returns [n, I, I, C]."""
        self._check_fitted()
        if labels is None and self.guidance_scale == 1.0:
            label_arg = None
        elif labels is None:
            label_arg = np.arange(n) % self.config_.num_classes
        else:
            label_arg = labels
        request = SampleRequest(
            count=n,
            labels=label_arg,
            guidance_scale=self.guidance_scale,
            num_steps=self.sample_steps,
            seed=seed,
            clamp_x0=self.clamp_x0,
        )
        result = sample(self.state_.ema_store(), self.config_, self.schedule_, request)
        return result.samples

    def score(self, X, y=None) -> float:
        """Negative Frechet distance between X and fresh model samples.

        Higher is better, per estimator convention; y is accepted and
        ignored.  Deterministic for a fitted estimator and fixed X.
        """
        self._check_fitted()
        X = check_latent_array(
            X, self.config_.input_size, self.config_.channels
        )
        count = max(X.shape[0], 2)
        generated = self.sample(count, seed=self.random_state)
        seed = self.random_state
        stats_x = gaussian_stats(extract_features(X, seed))
        stats_g = gaussian_stats(extract_features(generated, seed))
        return -frechet_distance(stats_x, stats_g)
