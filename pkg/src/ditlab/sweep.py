"""Metric-versus-compute sweeps over trained checkpoints.

Each (model, sampling step count) pair yields one record holding the
generative metric next to its compute cost, enough to draw quality/compute
curves.  Entries without a usable checkpoint still produce records (with
the metric blank) so a sweep's shape never silently changes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ditlab.analysis import count_flops, sampling_compute, training_compute
from ditlab.errors import ConfigError
from ditlab.metrics import (
    extract_features,
    frechet_distance,
    gaussian_stats,
    reference_stats,
)
from ditlab.model import DiTConfig
from ditlab.model.config import STANDARD_SIZES
from ditlab.sampler import SampleRequest, sample
from ditlab.schedule import linear_schedule
from ditlab.trainer import load_checkpoint


@dataclass(frozen=True)
class EvalProtocol:
    """Fixed sampling/measurement settings shared by every sweep record."""

    step_counts: tuple[int, ...] = (16, 32, 64, 128, 256, 1000)
    sample_count: int = 128
    sample_seed: int = 0
    extractor_seed: int = 7
    reference_count: int = 10_000
    guidance_scale: float = 1.0
    clamp_x0: bool = True

    def __post_init__(self) -> None:
        if not self.step_counts:
            raise ConfigError("step_counts must not be empty")
        if self.sample_count < 2:
            raise ConfigError(
                f"sample_count must be >= 2 for covariance statistics, "
                f"got {self.sample_count}"
            )


@dataclass(frozen=True)
class SweepEntry:
    config: DiTConfig
    checkpoint: Optional[Path] = None  # absent or missing file -> skip records
    name: Optional[str] = None  # defaults to the derived size name


@dataclass
class SweepRecord:
    model: str
    variant: str
    patch: int
    num_steps: int  # sampling steps
    train_step: int
    metric: Optional[float]  # None when the checkpoint was unavailable
    sampling_tflops: float  # per image
    training_gflops: float
    status: str  # "ok" | "missing-checkpoint"


SWEEP_CSV_FIELDS = [
    "model",
    "variant",
    "patch",
    "num_steps",
    "train_step",
    "metric",
    "sampling_tflops",
    "training_gflops",
    "status",
]


def model_name(config: DiTConfig) -> str:
    """Size-table name like "XL/2" when the dims match, else dims/patch."""
    dims = (config.depth, config.hidden, config.heads)
    for size, entry in STANDARD_SIZES.items():
        if entry == dims:
            return f"{size}/{config.patch}"
    return f"{config.hidden}x{config.depth}/{config.patch}"


def _schedule_from_meta(meta: dict):
    block = meta.get("schedule") or {}
    return linear_schedule(
        t_max=int(block.get("t_max", 1000)),
        beta_start=float(block.get("beta_start", 1e-4)),
        beta_end=float(block.get("beta_end", 2e-2)),
    )


def scaling_sweep(
    entries: Sequence[SweepEntry],
    dataset,
    protocol: EvalProtocol = EvalProtocol(),
    cache_dir=None,
) -> list[SweepRecord]:
    """One record per (entry, sampling step count); fully seed-deterministic.

    Compute columns come from the closed-form flop model, so they are filled
    in even for skipped entries; the metric compares EMA-weight samples
    against the dataset's cached reference statistics.
    """
    reference = reference_stats(
        dataset, protocol.extractor_seed, protocol.reference_count, cache_dir
    )
    guided = protocol.guidance_scale > 1.0
    records: list[SweepRecord] = []

    for entry in entries:
        config = entry.config
        name = entry.name or model_name(config)
        gflops = count_flops(config).gflops
        available = entry.checkpoint is not None and Path(entry.checkpoint).exists()

        if available:
            state, ckpt_config, train_config, meta = load_checkpoint(entry.checkpoint)
            if ckpt_config != config:
                raise ConfigError(
                    f"checkpoint {entry.checkpoint} holds a different model "
                    f"config than the sweep entry for {name!r}"
                )
            params = state.ema_store()
            schedule = _schedule_from_meta(meta)
            train_gflops = training_compute(
                gflops, train_config.batch_size, state.step
            )

        for steps in protocol.step_counts:
            tflops = sampling_compute(gflops, steps, guided=guided)
            if not available:
                records.append(
                    SweepRecord(
                        model=name,
                        variant=config.variant.value,
                        patch=config.patch,
                        num_steps=steps,
                        train_step=0,
                        metric=None,
                        sampling_tflops=tflops,
                        training_gflops=0.0,
                        status="missing-checkpoint",
                    )
                )
                continue
            labels = np.arange(protocol.sample_count) % config.num_classes
            request = SampleRequest(
                count=protocol.sample_count,
                labels=labels,
                guidance_scale=protocol.guidance_scale,
                num_steps=steps,
                seed=protocol.sample_seed,
                clamp_x0=protocol.clamp_x0,
            )
            result = sample(params, config, schedule, request)
            stats = gaussian_stats(
                extract_features(result.samples, protocol.extractor_seed)
            )
            records.append(
                SweepRecord(
                    model=name,
                    variant=config.variant.value,
                    patch=config.patch,
                    num_steps=steps,
                    train_step=state.step,
                    metric=frechet_distance(stats, reference),
                    sampling_tflops=tflops,
                    training_gflops=train_gflops,
                    status="ok",
                )
            )
    return records


def write_sweep_csv(records: Sequence[SweepRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_FIELDS)
        for r in records:
            writer.writerow(
                [
                    r.model,
                    r.variant,
                    r.patch,
                    r.num_steps,
                    r.train_step,
                    "" if r.metric is None else repr(r.metric),
                    repr(r.sampling_tflops),
                    repr(r.training_gflops),
                    r.status,
                ]
            )


def read_sweep_csv(path) -> list[SweepRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != SWEEP_CSV_FIELDS:
            raise ValueError(f"unexpected sweep CSV header: {header}")
        return [
            SweepRecord(
                model=row[0],
                variant=row[1],
                patch=int(row[2]),
                num_steps=int(row[3]),
                train_step=int(row[4]),
                metric=None if row[5] == "" else float(row[5]),
                sampling_tflops=float(row[6]),
                training_gflops=float(row[7]),
                status=row[8],
            )
            for row in reader
        ]
