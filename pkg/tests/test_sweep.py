"""Sweep harness: record shapes, compute columns, determinism, CSV."""

import numpy as np
import pytest

from ditlab.errors import ConfigError
from ditlab.model import mini_config, named_config
from ditlab.sweep import (
    EvalProtocol,
    SweepEntry,
    SweepRecord,
    model_name,
    read_sweep_csv,
    scaling_sweep,
    write_sweep_csv,
)
from ditlab.trainer import ToyLatents, TrainConfig, fresh_state, save_checkpoint, train


@pytest.fixture(scope="module")
def toy_setup(tmp_path_factory):
    """One short mini training run plus a zero-step checkpoint, shared."""
    root = tmp_path_factory.mktemp("sweep")
    config = mini_config()
    dataset = ToyLatents(
        config.num_classes, config.input_size, config.channels, seed=100
    )
    tcfg = TrainConfig(steps=600, batch_size=16, seed=100, ema_decay=0.99)
    state = train(config, tcfg, dataset)
    trained = root / "trained.ntc"
    save_checkpoint(trained, state, config, tcfg)
    untrained = root / "untrained.ntc"
    save_checkpoint(untrained, fresh_state(config, seed=100), config, tcfg)
    return config, dataset, trained, untrained, root


FAST = EvalProtocol(step_counts=(4, 8), sample_count=96, reference_count=1024)


class TestProtocolAndNames:
    def test_invalid_protocols_rejected(self):
        with pytest.raises(ConfigError):
            EvalProtocol(step_counts=())
        with pytest.raises(ConfigError):
            EvalProtocol(sample_count=1)

    def test_standard_names(self):
        assert model_name(named_config("XL/2")) == "XL/2"
        assert model_name(named_config("S/8")) == "S/8"

    def test_fallback_name_for_custom_dims(self):
        assert model_name(mini_config()) == "32x2/4"


class TestScalingSweep:
    def test_record_grid_shape(self, toy_setup):
        config, dataset, trained, untrained, root = toy_setup
        entries = [
            SweepEntry(config, trained),
            SweepEntry(config, untrained, name="zero"),
            SweepEntry(config, root / "nowhere.ntc", name="gone"),
        ]
        records = scaling_sweep(entries, dataset, FAST, cache_dir=root)
        assert len(records) == len(entries) * len(FAST.step_counts)
        by_status = {}
        for r in records:
            by_status.setdefault(r.status, 0)
            by_status[r.status] += 1
        assert by_status == {"ok": 4, "missing-checkpoint": 2}

    def test_missing_checkpoint_rows_keep_compute(self, toy_setup):
        config, dataset, *_, root = toy_setup
        records = scaling_sweep(
            [SweepEntry(config, None, name="skipped")], dataset, FAST, cache_dir=root
        )
        for r in records:
            assert r.status == "missing-checkpoint"
            assert r.metric is None
            assert r.train_step == 0
            assert r.training_gflops == 0.0
            assert r.sampling_tflops > 0.0

    def test_deterministic_bits(self, toy_setup):
        config, dataset, trained, *_ , root = toy_setup
        entries = [SweepEntry(config, trained)]
        a = scaling_sweep(entries, dataset, FAST, cache_dir=root)
        b = scaling_sweep(entries, dataset, FAST, cache_dir=root)
        assert [r.metric for r in a] == [r.metric for r in b]

    def test_trained_beats_zero_init(self, toy_setup):
        config, dataset, trained, untrained, root = toy_setup
        entries = [
            SweepEntry(config, trained, name="trained"),
            SweepEntry(config, untrained, name="zero"),
        ]
        records = scaling_sweep(entries, dataset, FAST, cache_dir=root)
        for steps in FAST.step_counts:
            values = {
                r.model: r.metric for r in records if r.num_steps == steps
            }
            assert values["trained"] < values["zero"], steps

    def test_training_compute_recorded(self, toy_setup):
        config, dataset, trained, *_ , root = toy_setup
        records = scaling_sweep(
            [SweepEntry(config, trained)], dataset, FAST, cache_dir=root
        )
        from ditlab.analysis import count_flops, training_compute

        expected = training_compute(count_flops(config).gflops, 16, 600)
        for r in records:
            assert r.training_gflops == expected
            assert r.train_step == 600

    def test_published_sampling_costs(self, toy_setup):
        # pure arithmetic: no checkpoints needed for the compute columns
        _, dataset, *_ , root = toy_setup
        protocol = EvalProtocol(step_counts=(128, 1000), reference_count=1024)
        entries = [
            SweepEntry(named_config("L/2"), None),
            SweepEntry(named_config("XL/2"), None),
        ]
        records = scaling_sweep(entries, dataset, protocol, cache_dir=root)
        costs = {(r.model, r.num_steps): r.sampling_tflops for r in records}
        assert round(costs[("L/2", 1000)], 1) == 80.7
        assert round(costs[("XL/2", 128)], 1) == 15.2

    def test_config_mismatch_rejected(self, toy_setup):
        config, dataset, trained, *_ , root = toy_setup
        from dataclasses import replace

        other = replace(config, hidden=64, heads=4)
        with pytest.raises(ConfigError):
            scaling_sweep(
                [SweepEntry(other, trained)], dataset, FAST, cache_dir=root
            )


class TestSweepCsv:
    def test_round_trip(self, toy_setup, tmp_path):
        config, dataset, trained, untrained, root = toy_setup
        entries = [
            SweepEntry(config, trained, name="trained"),
            SweepEntry(config, root / "nowhere.ntc", name="gone"),
        ]
        records = scaling_sweep(entries, dataset, FAST, cache_dir=root)
        path = tmp_path / "sweep.csv"
        write_sweep_csv(records, path)
        assert read_sweep_csv(path) == records

    def test_header_enforced(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("model,variant\nx,y\n")
        with pytest.raises(ValueError):
            read_sweep_csv(path)

    def test_blank_metric_cell(self, tmp_path):
        record = SweepRecord(
            model="gone",
            variant="adaln-zero",
            patch=4,
            num_steps=8,
            train_step=0,
            metric=None,
            sampling_tflops=1.5,
            training_gflops=0.0,
            status="missing-checkpoint",
        )
        path = tmp_path / "skip.csv"
        write_sweep_csv([record], path)
        text = path.read_text()
        assert ",,", text  # metric column is empty, not "None"
        assert read_sweep_csv(path)[0].metric is None
