"""Training loop pieces: toy data, augmentation, AdamW, EMA, checkpoints."""

import types

import numpy as np
import pytest
from scipy import stats

from ditlab.errors import ConfigError, TrainingDiverged
from ditlab.model import init_parameters, mini_config
from ditlab.rng import TIMESTEP, keyed_generator
from ditlab.trainer import (
    ToyLatents,
    TrainConfig,
    adamw_step,
    ema_update,
    fresh_state,
    hflip,
    init_moments,
    load_checkpoint,
    read_loss_log,
    save_checkpoint,
    train,
)


class _ConstRoll:
    """Stand-in generator whose uniform draws are a fixed value."""

    def __init__(self, value):
        self.value = value

    def random(self, n=None):
        if n is None:
            return self.value
        return np.full(n, self.value)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig(steps=10)
        assert cfg.learning_rate == 1e-4
        assert cfg.weight_decay == 0.0
        assert cfg.ema_decay == 0.9999
        assert (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"steps": -1},
            {"steps": 1, "batch_size": 0},
            {"steps": 1, "learning_rate": 0.0},
            {"steps": 1, "learning_rate": -1e-4},
            {"steps": 1, "ema_decay": 1.0},
            {"steps": 1, "ema_decay": -0.1},
            {"steps": 1, "adam_beta1": 1.0},
            {"steps": 1, "adam_beta2": -0.2},
            {"steps": 1, "weight_decay": -0.5},
        ],
    )
    def test_invalid_fields_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestToyLatents:
    def _dataset(self, seed=0):
        return ToyLatents(num_classes=4, input_size=8, channels=2, seed=seed)

    def test_same_seed_same_stream(self):
        a, b = self._dataset(7), self._dataset(7)
        xa, la = a.batch(16, step=3)
        xb, lb = b.batch(16, step=3)
        assert np.array_equal(xa, xb)
        assert np.array_equal(la, lb)

    def test_different_seed_differs(self):
        xa, _ = self._dataset(7).batch(16, step=3)
        xb, _ = self._dataset(8).batch(16, step=3)
        assert not np.array_equal(xa, xb)

    def test_steps_are_distinct_draws(self):
        ds = self._dataset()
        xa, _ = ds.batch(8, step=1)
        xb, _ = ds.batch(8, step=2)
        assert not np.array_equal(xa, xb)

    def test_class_separability(self):
        means = self._dataset().class_means()
        k = means.shape[0]
        flat = means.reshape(k, -1)
        for i in range(k):
            for j in range(i + 1, k):
                assert np.linalg.norm(flat[i] - flat[j]) >= 1.0, (i, j)

    def test_channel_statistics(self):
        latents, _ = self._dataset().batch(10_000, step=1)
        mean = latents.mean(axis=(0, 1, 2))
        var = latents.var(axis=(0, 1, 2))
        assert np.all(np.abs(mean) < 0.05)
        assert np.all(np.abs(var - 1.0) < 0.1)

    def test_labels_in_range(self):
        _, labels = self._dataset().batch(256, step=5)
        assert labels.min() >= 0 and labels.max() < 4

    def test_patterns_are_flip_invariant(self):
        # class patterns are built from even cosines, so flipping columns
        # leaves them unchanged and flip augmentation preserves labels
        means = self._dataset().class_means()
        np.testing.assert_allclose(means, means[:, :, ::-1, :], atol=1e-12)

    def test_reference_set_deterministic_and_shaped(self):
        ds = self._dataset()
        xa, la = ds.reference_set(64)
        xb, lb = ds.reference_set(64)
        assert np.array_equal(xa, xb)
        assert np.array_equal(la, lb)
        assert xa.shape == (64, 8, 8, 2)
        assert xa.dtype == np.float32

    def test_reference_disjoint_from_training_stream(self):
        ds = self._dataset()
        ref, _ = ds.reference_set(8)
        batch, _ = ds.batch(8, step=0)
        assert not np.array_equal(ref, batch)

    def test_needs_two_classes(self):
        with pytest.raises(ConfigError):
            ToyLatents(num_classes=1, input_size=8, channels=2, seed=0)


class TestHflip:
    def test_double_flip_is_identity(self, rng):
        z = rng.standard_normal((4, 6, 6, 2))
        always = _ConstRoll(0.0)  # < 0.5 flips every sample
        flipped = hflip(hflip(z, always), _ConstRoll(0.0))
        np.testing.assert_array_equal(flipped, z)
        assert not np.array_equal(hflip(z, always), z)

    def test_never_flip_returns_input(self, rng):
        z = rng.standard_normal((3, 4, 4, 1))
        out = hflip(z, _ConstRoll(0.9))
        np.testing.assert_array_equal(out, z)

    def test_column_ramp_reverses(self):
        z = np.broadcast_to(
            np.arange(6.0)[None, None, :, None], (2, 6, 6, 3)
        ).copy()
        out = hflip(z, _ConstRoll(0.0))
        np.testing.assert_array_equal(out[0, 0, :, 0], np.arange(6.0)[::-1])

    def test_single_sample_path(self, rng):
        z = rng.standard_normal((5, 5, 2))
        out = hflip(z, _ConstRoll(0.0))
        np.testing.assert_array_equal(out, z[:, ::-1, :])
        assert hflip(z, _ConstRoll(0.9)) is z

    def test_empirical_flip_rate(self):
        n = 100_000
        z = np.broadcast_to(
            np.arange(4.0)[None, None, :, None], (n, 1, 4, 1)
        ).copy()
        out = hflip(z, np.random.default_rng(123))
        flipped = np.any(out != z, axis=(1, 2, 3))
        rate = flipped.mean()
        sigma = np.sqrt(0.25 / n)
        assert abs(rate - 0.5) < 3 * sigma


class TestAdamw:
    def _scalar_store(self, value):
        config = mini_config()
        params = init_parameters(config, seed=0)
        name = next(iter(params.names()))
        params[name].data.flat[0] = value
        return params, name

    def test_zero_grads_zero_moments_unchanged(self):
        config = mini_config()
        params = init_parameters(config, seed=1)
        before = {n: t.data.copy() for n, t in params.items()}
        grads = {n: np.zeros_like(t.data) for n, t in params.items()}
        adamw_step(params, grads, init_moments(params), TrainConfig(steps=1), step=1)
        for name, t in params.items():
            assert np.array_equal(t.data, before[name]), name

    def test_missing_grads_skip_tensor(self):
        config = mini_config()
        params = init_parameters(config, seed=1)
        before = {n: t.data.copy() for n, t in params.items()}
        adamw_step(params, {}, init_moments(params), TrainConfig(steps=1), step=1)
        for name, t in params.items():
            assert np.array_equal(t.data, before[name])

    def test_scalar_quadratic_first_step(self):
        # f(x) = x^2/2 at x=1 has gradient 1; after bias correction the first
        # update is m_hat / (sqrt(v_hat) + eps) = 1/(1 + eps), so x moves to
        # 1 - lr within eps.
        params, name = self._scalar_store(1.0)
        grads = {name: np.zeros_like(params[name].data)}
        grads[name].flat[0] = 1.0
        cfg = TrainConfig(steps=1, learning_rate=0.1)
        adamw_step(params, grads, init_moments(params), cfg, step=1)
        assert abs(params[name].data.flat[0] - 0.9) < 1e-8

    def test_weight_decay_decouples(self):
        cfg_wd = TrainConfig(steps=1, learning_rate=0.5, weight_decay=0.2)
        cfg_plain = TrainConfig(steps=1, learning_rate=0.5)
        config = mini_config()
        gen = np.random.default_rng(5)
        grads_src = {
            n: gen.standard_normal(t.shape)
            for n, t in init_parameters(config, seed=2).items()
        }

        def run(cfg):
            params = init_parameters(config, seed=2)
            for t in params.tensors():
                t.data += 0.3  # make the decay term visible on zero-init tensors
            adamw_step(params, grads_src, init_moments(params), cfg, step=1)
            return params

        decayed, plain = run(cfg_wd), run(cfg_plain)
        for name in decayed.names():
            theta = init_parameters(config, seed=2)[name].data + 0.3
            expected = plain[name].data - 0.5 * 0.2 * theta
            # parameters are float32, so the two update orders round apart
            np.testing.assert_allclose(decayed[name].data, expected, atol=1e-6)

    def test_zero_learning_rate_freezes_parameters(self, rng):
        # TrainConfig itself rejects lr=0, but the optimizer step must still
        # be a no-op on parameters when the rate is zero (moments may move).
        config = mini_config()
        params = init_parameters(config, seed=3)
        before = {n: t.data.copy() for n, t in params.items()}
        grads = {n: rng.standard_normal(t.shape) for n, t in params.items()}
        frozen = types.SimpleNamespace(
            learning_rate=0.0, weight_decay=0.0,
            adam_beta1=0.9, adam_beta2=0.999, adam_eps=1e-8,
        )
        adamw_step(params, grads, init_moments(params), frozen, step=1)
        for name, t in params.items():
            assert np.array_equal(t.data, before[name])

    def test_moments_accumulate(self, rng):
        config = mini_config()
        params = init_parameters(config, seed=4)
        moments = init_moments(params)
        name = next(iter(params.names()))
        grads = {name: np.ones_like(params[name].data)}
        cfg = TrainConfig(steps=1)
        adamw_step(params, grads, moments, cfg, step=1)
        m, v = moments[name]
        np.testing.assert_allclose(m, 0.1 * np.ones_like(m), atol=1e-15)
        np.testing.assert_allclose(v, 0.001 * np.ones_like(v), atol=1e-15)


class TestEma:
    def _pair(self):
        config = mini_config()
        params = init_parameters(config, seed=6)
        gen = np.random.default_rng(7)
        for t in params.tensors():
            t.data[...] = gen.standard_normal(t.shape)
        ema = {n: gen.standard_normal(t.shape) for n, t in params.items()}
        return params, ema

    def test_decay_zero_copies_params(self):
        params, ema = self._pair()
        ema_update(ema, params, decay=0.0)
        for name, t in params.items():
            np.testing.assert_array_equal(ema[name], t.data)

    def test_decay_one_freezes_ema(self):
        params, ema = self._pair()
        before = {n: a.copy() for n, a in ema.items()}
        ema_update(ema, params, decay=1.0)
        for name in ema:
            np.testing.assert_array_equal(ema[name], before[name])

    def test_fixed_point(self):
        params, _ = self._pair()
        ema = {n: t.data.copy() for n, t in params.items()}
        ema_update(ema, params, decay=0.37)
        for name, t in params.items():
            np.testing.assert_allclose(ema[name], t.data, atol=1e-15)

    def test_geometric_convergence_to_frozen_params(self):
        params, ema = self._pair()
        name = next(iter(ema))
        gap0 = np.abs(ema[name] - params[name].data).max()
        decay = 0.8
        for _ in range(10):
            ema_update(ema, params, decay)
        gap = np.abs(ema[name] - params[name].data).max()
        # the (1-decay)*params term rounds at float32 precision every update
        assert gap == pytest.approx(gap0 * decay**10, rel=1e-6)


class TestTimestepDraws:
    def test_uniform_over_schedule(self):
        # the loop draws t with this exact keying; 1000 bins over 1e5 draws
        draws = keyed_generator(0, TIMESTEP, 1).integers(1, 1001, 100_000)
        counts = np.bincount(draws, minlength=1001)[1:]
        stat, _ = stats.chisquare(counts)
        assert stat < stats.chi2.ppf(1 - 1e-6, df=999)
        assert draws.min() >= 1 and draws.max() <= 1000


class TestTrain:
    def _setup(self, **overrides):
        config = mini_config()
        ds = ToyLatents(config.num_classes, config.input_size, config.channels, seed=1)
        defaults = dict(steps=12, batch_size=4, seed=5, checkpoint_every=5)
        defaults.update(overrides)
        return config, ds, TrainConfig(**defaults)

    def test_runs_and_logs(self, tmp_path):
        config, ds, tcfg = self._setup()
        state = train(config, tcfg, ds, out_dir=tmp_path)
        assert state.step == 12
        log = read_loss_log(tmp_path / "loss.csv")
        assert list(log) == ["step", "loss_simple", "loss_vlb", "seconds"]
        assert len(log["step"]) == 12
        assert np.all(np.isfinite(log["loss_simple"]))
        assert np.all(np.isfinite(log["loss_vlb"]))
        assert np.array_equal(log["step"], np.arange(1, 13))

    def test_deterministic_in_seed(self):
        config, ds, tcfg = self._setup(steps=6)
        a = train(config, tcfg, ds)
        b = train(config, tcfg, ds)
        for name in a.params.names():
            assert np.array_equal(a.params[name].data, b.params[name].data)
            assert np.array_equal(a.ema[name], b.ema[name])

    def test_shape_mismatch_rejected(self):
        config, _, tcfg = self._setup()
        wrong = ToyLatents(config.num_classes, 16, config.channels, seed=1)
        with pytest.raises(ConfigError):
            train(config, tcfg, wrong)

    def test_checkpoint_save_load_save_byte_identical(self, tmp_path):
        config, ds, tcfg = self._setup(steps=4)
        state = train(config, tcfg, ds)
        first = tmp_path / "a.ntc"
        second = tmp_path / "b.ntc"
        save_checkpoint(first, state, config, tcfg)
        loaded, model_cfg, train_cfg, meta = load_checkpoint(first)
        assert model_cfg == config
        assert train_cfg == tcfg
        assert meta["step"] == 4
        save_checkpoint(second, loaded, model_cfg, train_cfg)
        assert first.read_bytes() == second.read_bytes()

    def test_resume_is_bit_exact(self, tmp_path):
        config, ds, tcfg = self._setup(steps=20, checkpoint_every=10)
        full = train(config, tcfg, ds, out_dir=tmp_path / "full")
        ckpt = tmp_path / "full" / "checkpoints" / "step-000010.ntc"
        assert ckpt.exists()
        resumed = train(
            config, tcfg, ds, out_dir=tmp_path / "resumed", resume=ckpt
        )
        assert resumed.step == 20
        for name in full.params.names():
            assert np.array_equal(full.params[name].data, resumed.params[name].data)
            assert np.array_equal(full.ema[name], resumed.ema[name])
            assert np.array_equal(full.moments[name][0], resumed.moments[name][0])
            assert np.array_equal(full.moments[name][1], resumed.moments[name][1])
        log = read_loss_log(tmp_path / "resumed" / "loss.csv")
        assert np.array_equal(log["step"], np.arange(11, 21))

    def test_resume_rejects_other_configs(self, tmp_path):
        config, ds, tcfg = self._setup(steps=10, checkpoint_every=5)
        train(config, tcfg, ds, out_dir=tmp_path)
        ckpt = tmp_path / "checkpoints" / "step-000005.ntc"
        other = TrainConfig(steps=10, batch_size=4, seed=5, checkpoint_every=5,
                            learning_rate=3e-4)
        with pytest.raises(ConfigError):
            train(config, other, ds, resume=ckpt)

    def test_checkpoint_retention(self, tmp_path):
        config, ds, tcfg = self._setup(
            steps=35, checkpoint_every=10, keep_checkpoints=2
        )
        train(config, tcfg, ds, out_dir=tmp_path)
        names = sorted(p.name for p in (tmp_path / "checkpoints").glob("*.ntc"))
        assert names == ["step-000030.ntc", "step-000035.ntc"]

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_divergence_aborts_with_snapshot(self, tmp_path):
        config, ds, tcfg = self._setup(steps=8, learning_rate=1e10)
        with pytest.raises(TrainingDiverged):
            train(config, tcfg, ds, out_dir=tmp_path)
        snapshots = list((tmp_path / "checkpoints").glob("diverged-step-*.ntc"))
        assert len(snapshots) == 1

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_divergence_without_out_dir_still_raises(self):
        config, ds, tcfg = self._setup(steps=8, learning_rate=1e10)
        with pytest.raises(TrainingDiverged):
            train(config, tcfg, ds)

    def test_zero_steps_returns_fresh_state(self):
        config, ds, tcfg = self._setup(steps=0)
        state = train(config, tcfg, ds)
        assert state.step == 0
        fresh = fresh_state(config, tcfg.seed)
        for name in state.params.names():
            assert np.array_equal(state.params[name].data, fresh.params[name].data)

    def test_ema_state_mirrors_params_shapes(self):
        config, ds, tcfg = self._setup(steps=2)
        state = train(config, tcfg, ds)
        assert set(state.ema) == set(state.params.names())
        for name, t in state.params.items():
            assert state.ema[name].shape == t.shape
