import csv
import math

import numpy as np
import pytest

from sincvae import tensor as T
from sincvae import vae as V
from sincvae.tensor import ShapeError, Tensor

from conftest import numeric_grad


def tiny_arch(**kw):
    base = dict(in_channels=1, window_len=64, fs=64.0, filter_count=2, kernel_length=7, latent_dim=2,
                channels_per_block=3, activation="tanh")
    base.update(kw)
    return V.VaeArchitecture(**base)


def sinusoids(n=400, L=64, fs=64.0, seed=0):
    r = np.random.default_rng(seed)
    t = np.arange(L) / fs
    f = r.choice([4.0, 8.0], n)
    ph = r.uniform(0, 2 * np.pi, n)
    return np.sin(2 * np.pi * f[:, None] * t + ph[:, None])[:, None, :]


class TestShapes:
    def test_encode_decode_shapes(self, rng):
        m = V.VaeModel(tiny_arch(latent_dim=5), seed=0)
        x = rng.normal(size=(4, 1, 64))
        mu, logvar = V.encode(x, m)
        assert mu.shape == logvar.shape == (4, 5)
        assert V.decode(mu, m).shape == x.shape

    def test_bonn_architecture(self):
        arch = V.VaeArchitecture(in_channels=1, window_len=173, fs=173.61, filter_count=16,
                                 kernel_length=41, latent_dim=32)
        m = V.VaeModel(arch, seed=0)
        mu, _ = V.encode(np.zeros((2, 1, 173)), m)
        assert mu.shape == (2, 32)
        assert V.decode(mu, m).shape == (2, 1, 173)

    def test_chbmit_architecture(self):
        arch = V.VaeArchitecture(in_channels=23, window_len=256, fs=256.0, filter_count=4,
                                 kernel_length=71, latent_dim=128)
        m = V.VaeModel(arch, seed=0)
        mu, _ = V.encode(np.random.default_rng(0).normal(size=(1, 23, 256)), m)
        assert mu.shape == (1, 128)

    def test_plain_variant_has_no_cutoffs(self):
        m = V.VaeModel(tiny_arch(variant="plain"), seed=0)
        assert "sinc.cutoffs" not in m.params and m.band_edges() is None

    def test_zero_latent_finite(self):
        m = V.VaeModel(tiny_arch(), seed=0)
        assert np.isfinite(V.decode(np.zeros((1, 2)), m).data).all()

    def test_shape_mismatch_rejected(self):
        m = V.VaeModel(tiny_arch(), seed=0)
        with pytest.raises(ShapeError):
            V.encode(np.zeros((1, 2, 64)), m)
        with pytest.raises(ShapeError):
            V.decode(np.zeros((1, 3)), m)

    @pytest.mark.parametrize("bad", [dict(latent_dim=0), dict(kernel_length=8), dict(variant="x"),
                                     dict(activation="gelu"), dict(window_len=5)])
    def test_invalid_architecture(self, bad):
        with pytest.raises(ValueError):
            tiny_arch(**bad)

    @pytest.mark.parametrize("bad", [dict(learning_rate=0), dict(validation_fraction=1.0), dict(patience=0)])
    def test_invalid_train_config(self, bad):
        with pytest.raises(ValueError):
            V.TrainConfig(**bad)

    def test_train_config_defaults(self):
        c = V.TrainConfig()
        assert (c.learning_rate, c.batch_size, c.max_epochs, c.patience, c.validation_fraction) == \
            (0.0005, 128, 1000, 20, 0.2)


class TestLatent:
    def test_reparametrize_examples(self):
        mu = np.array([[0.3, -1.0]])
        assert np.array_equal(V.reparametrize(mu, np.zeros((1, 2)), np.zeros((1, 2))).data, mu)
        e = np.array([[0.7, -0.2]])
        assert np.array_equal(V.reparametrize(np.zeros((1, 2)), np.zeros((1, 2)), e).data, e)
        z = V.reparametrize(np.array([[1.0]]), np.array([[math.log(4.0)]]), np.array([[0.5]]))
        assert z.data[0, 0] == pytest.approx(2.0, abs=1e-15)

    def test_kl_examples(self):
        assert V.kl_divergence(np.zeros((3, 4)), np.zeros((3, 4))).item() == 0.0
        assert V.kl_divergence(np.ones((1, 1)), np.zeros((1, 1))).item() == pytest.approx(0.5)

    def test_kl_nonnegative_and_zero_only_at_prior(self, rng):
        for _ in range(20):
            mu, lv = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
            assert V.kl_divergence(mu, lv).item() > 0
        mu = np.zeros((2, 3))
        mu[1, 2] = 1e-3
        assert V.kl_divergence(mu, np.zeros((2, 3))).item() > 0

    def test_recon_zero_when_equal(self, rng):
        x = rng.normal(size=(2, 1, 8))
        _, recon, _ = V.elbo_loss(x, x, np.zeros((2, 1)), np.zeros((2, 1)))
        assert recon.item() == 0.0

    def test_loss_reductions(self, rng):
        x, xh = rng.normal(size=(2, 1, 8)), rng.normal(size=(2, 1, 8))
        mu, lv = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        tm, rm, km = V.elbo_loss(x, xh, mu, lv, "mean")
        ts, rs, ks = V.elbo_loss(x, xh, mu, lv, "sum")
        assert tm.item() == pytest.approx(rm.item() + km.item())
        assert ts.item() == pytest.approx(8 * rs.item() + ks.item())
        assert rm.item() == pytest.approx(((x - xh) ** 2).mean())


def jitter_biases(model, r):
    # zero biases put dead ReLU units exactly on the kink, where central differences are undefined
    for name, p in model.params.items():
        if name.endswith(".b") or name.endswith(".bias"):
            p.data = p.data + r.normal(0, 0.1, p.shape)


@pytest.mark.parametrize("variant,reduction,block", [
    ("sinc", "mean", "relu"), ("sinc", "sum", "relu"), ("plain", "sum", "relu"), ("sinc", "sum", "tanh")])
def test_full_model_gradients(variant, reduction, block):
    m = V.VaeModel(tiny_arch(variant=variant, recon_reduction=reduction, activation="identity",
                             block_activation=block), seed=3)
    r = np.random.default_rng(0)
    jitter_biases(m, r)
    x = r.normal(size=(3, 1, 64))
    eps = r.normal(size=(3, 2))
    total, _, _ = V.forward_loss(x, m, eps)
    T.backward(total)
    for name, p in m.params.items():
        analytic = p.grad.copy()
        num = numeric_grad(lambda: V.forward_loss(x, m, eps)[0].item(), p.data)
        scale = max(np.abs(num).max(), 1e-8)
        assert np.max(np.abs(analytic - num)) / scale < 1e-4, name


class TestEarlyStopping:
    def test_scripted_sequence(self):
        s = V.EarlyStopping(patience=3)
        seq = [5.0, 4.0, 3.0, 3.5, 3.2, 3.0]
        stops = [s.update(v) for v in seq]
        assert stops == [False, False, False, False, False, True]
        assert s.best_epoch == 2

    def test_improvement_resets(self):
        s = V.EarlyStopping(patience=2)
        assert [s.update(v) for v in [3, 4, 2, 5, 6]] == [False, False, False, False, True]


class TestTraining:
    def test_separable_data_recon_drops_tenfold(self):
        x = sinusoids()
        arch = tiny_arch(filter_count=4, kernel_length=15, latent_dim=4, channels_per_block=8,
                         activation="identity")
        cfg = V.TrainConfig(max_epochs=60, batch_size=32, learning_rate=0.002, seed=0)
        untrained = V.reconstruct_mse(x, V.VaeModel(arch, seed=1)).mean()
        m = V.train(x, cfg, arch)
        assert untrained / V.reconstruct_mse(x, m).mean() >= 10
        assert len(m.history) <= 60
        assert [h["epoch"] for h in m.history] == list(range(len(m.history)))

    def test_deterministic_history_and_params(self):
        x = sinusoids(120)
        cfg = V.TrainConfig(max_epochs=3, batch_size=32, seed=7)
        a, b = V.train(x, cfg, tiny_arch()), V.train(x, cfg, tiny_arch())
        assert a.history == b.history
        for k in a.params:
            assert np.array_equal(a.params[k].data, b.params[k].data)

    def test_best_parameters_restored(self):
        x = sinusoids(120)
        m = V.train(x, V.TrainConfig(max_epochs=8, batch_size=16, learning_rate=0.01, seed=1), tiny_arch())
        best = min(m.history, key=lambda h: h["val_loss"])
        assert m.best_epoch == best["epoch"]
        val = x[m.validation_indices]
        assert V._evaluate(val, m, 128)[0] == pytest.approx(best["val_loss"], rel=1e-12)

    def test_divergence_reported(self):
        x = sinusoids(64) * 1e200
        with pytest.raises(V.TrainingDivergedError, match="epoch 0"):
            V.train(x, V.TrainConfig(max_epochs=2, seed=0), tiny_arch(variant="plain"))

    def test_scores_nonnegative_and_repeatable(self, rng):
        m = V.VaeModel(tiny_arch(), seed=0)
        x = rng.normal(size=(10, 1, 64))
        a, b = V.reconstruct_mse(x, m), V.reconstruct_mse(x, m)
        assert np.array_equal(a, b) and (a >= 0).all()
        s1 = V.reconstruct_mse(x, m, stochastic=True, seed=4)
        assert np.array_equal(s1, V.reconstruct_mse(x, m, stochastic=True, seed=4))


class TestPersistence:
    def test_checkpoint_round_trip(self, tmp_path):
        m = V.VaeModel(tiny_arch(), seed=2)
        m.history = [{"epoch": 0, "train_loss": 1.5, "val_loss": 1.25, "recon": 1.0, "kl": 0.25}]
        V.save_checkpoint(m, tmp_path / "m.svae")
        raw = (tmp_path / "m.svae").read_bytes()
        assert raw[:4] == b"SVAE"
        m2 = V.load_checkpoint(tmp_path / "m.svae")
        assert m2.arch == m.arch and m2.history == m.history
        for k in m.params:
            assert np.array_equal(m.params[k].data, m2.params[k].data)
        V.save_checkpoint(m2, tmp_path / "m2.svae")
        assert (tmp_path / "m2.svae").read_bytes() == raw

    def test_bad_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE")
        with pytest.raises(ValueError):
            V.load_checkpoint(tmp_path / "x")
        m = V.VaeModel(tiny_arch(), seed=2)
        V.save_checkpoint(m, tmp_path / "m.svae")
        (tmp_path / "t.svae").write_bytes((tmp_path / "m.svae").read_bytes()[:-100])
        with pytest.raises(ValueError, match="truncated"):
            V.load_checkpoint(tmp_path / "t.svae")

    def test_history_csv(self, tmp_path):
        V.write_history_csv([{"epoch": 0, "train_loss": 2.0, "val_loss": 1.0, "recon": 0.5, "kl": 0.5}],
                            tmp_path / "h.csv")
        rows = list(csv.reader(open(tmp_path / "h.csv")))
        assert rows[0] == ["epoch", "train_loss", "val_loss", "recon", "kl"]
        assert rows[1] == ["0", "2.0", "1.0", "0.5", "0.5"]


@pytest.mark.parametrize("norm_axes", ["channels", "both", "none"])
def test_norm_axes_options_gradients(norm_axes):
    m = V.VaeModel(tiny_arch(norm_axes=norm_axes, block_activation="tanh"), seed=2)
    r = np.random.default_rng(1)
    x = r.normal(size=(2, 1, 64))
    eps = r.normal(size=(2, 2))
    T.backward(V.forward_loss(x, m, eps)[0])
    for name in ("sinc.cutoffs", "sinc.norm.gain"):
        p = m.params[name]
        analytic = p.grad.copy()
        num = numeric_grad(lambda: V.forward_loss(x, m, eps)[0].item(), p.data)
        assert np.max(np.abs(analytic - num)) / max(np.abs(num).max(), 1e-8) < 1e-4, name


def test_time_norm_removes_amplitude(rng):
    m = V.VaeModel(tiny_arch(), seed=0)
    x = rng.normal(size=(2, 1, 64))
    a, _ = V.encode(x, m)
    b, _ = V.encode(5.0 * x, m)
    np.testing.assert_allclose(a.data, b.data, atol=1e-4)


def test_unknown_norm_axes():
    with pytest.raises(ValueError, match="norm_axes"):
        tiny_arch(norm_axes="batch")
