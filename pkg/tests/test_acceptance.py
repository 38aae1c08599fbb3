"""Acceptance criteria; each test prints a PASS/FAIL line in the terminal summary."""
import json
import os
import time

import numpy as np
import pytest

from conftest import numeric_grad
from sincvae import cli, detector, selection, signal
from sincvae import tensor as T
from sincvae import vae as V
from sincvae.ingest import SynthSpec, label_windows, read_edf, read_edf_header, synth_generate, write_edf
from sincvae.selection import special
from sincvae.signal import TimeSeriesRecording
from sincvae.sinclayer import effective_cutoffs, frequency_response, sinc_kernel


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


@pytest.mark.acceptance(1, "gradient correctness on a tiny SincVAE")
def test_gradients_match_finite_differences():
    with Timer() as t:
        arch = V.VaeArchitecture(in_channels=1, window_len=64, fs=64.0, filter_count=2, kernel_length=7,
                                 latent_dim=2, channels_per_block=4)
        model = V.VaeModel(arch, seed=0)
        r = np.random.default_rng(0)
        # biases start at zero, which parks ReLU units on their kink; nudge them off it
        for name, p in model.params.items():
            if name.endswith(".b"):
                p.data = p.data + r.normal(0, 0.1, p.shape)
        x = r.normal(size=(2, 1, 64))
        eps = r.normal(size=(2, 2))
        total, _, _ = V.forward_loss(x, model, eps)
        T.backward(total)
        worst = {}
        for name, p in model.params.items():
            analytic = p.grad.copy()
            num = numeric_grad(lambda: V.forward_loss(x, model, eps)[0].item(), p.data, 1e-6)
            worst[name] = float(np.max(np.abs(analytic - num)) / max(np.abs(num).max(), 1e-8))
    assert "sinc.cutoffs" in worst
    assert max(worst.values()) < 1e-4, worst
    assert t.elapsed < 10.0


@pytest.mark.acceptance(2, "filterbank spectral contract")
def test_filterbank_spectrum():
    with Timer() as t:
        fs, L, nfft = 256.0, 101, 4096
        r = np.random.default_rng(2)
        for _ in range(20):
            raw1 = r.uniform(8.0, 60.0)
            raw2 = raw1 + r.uniform(10.0, 40.0)
            if r.random() < 0.5:  # negated raw cutoffs map to the same band
                raw1, raw2 = -raw1, -raw2
            f1, f2 = (float(v) for v in effective_cutoffs(np.array(raw1), np.array(raw2)))
            freqs, mag = frequency_response(sinc_kernel(f1, f2, L, fs), fs, nfft)
            peak_idx = int(np.argmax(mag))
            bin_hz = fs / nfft
            assert f1 - bin_hz <= freqs[peak_idx] <= f2 + bin_hz, (f1, f2, freqs[peak_idx])
            probe = min(2 * f2, 0.95 * fs / 2)
            for f in (0.0, probe):
                level = mag[int(np.argmin(np.abs(freqs - f)))]
                assert 20 * np.log10(level / mag[peak_idx]) <= -20.0, (f1, f2, f)
    assert t.elapsed < 5.0


@pytest.mark.acceptance(3, "closed-form KL against Monte Carlo")
def test_kl_matches_monte_carlo():
    with Timer() as t:
        r = np.random.default_rng(3)
        assert V.kl_divergence(np.zeros((1, 4)), np.zeros((1, 4))).item() == 0.0
        for _ in range(10):
            mu = r.normal(0, 1.0, size=(1, 8))
            logvar = r.uniform(-2.0, 1.0, size=(1, 8))
            closed = V.kl_divergence(mu, logvar).item()
            sigma = np.exp(0.5 * logvar)
            eps = r.standard_normal((100_000, 8))
            z = mu + sigma * eps
            # log q(z) - log p(z); the 2*pi terms cancel
            log_ratio = 0.5 * np.sum(z ** 2 - eps ** 2 - logvar, axis=1)
            mc = float(log_ratio.mean())
            assert abs(mc - closed) / closed < 0.01, (closed, mc)
    assert t.elapsed < 10.0


# weights (lb) of 11 men from the worked example that introduced the W test; W reported as 0.79
MEN_WEIGHTS = [148, 154, 158, 160, 161, 162, 166, 170, 182, 195, 236]


@pytest.mark.acceptance(4, "statistical tests against references and hand fixtures")
def test_statistics():
    scipy_stats = pytest.importorskip("scipy.stats")
    with Timer() as t:
        w, p = selection.shapiro_wilk(MEN_WEIGHTS)
        assert round(w, 2) == 0.79
        ref = scipy_stats.shapiro(MEN_WEIGHTS)
        assert abs(w - ref.statistic) < 1e-6 and abs(p - ref.pvalue) < 1e-3

        r = np.random.default_rng(4)
        a, b = np.round(r.normal(size=12), 2), np.round(r.normal(0.8, size=15), 2)
        u, p = selection.mann_whitney_u(a, b)
        ref = scipy_stats.mannwhitneyu(a, b, method="asymptotic", use_continuity=True)
        assert u == ref.statistic and abs(p - ref.pvalue) < 1e-3

        groups = [np.round(r.normal(m, size=n), 1) for m, n in ((0, 7), (0.6, 9), (1.2, 8))]
        h, p = selection.kruskal_wallis(groups)
        ref = scipy_stats.kruskal(*groups)
        assert abs(h - ref.statistic) < 1e-6 and abs(p - ref.pvalue) < 1e-3

        f, p = selection.anova_oneway(groups)
        ref = scipy_stats.f_oneway(*groups)
        assert abs(f - ref.statistic) < 1e-6 and abs(p - ref.pvalue) < 1e-3

        assert selection.kruskal_wallis([[1, 2], [3, 4]])[0] == pytest.approx(2.4, abs=1e-12)
        assert selection.mann_whitney_u([1, 2], [3, 4])[0] == 0.0
        assert selection.anova_oneway([[1, 2, 3], [2, 3, 4]])[0] == 1.5

        # tabulated critical values
        assert abs(special.chi2_sf(3.841458820694124, 1) - 0.05) < 1e-9
        assert abs(special.f_sf(4.964602743730711, 1, 10) - 0.05) < 1e-9
        assert abs(special.norm_sf(1.959963984540054) - 0.025) < 1e-12
    assert t.elapsed < 5.0


@pytest.mark.acceptance(5, "selection pipeline")
def test_selection_pipeline():
    space = selection.chbmit_space()
    grid = selection.grid_expand(space)
    assert len(grid) == 210

    r = np.random.default_rng(5)
    dominant = grid[137]["config_id"]
    results = []
    for cfg in grid:
        base = 0.2 if cfg["config_id"] == dominant else 1.0 + 0.5 * r.random()
        results.append(selection.TrialResult(cfg["config_id"], cfg, r.normal(base, 0.01, 10), 1000))
    rep = selection.select_configuration(results)
    order = list(rep.stages)
    for a, b in zip(order, order[1:]):
        assert set(rep.stages[b]) <= set(rep.stages[a])
    assert rep.chosen == dominant

    # a realistic table where several configurations survive every stage
    close = [selection.TrialResult(c["config_id"], c, r.gamma(20, 0.05 * (1 + 0.02 * i), 10), 1000)
             for i, c in enumerate(grid)]
    first = selection.select_configuration(close).to_json()
    assert selection.select_configuration(list(reversed(close))).to_json() == first
    assert selection.select_configuration(close).to_json() == first


def _synthetic_split():
    # same durations and burst settings as the `synth` command defaults
    (normal,), _ = synth_generate(SynthSpec(duration_s=2000, seed=11))
    (mixed,), (ann,) = synth_generate(SynthSpec(duration_s=1200, burst_count=100, burst_duration_s=5,
                                                burst_gain=3.0, seed=12))
    train = signal.segment_windows(normal)
    stats = signal.fit_zscore(train)
    train = signal.zscore(train, stats)
    test = signal.zscore(signal.segment_windows(mixed), stats)
    return train, test, label_windows(test.start_times, 1.0, ann.intervals)


def _detect(train, test, labels, variant):
    arch = V.VaeArchitecture(in_channels=1, window_len=train.window_len, fs=train.fs, variant=variant)
    model = V.train(train.windows, V.TrainConfig(seed=0), arch)
    val = V.reconstruct_mse(train.windows[model.validation_indices], model)
    scores = V.reconstruct_mse(test.windows, model)
    return detector.evaluate(scores, labels, val, detector.ThresholdPolicy.parse("percentile:95"))


@pytest.mark.slow
@pytest.mark.acceptance(6, "end-to-end synthetic detection (sinc, then plain)")
def test_end_to_end_synthetic():
    train, test, labels = _synthetic_split()
    assert len(train) >= 2000 and train.fs == 128.0 and train.n_channels == 1
    with Timer() as t:
        rep = _detect(train, test, labels, "sinc")
    print(f"sinc: F1={rep.f1:.4f} FPR={rep.false_positive_rate:.4f} ({t.elapsed:.0f} s)")
    assert rep.f1 >= 0.9
    assert rep.false_positive_rate <= 0.07
    assert t.elapsed < 600
    with Timer() as t:
        plain = _detect(train, test, labels, "plain")
    print(f"plain: F1={plain.f1:.4f} FPR={plain.false_positive_rate:.4f} ({t.elapsed:.0f} s)")
    assert t.elapsed < 600


def _rec(seed):
    r = np.random.default_rng(seed)
    fs = int(r.choice([128, 173, 256]))
    channels = int(r.integers(1, 5))
    seconds = int(r.integers(2, 10))
    t = np.arange(fs * seconds) / fs
    data = np.vstack([r.uniform(5, 500) * np.sin(2 * np.pi * r.uniform(0.5, 30) * t + r.uniform(0, 6))
                      + r.normal(0, r.uniform(0.1, 50), t.size) + r.uniform(-100, 100)
                      for _ in range(channels)])
    return TimeSeriesRecording(data, float(fs), [f"EEG{c}" for c in range(channels)], f"fixture{seed}")


@pytest.mark.acceptance(7, "EDF round trip")
@pytest.mark.parametrize("seed", range(5))
def test_edf_round_trip(tmp_path, seed):
    rec = _rec(seed)
    header = write_edf(rec, tmp_path / "a.edf")
    back = read_edf(tmp_path / "a.edf")
    assert back.fs == rec.fs and back.channel_names == rec.channel_names
    for c, s in enumerate(header.signals):
        assert np.max(np.abs(back.data[c] - rec.data[c])) <= 0.5 * s.gain * (1 + 1e-9)
    assert read_edf_header(tmp_path / "a.edf").to_bytes() == header.to_bytes()
    assert (tmp_path / "a.edf").read_bytes()[:header.header_bytes] == header.to_bytes()


BONN_DIR = os.environ.get("SINCVAE_BONN_DIR")


@pytest.mark.slow
@pytest.mark.acceptance(8, "optional Bonn A/E reproduction (needs SINCVAE_BONN_DIR)")
@pytest.mark.skipif(not BONN_DIR, reason="set SINCVAE_BONN_DIR to a folder with A/ and E/ segment files")
def test_bonn_reproduction(tmp_path):
    normal, seizure = (os.path.join(BONN_DIR, d) for d in ("A", "E"))
    f1s = []
    for seed in range(3):
        out = tmp_path / f"s{seed}"
        common = ["--out", str(out), "--seed", str(seed), "--set", "model.latent_dim=32",
                  "--set", "model.filter_count=16", "--set", "model.kernel_length=41",
                  "--set", "model.activation=identity"]
        assert cli.main(["preprocess", *common, "--set", "data.format=bonn", "--set", f"data.normal={normal}",
                         "--set", f"data.anomalous={seizure}"]) == 0
        for cmd in ("train", "score", "eval"):
            assert cli.main([cmd, *common]) == 0, cmd
        f1s.append(json.loads((out / "report.json").read_text())["f1"])
    assert min(f1s) >= 0.95, f1s


TINY = ["synth.train_seconds=120", "synth.test_seconds=60", "synth.burst_count=3", "model.filter_count=2",
        "model.kernel_length=7", "model.latent_dim=2", "model.conv_block_count=1",
        "model.channels_per_block=4", "train.max_epochs=3", "train.batch_size=32", "select.kernel_length=7",
        "select.filter_count=2", "select.activation=relu,identity", "select.latent_dim=2,4",
        "select.folds=2"]


def _all_commands(out):
    args = ["--out", str(out), "--seed", "9"] + [x for kv in TINY for x in ("--set", kv)]
    for cmd in ("synth", "train", "score", "eval", "select"):
        assert cli.main([cmd, *args]) == 0, cmd
    edf = ["--set", f"data.normal={out / 'synth_normal.edf'}", "--set", f"data.anomalous={out / 'synth_mixed.edf'}",
           "--set", f"data.annotations={out / 'annotations.csv'}", "--set", "preprocess.split=minutes",
           "--set", "preprocess.test_minutes=0.5"]
    assert cli.main(["preprocess", "--out", str(out / "pre"), "--seed", "9", *edf]) == 0


def _files(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for n in names:
            if not n.endswith(".config"):  # resolved configs record the output path itself
                p = os.path.join(dirpath, n)
                out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.mark.acceptance(9, "bit-identical reruns")
def test_determinism(tmp_path):
    _all_commands(tmp_path / "a")
    _all_commands(tmp_path / "b")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert {"model.svae", "scores.csv", "report.json", "results.csv", "selection.json",
            "pre/train.svws"} <= set(a)
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []
