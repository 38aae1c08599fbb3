"""Command-line entry point: ``sincvae <command> [--config FILE] [--set k=v] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

import numpy as np

from . import detector, ingest, selection, signal
from . import vae as V

log = logging.getLogger("sincvae")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_BAD_DATA = 4
EXIT_DIVERGED = 5

EXIT_HELP = """exit codes:
  0  success
  1  unexpected internal error
  2  configuration or usage error (unknown key, bad value)
  3  missing input file or directory
  4  malformed input data (EDF, SVWS, checkpoint, CSV)
  5  training diverged (non-finite loss)

errors are reported on stderr as one JSON line:
  {"error": "<kind>", "exit_code": <n>, "message": "<text>"}
"""


class CliError(Exception):
    def __init__(self, kind, code, message):
        super().__init__(message)
        self.kind = kind
        self.code = code


def config_error(msg):
    return CliError("config", EXIT_CONFIG, msg)


# configuration --------------------------------------------------------------

# key -> (type, default). Empty-string path defaults resolve under ``out``.
SCHEMA = {
    "seed": (int, 0),
    "out": (str, "run"),
    "data.format": (str, "edf"),
    "data.normal": (str, ""),
    "data.anomalous": (str, ""),
    "data.annotations": (str, ""),
    "data.channels": (str, ""),
    "data.train": (str, ""),
    "data.test": (str, ""),
    "data.checkpoint": (str, ""),
    "data.scores": (str, ""),
    "data.validation_scores": (str, ""),
    "data.results": (str, ""),
    "data.workers": (int, 1),
    "preprocess.window_seconds": (float, 1.0),
    "preprocess.stride_seconds": (float, 0.0),
    "preprocess.filter": (str, "none"),
    "preprocess.cutoffs": (str, ""),
    "preprocess.numtaps": (int, 255),
    "preprocess.split": (str, "fraction"),
    "preprocess.test_fraction": (float, 0.2),
    "preprocess.test_minutes": (float, 10.0),
    "model.variant": (str, "sinc"),
    "model.filter_count": (int, 8),
    "model.kernel_length": (int, 31),
    "model.activation": (str, "identity"),
    "model.latent_dim": (int, 8),
    "model.conv_block_count": (int, 2),
    "model.channels_per_block": (int, 16),
    "model.block_activation": (str, "relu"),
    "model.recon_reduction": (str, "sum"),
    "model.norm_axes": (str, "time"),
    "train.learning_rate": (float, 0.0005),
    "train.batch_size": (int, 128),
    "train.max_epochs": (int, 1000),
    "train.patience": (int, 20),
    "train.validation_fraction": (float, 0.2),
    "detector.threshold": (str, "percentile:95"),
    "detector.horizon_pre": (float, 900.0),
    "detector.horizon_post": (float, 900.0),
    "select.alpha": (float, 0.05),
    "select.space": (str, "chbmit"),
    "select.kernel_length": (str, ""),
    "select.filter_count": (str, ""),
    "select.activation": (str, ""),
    "select.latent_dim": (str, ""),
    "select.folds": (int, 10),
    "select.workers": (int, 1),
    "select.complexity_order": (str, "latent_dim,filter_count,kernel_length,activation"),
    "synth.train_seconds": (float, 2000.0),
    "synth.test_seconds": (float, 1200.0),
    "synth.channels": (int, 1),
    "synth.fs": (float, 128.0),
    "synth.burst_count": (int, 100),
    "synth.burst_seconds": (float, 5.0),
    "synth.burst_gain": (float, 3.0),
    "synth.burst_band": (str, "3,7"),
}


class RunConfig:
    """Flat key/value configuration with typed values and a fixed key set."""

    def __init__(self, values=None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, raw):
        if key not in SCHEMA:
            raise config_error(f"unknown config key {key!r}")
        kind = SCHEMA[key][0]
        try:
            self.values[key] = kind(raw) if not isinstance(raw, kind) else raw
        except (TypeError, ValueError):
            raise config_error(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse_text(cls, text, source="<config>"):
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise config_error(f"{source}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            cfg.set(k.strip(), v.strip())
        return cfg

    @classmethod
    def load(cls, path):
        if not os.path.isfile(path):
            raise CliError("missing_input", EXIT_MISSING_INPUT, f"config file {path} not found")
        with open(path) as fh:
            return cls.parse_text(fh.read(), path)

    def dump(self):
        lines = []
        for k in sorted(self.values):
            v = self.values[k]
            lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def path(self, key, default_name):
        value = self.values[key]
        return value if value else os.path.join(self.values["out"], default_name)

    def write_resolved(self, command):
        os.makedirs(self.values["out"], exist_ok=True)
        with open(os.path.join(self.values["out"], f"{command}.config"), "w") as fh:
            fh.write(self.dump())


def _floats(text, key):
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise config_error(f"{key}: expected comma-separated numbers, got {text!r}") from None


def _list(text):
    return [p.strip() for p in text.split(",") if p.strip()]


def _require(path, what):
    if not os.path.exists(path):
        raise CliError("missing_input", EXIT_MISSING_INPUT, f"{what} {path} not found")
    return path


def _out(cfg, name):
    os.makedirs(cfg["out"], exist_ok=True)
    return os.path.join(cfg["out"], name)


def _write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# preprocessing --------------------------------------------------------------

def _load_sources(cfg, key):
    paths = _list(cfg[key])
    fmt = cfg["data.format"]
    channels = _list(cfg["data.channels"]) or None

    def load(p):
        _require(p, "input")
        if fmt == "bonn":
            return ingest.read_bonn(p) if os.path.isdir(p) else [ingest.read_bonn_file(p)]
        if fmt == "edf":
            return [ingest.read_edf(p, channels)]
        raise config_error(f"data.format must be 'bonn' or 'edf', got {fmt!r}")

    workers = max(1, cfg["data.workers"])
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            groups = list(pool.map(load, paths))
    else:
        groups = [load(p) for p in paths]
    return [r for g in groups for r in g]


def _filter(cfg, rec):
    kind = cfg["preprocess.filter"]
    if kind == "none":
        return rec
    cut = _floats(cfg["preprocess.cutoffs"], "preprocess.cutoffs")
    if kind == "lowpass" and len(cut) == 1:
        return signal.fir_filter(rec, "lowpass", cut[0], cfg["preprocess.numtaps"])
    if kind == "bandpass" and len(cut) == 2:
        return signal.fir_filter(rec, "bandpass", cut, cfg["preprocess.numtaps"])
    raise config_error("preprocess.filter must be none, lowpass (one cutoff) or bandpass (two cutoffs)")


def _windows(cfg, rec, label, intervals=()):
    stride = cfg["preprocess.stride_seconds"] or None
    ws = signal.segment_windows(_filter(cfg, rec), cfg["preprocess.window_seconds"], stride)
    if label == signal.SEIZURE and intervals:
        ws.labels = ingest.label_windows(ws.start_times, cfg["preprocess.window_seconds"], intervals)
    else:
        ws.labels = np.full(len(ws), label, dtype=np.uint8)
    if intervals:
        tags = detector.tag_phases(int(np.ceil(rec.duration)), intervals,
                                   cfg["detector.horizon_pre"], cfg["detector.horizon_post"])
        ws.phases = tags[np.minimum(ws.start_times.astype(int), len(tags) - 1)]
    else:
        ws.phases = np.full(len(ws), detector.ICTAL if label == signal.SEIZURE else detector.INTERICTAL,
                            dtype=np.uint8)
    return ws


def _finish_split(cfg, train_parts, test_parts):
    train = signal.concat_windows(train_parts)
    test = signal.concat_windows(test_parts)
    stats = signal.fit_zscore(train)
    train, test = signal.zscore(train, stats), signal.zscore(test, stats)
    signal.save_windows(train, _out(cfg, "train.svws"))
    signal.save_windows(test, _out(cfg, "test.svws"))
    _write_json(_out(cfg, "zscore.json"), {"mean": stats.mean.tolist(), "std": stats.std.tolist()})
    log.info("train windows: %d, test windows: %d (%d seizure)", len(train), len(test),
             int(test.labels.sum()))
    return train, test


def preprocess_recordings(cfg, normal, anomalous, annotations):
    """Window, split and z-score; anomalous recordings only ever reach the test set."""
    split = cfg["preprocess.split"]
    if split == "fraction":
        n_train, n_test = signal.split_bonn(normal, cfg["preprocess.test_fraction"])
        train = [_windows(cfg, r, signal.NON_SEIZURE) for r in n_train]
        test = [_windows(cfg, r, signal.NON_SEIZURE) for r in n_test]
        if anomalous and not annotations:
            anomalous = signal.split_bonn(anomalous, cfg["preprocess.test_fraction"])[1]
    elif split == "minutes":
        pool = signal.concat_windows([_windows(cfg, r, signal.NON_SEIZURE) for r in normal])
        held, rest = signal.sample_test_minutes(pool, cfg["preprocess.test_minutes"], cfg["seed"])
        train, test = [rest], [held]
    else:
        raise config_error(f"preprocess.split must be 'fraction' or 'minutes', got {split!r}")
    for r in anomalous:
        test.append(_windows(cfg, r, signal.SEIZURE, annotations.get(r.source_id, ())))
    return _finish_split(cfg, train, test)


def cmd_preprocess(cfg):
    normal = _load_sources(cfg, "data.normal")
    if not normal:
        raise config_error("data.normal lists no inputs")
    anomalous = _load_sources(cfg, "data.anomalous") if cfg["data.anomalous"] else []
    annotations = {}
    if cfg["data.annotations"]:
        path = _require(cfg["data.annotations"], "annotations")
        annotations = {a.track_id: a.intervals for a in ingest.read_annotations(path)}
    preprocess_recordings(cfg, normal, anomalous, annotations)


def cmd_synth(cfg):
    lo, hi = _floats(cfg["synth.burst_band"], "synth.burst_band")
    common = dict(channels=cfg["synth.channels"], fs=cfg["synth.fs"], burst_gain=cfg["synth.burst_gain"],
                  burst_band=(lo, hi), burst_duration_s=cfg["synth.burst_seconds"])
    seeds = np.random.SeedSequence(cfg["seed"]).generate_state(2)
    (normal,), _ = ingest.synth_generate(ingest.SynthSpec(
        duration_s=cfg["synth.train_seconds"], burst_count=0, seed=int(seeds[0]), **common))
    (mixed,), (ann,) = ingest.synth_generate(ingest.SynthSpec(
        duration_s=cfg["synth.test_seconds"], burst_count=cfg["synth.burst_count"],
        seed=int(seeds[1]), **common))
    normal.source_id, mixed.source_id = "synth_normal", "synth_mixed"
    ann.track_id = mixed.source_id
    ingest.write_annotations([ann], _out(cfg, "annotations.csv"))
    for rec in (normal, mixed):
        try:
            ingest.write_edf(rec, _out(cfg, rec.source_id + ".edf"))
        except ValueError as exc:
            log.warning("EDF export of %s skipped: %s", rec.source_id, exc)
    # everything of the normal track trains; the mixed track is the test set
    train = _windows(cfg, normal, signal.NON_SEIZURE)
    test = _windows(cfg, mixed, signal.SEIZURE, ann.intervals)
    _finish_split(cfg, [train], [test])


# training / scoring ---------------------------------------------------------

def _load_windows(path):
    _require(path, "window file")
    return signal.load_windows(path)


def architecture(cfg, ws):
    try:
        return V.VaeArchitecture(
            in_channels=ws.n_channels, window_len=ws.window_len, fs=ws.fs,
            **{k.split(".", 1)[1]: cfg[k] for k in SCHEMA if k.startswith("model.")})
    except ValueError as exc:
        raise config_error(str(exc)) from None


def train_config(cfg):
    try:
        return V.TrainConfig(seed=cfg["seed"],
                             **{k.split(".", 1)[1]: cfg[k] for k in SCHEMA if k.startswith("train.")})
    except ValueError as exc:
        raise config_error(str(exc)) from None


def _progress(row):
    level = logging.INFO if row["epoch"] % 10 == 0 else logging.DEBUG
    log.log(level, "epoch %d train %.5g val %.5g (recon %.5g, kl %.5g)", row["epoch"],
            row["train_loss"], row["val_loss"], row["recon"], row["kl"])


def _write_scores(path, ws, scores):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "start_s", "mse", "label", "phase"])
        for i, s in enumerate(scores):
            label = "" if ws.labels is None else int(ws.labels[i])
            phase = "" if ws.phases is None else detector.PHASE_NAMES[ws.phases[i]]
            w.writerow([i, repr(float(ws.start_times[i])), repr(float(s)), label, phase])


def _read_scores(path):
    _require(path, "score file")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        mse = np.array([float(r["mse"]) for r in rows])
        labels = np.array([int(r["label"]) if r.get("label") not in (None, "") else -1 for r in rows])
        phases = [r.get("phase") or "" for r in rows]
    except (KeyError, ValueError) as exc:
        raise CliError("bad_data", EXIT_BAD_DATA, f"{path}: malformed score file ({exc})") from None
    return mse, labels, phases


def cmd_train(cfg):
    ws = _load_windows(cfg.path("data.train", "train.svws"))
    if ws.labels is not None and np.any(ws.labels == signal.SEIZURE):
        raise config_error("training windows contain seizure labels; training is normal-only")
    arch, tcfg = architecture(cfg, ws), train_config(cfg)
    model = V.train(ws.windows, tcfg, arch, progress=_progress)
    V.save_checkpoint(model, cfg.path("data.checkpoint", "model.svae"))
    V.write_history_csv(model.history, _out(cfg, "history.csv"))
    val = ws.subset(model.validation_indices)
    _write_scores(cfg.path("data.validation_scores", "validation_scores.csv"), val,
                  V.reconstruct_mse(val.windows, model))
    if model.sinc is not None:
        model.sinc.to_csv(_out(cfg, "filterbank.csv"))
    log.info("best epoch %s of %d, %d parameters", model.best_epoch, len(model.history),
             model.parameter_count())


def _load_model(cfg):
    path = _require(cfg.path("data.checkpoint", "model.svae"), "checkpoint")
    try:
        return V.load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise CliError("bad_data", EXIT_BAD_DATA, str(exc)) from None


def cmd_score(cfg):
    model = _load_model(cfg)
    ws = _load_windows(cfg.path("data.test", "test.svws"))
    try:
        scores = V.reconstruct_mse(ws.windows, model)
    except ValueError as exc:
        raise CliError("bad_data", EXIT_BAD_DATA, str(exc)) from None
    _write_scores(cfg.path("data.scores", "scores.csv"), ws, scores)


def cmd_eval(cfg):
    mse, labels, phases = _read_scores(cfg.path("data.scores", "scores.csv"))
    val, _, _ = _read_scores(cfg.path("data.validation_scores", "validation_scores.csv"))
    if np.any(labels < 0):
        raise CliError("bad_data", EXIT_BAD_DATA, "score file lacks labels; evaluation needs ground truth")
    try:
        policy = detector.ThresholdPolicy.parse(cfg["detector.threshold"])
    except ValueError as exc:
        raise config_error(str(exc)) from None
    report = detector.evaluate(mse, labels, val, policy)
    summary = report.summary()
    summary["threshold_name"] = {"max": "t1", "percentile:95": "t2"}.get(policy.label, policy.label)
    _write_json(_out(cfg, "report.json"), summary)
    with open(_out(cfg, "confusion.txt"), "w") as fh:
        fh.write(report.confusion_table() + "\n")
    detector.write_trace_csv(_out(cfg, "trace.csv"), mse, report.predictions,
                             [detector.PHASE_NAMES.index(p) for p in phases] if all(phases) else None)
    if all(phases):
        with open(_out(cfg, "phase_rates.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase", "windows", "flagged", "percent"])
            for name in detector.PHASE_NAMES:
                mask = np.array([p == name for p in phases])
                n, k = int(mask.sum()), int(report.predictions[mask].sum()) if mask.any() else 0
                w.writerow([name, n, k, repr(100.0 * k / n) if n else ""])
    print(report.confusion_table())


# selection ------------------------------------------------------------------

class FoldEvaluator:
    """Picklable k-fold trainer: ``(config, seed) -> (per-fold MSE, parameter count)``."""

    def __init__(self, windows, base_arch, train_cfg, folds):
        self.windows = windows
        self.base_arch = base_arch
        self.train_cfg = train_cfg
        self.folds = folds

    def __call__(self, config, seed):
        arch = V.VaeArchitecture(**{**self.base_arch,
                                    **{k: v for k, v in config.items() if k != "config_id"}})
        fold_mse, n_params = [], 0
        for i, (tr, te) in enumerate(selection.kfold_splits(len(self.windows), self.folds, seed)):
            tcfg = V.TrainConfig(**{**self.train_cfg, "seed": seed + i})
            model = V.train(self.windows[tr], tcfg, arch)
            fold_mse.append(float(V.reconstruct_mse(self.windows[te], model).mean()))
            n_params = model.parameter_count()
        return fold_mse, n_params


def _space(cfg):
    base = {"chbmit": selection.chbmit_space, "bonn": selection.bonn_space}.get(cfg["select.space"])
    if base is None:
        raise config_error("select.space must be 'chbmit' or 'bonn'")
    axes = dict(base().axes)
    for axis in axes:
        text = cfg[f"select.{axis}"]
        if text:
            axes[axis] = _list(text) if axis == "activation" else [int(v) for v in _floats(text, axis)]
    return selection.SearchSpace(axes)


def cmd_select(cfg):
    if cfg["data.results"]:
        path = _require(cfg["data.results"], "results file")
        try:
            results = selection.read_results_csv(path)
        except (ValueError, KeyError) as exc:
            raise CliError("bad_data", EXIT_BAD_DATA, f"{path}: {exc}") from None
    else:
        ws = _load_windows(cfg.path("data.train", "train.svws"))
        arch = architecture(cfg, ws)
        evaluator = FoldEvaluator(ws.windows, asdict(arch),
                                  {k: v for k, v in asdict(train_config(cfg)).items() if k != "seed"},
                                  cfg["select.folds"])
        configs = selection.grid_expand(_space(cfg))
        log.info("evaluating %d configurations x %d folds", len(configs), cfg["select.folds"])
        results = selection.run_grid(configs, evaluator, cfg["seed"], cfg["select.workers"])
        selection.write_results_csv(results, _out(cfg, "results.csv"))
    order = tuple(_list(cfg["select.complexity_order"]))
    report = selection.select_configuration(results, cfg["select.alpha"], order)
    report.to_json(_out(cfg, "selection.json"))
    report.write_pvalues_csv(_out(cfg, "pvalues.csv"))
    counts = " -> ".join(f"{k}:{v}" for k, v in report.counts().items())
    print(f"{counts}; chosen {report.chosen} {report.chosen_config}")


def cmd_edf_info(cfg, path):
    _require(path, "EDF file")
    print(ingest.read_edf_header(path).describe())


COMMANDS = {
    "preprocess": (cmd_preprocess, "window, split and z-score raw recordings into SVWS files"),
    "train": (cmd_train, "train a VAE on normal-only windows; writes checkpoint and history"),
    "score": (cmd_score, "reconstruction MSE per test window"),
    "eval": (cmd_eval, "threshold scores and report precision/recall/F1 and phase rates"),
    "select": (cmd_select, "grid search plus statistical configuration selection"),
    "synth": (cmd_synth, "generate a synthetic dataset with annotated bursts"),
    "edf-info": (None, "print an EDF header"),
}


def build_parser():
    p = argparse.ArgumentParser(prog="sincvae", description=__doc__, epilog=EXIT_HELP,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text, epilog=EXIT_HELP,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "edf-info":
            sp.add_argument("path")
            continue
        sp.add_argument("--config", help="key = value file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
    return p


def resolve_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set:
        if "=" not in item:
            raise config_error(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.out is not None:
        cfg.set("out", args.out)
    return cfg


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose + 1, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "edf-info":
            cmd_edf_info(None, args.path)
        else:
            cfg = resolve_config(args)
            cfg.write_resolved(args.command)
            COMMANDS[args.command][0](cfg)
    except CliError as exc:
        return _fail(exc.kind, exc.code, str(exc))
    except V.TrainingDivergedError as exc:
        return _fail("diverged", EXIT_DIVERGED, str(exc))
    except FileNotFoundError as exc:
        return _fail("missing_input", EXIT_MISSING_INPUT, str(exc))
    except ValueError as exc:
        return _fail("bad_data", EXIT_BAD_DATA, str(exc))
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        log.debug("internal error", exc_info=True)
        return _fail("internal", EXIT_INTERNAL, f"{type(exc).__name__}: {exc}")
    return EXIT_OK


def _fail(kind, code, message):
    print(json.dumps({"error": kind, "exit_code": code, "message": message}, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
