"""Grid search, cross-validation splits and statistical configuration selection.

The selection pipeline narrows a completed grid in stages:

1. keep configurations whose mean fold MSE is within one standard deviation
   of the best (lowest-mean) configuration;
2. run Shapiro-Wilk on every survivor (recorded only);
3. omnibus test across survivors, Kruskal-Wallis if any survivor looks
   non-normal at ``alpha`` and one-way ANOVA otherwise;
4. if the omnibus test is significant, drop survivors whose Mann-Whitney
   p-value against the best configuration is below ``alpha``;
5. pick the least complex remaining configuration.
"""
from __future__ import annotations

import csv
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .stats import anova_oneway, kruskal_wallis, mann_whitney_u, shapiro_wilk

__all__ = [
    "SearchSpace", "SelectionReport", "TrialResult", "anova_oneway", "bonn_space", "chbmit_space",
    "derive_seed", "grid_expand", "kfold", "kruskal_wallis", "leave_one_track_out",
    "mann_whitney_u", "one_sigma_filter", "read_results_csv", "run_grid", "select_configuration",
    "shapiro_wilk", "write_results_csv",
]


@dataclass
class SearchSpace:
    axes: dict  # ordered: axis name -> list of values

    def __post_init__(self):
        for name, values in self.axes.items():
            if len(values) == 0:
                raise ValueError(f"search axis {name!r} is empty")

    @property
    def size(self):
        return int(np.prod([len(v) for v in self.axes.values()]))


def bonn_space():
    """Kernel {3,5,7} + {11,21,...,131}, filters 2..512, 3 activations, latent 8..128."""
    return SearchSpace({
        "kernel_length": [3, 5, 7] + list(range(11, 132, 10)),
        "filter_count": [2 ** n for n in range(1, 10)],
        "activation": ["relu", "tanh", "identity"],
        "latent_dim": [2 ** n for n in range(3, 8)],
    })


def chbmit_space():
    return SearchSpace({
        "kernel_length": [71, 81, 111, 131, 151],
        "filter_count": [2 ** n for n in range(2, 9)],
        "activation": ["relu", "identity"],
        "latent_dim": [2 ** n for n in range(5, 8)],
    })


def grid_expand(space: SearchSpace):
    """Cartesian product in axis order; ids ``c0000, c0001, ...``."""
    names = list(space.axes)
    width = max(4, len(str(space.size - 1)))
    out = []
    for i, combo in enumerate(itertools.product(*space.axes.values())):
        cfg = dict(zip(names, combo))
        cfg["config_id"] = f"c{i:0{width}d}"
        out.append(cfg)
    return out


def kfold(n, k=10, seed=0):
    """List of ``k`` disjoint index arrays covering ``range(n)``."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"cannot make {k} folds from {n} items")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def kfold_splits(n, k=10, seed=0):
    folds = kfold(n, k, seed)
    for i, test in enumerate(folds):
        train = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        yield train, test


def leave_one_track_out(tracks):
    """``[(test_track, [train_tracks...]), ...]``, each track held out once."""
    tracks = list(tracks)
    if len(tracks) < 2:
        raise ValueError("leave-one-track-out needs at least two tracks")
    return [(t, [u for u in tracks if u != t]) for t in tracks]


def derive_seed(base_seed, config_id, fold=0):
    """Stable per-trial seed independent of evaluation order."""
    return int(np.random.SeedSequence([base_seed, int(config_id.lstrip("c")), fold]).generate_state(1)[0])


@dataclass
class TrialResult:
    config_id: str
    config: dict
    fold_mse: np.ndarray
    parameter_count: int = 0

    def __post_init__(self):
        self.fold_mse = np.asarray(self.fold_mse, dtype=float)
        if self.fold_mse.size < 2:
            raise ValueError(f"{self.config_id}: need at least two folds")

    @property
    def mean(self):
        return float(self.fold_mse.mean())

    @property
    def std(self):
        # sample std across folds
        return float(self.fold_mse.std(ddof=1))


def one_sigma_filter(results):
    """Keep results with ``mean <= best.mean + best.std``."""
    if not results:
        raise ValueError("no results to filter")
    best = min(results, key=lambda r: (r.mean, r.config_id))
    limit = best.mean + best.std
    return [r for r in results if r.mean <= limit]


ACTIVATION_RANK = {"identity": 0, "relu": 1, "tanh": 2}
DEFAULT_COMPLEXITY_ORDER = ("latent_dim", "filter_count", "kernel_length", "activation")


def complexity_key(result, order=DEFAULT_COMPLEXITY_ORDER):
    key = []
    for axis in order:
        v = result.config.get(axis)
        key.append(ACTIVATION_RANK.get(v, 99) if axis == "activation" else v)
    return tuple(key) + (result.parameter_count, result.config_id)


@dataclass
class SelectionReport:
    alpha: float
    stages: dict = field(default_factory=dict)  # stage name -> surviving ids
    normality: dict = field(default_factory=dict)  # id -> {"W", "p"}
    omnibus: dict = field(default_factory=dict)
    versus_best: dict = field(default_factory=dict)  # id -> p vs best
    pvalue_ids: list = field(default_factory=list)
    pvalues: np.ndarray | None = None
    chosen: str | None = None
    chosen_config: dict | None = None
    tie_break: list = field(default_factory=list)

    def counts(self):
        return {k: len(v) for k, v in self.stages.items()}

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "stage_counts": self.counts(),
            "stages": self.stages,
            "normality": self.normality,
            "omnibus": self.omnibus,
            "versus_best": self.versus_best,
            "chosen": self.chosen,
            "chosen_config": self.chosen_config,
            "tie_break": self.tie_break,
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def write_pvalues_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config_id"] + self.pvalue_ids)
            if self.pvalues is not None:
                for cid, row in zip(self.pvalue_ids, self.pvalues):
                    w.writerow([cid] + [repr(float(v)) for v in row])


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def select_configuration(results, alpha=0.05, complexity_order=DEFAULT_COMPLEXITY_ORDER,
                         pairwise_matrix_limit=500) -> SelectionReport:
    report = SelectionReport(alpha)
    ordered = sorted(results, key=lambda r: (r.mean, r.config_id))
    report.stages["all"] = [r.config_id for r in ordered]
    survivors = sorted(one_sigma_filter(ordered), key=lambda r: (r.mean, r.config_id))
    report.stages["one_sigma"] = [r.config_id for r in survivors]
    best = survivors[0]

    any_non_normal = False
    for r in survivors:
        try:
            w, p = shapiro_wilk(r.fold_mse)
        except ValueError as exc:
            report.normality[r.config_id] = {"W": None, "p": None, "note": str(exc)}
            continue
        report.normality[r.config_id] = {"W": w, "p": p}
        any_non_normal |= p < alpha
    report.stages["normality_checked"] = [r.config_id for r in survivors]

    significant = False
    if len(survivors) >= 2:
        test = "kruskal_wallis" if any_non_normal else "anova"
        try:
            fn = kruskal_wallis if any_non_normal else anova_oneway
            stat, p = fn([r.fold_mse for r in survivors])
            significant = p < alpha
            report.omnibus = {"test": test, "statistic": stat, "p": p, "significant": significant}
        except ValueError as exc:
            report.omnibus = {"test": test, "statistic": None, "p": None, "significant": False,
                              "note": str(exc)}
    else:
        report.omnibus = {"test": None, "note": "single survivor", "significant": False}

    if len(survivors) <= pairwise_matrix_limit:
        ids = [r.config_id for r in survivors]
        m = np.ones((len(ids), len(ids)))
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                m[i, j] = m[j, i] = mann_whitney_u(survivors[i].fold_mse, survivors[j].fold_mse)[1]
        report.pvalue_ids, report.pvalues = ids, m

    if significant:
        kept = [best]
        for r in survivors[1:]:
            p = mann_whitney_u(best.fold_mse, r.fold_mse)[1]
            report.versus_best[r.config_id] = p
            if p >= alpha:
                kept.append(r)
        survivors = kept
    report.stages["pairwise"] = [r.config_id for r in survivors]

    ranked = sorted(survivors, key=lambda r: complexity_key(r, complexity_order))
    report.tie_break = [
        {"config_id": r.config_id, "key": [_jsonable(k) if isinstance(k, np.generic) else k
                                           for k in complexity_key(r, complexity_order)]}
        for r in ranked[:10]
    ]
    report.chosen = ranked[0].config_id
    report.chosen_config = {k: v for k, v in ranked[0].config.items() if k != "config_id"}
    report.stages["chosen"] = [report.chosen]
    return report


# grid evaluation ------------------------------------------------------------

def _run_trial(args):
    evaluate, cfg, seed = args
    fold_mse, n_params = evaluate(cfg, seed)
    return TrialResult(cfg["config_id"], cfg, fold_mse, n_params)


def run_grid(configs, evaluate, base_seed=0, workers=1):
    """Evaluate every configuration; ``evaluate(cfg, seed) -> (fold_mse, n_params)``.

    Seeds derive from ``(base_seed, config_id)`` so serial and parallel runs
    agree. ``evaluate`` must be picklable when ``workers > 1``.
    """
    jobs = [(evaluate, cfg, derive_seed(base_seed, cfg["config_id"])) for cfg in configs]
    if workers <= 1:
        return [_run_trial(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_trial, jobs))


def write_results_csv(results, path, axes=None):
    """Long format: ``config_id,<axis>=...,fold,mse`` (one row per fold)."""
    if not results:
        raise ValueError("no results to write")
    axes = axes or [k for k in results[0].config if k != "config_id"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_id"] + list(axes) + ["fold", "mse", "parameter_count"])
        for r in results:
            for fold, mse in enumerate(r.fold_mse):
                w.writerow([r.config_id] + [r.config[a] for a in axes] + [fold, repr(float(mse)), r.parameter_count])


def _parse_value(text):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def read_results_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no result rows")
    fixed = {"config_id", "fold", "mse", "parameter_count"}
    grouped = {}
    for row in rows:
        cid = row["config_id"]
        cfg = {k: _parse_value(v) for k, v in row.items() if k not in fixed}
        cfg["config_id"] = cid
        entry = grouped.setdefault(cid, {"config": cfg, "folds": {}, "params": 0})
        entry["folds"][int(row["fold"])] = float(row["mse"])
        entry["params"] = int(row.get("parameter_count") or 0)
    return [
        TrialResult(cid, e["config"], [e["folds"][k] for k in sorted(e["folds"])], e["params"])
        for cid, e in grouped.items()
    ]
