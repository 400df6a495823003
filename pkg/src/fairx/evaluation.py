"""Test-set metrics, cross-validation, ablation, lambda sweeps and correlation."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as sps

from .attribution import BaselineState, disparity
from .data import Dataset, DataError, kfold
from .fairness import MetricError, eo_gap
from .model import MlpParams, logit, predict
from .training import TrainConfig, TrainingDivergence, fairx_train

log = logging.getLogger(__name__)

METRICS = ("f1", "auc", "eo_gap", "gcig", "accuracy")
DEFAULT_GRID = (0.1, 0.5, 1.0, 2.0, 5.0, 10.0)
SWEEP_AXES = ("lambda_ig", "lambda_fair")
ARMS = {
    "prediction_only": {"lambda_ig": 0.0, "lambda_fair": 0.0},
    "pred_eo": {"lambda_ig": 0.0},
    "pred_gcig": {"lambda_fair": 0.0},
    "full": {},
}


# -- scalar metrics ----------------------------------------------------------


def f1_score(predictions, y) -> float:
    """2TP / (2TP + FP + FN), or 0 when nothing is positive on either side."""
    pred, y = np.asarray(predictions), np.asarray(y)
    if pred.size == 0:
        raise ValueError("empty input")
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def auc_score(scores, y) -> float:
    """Mann-Whitney AUC from average ranks; tied pairs count one half."""
    scores, y = np.asarray(scores, dtype=np.float64), np.asarray(y)
    n1 = int(np.sum(y == 1))
    n0 = int(np.sum(y == 0))
    if n1 == 0 or n0 == 0:
        raise MetricError("AUC needs both classes")
    ranks = sps.rankdata(scores)
    u = ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def gcig_metric(params: MlpParams, state: BaselineState, dataset: Dataset, indices,
                T: int = 16, q: float = 2, eps: float = 1e-8) -> float:
    """Mean V(x_i; y_i) over ``indices`` against frozen baselines."""
    idx = np.asarray(indices)
    if idx.size == 0:
        raise ValueError("empty evaluation set")
    v = disparity(params, dataset.X[idx], dataset.y[idx], state, T, q, eps)
    return float(np.mean(v))


@dataclass
class RunMetrics:
    f1: float
    auc: float | None
    eo_gap: float | None
    gcig: float
    accuracy: float
    cell_counts: dict
    config_fingerprint: str
    seed: int
    fold: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunMetrics":
        return cls(**d)


def evaluate_run(params: MlpParams, state: BaselineState, dataset: Dataset, indices,
                 config: TrainConfig, fold: int | None = None) -> RunMetrics:
    idx = np.asarray(indices)
    if idx.size == 0:
        raise ValueError("empty evaluation set")
    X, y, a = dataset.X[idx], dataset.y[idx], dataset.a[idx]
    z = np.atleast_1d(logit(params, X))
    pred = np.atleast_1d(predict(params, X))
    try:
        auc = auc_score(z, y)
    except MetricError as e:
        log.warning("AUC undefined: %s", e)
        auc = None
    try:
        gap = eo_gap(pred, y, a)
    except MetricError as e:
        log.warning("EO gap undefined: %s", e)
        gap = None
    return RunMetrics(
        f1=f1_score(pred, y),
        auc=auc,
        eo_gap=gap,
        gcig=gcig_metric(params, state, dataset, idx, config.ig_steps, config.norm_q,
                         config.norm_eps),
        accuracy=float(np.mean(pred == y)),
        cell_counts=dataset.cell_counts(idx),
        config_fingerprint=config.fingerprint(),
        seed=config.seed,
        fold=fold,
    )


# -- cross-validation --------------------------------------------------------


@dataclass
class CvSummary:
    folds: list[RunMetrics]
    k: int
    seed: int
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.mean:
            self.mean, self.std = summarize(self.folds)

    def values(self, metric: str) -> list[float]:
        return [getattr(f, metric) for f in self.folds if getattr(f, metric) is not None]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "mean": self.mean,
            "std": self.std,
            "folds": [f.to_dict() for f in self.folds],
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CvSummary":
        return cls([RunMetrics.from_dict(f) for f in d["folds"]], d["k"], d["seed"],
                   d["mean"], d["std"], d.get("failures", []))


def summarize(folds: Sequence[RunMetrics]) -> tuple[dict, dict]:
    """Per-metric mean and sample (n-1) standard deviation; None when unavailable."""
    mean, std = {}, {}
    for m in METRICS:
        vals = np.array([getattr(f, m) for f in folds if getattr(f, m) is not None], dtype=float)
        mean[m] = float(vals.mean()) if vals.size else None
        std[m] = float(vals.std(ddof=1)) if vals.size > 1 else None
    return mean, std


def fold_seed(seed: int, fold: int) -> int:
    """Training seed for one fold, derived from (run seed, fold index)."""
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def run_fold(config: TrainConfig, dataset: Dataset, train, test, fold: int) -> RunMetrics:
    """Refit preprocessing on the fold's train rows, train, evaluate on its test rows."""
    if dataset.raw is not None and dataset.manifest is not None:
        dataset = dataset.refit(train)
    params, state, _ = fairx_train(config, dataset, train)
    return evaluate_run(params, state, dataset, test, config, fold)


def _run_job(job):
    config, dataset, train, test, fold = job
    try:
        return run_fold(config, dataset, train, test, fold)
    except (TrainingDivergence, DataError, ValueError) as e:
        return {"fold": fold, "error": f"{type(e).__name__}: {e}"}


def default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def run_jobs(jobs: list, threads: int | None = 1) -> list:
    """Run independent fold jobs, in order, on up to ``threads`` processes."""
    threads = default_threads() if threads is None else threads
    if threads <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(_run_job, jobs))


def _fold_jobs(config: TrainConfig, dataset: Dataset, k: int, seed: int) -> list:
    folds = kfold(dataset.y, dataset.a, k, seed)
    return [(config.replace(seed=fold_seed(config.seed, f.index)), dataset, f.train, f.test, f.index)
            for f in folds]


def _collect(results: list, k: int, seed: int) -> CvSummary:
    done = [r for r in results if isinstance(r, RunMetrics)]
    failed = [r for r in results if not isinstance(r, RunMetrics)]
    for f in failed:
        log.warning("fold %s failed: %s", f["fold"], f["error"])
    if not done:
        raise TrainingDivergence(-1, -1, "result in every fold")
    return CvSummary(done, k, seed, failures=failed)


def crossvalidate(config: TrainConfig, dataset: Dataset, k: int = 5, seed: int = 0,
                  threads: int | None = 1) -> CvSummary:
    """Independent training per stratified fold; metrics on each held-out fold."""
    return _collect(run_jobs(_fold_jobs(config, dataset, k, seed), threads), k, seed)


def _batched(groups: dict, dataset: Dataset, k: int, seed: int, threads) -> dict:
    # one flat job list so that every fold of every arm can run concurrently
    jobs, spans = [], {}
    for key, cfg in groups.items():
        fj = _fold_jobs(cfg, dataset, k, seed)
        spans[key] = (len(jobs), len(jobs) + len(fj))
        jobs.extend(fj)
    results = run_jobs(jobs, threads)
    return {key: _collect(results[s:e], k, seed) for key, (s, e) in spans.items()}


def percent_change(value: float, base: float) -> float | None:
    if value is None or base is None or base == 0:
        return None
    return (value - base) / base


@dataclass
class AblationResult:
    arms: dict[str, CvSummary]

    def percent_change(self, metric: str = "gcig") -> dict:
        base = self.arms["prediction_only"].mean[metric]
        return {name: percent_change(s.mean[metric], base) for name, s in self.arms.items()}

    def to_dict(self) -> dict:
        return {
            "arms": {name: s.to_dict() for name, s in self.arms.items()},
            "percent_change_vs_prediction_only": {m: self.percent_change(m) for m in METRICS},
        }


def ablation(config: TrainConfig, dataset: Dataset, k: int = 5, seed: int = 0,
             threads: int | None = 1) -> AblationResult:
    """Cross-validate the four loss-component arms with otherwise identical configs."""
    groups = {name: config.replace(**change) for name, change in ARMS.items()}
    return AblationResult(_batched(groups, dataset, k, seed, threads))


@dataclass
class SweepResult:
    axis: str
    values: list[float]
    points: list[CvSummary]

    def rows(self) -> list[dict]:
        out = []
        for lam, s in zip(self.values, self.points):
            for m in METRICS:
                out.append({"axis": self.axis, "lambda": lam, "metric": m,
                            "mean": s.mean[m], "std": s.std[m]})
        return out

    def inversions(self, metric: str = "gcig") -> int:
        """Number of adjacent grid steps where ``metric`` increases."""
        means = [s.mean[metric] for s in self.points]
        return sum(1 for u, v in zip(means, means[1:]) if v > u)

    def to_dict(self) -> dict:
        return {"axis": self.axis, "values": self.values,
                "points": [s.to_dict() for s in self.points], "rows": self.rows()}


def sensitivity_sweep(config: TrainConfig, dataset: Dataset, axis: str = "lambda_ig",
                      values: Sequence[float] = DEFAULT_GRID, k: int = 5, seed: int = 0,
                      threads: int | None = 1) -> SweepResult:
    """Vary one lambda over ``values`` with the other held at 1.0."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    other = "lambda_fair" if axis == "lambda_ig" else "lambda_ig"
    values = [float(v) for v in values]
    groups = {i: config.replace(**{axis: v, other: 1.0}) for i, v in enumerate(values)}
    res = _batched(groups, dataset, k, seed, threads)
    return SweepResult(axis, values, [res[i] for i in range(len(values))])


# -- correlation analysis ------------------------------------------------------


@dataclass
class Correlation:
    r: float
    rho: float
    p: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise MetricError("constant input; correlation undefined")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d and of equal length")
    if x.size < 3:
        raise ValueError("need at least 3 points")
    return x, y


def correlate(x, y) -> Correlation:
    """Pearson r with a two-sided t-test p-value, and Spearman rho."""
    x, y = _pair(x, y)
    n = x.size
    r = _pearson(x, y)
    rho = _pearson(sps.rankdata(x), sps.rankdata(y))
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * np.sqrt((n - 2) / (1.0 - r * r))
        p = float(2.0 * sps.t.sf(abs(t), n - 2))
    return Correlation(r, rho, p, n)


def _residuals(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0:
        raise MetricError("constant regressor")
    slope = float(dx @ (v - v.mean())) / sxx
    return v - v.mean() - slope * dx


def regress_r2(x, y) -> float:
    """R^2 of the least-squares line y ~ x."""
    x, y = _pair(x, y)
    res = _residuals(y, x)
    dy = y - y.mean()
    sst = float(dy @ dy)
    if sst == 0:
        raise MetricError("constant response")
    return float(1.0 - (res @ res) / sst)


def partial_correlation(x, y, control) -> float:
    """Pearson correlation of x and y after regressing each on ``control``."""
    x, y = _pair(x, y)
    c = np.asarray(control, dtype=np.float64)
    return _pearson(_residuals(x, c), _residuals(y, c))


def fold_correlation_report(summaries: Sequence[CvSummary], x_metric: str = "eo_gap",
                            y_metric: str = "gcig", control: str | None = "f1") -> dict:
    """Correlate two metrics across every fold record of the given runs."""
    rows = [f for s in summaries for f in s.folds
            if getattr(f, x_metric) is not None and getattr(f, y_metric) is not None]
    xs = [getattr(f, x_metric) for f in rows]
    ys = [getattr(f, y_metric) for f in rows]
    c = correlate(xs, ys)
    report = {"x": x_metric, "y": y_metric, "n": c.n, "r": c.r, "rho": c.rho, "p": c.p,
              "r2": regress_r2(xs, ys)}
    if control is not None:
        try:
            report["partial_r"] = partial_correlation(xs, ys, [getattr(f, control) for f in rows])
            report["control"] = control
        except MetricError as e:
            log.warning("partial correlation skipped: %s", e)
    return report
