"""Gradient-variance estimation, convergence reports, and seeded races."""

from __future__ import annotations

import copy
import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .datagen import MultiDomainDataset, draw_domains
from .errors import InvalidInputError
from .mixture import equivalent_weights, proportional_probs, temperature_probs
from .models import Model
from .trainer import RunRecord, TrainConfig, resolve_data, train_many


@dataclass
class GradientStats:
    """Monte-Carlo statistics of minibatch gradients at a frozen model.

    ``norm_var`` is the sample variance of the gradient norms, ``trace_var``
    the trace of the sample covariance.  ``*_se`` are standard errors of the
    corresponding estimates.
    """

    n: int
    mean: np.ndarray
    mean_se: np.ndarray
    norm_mean: float
    norm_var: float
    norm_var_se: float
    trace_var: float
    trace_var_se: float


def per_domain_grads(model: Model, data: MultiDomainDataset, chunk: int = 2048) -> list[np.ndarray]:
    out = []
    for split in data.train:
        rows = [model.per_example_grads(split.x[lo:lo + chunk], split.y[lo:lo + chunk])
                for lo in range(0, len(split), chunk)]
        out.append(np.concatenate(rows))
    return out


def _minibatch_grads(G: list[np.ndarray], sizes: np.ndarray, probs, weights, n: int, B: int,
                     rng: np.random.Generator, chunk: int):
    for lo in range(0, n, chunk):
        m = min(chunk, n - lo)
        doms = draw_domains(probs, m * B, rng)
        idx = rng.integers(0, sizes[doms])
        rows = np.empty((m * B, G[0].shape[1]))
        for k in np.unique(doms):
            sel = doms == k
            rows[sel] = G[k][idx[sel]] * weights[k]
        yield rows.reshape(m, B, -1).mean(axis=1) if B > 1 else rows


def grad_variance(model: Model, data: MultiDomainDataset, probs, weights, n_samples: int, batch_size: int,
                  rng: np.random.Generator, chunk: int = 8192, grads: list[np.ndarray] | None = None) -> GradientStats:
    """Draw ``n_samples`` independent minibatch gradients under ``(probs, weights)``.

    Per-example gradients are computed once at the frozen model.  Moments use
    two passes over the same random stream, shifted by the first sample, so a
    stream of identical gradients yields a variance of exactly zero.
    """
    if n_samples < 2:
        raise InvalidInputError("need at least two samples to estimate a variance")
    probs = np.asarray(probs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    G = grads if grads is not None else per_domain_grads(model, data)
    sizes = data.train_sizes
    chunk = max(1, chunk // batch_size)
    replay = copy.deepcopy(rng)

    shift = shift_norm = None
    s1 = None
    sn = 0.0
    for g in _minibatch_grads(G, sizes, probs, weights, n_samples, batch_size, rng, chunk):
        if shift is None:
            shift = g[0].copy()
            shift_norm = float(np.linalg.norm(shift))
            s1 = np.zeros_like(shift)
        s1 += (g - shift).sum(axis=0)
        sn += float((np.linalg.norm(g, axis=1) - shift_norm).sum())
    mean = shift + s1 / n_samples
    norm_mean = shift_norm + sn / n_samples

    sq = np.zeros_like(mean)
    q1 = q2 = r2 = r4 = 0.0
    for g in _minibatch_grads(G, sizes, probs, weights, n_samples, batch_size, replay, chunk):
        dev = g - mean
        sq += (dev * dev).sum(axis=0)
        q = (dev * dev).sum(axis=1)
        q1 += float(q.sum())
        q2 += float((q * q).sum())
        r = (np.linalg.norm(g, axis=1) - norm_mean) ** 2
        r2 += float(r.sum())
        r4 += float((r * r).sum())

    n = n_samples
    coord_var = sq / (n - 1)
    trace_var = q1 / (n - 1)
    norm_var = r2 / (n - 1)
    trace_se = math.sqrt(max(q2 / n - (q1 / n) ** 2, 0.0) / n)
    norm_se = math.sqrt(max(r4 / n - (r2 / n) ** 2, 0.0) / n)
    return GradientStats(n, mean, np.sqrt(coord_var / n), norm_mean, norm_var, norm_se, trace_var, trace_se)


def exact_single_sample_moments(model: Model, data: MultiDomainDataset, probs, weights,
                                grads: list[np.ndarray] | None = None) -> dict:
    """Population mean, trace variance and norm variance of a one-example gradient estimator."""
    probs = np.asarray(probs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    G = grads if grads is not None else per_domain_grads(model, data)
    mean = np.zeros(G[0].shape[1])
    second = norm1 = 0.0
    for i, g in enumerate(G):
        if probs[i] == 0:
            continue
        norms = np.linalg.norm(g, axis=1)
        mean += probs[i] * weights[i] * g.mean(axis=0)
        second += probs[i] * weights[i] ** 2 * math.fsum(norms * norms) / len(g)
        norm1 += probs[i] * weights[i] * math.fsum(norms) / len(g)
    return {
        "mean": mean,
        "trace_var": second - float(mean @ mean),
        "norm_var": second - norm1 * norm1,
        "second_moment": second,
    }


@dataclass
class VarianceGapRow:
    tau: float
    var_s: float
    var_ts: float
    gap: float
    se_s: float
    se_ts: float
    trace_s: float
    trace_ts: float

    @property
    def gap_se(self) -> float:
        return math.hypot(self.se_s, self.se_ts)


def variance_gap_curve(model: Model, data: MultiDomainDataset, tau_grid: Sequence[float], n_samples: int,
                       rng: np.random.Generator, batch_size: int = 1) -> list[VarianceGapRow]:
    """Scalarization vs temperature-sampling gradient-norm variance across temperatures.

    Both estimators at a given temperature consume the same child seed.
    """
    catalog = data.catalog
    G = per_domain_grads(model, data)
    p1 = proportional_probs(catalog)
    ones = np.ones(catalog.K)
    rows = []
    for tau in tau_grid:
        if tau < 1:
            raise InvalidInputError("variance gap curve is defined for tau >= 1")
        seed = int(rng.integers(2**63))
        s = grad_variance(model, data, p1, equivalent_weights(catalog, tau), n_samples, batch_size,
                          np.random.Generator(np.random.Philox(seed)), grads=G)
        ts = grad_variance(model, data, temperature_probs(catalog, tau), ones, n_samples, batch_size,
                           np.random.Generator(np.random.Philox(seed)), grads=G)
        rows.append(VarianceGapRow(float(tau), s.norm_var, ts.norm_var, s.norm_var - ts.norm_var,
                                   s.norm_var_se, ts.norm_var_se, s.trace_var, ts.trace_var))
    return rows


def variance_rows_to_csv(rows: Sequence[VarianceGapRow], comment: str = "") -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tau", "var_s", "var_ts", "gap", "se_s", "se_ts", "trace_s", "trace_ts"])
    for r in rows:
        w.writerow([repr(float(v)) for v in (r.tau, r.var_s, r.var_ts, r.gap, r.se_s, r.se_ts, r.trace_s, r.trace_ts)])
    return buf.getvalue()


def windowed_norm_variance(norms: Sequence[float], window: int) -> np.ndarray:
    """Sample variance of gradient norms over consecutive non-overlapping windows of a run."""
    a = np.asarray(norms, dtype=np.float64)
    n = len(a) // window
    if n == 0 or window < 2:
        return np.empty(0)
    return a[: n * window].reshape(n, window).var(axis=1, ddof=1)


# -- convergence -------------------------------------------------------------------


@dataclass
class ConvergenceReport:
    steps_to_threshold: list[int | None]
    min_loss: np.ndarray
    min_step: list[int]
    final_loss: np.ndarray
    overfit_gap: np.ndarray
    diverged: bool = False


def convergence_report(run: RunRecord, thresholds) -> ConvergenceReport:
    v = run.valid
    steps = np.asarray(run.steps)
    thresholds = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), (v.shape[1],))
    reach = []
    for k in range(v.shape[1]):
        hit = np.flatnonzero(v[:, k] <= thresholds[k])
        reach.append(int(steps[hit[0]]) if len(hit) else None)
    finite = np.where(np.isfinite(v), v, np.inf)
    arg = finite.argmin(axis=0)
    mins = finite[arg, np.arange(v.shape[1])]
    final = v[-1]
    return ConvergenceReport(reach, mins, [int(steps[a]) for a in arg], final, final - mins, run.diverged)


@dataclass
class RaceTable:
    labels: list[str]
    names: tuple[str, ...]
    seeds: list[int]
    steps: np.ndarray  # (config, seed, domain); inf marks a non-finisher
    reports: list[list[ConvergenceReport]] = field(repr=False, default_factory=list)

    def median_steps(self) -> np.ndarray:
        return np.median(self.steps, axis=1)

    def wins(self) -> np.ndarray:
        """Per (config, domain): seeds on which the config was strictly fastest among finishers."""
        best = self.steps.min(axis=0)
        strict = (self.steps == best[None]) & ((self.steps == best[None]).sum(axis=0) == 1)[None]
        return (strict & np.isfinite(self.steps)).sum(axis=1)

    def to_csv(self, comment: str = "") -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "domain", "median_steps", "wins"])
        med, wins = self.median_steps(), self.wins()
        for c, label in enumerate(self.labels):
            for k, name in enumerate(self.names):
                w.writerow([label, name, repr(float(med[c, k])), int(wins[c, k])])
        return buf.getvalue()


def race_table(labels: Sequence[str], records: Sequence[Sequence[RunRecord]], seeds: Sequence[int],
               thresholds_per_seed: Sequence) -> RaceTable:
    """Tabulate already-finished runs; ``records[c][j]`` is config ``c`` under ``seeds[j]``."""
    names = records[0][0].names
    steps = np.full((len(labels), len(seeds), len(names)), np.inf)
    reports: list[list[ConvergenceReport]] = []
    for c in range(len(labels)):
        row = []
        for j in range(len(seeds)):
            rep = convergence_report(records[c][j], thresholds_per_seed[j])
            row.append(rep)
            for k, v in enumerate(rep.steps_to_threshold):
                if v is not None and not rep.diverged:
                    steps[c, j, k] = v
        reports.append(row)
    return RaceTable(list(labels), names, list(seeds), steps, reports)


def race(configs: Sequence[TrainConfig], thresholds, seeds: Sequence[int], workers: int = 1) -> RaceTable:
    """Train every config under every seed and tabulate steps-to-threshold.

    ``thresholds`` is either a per-domain vector or a callable mapping a
    seed's resolved dataset to such a vector (evaluated on the first config's
    data).  Diverged runs count as non-finishers.
    """
    if len(seeds) < 2:
        raise InvalidInputError("a race needs at least two seeds")
    runs = [replace(c, seed=int(s)) for c in configs for s in seeds]
    records = train_many(runs, workers)
    grid = [records[c * len(seeds):(c + 1) * len(seeds)] for c in range(len(configs))]
    if callable(thresholds):
        thr = [thresholds(resolve_data(configs[0].data, s)) for s in seeds]
    else:
        thr = [thresholds] * len(seeds)
    labels = [c.label or f"config{i}" for i, c in enumerate(configs)]
    return race_table(labels, grid, seeds, thr)
