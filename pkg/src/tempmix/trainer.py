"""Deterministic training loop, exact population gradients, and evaluation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .datagen import MultiDomainDataset, SyntheticTaskSpec, make_synthetic, sample_batch
from .errors import DivergedError, InvalidInputError
from .models import Model, ModelSpec, build_model, check_finite
from .rng import make_rng
from .schedules import PlanState, SamplingPlan, effective_tau, plan_at, scalarization_plan_of

MODES = ("ts", "s")


# -- optimizers ---------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise InvalidInputError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise InvalidInputError("learning rate must be positive")

    def build(self, n_params: int):
        if self.kind == "sgd":
            return SGD(self.lr)
        return Adam(n_params, self.lr, self.beta1, self.beta2, self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        params -= self.lr * grad


class Adam:
    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-6):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- exact quantities -------------------------------------------------------------


def _chunks(n: int, size: int):
    for lo in range(0, n, size):
        yield lo, min(n, lo + size)


def domain_mean_grad(model: Model, x: np.ndarray, y: np.ndarray, chunk: int = 4096) -> np.ndarray:
    total = np.zeros(model.n_params)
    for lo, hi in _chunks(len(y), chunk):
        total += model.loss_and_grad(x[lo:hi], y[lo:hi], np.ones(hi - lo))[1]
    return total / len(y)


def full_gradient(model: Model, data: MultiDomainDataset, probs, weights) -> np.ndarray:
    """Exact population gradient ``sum_i probs_i * weights_i * mean_{x in D_i} grad L(x)``."""
    check_finite(model)
    probs = np.asarray(probs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    g = np.zeros(model.n_params)
    for i, split in enumerate(data.train):
        if probs[i] == 0:
            continue
        g += probs[i] * weights[i] * domain_mean_grad(model, split.x, split.y)
    return g


def evaluate(model: Model, data: MultiDomainDataset, split: str = "valid", chunk: int | None = None) -> np.ndarray:
    """Mean per-example loss for each domain over the whole split."""
    parts = data.valid if split == "valid" else data.train
    out = np.empty(len(parts))
    for i, s in enumerate(parts):
        step = chunk or len(s)
        losses = np.concatenate([model.losses(s.x[lo:hi], s.y[lo:hi]) for lo, hi in _chunks(len(s), step)])
        # exactly rounded, so chunking cannot change the result
        out[i] = math.fsum(losses) / len(s)
    return out


def oracle_losses(data: MultiDomainDataset, split: str = "valid") -> np.ndarray:
    """Per-domain loss of the generating parameters (synthetic data only)."""
    true = data.meta.get("true_params")
    if true is None:
        raise InvalidInputError("dataset carries no generating parameters")
    parts = data.valid if split == "valid" else data.train
    out = np.empty(data.K)
    for i, s in enumerate(parts):
        r = s.x @ np.asarray(true[i]) - s.y
        out[i] = math.fsum(r * r) / len(s)
    return out


RIDGE_GRID = tuple(np.logspace(-6, 4, 121))


def best_achievable_losses(data: MultiDomainDataset, ridge_grid: Sequence[float] = RIDGE_GRID) -> np.ndarray:
    """Per-domain validation loss of the best shared linear fit obtainable from the train splits.

    Fits ridge regression on the pooled train data for every penalty in
    ``ridge_grid`` and keeps, per domain, the lowest validation loss.  This is
    the reference level for steps-to-threshold on regression data: unlike the
    noise floor, it accounts for how little a small domain's train split can
    pin down.
    """
    if data.kind != "regression":
        raise InvalidInputError("best achievable loss is only defined for regression data")
    x = np.concatenate([s.x for s in data.train])
    y = np.concatenate([s.y for s in data.train])
    gram, rhs = x.T @ x, x.T @ y
    eye = np.eye(x.shape[1])
    best = np.full(data.K, np.inf)
    for lam in ridge_grid:
        theta = np.linalg.solve(gram + lam * eye, rhs)
        for k, s in enumerate(data.valid):
            r = s.x @ theta - s.y
            best[k] = min(best[k], math.fsum(r * r) / len(s))
    return best


def default_thresholds(data: MultiDomainDataset, margin: float = 0.1) -> np.ndarray:
    """``(1 + margin)`` times :func:`best_achievable_losses`."""
    return (1.0 + margin) * best_achievable_losses(data)


# -- run configuration and records ----------------------------------------------------


DataSource = Union[MultiDomainDataset, SyntheticTaskSpec]


@lru_cache(maxsize=32)
def _synthetic_cached(spec: SyntheticTaskSpec, seed: int) -> MultiDomainDataset:
    return make_synthetic(spec, seed)


def resolve_data(data: DataSource, seed: int) -> MultiDomainDataset:
    if isinstance(data, MultiDomainDataset):
        return data
    if isinstance(data, SyntheticTaskSpec):
        return _synthetic_cached(data, int(seed))
    raise InvalidInputError(f"unsupported data source {type(data).__name__}")


@dataclass
class TrainConfig:
    """One training run.

    ``data`` may be a built dataset, or a synthetic spec that is materialized
    from the run seed.  ``mode="s"`` trains on the scalarization twin of a
    temperature plan.
    """

    model: ModelSpec
    data: DataSource
    plan: SamplingPlan
    mode: str = "ts"
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    batch_size: int = 32
    steps: int = 1000
    eval_interval: int = 100
    seed: int = 0
    homogeneous_batches: bool = False
    track_grad_norms: bool = False
    init_params: np.ndarray | None = None
    label: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}")
        if self.steps < 1 or self.batch_size < 1 or self.eval_interval < 1:
            raise InvalidInputError("steps, batch_size and eval_interval must be >= 1")

    def describe(self) -> dict:
        return {
            "model": vars(self.model),
            "plan": plan_description(self.plan),
            "mode": self.mode,
            "optimizer": vars(self.optimizer),
            "batch_size": self.batch_size,
            "steps": self.steps,
            "eval_interval": self.eval_interval,
            "seed": self.seed,
            "homogeneous_batches": self.homogeneous_batches,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.describe(), sort_keys=True, default=str).encode()).hexdigest()[:16]


def plan_description(plan) -> dict:
    out = {"kind": type(plan).__name__}
    for k, v in vars(plan).items():
        if k == "catalog":
            out["sizes"] = [d.size for d in v.domains]
        elif k == "base":
            out["base"] = plan_description(v)
        elif isinstance(v, frozenset):
            out[k] = sorted(v)
        else:
            out[k] = v
    return out


@dataclass
class RunRecord:
    names: tuple[str, ...]
    steps: list[int] = field(default_factory=list)
    taus: list[float | None] = field(default_factory=list)
    probs: list[np.ndarray] = field(default_factory=list)
    train_loss: list[np.ndarray] = field(default_factory=list)
    valid_loss: list[np.ndarray] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    step_grad_norms: list[float] = field(default_factory=list)
    diverged: bool = False
    diverged_step: int | None = None
    final_params: np.ndarray | None = None
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0

    @property
    def valid(self) -> np.ndarray:
        return np.array(self.valid_loss).reshape(len(self.steps), len(self.names))

    @property
    def train(self) -> np.ndarray:
        return np.array(self.train_loss).reshape(len(self.steps), len(self.names))

    def columns(self) -> list[str]:
        return (["step", "tau"] + [f"train_{n}" for n in self.names] + [f"valid_{n}" for n in self.names]
                + ["grad_norm"] + [f"p_{n}" for n in self.names])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# config_hash={self.config_hash} seed={self.seed}"
                  f"{' diverged_step=' + str(self.diverged_step) if self.diverged else ''}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for k, step in enumerate(self.steps):
            tau = "" if self.taus[k] is None else repr(float(self.taus[k]))
            w.writerow([step, tau, *map(_fmt, self.train_loss[k]), *map(_fmt, self.valid_loss[k]),
                        _fmt(self.grad_norm[k]), *map(_fmt, self.probs[k])])
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        sidecar = {"config": self.config, "config_hash": self.config_hash, "seed": self.seed,
                   "diverged": self.diverged, "diverged_step": self.diverged_step}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True, default=str) + "\n",
                                             encoding="utf-8")


def _fmt(v) -> str:
    return repr(float(v))


# -- training ---------------------------------------------------------------------


def initial_model(config: TrainConfig, data: MultiDomainDataset) -> Model:
    model = build_model(config.model, data.width, make_rng(config.seed, "init"))
    if config.init_params is not None:
        model.params[:] = config.init_params
    return model


def train(config: TrainConfig) -> RunRecord:
    # overflow on the way to divergence is detected and recorded, not warned about
    with np.errstate(over="ignore", invalid="ignore"):
        return _train(config)


def _train(config: TrainConfig) -> RunRecord:
    """Run ``config.steps`` optimizer updates and log every ``eval_interval`` steps.

    Row ``t`` holds the model state after ``t`` updates together with the
    norm of the minibatch gradient applied at update ``t + 1`` (for the last
    row, a minibatch drawn but not applied).
    """
    data = resolve_data(config.data, config.seed)
    plan = config.plan if config.mode == "ts" else scalarization_plan_of(config.plan)
    if not np.array_equal(plan.catalog.sizes, data.catalog.sizes):
        raise InvalidInputError("plan catalog does not match the dataset's train sizes")

    model = initial_model(config, data)
    opt = config.optimizer.build(model.n_params)
    rng = make_rng(config.seed, "sample")
    state = PlanState.initial(data.catalog)
    rec = RunRecord(data.names, config=config.describe(), config_hash=config.digest(), seed=config.seed)
    B = config.batch_size

    for t in range(config.steps + 1):
        probs, weights = plan_at(plan, state)
        batch = sample_batch(data, probs, weights, B, rng, config.homogeneous_batches)
        x, y = data.gather(batch.domains, batch.indices)
        loss, grad = model.loss_and_grad(x, y, batch.weights)
        grad /= B
        gnorm = float(np.sqrt(np.dot(grad, grad)))
        if config.track_grad_norms and t < config.steps:
            rec.step_grad_norms.append(gnorm)

        if t % config.eval_interval == 0 or t == config.steps:
            tr = evaluate(model, data, "train")
            va = evaluate(model, data, "valid")
            rec.steps.append(t)
            rec.taus.append(effective_tau(plan, t))
            rec.probs.append(probs)
            rec.train_loss.append(tr)
            rec.valid_loss.append(va)
            rec.grad_norm.append(gnorm)
            if not (np.all(np.isfinite(tr)) and np.all(np.isfinite(va))):
                rec.diverged, rec.diverged_step = True, t
                break
        if t == config.steps:
            break
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            rec.diverged, rec.diverged_step = True, t
            break
        opt.step(model.params, grad)
        state.record(plan, batch.domain_counts(data.K))
        try:
            check_finite(model)
        except DivergedError:
            rec.diverged, rec.diverged_step = True, t + 1
            break

    rec.final_params = model.params.copy()
    return rec


def train_many(configs: Sequence[TrainConfig], workers: int = 1) -> list[RunRecord]:
    """Run independent configs, optionally in worker processes; results keep input order."""
    if workers <= 1 or len(configs) <= 1:
        return [train(c) for c in configs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(train, configs))
