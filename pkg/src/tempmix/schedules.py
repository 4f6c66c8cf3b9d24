"""Time-indexed sampling plans.

A plan maps a training step (plus, for stateful plans, the history of draws)
to a pair ``(probs, weights)``: the per-domain sampling distribution and the
per-domain loss weight attached to every drawn example.

Temperature-based plans (:class:`Static`, :class:`StepSchedule`,
:class:`LinearDense`, :class:`PiecewiseLinear`) always emit unit weights;
their scalarization twin (:func:`scalarization_plan_of`) samples
proportionally and moves the temperature into the weights instead.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import InvalidInputError, UnsupportedPlanError
from .mixture import DomainCatalog, _check_tau, equivalent_weights, proportional_probs, temperature_probs


@dataclass(frozen=True)
class Static:
    catalog: DomainCatalog
    tau: float

    def __post_init__(self):
        _check_tau(self.tau)


@dataclass(frozen=True)
class StepSchedule:
    """Piecewise-constant temperature; ``segments`` holds ``(start_step, tau)`` pairs.

    A segment is in force from its start step inclusive.
    """

    catalog: DomainCatalog
    segments: tuple[tuple[int, float], ...]

    def __post_init__(self):
        segs = tuple((int(s), float(t)) for s, t in self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs or segs[0][0] != 0:
            raise InvalidInputError("first schedule segment must start at step 0")
        starts = [s for s, _ in segs]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise InvalidInputError("segment start steps must be strictly increasing")
        for _, t in segs:
            _check_tau(t)

    def tau_at(self, step: int) -> float:
        i = bisect.bisect_right([s for s, _ in self.segments], step) - 1
        return self.segments[max(i, 0)][1]


@dataclass(frozen=True)
class LinearDense:
    """Temperature interpolated linearly from ``tau_start`` to ``tau_end``; clamps after ``total_steps``."""

    catalog: DomainCatalog
    tau_start: float
    tau_end: float
    total_steps: int

    def __post_init__(self):
        _check_tau(self.tau_start)
        _check_tau(self.tau_end)
        if self.total_steps < 1:
            raise InvalidInputError("total_steps must be >= 1")

    def tau_at(self, step: int) -> float:
        frac = min(max(step, 0), self.total_steps) / self.total_steps
        return self.tau_start + (self.tau_end - self.tau_start) * frac


@dataclass(frozen=True)
class PiecewiseLinear:
    """Temperature linearly interpolated between ``(step, tau)`` knots, flat outside them."""

    catalog: DomainCatalog
    knots: tuple[tuple[int, float], ...]

    def __post_init__(self):
        knots = tuple((int(s), float(t)) for s, t in self.knots)
        object.__setattr__(self, "knots", knots)
        if len(knots) < 2:
            raise InvalidInputError("piecewise-linear schedule needs at least two knots")
        steps = [s for s, _ in knots]
        if steps[0] != 0 or any(b <= a for a, b in zip(steps, steps[1:])):
            raise InvalidInputError("knot steps must start at 0 and strictly increase")
        for _, t in knots:
            _check_tau(t)

    def tau_at(self, step: int) -> float:
        xs, ys = zip(*self.knots)
        return float(np.interp(step, xs, ys))


@dataclass(frozen=True)
class Unimax:
    """Uniform over active domains; a domain retires once drawn ``epoch_budget * size`` times.

    The largest domain never retires, so the mixture cannot become empty.
    """

    catalog: DomainCatalog
    epoch_budget: float

    def __post_init__(self):
        if not self.epoch_budget > 0:
            raise InvalidInputError("epoch_budget must be positive")


@dataclass(frozen=True)
class OrderMatters:
    """Proportional over ``high_set`` before ``intro_step``, temperature ``post_tau`` over all domains after."""

    catalog: DomainCatalog
    high_set: frozenset[int]
    intro_step: int
    post_tau: float

    def __post_init__(self):
        hs = frozenset(int(i) for i in self.high_set)
        object.__setattr__(self, "high_set", hs)
        ids = {d.id for d in self.catalog.domains}
        if not hs or not hs < ids:
            raise InvalidInputError("high_set must be a non-empty strict subset of the domain ids")
        if self.intro_step < 0:
            raise InvalidInputError("intro_step must be non-negative")
        _check_tau(self.post_tau)


@dataclass(frozen=True)
class Scalarized:
    """Scalarization twin of a temperature plan: proportional sampling, weights w_tau(step)."""

    base: "TemperaturePlan"

    @property
    def catalog(self) -> DomainCatalog:
        return self.base.catalog


TemperaturePlan = Union[Static, StepSchedule, LinearDense, PiecewiseLinear]
SamplingPlan = Union[Static, StepSchedule, LinearDense, PiecewiseLinear, Unimax, OrderMatters, Scalarized]
TEMPERATURE_PLANS = (Static, StepSchedule, LinearDense, PiecewiseLinear)


@dataclass
class PlanState:
    """Mutable per-run sampling history. Owned by a single training loop."""

    step: int
    counts: np.ndarray
    active: np.ndarray = field(default=None)

    @classmethod
    def initial(cls, catalog: DomainCatalog) -> "PlanState":
        return cls(0, np.zeros(catalog.K, dtype=np.int64), np.ones(catalog.K, dtype=bool))

    def __post_init__(self):
        if self.active is None:
            self.active = np.ones(len(self.counts), dtype=bool)

    def record(self, plan: SamplingPlan, domain_counts: np.ndarray) -> None:
        """Account one optimizer step that drew ``domain_counts`` examples per domain."""
        self.counts = self.counts + np.asarray(domain_counts, dtype=np.int64)
        self.step += 1
        if isinstance(plan, Unimax):
            self.active = _unimax_active(plan, self)

    def copy(self) -> "PlanState":
        return PlanState(self.step, self.counts.copy(), self.active.copy())


def _unimax_active(plan: Unimax, state: PlanState) -> np.ndarray:
    budget = plan.epoch_budget * plan.catalog.sizes
    active = state.active & (state.counts < budget)
    active[plan.catalog.largest()] = True
    return active


def effective_tau(plan: SamplingPlan, step: int) -> float | None:
    """Temperature in force at ``step``; ``None`` for plans not driven by a temperature."""
    if isinstance(plan, Scalarized):
        return effective_tau(plan.base, step)
    if isinstance(plan, Static):
        return float(plan.tau)
    if isinstance(plan, (StepSchedule, LinearDense, PiecewiseLinear)):
        return plan.tau_at(step)
    return None


def plan_at(plan: SamplingPlan, state: PlanState) -> tuple[np.ndarray, np.ndarray]:
    if state.step < 0:
        raise InvalidInputError("step must be non-negative")
    catalog = plan.catalog
    if len(state.counts) != catalog.K:
        raise InvalidInputError("plan state does not match the catalog size")
    ones = np.ones(catalog.K)

    if isinstance(plan, Scalarized):
        tau = effective_tau(plan.base, state.step)
        return proportional_probs(catalog), equivalent_weights(catalog, tau)
    if isinstance(plan, TEMPERATURE_PLANS):
        return temperature_probs(catalog, effective_tau(plan, state.step)), ones
    if isinstance(plan, Unimax):
        active = _unimax_active(plan, state)
        return active / active.sum(), ones
    if isinstance(plan, OrderMatters):
        if state.step >= plan.intro_step:
            return temperature_probs(catalog, plan.post_tau), ones
        mask = np.array([d.id in plan.high_set for d in catalog.domains])
        p = np.where(mask, catalog.sizes, 0.0)
        return p / p.sum(), ones
    raise UnsupportedPlanError(f"unknown plan type {type(plan).__name__}")


def scalarization_plan_of(plan: SamplingPlan) -> Scalarized:
    if isinstance(plan, Scalarized):
        return plan
    if not isinstance(plan, TEMPERATURE_PLANS):
        raise UnsupportedPlanError(
            f"{type(plan).__name__} has no canonical scalarization twin; only temperature plans do"
        )
    return Scalarized(plan)


def is_temperature_plan(plan: SamplingPlan) -> bool:
    return isinstance(plan, TEMPERATURE_PLANS)


def cooldown(catalog: DomainCatalog, switch_step: int, tau_high: float = 5.0, tau_low: float = 1.0) -> StepSchedule:
    """High temperature until ``switch_step``, then ``tau_low`` (proportional by default)."""
    return StepSchedule(catalog, ((0, tau_high), (switch_step, tau_low)))
