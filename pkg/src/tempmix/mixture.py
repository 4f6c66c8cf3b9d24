"""Closed-form mixture math for multi-domain sampling.

Given domain sizes |D_i|, temperature sampling draws domain ``i`` with

    p(i; tau) = |D_i|^(1/tau) / sum_j |D_j|^(1/tau)

and scalarization samples proportionally (tau = 1) while scaling each
example's loss by ``w_i = p(i; tau) / p(i; 1)``.  Both give the same
population objective; the excess second moment of the scalarized estimator
is governed by ``F(tau) = sum_i p(i; tau)^2 / p(i; 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, InvalidInputError


@dataclass(frozen=True)
class Domain:
    id: int
    name: str
    size: int


@dataclass(frozen=True)
class DomainCatalog:
    """Ordered collection of domains with contiguous ids starting at 1."""

    domains: tuple[Domain, ...]

    def __post_init__(self):
        if not self.domains:
            raise InvalidInputError("catalog must contain at least one domain")
        for expected, dom in enumerate(self.domains, start=1):
            if dom.id != expected:
                raise InvalidInputError(f"domain ids must be contiguous from 1, got {dom.id} at position {expected}")
            if not dom.size > 0:
                raise InvalidInputError(f"domain {dom.name!r} has non-positive size {dom.size}")

    @classmethod
    def from_sizes(cls, sizes: Iterable[float], names: Sequence[str] | None = None) -> "DomainCatalog":
        sizes = list(sizes)
        if names is None:
            names = [f"d{i}" for i in range(1, len(sizes) + 1)]
        if len(names) != len(sizes):
            raise InvalidInputError("names and sizes differ in length")
        return cls(tuple(Domain(i, str(n), s) for i, (n, s) in enumerate(zip(names, sizes), start=1)))

    @property
    def K(self) -> int:
        return len(self.domains)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([d.size for d in self.domains], dtype=np.float64)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.domains]

    @property
    def total(self) -> float:
        return float(math.fsum(d.size for d in self.domains))

    def largest(self) -> int:
        """Zero-based index of the largest domain (first one on ties)."""
        return int(np.argmax(self.sizes))

    def to_text(self) -> str:
        return "".join(f"{d.id}\t{d.name}\t{d.size}\n" for d in self.domains)

    @classmethod
    def from_text(cls, text: str) -> "DomainCatalog":
        domains = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise InvalidInputError(f"line {lineno}: expected id<TAB>name<TAB>size")
            size = float(parts[2])
            domains.append(Domain(int(parts[0]), parts[1], int(size) if size.is_integer() else size))
        return cls(tuple(domains))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DomainCatalog":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not (tau > 0) or not math.isfinite(tau):
        raise DomainError(f"temperature must be a positive finite number, got {tau}")
    return tau


def temperature_probs(catalog: DomainCatalog, tau: float) -> np.ndarray:
    """Sampling probabilities p(i; tau).

    Powers are taken directly when they are representable, which keeps small
    hand-checkable cases exact; otherwise normalization happens in the log
    domain.
    """
    tau = _check_tau(tau)
    sizes = catalog.sizes
    with np.errstate(over="ignore", under="ignore"):
        direct = np.power(sizes, 1.0 / tau)
    total = math.fsum(direct)
    if np.all(np.isfinite(direct)) and np.all(direct > 0) and math.isfinite(total) and np.all(direct / total > 0):
        return direct / total
    logits = np.log(sizes) / tau
    logits -= logits.max()
    p = np.exp(logits)
    return p / math.fsum(p)


def proportional_probs(catalog: DomainCatalog) -> np.ndarray:
    return temperature_probs(catalog, 1.0)


def equivalent_weights(catalog: DomainCatalog, tau: float) -> np.ndarray:
    """Per-domain loss weights that make proportional sampling match p(.; tau)."""
    return temperature_probs(catalog, tau) / proportional_probs(catalog)


def variance_factor(catalog: DomainCatalog, tau: float) -> float:
    """F(tau) = sum_i p(i;tau)^2 / p(i;1), the second moment of the weights."""
    p = temperature_probs(catalog, tau)
    w = p / proportional_probs(catalog)
    return math.fsum(p * w)


def f_tau_sweep(catalog: DomainCatalog, tau_grid: Iterable[float]) -> list[tuple[float, float]]:
    grid = [float(t) for t in tau_grid]
    if not grid:
        raise InvalidInputError("tau grid is empty")
    return [(t, variance_factor(catalog, t)) for t in grid]


def zipf_catalog(K: int, alpha: float, unit_size: int, names: Sequence[str] | None = None) -> DomainCatalog:
    """Catalog with sizes max(1, round(unit_size / i**alpha)) for ranks i = 1..K."""
    if K < 1:
        raise InvalidInputError("K must be at least 1")
    if alpha < 0:
        raise DomainError("alpha must be non-negative")
    if unit_size <= 0:
        raise InvalidInputError("unit_size must be positive")
    # half-up rounding; Python's round() would send 2.5 to 2
    sizes = [max(1, math.floor(unit_size / i**alpha + 0.5)) for i in range(1, K + 1)]
    return DomainCatalog.from_sizes(sizes, names)
