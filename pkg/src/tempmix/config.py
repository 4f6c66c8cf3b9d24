"""Experiment configuration files.

An experiment is one INI file with flat ``key = value`` sections::

    [experiment]
    name = cooldown
    output_dir = runs/cooldown
    seeds = 0, 1, 2, 3, 4
    steps = 20000
    batch_size = 16
    eval_interval = 100

    [catalog]
    sizes = 5000, 50
    names = hrl, lrl

    [dataset]
    kind = synthetic
    private_dim = 40
    valid_size = 1000

    [model]
    kind = shared_linear

    [optimizer]
    kind = sgd
    lr = 0.01

    [arm.cooldown]
    plan = step
    segments = 0:5, half:1

Step positions inside plans accept an integer or ``half`` (``steps // 2``).
Every arm trains on the dataset declared once in ``[dataset]``.
"""

from __future__ import annotations

import configparser
import hashlib
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .datagen import MultiDomainDataset, SyntheticTaskSpec, load_corpus, make_homogeneous
from .errors import ConfigError, TempmixError
from .mixture import DomainCatalog, zipf_catalog
from .models import ModelSpec
from .schedules import LinearDense, OrderMatters, PiecewiseLinear, SamplingPlan, Static, StepSchedule, Unimax
from .trainer import MODES, OptimizerSpec

PLAN_KINDS = ("static", "step", "linear", "piecewise", "unimax", "order_matters")
DATASET_KINDS = ("synthetic", "homogeneous", "corpus")


# -- value codecs ------------------------------------------------------------------


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"not a finite number: {text!r}")
    return v


def _parse_step(text: str) -> int | str:
    t = text.strip()
    if t == "half":
        return t
    v = int(t)
    if v < 0:
        raise ValueError("step positions must be non-negative")
    return v


def _parse_pairs(text: str) -> tuple[tuple[int | str, float], ...]:
    out = []
    for item in _split(text):
        step, sep, tau = item.partition(":")
        if not sep:
            raise ValueError(f"expected step:tau, got {item!r}")
        out.append((_parse_step(step), _parse_float(tau)))
    if not out:
        raise ValueError("empty list")
    return tuple(out)


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _tuple_of(parse: Callable[[str], Any]) -> Callable[[str], tuple]:
    def run(text: str) -> tuple:
        items = tuple(parse(t) for t in _split(text))
        if not items:
            raise ValueError("empty list")
        return items

    return run


# name -> (parse, format)
CODECS: dict[str, tuple[Callable[[str], Any], Callable[[Any], str]]] = {
    "str": (str.strip, str),
    "int": (int, str),
    "float": (_parse_float, _fmt_float),
    "bool": (_parse_bool, lambda v: "true" if v else "false"),
    "step": (_parse_step, str),
    "ints": (_tuple_of(int), lambda v: ", ".join(map(str, v))),
    "floats": (_tuple_of(_parse_float), lambda v: ", ".join(map(_fmt_float, v))),
    "strs": (_tuple_of(str.strip), ", ".join),
    "pairs": (_parse_pairs, lambda v: ", ".join(f"{s}:{_fmt_float(t)}" for s, t in v)),
}


def _schema(cls) -> dict[str, str]:
    return {f.name: f.metadata["codec"] for f in fields(cls) if "codec" in f.metadata}


def _field(codec: str, default=None):
    return field(default=default, metadata={"codec": codec})


def _read_section(cls, section: str, items: dict[str, str], required: tuple[str, ...] = (), **extra):
    schema = _schema(cls)
    values = dict(extra)
    for key, raw in items.items():
        if key not in schema:
            raise ConfigError(f"unknown key {section}.{key}", f"{section}.{key}")
        try:
            values[key] = CODECS[schema[key]][0](raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}", f"{section}.{key}") from None
    for key in required:
        if key not in values:
            raise ConfigError(f"missing required key {section}.{key}", f"{section}.{key}")
    return cls(**values)


def _write_section(obj) -> dict[str, str]:
    out = {}
    for name, codec in _schema(type(obj)).items():
        v = getattr(obj, name)
        if v is not None:
            out[name] = CODECS[codec][1](v)
    return out


def resolve_step(pos: int | str, steps: int) -> int:
    return steps // 2 if pos == "half" else int(pos)


# -- sections -------------------------------------------------------------------------


@dataclass(frozen=True)
class CatalogSection:
    sizes: tuple[int, ...] | None = _field("ints")
    names: tuple[str, ...] | None = _field("strs")
    zipf_k: int | None = _field("int")
    zipf_alpha: float | None = _field("float")
    zipf_unit: int | None = _field("int")

    def is_empty(self) -> bool:
        return all(getattr(self, f) is None for f in _schema(CatalogSection))

    def build(self) -> DomainCatalog:
        zipf = (self.zipf_k, self.zipf_alpha, self.zipf_unit)
        if self.sizes is not None:
            if any(v is not None for v in zipf):
                raise ConfigError("give either catalog.sizes or zipf parameters, not both", "catalog.sizes")
            return _guard("catalog.sizes", DomainCatalog.from_sizes, self.sizes, self.names)
        for key, v in zip(("zipf_k", "zipf_alpha", "zipf_unit"), zipf):
            if v is None:
                raise ConfigError(f"missing required key catalog.{key} (or catalog.sizes)", f"catalog.{key}")
        return _guard("catalog.zipf_k", zipf_catalog, self.zipf_k, self.zipf_alpha, self.zipf_unit, self.names)


@dataclass(frozen=True)
class DatasetSection:
    kind: str = _field("str", "synthetic")
    dim: int | None = _field("int")
    private_dim: int | None = _field("int")
    noise: float | None = _field("float")
    domain_scale: float | None = _field("float")
    feature_decay: float | None = _field("float")
    valid_fraction: float | None = _field("float")
    valid_size: int | None = _field("int")
    path: str | None = _field("str")
    context: int | None = _field("int")
    direction: tuple[float, ...] | None = _field("floats")
    target: float | None = _field("float")


@dataclass(frozen=True)
class ArmSection:
    name: str
    plan: str = _field("str")
    mode: str = _field("str", "ts")
    tau: float | None = _field("float")
    segments: tuple | None = _field("pairs")
    knots: tuple | None = _field("pairs")
    tau_start: float | None = _field("float")
    tau_end: float | None = _field("float")
    total_steps: int | str | None = _field("step")
    epoch_budget: float | None = _field("float")
    high_set: tuple[int, ...] | None = _field("ints")
    intro_step: int | str | None = _field("step")
    post_tau: float | None = _field("float")

    REQUIRED = {
        "static": ("tau",),
        "step": ("segments",),
        "linear": ("tau_start", "tau_end", "total_steps"),
        "piecewise": ("knots",),
        "unimax": ("epoch_budget",),
        "order_matters": ("high_set", "intro_step", "post_tau"),
    }

    def validate(self) -> None:
        sec = f"arm.{self.name}"
        if self.plan not in PLAN_KINDS:
            raise ConfigError(f"{sec}.plan must be one of {PLAN_KINDS}", f"{sec}.plan")
        if self.mode not in MODES:
            raise ConfigError(f"{sec}.mode must be one of {MODES}", f"{sec}.mode")
        for key in self.REQUIRED[self.plan]:
            if getattr(self, key) is None:
                raise ConfigError(f"missing required key {sec}.{key} for plan {self.plan!r}", f"{sec}.{key}")
        allowed = set(self.REQUIRED[self.plan]) | {"plan", "mode"}
        for key in _schema(ArmSection):
            if key not in allowed and getattr(self, key) is not None:
                raise ConfigError(f"{sec}.{key} does not apply to plan {self.plan!r}", f"{sec}.{key}")
        if self.mode == "s" and self.plan in ("unimax", "order_matters"):
            raise ConfigError(f"plan {self.plan!r} has no scalarization twin", f"{sec}.mode")

    def build_plan(self, catalog: DomainCatalog, steps: int) -> SamplingPlan:
        key = f"arm.{self.name}.{self.REQUIRED[self.plan][0]}"
        if self.plan == "static":
            return _guard(key, Static, catalog, self.tau)
        if self.plan == "step":
            segs = tuple((resolve_step(s, steps), t) for s, t in self.segments)
            return _guard(key, StepSchedule, catalog, segs)
        if self.plan == "linear":
            return _guard(key, LinearDense, catalog, self.tau_start, self.tau_end,
                          resolve_step(self.total_steps, steps))
        if self.plan == "piecewise":
            knots = tuple((resolve_step(s, steps), t) for s, t in self.knots)
            return _guard(key, PiecewiseLinear, catalog, knots)
        if self.plan == "unimax":
            return _guard(key, Unimax, catalog, self.epoch_budget)
        return _guard(key, OrderMatters, catalog, frozenset(self.high_set),
                      resolve_step(self.intro_step, steps), self.post_tau)


@dataclass(frozen=True)
class GradvarSection:
    checkpoint: str = _field("str", "fresh-init")
    tau_grid: tuple[float, ...] = _field("floats", (1.0, 2.0, 3.0, 5.0))
    n_samples: int = _field("int", 100000)
    batch_size: int = _field("int", 1)
    seed: int | None = _field("int")


@dataclass(frozen=True)
class ExperimentSection:
    name: str = _field("str", "experiment")
    output_dir: str = _field("str", "runs")
    seeds: tuple[int, ...] = _field("ints", (0,))
    steps: int = _field("int", 1000)
    batch_size: int = _field("int", 32)
    eval_interval: int = _field("int", 100)
    workers: int = _field("int", 1)
    margin: float = _field("float", 0.1)
    thresholds: tuple[float, ...] | None = _field("floats")
    homogeneous_batches: bool = _field("bool", False)


@dataclass(frozen=True)
class ModelSection:
    kind: str = _field("str", "shared_linear")
    embed: int = _field("int", 16)
    hidden: int = _field("int", 64)
    init_scale: float = _field("float", 0.0)


@dataclass(frozen=True)
class OptimizerSection:
    kind: str = _field("str", "adam")
    lr: float = _field("float", 5e-4)
    beta1: float = _field("float", 0.9)
    beta2: float = _field("float", 0.98)
    eps: float = _field("float", 1e-6)


def _guard(key: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (TempmixError, ValueError, TypeError) as exc:
        raise ConfigError(f"{key}: {exc}", key) from None


# -- the experiment ---------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection
    catalog: CatalogSection
    dataset: DatasetSection
    model: ModelSection
    optimizer: OptimizerSection
    arms: tuple[ArmSection, ...]
    gradvar: GradvarSection | None = None

    def __post_init__(self):
        e = self.experiment
        for key in ("steps", "batch_size", "eval_interval", "workers"):
            if getattr(e, key) < 1:
                raise ConfigError(f"experiment.{key} must be >= 1", f"experiment.{key}")
        if not e.seeds:
            raise ConfigError("experiment.seeds must list at least one seed", "experiment.seeds")
        if len(set(e.seeds)) != len(e.seeds):
            raise ConfigError("experiment.seeds must be distinct", "experiment.seeds")
        if e.margin < 0:
            raise ConfigError("experiment.margin must be non-negative", "experiment.margin")
        if self.dataset.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}", "dataset.kind")
        if self.dataset.kind == "corpus":
            if self.dataset.path is None:
                raise ConfigError("missing required key dataset.path for a corpus dataset", "dataset.path")
            if self.dataset.context is None:
                raise ConfigError("missing required key dataset.context for a corpus dataset", "dataset.context")
            if not self.catalog.is_empty():
                raise ConfigError("a corpus dataset takes its catalog from the files; drop [catalog]",
                                  "catalog.sizes")
            if e.thresholds is None:
                raise ConfigError("corpus experiments need explicit thresholds", "experiment.thresholds")
        if self.dataset.kind == "homogeneous" and self.dataset.direction is None:
            raise ConfigError("missing required key dataset.direction", "dataset.direction")
        _guard("model.kind", ModelSpec, self.model.kind, self.model.embed, self.model.hidden, self.model.init_scale)
        _guard("optimizer.kind", OptimizerSpec, *(getattr(self.optimizer, f) for f in _schema(OptimizerSection)))
        if not self.arms:
            raise ConfigError("at least one [arm.NAME] section is required", "arm")
        for arm in self.arms:
            arm.validate()
        if len({a.name for a in self.arms}) != len(self.arms):
            raise ConfigError("arm names must be unique", "arm")
        if not self.catalog.is_empty():
            # corpus catalogs are only known once the files are read; check those plans at build time
            catalog = self.catalog.build()
            for arm in self.arms:
                arm.build_plan(catalog, e.steps)

    # parsing -----------------------------------------------------------------------

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.DuplicateOptionError as exc:
            raise ConfigError(f"duplicate key {exc.section}.{exc.option}", f"{exc.section}.{exc.option}") from None
        except configparser.DuplicateSectionError as exc:
            raise ConfigError(f"duplicate section [{exc.section}]", exc.section) from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}", "") from None

        known = {"experiment", "catalog", "dataset", "model", "optimizer", "gradvar"}
        for sec in cp.sections():
            if sec not in known and not sec.startswith("arm."):
                raise ConfigError(f"unknown section [{sec}]", sec)
        if not cp.has_section("dataset"):
            raise ConfigError("missing required section [dataset]", "dataset")

        def items(sec):
            return dict(cp.items(sec)) if cp.has_section(sec) else {}

        arms = []
        for sec in cp.sections():
            if sec.startswith("arm."):
                name = sec[len("arm."):]
                if not re.fullmatch(r"[A-Za-z0-9][A-Za-z0-9_-]*", name):
                    raise ConfigError(f"arm names must be alphanumeric (with - or _): [{sec}]", sec)
                arms.append(_read_section(ArmSection, sec, items(sec), required=("plan",), name=name))
        return cls(
            experiment=_read_section(ExperimentSection, "experiment", items("experiment")),
            catalog=_read_section(CatalogSection, "catalog", items("catalog")),
            dataset=_read_section(DatasetSection, "dataset", items("dataset")),
            model=_read_section(ModelSection, "model", items("model")),
            optimizer=_read_section(OptimizerSection, "optimizer", items("optimizer")),
            arms=tuple(arms),
            gradvar=_read_section(GradvarSection, "gradvar", items("gradvar")) if cp.has_section("gradvar") else None,
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}", "") from None
        return cls.from_text(text)

    def to_text(self) -> str:
        """Canonical serialization; every non-default key is written explicitly."""
        lines = []

        def emit(name, obj):
            body = _write_section(obj)
            if not body:
                return
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in body.items())
            lines.append("")

        emit("experiment", self.experiment)
        emit("catalog", self.catalog)
        emit("dataset", self.dataset)
        emit("model", self.model)
        emit("optimizer", self.optimizer)
        for arm in self.arms:
            emit(f"arm.{arm.name}", arm)
        if self.gradvar is not None:
            emit("gradvar", self.gradvar)
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    # materialization -----------------------------------------------------------------

    @property
    def model_spec(self) -> ModelSpec:
        m = self.model
        return ModelSpec(m.kind, m.embed, m.hidden, m.init_scale)

    @property
    def optimizer_spec(self) -> OptimizerSpec:
        o = self.optimizer
        return OptimizerSpec(o.kind, o.lr, o.beta1, o.beta2, o.eps)

    def data_source(self, base_dir: str | Path = ".") -> SyntheticTaskSpec | MultiDomainDataset:
        """The shared dataset: a seed-dependent synthetic spec or a fixed dataset.

        Relative corpus paths resolve against ``base_dir``.
        """
        d = self.dataset
        if d.kind == "corpus":
            root = Path(base_dir) / d.path
            if not root.is_dir():
                raise ConfigError(f"dataset.path {root} is not a directory", "dataset.path")
            return _guard("dataset.path", load_corpus, root, d.context)
        catalog = self.catalog.build()
        if d.kind == "homogeneous":
            if len(d.direction) < 1:
                raise ConfigError("dataset.direction must be non-empty", "dataset.direction")
            sizes = [int(s) for s in catalog.sizes]
            data = make_homogeneous(sizes, d.direction, 1.0 if d.target is None else d.target,
                                    d.valid_size or 1)
            return MultiDomainDataset(data.kind, tuple(catalog.names), data.train, data.valid, data.meta)
        opts = {f: getattr(d, f) for f in ("dim", "private_dim", "noise", "domain_scale", "feature_decay",
                                           "valid_fraction", "valid_size") if getattr(d, f) is not None}
        for f in ("path", "context", "direction", "target"):
            if getattr(d, f) is not None:
                raise ConfigError(f"dataset.{f} does not apply to a synthetic dataset", f"dataset.{f}")
        sizes = tuple(int(s) for s in catalog.sizes)
        return _guard("dataset.kind", SyntheticTaskSpec, sizes, names=tuple(catalog.names), **opts)

    def thresholds_for(self, data: MultiDomainDataset) -> np.ndarray:
        from .trainer import default_thresholds

        t = self.experiment.thresholds
        if t is None:
            return _guard("experiment.thresholds", default_thresholds, data, self.experiment.margin)
        if len(t) not in (1, data.K):
            raise ConfigError(f"experiment.thresholds needs 1 or {data.K} values", "experiment.thresholds")
        return np.broadcast_to(np.asarray(t, dtype=np.float64), (data.K,)).copy()
