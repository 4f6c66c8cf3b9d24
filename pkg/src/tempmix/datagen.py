"""Multi-domain datasets and minibatch sampling.

Two example kinds are supported:

* ``"regression"``: feature vectors ``x`` (float64, shape ``(d,)``) with a
  scalar target ``y``.
* ``"bytes"``: a context of ``c`` bytes (uint8) predicting the next byte.

Every domain keeps separate train and validation splits.  Sampling draws a
domain per slot from the given probabilities, then an example uniformly with
replacement from that domain's train split.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, MissingDataError
from .mixture import DomainCatalog
from .rng import make_rng

FORMAT_VERSION = 1
_MAGIC = b"TMXDS\x00"


@dataclass(frozen=True)
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class MultiDomainDataset:
    kind: str
    names: tuple[str, ...]
    train: tuple[Split, ...]
    valid: tuple[Split, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("regression", "bytes"):
            raise InvalidInputError(f"unknown dataset kind {self.kind!r}")
        if not (len(self.names) == len(self.train) == len(self.valid) >= 1):
            raise InvalidInputError("names, train and valid splits must align and be non-empty")
        widths = set()
        for name, tr, va in zip(self.names, self.train, self.valid):
            if len(tr) < 1 or len(va) < 1:
                raise InvalidInputError(f"domain {name!r} needs at least one train and one validation example")
            widths.add(tr.x.shape[1:])
            widths.add(va.x.shape[1:])
        if len(widths) != 1:
            raise InvalidInputError("feature dimension / context length differs across domains")

    @property
    def K(self) -> int:
        return len(self.names)

    @property
    def width(self) -> int:
        return int(self.train[0].x.shape[1])

    @property
    def train_sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.train], dtype=np.int64)

    @property
    def catalog(self) -> DomainCatalog:
        return DomainCatalog.from_sizes([int(n) for n in self.train_sizes], self.names)

    def gather(self, domains: np.ndarray, indices: np.ndarray, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        """Materialize examples in slot order."""
        parts = self.train if split == "train" else self.valid
        x = np.empty((len(domains),) + parts[0].x.shape[1:], dtype=parts[0].x.dtype)
        y = np.empty(len(domains), dtype=parts[0].y.dtype)
        for k in np.unique(domains):
            sel = domains == k
            x[sel] = parts[k].x[indices[sel]]
            y[sel] = parts[k].y[indices[sel]]
        return x, y

    # -- serialization ---------------------------------------------------

    def to_bytes(self) -> bytes:
        arrays = []
        for i in range(self.K):
            for split_name, split in (("train", self.train[i]), ("valid", self.valid[i])):
                arrays.append((f"{i}/{split_name}/x", np.ascontiguousarray(split.x)))
                arrays.append((f"{i}/{split_name}/y", np.ascontiguousarray(split.y)))
        table, offset = [], 0
        for name, arr in arrays:
            table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
        header = json.dumps(
            {"version": FORMAT_VERSION, "kind": self.kind, "names": list(self.names), "meta": _jsonable(self.meta),
             "arrays": table},
            sort_keys=True,
        ).encode("utf-8")
        body = b"".join(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes() for _, arr in arrays)
        return _MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MultiDomainDataset":
        if not blob.startswith(_MAGIC):
            raise InvalidInputError("not a dataset cache file")
        version, hlen = struct.unpack_from("<IQ", blob, len(_MAGIC))
        if version != FORMAT_VERSION:
            raise InvalidInputError(f"unsupported dataset format version {version}")
        start = len(_MAGIC) + struct.calcsize("<IQ")
        header = json.loads(blob[start:start + hlen])
        body = memoryview(blob)[start + hlen:]
        arrs = {}
        for entry in header["arrays"]:
            dt = np.dtype(entry["dtype"])
            n = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
            arrs[entry["name"]] = np.frombuffer(body[entry["offset"]:entry["offset"] + n], dtype=dt).reshape(entry["shape"]).copy()
        K = len(header["names"])
        train = tuple(Split(arrs[f"{i}/train/x"], arrs[f"{i}/train/y"]) for i in range(K))
        valid = tuple(Split(arrs[f"{i}/valid/x"], arrs[f"{i}/valid/y"]) for i in range(K))
        return cls(header["kind"], tuple(header["names"]), train, valid, header["meta"])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "MultiDomainDataset":
        return cls.from_bytes(Path(path).read_bytes())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# -- synthetic regression ---------------------------------------------------


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Shared-parameter linear regression across domains.

    Domain ``i`` generates ``y = x . (theta_shared + theta_i) + eps`` with
    ``eps ~ N(0, noise**2)``.  With ``private_dim == 0`` every feature is
    standard normal in ``dim`` dimensions.  With ``private_dim > 0`` the
    feature vector has ``dim + K * private_dim`` coordinates: the first
    ``dim`` are shared by all domains, and domain ``i`` additionally fills its
    own block of ``private_dim`` coordinates (zero elsewhere), where
    ``theta_i`` lives.  A single shared parameter vector can then fit every
    domain exactly.  Private coordinate ``j`` of a block has standard
    deviation ``feature_decay**j``; values below 1 make the block
    ill-conditioned, so gradient descent fits signal first and noise late.

    ``sizes`` are total example counts; each domain is split into train and
    validation by ``valid_fraction``.  If ``valid_size`` is given, ``sizes``
    are train counts and each domain gets exactly ``valid_size`` extra
    validation examples.
    """

    sizes: tuple[int, ...]
    dim: int = 4
    private_dim: int = 0
    noise: float = 0.1
    domain_scale: float = 1.0
    feature_decay: float = 1.0
    valid_fraction: float = 0.2
    valid_size: int | None = None
    names: tuple[str, ...] | None = None
    shared_theta: tuple[float, ...] | None = None
    domain_thetas: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if not self.sizes:
            raise InvalidInputError("at least one domain is required")
        if self.noise < 0:
            raise InvalidInputError("noise must be non-negative")
        if not self.feature_decay > 0:
            raise InvalidInputError("feature_decay must be positive")
        if self.dim < 0 or self.private_dim < 0 or self.dim + self.private_dim < 1:
            raise InvalidInputError("feature dimension must be at least 1")
        if self.valid_size is None:
            if min(self.sizes) < 2:
                raise InvalidInputError("every domain needs size >= 2 so both splits are non-empty")
            if not 0 < self.valid_fraction < 1:
                raise InvalidInputError("valid_fraction must lie in (0, 1)")
        elif min(self.sizes) < 1 or self.valid_size < 1:
            raise InvalidInputError("train sizes and valid_size must be positive")

    @property
    def K(self) -> int:
        return len(self.sizes)

    @property
    def width(self) -> int:
        return self.dim + self.K * self.private_dim

    def split_sizes(self) -> list[tuple[int, int]]:
        if self.valid_size is not None:
            return [(s, self.valid_size) for s in self.sizes]
        out = []
        for s in self.sizes:
            nv = min(max(1, int(np.floor(s * self.valid_fraction + 0.5))), s - 1)
            out.append((s - nv, nv))
        return out

    def domain_names(self) -> tuple[str, ...]:
        return self.names if self.names else tuple(f"d{i}" for i in range(1, self.K + 1))

    def catalog(self) -> DomainCatalog:
        """Catalog of train-split sizes, known before any data is drawn."""
        return DomainCatalog.from_sizes([n for n, _ in self.split_sizes()], self.domain_names())


def make_synthetic(spec: SyntheticTaskSpec, seed: int) -> MultiDomainDataset:
    rng = make_rng(seed, "data")
    K, width = spec.K, spec.width

    if spec.shared_theta is not None:
        shared = np.asarray(spec.shared_theta, dtype=np.float64)
    else:
        shared = np.zeros(width)
        shared[: spec.dim] = rng.standard_normal(spec.dim)
    if spec.domain_thetas is not None:
        own = [np.asarray(t, dtype=np.float64) for t in spec.domain_thetas]
    else:
        own = []
        for i in range(K):
            t = np.zeros(width)
            if spec.private_dim:
                lo = spec.dim + i * spec.private_dim
                t[lo:lo + spec.private_dim] = spec.domain_scale * rng.standard_normal(spec.private_dim)
            else:
                t[:] = spec.domain_scale * rng.standard_normal(width)
            own.append(t)
    if shared.shape != (width,) or any(t.shape != (width,) for t in own) or len(own) != K:
        raise InvalidInputError(f"true parameter vectors must have length {width}")

    scales = spec.feature_decay ** np.arange(spec.private_dim)

    def draw(i: int, n: int) -> Split:
        x = np.zeros((n, width))
        x[:, : spec.dim] = rng.standard_normal((n, spec.dim))
        if spec.private_dim:
            lo = spec.dim + i * spec.private_dim
            x[:, lo:lo + spec.private_dim] = rng.standard_normal((n, spec.private_dim)) * scales
        y = x @ (shared + own[i]) + spec.noise * rng.standard_normal(n)
        return Split(x, y)

    train, valid = [], []
    for i, (ntr, nva) in enumerate(spec.split_sizes()):
        train.append(draw(i, ntr))
        valid.append(draw(i, nva))
    meta = {
        "source": "synthetic",
        "seed": int(seed),
        "noise": spec.noise,
        "true_params": [(shared + t).tolist() for t in own],
    }
    return MultiDomainDataset("regression", spec.domain_names(), tuple(train), tuple(valid), meta)


def make_homogeneous(sizes: Sequence[int], direction: Sequence[float], target: float = 1.0,
                     valid_size: int = 1) -> MultiDomainDataset:
    """Dataset whose examples are all ``(direction, target)``.

    Every per-example least-squares gradient is then identical at any model
    point, which isolates the variance introduced by the loss weights.
    """
    x0 = np.asarray(direction, dtype=np.float64)
    names = tuple(f"d{i}" for i in range(1, len(sizes) + 1))

    def block(n):
        return Split(np.tile(x0, (int(n), 1)), np.full(int(n), float(target)))

    train = tuple(block(n) for n in sizes)
    valid = tuple(block(valid_size) for _ in sizes)
    return MultiDomainDataset("regression", names, train, valid, {"source": "homogeneous"})


# -- byte corpora -------------------------------------------------------------


def _windows(raw: bytes, c: int, path: Path) -> Split:
    if len(raw) < c + 1:
        raise InvalidInputError(f"{path} holds {len(raw)} bytes; need at least context+1 = {c + 1}")
    arr = np.frombuffer(raw, dtype=np.uint8)
    x = np.lib.stride_tricks.sliding_window_view(arr[:-1], c)
    return Split(np.ascontiguousarray(x), arr[c:].copy())


def load_corpus(root: str | Path, context: int) -> MultiDomainDataset:
    """Byte-level next-token windows from ``<domain>.train.txt`` / ``<domain>.valid.txt`` files."""
    root = Path(root)
    if context < 1:
        raise InvalidInputError("context length must be >= 1")
    if not root.is_dir():
        raise MissingDataError(f"corpus directory {root} does not exist")
    names = sorted(p.name[: -len(".train.txt")] for p in root.glob("*.train.txt"))
    if not names:
        raise MissingDataError(f"no <domain>.train.txt files under {root}")
    train, valid = [], []
    for name in names:
        splits = []
        for split in ("train", "valid"):
            path = root / f"{name}.{split}.txt"
            if not path.is_file():
                raise MissingDataError(f"missing split file {path}")
            splits.append(_windows(path.read_bytes(), context, path))
        train.append(splits[0])
        valid.append(splits[1])
    meta = {"source": "corpus", "root": str(root), "context": context}
    return MultiDomainDataset("bytes", tuple(names), tuple(train), tuple(valid), meta)


# -- sampling -------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    """Sampled slots: zero-based domain index, train-split row, attached loss weight."""

    domains: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.domains)

    def domain_counts(self, K: int) -> np.ndarray:
        return np.bincount(self.domains, minlength=K)


def draw_domains(probs: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(probs)
    d = np.searchsorted(cum, rng.random(n) * cum[-1], side="right")
    # guard the u == cum[-1] edge; never land on a zero-probability tail domain
    return np.minimum(d, np.flatnonzero(probs > 0)[-1])


def sample_batch(data: MultiDomainDataset, probs, weights, B: int, rng: np.random.Generator,
                 homogeneous: bool = False) -> Batch:
    probs = np.asarray(probs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if B < 1:
        raise InvalidInputError("batch size must be >= 1")
    if probs.shape != (data.K,) or weights.shape != (data.K,):
        raise InvalidInputError("probability and weight vectors must match the number of domains")
    if homogeneous:
        domains = np.repeat(draw_domains(probs, 1, rng), B)
    else:
        domains = draw_domains(probs, B, rng)
    indices = rng.integers(0, data.train_sizes[domains])
    return Batch(domains, indices, weights[domains])
