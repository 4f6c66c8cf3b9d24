"""Desk-scale models with hand-written gradients.

Both models keep their parameters in one flat float64 vector so optimizers
and gradient statistics can treat them uniformly.  ``loss_and_grad`` returns
*sums* over the examples of ``weight * loss`` and ``weight * grad``; callers
divide by the batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergedError, InvalidInputError

VOCAB = 256


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "shared_linear"
    embed: int = 16
    hidden: int = 64
    init_scale: float = 0.0

    def __post_init__(self):
        if self.kind not in ("shared_linear", "byte_lm"):
            raise InvalidInputError(f"unknown model kind {self.kind!r}")


class SharedLinear:
    """One parameter vector shared by all domains; squared-error loss ``(x . theta - y)**2``."""

    kind = "shared_linear"

    def __init__(self, dim: int, params: np.ndarray | None = None):
        self.dim = dim
        self.params = np.zeros(dim) if params is None else np.array(params, dtype=np.float64)
        if self.params.shape != (dim,):
            raise InvalidInputError(f"expected {dim} parameters, got shape {self.params.shape}")

    @property
    def n_params(self) -> int:
        return self.dim

    def copy(self) -> "SharedLinear":
        return SharedLinear(self.dim, self.params.copy())

    def _check(self, x):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise InvalidInputError(f"examples must have {self.dim} features")

    def losses(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        self._check(x)
        r = x @ self.params - y
        return r * r

    def per_example_grads(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        self._check(x)
        r = x @ self.params - y
        return (2.0 * r)[:, None] * x

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[float, np.ndarray]:
        self._check(x)
        r = x @ self.params - y
        return float(np.dot(w, r * r)), x.T @ (2.0 * w * r)


class ByteLM:
    """Next-byte model: embeddings -> concat over the context -> tanh hidden -> 256 logits."""

    kind = "byte_lm"

    def __init__(self, context: int, embed: int = 16, hidden: int = 64, params: np.ndarray | None = None):
        self.context, self.embed, self.hidden = context, embed, hidden
        self._shapes = [
            ("emb", (VOCAB, embed)),
            ("w1", (context * embed, hidden)),
            ("b1", (hidden,)),
            ("w2", (hidden, VOCAB)),
            ("b2", (VOCAB,)),
        ]
        n = sum(int(np.prod(s)) for _, s in self._shapes)
        self.params = np.zeros(n) if params is None else np.array(params, dtype=np.float64)
        if self.params.shape != (n,):
            raise InvalidInputError(f"expected {n} parameters, got shape {self.params.shape}")

    @property
    def n_params(self) -> int:
        return len(self.params)

    def copy(self) -> "ByteLM":
        return ByteLM(self.context, self.embed, self.hidden, self.params.copy())

    def unpack(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, off = {}, 0
        for name, shape in self._shapes:
            n = int(np.prod(shape))
            out[name] = flat[off:off + n].reshape(shape)
            off += n
        return out

    def init(self, rng: np.random.Generator, scale: float | None = None) -> None:
        p = self.unpack(self.params)
        p["emb"][:] = rng.standard_normal(p["emb"].shape) * (scale or 0.1)
        p["w1"][:] = rng.standard_normal(p["w1"].shape) * (scale or 1.0 / np.sqrt(self.context * self.embed))
        p["w2"][:] = rng.standard_normal(p["w2"].shape) * (scale or 1.0 / np.sqrt(self.hidden))
        p["b1"][:] = 0.0
        p["b2"][:] = 0.0

    def _check(self, x):
        if x.ndim != 2 or x.shape[1] != self.context:
            raise InvalidInputError(f"contexts must have length {self.context}")

    def _forward(self, x):
        p = self.unpack(self.params)
        e = p["emb"][x].reshape(len(x), -1)
        h = np.tanh(e @ p["w1"] + p["b1"])
        logits = h @ p["w2"] + p["b2"]
        logits = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(logits).sum(axis=1))
        logp = logits - logz[:, None]
        return p, e, h, logp

    def losses(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        self._check(x)
        _, _, _, logp = self._forward(x)
        return -logp[np.arange(len(y)), y.astype(np.intp)]

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[float, np.ndarray]:
        self._check(x)
        n = len(y)
        yi = y.astype(np.intp)
        p, e, h, logp = self._forward(x)
        loss = float(np.dot(w, -logp[np.arange(n), yi]))

        dlogits = np.exp(logp)
        dlogits[np.arange(n), yi] -= 1.0
        dlogits *= w[:, None]
        grad = np.zeros_like(self.params)
        g = self.unpack(grad)
        g["w2"][:] = h.T @ dlogits
        g["b2"][:] = dlogits.sum(axis=0)
        da = (dlogits @ p["w2"].T) * (1.0 - h * h)
        g["w1"][:] = e.T @ da
        g["b1"][:] = da.sum(axis=0)
        de = (da @ p["w1"].T).reshape(n, self.context, self.embed)
        np.add.at(g["emb"], x, de)
        return loss, grad

    def per_example_grads(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        one = np.ones(1)
        return np.stack([self.loss_and_grad(x[i:i + 1], y[i:i + 1], one)[1] for i in range(len(y))])


Model = SharedLinear | ByteLM


def build_model(spec: ModelSpec, width: int, rng: np.random.Generator | None = None) -> Model:
    if spec.kind == "shared_linear":
        m = SharedLinear(width)
        if spec.init_scale and rng is not None:
            m.params[:] = spec.init_scale * rng.standard_normal(width)
        return m
    m = ByteLM(width, spec.embed, spec.hidden)
    if rng is not None:
        m.init(rng, spec.init_scale or None)
    return m


def check_finite(model: Model) -> None:
    if not np.all(np.isfinite(model.params)):
        raise DivergedError("model parameters are not finite")


def example_loss_and_grad(model: Model, example, weight: float = 1.0) -> tuple[float, np.ndarray]:
    """``(weight * L(x), weight * grad L(x))`` for a single ``(x, y)`` example."""
    check_finite(model)
    x, y = example
    x = np.asarray(x)[None, :]
    y = np.asarray([y])
    return model.loss_and_grad(x, y, np.array([float(weight)]))
