"""Small fully-connected networks with hand-written backprop and Adam.

Parameters of an :class:`Mlp` live in one flat float64 vector; per-layer
weight and bias arrays are views into it, so optimizers and target-network
blending operate on a single array.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("tanh", "identity")


class StaleCacheError(RuntimeError):
    pass


class Mlp:
    """x -> tanh(x W1 + b1) -> ... -> x Wn + bn (identity output)."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None,
                 activation: str = "tanh", params: np.ndarray | None = None):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        shapes = list(zip(self.sizes[:-1], self.sizes[1:]))
        n = sum(i * o + o for i, o in shapes)
        if params is None:
            rng = np.random.default_rng() if rng is None else rng
            params = np.empty(n)
            offset = 0
            for i, o in shapes:
                bound = 1.0 / np.sqrt(i)
                params[offset: offset + i * o + o] = rng.uniform(-bound, bound, size=i * o + o)
                offset += i * o + o
        else:
            params = np.array(params, dtype=np.float64)
            if params.shape != (n,):
                raise ValueError(f"expected {n} parameters, got {params.shape}")
        self.params = params
        self.weights, self.biases = [], []
        offset = 0
        for i, o in shapes:
            self.weights.append(self.params[offset: offset + i * o].reshape(i, o))
            offset += i * o
            self.biases.append(self.params[offset: offset + o])
            offset += o
        self._cache = None
        self._cache_key = None

    @property
    def num_params(self) -> int:
        return self.params.size

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def _key(self):
        # cheap fingerprint for detecting parameter writes after a forward pass
        return self.params[:4].tobytes() + self.params[-4:].tobytes()

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.in_dim:
            raise ValueError(f"input dimension {h.shape[1]} != {self.in_dim}")
        acts = [h]
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if k < last and self.activation == "tanh":
                h = np.tanh(h)
            acts.append(h)
        self._cache = (acts, single)
        self._cache_key = self._key()
        return h[0] if single else h

    def backward(self, upstream) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of sum(upstream * output) w.r.t. (flat params, input)."""
        if self._cache is None:
            raise StaleCacheError("backward called before forward")
        if self._cache_key != self._key():
            raise StaleCacheError("parameters changed since the cached forward pass")
        acts, single = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        g = g[None, :] if single else g
        if g.shape != acts[-1].shape:
            raise ValueError(f"upstream shape {g.shape} != output shape {acts[-1].shape}")
        grad = np.empty_like(self.params)
        gw, gb = self._views(grad)
        last = len(self.weights) - 1
        for k in range(last, -1, -1):
            if k < last and self.activation == "tanh":
                g = g * (1.0 - acts[k + 1] ** 2)
            gw[k][...] = acts[k].T @ g
            gb[k][...] = g.sum(axis=0)
            g = g @ self.weights[k].T
        return grad, (g[0] if single else g)

    def _views(self, flat: np.ndarray):
        ws, bs, offset = [], [], 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            ws.append(flat[offset: offset + i * o].reshape(i, o))
            offset += i * o
            bs.append(flat[offset: offset + o])
            offset += o
        return ws, bs

    def locate(self, index: int) -> str:
        offset = 0
        for k, (i, o) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if index < offset + i * o:
                r, c = divmod(index - offset, o)
                return f"layer {k} weight[{r}, {c}]"
            offset += i * o
            if index < offset + o:
                return f"layer {k} bias[{index - offset}]"
            offset += o
        raise IndexError(index)

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, activation=self.activation, params=self.params.copy())

    def set_params(self, params: np.ndarray) -> None:
        self.params[...] = params

    def to_json(self) -> dict:
        return {"sizes": list(self.sizes), "activation": self.activation, "params": self.params.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "Mlp":
        return cls(doc["sizes"], activation=doc.get("activation", "tanh"), params=np.array(doc["params"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "Mlp":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), lr=lr, **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, locate=None) -> np.ndarray:
    """One bias-corrected Adam descent step, applied to ``params`` in place."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, moments {state.m.shape}")
    bad = ~np.isfinite(grads)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        where = locate(i) if locate is not None else f"index {i}"
        raise FloatingPointError(f"non-finite gradient at {where}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * np.square(grads)
    # lr * m_hat / (sqrt(v_hat) + eps) with the bias corrections folded into scalars
    denom = np.sqrt(state.v)
    denom *= 1.0 / np.sqrt(1.0 - b2 ** state.step)
    denom += state.eps
    step = state.lr / (1.0 - b1 ** state.step)
    params -= step * state.m / denom
    return params


def soft_update(target: np.ndarray, source: np.ndarray, tau: float) -> np.ndarray:
    """target <- tau * source + (1 - tau) * target, in place."""
    if target.shape != source.shape:
        raise ValueError(f"shape mismatch: {target.shape} vs {source.shape}")
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    target *= 1.0 - tau
    target += tau * source
    return target


@dataclass
class Trainable:
    """An Mlp bundled with its Adam state."""

    net: Mlp
    opt: AdamState = field(default=None)

    def __post_init__(self):
        if self.opt is None:
            self.opt = AdamState.for_params(self.net.params)

    def descend(self, grads: np.ndarray) -> None:
        adam_step(self.net.params, grads, self.opt, locate=self.net.locate)
