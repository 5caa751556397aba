"""Parameterised layers, a parameter registry and the Adam optimiser."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from pstp import autodiff as ad
from pstp.autodiff import Tensor
from pstp.errors import ConfigError, ShapeError


class Module:
    """Base class that registers parameters and child modules in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) in seen:
                raise ConfigError(f"parameter {name} registered more than once")
            seen.add(id(p))
            yield name, p

    def _walk(self, prefix):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child._walk(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise ConfigError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ConfigError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)


def glorot_uniform(rng: np.random.Generator, d_in: int, d_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored as ``[d_in, d_out]``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = Tensor(glorot_uniform(rng, d_in, d_out, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects width {self.d_in}, got input {x.shape}")
        return ad.matmul(x, self.weight) + self.bias


class MultiHeadAttention(Module):
    """Learned-projection attention with ``heads`` heads over a width-``dim`` space.

    :meth:`attend` exposes the per-head weights and projected values so
    callers can keep per-key contributions; :meth:`__call__` is the usual
    ``(output, head-averaged weights)`` pair.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigError(f"width {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim, dim, rng, dtype)
        self.k_proj = Linear(dim, dim, rng, dtype)
        self.v_proj = Linear(dim, dim, rng, dtype)
        self.o_proj = Linear(dim, dim, rng, dtype)

    def _split(self, x: Tensor) -> Tensor:
        # [..., n, D] -> [..., h, n, dh]
        lead = x.shape[:-2]
        n = x.shape[-2]
        x = x.reshape(lead + (n, self.heads, self.head_dim))
        return ad.swapaxes(x, -2, -3)

    def _merge(self, x: Tensor) -> Tensor:
        # [..., h, n, dh] -> [..., n, D]
        x = ad.swapaxes(x, -2, -3)
        return x.reshape(x.shape[:-2] + (self.dim,))

    def attend(self, q: Tensor, k: Tensor, v: Tensor, logit_shift: float = 0.0):
        """Return per-head ``(weights [..., h, n_q, n_k], values [..., h, n_k, dh])``."""
        if not (q.shape[-1] == k.shape[-1] == v.shape[-1] == self.dim):
            raise ShapeError(f"attention width {self.dim} vs {q.shape}, {k.shape}, {v.shape}")
        if k.shape[-2] != v.shape[-2]:
            raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        logits = ad.matmul(qh, ad.swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(self.head_dim))
        if logit_shift:
            logits = logits + logit_shift
        return ad.softmax(logits), vh

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, logit_shift: float = 0.0):
        weights, vh = self.attend(q, k, v, logit_shift)
        out = self.o_proj(self._merge(ad.matmul(weights, vh)))
        return out, ad.mean(weights, axis=-3)

    def key_contributions(self, weights: Tensor, vh: Tensor) -> Tensor:
        """Per-key rows ``concat_h(w_hj * v_hj)`` for a single query, before ``o_proj``.

        Summing the rows over keys gives the merged attention output.
        """
        if weights.shape[-2] != 1:
            raise ShapeError("key contributions are defined for a single query row")
        w = ad.swapaxes(weights, -1, -2)  # [..., h, n_k, 1]
        return self._merge(w * vh)


def identity_attention(dim: int, heads: int = 1, dtype=np.float64) -> MultiHeadAttention:
    """Attention block whose four projections are identity maps with zero bias."""
    mha = MultiHeadAttention(dim, heads, np.random.default_rng(0), dtype)
    for lin in (mha.q_proj, mha.k_proj, mha.v_proj, mha.o_proj):
        lin.weight.data = np.eye(dim, dtype=dtype)
        lin.bias.data = np.zeros(dim, dtype=dtype)
    return mha


# ------------------------------------------------------------------ Adam


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over lists of arrays.

    ``state`` is a dict with ``t`` (int), ``m`` and ``v`` (lists of arrays, or
    ``None`` before the first step).  Returns ``(new_params, new_state)``;
    nothing is modified in place.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    m_prev = state.get("m") or [np.zeros_like(p) for p in params]
    v_prev = state.get("v") or [np.zeros_like(p) for p in params]
    t = int(state.get("t", 0)) + 1
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeError(f"adam shapes differ: param {p.shape}, grad {g.shape}, state {m.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p.append((p - step).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    return new_p, {"t": t, "m": new_m, "v": new_v}


class Adam:
    def __init__(self, named_params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict = {"t": 0, "m": None, "v": None}

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        new, self.state = adam_step(
            [p.data for p in self.params], grads, self.state, self.lr,
            self.beta1, self.beta2, self.eps,
        )
        for p, value in zip(self.params, new):
            p.data = value

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([self.state["t"]], dtype=np.float64)}
        if self.state["m"] is not None:
            for name, m, v in zip(self.names, self.state["m"], self.state["v"]):
                out[f"adam.m.{name}"] = m
                out[f"adam.v.{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        t = int(arrays["adam.t"][0])
        if t == 0:
            self.state = {"t": 0, "m": None, "v": None}
            return
        dtypes = [p.dtype for p in self.params]
        self.state = {
            "t": t,
            "m": [arrays[f"adam.m.{n}"].astype(dt) for n, dt in zip(self.names, dtypes)],
            "v": [arrays[f"adam.v.{n}"].astype(dt) for n, dt in zip(self.names, dtypes)],
        }
