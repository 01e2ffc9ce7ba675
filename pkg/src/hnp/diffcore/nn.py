"""Layers built on :mod:`hnp.diffcore.tensor`: linear maps, layer norm,
multi-head self-attention, and the pre-norm transformer block."""
from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, gelu, matmul, softmax

LN_EPS = 1e-5


class ConfigError(ValueError):
    """Raised for inconsistent layer hyper-parameters."""


# -- functional forms -------------------------------------------------------

def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` over the last axis of ``x``; ``W`` is (d_out, d_in)."""
    if x.shape[-1] != W.shape[-1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    out = matmul(x, W.T)
    if b is not None:
        if b.shape != (W.shape[0],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
        out = out + b
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize each row over the last axis, then scale and shift.

    A constant row normalizes to zeros, so the output is the bias row.
    """
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_, b_ = gain.data, bias.data
    out = xhat * g_ + b_
    n = d.shape[-1]

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gx = g * g_
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        return dx, dgain, dbias

    return Tensor._make(out, (x, gain, bias), back)


def multi_head_self_attention(seq: Tensor, params: dict, heads: int, key_mask=None) -> Tensor:
    """Scaled dot-product self-attention over axis -2 of ``seq`` (shape [..., L, d]).

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo`` in linear() layout.
    ``key_mask`` ([..., L] bool) hides padded positions from every query.
    """
    d = seq.shape[-1]
    if d % heads:
        raise ConfigError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads
    lead = seq.shape[:-2]
    L = seq.shape[-2]

    def split(t):
        # [..., L, d] -> [..., H, L, dh]
        return t.reshape(lead + (L, heads, dh)).swapaxes(-2, -3)

    q = split(linear(seq, params["wq"], params["bq"]))
    k = split(linear(seq, params["wk"], params["bk"]))
    v = split(linear(seq, params["wv"], params["bv"]))
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, -1e9).astype(seq.dtype)
        scores = scores + bias[..., None, None, :]
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v).swapaxes(-2, -3).reshape(lead + (L, d))
    return linear(ctx, params["wo"], params["bo"])


# -- modules ----------------------------------------------------------------

class Module:
    """Container whose Tensor / Module / list attributes form a parameter tree."""

    def named_parameters(self, prefix: str = ""):
        for key, val in self.__dict__.items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        bound = np.sqrt(1.0 / d_in)
        self.weight = _param(rng.uniform(-bound, bound, size=(d_out, d_in)), dtype)
        self.bias = _param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64):
        self.gain = _param(np.ones(d), dtype)
        self.bias = _param(np.zeros(d), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Linear layers with GELUs in between; ``depth`` counts hidden layers."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng, dtype=np.float64, depth: int = 1):
        if depth < 1:
            raise ConfigError(f"MLP depth must be at least 1, got {depth}")
        self.fc1 = Linear(d_in, d_hidden, rng, dtype)
        self.hidden = [Linear(d_hidden, d_hidden, rng, dtype) for _ in range(depth - 1)]
        self.fc2 = Linear(d_hidden, d_out, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = gelu(self.fc1(x))
        for layer in self.hidden:
            h = gelu(layer(h))
        return self.fc2(h)


class MultiHeadSelfAttention(Module):
    def __init__(self, d: int, heads: int, rng, dtype=np.float64):
        if d % heads:
            raise ConfigError(f"model width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)

    def params(self) -> dict:
        return {
            "wq": self.q.weight, "bq": self.q.bias,
            "wk": self.k.weight, "bk": self.k.bias,
            "wv": self.v.weight, "bv": self.v.bias,
            "wo": self.o.weight, "bo": self.o.bias,
        }

    def __call__(self, seq: Tensor, key_mask=None) -> Tensor:
        return multi_head_self_attention(seq, self.params(), self.heads, key_mask)


class TransformerBlock(Module):
    """Pre-norm block: ``h = x + MSA(LN(x)); out = h + MLP(LN(h))``."""

    def __init__(self, d: int, heads: int, rng, dtype=np.float64, d_hidden: int | None = None):
        self.ln1 = LayerNorm(d, dtype)
        self.attn = MultiHeadSelfAttention(d, heads, rng, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.mlp = MLP(d, d_hidden or d, d, rng, dtype)

    def __call__(self, x: Tensor, key_mask=None) -> Tensor:
        h = x + self.attn(self.ln1(x), key_mask)
        return h + self.mlp(self.ln2(h))
