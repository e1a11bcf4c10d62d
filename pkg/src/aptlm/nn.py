"""Layers built from autograd kernels: linear maps, norms, attention, blocks."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Parameter container; parameters are discovered by attribute walk."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
        return self


class Parameter(Tensor):
    __slots__ = ()


def new_param(values, name=None, dtype=None) -> Parameter:
    return Parameter(np.array(values, dtype=dtype or ag.default_dtype()), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, std=None):
        std = 1.0 / np.sqrt(n_in) if std is None else std
        self.weight = new_param(rng.normal(0.0, std, (n_in, n_out)))
        self.bias = new_param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim):
        self.gamma = new_param(np.ones(dim))
        self.beta = new_param(np.zeros(dim))

    def __call__(self, x):
        return ag.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, dim, hidden, rng):
        self.up = Linear(dim, hidden, rng)
        self.down = Linear(hidden, dim, rng, std=0.5 / np.sqrt(hidden))

    def __call__(self, x):
        return self.down(ag.gelu(self.up(x)))


class Attention(Module):
    """Multi-head attention; ``mask`` is boolean, True where a key is visible.

    ``mask`` may be (Lq, Lk), (B, Lq, Lk) or (B, 1, Lq, Lk).
    """

    def __init__(self, dim, heads, rng, kv_dim=None):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(kv_dim, dim, rng)
        self.v = Linear(kv_dim, dim, rng)
        self.o = Linear(dim, dim, rng, std=0.5 / np.sqrt(dim))

    def _split(self, x):
        b, n, d = x.shape
        return ag.transpose(ag.reshape(x, (b, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x, context=None, mask=None):
        context = x if context is None else context
        b, n, d = x.shape
        q = self._split(ag.scale(self.q(x), 1.0 / np.sqrt(d // self.heads)))
        k, v = self._split(self.k(context)), self._split(self.v(context))
        scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2)))
        if mask is not None and mask.ndim == 3:
            mask = mask[:, None]
        attn = ag.masked_softmax(scores, mask)
        out = ag.reshape(ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
        return self.o(out)


class Block(Module):
    """Pre-norm transformer block: self-attention then feed-forward."""

    def __init__(self, dim, heads, rng, ff_mult=4):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim, rng)

    def __call__(self, x, mask=None):
        x = ag.add(x, self.attn(self.ln1(x), mask=mask))
        return ag.add(x, self.ff(self.ln2(x)))


def sinusoidal_positions(n, dim, dtype=np.float32):
    pos = np.arange(n)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    out = np.zeros((n, dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out.astype(dtype)


def tensor_bytes(params) -> bytes:
    return b"".join(np.ascontiguousarray(p.data).tobytes() for p in params)
