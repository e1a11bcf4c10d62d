"""Adam with per-parameter moments and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError


def lr_at(step, base_lr, warmup_steps, total_steps):
    """Linear warmup to ``base_lr`` over ``warmup_steps``, then cosine decay to 0 at ``total_steps``."""
    if total_steps <= warmup_steps:
        raise ConfigError(f"schedule needs total steps ({total_steps}) > warmup ({warmup_steps})")
    if step < 0:
        raise ConfigError("step must be non-negative")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Adam over a named parameter dict; reads gradients from ``Tensor.grad``."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        self.params = dict(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def grad_norm(self):
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return math.sqrt(total)

    def step(self, lr):
        norm = self.grad_norm()
        factor = 1.0
        if self.clip_norm and norm > self.clip_norm:
            factor = self.clip_norm / (norm + 1e-12)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            dt = p.data.dtype.type
            g = p.grad * dt(factor)
            m = self.m[name]
            v = self.v[name]
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * g * g
            p.data -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
        return norm

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_tensors(self):
        out = {f"optim.m.{n}": a for n, a in self.m.items()}
        out.update({f"optim.v.{n}": a for n, a in self.v.items()})
        out["optim.t"] = np.asarray(self.t, dtype=np.float32)
        return out

    def load_state_tensors(self, tensors):
        for n in self.params:
            self.m[n][...] = tensors[f"optim.m.{n}"]
            self.v[n][...] = tensors[f"optim.v.{n}"]
        self.t = int(tensors["optim.t"])
