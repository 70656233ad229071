"""Minimal parameter containers for building CNNs on top of :mod:`caduf.functional`."""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    """Base class: parameters are discovered from attributes in assignment order.

    Attributes whose name starts with an underscore are skipped, which keeps
    frozen sub-networks out of the optimiser.
    """

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict: bool = True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name in own:
                if own[name].shape != arr.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {own[name].shape}")
                own[name].data = np.array(arr, dtype=np.float64)


def _uniform(rng, bound, shape):
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv2d(Module):
    """Conv layer with fan-in scaled uniform init (bound ``1/sqrt(fan_in)``)."""

    def __init__(self, cin, cout, k, rng, stride=1, dilation=1, padding="zero", zero_init=False):
        fan_in = cin * k * k
        bound = 1.0 / math.sqrt(fan_in)
        if zero_init:
            self.weight = Tensor(np.zeros((cout, cin, k, k)), requires_grad=True)
            self.bias = Tensor(np.zeros(cout), requires_grad=True)
        else:
            self.weight = _uniform(rng, bound, (cout, cin, k, k))
            self.bias = _uniform(rng, bound, (cout,))
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        self.cin, self.cout, self.k = cin, cout, k

    def __call__(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


class Linear(Module):
    def __init__(self, nin, nout, rng, zero_init=False):
        bound = 1.0 / math.sqrt(nin)
        if zero_init:
            self.weight = Tensor(np.zeros((nin, nout)), requires_grad=True)
            self.bias = Tensor(np.zeros((1, nout)), requires_grad=True)
        else:
            self.weight = _uniform(rng, bound, (nin, nout))
            self.bias = _uniform(rng, bound, (1, nout))

    def __call__(self, x):
        return F.add(F.matmul(x, self.weight), self.bias)


def lrelu(x):
    return F.leaky_relu(x, 0.2)
