"""Parameters, modules and the handful of layers the model is built from."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import BNState, Rng, Tensor

GROUPS = ("frozen", "adapter", "prompt", "lora", "mscad", "decoder")


class Parameter(Tensor):
    __slots__ = ("group",)

    def __init__(self, data, group: str, dtype=np.float32):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        super().__init__(np.asarray(data, dtype=dtype), requires_grad=group != "frozen")
        self.group = group


class Module:
    training = True

    def named_children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = ""):
        # shared submodules (a LoRA host is also its block's layer) are reported once
        seen = set()
        for name, p in self._walk_parameters(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk_parameters(self, prefix: str):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Parameter):
                        yield f"{prefix}{key}.{i}", v
        for name, child in self.named_children():
            yield from child._walk_parameters(prefix + name + ".")

    def named_bn_states(self, prefix: str = ""):
        for key, value in vars(self).items():
            if isinstance(value, BNState):
                yield prefix + key, value
        for name, child in self.named_children():
            yield from child.named_bn_states(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast every parameter and running statistic in place."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, st in self.named_bn_states():
            if st.running_mean is not None:
                st.running_mean = st.running_mean.astype(dtype)
                st.running_var = st.running_var.astype(dtype)
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data.copy()
        for name, st in self.named_bn_states():
            if st.running_mean is not None:
                out[name + ".running_mean"] = st.running_mean.copy()
                out[name + ".running_var"] = st.running_var.copy()
        return out

    def load_state_dict(self, state) -> None:
        params = dict(self.named_parameters())
        states = dict(self.named_bn_states())
        expected = set(params)
        for name in states:
            expected |= {name + ".running_mean", name + ".running_var"}
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], copy=True)
        for name, st in states.items():
            st.running_mean = np.array(state[name + ".running_mean"], copy=True)
            st.running_var = np.array(state[name + ".running_var"], copy=True)

    def param_counts(self) -> dict:
        counts = {g: 0 for g in GROUPS}
        for _, p in self.named_parameters():
            counts[p.group] += p.size
        return counts


def _init(rng: Rng, shape, fan_in: int, gain: float = 1.0, dtype=np.float32):
    return rng.normal(shape, scale=gain / math.sqrt(fan_in), dtype=dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng: Rng, group: str, stride=1, pad=0, bias=True, gain=1.0, zero=False):
        self.stride, self.pad = stride, pad
        shape = (cout, cin, k, k)
        w = np.zeros(shape, np.float32) if zero else _init(rng, shape, cin * k * k, gain)
        self.weight = Parameter(w, group)
        self.bias = Parameter(np.zeros(cout), group) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class DWConv2d(Module):
    def __init__(self, c, k, rng: Rng, group: str, stride=1, pad=None, bias=True, gain=1.0):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.weight = Parameter(_init(rng, (c, 1, k, k), k * k, gain), group)
        self.bias = Parameter(np.zeros(c), group) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.depthwise_conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm2d(Module):
    def __init__(self, c, group: str, momentum=0.1, eps=1e-5):
        self.gamma = Parameter(np.ones(c), group)
        self.beta = Parameter(np.zeros(c), group)
        self.state = BNState(c, momentum=momentum, eps=eps)

    def __call__(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.state, self.training)
