"""Module containers, layers and initializers built on :mod:`relbridge.tensor`."""
import zlib

import numpy as np

from . import tensor as T
from .tensor import Parameter


def component_rng(seed, name):
    """Independent generator for one named component of a seeded run.

    Components draw from separate streams, so adding or removing one part of a
    model leaves every other part's initialization unchanged.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def glorot_uniform(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Module:
    training = True

    def named_parameters(self, prefix=""):
        seen = set()
        for name, value in vars(self).items():
            for pname, p in _walk(value, f"{prefix}{name}"):
                if id(p) not in seen:
                    seen.add(id(p))
                    yield pname, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, mode=True):
        for value in vars(self).values():
            for m in _modules(value):
                m.train(mode)
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise KeyError(f"state does not match parameters: {missing}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, path):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=f"{path}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{path}.{key}")


def _modules(value):
    if isinstance(value, Module):
        yield value
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _modules(item)
    elif isinstance(value, dict):
        for item in value.values():
            yield from _modules(item)


class Linear(Module):
    """``x @ weight + bias`` with Glorot-uniform weights and zero bias."""

    def __init__(self, in_dim, out_dim, rng, bias=True, init_scale=1.0):
        self.weight = Parameter(init_scale * glorot_uniform(rng, in_dim, out_dim), "weight")
        self.bias = Parameter(np.zeros(out_dim), "bias") if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Parameter(np.ones(dim), "gamma")
        self.beta = Parameter(np.zeros(dim), "beta")
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)
