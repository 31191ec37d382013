"""Named parameter storage and the small MLP building blocks used everywhere."""

from __future__ import annotations

import hashlib
import zlib
from collections import OrderedDict

import numpy as np

from . import autodiff as ad


def substream(seed, purpose, *index):
    """Counter-style RNG substream keyed by (seed, purpose, index...)."""
    key = (zlib.crc32(purpose.encode()),) + tuple(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


class ParamStore:
    """Ordered mapping of parameter name to a leaf Tensor."""

    def __init__(self, items=None):
        self._p = OrderedDict()
        if items:
            for name, value in items:
                self.add(name, value)

    def add(self, name, value):
        if name in self._p:
            raise KeyError(f"duplicate parameter {name!r}")
        t = ad.Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._p[name] = t
        return t

    def __getitem__(self, name):
        return self._p[name]

    def __contains__(self, name):
        return name in self._p

    def __iter__(self):
        return iter(self._p)

    def __len__(self):
        return len(self._p)

    def names(self, prefix=""):
        return [n for n in self._p if n.startswith(prefix)]

    def items(self):
        return self._p.items()

    def tensors(self):
        return list(self._p.values())

    def zero_grad(self):
        for t in self._p.values():
            t.grad = None

    def arrays(self):
        return OrderedDict((n, t.data.copy()) for n, t in self._p.items())

    def set_array(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._p[name].shape:
            raise ad.ShapeError(f"{name}: shape mismatch {self._p[name].shape} vs {value.shape}")
        self._p[name].data = value.copy()

    def copy(self):
        return ParamStore((n, t.data) for n, t in self._p.items())

    def subset(self, prefixes):
        return ParamStore((n, t.data) for n, t in self._p.items()
                          if any(n.startswith(p) for p in prefixes))

    def update(self, other):
        for n, t in other.items():
            if n in self._p:
                self.set_array(n, t.data)
            else:
                self.add(n, t.data)

    def digest(self, prefixes=None):
        h = hashlib.sha256()
        for n, t in self._p.items():
            if prefixes is None or any(n.startswith(p) for p in prefixes):
                h.update(n.encode())
                h.update(t.data.astype("<f8").tobytes())
        return h.hexdigest()


def init_linear(store, name, n_in, n_out, rng, zero=False):
    scale = 0.0 if zero else 1.0 / np.sqrt(n_in)
    store.add(f"{name}.W", rng.standard_normal((n_in, n_out)) * scale)
    store.add(f"{name}.b", np.zeros(n_out))


def linear(store, name, x):
    W = store[f"{name}.W"]
    b = store[f"{name}.b"]
    return ad.add(ad.matmul(x, W), ad.expand(b, 0, x.shape[0]))


def init_mlp(store, name, sizes, rng, zero_last=False):
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        init_linear(store, f"{name}.l{i}", a, b, rng, zero=zero_last and last)


def mlp(store, name, x, depth):
    """GELU MLP over ``depth`` linear layers; no activation after the last."""
    for i in range(depth):
        x = linear(store, f"{name}.l{i}", x)
        if i < depth - 1:
            x = ad.gelu(x)
    return x
