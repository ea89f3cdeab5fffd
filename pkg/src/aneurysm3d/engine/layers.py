"""
Layer objects with hand-written backward passes.

Every module caches what it needs during ``forward`` and consumes it in
``backward``; only one forward may be in flight per module instance.
Parameter gradients accumulate into ``Parameter.grad`` until ``zero_grad``.
"""

from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from ..errors import ConfigInvalid
from . import functional as F
from .init import derive_rng, glorot_uniform


class Parameter:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size


class Module:
    def __init__(self):
        self.params: Dict[str, Parameter] = {}
        self.children: Dict[str, Module] = {}
        self.training = True

    def add(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0

    def train(self, mode: bool = True):
        self.training = mode
        for child in self.children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class Conv3d(Module):
    def __init__(self, in_c, out_c, kernel=3, stride=1, bias=True, *, seed=0, name="conv", dtype=np.float32):
        super().__init__()
        if kernel % 2 != 1:
            raise ConfigInvalid(f"{name}: kernel size must be odd, got {kernel}")
        if stride not in (1, 2):
            raise ConfigInvalid(f"{name}: stride must be 1 or 2, got {stride}")
        shape = (out_c, in_c, kernel, kernel, kernel)
        self.stride = stride
        self.params["weight"] = Parameter(glorot_uniform(shape, derive_rng(seed, name), dtype))
        if bias:
            self.params["bias"] = Parameter(np.zeros(out_c, dtype=dtype))
        self._cache = None

    def forward(self, x):
        b = self.params["bias"].value if "bias" in self.params else None
        out, self._cache = F.conv3d_forward(x, self.params["weight"].value, b, self.stride)
        return out

    def backward(self, dout):
        dx, dw, db = F.conv3d_backward(dout, self._cache)
        self.params["weight"].grad += dw
        if "bias" in self.params:
            self.params["bias"].grad += db
        self._cache = None
        return dx


class InstanceNorm3d(Module):
    def __init__(self, channels, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.params["gamma"] = Parameter(np.ones(channels, dtype=dtype))
        self.params["beta"] = Parameter(np.zeros(channels, dtype=dtype))
        self._cache = None

    def forward(self, x):
        out, self._cache = F.instance_norm_forward(x, self.params["gamma"].value, self.params["beta"].value, self.eps)
        return out

    def backward(self, dout):
        dx, dg, db = F.instance_norm_backward(dout, self._cache)
        self.params["gamma"].grad += dg
        self.params["beta"].grad += db
        self._cache = None
        return dx


class LeakyReLU(Module):
    def __init__(self, slope=0.01):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        out, self._cache = F.leaky_relu_forward(x, self.slope)
        return out

    def backward(self, dout):
        return F.leaky_relu_backward(dout, self._cache)


class Dropout(Module):
    def __init__(self, p_drop=0.3, *, seed=0, name="dropout"):
        super().__init__()
        if not 0 <= p_drop < 1:
            raise ConfigInvalid(f"{name}: p_drop must be in [0, 1)")
        self.p_drop = p_drop
        self.name = name
        self.rng = derive_rng(seed, name)
        self._mask = None

    def reseed(self, seed):
        self.rng = derive_rng(seed, self.name)

    def forward(self, x):
        out, self._mask = F.dropout_forward(x, self.p_drop, self.rng, self.training)
        return out

    def backward(self, dout):
        return F.dropout_backward(dout, self._mask)


class Dense(Module):
    def __init__(self, in_c, out_c, *, seed=0, name="dense", dtype=np.float32):
        super().__init__()
        self.params["weight"] = Parameter(glorot_uniform((out_c, in_c), derive_rng(seed, name), dtype))
        self.params["bias"] = Parameter(np.zeros(out_c, dtype=dtype))

    def forward(self, x):
        out, self._cache = F.dense_forward(x, self.params["weight"].value, self.params["bias"].value)
        return out

    def backward(self, dout):
        dx, dw, db = F.dense_backward(dout, self._cache)
        self.params["weight"].grad += dw
        self.params["bias"].grad += db
        return dx


class UpsampleRepeat(Module):
    def __init__(self, factor=2):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        out, _ = F.upsample_repeat_forward(x, self.factor)
        return out

    def backward(self, dout):
        return F.upsample_repeat_backward(dout, self.factor)


class Sequential(Module):
    def __init__(self, *named):
        super().__init__()
        for name, m in named:
            self.add(name, m)

    def forward(self, x):
        for m in self.children.values():
            x = m.forward(x)
        return x

    def backward(self, dout):
        for m in reversed(list(self.children.values())):
            dout = m.backward(dout)
        return dout


class ConvNormAct(Sequential):
    """conv -> instance norm -> leaky ReLU.  The conv carries no bias: the
    norm removes any per-channel offset, so a bias would be inert."""

    def __init__(self, in_c, out_c, kernel=3, stride=1, slope=0.01, *, seed=0, name="block", dtype=np.float32):
        super().__init__(
            ("conv", Conv3d(in_c, out_c, kernel, stride, bias=False, seed=seed, name=f"{name}.conv", dtype=dtype)),
            ("norm", InstanceNorm3d(out_c, dtype=dtype)),
            ("act", LeakyReLU(slope)),
        )


class SEBlock(Module):
    """Squeeze-and-excitation: global max pool -> dense(C -> C/R) -> ReLU ->
    dense(C/R -> C) -> sigmoid -> channelwise rescale of the input."""

    def __init__(self, channels, ratio=16, *, seed=0, name="se", dtype=np.float32):
        super().__init__()
        if ratio < 1 or channels % ratio != 0:
            raise ConfigInvalid(f"{name}: ratio {ratio} does not divide {channels} channels")
        hidden = channels // ratio
        self.channels = channels
        self.ratio = ratio
        self.add("fc1", Dense(channels, hidden, seed=seed, name=f"{name}.fc1", dtype=dtype))
        self.add("fc2", Dense(hidden, channels, seed=seed, name=f"{name}.fc2", dtype=dtype))
        self._cache = None

    def forward(self, x):
        pooled, pool_cache = F.global_max_pool_forward(x)
        s = pooled.reshape(x.shape[0], x.shape[1])
        h = self.children["fc1"].forward(s)
        h, relu_mask = F.relu_forward(h)
        z = self.children["fc2"].forward(h)
        g, sig_cache = F.sigmoid_forward(z)
        self._cache = (x, g, pool_cache, relu_mask, sig_cache)
        return x * g[:, :, None, None, None]

    def backward(self, dout):
        x, g, pool_cache, relu_mask, sig_cache = self._cache
        dx = dout * g[:, :, None, None, None]
        dg = (dout * x).sum(axis=(2, 3, 4))
        dz = F.sigmoid_backward(dg, sig_cache)
        dh = self.children["fc2"].backward(dz)
        dh = F.relu_backward(dh, relu_mask)
        ds = self.children["fc1"].backward(dh)
        dx += F.global_max_pool_backward(ds.reshape(ds.shape + (1, 1, 1)), pool_cache)
        self._cache = None
        return dx
