"""
Attention 3D U-Net.

Encoder: stem conv, then per level a context module; levels are joined by
stride-2 3x3x3 convs and the width doubles per level.  Decoder: repeat
upsampling + 3x3x3 conv, concatenation with the same-level context output,
localization module.  1x1x1 segmentation heads on the three finest decoder
levels are upsampled by repetition, summed, and passed through a channel
softmax.  Squeeze-and-excitation blocks sit at one of three positions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List

import numpy as np

from .engine import functional as F
from .engine.layers import (
    Conv3d,
    ConvNormAct,
    Dropout,
    Module,
    SEBlock,
    Sequential,
)
from .errors import ConfigInvalid, ShapeMismatch

ATTENTION_POSITIONS = ("none", "downsample", "middle", "upsample")


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 4
    base_channels: int = 16
    p_drop: float = 0.3
    leaky_slope: float = 0.01
    se_ratio: int = 16
    attention_position: str = "middle"
    out_classes: int = 3
    input_dims: int = 128
    in_channels: int = 1

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def se_sites(self) -> Dict[str, int]:
        """SE block name -> channel count for the configured position.

        middle: after the deepest context module and after the first
        decoder concatenation.  downsample: after every shallower context
        module.  upsample: after every localization module.
        """
        L = self.levels
        if self.attention_position == "none":
            return {}
        if self.attention_position == "middle":
            return {f"enc{L}.se": self.width(L), f"dec{L - 1}.se": 2 * self.width(L - 1)}
        if self.attention_position == "downsample":
            return {f"enc{l}.se": self.width(l) for l in range(L)}
        if self.attention_position == "upsample":
            return {f"loc{l}.se": self.width(l) for l in range(L)}
        raise ConfigInvalid(f"unknown attention_position {self.attention_position!r}")

    def validate(self):
        if self.levels < 1:
            raise ConfigInvalid("levels must be >= 1")
        if self.base_channels < 1 or self.out_classes < 2 or self.in_channels < 1:
            raise ConfigInvalid("base_channels, in_channels must be >= 1 and out_classes >= 2")
        if not 0 <= self.p_drop < 1:
            raise ConfigInvalid("p_drop must be in [0, 1)")
        if self.input_dims < 1 or self.input_dims % (2 ** self.levels):
            raise ConfigInvalid(f"input side {self.input_dims} not divisible by 2^{self.levels}")
        if self.attention_position not in ATTENTION_POSITIONS:
            raise ConfigInvalid(f"attention_position must be one of {ATTENTION_POSITIONS}")
        for name, c in self.se_sites().items():
            if self.se_ratio < 1 or c % self.se_ratio:
                raise ConfigInvalid(f"SE ratio {self.se_ratio} does not divide {c} channels at {name}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


class ContextModule(Module):
    """conv -> dropout -> conv, each conv normed and activated, with the
    module input added back to the output."""

    def __init__(self, channels, p_drop, slope, *, seed, name, dtype=np.float32):
        super().__init__()
        self.add("conv1", ConvNormAct(channels, channels, 3, 1, slope, seed=seed, name=f"{name}.conv1", dtype=dtype))
        self.add("drop", Dropout(p_drop, seed=seed, name=f"{name}.drop"))
        self.add("conv2", ConvNormAct(channels, channels, 3, 1, slope, seed=seed, name=f"{name}.conv2", dtype=dtype))

    def forward(self, x):
        h = self.children["conv1"].forward(x)
        h = self.children["drop"].forward(h)
        h = self.children["conv2"].forward(h)
        return x + h

    def backward(self, dout):
        dh = self.children["conv2"].backward(dout)
        dh = self.children["drop"].backward(dh)
        dh = self.children["conv1"].backward(dh)
        return dout + dh


class LocalizationModule(Sequential):
    """3x3x3 conv halving the channels, then a 1x1x1 conv."""

    def __init__(self, in_c, out_c, slope, *, seed, name, dtype=np.float32):
        super().__init__(
            ("conv3", ConvNormAct(in_c, out_c, 3, 1, slope, seed=seed, name=f"{name}.conv3", dtype=dtype)),
            ("conv1", ConvNormAct(out_c, out_c, 1, 1, slope, seed=seed, name=f"{name}.conv1", dtype=dtype)),
        )


def deep_supervision_sum(seg_maps: List[np.ndarray]):
    """Repeat-upsample coarser maps to the finest resolution and add them.

    ``seg_maps`` is ordered coarse to fine with resolution doubling each
    step.  Returns (softmax probabilities, summed logits).
    """
    finest = seg_maps[-1].shape
    total = np.zeros(finest, dtype=seg_maps[-1].dtype)
    for m in seg_maps:
        if m.shape[:2] != finest[:2]:
            raise ShapeMismatch(f"segmentation map {m.shape} incompatible with {finest}")
        f = finest[2] // m.shape[2]
        if m.shape[2] * f != finest[2]:
            raise ShapeMismatch(f"segmentation map {m.shape} does not tile {finest}")
        up, _ = F.upsample_repeat_forward(m, f)
        if up.shape != finest:
            raise ShapeMismatch(f"segmentation map {m.shape} does not tile {finest}")
        total = total + up
    probs, _ = F.softmax_channels_forward(total)
    return probs, total


class AttentionUNet(Module):
    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.seed = seed
        c = config
        L = c.levels
        slope = c.leaky_slope
        kw = dict(seed=seed, dtype=dtype)
        se_sites = c.se_sites()

        self.add("stem", ConvNormAct(c.in_channels, c.width(0), 3, 1, slope, name="stem", **kw))
        for l in range(L + 1):
            if l > 0:
                self.add(f"down{l}", ConvNormAct(c.width(l - 1), c.width(l), 3, 2, slope, name=f"down{l}", **kw))
            self.add(f"enc{l}", ContextModule(c.width(l), c.p_drop, slope, name=f"enc{l}", **kw))
            if f"enc{l}.se" in se_sites:
                self.add(f"enc{l}.se", SEBlock(c.width(l), c.se_ratio, name=f"enc{l}.se", **kw))
        self.heads = list(range(min(3, L) - 1, -1, -1))  # coarse -> fine
        for l in range(L - 1, -1, -1):
            self.add(f"up{l}", ConvNormAct(c.width(l + 1), c.width(l), 3, 1, slope, name=f"up{l}", **kw))
            if f"dec{l}.se" in se_sites:
                self.add(f"dec{l}.se", SEBlock(2 * c.width(l), c.se_ratio, name=f"dec{l}.se", **kw))
            self.add(f"loc{l}", LocalizationModule(2 * c.width(l), c.width(l), slope, name=f"loc{l}", **kw))
            if f"loc{l}.se" in se_sites:
                self.add(f"loc{l}.se", SEBlock(c.width(l), c.se_ratio, name=f"loc{l}.se", **kw))
            if l in self.heads:
                self.add(f"seg{l}", Conv3d(c.width(l), c.out_classes, 1, 1, bias=True, name=f"seg{l}", **kw))
        self._cache = None

    @property
    def mode(self) -> str:
        return "train" if self.training else "inference"

    def reseed_dropout(self, seed: int):
        for m in _walk(self):
            if isinstance(m, Dropout):
                m.reseed(seed)

    def _maybe(self, name, x):
        m = self.children.get(name)
        return m.forward(x) if m is not None else x

    def _maybe_back(self, name, d):
        m = self.children.get(name)
        return m.backward(d) if m is not None else d

    def forward_logits(self, x):
        c = self.config
        if x.ndim != 5 or x.shape[1] != c.in_channels or x.shape[2:] != (c.input_dims,) * 3:
            raise ShapeMismatch(
                f"expected input (n, {c.in_channels}, {c.input_dims}, {c.input_dims}, {c.input_dims}), got {x.shape}"
            )
        L = c.levels
        h = self.children["stem"].forward(x)
        skips = {}
        for l in range(L + 1):
            if l > 0:
                h = self.children[f"down{l}"].forward(h)
            h = self.children[f"enc{l}"].forward(h)
            h = self._maybe(f"enc{l}.se", h)
            skips[l] = h
        seg = {}
        split = {}
        for l in range(L - 1, -1, -1):
            u, _ = F.upsample_repeat_forward(h, 2)
            u = self.children[f"up{l}"].forward(u)
            split[l] = u.shape[1]
            h = np.concatenate([u, skips[l]], axis=1)
            h = self._maybe(f"dec{l}.se", h)
            h = self.children[f"loc{l}"].forward(h)
            h = self._maybe(f"loc{l}.se", h)
            if l in self.heads:
                seg[l] = self.children[f"seg{l}"].forward(h)
        _, logits = deep_supervision_sum([seg[l] for l in self.heads])
        self._cache = split
        return logits

    def forward(self, x):
        """Per-voxel class probabilities, shape (n, out_classes, s, s, s)."""
        logits = self.forward_logits(x)
        probs, self._softmax_out = F.softmax_channels_forward(logits)
        return probs

    def backward(self, dprobs):
        dlogits = F.softmax_channels_backward(dprobs, self._softmax_out)
        return self.backward_logits(dlogits)

    def backward_logits(self, dlogits):
        c = self.config
        L = c.levels
        split = self._cache
        dseg = {}
        for l in self.heads:
            dseg[l] = F.upsample_repeat_backward(dlogits, 2 ** l) if l else dlogits
        dskips = {}
        dh = None
        for l in range(L):
            # decoder levels in reverse order of the forward pass
            d = dseg.get(l)
            dd = self.children[f"seg{l}"].backward(d) if d is not None else None
            if dh is None:
                dh = dd
            elif dd is not None:
                dh = dh + dd
            dh = self._maybe_back(f"loc{l}.se", dh)
            dh = self.children[f"loc{l}"].backward(dh)
            dh = self._maybe_back(f"dec{l}.se", dh)
            du, dskips[l] = dh[:, :split[l]], dh[:, split[l]:]
            du = self.children[f"up{l}"].backward(np.ascontiguousarray(du))
            dh = F.upsample_repeat_backward(du, 2)
        for l in range(L, -1, -1):
            if l < L:
                dh = dh + dskips[l]
            dh = self._maybe_back(f"enc{l}.se", dh)
            dh = self.children[f"enc{l}"].backward(dh)
            if l > 0:
                dh = self.children[f"down{l}"].backward(dh)
        return self.children["stem"].backward(dh)


def _walk(module):
    yield module
    for child in module.children.values():
        yield from _walk(child)


def build_network(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> AttentionUNet:
    return AttentionUNet(config, seed=seed, dtype=dtype)


def forward(model: AttentionUNet, x: np.ndarray) -> np.ndarray:
    return model.forward(x)


def count_parameters(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def parameter_dict(model: Module) -> Dict[str, np.ndarray]:
    return {name: p.value for name, p in model.named_parameters()}
