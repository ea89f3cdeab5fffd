"""Seeded generators and weight initializers."""

import zlib

import numpy as np

# PCG64 is numpy's default bit generator; pinned here so streams never drift
BIT_GENERATOR = np.random.PCG64


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(BIT_GENERATOR(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream keyed by a layer name, so inserting or removing a
    layer never shifts the draws of the others."""
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    return np.random.Generator(BIT_GENERATOR(seq))


def fans(shape):
    """(fan_in, fan_out) as Keras computes them for dense and conv kernels."""
    if len(shape) == 2:
        c_out, c_in = shape
        return c_in, c_out
    if len(shape) == 5:
        c_out, c_in = shape[:2]
        receptive = int(np.prod(shape[2:]))
        return c_in * receptive, c_out * receptive
    raise ValueError(f"no fan rule for shape {shape}")


def glorot_limit(shape) -> float:
    fan_in, fan_out = fans(shape)
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_uniform(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    limit = glorot_limit(shape)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
