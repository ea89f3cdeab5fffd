"""
Volume container and the generic image operators used by both pipeline
stages.

Voxel data are stored as numpy arrays of shape ``(nz, ny, nx)`` so that the
C-order flattening is x-fastest.  Everything user facing (``dims``,
``spacing``, transform fields, point coordinates) is expressed in
``(x, y, z)`` order; the helpers below do the reversal.

Binary masks are plain ``bool`` arrays with the same ``(nz, ny, nx)`` layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConstantVolume, GeometryMismatch

Triple = Tuple[float, float, float]


@dataclass(frozen=True)
class Volume:
    """3D scalar grid with physical spacing.

    Attributes:
        data: float32 array of shape (nz, ny, nx).
        spacing: (sx, sy, sz) in millimetres per voxel.
    """

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite voxels")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(frozen=True)
class GeometricTransform:
    """Maps target (model) space voxel coordinates back to original space.

    ``original = crop_offset + scale * target`` per axis, all in (x, y, z).
    """

    crop_offset: Triple
    scale: Triple
    original_dims: Tuple[int, int, int]
    target_dims: Tuple[int, int, int]

    @classmethod
    def identity(cls, dims) -> "GeometricTransform":
        dims = tuple(int(d) for d in dims)
        return cls((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), dims, dims)

    def to_original(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.asarray(self.crop_offset) + np.asarray(self.scale) * p

    def to_target(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - np.asarray(self.crop_offset)) / np.asarray(self.scale)

    def then(self, inner: "GeometricTransform") -> "GeometricTransform":
        """Compose with a transform applied after this one (``inner`` maps a
        grid sampled from this transform's target space)."""
        if tuple(inner.original_dims) != tuple(self.target_dims):
            raise GeometryMismatch(
                f"cannot compose: inner transform expects {inner.original_dims}, "
                f"outer produces {self.target_dims}"
            )
        offset = tuple(o + s * io for o, s, io in zip(self.crop_offset, self.scale, inner.crop_offset))
        scale = tuple(s * i for s, i in zip(self.scale, inner.scale))
        return GeometricTransform(offset, scale, self.original_dims, inner.target_dims)

    @property
    def is_identity(self) -> bool:
        return (
            tuple(self.original_dims) == tuple(self.target_dims)
            and all(o == 0 for o in self.crop_offset)
            and all(s == 1 for s in self.scale)
        )


@dataclass
class ConnectedComponent:
    """A connected voxel set.  ``voxel_indices`` is an (N, 3) array of
    (x, y, z) indices; ``centroid`` is (x, y, z)."""

    voxel_indices: np.ndarray
    centroid: Tuple[float, float, float]
    z_extent: int
    max_planar_radius: float

    @property
    def size(self) -> int:
        return len(self.voxel_indices)

    def as_mask(self, dims) -> np.ndarray:
        nx, ny, nz = dims
        mask = np.zeros((nz, ny, nx), dtype=bool)
        idx = self.voxel_indices
        mask[idx[:, 2], idx[:, 1], idx[:, 0]] = True
        return mask


def normalize_intensity(vol: Volume, target_max: float = 1024.0) -> Volume:
    """Affine map of the intensity range onto [0, target_max]."""
    if target_max <= 0:
        raise ValueError("target_max must be positive")
    data = vol.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if lo == hi:
        raise ConstantVolume(f"volume is constant ({lo})")
    out = (data - lo) * (target_max / (hi - lo))
    out = out.astype(np.float32)
    # pin the endpoints: float rounding must not move them
    out[data == lo] = 0.0
    out[data == hi] = np.float32(target_max)
    return vol.with_data(out)


def _linear_sample_axis(data: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    n = data.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    i0 = np.floor(coords).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    w = (coords - i0).astype(np.float64)
    shape = [1] * data.ndim
    shape[axis] = len(coords)
    w = w.reshape(shape)
    a = np.take(data, i0, axis=axis).astype(np.float64)
    b = np.take(data, i1, axis=axis).astype(np.float64)
    return a * (1.0 - w) + b * w


def _nearest_index(coords: np.ndarray, n: int) -> np.ndarray:
    return np.clip(np.floor(coords + 0.5), 0, n - 1).astype(np.intp)


def _sample_grid(data: np.ndarray, transform: GeometricTransform, interpolation: str) -> np.ndarray:
    """Sample ``data`` (original space) on the target grid of ``transform``."""
    tx, ty, tz = transform.target_dims
    coords_xyz = [
        transform.crop_offset[a] + transform.scale[a] * np.arange(t, dtype=np.float64)
        for a, t in enumerate((tx, ty, tz))
    ]
    # array axis for x is 2, y is 1, z is 0
    if interpolation == "nearest":
        iz = _nearest_index(coords_xyz[2], data.shape[0])
        iy = _nearest_index(coords_xyz[1], data.shape[1])
        ix = _nearest_index(coords_xyz[0], data.shape[2])
        return data[np.ix_(iz, iy, ix)]
    if interpolation == "trilinear":
        out = data.astype(np.float64)
        out = _linear_sample_axis(out, 0, coords_xyz[2])
        out = _linear_sample_axis(out, 1, coords_xyz[1])
        out = _linear_sample_axis(out, 2, coords_xyz[0])
        return out
    raise ValueError(f"unknown interpolation {interpolation!r}")


def resample_isotropic(vol: Volume, interpolation: str = "trilinear") -> Tuple[Volume, GeometricTransform]:
    """Resample to the finest spacing along every axis.

    The first voxel centre stays fixed; target voxel ``o`` samples original
    coordinate ``o * m / s`` on each axis.
    """
    m = min(vol.spacing)
    dims = vol.dims
    new_dims = tuple(max(1, int(round(n * s / m))) for n, s in zip(dims, vol.spacing))
    scale = tuple(m / s for s in vol.spacing)
    transform = GeometricTransform((0.0, 0.0, 0.0), scale, dims, new_dims)
    if transform.is_identity:
        return vol, transform
    out = _sample_grid(vol.data, transform, interpolation)
    return Volume(out.astype(np.float32), (m, m, m)), transform


def resize_to(
    vol: Volume,
    target_dims: Sequence[int],
    interpolation: str = "trilinear",
    prior: GeometricTransform | None = None,
) -> Tuple[Volume, GeometricTransform]:
    """Resample ``vol`` onto a grid of ``target_dims`` (x, y, z).

    ``prior`` is the transform that produced ``vol`` (e.g. a crop); the
    returned transform then maps all the way back to the original image.
    """
    target_dims = tuple(int(t) for t in target_dims)
    if len(target_dims) != 3 or min(target_dims) < 1:
        raise ValueError(f"target dims must be three positive ints, got {target_dims}")
    dims = vol.dims
    scale = tuple(n / t for n, t in zip(dims, target_dims))
    transform = GeometricTransform((0.0, 0.0, 0.0), scale, dims, target_dims)
    if transform.is_identity:
        out = vol
    else:
        sampled = _sample_grid(vol.data, transform, interpolation)
        spacing = tuple(s * k for s, k in zip(vol.spacing, scale))
        out = Volume(sampled.astype(np.float32), spacing)
    if prior is not None:
        transform = prior.then(transform)
    return out, transform


def resize_mask(mask: np.ndarray, target_dims: Sequence[int]) -> Tuple[np.ndarray, GeometricTransform]:
    """Nearest-neighbour counterpart of :func:`resize_to` for masks."""
    nz, ny, nx = mask.shape
    target_dims = tuple(int(t) for t in target_dims)
    scale = tuple(n / t for n, t in zip((nx, ny, nz), target_dims))
    transform = GeometricTransform((0.0, 0.0, 0.0), scale, (nx, ny, nz), target_dims)
    if transform.is_identity:
        return mask.copy(), transform
    return _sample_grid(mask, transform, "nearest"), transform


def crop(vol: Volume, lo: Sequence[int], hi: Sequence[int]) -> Tuple[Volume, GeometricTransform]:
    """Crop to the half-open box [lo, hi) given in (x, y, z)."""
    lo = tuple(int(v) for v in lo)
    hi = tuple(int(v) for v in hi)
    for a, (l, h, n) in enumerate(zip(lo, hi, vol.dims)):
        if not 0 <= l < h <= n:
            raise GeometryMismatch(f"crop box axis {a}: [{l}, {h}) outside [0, {n})")
    data = vol.data[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]]
    transform = GeometricTransform(
        tuple(float(v) for v in lo), (1.0, 1.0, 1.0), vol.dims, tuple(h - l for l, h in zip(lo, hi))
    )
    return Volume(data.copy(), vol.spacing), transform


def mask_bounding_box(mask: np.ndarray, margin: int = 0):
    """Half-open (lo, hi) box in (x, y, z) around the set voxels, or None."""
    zz, yy, xx = np.nonzero(mask)
    if len(zz) == 0:
        return None
    nz, ny, nx = mask.shape
    lo = (max(0, xx.min() - margin), max(0, yy.min() - margin), max(0, zz.min() - margin))
    hi = (min(nx, xx.max() + 1 + margin), min(ny, yy.max() + 1 + margin), min(nz, zz.max() + 1 + margin))
    return tuple(int(v) for v in lo), tuple(int(v) for v in hi)


def flip_transverse(vol):
    """Mirror slice order along z.  Accepts a Volume or a raw (z, y, x) array."""
    if isinstance(vol, Volume):
        return vol.with_data(vol.data[::-1].copy())
    return np.ascontiguousarray(np.asarray(vol)[::-1])


def histogram_equalize(vol: Volume, bins: int = 256) -> Volume:
    """Global CDF-mapping equalization; output spans the input range.

    Each voxel is replaced by ``lo + (cdf(b) - cdf_min) / (N - cdf_min) * (hi - lo)``
    where ``b`` is its histogram bin.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    data = vol.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if lo == hi:
        raise ConstantVolume(f"volume is constant ({lo})")
    idx = np.floor((data - lo) / (hi - lo) * bins).astype(np.intp)
    np.clip(idx, 0, bins - 1, out=idx)
    counts = np.bincount(idx.ravel(), minlength=bins)
    cdf = np.cumsum(counts)
    cdf_min = cdf[counts > 0][0]
    total = cdf[-1]
    lut = (cdf - cdf_min) / (total - cdf_min) * (hi - lo) + lo
    out = lut[idx]
    return vol.with_data(out.astype(np.float32))


def gaussian_kernel(variance: float, width: int) -> np.ndarray:
    """Sampled, renormalized Gaussian with ``width`` taps (forced odd)."""
    if variance <= 0:
        raise ValueError("variance must be positive")
    width = int(width)
    if width % 2 == 0:
        width += 1
    if width < 3:
        raise ValueError("kernel width must be >= 3")
    half = width // 2
    k = np.arange(-half, half + 1, dtype=np.float64)
    taps = np.exp(-(k ** 2) / (2.0 * variance))
    return taps / taps.sum()


def gaussian_smooth_discrete(vol: Volume, variance: float = 4.0, max_kernel_width: int = 32) -> Volume:
    """Separable Gaussian smoothing with clamp-to-edge borders."""
    kernel = gaussian_kernel(variance, max_kernel_width)
    out = vol.data.astype(np.float64)
    for axis in range(3):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="nearest")
    return vol.with_data(out.astype(np.float32))


def ball_offsets(radius: float) -> np.ndarray:
    """Integer (dz, dy, dx) offsets with Euclidean norm <= radius."""
    r = int(np.floor(radius))
    rng = np.arange(-r, r + 1)
    dz, dy, dx = np.meshgrid(rng, rng, rng, indexing="ij")
    keep = dz ** 2 + dy ** 2 + dx ** 2 <= radius ** 2 + 1e-9
    return np.stack([dz[keep], dy[keep], dx[keep]], axis=1)


def ball_structure(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    rng = np.arange(-r, r + 1)
    dz, dy, dx = np.meshgrid(rng, rng, rng, indexing="ij")
    return dz ** 2 + dy ** 2 + dx ** 2 <= radius ** 2 + 1e-9


def spherical_dilate(mask: np.ndarray, radius: float) -> np.ndarray:
    """Dilate by a Euclidean ball of the given voxel radius."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if radius < 1 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=ball_structure(radius))


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


def label_components(mask: np.ndarray, connectivity: int = 26) -> Tuple[np.ndarray, int]:
    """Label image with components numbered by (min z, min y, min x) order."""
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 6 or 26")
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_STRUCTURES[connectivity])
    if n > 1:
        flat = labels.ravel()
        nz_idx = np.flatnonzero(flat)
        first = np.full(n + 1, flat.size, dtype=np.int64)
        np.minimum.at(first, flat[nz_idx], nz_idx)
        rank = np.empty(n + 1, dtype=labels.dtype)
        rank[0] = 0
        rank[1:][np.argsort(first[1:], kind="stable")] = np.arange(1, n + 1, dtype=labels.dtype)
        labels = rank[labels]
    return labels, n


def connected_components(mask: np.ndarray, connectivity: int = 26) -> List[ConnectedComponent]:
    """Maximal connected voxel sets, ordered by their first voxel in z, y, x scan."""
    labels, n = label_components(mask, connectivity)
    if n == 0:
        return []
    zz, yy, xx = np.nonzero(labels)
    lab = labels[zz, yy, xx]
    order = np.argsort(lab, kind="stable")
    zz, yy, xx, lab = zz[order], yy[order], xx[order], lab[order]
    splits = np.flatnonzero(np.diff(lab)) + 1
    comps = []
    for z, y, x in zip(np.split(zz, splits), np.split(yy, splits), np.split(xx, splits)):
        idx = np.stack([x, y, z], axis=1)
        centroid = idx.mean(axis=0)
        planar = np.sqrt((x - centroid[0]) ** 2 + (y - centroid[1]) ** 2)
        comps.append(
            ConnectedComponent(
                voxel_indices=idx,
                centroid=tuple(float(c) for c in centroid),
                z_extent=int(z.max() - z.min() + 1),
                max_planar_radius=float(planar.max()),
            )
        )
    return comps


def remap_mask(mask: np.ndarray, transform: GeometricTransform) -> np.ndarray:
    """Bring a target-space mask back to the original grid.

    Every original voxel pulls its nearest target voxel; in addition each set
    target voxel is pushed to its nearest original voxel so that upsampling
    transforms never drop a set voxel.
    """
    mask = np.asarray(mask, dtype=bool)
    nz, ny, nx = mask.shape
    if (nx, ny, nz) != tuple(transform.target_dims):
        raise GeometryMismatch(
            f"mask dims {(nx, ny, nz)} differ from transform target dims {tuple(transform.target_dims)}"
        )
    if transform.is_identity:
        return mask.copy()
    ox, oy, oz = transform.original_dims
    idx = []
    valid = []
    for a, (n_orig, n_tgt) in enumerate(zip((ox, oy, oz), (nx, ny, nz))):
        s = np.arange(n_orig, dtype=np.float64)
        t = np.floor((s - transform.crop_offset[a]) / transform.scale[a] + 0.5)
        ok = (t >= 0) & (t < n_tgt)
        idx.append(np.clip(t, 0, n_tgt - 1).astype(np.intp))
        valid.append(ok)
    out = mask[np.ix_(idx[2], idx[1], idx[0])]
    out &= valid[2][:, None, None] & valid[1][None, :, None] & valid[0][None, None, :]
    zz, yy, xx = np.nonzero(mask)
    if len(zz):
        pts = transform.to_original(np.stack([xx, yy, zz], axis=1))
        p = np.floor(pts + 0.5).astype(np.intp)
        # edge voxels of an upsampled grid can round one past the border
        p = np.clip(p, 0, np.array([ox, oy, oz]) - 1)
        out[p[:, 2], p[:, 1], p[:, 0]] = True
    return out
