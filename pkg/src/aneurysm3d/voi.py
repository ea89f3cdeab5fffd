"""
Training-free cerebral artery volume-of-interest extraction.

Pipeline: normalize to [0, 1024] -> threshold -> radial step detection on the
middle slices -> seed template -> Gaussian statistics of the seed
intensities -> windowed region growing -> spherical dilation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import DegenerateSlice, EmptySeeds
from .volume import Volume, normalize_intensity, spherical_dilate

_SIX = ndimage.generate_binary_structure(3, 1)
_TWENTY_SIX = ndimage.generate_binary_structure(3, 3)


@dataclass(frozen=True)
class GaussianStats:
    mu: float
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)) or self.sigma < 0:
            raise ValueError(f"invalid Gaussian stats mu={self.mu} sigma={self.sigma}")

    def density(self, x):
        """Normal probability density with this mean and standard deviation."""
        x = np.asarray(x, dtype=np.float64)
        return np.exp(-((x - self.mu) ** 2) / (2 * self.sigma ** 2)) / (math.sqrt(2 * math.pi) * self.sigma)


@dataclass(frozen=True)
class IntensityWindow:
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"window lo {self.lo} > hi {self.hi}")

    def contains(self, values):
        return (values >= self.lo) & (values <= self.hi)


@dataclass
class SeedTemplate:
    """``boundary_points`` maps slice index z to a (2 * n_lines, 2) array of
    (x, y) polygon vertices ordered by angle."""

    boundary_points: Dict[int, np.ndarray]
    region: np.ndarray
    seeds: np.ndarray


@dataclass
class VoiResult:
    vessel_mask: np.ndarray
    masked_volume: Volume
    stats: GaussianStats
    window: IntensityWindow


@dataclass(frozen=True)
class VoiParams:
    target_max: float = 1024.0
    threshold: float = 300.0
    slice_fraction: float = 0.6
    n_lines: int = 12
    min_radius_fraction: float = 0.25
    z_factor: float = 1.28
    dilation_radius: float = 2.0


def threshold_binarize(vol: Volume, threshold: float = 300.0) -> np.ndarray:
    return vol.data >= threshold


def middle_slice_range(nz: int, fraction: float = 0.6) -> Tuple[int, int]:
    """Inclusive (z_lo, z_hi) of the centred block of round(fraction * nz) slices."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if nz < 1:
        raise ValueError("nz must be >= 1")
    count = max(1, int(math.floor(fraction * nz + 0.5)))
    lo = (nz - count) // 2
    return lo, lo + count - 1


def _ray_angles(n_lines: int) -> np.ndarray:
    """Angles of the 2 * n_lines rays; ray k and ray k + n_lines form line k."""
    return np.arange(2 * n_lines) * (math.pi / n_lines)


def _slice_center(shape) -> Tuple[float, float]:
    ny, nx = shape
    return (nx - 1) / 2.0, (ny - 1) / 2.0


def edge_distance(shape, angle: float) -> float:
    """Distance from the slice centre to the image border along ``angle``."""
    ny, nx = shape
    dx, dy = math.cos(angle), math.sin(angle)
    dists = []
    if abs(dx) > 1e-12:
        dists.append((nx / 2.0) / abs(dx))
    if abs(dy) > 1e-12:
        dists.append((ny / 2.0) / abs(dy))
    return min(dists)


def ray_steps(plane: np.ndarray, angle: float) -> List[Tuple[float, float, float]]:
    """Step points along one ray from the slice centre.

    The ray is sampled at unit spacing with nearest-neighbour lookup.  A step
    is a change of value between consecutive samples; it is reported at the
    sample that is set.  Returns (distance, x, y) tuples in order of distance.
    """
    ny, nx = plane.shape
    cx, cy = _slice_center(plane.shape)
    dx, dy = math.cos(angle), math.sin(angle)
    t_max = int(math.floor(edge_distance(plane.shape, angle))) + 1
    t = np.arange(t_max + 1, dtype=np.float64)
    xs = cx + t * dx
    ys = cy + t * dy
    ix = np.floor(xs + 0.5).astype(np.intp)
    iy = np.floor(ys + 0.5).astype(np.intp)
    inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    # samples leave the grid monotonically, so the in-bounds part is a prefix
    n_in = int(np.argmin(inside)) if not inside.all() else len(t)
    values = plane[iy[:n_in], ix[:n_in]].astype(np.int8)
    changes = np.flatnonzero(np.diff(values))
    out = []
    for i in changes:
        j = i if values[i] else i + 1
        out.append((float(t[j]), float(xs[j]), float(ys[j])))
    return out


def radial_step_points(plane: np.ndarray, n_lines: int = 12) -> List[Optional[Tuple[Tuple[float, float], Tuple[float, float]]]]:
    """Per line through the centre, the two step points farthest from it.

    One point is taken from each half-line when both have steps; otherwise the
    two farthest overall.  ``None`` marks a line with fewer than two steps.
    """
    if n_lines < 1:
        raise ValueError("n_lines must be >= 1")
    plane = np.asarray(plane, dtype=bool)
    angles = _ray_angles(n_lines)
    result = []
    for k in range(n_lines):
        pos = ray_steps(plane, angles[k])
        neg = ray_steps(plane, angles[k + n_lines])
        if len(pos) + len(neg) < 2:
            result.append(None)
        elif pos and neg:
            result.append(((pos[-1][1], pos[-1][2]), (neg[-1][1], neg[-1][2])))
        else:
            steps = pos or neg
            result.append(((steps[-1][1], steps[-1][2]), (steps[-2][1], steps[-2][2])))
    return result


def fill_polygon(shape, vertices: np.ndarray) -> np.ndarray:
    """Even-odd scan fill of a closed polygon on pixel centres, plus its
    rasterized outline so that vertices lying on set voxels are kept."""
    ny, nx = shape
    yy, xx = np.mgrid[0:ny, 0:nx].astype(np.float64)
    inside = np.zeros(shape, dtype=bool)
    v = np.asarray(vertices, dtype=np.float64)
    nxt = np.roll(v, -1, axis=0)
    for (x1, y1), (x2, y2) in zip(v, nxt):
        if y1 == y2:
            continue
        crosses = (y1 > yy) != (y2 > yy)
        x_at = x1 + (yy - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xx < x_at)
    for (x1, y1), (x2, y2) in zip(v, nxt):
        n = int(math.ceil(2 * max(abs(x2 - x1), abs(y2 - y1)))) + 1
        s = np.linspace(0.0, 1.0, n)
        px = np.floor(x1 + s * (x2 - x1) + 0.5).astype(np.intp)
        py = np.floor(y1 + s * (y2 - y1) + 0.5).astype(np.intp)
        ok = (px >= 0) & (px < nx) & (py >= 0) & (py < ny)
        inside[py[ok], px[ok]] = True
    return inside


def slice_boundary(plane: np.ndarray, n_lines: int = 12, min_radius_fraction: float = 0.25) -> np.ndarray:
    """Polygon vertices for one slice: farthest step on each ray, pushed out
    to ``min_radius_fraction`` of the centre-to-edge distance when closer."""
    cx, cy = _slice_center(plane.shape)
    verts = []
    for angle in _ray_angles(n_lines):
        floor_dist = min_radius_fraction * edge_distance(plane.shape, angle)
        steps = ray_steps(plane, angle)
        if steps and steps[-1][0] >= floor_dist:
            verts.append((steps[-1][1], steps[-1][2]))
        else:
            verts.append((cx + floor_dist * math.cos(angle), cy + floor_dist * math.sin(angle)))
    verts = np.array(verts)
    if len(verts) < 3:
        raise DegenerateSlice(f"only {len(verts)} boundary points")
    return verts


def build_seed_template(
    binary: np.ndarray,
    z_range: Tuple[int, int],
    n_lines: int = 12,
    min_radius_fraction: float = 0.25,
) -> SeedTemplate:
    if not 0 < min_radius_fraction < 1:
        raise ValueError("min_radius_fraction must be in (0, 1)")
    binary = np.asarray(binary, dtype=bool)
    z_lo, z_hi = z_range
    region = np.zeros(binary.shape, dtype=bool)
    points = {}
    for z in range(z_lo, z_hi + 1):
        verts = slice_boundary(binary[z], n_lines, min_radius_fraction)
        points[z] = verts
        region[z] = fill_polygon(binary[z].shape, verts)
    return SeedTemplate(boundary_points=points, region=region, seeds=region & binary)


def seed_statistics(vol: Volume, seeds: np.ndarray) -> GaussianStats:
    """Mean and population standard deviation of the seed intensities."""
    values = vol.data[np.asarray(seeds, dtype=bool)].astype(np.float64)
    if values.size == 0:
        raise EmptySeeds("seed template contains no voxels above threshold")
    mu = float(values.mean())
    sigma = float(np.sqrt(np.mean((values - mu) ** 2)))
    return GaussianStats(mu, sigma)


def gaussian_window(stats: GaussianStats, z_factor: float = 1.28) -> IntensityWindow:
    if z_factor <= 0:
        raise ValueError("z_factor must be positive")
    return IntensityWindow(stats.mu - z_factor * stats.sigma, stats.mu + z_factor * stats.sigma)


def window_mass(z_factor: float = 1.28, intervals: int = 2000) -> float:
    """Probability mass of a standard normal within +-z_factor, by composite
    Simpson integration of the density."""
    n = intervals + intervals % 2
    x = np.linspace(-z_factor, z_factor, n + 1)
    f = GaussianStats(0.0, 1.0).density(x)
    h = 2 * z_factor / n
    return float(h / 3 * (f[0] + f[-1] + 4 * f[1:-1:2].sum() + 2 * f[2:-1:2].sum()))


def region_grow(vol: Volume, seeds: np.ndarray, window: IntensityWindow, connectivity: int = 6) -> np.ndarray:
    """Voxels reachable from an in-window seed through in-window voxels."""
    structure = _SIX if connectivity == 6 else _TWENTY_SIX
    allowed = window.contains(vol.data)
    start = allowed & np.asarray(seeds, dtype=bool)
    if not start.any():
        return np.zeros(allowed.shape, dtype=bool)
    labels, _ = ndimage.label(allowed, structure=structure)
    hit = np.unique(labels[start])
    return np.isin(labels, hit[hit > 0])


def extract_voi(vol_raw: Volume, params: VoiParams = VoiParams()) -> VoiResult:
    norm = normalize_intensity(vol_raw, params.target_max)
    binary = threshold_binarize(norm, params.threshold)
    z_range = middle_slice_range(norm.data.shape[0], params.slice_fraction)
    template = build_seed_template(binary, z_range, params.n_lines, params.min_radius_fraction)
    stats = seed_statistics(norm, template.seeds)
    window = gaussian_window(stats, params.z_factor)
    grown = region_grow(norm, template.seeds, window)
    vessel = spherical_dilate(grown, params.dilation_radius)
    masked = norm.with_data(np.where(vessel, norm.data, np.float32(0)))
    return VoiResult(vessel_mask=vessel, masked_volume=masked, stats=stats, window=window)
