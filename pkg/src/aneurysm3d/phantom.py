"""
Synthetic TOF-MRA-like phantoms with known ground truth.

Vessels are polyline tubes and aneurysms spherical bumps, each with a
Gaussian intensity profile ``peak * exp(-d^2 / (2 (radius/2)^2))`` added to a
noisy background.  Ground truth is the half-peak iso-surface of each
structure, i.e. ``d <= radius * sqrt(2 ln 2) / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np

from .engine.init import derive_rng, make_rng
from .errors import SpecInvalid
from .volume import Volume

HALF_PEAK_FACTOR = math.sqrt(2.0 * math.log(2.0)) / 2.0


@dataclass(frozen=True)
class VesselSpec:
    points: Tuple[Tuple[float, float, float], ...]
    radius: float
    peak: float


@dataclass(frozen=True)
class AneurysmSpec:
    center: Tuple[float, float, float]
    radius: float
    peak: float


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    vessels: Tuple[VesselSpec, ...] = ()
    aneurysms: Tuple[AneurysmSpec, ...] = ()
    background_mean: float = 100.0
    noise_std: float = 20.0
    seed: int = 0

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise SpecInvalid(f"dims must be three positive ints, got {self.dims}")
        if min(self.spacing) <= 0:
            raise SpecInvalid("spacing must be positive")
        if self.noise_std < 0:
            raise SpecInvalid("noise_std must be >= 0")
        for v in self.vessels:
            if v.radius <= 0 or v.peak <= self.background_mean or len(v.points) < 2:
                raise SpecInvalid(f"invalid vessel {v}")
        for a in self.aneurysms:
            if a.radius <= 0 or a.peak <= self.background_mean:
                raise SpecInvalid(f"invalid aneurysm {a}")
            if not all(0 <= c <= d - 1 for c, d in zip(a.center, self.dims)):
                raise SpecInvalid(f"aneurysm centre {a.center} outside volume {self.dims}")


@dataclass
class Phantom:
    volume: Volume
    vessel_gt: np.ndarray
    aneurysm_gt: List[np.ndarray]  # (N, 3) arrays of (x, y, z) voxel indices
    aneurysm_diameters_mm: List[float]
    spec: PhantomSpec

    @property
    def is_positive(self) -> bool:
        return len(self.aneurysm_gt) > 0

    def aneurysm_mask(self) -> np.ndarray:
        mask = np.zeros(self.volume.data.shape, dtype=bool)
        for idx in self.aneurysm_gt:
            mask[idx[:, 2], idx[:, 1], idx[:, 0]] = True
        return mask


def _grid(dims):
    nx, ny, nz = dims
    z, y, x = np.meshgrid(
        np.arange(nz, dtype=np.float64), np.arange(ny, dtype=np.float64), np.arange(nx, dtype=np.float64),
        indexing="ij",
    )
    return x, y, z


def polyline_distance(points: Sequence[Sequence[float]], x, y, z) -> np.ndarray:
    """Euclidean distance from every grid point to a polyline."""
    p = np.asarray(points, dtype=np.float64)
    best = np.full(x.shape, np.inf)
    for a, b in zip(p[:-1], p[1:]):
        ab = b - a
        denom = float(ab @ ab)
        if denom == 0:
            t = np.zeros(x.shape)
        else:
            t = ((x - a[0]) * ab[0] + (y - a[1]) * ab[1] + (z - a[2]) * ab[2]) / denom
            np.clip(t, 0.0, 1.0, out=t)
        d2 = (x - a[0] - t * ab[0]) ** 2 + (y - a[1] - t * ab[1]) ** 2 + (z - a[2] - t * ab[2]) ** 2
        np.minimum(best, d2, out=best)
    return np.sqrt(best)


def profile(d, radius, peak):
    sigma = radius / 2.0
    return peak * np.exp(-(d ** 2) / (2.0 * sigma ** 2))


def noise_free_intensity(spec: PhantomSpec) -> np.ndarray:
    x, y, z = _grid(spec.dims)
    out = np.full(x.shape, spec.background_mean, dtype=np.float64)
    for v in spec.vessels:
        out += profile(polyline_distance(v.points, x, y, z), v.radius, v.peak)
    for a in spec.aneurysms:
        d = np.sqrt((x - a.center[0]) ** 2 + (y - a.center[1]) ** 2 + (z - a.center[2]) ** 2)
        out += profile(d, a.radius, a.peak)
    return out


def generate_phantom(spec: PhantomSpec) -> Phantom:
    spec.validate()
    x, y, z = _grid(spec.dims)
    intensity = np.full(x.shape, spec.background_mean, dtype=np.float64)
    vessel_gt = np.zeros(x.shape, dtype=bool)
    for v in spec.vessels:
        contrib = profile(polyline_distance(v.points, x, y, z), v.radius, v.peak)
        intensity += contrib
        vessel_gt |= contrib >= 0.5 * v.peak
    aneurysm_gt = []
    diameters = []
    for a in spec.aneurysms:
        d = np.sqrt((x - a.center[0]) ** 2 + (y - a.center[1]) ** 2 + (z - a.center[2]) ** 2)
        contrib = profile(d, a.radius, a.peak)
        intensity += contrib
        zz, yy, xx = np.nonzero(contrib >= 0.5 * a.peak)
        if len(zz) == 0:
            # a bump narrower than a voxel still marks its nearest voxel
            c = np.floor(np.asarray(a.center) + 0.5).astype(int)
            xx, yy, zz = np.array([c[0]]), np.array([c[1]]), np.array([c[2]])
        aneurysm_gt.append(np.stack([xx, yy, zz], axis=1))
        diameters.append(2.0 * a.radius * HALF_PEAK_FACTOR * max(spec.spacing))
    if spec.noise_std > 0:
        intensity += make_rng(spec.seed).normal(0.0, spec.noise_std, size=intensity.shape)
    return Phantom(
        volume=Volume(intensity.astype(np.float32), spec.spacing),
        vessel_gt=vessel_gt,
        aneurysm_gt=aneurysm_gt,
        aneurysm_diameters_mm=diameters,
        spec=spec,
    )


@dataclass(frozen=True)
class DatasetTemplate:
    """Ranges from which per-case phantom geometry is drawn."""

    dims: Tuple[int, int, int] = (32, 32, 32)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_vessels: Tuple[int, int] = (2, 2)
    vessel_radius: Tuple[float, float] = (2.0, 2.6)
    vessel_peak: Tuple[float, float] = (750.0, 850.0)
    aneurysm_radius: Tuple[float, float] = (4.0, 5.5)
    aneurysm_peak: Tuple[float, float] = (350.0, 420.0)
    background_mean: float = 100.0
    noise_std: float = 20.0
    border_margin: float = 0.2  # aneurysm centres kept this fraction away from faces
    min_separation: float = 2.5  # centreline gap between vessels, in units of summed radii

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("dims", "spacing", "n_vessels", "vessel_radius", "vessel_peak", "aneurysm_radius", "aneurysm_peak"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _trunk(rng, dims, radius_range, peak_range) -> VesselSpec:
    """Axial polyline from the bottom to the top transverse face, staying
    near the in-plane centre."""
    size = np.asarray(dims, dtype=np.float64)
    zs = np.linspace(0.0, size[2] - 1, 4)
    start = (size[:2] - 1) / 2.0 + rng.uniform(-0.08, 0.08, size=2) * size[:2]
    xy = start + np.cumsum(rng.uniform(-0.05, 0.05, size=(4, 2)) * size[:2], axis=0)
    pts = tuple((float(x), float(y), float(z)) for (x, y), z in zip(xy, zs))
    return VesselSpec(pts, float(rng.uniform(*radius_range)), float(rng.uniform(*peak_range)))


def _point_at_z(points, z):
    p = np.asarray(points, dtype=np.float64)
    return np.array([np.interp(z, p[:, 2], p[:, 0]), np.interp(z, p[:, 2], p[:, 1]), z])


def _branch(rng, trunk: VesselSpec, dims, radius_range, peak_range) -> VesselSpec:
    """Polyline leaving the trunk wall in a random in-plane direction and
    running out to a side face.  Starting at the wall rather than on the
    centreline keeps the summed profiles near a single peak."""
    size = np.asarray(dims, dtype=np.float64)
    z0 = rng.uniform(0.3, 0.7) * (size[2] - 1)
    root = _point_at_z(trunk.points, z0)
    theta = rng.uniform(0.0, 2 * math.pi)
    direction = np.array([math.cos(theta), math.sin(theta), rng.uniform(-0.4, 0.4)])
    direction /= np.linalg.norm(direction)
    start = root + 1.2 * trunk.radius * np.array([math.cos(theta), math.sin(theta), 0.0])
    # distance to the first face along the direction
    with np.errstate(divide="ignore"):
        t_face = np.where(direction > 0, (size - 1 - start) / direction, np.where(direction < 0, -start / direction, np.inf))
    end = start + float(t_face.min()) * direction
    bend = (start + end) / 2 + rng.uniform(-0.06, 0.06, size=3) * size
    bend = np.clip(bend, 0, size - 1)
    pts = tuple(tuple(float(c) for c in p) for p in (start, bend, end))
    return VesselSpec(pts, float(rng.uniform(*radius_range)), float(rng.uniform(*peak_range)))


def polyline_separation(a: Sequence[Sequence[float]], b: Sequence[Sequence[float]], samples: int = 64) -> float:
    """Approximate minimum distance between two polylines (dense sampling of
    ``a`` against exact point-to-segment distance on ``b``)."""
    pa = np.asarray(a, dtype=np.float64)
    pts = np.concatenate([p0 + np.linspace(0, 1, samples)[:, None] * (p1 - p0) for p0, p1 in zip(pa[:-1], pa[1:])])
    d = polyline_distance(b, pts[:, 0], pts[:, 1], pts[:, 2])
    return float(d.min())


def _random_vessels(rng, template, n):
    """A trunk plus ``n - 1`` branches.  Branches keep their distance from
    each other, and from the trunk away from their root, so overlapping
    profiles never sum far above a single peak."""
    trunk = _trunk(rng, template.dims, template.vessel_radius, template.vessel_peak)
    vessels = [trunk]
    for _ in range(1000):
        if len(vessels) == n:
            break
        b = _branch(rng, trunk, template.dims, template.vessel_radius, template.vessel_peak)
        gap = template.min_separation
        if all(polyline_separation(b.points, w.points) >= gap * (b.radius + w.radius) for w in vessels[1:]) and (
            _separation_beyond_root(b, trunk) >= gap * (b.radius + trunk.radius)
        ):
            vessels.append(b)
    if len(vessels) < n:
        raise SpecInvalid(f"could not place {n} separated vessels in {template.dims}")
    return tuple(vessels)


def _separation_beyond_root(branch: VesselSpec, trunk: VesselSpec, samples: int = 64) -> float:
    pa = np.asarray(branch.points, dtype=np.float64)
    pts = np.concatenate([p0 + np.linspace(0, 1, samples)[:, None] * (p1 - p0) for p0, p1 in zip(pa[:-1], pa[1:])])
    far = np.linalg.norm(pts - pa[0], axis=1) >= 3.0 * (branch.radius + trunk.radius)
    if not far.any():
        return 0.0
    pts = pts[far]
    return float(polyline_distance(trunk.points, pts[:, 0], pts[:, 1], pts[:, 2]).min())


def _attach_aneurysm(rng, vessel: VesselSpec, template: DatasetTemplate) -> AneurysmSpec:
    size = np.asarray(template.dims, dtype=np.float64)
    pts = np.asarray(vessel.points)
    seg_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    lo = template.border_margin * (size - 1)
    hi = (1 - template.border_margin) * (size - 1)
    for _ in range(200):
        s = rng.uniform(0.2, 0.8) * cum[-1]
        k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg_len) - 1)
        t = (s - cum[k]) / seg_len[k]
        on_line = pts[k] + t * (pts[k + 1] - pts[k])
        tangent = (pts[k + 1] - pts[k]) / seg_len[k]
        r = rng.normal(size=3)
        r -= (r @ tangent) * tangent
        r /= np.linalg.norm(r)
        center = on_line + rng.uniform(0.6, 1.0) * vessel.radius * r
        if np.all(center >= lo) and np.all(center <= hi):
            return AneurysmSpec(
                tuple(float(c) for c in center),
                float(rng.uniform(*template.aneurysm_radius)),
                float(rng.uniform(*template.aneurysm_peak)),
            )
    raise SpecInvalid("could not place an aneurysm away from the volume border")


def random_phantom_spec(template: DatasetTemplate, seed: int, positive: bool) -> PhantomSpec:
    rng = derive_rng(seed, "geometry")
    n_vessels = int(rng.integers(template.n_vessels[0], template.n_vessels[1] + 1))
    vessels = _random_vessels(rng, template, n_vessels)
    aneurysms = ()
    if positive:
        host = vessels[int(rng.integers(len(vessels)))]
        aneurysms = (_attach_aneurysm(rng, host, template),)
    return PhantomSpec(
        dims=tuple(template.dims),
        spacing=tuple(template.spacing),
        vessels=vessels,
        aneurysms=aneurysms,
        background_mean=template.background_mean,
        noise_std=template.noise_std,
        seed=int(derive_rng(seed, "noise").integers(2 ** 63)),
    )


def generate_dataset(n_cases: int, aneurysm_rate: float, template: DatasetTemplate = DatasetTemplate(), seed: int = 0):
    """``round(rate * n)`` positive cases at seeded positions; every case
    derives its own seed so cases can be generated independently."""
    if n_cases < 1:
        raise SpecInvalid("n_cases must be >= 1")
    if not 0 <= aneurysm_rate <= 1:
        raise SpecInvalid("aneurysm_rate must be in [0, 1]")
    n_pos = int(math.floor(aneurysm_rate * n_cases + 0.5))
    order = make_rng(seed).permutation(n_cases)
    positive = np.zeros(n_cases, dtype=bool)
    positive[order[:n_pos]] = True
    case_seeds = make_rng(seed + 1).integers(0, 2 ** 62, size=n_cases)
    return [generate_phantom(random_phantom_spec(template, int(s), bool(p))) for s, p in zip(case_seeds, positive)]


def without_noise(template: DatasetTemplate) -> DatasetTemplate:
    return replace(template, noise_std=0.0)
