"""
Inference: VOI extraction, resize to the model cube, aneurysm likelihood,
binarization, remapping to the original grid and cube boxes per component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .training import ANEURYSM, network_input, round_toward_center
from .voi import VoiParams, extract_voi
from .volume import GeometricTransform, Volume, connected_components, remap_mask, resize_mask


@dataclass(frozen=True)
class Detection:
    box_min: Tuple[int, int, int]  # (x, y, z), original voxel grid
    box_size: Tuple[int, int, int]  # (w, l, H)
    score: float
    component_id: int

    @property
    def box_max(self) -> Tuple[int, int, int]:
        """Exclusive upper corner."""
        return tuple(a + b for a, b in zip(self.box_min, self.box_size))

    def contains(self, idx_xyz: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx_xyz)
        lo = np.asarray(self.box_min)
        hi = np.asarray(self.box_max)
        return np.all((idx >= lo) & (idx < hi), axis=-1)

    def to_dict(self):
        return {
            "box_min": list(self.box_min),
            "box_size": list(self.box_size),
            "score": self.score,
            "component_id": self.component_id,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(int(v) for v in d["box_min"]), tuple(int(v) for v in d["box_size"]), float(d["score"]),
                   int(d["component_id"]))


@dataclass(frozen=True)
class DetectionParams:
    threshold: float = 0.5
    box_side: int = 60
    radius_limit: float = 30.0
    voi: VoiParams = field(default_factory=VoiParams)

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("threshold", "box_side", "radius_limit")}
        d["voi"] = {k: getattr(self.voi, k) for k in self.voi.__dataclass_fields__}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        voi = VoiParams(**d.pop("voi", {}))
        return cls(voi=voi, **d)


def predict_likelihood(model, vol_raw: Volume, voi_params: VoiParams = VoiParams()):
    """Aneurysm-channel probability on the model cube, zero outside the VOI.

    Returns (likelihood Volume, transform model cube -> original grid).
    """
    voi = extract_voi(vol_raw, voi_params)
    side = model.config.input_dims
    x = network_input(vol_raw, voi.vessel_mask, side)
    inside, transform = resize_mask(voi.vessel_mask, (side,) * 3)
    was_training = model.training
    model.eval()
    probs = model.forward(x)
    model.train(was_training)
    lik = np.where(inside, probs[0, ANEURYSM], 0).astype(np.float32)
    spacing = tuple(s * k for s, k in zip(vol_raw.spacing, transform.scale))
    return Volume(lik, spacing), transform


def binarize_likelihood(likelihood, threshold: float = 0.5) -> np.ndarray:
    """Set where the probability is strictly greater than ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    data = likelihood.data if isinstance(likelihood, Volume) else np.asarray(likelihood)
    return data > threshold


def box_side_for_radius(r: float, box_side: int = 60, radius_limit: float = 30.0) -> int:
    """Fixed side up to the radius limit, else 2r rounded up to an even integer."""
    if r <= radius_limit:
        return int(box_side)
    side = int(math.ceil(2.0 * r - 1e-9))
    return side + (side % 2)


def _sample_score(likelihood: Optional[Volume], transform: Optional[GeometricTransform], idx_xyz: np.ndarray) -> float:
    if likelihood is None:
        return 1.0
    t = transform or GeometricTransform.identity(likelihood.dims)
    pts = t.to_target(idx_xyz.astype(np.float64))
    nz, ny, nx = likelihood.data.shape
    ix = np.clip(np.floor(pts[:, 0] + 0.5).astype(np.intp), 0, nx - 1)
    iy = np.clip(np.floor(pts[:, 1] + 0.5).astype(np.intp), 0, ny - 1)
    iz = np.clip(np.floor(pts[:, 2] + 0.5).astype(np.intp), 0, nz - 1)
    return float(np.clip(likelihood.data[iz, iy, ix].max(), 0.0, 1.0))


def boxes_from_mask(
    mask: np.ndarray,
    likelihood: Optional[Volume] = None,
    transform: Optional[GeometricTransform] = None,
    box_side: int = 60,
    radius_limit: float = 30.0,
) -> List[Detection]:
    """One cube per 26-connected component of an original-grid mask.

    In-plane side follows :func:`box_side_for_radius` of the component's
    maximum transverse distance from its centroid; the height is the
    component's slice extent.  Boxes are centred on the rounded centroid and
    clipped to the grid.  Scores are the highest likelihood over the
    component (1.0 without a likelihood map).  Sorted by descending score.
    """
    mask = np.asarray(mask, dtype=bool)
    nz, ny, nx = mask.shape
    dets = []
    for cid, comp in enumerate(connected_components(mask, connectivity=26)):
        cx, cy = (round_toward_center(v, n) for v, n in zip(comp.centroid[:2], (nx, ny)))
        side = box_side_for_radius(comp.max_planar_radius, box_side, radius_limit)
        z0 = int(comp.voxel_indices[:, 2].min())
        lo = [cx - side // 2, cy - side // 2, z0]
        hi = [lo[0] + side, lo[1] + side, z0 + comp.z_extent]
        lo_c = [max(0, v) for v in lo]
        hi_c = [min(n, v) for v, n in zip(hi, (nx, ny, nz))]
        size = tuple(int(h - l) for l, h in zip(lo_c, hi_c))
        score = _sample_score(likelihood, transform, comp.voxel_indices)
        dets.append(Detection(tuple(int(v) for v in lo_c), size, score, cid))
    dets.sort(key=lambda d: (-d.score, d.component_id))
    return dets


def detect(model, vol_raw: Volume, params: DetectionParams = DetectionParams()) -> List[Detection]:
    likelihood, transform = predict_likelihood(model, vol_raw, params.voi)
    binary = binarize_likelihood(likelihood, params.threshold)
    original = remap_mask(binary, transform)
    return boxes_from_mask(original, likelihood, transform, params.box_side, params.radius_limit)
