"""
Label preparation, augmentation, losses and the training loop.

Labels use three classes: 0 background, 1 aneurysm (a sphere around each
annotated lesion), 2 remaining vessel.  Network inputs are the normalized
volume restricted to the vessel mask, resized to the model cube and scaled
to roughly [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from itertools import combinations, product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .engine.init import make_rng
from .engine.optim import Adam
from .errors import ConfigInvalid, DivergenceDetected, EmptyAnnotation, ShapeMismatch, TooFewCases
from .volume import (
    Volume,
    ball_structure,
    connected_components,
    flip_transverse,
    gaussian_smooth_discrete,
    histogram_equalize,
    normalize_intensity,
    resize_mask,
    resize_to,
)

BACKGROUND, ANEURYSM, VESSEL = 0, 1, 2
N_CLASSES = 3
INPUT_SCALE = 1024.0


@dataclass
class LabeledCase:
    volume: Volume
    aneurysm_mask: np.ndarray
    vessel_mask: np.ndarray
    case_id: str = ""
    diameters_mm: Tuple[float, ...] = ()
    positive: Optional[bool] = None  # None: positive iff the annotation is non-empty

    def __post_init__(self):
        shape = self.volume.data.shape
        for name in ("aneurysm_mask", "vessel_mask"):
            m = np.asarray(getattr(self, name), dtype=bool)
            if m.shape != shape:
                raise ShapeMismatch(f"{name} shape {m.shape} differs from volume {shape}")
            setattr(self, name, m)

    @property
    def is_positive(self) -> bool:
        return bool(self.aneurysm_mask.any()) if self.positive is None else self.positive


# ---------------------------------------------------------------- labels


def round_toward_center(value: float, n: int) -> int:
    """Nearest integer; exact halves go toward the axis centre (n - 1) / 2.

    Unlike plain half-up rounding this commutes with mirroring the axis,
    which keeps label preparation flip-equivariant.
    """
    lo = math.floor(value)
    frac = value - lo
    if frac < 0.5:
        r = lo
    elif frac > 0.5:
        r = lo + 1
    else:
        r = lo + 1 if value < (n - 1) / 2.0 else lo
    return int(min(max(r, 0), n - 1))


def paint_ball(mask: np.ndarray, center_xyz: Sequence[int], radius: float) -> None:
    """Set the lattice ball of ``radius`` around ``center_xyz``, clipped to the grid."""
    ball = ball_structure(radius)
    r = ball.shape[0] // 2
    nz, ny, nx = mask.shape
    cx, cy, cz = (int(c) for c in center_xyz)
    dst, src = [], []
    for c, n in ((cz, nz), (cy, ny), (cx, nx)):
        lo, hi = c - r, c + r + 1
        dst.append(slice(max(lo, 0), min(hi, n)))
        src.append(slice(max(lo, 0) - lo, 2 * r + 1 - (hi - min(hi, n))))
    if all(d.start < d.stop for d in dst):
        mask[tuple(dst)] |= ball[tuple(src)]


def prepare_label(case: LabeledCase, sphere_radius: float = 30) -> np.ndarray:
    """uint8 class volume with priority aneurysm > vessel > background."""
    shape = case.volume.data.shape
    nz, ny, nx = shape
    comps = connected_components(case.aneurysm_mask, connectivity=26)
    if case.positive and not comps:
        raise EmptyAnnotation(f"case {case.case_id!r} is declared positive but has no annotated voxels")
    lesion = np.zeros(shape, dtype=bool)
    for comp in comps:
        # a centroid sitting exactly on the middle of an even axis has no
        # mirror-invariant rounding, so both neighbours get a ball
        axes = []
        for v, n in zip(comp.centroid, (nx, ny, nz)):
            if v == (n - 1) / 2.0 and n % 2 == 0:
                axes.append((n // 2 - 1, n // 2))
            else:
                axes.append((round_toward_center(v, n),))
        for c in product(*axes):
            paint_ball(lesion, c, sphere_radius)
        idx = comp.voxel_indices
        lesion[idx[:, 2], idx[:, 1], idx[:, 0]] = True
    label = np.zeros(shape, dtype=np.uint8)
    label[case.vessel_mask] = VESSEL
    label[lesion] = ANEURYSM
    return label


def one_hot(label: np.ndarray, n_classes: int = N_CLASSES, dtype=np.float32) -> np.ndarray:
    """(z, y, x) class volume -> (1, C, z, y, x)."""
    out = np.zeros((1, n_classes) + label.shape, dtype=dtype)
    for c in range(n_classes):
        out[0, c] = label == c
    return out


# ---------------------------------------------------------- augmentation

AUGMENTATIONS = ("noise", "flip", "histeq")
VARIANTS: Tuple[Tuple[str, ...], ...] = tuple(
    combo for k in range(len(AUGMENTATIONS) + 1) for combo in combinations(AUGMENTATIONS, k)
)


def augment_case(case: LabeledCase, variant: Sequence[str]) -> LabeledCase:
    """Apply the named operations in the fixed order noise -> flip -> histeq.

    "noise" is the discrete Gaussian filter (variance 4, kernel width 32).
    Only the flip moves voxels, so only the flip touches the masks.
    """
    unknown = set(variant) - set(AUGMENTATIONS)
    if unknown:
        raise ConfigInvalid(f"unknown augmentation(s) {sorted(unknown)}")
    vol, ane, ves = case.volume, case.aneurysm_mask, case.vessel_mask
    if "noise" in variant:
        vol = gaussian_smooth_discrete(vol, variance=4.0, max_kernel_width=32)
    if "flip" in variant:
        vol = flip_transverse(vol)
        ane = flip_transverse(ane)
        ves = flip_transverse(ves)
    if "histeq" in variant:
        vol = histogram_equalize(vol)
    tag = "+".join(variant) if variant else "id"
    return replace(case, volume=vol, aneurysm_mask=ane, vessel_mask=ves, case_id=f"{case.case_id}/{tag}")


def expand_dataset(cases: Sequence[LabeledCase], variants=VARIANTS) -> List[LabeledCase]:
    """Every case under every variant; 132 cases give 1056 training sets."""
    return [augment_case(c, v) for c in cases for v in variants]


# ------------------------------------------------------------- samples


@dataclass
class TrainingSample:
    x: np.ndarray  # (1, 1, s, s, s)
    target: np.ndarray  # (1, C, s, s, s) one-hot
    case_id: str = ""
    group: str = ""  # source case, so augmented copies stay on one side of a split


def network_input(volume: Volume, vessel_mask: np.ndarray, input_dims: int) -> np.ndarray:
    """Normalized intensities inside the vessel mask, resized to the model cube."""
    norm = normalize_intensity(volume)
    masked = norm.with_data(np.where(vessel_mask, norm.data, np.float32(0)))
    resized, _ = resize_to(masked, (input_dims,) * 3, "trilinear")
    return (resized.data / np.float32(INPUT_SCALE))[None, None].astype(np.float32)


def resize_label(label: np.ndarray, input_dims: int) -> np.ndarray:
    out = np.zeros((input_dims,) * 3, dtype=np.uint8)
    for c in (VESSEL, ANEURYSM):  # aneurysm painted last keeps its priority
        m, _ = resize_mask(label == c, (input_dims,) * 3)
        out[m] = c
    return out


def make_sample(case: LabeledCase, input_dims: int, sphere_radius: float = 30, group: str = "") -> TrainingSample:
    label = resize_label(prepare_label(case, sphere_radius), input_dims)
    x = network_input(case.volume, case.vessel_mask, input_dims)
    return TrainingSample(x=x, target=one_hot(label), case_id=case.case_id, group=group or case.case_id)


def build_samples(
    cases: Sequence[LabeledCase], input_dims: int, sphere_radius: float = 30, variants=VARIANTS
) -> List[TrainingSample]:
    return [
        make_sample(augment_case(c, v), input_dims, sphere_radius, group=c.case_id) for c in cases for v in variants
    ]


# ---------------------------------------------------------------- losses

DICE_EPS = 1e-5
CE_CLIP = 1e-7


def soft_dice_loss(pred: np.ndarray, target: np.ndarray, eps: float = DICE_EPS):
    """1 - mean over foreground classes (all but channel 0) of the soft Dice.

    Returns (loss, d loss / d pred).
    """
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and target {target.shape} differ")
    p = pred.astype(np.float64)
    t = target.astype(np.float64)
    fg = range(1, p.shape[1])
    grad = np.zeros_like(p)
    dice = []
    for c in fg:
        inter = float((p[:, c] * t[:, c]).sum())
        denom = float(p[:, c].sum() + t[:, c].sum()) + eps
        num = 2.0 * inter + eps
        dice.append(num / denom)
        grad[:, c] = -(2.0 * t[:, c] * denom - num) / denom ** 2 / len(fg)
    return 1.0 - float(np.mean(dice)), grad.astype(pred.dtype)


def cross_entropy_loss(pred: np.ndarray, target: np.ndarray, clip: float = CE_CLIP):
    """Voxel-averaged categorical cross-entropy on clipped probabilities."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and target {target.shape} differ")
    p = pred.astype(np.float64)
    t = target.astype(np.float64)
    n_vox = p.shape[0] * int(np.prod(p.shape[2:]))
    pc = np.clip(p, clip, 1.0)
    loss = -float((t * np.log(pc)).sum()) / n_vox
    grad = np.where(p > clip, -t / pc, 0.0) / n_vox
    return loss, grad.astype(pred.dtype)


def dice_plus_ce_loss(pred, target):
    a, ga = soft_dice_loss(pred, target)
    b, gb = cross_entropy_loss(pred, target)
    return a + b, ga + gb


LOSSES = {"soft_dice": soft_dice_loss, "cross_entropy": cross_entropy_loss, "dice_plus_ce": dice_plus_ce_loss}


# --------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1
    lr: float = 5e-4
    max_epochs: int = 300
    early_stop_patience: int = 20
    seed: int = 0
    loss: str = "soft_dice"
    validation_fraction: float = 0.1
    sphere_radius: float = 30
    stop_below: Optional[float] = None  # end once the training loss drops under this

    def validate(self):
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigInvalid("lr must be positive")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigInvalid("max_epochs and early_stop_patience must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigInvalid(f"loss must be one of {sorted(LOSSES)}")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigInvalid("validation_fraction must be in [0, 1)")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigInvalid(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    epoch: int
    parameters: Dict[str, np.ndarray]
    metric: float

    def __post_init__(self):
        if not math.isfinite(self.metric):
            raise DivergenceDetected(f"checkpoint metric {self.metric} is not finite")


class EarlyStopping:
    """Tracks the best (lowest) metric; signals a stop after ``patience``
    consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, metric: float) -> bool:
        """Returns True when training should stop."""
        if metric < self.best:
            self.best, self.best_epoch, self.bad_epochs = metric, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def snapshot(model) -> Dict[str, np.ndarray]:
    return {name: p.value.copy() for name, p in model.named_parameters()}


def restore(model, params: Dict[str, np.ndarray]):
    named = dict(model.named_parameters())
    if set(named) != set(params):
        raise ShapeMismatch("checkpoint parameter names do not match the model")
    for name, p in named.items():
        if p.value.shape != params[name].shape:
            raise ShapeMismatch(f"{name}: checkpoint shape {params[name].shape} vs model {p.value.shape}")
        p.value[...] = params[name]


def split_validation(samples: Sequence[TrainingSample], fraction: float, seed: int):
    """Hold out whole source cases (all their augmented copies) for validation."""
    groups = sorted({s.group for s in samples})
    n_val = int(math.floor(fraction * len(groups) + 0.5))
    if fraction > 0 and len(groups) >= 2:
        n_val = max(1, n_val)
    n_val = min(n_val, len(groups) - 1)
    if n_val <= 0:
        return list(samples), []
    held = set(np.asarray(groups)[make_rng(seed).permutation(len(groups))[:n_val]].tolist())
    return [s for s in samples if s.group not in held], [s for s in samples if s.group in held]


def evaluate_loss(model, samples: Sequence[TrainingSample], loss_fn) -> float:
    was_training = model.training
    model.eval()
    losses = [loss_fn(model.forward(s.x), s.target)[0] for s in samples]
    model.train(was_training)
    return float(np.mean(losses))


def train(model, samples: Sequence[TrainingSample], config: TrainConfig = TrainConfig(), validation=None, log=None):
    """Adam over shuffled mini-batches with validation-loss early stopping.

    ``validation`` defaults to a held-out share of the source cases; when
    nothing can be held out the training loss is monitored instead.  The
    model ends holding the best checkpoint's parameters.
    Returns (best Checkpoint, history of per-epoch records).
    """
    config.validate()
    if not samples:
        raise TooFewCases("no training samples")
    loss_fn = LOSSES[config.loss]
    if validation is None:
        train_set, val_set = split_validation(samples, config.validation_fraction, config.seed)
    else:
        train_set, val_set = list(samples), list(validation)
    model.train()
    model.reseed_dropout(config.seed)
    optim = Adam(model.parameters(), lr=config.lr)
    rng = make_rng(config.seed)
    stopper = EarlyStopping(config.early_stop_patience)
    best: Optional[Checkpoint] = None
    history = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[start:start + config.batch_size]]
            optim.zero_grad()
            for s in batch:
                probs = model.forward(s.x)
                loss, grad = loss_fn(probs, s.target)
                if not math.isfinite(loss):
                    raise DivergenceDetected(f"non-finite loss at epoch {epoch} on {s.case_id!r}")
                model.backward(grad / len(batch))
                losses.append(loss)
            optim.step()
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(model, val_set, loss_fn) if val_set else None
        if val_loss is not None and not math.isfinite(val_loss):
            raise DivergenceDetected(f"non-finite validation loss at epoch {epoch}")
        record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
        history.append(record)
        if log is not None:
            log(record)
        metric = val_loss if val_loss is not None else train_loss
        stop = stopper.update(epoch, metric)
        if stopper.best_epoch == epoch:
            best = Checkpoint(epoch=epoch, parameters=snapshot(model), metric=metric)
        if config.stop_below is not None and train_loss < config.stop_below:
            break
        if stop:
            break
    restore(model, best.parameters)
    return best, history


def kfold_split(case_ids: Sequence, k: int, seed: int = 0):
    """Seeded shuffle then contiguous chunking; returns k (train, test) lists."""
    ids = list(case_ids)
    if k < 2:
        raise TooFewCases(f"k must be >= 2, got {k}")
    if len(ids) < k:
        raise TooFewCases(f"{len(ids)} cases cannot be split into {k} folds")
    perm = make_rng(seed).permutation(len(ids))
    chunks = np.array_split(perm, k)
    folds = []
    for chunk in chunks:
        test_idx = set(chunk.tolist())
        test = [ids[i] for i in chunk]
        train_ids = [ids[i] for i in perm if i not in test_idx]
        folds.append((train_ids, test))
    return folds
