import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from aneurysm3d.engine import numeric_vjp, relative_error
from aneurysm3d.errors import ConfigInvalid, DivergenceDetected, EmptyAnnotation, ShapeMismatch, TooFewCases
from aneurysm3d.model import NetworkConfig, build_network
from aneurysm3d.training import (
    ANEURYSM,
    BACKGROUND,
    VARIANTS,
    VESSEL,
    Checkpoint,
    EarlyStopping,
    LabeledCase,
    TrainConfig,
    TrainingSample,
    augment_case,
    build_samples,
    cross_entropy_loss,
    dice_plus_ce_loss,
    expand_dataset,
    kfold_split,
    make_sample,
    one_hot,
    prepare_label,
    round_toward_center,
    soft_dice_loss,
    split_validation,
    train,
)
from aneurysm3d.volume import Volume, flip_transverse

from .oracles import lattice_ball_count


def case_with(shape, annot=(), vessel=None, positive=None, seed=0):
    data = np.random.default_rng(seed).random(shape).astype(np.float32) * 1000
    ane = np.zeros(shape, bool)
    for z, y, x in annot:
        ane[z, y, x] = True
    ves = np.zeros(shape, bool) if vessel is None else vessel
    return LabeledCase(Volume(data), ane, ves, "c", positive=positive)


# ----------------------------------------------------------------- labels


def test_single_voxel_label_is_lattice_ball():
    case = case_with((64, 64, 64), annot=[(32, 32, 32)])
    label = prepare_label(case, 30)
    assert (label == ANEURYSM).sum() == 113081 == lattice_ball_count(30)
    assert set(np.unique(label)) == {BACKGROUND, ANEURYSM}


def test_label_ball_is_clipped_at_border():
    case = case_with((8, 8, 8), annot=[(0, 0, 0)])
    label = prepare_label(case, 2)
    # one octant of the radius-2 lattice ball, counted by hand
    expect = sum(1 for x in range(3) for y in range(3) for z in range(3) if x * x + y * y + z * z <= 4)
    assert (label == ANEURYSM).sum() == expect


def test_label_priority_and_partition():
    vessel = np.zeros((16, 16, 16), bool)
    vessel[8, :, 8] = True
    case = case_with((16, 16, 16), annot=[(8, 8, 8)], vessel=vessel)
    label = prepare_label(case, 2)
    assert label[8, 8, 8] == ANEURYSM and label[8, 9, 8] == ANEURYSM
    assert label[8, 0, 8] == VESSEL
    oh = one_hot(label)
    assert_array_equal(oh.sum(axis=1), 1.0)


def test_negative_case_labels_and_empty_positive():
    vessel = np.zeros((6, 6, 6), bool)
    vessel[2:4, 2:4, 2:4] = True
    label = prepare_label(case_with((6, 6, 6), vessel=vessel), 3)
    assert set(np.unique(label)) == {BACKGROUND, VESSEL}
    with pytest.raises(EmptyAnnotation):
        prepare_label(case_with((6, 6, 6), positive=True), 3)


def test_annotation_component_is_kept_beyond_ball():
    # an elongated lesion sticks out of the small centred ball
    annot = [(4, 4, x) for x in range(1, 12)]
    label = prepare_label(case_with((9, 9, 13), annot=annot), 1)
    for z, y, x in annot:
        assert label[z, y, x] == ANEURYSM


@pytest.mark.parametrize("value,n,expect", [(2.4, 10, 2), (2.6, 10, 3), (2.5, 10, 3), (6.5, 10, 6), (4.5, 10, 4), (4.5, 9, 4), (-0.3, 5, 0), (9.7, 10, 9)])
def test_round_toward_center(value, n, expect):
    assert round_toward_center(value, n) == expect


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 9))
def test_label_flip_equivariance(seed, nz):
    rng = np.random.default_rng(seed)
    shape = (nz, 7, 7)
    ane = rng.random(shape) < 0.05
    ves = rng.random(shape) < 0.2
    case = LabeledCase(Volume(rng.random(shape)), ane, ves)
    flipped = augment_case(case, ("flip",))
    assert_array_equal(prepare_label(flipped, 2), flip_transverse(prepare_label(case, 2)))


def test_label_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        LabeledCase(Volume(np.zeros((4, 4, 4))), np.zeros((4, 4, 3), bool), np.zeros((4, 4, 4), bool))


# ----------------------------------------------------------- augmentation


def test_variants_power_set_in_order():
    assert len(VARIANTS) == 8
    assert len(set(VARIANTS)) == 8
    assert VARIANTS[0] == ()
    for v in VARIANTS:
        assert list(v) == sorted(v, key=("noise", "flip", "histeq").index)


def test_identity_and_double_flip():
    case = case_with((5, 6, 7), annot=[(1, 2, 3)], vessel=np.ones((5, 6, 7), bool))
    same = augment_case(case, ())
    assert_array_equal(same.volume.data, case.volume.data)
    back = augment_case(augment_case(case, ("flip",)), ("flip",))
    assert_array_equal(back.volume.data, case.volume.data)
    assert_array_equal(back.aneurysm_mask, case.aneurysm_mask)


def test_intensity_ops_leave_masks_alone():
    case = case_with((6, 6, 6), annot=[(1, 2, 3)])
    out = augment_case(case, ("noise", "histeq"))
    assert_array_equal(out.aneurysm_mask, case.aneurysm_mask)
    assert not np.array_equal(out.volume.data, case.volume.data)
    with pytest.raises(ConfigInvalid):
        augment_case(case, ("rotate",))


def test_132_cases_expand_to_1056():
    cases = [case_with((2, 2, 2), seed=i) for i in range(132)]
    out = expand_dataset(cases)
    assert len(out) == 1056
    assert len({c.case_id for c in out}) == 8


# ----------------------------------------------------------------- samples


def test_make_sample_shapes_and_scaling():
    vessel = np.zeros((12, 16, 20), bool)
    vessel[4:8, 4:8, 4:8] = True
    case = case_with((12, 16, 20), annot=[(6, 6, 6)], vessel=vessel)
    s = make_sample(case, 8, sphere_radius=2)
    assert s.x.shape == (1, 1, 8, 8, 8) and s.x.dtype == np.float32
    assert 0 <= s.x.min() and s.x.max() <= 1.0
    assert s.target.shape == (1, 3, 8, 8, 8)
    assert_array_equal(s.target.sum(axis=1), 1.0)
    assert s.target[0, ANEURYSM].any()


def test_build_samples_groups_by_source():
    cases = [case_with((4, 4, 4), seed=i) for i in range(3)]
    for i, c in enumerate(cases):
        c.case_id = f"case{i}"
    samples = build_samples(cases, 4, 1)
    assert len(samples) == 24
    assert {s.group for s in samples} == {"case0", "case1", "case2"}


def test_split_validation_keeps_groups_together():
    samples = [TrainingSample(np.zeros(1), np.zeros(1), f"g{g}/{v}", f"g{g}") for g in range(10) for v in range(8)]
    tr, va = split_validation(samples, 0.1, seed=0)
    assert len(va) == 8 and len(tr) == 72
    assert {s.group for s in tr}.isdisjoint({s.group for s in va})
    tr, va = split_validation(samples[:8], 0.1, seed=0)
    assert va == [] and len(tr) == 8


# ------------------------------------------------------------------ losses


def _random_probs(shape, seed):
    z = np.random.default_rng(seed).standard_normal(shape)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def test_dice_loss_examples():
    label = np.random.default_rng(0).integers(0, 3, (4, 4, 4)).astype(np.uint8)
    t = one_hot(label, dtype=np.float64)
    loss, _ = soft_dice_loss(t, t)
    assert loss < 1e-4
    wrong = one_hot((label + 1) % 3, dtype=np.float64)
    loss, _ = soft_dice_loss(wrong, t)
    assert abs(loss - 1) < 1e-4


@pytest.mark.parametrize("fn,tol", [(soft_dice_loss, 1e-5), (cross_entropy_loss, 1e-5), (dice_plus_ce_loss, 1e-5)])
@pytest.mark.parametrize("classes", [2, 3])
def test_loss_gradients_match_finite_differences(fn, tol, classes):
    pred = _random_probs((1, classes, 4, 4, 4), classes)
    label = np.random.default_rng(1).integers(0, classes, (4, 4, 4))
    target = one_hot(label, classes, dtype=np.float64)
    _, grad = fn(pred, target)
    num = numeric_vjp(lambda: np.array(fn(pred, target)[0]), pred, np.ones(()))
    assert relative_error(grad, num).max() < tol


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dice_loss_range(seed):
    pred = _random_probs((1, 3, 3, 3, 3), seed)
    target = one_hot(np.random.default_rng(seed).integers(0, 3, (3, 3, 3)), dtype=np.float64)
    loss, _ = soft_dice_loss(pred, target)
    assert 0 <= loss <= 1 + 1e-5


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        soft_dice_loss(np.zeros((1, 3, 2, 2, 2)), np.zeros((1, 2, 2, 2, 2)))


# ---------------------------------------------------------- early stopping


def test_early_stop_arithmetic():
    metrics = [0.9, 0.8, 0.7] + [0.75] * 20
    stopper = EarlyStopping(5)
    stopped_at = None
    for epoch, m in enumerate(metrics, start=1):
        if stopper.update(epoch, m):
            stopped_at = epoch
            break
    assert stopped_at == 8
    assert stopper.best_epoch == 3


def test_equal_metric_is_not_an_improvement():
    stopper = EarlyStopping(2)
    assert not stopper.update(1, 0.5)
    assert not stopper.update(2, 0.5)
    assert stopper.update(3, 0.5)
    assert stopper.best_epoch == 1


def test_checkpoint_rejects_non_finite():
    with pytest.raises(DivergenceDetected):
        Checkpoint(1, {}, float("nan"))


def test_train_config_validation_and_round_trip():
    c = TrainConfig(lr=1e-3, loss="dice_plus_ce", max_epochs=3)
    assert TrainConfig.from_dict(c.to_dict()) == c
    for bad in (dict(batch_size=0), dict(lr=0.0), dict(loss="l2"), dict(validation_fraction=1.0)):
        with pytest.raises(ConfigInvalid):
            TrainConfig(**bad).validate()
    with pytest.raises(ConfigInvalid):
        TrainConfig.from_dict({"epochs": 3})


# ----------------------------------------------------------------- training


def _toy_samples(n=3, side=8):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        label = np.zeros((side,) * 3, np.uint8)
        label[2:6, 3, 3] = VESSEL
        label[3:5, 3:5, 4:6] = ANEURYSM
        x = (label > 0).astype(np.float32)[None, None] * 0.8 + 0.05 * rng.random((1, 1) + (side,) * 3).astype(np.float32)
        out.append(TrainingSample(x, one_hot(label), f"t{i}", f"t{i}"))
    return out


TOY = NetworkConfig(levels=2, base_channels=2, se_ratio=2, input_dims=8)


def test_train_is_reproducible_and_restores_best():
    cfg = TrainConfig(max_epochs=4, lr=3e-3, seed=7, validation_fraction=0.34)
    runs = []
    for _ in range(2):
        m = build_network(TOY, seed=1)
        best, hist = train(m, _toy_samples(), cfg)
        runs.append((best, hist, {k: p.value.copy() for k, p in m.named_parameters()}))
    (b1, h1, p1), (b2, h2, p2) = runs
    assert h1 == h2
    assert b1.epoch == b2.epoch
    for k in p1:
        assert p1[k].tobytes() == p2[k].tobytes()
        assert p1[k].tobytes() == b1.parameters[k].tobytes()
    assert all(r["val_loss"] is not None for r in h1)
    assert b1.metric == min(r["val_loss"] for r in h1)


def test_train_loss_decreases_on_toy():
    m = build_network(TOY, seed=0)
    _, hist = train(m, _toy_samples(2), TrainConfig(max_epochs=15, lr=5e-3, validation_fraction=0))
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]
    assert all(r["val_loss"] is None for r in hist)


def test_train_stop_below_ends_early():
    m = build_network(TOY, seed=0)
    _, hist = train(m, _toy_samples(1), TrainConfig(max_epochs=50, lr=5e-3, validation_fraction=0, stop_below=0.99))
    assert len(hist) < 50


def test_train_detects_divergence():
    s = _toy_samples(1)[0]
    bad = TrainingSample(np.full_like(s.x, np.nan), s.target, "nan", "nan")
    with pytest.raises(DivergenceDetected):
        train(build_network(TOY), [bad], TrainConfig(max_epochs=1, validation_fraction=0))
    with pytest.raises(TooFewCases):
        train(build_network(TOY), [], TrainConfig(max_epochs=1))


# ------------------------------------------------------------------ k-fold


def test_kfold_sizes():
    folds = kfold_split(range(166), 5, seed=0)
    assert [len(te) for _, te in folds] == [34, 33, 33, 33, 33]
    assert [len(tr) for tr, _ in folds] == [132, 133, 133, 133, 133]
    assert sorted(i for _, te in folds for i in te) == list(range(166))
    for tr, te in folds:
        assert set(tr).isdisjoint(te)
    assert [len(te) for _, te in kfold_split(range(10), 5)] == [2] * 5


def test_kfold_seeded():
    assert kfold_split("abcdefg", 3, seed=2) == kfold_split("abcdefg", 3, seed=2)
    assert kfold_split(range(20), 4, seed=1) != kfold_split(range(20), 4, seed=2)
    with pytest.raises(TooFewCases):
        kfold_split(range(3), 5)
    with pytest.raises(TooFewCases):
        kfold_split(range(3), 1)


def test_mid_axis_tie_paints_both_neighbours():
    # two voxels straddling the middle of a 4-slice axis: centroid z = 1.5
    case = case_with((4, 9, 9), annot=[(1, 4, 4), (2, 4, 4)])
    label = prepare_label(case, 1)
    assert label[0, 4, 4] == ANEURYSM and label[3, 4, 4] == ANEURYSM
    assert_array_equal(label, flip_transverse(label))
