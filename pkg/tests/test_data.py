import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ganaug.data import (
    AnnotatedImage,
    Label,
    Patch,
    PatchPool,
    PhantomConfig,
    Source,
    StrategyId,
    build_training_set,
    extract_patches,
    flip_augment,
    flip_batch,
    flip_patch,
    generate_phantom_dataset,
    histogram_normalize,
    normalize_to_range,
    rect_intersection_area,
    sample_nested_subsets,
    split_dataset,
)
from ganaug.errors import InfeasibleError, InvalidInputError


def make_pool(n, label=Label.MASS, size=32, prefix="p", seed=0):
    rng = np.random.default_rng(seed)
    return PatchPool(Patch(rng.random((size, size)), label, Source.REAL, f"{prefix}{i}") for i in range(n))


def reference_percentile(values, q):
    """Linear-interpolation percentile on a sorted copy, scalar code only."""
    xs = sorted(float(v) for v in values)
    rank = q / 100.0 * (len(xs) - 1)
    lo = int(rank)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (xs[hi] - xs[lo]) * (rank - lo)


# ---------------------------------------------------------------- types


def test_patch_rejects_out_of_range_pixels():
    with pytest.raises(InvalidInputError):
        Patch(np.full((32, 32), 1.5), Label.MASS)


def test_patch_pixels_are_read_only():
    p = Patch(np.zeros((32, 32)), Label.MASS, id="a")
    with pytest.raises(ValueError):
        p.pixels[0, 0] = 1.0


def test_pool_counts_and_unique_ids():
    pool = make_pool(3) + make_pool(2, Label.NORMAL, prefix="n")
    assert pool.class_counts == {Label.MASS: 3, Label.NORMAL: 2}
    with pytest.raises(InvalidInputError):
        make_pool(2) + make_pool(1)


# ---------------------------------------------------------------- histogram_normalize


def test_histogram_normalize_constant_is_zero():
    assert np.array_equal(histogram_normalize(np.full((8, 8), 7.0)), np.zeros((8, 8)))


def test_histogram_normalize_two_valued_unchanged():
    raw = np.array([0.0, 1.0] * 50).reshape(10, 10)
    assert np.array_equal(histogram_normalize(raw), raw)


def test_histogram_normalize_ramp_matches_scalar_reference():
    ramp = np.arange(1000, dtype=np.float64).reshape(25, 40)
    p1, p99 = reference_percentile(ramp.ravel(), 1), reference_percentile(ramp.ravel(), 99)
    expected = [(min(max(v, p1), p99) - p1) / (p99 - p1) for v in ramp.ravel()]
    out = histogram_normalize(ramp)
    np.testing.assert_allclose(out.ravel(), expected, rtol=0, atol=1e-12)
    assert out.min() == 0.0 and out.max() == 1.0
    assert np.all(out.ravel()[:10] == 0.0) and np.all(out.ravel()[-10:] == 1.0)


def test_histogram_normalize_empty_raises():
    with pytest.raises(InvalidInputError):
        histogram_normalize(np.zeros((0, 3)))


# ---------------------------------------------------------------- normalize_to_range


def test_normalize_to_range_midpoint():
    v = np.array([0.0, 0.5, 1.0])
    assert normalize_to_range(v, -1, 1)[1] == 0.0


def test_normalize_to_range_constant_maps_to_midpoint():
    assert np.all(normalize_to_range(np.full(5, 3.0), 0, 1) == 0.5)


def test_normalize_to_range_ramp():
    np.testing.assert_allclose(normalize_to_range(np.arange(4.0), 0, 1), [0, 1 / 3, 2 / 3, 1], atol=1e-15)


def test_normalize_to_range_requires_lo_below_hi():
    with pytest.raises(InvalidInputError):
        normalize_to_range(np.arange(3.0), 1, 1)


# ---------------------------------------------------------------- phantom


def test_phantom_counts():
    pool = generate_phantom_dataset(PhantomConfig(n_positive=0, n_negative=5))
    assert pool.class_counts == {Label.MASS: 0, Label.NORMAL: 5}


def test_phantom_is_deterministic():
    cfg = PhantomConfig(n_positive=5, n_negative=5, seed=3)
    assert generate_phantom_dataset(cfg).same_as(generate_phantom_dataset(cfg))


def test_phantom_masses_brighter_at_centre():
    cfg = PhantomConfig(n_positive=200, n_negative=200, lesion_contrast_range=(0.2, 0.4), seed=5)
    pool = generate_phantom_dataset(cfg)
    c = slice(11, 20)  # central 9x9 of a 32x32 patch

    def centre_mean(label):
        vals = [float(p.pixels[c, c].astype(np.float64).mean()) for p in pool if p.label == label]
        return sum(vals) / len(vals)

    assert centre_mean(Label.MASS) > centre_mean(Label.NORMAL)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(lesion_radius_range=(0.0, 3.0)),
        dict(lesion_radius_range=(5.0, 4.0)),
        dict(lesion_radius_range=(3.0, 16.0)),
        dict(image_size=48),
        dict(lesion_contrast_range=(0.0, 0.5)),
    ],
)
def test_phantom_config_validation(kwargs):
    with pytest.raises(InvalidInputError):
        PhantomConfig(**kwargs)


# ---------------------------------------------------------------- extract_patches


def _image(h=256, w=256, boxes=(), seed=0):
    rng = np.random.default_rng(seed)
    return AnnotatedImage(rng.random((h, w)), boxes)


def test_extract_no_negatives_returns_mass_patches_only():
    pool = extract_patches(_image(boxes=((10, 10, 40, 40), (100, 120, 150, 170))), 64, 0, seed=0)
    assert pool.class_counts == {Label.MASS: 2, Label.NORMAL: 0}


def test_extract_mass_patch_centered_and_clamped():
    img = _image(boxes=((100, 60, 140, 100), (0, 0, 10, 10)))
    pool = extract_patches(img, 64, 0, seed=0)
    centred, corner = pool[0], pool[1]
    # box centre (120, 80) -> top-left (88, 48)
    assert np.array_equal(centred.pixels, img.pixels[48:112, 88:152])
    assert np.array_equal(corner.pixels, img.pixels[0:64, 0:64])


def test_extract_infeasible_when_box_covers_image():
    with pytest.raises(InfeasibleError):
        extract_patches(_image(h=64, w=64, boxes=((0, 0, 64, 64),)), 16, 1, seed=0)


def test_extract_negatives_never_overlap_box():
    box = (0, 0, 64, 64)
    pool = extract_patches(_image(boxes=(box,)), 64, 10, seed=4)
    negs = [p for p in pool if p.label == Label.NORMAL]
    assert len(negs) == 10
    for p in negs:
        _, _, top, left = p.id.split("-")
        top, left = int(top), int(left)
        # brute force: count shared pixels cell by cell
        shared = sum(
            1
            for y in range(top, top + 64)
            for x in range(left, left + 64)
            if box[0] <= x < box[2] and box[1] <= y < box[3]
        )
        assert shared == 0


def test_extract_respects_tissue_mask():
    rng = np.random.default_rng(0)
    mask = np.zeros((128, 128), dtype=bool)
    mask[:, 64:] = True
    img = AnnotatedImage(rng.random((128, 128)), (), mask)
    pool = extract_patches(img, 32, 20, seed=1)
    for p in pool:
        _, _, top, left = p.id.split("-")
        assert mask[int(top) : int(top) + 32, int(left) : int(left) + 32].mean() >= 0.95


def test_rect_intersection_area():
    assert rect_intersection_area((0, 0, 4, 4), (2, 2, 6, 6)) == 4
    assert rect_intersection_area((0, 0, 4, 4), (4, 0, 8, 4)) == 0


# ---------------------------------------------------------------- split_dataset


def test_split_sizes_match_floor_rule():
    split = split_dataset(make_pool(2215, size=32), (0.60, 0.066, 0.334), seed=0)
    assert (len(split.train), len(split.validation), len(split.test)) == (1329, 146, 740)


def test_split_thirds():
    split = split_dataset(make_pool(3), (1 / 3, 1 / 3, 1 / 3), seed=0)
    assert (len(split.train), len(split.validation), len(split.test)) == (1, 1, 1)


def test_split_deterministic_disjoint_exhaustive():
    pool = make_pool(101)
    a, b = split_dataset(pool, (0.6, 0.066, 0.334), 9), split_dataset(pool, (0.6, 0.066, 0.334), 9)
    assert a.train.ids == b.train.ids and a.test.ids == b.test.ids
    ids = [set(a.train.ids), set(a.validation.ids), set(a.test.ids)]
    assert all(not (x & y) for x, y in itertools.combinations(ids, 2))
    assert set().union(*ids) == set(pool.ids)


def test_split_rejects_bad_fractions():
    with pytest.raises(InvalidInputError):
        split_dataset(make_pool(10), (0.5, 0.5, 0.1), 0)


# ---------------------------------------------------------------- nested subsets


def test_nested_single_element():
    pool = make_pool(1)
    assert sample_nested_subsets(pool, [1], 0)[1] == ("p0",)


def test_nested_full_scale_ladder():
    pool = make_pool(1329, size=32)
    sizes = [100, 250, 500, 750, 1000, 1300]
    ladder = sample_nested_subsets(pool, sizes, seed=2)
    for k in sizes:
        assert len(ladder[k]) == k == len(set(ladder[k]))
    for a, b in zip(sizes, sizes[1:]):
        assert set(ladder[a]) < set(ladder[b])


@settings(max_examples=100, deadline=None)
@given(
    n=st.integers(1, 60),
    sizes=st.lists(st.integers(1, 60), min_size=1, max_size=6, unique=True),
    seed=st.integers(0, 2**32 - 1),
)
def test_nested_property(n, sizes, seed):
    sizes = sorted(s for s in sizes if s <= n)
    if not sizes:
        return
    ladder = sample_nested_subsets(make_pool(n, size=32), sizes, seed)
    for a, b in zip(sizes, sizes[1:]):
        assert all(x in set(ladder[b]) for x in ladder[a])
    for k in sizes:
        assert len(ladder[k]) == k


def test_nested_too_large_raises():
    with pytest.raises(InvalidInputError):
        sample_nested_subsets(make_pool(3), [4], 0)


# ---------------------------------------------------------------- build_training_set


@pytest.fixture(scope="module")
def cell_inputs():
    positives = make_pool(600, prefix="m")
    negatives = make_pool(5000, Label.NORMAL, prefix="n", seed=1)
    synthetic = PatchPool(
        Patch(np.zeros((32, 32)), Label.MASS, Source.SYNTHETIC, f"s{i}") for i in range(750)
    )
    ladder = sample_nested_subsets(positives, [100, 500], seed=3)
    return positives, negatives, synthetic, ladder


def _counts(ts):
    real = sum(p.source == Source.REAL and p.label == Label.MASS for p in ts.pool)
    syn = sum(p.source == Source.SYNTHETIC for p in ts.pool)
    neg = sum(p.label == Label.NORMAL for p in ts.pool)
    return real, syn, neg


def test_training_set_gan_k100(cell_inputs):
    pos, neg, syn, ladder = cell_inputs
    ts = build_training_set(100, ladder, pos, neg, syn, StrategyId.GAN, 10, 1.5)
    assert _counts(ts) == (100, 150, 1000) and not ts.flip


def test_training_set_org_k500(cell_inputs):
    pos, neg, syn, ladder = cell_inputs
    ts = build_training_set(500, ladder, pos, neg, syn, StrategyId.ORG, 10, 1.5)
    assert _counts(ts) == (500, 0, 5000) and not ts.flip


def test_training_set_aug_org_only_flag_differs(cell_inputs):
    pos, neg, syn, ladder = cell_inputs
    org = build_training_set(100, ladder, pos, neg, syn, StrategyId.ORG, negative_seed=4)
    aug = build_training_set(100, ladder, pos, neg, syn, StrategyId.AUG_ORG, negative_seed=4)
    assert org.pool.ids == aug.pool.ids and aug.flip and not org.flip


@pytest.mark.parametrize("strategy", list(StrategyId))
@pytest.mark.parametrize("k", [100, 500])
def test_training_set_ratio_exact(cell_inputs, strategy, k):
    pos, neg, syn, ladder = cell_inputs
    real, _, negs = _counts(build_training_set(k, ladder, pos, neg, syn, strategy, 10, 1.5))
    assert negs == 10 * real


def test_training_set_negatives_nested(cell_inputs):
    pos, neg, syn, ladder = cell_inputs
    small = build_training_set(100, ladder, pos, neg, syn, StrategyId.ORG, negative_seed=8)
    big = build_training_set(500, ladder, pos, neg, syn, StrategyId.ORG, negative_seed=8)
    neg_ids = lambda ts: {p.id for p in ts.pool if p.label == Label.NORMAL}
    assert neg_ids(small) < neg_ids(big)


def test_training_set_insufficient_pools(cell_inputs):
    pos, neg, syn, ladder = cell_inputs
    with pytest.raises(InvalidInputError):
        build_training_set(500, ladder, pos, neg[:100], syn, StrategyId.ORG)
    with pytest.raises(InvalidInputError):
        build_training_set(500, ladder, pos, neg, syn[:10], StrategyId.GAN)


# ---------------------------------------------------------------- flips


def test_hflip_is_involution():
    p = make_pool(1)[0]
    assert flip_patch(flip_patch(p, True, False), True, False).same_as(p)
    assert flip_patch(flip_patch(p, True, True), True, True).same_as(p)


def test_constant_patch_flip_invariant():
    p = Patch(np.full((32, 32), 0.3), Label.MASS, id="c")
    for h, v in itertools.product([False, True], repeat=2):
        assert flip_patch(p, h, v).same_as(p)


def test_flip_preserves_label_and_source():
    p = Patch(np.random.default_rng(0).random((32, 32)), Label.NORMAL, Source.SYNTHETIC, "z")
    q = flip_augment(p, np.random.default_rng(1))
    assert (q.label, q.source, q.id) == (p.label, p.source, p.id)


def test_flip_outcome_frequencies():
    p = Patch(np.arange(16.0).reshape(4, 4) / 15.0, Label.MASS, id="a")
    outcomes = {
        (h, v): flip_patch(p, h, v).pixels.tobytes() for h, v in itertools.product([False, True], repeat=2)
    }
    lookup = {v: k for k, v in outcomes.items()}
    rng = np.random.default_rng(123)
    counts = dict.fromkeys(outcomes, 0)
    for _ in range(10_000):
        counts[lookup[flip_augment(p, rng).pixels.tobytes()]] += 1
    for c in counts.values():
        assert abs(c / 10_000 - 0.25) <= 0.02


def test_flip_batch_matches_per_sample_law():
    x = np.arange(2 * 16, dtype=np.float32).reshape(2, 1, 4, 4)
    out = flip_batch(x, np.random.default_rng(0))
    for a, b in zip(x, out):
        candidates = [a, a[..., ::-1], a[..., ::-1, :], a[..., ::-1, ::-1]]
        assert any(np.array_equal(b, c) for c in candidates)
