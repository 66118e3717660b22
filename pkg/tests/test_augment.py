import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acmnet.augment import (
    APPEARANCE_KINDS,
    APPEARANCE_PROBABILITIES,
    AppearanceTransformDescriptor,
    GroupKind,
    TransformGroup,
    apply_appearance_transform,
    apply_group_element,
    build_view_batch,
    compose,
    identity_descriptor,
    only,
    rotate90,
    sample_appearance_transform,
    sample_group_element,
    warp,
)
from acmnet.errors import DegenerateBatchError, ParameterError

TABLE_1 = {
    "planckian_jitter": 0.8,
    "color_jiggle": 0.5,
    "plasma_brightness": 0.5,
    "plasma_contrast": 0.3,
    "grayscale": 0.3,
    "box_blur": 0.5,
    "channel_shuffle": 0.5,
    "motion_blur": 0.3,
    "solarize": 0.5,
}


def rand_image(seed, size=16):
    return np.random.default_rng(seed).random((3, size, size)).astype(np.float32)


@pytest.fixture(scope="module")
def apply_rates():
    n = 100_000
    counts = dict.fromkeys(APPEARANCE_KINDS, 0)
    for s in range(n):
        for t in sample_appearance_transform(s).transforms:
            counts[t.kind] += t.applied
    return {k: c / n for k, c in counts.items()}


class TestAppearanceSampling:
    def test_table_order_and_probabilities(self):
        assert APPEARANCE_PROBABILITIES == TABLE_1
        assert list(APPEARANCE_KINDS) == list(TABLE_1)

    def test_deterministic(self):
        assert sample_appearance_transform(42) == sample_appearance_transform(42)

    @pytest.mark.parametrize("kind", list(TABLE_1))
    def test_apply_rate(self, apply_rates, kind):
        assert abs(apply_rates[kind] - TABLE_1[kind]) <= 0.01

    @given(st.integers(0, 2**63 - 1))
    @settings(max_examples=50)
    def test_param_ranges(self, seed):
        p = {t.kind: t.params for t in sample_appearance_transform(seed).transforms}
        assert 3000 <= p["planckian_jitter"]["temperature"] <= 15000
        for key in ("brightness", "contrast", "saturation"):
            assert 0.8 <= p["color_jiggle"][key] <= 1.2
        assert -0.1 <= p["color_jiggle"]["hue"] <= 0.1
        assert sorted(p["channel_shuffle"]["perm"]) == [0, 1, 2]
        assert 0.4 <= p["solarize"]["threshold"] <= 0.6
        assert p["box_blur"]["size"] == 3 and p["motion_blur"]["length"] == 5

    def test_json_round_trip(self):
        d = sample_appearance_transform(7)
        back = AppearanceTransformDescriptor.from_json(d.to_json())
        assert back == d
        x = rand_image(0)
        assert np.array_equal(apply_appearance_transform(x, d), apply_appearance_transform(x, back))


class TestAppearanceApply:
    def test_identity_descriptor(self):
        x = rand_image(1)
        assert np.array_equal(apply_appearance_transform(x, identity_descriptor()), x)

    def test_grayscale(self):
        y = apply_appearance_transform(rand_image(2), only("grayscale"))
        assert np.array_equal(y[0], y[1]) and np.array_equal(y[1], y[2])

    def test_channel_shuffle(self):
        x = rand_image(3)
        y = apply_appearance_transform(x, only("channel_shuffle", perm=[2, 0, 1]))
        for c, src in enumerate((2, 0, 1)):
            assert np.array_equal(y[c], x[src])

    def test_solarize(self):
        x = np.array([0.1, 0.45, 0.5, 0.9], dtype=np.float64).reshape(1, 2, 2).repeat(3, 0)
        y = apply_appearance_transform(x, only("solarize", threshold=0.5))
        np.testing.assert_allclose(y[0].ravel(), [0.1, 0.45, 0.5, 0.1])

    @pytest.mark.parametrize("seed", range(20))
    def test_range_shape_and_purity(self, seed):
        x = rand_image(seed, 24)
        d = sample_appearance_transform(seed)
        y = apply_appearance_transform(x, d)
        assert y.shape == x.shape and y.dtype == x.dtype
        assert y.min() >= 0 and y.max() <= 1
        assert np.array_equal(y, apply_appearance_transform(x, d))

    @pytest.mark.parametrize("kind", [k for k in TABLE_1 if not k.endswith("blur")])
    def test_delta_argmax_fixed(self, kind):
        x = np.zeros((3, 21, 21))
        x[:, 7, 12] = 0.35
        for seed in range(5):
            d = sample_appearance_transform(seed)
            for t in d.transforms:
                t.applied = t.kind == kind
            y = apply_appearance_transform(x, d)
            lum = y.sum(axis=0)
            assert np.unravel_index(np.argmax(lum), lum.shape) == (7, 12)

    @pytest.mark.parametrize("kind", ["box_blur", "motion_blur"])
    def test_blur_centroid(self, kind):
        x = np.zeros((3, 21, 21))
        x[:, 9, 11] = 1.0
        rr, cc = np.mgrid[:21, :21]
        for seed in range(10):
            d = sample_appearance_transform(seed)
            for t in d.transforms:
                t.applied = t.kind == kind
            y = apply_appearance_transform(x, d)[0]
            cy = (y * rr).sum() / y.sum()
            cx = (y * cc).sum() / y.sum()
            assert np.hypot(cy - 9, cx - 11) < 1.0


class TestRotate90:
    def test_two_by_two(self):
        x = np.array([[["a", "b"], ["c", "d"]]])
        assert rotate90(x, 1)[0].tolist() == [["b", "d"], ["a", "c"]]

    def test_convention(self):
        x = rand_image(4, 5)
        y = rotate90(x, 1)
        h = x.shape[1]
        for r in range(h):
            for c in range(h):
                assert np.array_equal(y[:, r, c], x[:, c, h - 1 - r])

    def test_identity(self):
        x = rand_image(5)
        assert np.array_equal(rotate90(x, 0), x)

    def test_non_square(self):
        with pytest.raises(ParameterError):
            rotate90(np.zeros((3, 4, 5)), 1)

    @given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 10_000))
    def test_composition_law(self, a, b, seed):
        x = rand_image(seed, 7)
        assert np.array_equal(rotate90(rotate90(x, a), b), rotate90(x, (a + b) % 4))

    def test_group_laws_on_100_images(self):
        for seed in range(100):
            x = rand_image(seed, 9)
            y = x
            for _ in range(4):
                y = rotate90(y, 1)
            assert np.array_equal(y, x)
            for k in range(4):
                assert np.array_equal(rotate90(rotate90(x, k), (4 - k) % 4), x)


class TestGroups:
    def test_c4_definition(self):
        g = TransformGroup(GroupKind.C4_ROTATIONS)
        assert g.class_count == 4
        assert [e["k"] for e in g.elements] == [0, 1, 2, 3]

    def test_c4_uniform(self):
        g = TransformGroup()
        labels = np.array([sample_group_element(g, s)[1] for s in range(40_000)])
        freq = np.bincount(labels, minlength=4) / len(labels)
        assert np.all(np.abs(freq - 0.25) <= 0.01)

    @pytest.mark.parametrize("kind", list(GroupKind))
    def test_sampling_deterministic(self, kind):
        g = TransformGroup(kind)
        assert sample_group_element(g, 99) == sample_group_element(g, 99)

    @pytest.mark.parametrize("kind", list(GroupKind))
    def test_element_zero_is_identity(self, kind):
        g = TransformGroup(kind)
        x = rand_image(6, 20).astype(np.float64)
        assert np.max(np.abs(apply_group_element(x, g, 0) - x)) < 1e-6
        np.testing.assert_allclose(g.matrix(0), np.eye(3), atol=1e-15)

    @pytest.mark.parametrize("kind", list(GroupKind))
    def test_closure(self, kind):
        g = TransformGroup(kind)
        for a in range(4):
            for b in range(4):
                m = compose(g.matrix(a), g.matrix(b))
                assert m[2, 2] == 1.0
                if kind is not GroupKind.PROJECTIVE_2D:
                    np.testing.assert_allclose(m[2], [0, 0, 1], atol=1e-12)
                if kind in (GroupKind.C4_ROTATIONS, GroupKind.ROTATIONS_2D):
                    np.testing.assert_allclose(m[:2, :2] @ m[:2, :2].T, np.eye(2), atol=1e-12)

    def test_c4_matrix_warp_matches_rotate90(self):
        g = TransformGroup()
        x = rand_image(7, 12).astype(np.float64)
        for k in range(4):
            np.testing.assert_allclose(warp(x, g.matrix(k)), rotate90(x, k), atol=1e-9)

    def test_warp_composition(self):
        g = TransformGroup(GroupKind.ROTATIONS_2D)
        x = np.zeros((1, 32, 32))
        x[0, 12:20, 12:20] = 1.0
        two = warp(warp(x, g.matrix(1)), g.matrix(1))
        direct = warp(x, compose(g.matrix(1), g.matrix(1)))
        assert np.mean(np.abs(two - direct)) < 0.02


class TestViewBatch:
    def test_counts_and_labels(self):
        vb = build_view_batch([rand_image(0), rand_image(1)], rng_seed=3)
        assert vb.contrastive.shape[0] == 4
        assert vb.predictive.shape[0] == 8
        assert vb.labels.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]

    def test_originals_unmodified(self):
        imgs = [rand_image(i) for i in range(4)]
        vb = build_view_batch(imgs, rng_seed=5)
        for i, x in enumerate(imgs):
            assert np.array_equal(vb.contrastive[2 * i], x)
            assert np.array_equal(vb.predictive[4 * i], x)
            for k in range(4):
                assert np.array_equal(vb.predictive[4 * i + k], rotate90(x, k))
            assert np.array_equal(vb.contrastive[2 * i + 1],
                                  apply_appearance_transform(x, vb.descriptors[i]))

    def test_deterministic_and_schedule_independent(self):
        imgs = [rand_image(i) for i in range(6)]
        a = build_view_batch(imgs, rng_seed=11)
        b = build_view_batch(imgs, rng_seed=11, jobs=3)
        assert np.array_equal(a.contrastive, b.contrastive)
        assert np.array_equal(a.predictive, b.predictive)

    def test_balanced_labels(self):
        vb = build_view_batch([rand_image(i) for i in range(5)], rng_seed=0)
        assert np.bincount(vb.labels).tolist() == [5, 5, 5, 5]

    def test_single_image_rejected(self):
        with pytest.raises(DegenerateBatchError, match="NT-Xent"):
            build_view_batch([rand_image(0)], rng_seed=0)
