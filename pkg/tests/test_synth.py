import numpy as np
import pytest

from compocc.errors import DimensionMismatch, InvalidParameter, OccluderInfeasible
from compocc.features import LEVEL_BOUNDS
from compocc.generative import SIMPLEX_FLOOR
from compocc.synth import (
    apply_occluder,
    make_world,
    oracle_log_likelihood,
    sample_background_image,
    sample_image,
)
from compocc.vmf import sample_vmf


def default_world(seed=7, **kw):
    args = dict(num_classes=2, mixtures_per_class=2, k=6, height=6, width=6,
                channels=8, concentration=20.0, seed=seed)
    args.update(kw)
    return make_world(**args)


class TestMakeWorld:
    def test_deterministic(self):
        a = default_world()
        b = default_world()
        assert np.array_equal(a.dictionary.means, b.dictionary.means)
        for ca, cb in zip(a.class_models, b.class_models):
            for fa, fb in zip(ca, cb):
                assert np.array_equal(fa.weights, fb.weights)
        assert np.array_equal(a.white_direction, b.white_direction)
        assert np.array_equal(a.texture_palette, b.texture_palette)

    def test_single_class_single_mixture(self):
        world = default_world(num_classes=1, mixtures_per_class=1)
        assert world.num_classes == 1 and world.mixtures_per_class == 1

    def test_template_rows_on_simplex(self):
        world = default_world()
        for comps in world.class_models:
            for fg in comps:
                assert np.abs(fg.weights.sum(axis=-1) - 1.0).max() <= 1e-9
                assert fg.weights.min() >= SIMPLEX_FLOOR - 1e-15

    def test_pairwise_cosine_cap(self):
        world = default_world(k=8, max_pairwise_cosine=0.5)
        gram = world.dictionary.means @ world.dictionary.means.T
        np.fill_diagonal(gram, 0.0)
        assert gram.max() <= 0.5 + 1e-9

    def test_shared_positions_common_across_templates(self):
        world = default_world(shared_position_fraction=0.5)
        stacked = np.stack(
            [fg.weights.reshape(-1, 6) for comps in world.class_models for fg in comps]
        )
        spread = np.abs(stacked - stacked[0]).max(axis=(0, 2))
        n_shared = (spread == 0.0).sum()
        assert n_shared == round(0.5 * 36)

    def test_parameter_validation(self):
        with pytest.raises(InvalidParameter):
            default_world(channels=2)
        with pytest.raises(InvalidParameter):
            default_world(k=1)
        with pytest.raises(InvalidParameter):
            default_world(shared_position_fraction=1.0)


class TestSampleImage:
    def test_concentration_limit_snaps_to_means(self):
        world = default_world(concentration=1e6)
        fmap = sample_image(world, 0, 1, 3)
        cos = fmap.data.astype(np.float64) @ world.dictionary.means.T
        assert cos.max(axis=-1).min() >= 0.999

    def test_component_frequencies_match_weights(self):
        world = default_world(height=2, width=2, k=4, concentration=1e6,
                              shared_position_fraction=0.0)
        counts = np.zeros((2, 2, 4))
        n = 10_000
        rng = np.random.default_rng(0)
        for _ in range(n):
            fmap = sample_image(world, 0, 0, rng)
            comp = np.argmax(fmap.data.astype(np.float64) @ world.dictionary.means.T, axis=-1)
            for i in range(2):
                for j in range(2):
                    counts[i, j, comp[i, j]] += 1
        freq = counts / n
        tv = 0.5 * np.abs(freq - world.class_models[0][0].weights).sum(axis=-1)
        assert tv.max() <= 0.05

    def test_seed_reproducible(self):
        world = default_world()
        a = sample_image(world, 1, 0, 123)
        b = sample_image(world, 1, 0, 123)
        assert np.array_equal(a.data, b.data)

    def test_all_positions_active(self):
        world = default_world()
        assert sample_image(world, 0, 0, 1).active_count == 36


class TestApplyOccluder:
    @pytest.mark.parametrize("level", ["L1", "L2", "L3"])
    def test_fraction_within_level_bounds(self, level):
        world = default_world(height=10, width=10)
        lo, hi = LEVEL_BOUNDS[level]
        for seed in range(10):
            fmap = sample_image(world, 0, 0, seed)
            _, mask = apply_occluder(fmap, world, "noise", level, 100 + seed, exclude_class=0)
            frac = mask.occluded_fraction
            assert lo <= frac <= hi if level == "L3" else lo <= frac < hi

    def test_white_positions_identical(self):
        world = default_world()
        fmap = sample_image(world, 0, 0, 5)
        occluded, mask = apply_occluder(fmap, world, "white", "L2", 7, exclude_class=0)
        rows = occluded.data[mask.occluded]
        assert np.array_equal(rows, np.tile(rows[0], (rows.shape[0], 1)))
        np.testing.assert_allclose(
            rows[0], world.white_direction.astype(np.float32), atol=1e-7
        )

    @pytest.mark.parametrize("kind", ["white", "noise", "texture", "object"])
    def test_outside_mask_untouched(self, kind):
        world = default_world()
        fmap = sample_image(world, 1, 1, 9)
        occluded, mask = apply_occluder(fmap, world, kind, "L1", 11, exclude_class=1)
        assert np.array_equal(occluded.data[~mask.occluded], fmap.data[~mask.occluded])
        assert np.array_equal(occluded.active, fmap.active)

    def test_texture_uses_palette(self):
        world = default_world(concentration=400.0)
        fmap = sample_image(world, 0, 0, 13)
        occluded, mask = apply_occluder(fmap, world, "texture", "L3", 17, exclude_class=0)
        cos = occluded.data[mask.occluded].astype(np.float64) @ world.texture_palette.T
        # spread is concentration/4 = 100, so samples hug their palette direction
        assert cos.max(axis=1).min() > 0.8

    def test_infeasible_level_raises(self):
        world = default_world(height=1, width=2)
        fmap = sample_image(world, 0, 0, 19)
        with pytest.raises(OccluderInfeasible):
            apply_occluder(fmap, world, "noise", "L1", 23, exclude_class=0)

    def test_deterministic(self):
        world = default_world()
        fmap = sample_image(world, 0, 0, 29)
        a, am = apply_occluder(fmap, world, "object", "L2", 31, exclude_class=0)
        b, bm = apply_occluder(fmap, world, "object", "L2", 31, exclude_class=0)
        assert np.array_equal(a.data, b.data)
        assert np.array_equal(am.occluded, bm.occluded)

    def test_unknown_type_rejected(self):
        world = default_world()
        fmap = sample_image(world, 0, 0, 37)
        with pytest.raises(InvalidParameter):
            apply_occluder(fmap, world, "blur", "L1", 41)

    def test_wrong_lattice_rejected(self):
        world = default_world()
        other = default_world(height=4, width=4)
        fmap = sample_image(other, 0, 0, 43)
        with pytest.raises(DimensionMismatch):
            apply_occluder(fmap, world, "white", "L1", 47)


class TestOracle:
    def test_empty_map_zero(self):
        from compocc.features import normalize_features

        world = default_world()
        fmap = normalize_features(np.zeros((2, 2, 8)))
        assert oracle_log_likelihood(fmap, world.background) == 0.0

    def test_background_dispatch(self):
        world = default_world()
        fmap = sample_image(world, 0, 0, 53)
        from compocc.generative import (
            estimate_vmf_background,
            generative_log_likelihood,
        )
        from scipy.special import logsumexp

        kernels = 20.0 * (fmap.data.astype(np.float64) @ world.dictionary.means.T)
        expected = logsumexp(np.log(world.background.weights) + kernels, axis=-1).sum()
        assert oracle_log_likelihood(fmap, world.background) == pytest.approx(
            expected, abs=1e-9
        )

    def test_unsupported_type_rejected(self):
        world = default_world()
        fmap = sample_image(world, 0, 0, 59)
        with pytest.raises(InvalidParameter):
            oracle_log_likelihood(fmap, {"not": "a model"})


class TestBackgroundImages:
    def test_deterministic_and_active(self):
        world = default_world()
        a = sample_background_image(world, 61)
        b = sample_background_image(world, 61)
        assert np.array_equal(a.data, b.data)
        assert a.active_count == 36
