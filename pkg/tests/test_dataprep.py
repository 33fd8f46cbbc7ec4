import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fgtune import dataprep
from fgtune.dataprep import (PALETTE, AugmentConfig, InstanceSample, SubjectSpec, Tag, build_class_prompt,
                             build_instance_prompt, generate_synthetic_dataset, replace_background,
                             resize_foreground, sample_training_batch)

SPEC = SubjectSpec()


def test_subject_spec_validation():
    with pytest.raises(ValueError):
        SubjectSpec(instance_token="krn", background_placeholder="krn")
    with pytest.raises(ValueError):
        SubjectSpec(class_token=" ")


class TestSyntheticDataset:
    def test_masks_cover_sprite(self, dataset):
        instances, classes = dataset
        sprite, mask = dataprep.render_sprite(dataprep.INSTANCE_IDENTITY)
        assert len(instances) == 4 and len(classes) == 16
        for s in instances:
            assert np.array_equal(s.mask, mask)
            assert np.array_equal(s.image[mask], sprite[mask])

    def test_deterministic(self):
        a = generate_synthetic_dataset(42, 4, 8)
        b = generate_synthetic_dataset(42, 4, 8)
        for x, y in zip(a[0], b[0]):
            assert x.image.tobytes() == y.image.tobytes() and x.prompt == y.prompt
        for x, y in zip(a[1], b[1]):
            assert x.image.tobytes() == y.image.tobytes()

    def test_class_images_are_other_sprites(self, dataset):
        _, classes = dataset
        assert all(c.identity != dataprep.INSTANCE_IDENTITY for c in classes)
        assert all(c.prompt == "a photo of toy" for c in classes)

    def test_evaluation_pair_count(self, dataset):
        instances, _ = dataset
        assert 50 * len(instances) == 200

    def test_round_trip_on_disk(self, dataset, tmp_path):
        dataprep.save_dataset(tmp_path, *dataset, seed=42)
        inst, cls = dataprep.load_dataset(tmp_path)
        assert len(inst) == 4 and len(cls) == 16
        assert np.array_equal(inst[0].mask, dataset[0][0].mask)
        assert np.abs(inst[0].image - dataset[0][0].image).max() <= 0.5 / 255 + 1e-7
        assert inst[0].prompt == dataset[0][0].prompt


class TestPrompts:
    def test_recolored_prompt(self):
        assert build_instance_prompt(SPEC, Tag("recolored", "white")) == "a photo of sks toy, white background"

    def test_original_uses_placeholder(self):
        p = build_instance_prompt(SPEC, Tag())
        assert p == "a photo of sks toy, krn background"
        assert not any(c in p.split() for c in PALETTE)

    @pytest.mark.parametrize("tag", [Tag(), Tag("recolored", "red"), Tag("recolored_resized", "blue", 0.7)])
    def test_tokens_once(self, tag):
        words = build_instance_prompt(SPEC, tag).replace(",", "").split()
        assert words.count("sks") == 1 and words.count("toy") == 1

    def test_class_prompt(self):
        assert build_class_prompt(SubjectSpec(class_token="toy")) == "a photo of toy"
        assert build_class_prompt(SPEC) == build_class_prompt(SPEC)

    @given(st.text(alphabet="abcdefghij", min_size=1, max_size=6), st.text(alphabet="klmnop", min_size=1, max_size=6))
    def test_class_prompt_never_has_instance_token(self, v, c):
        spec = SubjectSpec(instance_token="zz" + v, class_token=c)
        assert spec.instance_token not in build_class_prompt(spec).split()


def _sample(image, mask):
    return InstanceSample(image.astype(np.float32), mask, "p")


class TestReplaceBackground:
    def test_full_mask_unchanged(self, rng):
        img = rng.random((64, 64, 3)).astype(np.float32)
        out = replace_background(_sample(img, np.ones((64, 64), bool)), "red")
        assert np.array_equal(out.image, img)

    def test_empty_mask_constant(self, rng):
        img = rng.random((64, 64, 3)).astype(np.float32)
        out = replace_background(_sample(img, np.zeros((64, 64), bool)), "blue")
        assert np.all(out.image == np.asarray(PALETTE["blue"], np.float32))

    def test_tag_and_prompt(self, dataset):
        out = replace_background(dataset[0][0], "green")
        assert out.tag == Tag("recolored", "green")
        assert out.prompt.endswith("green background")

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(sorted(PALETTE)))
    def test_foreground_bit_identical(self, seed, color):
        r = np.random.default_rng(seed)
        img = r.random((64, 64, 3)).astype(np.float32)
        mask = r.random((64, 64)) < 0.4
        out = replace_background(_sample(img, mask), color)
        assert out.image[mask].tobytes() == img[mask].tobytes()
        assert np.all(out.image[~mask] == np.asarray(PALETTE[color], np.float32))


class TestResize:
    def test_identity_scale(self, dataset):
        s = replace_background(dataset[0][0], "white")
        out = resize_foreground(s, 1.0)
        assert np.abs(out.image - s.image).max() <= 1 / 255
        assert np.array_equal(out.mask, s.mask)

    def test_half_scale_area(self, dataset):
        s = replace_background(dataset[0][0], "black")
        out = resize_foreground(s, 0.5)
        ratio = out.mask.sum() / s.mask.sum()
        assert abs(ratio - 0.25) <= 0.05

    @pytest.mark.parametrize("scale", [0.5, 0.6, 0.75, 0.9])
    def test_mean_color_preserved(self, dataset, scale):
        s = replace_background(dataset[0][0], "gray")
        out = resize_foreground(s, scale)
        assert np.abs(out.image[out.mask].mean(0) - s.image[s.mask].mean(0)).max() <= 0.02

    def test_background_stays_monotone(self, dataset):
        out = resize_foreground(replace_background(dataset[0][0], "red"), 0.7)
        assert np.all(out.image[~out.mask] == np.asarray(PALETTE["red"], np.float32))
        assert out.tag == Tag("recolored_resized", "red", 0.7)

    @pytest.mark.parametrize("scale", [0.49, 1.01])
    def test_range(self, dataset, scale):
        with pytest.raises(ValueError):
            resize_foreground(replace_background(dataset[0][0], "red"), scale)

    def test_needs_recolored(self, dataset):
        with pytest.raises(ValueError):
            resize_foreground(dataset[0][0], 0.8)


class TestBatchSampling:
    def test_proportions(self, dataset):
        rng = np.random.default_rng(42)
        kinds = [sample_training_batch(*dataset, rng)[0].tag.kind for _ in range(10_000)]
        recolored = np.mean([k != "original" for k in kinds])
        resized = np.mean([k == "recolored_resized" for k in kinds])
        assert abs(recolored - 0.66) <= 0.02
        # binomial oracle: p = 0.66 * 0.15, 10k draws, sd ~ 0.003
        assert abs(resized - 0.66 * 0.15) <= 0.01

    def test_seeded(self, dataset):
        a = [sample_training_batch(*dataset, np.random.default_rng(7))[0].prompt for _ in range(1)]
        r1, r2 = np.random.default_rng(7), np.random.default_rng(7)
        s1 = [sample_training_batch(*dataset, r1) for _ in range(50)]
        s2 = [sample_training_batch(*dataset, r2) for _ in range(50)]
        assert a
        for (i1, c1), (i2, c2) in zip(s1, s2):
            assert i1.image.tobytes() == i2.image.tobytes() and i1.prompt == i2.prompt and c1 is c2

    def test_prompt_tag_consistency(self, dataset):
        rng = np.random.default_rng(3)
        for _ in range(300):
            inst, _ = sample_training_batch(*dataset, rng)
            words = set(inst.prompt.replace(",", " ").split())
            colors = words & set(PALETTE)
            if inst.tag.recolored:
                assert colors == {inst.tag.color}
            else:
                assert not colors

    def test_no_augmentation(self, dataset):
        rng = np.random.default_rng(0)
        cfg = AugmentConfig(proportion=0.0)
        assert all(sample_training_batch(*dataset, rng, cfg)[0].tag.kind == "original" for _ in range(200))

    def test_empty(self):
        with pytest.raises(ValueError):
            sample_training_batch([], [], np.random.default_rng(0))


def test_threshold_masker_on_monotone_scene(dataset):
    s = replace_background(dataset[0][0], "white")
    mask = dataprep.ThresholdMasker()(s.image)
    assert (mask == s.mask).mean() > 0.98
