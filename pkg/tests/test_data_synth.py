# tests/test_data_synth.py
import os

import numpy as np
import pytest
from PIL import Image

from data_synth import (TARGET_GAP, SceneSpec, Target, generate, generation_digest, load_image, load_manifest,
                        load_pair, make_dataset, random_spec, read_manifest, save_sample, split_tags, write_dataset)
from errors import ConfigError, DataError
from helpers.image_io import write_gray


def neighbourhood(img, x, y):
    return img[max(y - 1, 0):y + 2, max(x - 1, 0):x + 2]


class TestGenerate:
    def test_no_targets_empty_mask(self):
        sample = generate(SceneSpec(height=16, width=16, targets=[]))
        assert sample.image.shape == (3, 16, 16) and sample.mask.shape == (1, 16, 16)
        assert not sample.mask.any()

    def test_radius_two_mask_has_thirteen_pixels(self):
        sample = generate(SceneSpec(height=20, width=20, targets=[Target(10, 10, 2, 0.5)]))
        assert int(sample.mask.sum()) == 13
        assert sample.mask[0, 10, 12] == 1 and sample.mask[0, 11, 12] == 0

    def test_image_in_unit_range_and_channels_replicated(self):
        sample = generate(SceneSpec(targets=[Target(30, 30, 3, 0.9)], background_level=0.35))
        assert sample.image.min() >= 0 and sample.image.max() <= 1
        np.testing.assert_array_equal(sample.image[0], sample.image[2])

    def test_same_spec_same_pixels(self):
        spec = SceneSpec(targets=[Target(20, 12, 2, 0.4)], clutter=3, seed=9)
        np.testing.assert_array_equal(generate(spec).image, generate(spec).image)

    def test_target_centres_are_strict_maxima(self):
        dataset = make_dataset(12, size=48, difficulty=0.9, seed=4)
        for sample in dataset.samples:
            img = sample.image[0]
            for t in sample.spec.targets:
                window = neighbourhood(img, t.x, t.y)
                assert np.sum(window >= img[t.y, t.x]) == 1

    @pytest.mark.parametrize("target,message", [
        (Target(70, 3, 2, 0.5), "outside"),
        (Target(3, 3, 6, 0.5), "radius"),
        (Target(3, 3, 2, 0.01), "contrast"),
    ])
    def test_invalid_targets(self, target, message):
        with pytest.raises(ConfigError, match=message):
            generate(SceneSpec(targets=[target]))


class TestRandomScenes:
    def test_targets_are_separated(self, rng):
        for _ in range(20):
            spec = random_spec(rng, 64, 0.5)
            assert 1 <= len(spec.targets) <= 3
            for i, a in enumerate(spec.targets):
                for b in spec.targets[i + 1:]:
                    assert max(abs(a.x - b.x), abs(a.y - b.y)) > a.radius + b.radius + TARGET_GAP

    def test_rejects_bad_arguments(self, rng):
        with pytest.raises(ConfigError):
            random_spec(rng, 8)
        with pytest.raises(ConfigError):
            random_spec(rng, 64, difficulty=1.5)

    def test_dataset_is_deterministic(self):
        a, b = make_dataset(3, size=32, seed=1), make_dataset(3, size=32, seed=1)
        for x, y in zip(a.samples, b.samples):
            np.testing.assert_array_equal(x.image, y.image)
        assert a.splits == b.splits

    def test_eighty_twenty_split(self):
        dataset = make_dataset(10, size=32, seed=2)
        assert dataset.splits.count("train") == 8 and dataset.splits.count("test") == 2
        assert len(dataset.subset("test")) == 2
        assert split_tags(10, 2) == dataset.splits

    def test_digest_depends_on_every_argument(self):
        base = generation_digest(10, 64, 0.3, 0)
        assert len({base, generation_digest(11, 64, 0.3, 0), generation_digest(10, 32, 0.3, 0),
                    generation_digest(10, 64, 0.4, 0), generation_digest(10, 64, 0.3, 1)}) == 5


class TestFiles:
    def test_written_dataset_reloads(self, tmp_path):
        dataset = make_dataset(5, size=32, seed=3)
        manifest = write_dataset(dataset, str(tmp_path / "data"), "abc123")
        rows = read_manifest(manifest)
        assert [r[2] for r in rows] == dataset.splits
        loaded = load_manifest(manifest)
        for original, again in zip(dataset.samples, loaded):
            np.testing.assert_array_equal(again.mask, original.mask)
            np.testing.assert_allclose(again.image, original.image, atol=0.5 / 255 + 1e-6)
        assert len(load_manifest(manifest, "test")) == 1

    def test_manifest_paths_are_relative(self, tmp_path):
        manifest = write_dataset(make_dataset(2, size=32), str(tmp_path / "d"), "x")
        lines = open(manifest, encoding="utf-8").read().splitlines()
        assert lines[0].startswith("# tapm-net")
        assert all(not os.path.isabs(line.split("\t")[0]) for line in lines[1:])

    def test_png_carries_provenance(self, tmp_path):
        image_path, _ = save_sample(make_dataset(1, size=32).samples[0], str(tmp_path), header="# tapm-net test")
        with Image.open(image_path) as img:
            assert img.text["provenance"] == "# tapm-net test"

    def test_mismatched_mask_size(self, tmp_path):
        write_gray(str(tmp_path / "i.png"), np.zeros((16, 16), dtype=np.uint8))
        write_gray(str(tmp_path / "m.png"), np.zeros((16, 8), dtype=np.uint8))
        with pytest.raises(DataError):
            load_pair(str(tmp_path / "i.png"), str(tmp_path / "m.png"))

    def test_mask_binarised_at_half(self, tmp_path):
        write_gray(str(tmp_path / "i.png"), np.full((4, 4), 100, dtype=np.uint8))
        write_gray(str(tmp_path / "m.png"), np.array([[0, 127, 128, 255]] * 4, dtype=np.uint8))
        sample = load_pair(str(tmp_path / "i.png"), str(tmp_path / "m.png"))
        np.testing.assert_array_equal(sample.mask[0, 0], [0, 0, 1, 1])
        np.testing.assert_allclose(load_image(str(tmp_path / "i.png"))[:, 0, 0], 100 / 255, rtol=1e-6)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            read_manifest(str(tmp_path / "none.tsv"))

    def test_malformed_manifest_row(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("a.png\tb.png\tvalidation\n", encoding="utf-8")
        with pytest.raises(DataError):
            read_manifest(str(path))
