import numpy as np
import pytest

from errors import ValidationError
from masks import bucket_of, hole_ratio
from synthetic_data import (
    BatchPrefetcher,
    ImageSample,
    build_dataset,
    build_eval_set,
    gen_synthetic_image,
    sample_batch,
)


@pytest.fixture(scope="module")
def dataset():
    return build_dataset(6, 32, 32, seed=2)


class TestImages:
    def test_seeded(self):
        np.testing.assert_array_equal(gen_synthetic_image(16, 24, 4).pixels,
                                      gen_synthetic_image(16, 24, 4).pixels)

    def test_range_and_dims(self):
        img = gen_synthetic_image(16, 24, 4)
        assert img.pixels.shape == (3, 16, 24)
        assert img.hw == (16, 24)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0
        assert img.provenance == "synthetic(4)"

    def test_seeds_give_different_images(self, dataset):
        pixels = [s.pixels for s in dataset]
        for i in range(len(pixels)):
            for j in range(i + 1, len(pixels)):
                assert np.abs(pixels[i] - pixels[j]).mean() > 1e-3

    def test_images_are_not_flat(self, dataset):
        for sample in dataset:
            assert sample.pixels.std() > 0.01

    def test_sample_validation(self):
        with pytest.raises(ValidationError):
            ImageSample(np.zeros((1, 4, 4)), "gray")
        with pytest.raises(ValidationError):
            ImageSample(np.full((3, 4, 4), 1.5), "bright")


class TestBatches:
    def test_keyed_on_seed_and_iteration(self, dataset):
        a = sample_batch(dataset, 3, iteration=17, seed=5)
        b = sample_batch(dataset, 3, iteration=17, seed=5)
        c = sample_batch(dataset, 3, iteration=18, seed=5)
        np.testing.assert_array_equal(a.gt, b.gt)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.buckets == b.buckets
        assert not np.array_equal(a.mask, c.mask)

    def test_dims_and_input(self, dataset):
        batch = sample_batch(dataset, 4, iteration=0, seed=1)
        assert batch.gt.shape == (4, 3, 32, 32)
        assert batch.mask.shape == (4, 1, 32, 32)
        np.testing.assert_array_equal(batch.image_in, batch.gt * batch.mask)
        assert all(1 <= b <= 6 for b in batch.buckets)

    def test_unaugmented_masks_match_bucket(self, dataset):
        batch = sample_batch(dataset, 4, iteration=3, seed=1, augment=False)
        for mask, bucket in zip(batch.mask, batch.buckets):
            assert bucket_of(hole_ratio(mask[0])) == bucket


class TestEvalSet:
    def test_count_per_bucket(self):
        cases = build_eval_set(2, seed=0, h=32, w=32)
        labels = [c.bucket for c in cases]
        assert len(cases) == 12
        assert labels[:2] == ["0.01-0.1", "0.01-0.1"]
        assert labels[-1] == "0.5-0.6"

    def test_regular_row(self):
        cases = build_eval_set(1, seed=0, h=32, w=32, regular=True)
        assert cases[-1].bucket == "Regular"
        assert hole_ratio(cases[-1].mask[0, 0]) == 0.25

    def test_seeded(self):
        a = build_eval_set(1, seed=3, h=32, w=32)
        b = build_eval_set(1, seed=3, h=32, w=32)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.gt, y.gt)
            np.testing.assert_array_equal(x.mask, y.mask)

    def test_held_out_from_training_images(self, dataset):
        for case in build_eval_set(1, seed=2, h=32, w=32):
            for sample in dataset:
                assert not np.array_equal(case.gt[0], sample.pixels)


class TestBatchPrefetcher:
    def test_iteration_order(self):
        with BatchPrefetcher(lambda i: i * 10, 3, 9, depth=2) as batches:
            assert list(batches) == [30, 40, 50, 60, 70, 80]

    def test_empty_range(self):
        with BatchPrefetcher(lambda i: i, 5, 5) as batches:
            assert list(batches) == []

    def test_producer_error_reaches_consumer(self):
        def make(i):
            if i == 2:
                raise RuntimeError("bad batch")
            return i

        seen = []
        with pytest.raises(RuntimeError, match="bad batch"):
            with BatchPrefetcher(make, 0, 5) as batches:
                for item in batches:
                    seen.append(item)
        assert seen == [0, 1]

    def test_early_exit_stops_producer(self):
        prefetcher = BatchPrefetcher(lambda i: i, 0, 1000, depth=1)
        with prefetcher as batches:
            for item in batches:
                if item == 3:
                    break
        assert prefetcher._thread is None
