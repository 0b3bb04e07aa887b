import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from csranet.data import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    RESCUENET_ID_MAP,
    DatasetManifest,
    LabelVocabulary,
    ManifestError,
    Sample,
    convert_masks,
    derive_labels_from_mask,
    load_id_map,
    load_image,
    load_images,
    load_manifest,
    preprocess_and_augment,
    resolve_id_map,
    sample_rng,
    split_dataset,
    write_manifest,
)


def write_png(path, array):
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)
    return path


@pytest.fixture
def three_images(tmp_path):
    for name in ("a.png", "b.png", "c.png"):
        write_png(tmp_path / name, np.zeros((4, 4, 3)))
    return tmp_path


def make_manifest(n, c=2):
    vocab = LabelVocabulary(tuple(f"k{j}" for j in range(c)))
    return DatasetManifest(vocab, [Sample(f"img{i}.png", np.zeros(c, dtype=np.int8)) for i in range(n)])


class TestManifest:
    def test_parses_labels(self, three_images):
        path = three_images / "m.csv"
        path.write_text("image,x,y,z\na.png,1,0,1\nb.png,0,1,0\nc.png,1,1,0\n")
        m = load_manifest(path)
        assert m.vocabulary.names == ("x", "y", "z")
        np.testing.assert_array_equal(m.labels, [[1, 0, 1], [0, 1, 0], [1, 1, 0]])
        assert [s.image.name for s in m.samples] == ["a.png", "b.png", "c.png"]

    def test_empty_manifest_warns(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("image,x,y\n")
        with pytest.warns(UserWarning, match="no samples"):
            m = load_manifest(path)
        assert len(m) == 0 and m.labels.shape == (0, 2)

    def test_non_binary_cell_named(self, three_images):
        path = three_images / "m.csv"
        path.write_text("image,x,y\na.png,1,0\nb.png,0,2\n")
        with pytest.raises(ManifestError, match=r":3: column 'y' has non-binary value '2'"):
            load_manifest(path)

    def test_duplicate_image_rejected(self, three_images):
        path = three_images / "m.csv"
        path.write_text("image,x\na.png,1\na.png,0\n")
        with pytest.raises(ManifestError, match="duplicate image"):
            load_manifest(path)

    def test_missing_images_listed_in_full(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("image,x\nmissing1.png,1\nmissing2.png,0\n")
        with pytest.raises(ManifestError, match="2 referenced image") as err:
            load_manifest(path)
        assert "missing1.png" in str(err.value) and "missing2.png" in str(err.value)

    def test_vocabulary_mismatch(self, three_images):
        path = three_images / "m.csv"
        path.write_text("image,x,y\na.png,1,0\n")
        with pytest.raises(ManifestError, match="do not match"):
            load_manifest(path, vocabulary=LabelVocabulary(("y", "x")))

    @pytest.mark.parametrize("header", ["path,x\n", "image\n", "image,x,x\n"])
    def test_bad_header(self, tmp_path, header):
        path = tmp_path / "m.csv"
        path.write_text(header)
        with pytest.raises(ManifestError):
            load_manifest(path)

    def test_round_trip(self, three_images):
        path = three_images / "m.csv"
        text = "image,x,y,z\nc.png,1,0,1\na.png,0,1,0\nb.png,1,1,0\n"
        path.write_text(text)
        out = three_images / "copy.csv"
        write_manifest(load_manifest(path), out)
        assert out.read_text() == text
        again = load_manifest(out)
        np.testing.assert_array_equal(again.labels, load_manifest(path).labels)


class TestMaskLabels:
    id_map = {0: None, 3: 3, 5: 1}

    def test_background_only(self):
        assert not derive_labels_from_mask(np.zeros((20, 20)), self.id_map, 4).any()

    def test_threshold_inclusive(self):
        mask = np.zeros((20, 20), dtype=np.uint8)
        mask.flat[:100] = 3
        np.testing.assert_array_equal(derive_labels_from_mask(mask, self.id_map, 4, 50), [0, 0, 0, 1])
        np.testing.assert_array_equal(derive_labels_from_mask(mask, self.id_map, 4, 100), [0, 0, 0, 1])
        assert not derive_labels_from_mask(mask, self.id_map, 4, 101).any()

    def test_small_region_ignored(self):
        mask = np.zeros((20, 20), dtype=np.uint8)
        mask.flat[:10] = 3
        assert not derive_labels_from_mask(mask, self.id_map, 4, 50).any()

    def test_unmapped_id_listed(self):
        mask = np.array([[0, 7], [9, 3]])
        with pytest.raises(ValueError, match=r"\[7, 9\]"):
            derive_labels_from_mask(mask, self.id_map, 4, 1)

    def test_ids_sharing_a_class_add_up(self):
        mask = np.array([[3, 3, 6, 6]])
        assert derive_labels_from_mask(mask, {3: 0, 6: 0}, 1, 4)[0] == 1

    @settings(max_examples=60)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 200), st.integers(1, 200))
    def test_monotone_in_min_pixels(self, seed, a, b):
        lo, hi = sorted((a, b))
        mask = np.random.default_rng(seed).integers(0, 6, size=(16, 16))
        id_map = {i: (None if i == 0 else i - 1) for i in range(6)}
        assert np.all(derive_labels_from_mask(mask, id_map, 5, hi) <= derive_labels_from_mask(mask, id_map, 5, lo))

    def test_rescuenet_map_covers_default_vocabulary(self):
        resolved = resolve_id_map(RESCUENET_ID_MAP, LabelVocabulary())
        assert sorted(v for v in resolved.values() if v is not None) == list(range(10))

    def test_id_map_file_and_conversion(self, tmp_path):
        (tmp_path / "map.toml").write_text('classes = ["road", "tree"]\nmin_pixels = 4\n[id_map]\n0 = "ignore"\n1 = "road"\n2 = "tree"\n')
        id_map, vocab, min_pixels = load_id_map(tmp_path / "map.toml")
        assert id_map == {0: None, 1: 0, 2: 1} and vocab.names == ("road", "tree") and min_pixels == 4
        write_png(tmp_path / "p_lab.png", np.array([[1, 1, 1, 1], [0, 0, 2, 2]]))
        write_png(tmp_path / "p.png", np.zeros((2, 4, 3)))
        manifest = convert_masks(tmp_path, id_map, vocab, min_pixels)
        assert len(manifest) == 1 and manifest.samples[0].image.name == "p.png"
        np.testing.assert_array_equal(manifest.labels, [[1, 0]])

    def test_conversion_reports_unpaired_masks(self, tmp_path):
        write_png(tmp_path / "lonely_lab.png", np.zeros((2, 2)))
        with pytest.raises(FileNotFoundError, match="lonely"):
            convert_masks(tmp_path, {0: None}, LabelVocabulary(("a",)))


class TestSplit:
    def test_eighty_twenty(self):
        train, test = split_dataset(make_manifest(10), 0.8, seed=0)
        assert (len(train), len(test)) == (8, 2)

    def test_floor_rule(self):
        train, test = split_dataset(make_manifest(7), 0.5, seed=0)
        assert (len(train), len(test)) == (3, 4)

    def test_deterministic(self):
        m = make_manifest(30)
        a = [s.image for s in split_dataset(m, 0.8, seed=4)[0].samples]
        b = [s.image for s in split_dataset(m, 0.8, seed=4)[0].samples]
        c = [s.image for s in split_dataset(m, 0.8, seed=5)[0].samples]
        assert a == b and a != c

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
    def test_fraction_bounds(self, fraction):
        with pytest.raises(ValueError):
            split_dataset(make_manifest(10), fraction)

    def test_empty_side_rejected(self):
        with pytest.raises(ValueError, match="empty side"):
            split_dataset(make_manifest(2), 0.3)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(2, 1000), st.floats(0.05, 0.95), st.integers(0, 100))
    def test_partition_property(self, n, fraction, seed):
        expected = math.floor(n * fraction + 1e-9)
        m = make_manifest(n, c=1)
        if expected in (0, n):
            with pytest.raises(ValueError):
                split_dataset(m, fraction, seed)
            return
        train, test = split_dataset(m, fraction, seed)
        a = [s.image for s in train.samples]
        b = [s.image for s in test.samples]
        assert len(a) == expected
        assert not set(a) & set(b)
        assert sorted(a + b) == sorted(s.image for s in m.samples)


class TestPreprocess:
    def image(self, seed=0, shape=(20, 30, 3)):
        return np.random.default_rng(seed).integers(0, 256, size=shape, dtype=np.uint8)

    def test_eval_deterministic(self):
        img = self.image()
        a = preprocess_and_augment(img, "eval", 16)
        b = preprocess_and_augment(img, "eval", 16)
        assert a.shape == (3, 16, 16) and a.tobytes() == b.tobytes()

    def test_constant_gray(self):
        out = preprocess_and_augment(np.full((9, 13, 3), 128, dtype=np.uint8), "eval", 8)
        for c in range(3):
            np.testing.assert_allclose(out[c], (128 / 255 - IMAGENET_MEAN[c]) / IMAGENET_STD[c], atol=1e-12)

    def test_forced_flip_mirrors_eval_output(self):
        img = self.image(1)
        rng = np.random.default_rng(0)
        train = preprocess_and_augment(img, "train", 12, rng, hflip_prob=1.0, crop_scale=(1.0, 1.0))
        np.testing.assert_array_equal(train, preprocess_and_augment(img, "eval", 12)[:, :, ::-1])

    def test_same_size_resize_is_identity(self):
        img = self.image(2, (10, 10, 3))
        out = preprocess_and_augment(img, "eval", 10)
        expected = ((img / 255.0 - IMAGENET_MEAN) / IMAGENET_STD).transpose(2, 0, 1)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_train_mode_reproducible_per_sample(self):
        img = self.image(3)
        a = preprocess_and_augment(img, "train", 12, sample_rng(7, 2, 5))
        b = preprocess_and_augment(img, "train", 12, sample_rng(7, 2, 5))
        c = preprocess_and_augment(img, "train", 12, sample_rng(7, 3, 5))
        assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()

    def test_train_needs_rng_and_valid_mode(self):
        with pytest.raises(ValueError):
            preprocess_and_augment(self.image(), "train", 8)
        with pytest.raises(ValueError):
            preprocess_and_augment(self.image(), "test", 8)
        with pytest.raises(ValueError):
            preprocess_and_augment(np.zeros((4, 4)), "eval", 8)


def test_corrupt_images_are_skipped(tmp_path, caplog):
    good = write_png(tmp_path / "good.png", np.zeros((3, 3, 3)))
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    vocab = LabelVocabulary(("a",))
    manifest = DatasetManifest(vocab, [Sample(good, np.ones(1, np.int8)), Sample(bad, np.zeros(1, np.int8))])
    images, kept, skipped = load_images(manifest)
    assert kept == [0] and skipped == [str(bad)] and images[0].shape == (3, 3, 3)
    assert "skipping" in caplog.text


def test_grayscale_decodes_to_three_channels(tmp_path):
    write_png(tmp_path / "g.png", np.full((4, 5), 9))
    img = load_image(tmp_path / "g.png")
    assert img.shape == (4, 5, 3) and img.dtype == np.uint8 and np.all(img == 9)
