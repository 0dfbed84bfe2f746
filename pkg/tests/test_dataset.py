"""
Test module for the dataset service: export, bit-exact reload, PCA basis and batches.

Run with: python -m unittest tests.test_dataset
"""

import os
import shutil
import tempfile
import unittest

import numpy as np

from tests.common import TINY_PCA_DIM, make_dataset, tiny_world
from eatlab.core import synthworld
from eatlab.errors import ConfigError, StorageError
from eatlab.services import dataset as ds
from eatlab.services.storage import MANIFEST_NAME, StorageBinaryFile


class TestDatasetContainer(unittest.TestCase):
    """Test cases for exporting and loading a dataset container."""

    @classmethod
    def setUpClass(cls):
        cls.root = tempfile.mkdtemp(prefix="eatlab_ds_")
        cls.path = make_dataset(os.path.join(cls.root, "data"))
        cls.clips = synthworld.generate_clips(tiny_world())

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.root, ignore_errors=True)

    def test_manifest(self):
        """Test clip count, offsets and the identity split recorded in the manifest."""
        manifest = ds.read_manifest(self.path)
        self.assertEqual(len(manifest.clips), 32)
        self.assertEqual([c.frame_offset for c in manifest.clips[:3]], [0, 12, 24])
        by_identity = {}
        for entry in manifest.clips:
            by_identity.setdefault(entry.identity_id, set()).add(entry.split)
        self.assertTrue(all(len(s) == 1 for s in by_identity.values()), "An identity spans both splits")
        self.assertEqual(sum(s == {"test"} for s in by_identity.values()), 1)
        self.assertIsNotNone(manifest.basis_fingerprint)

    def test_bit_exact_reload(self):
        """Test that every reloaded array equals the generated one exactly."""
        _, records = ds.load_dataset(self.path)
        for original, loaded in zip(self.clips, records):
            np.testing.assert_array_equal(loaded.utterance.waveform, original.utterance.waveform)
            np.testing.assert_array_equal(loaded.emotional_exprs, original.emotional_exprs)
            np.testing.assert_array_equal(loaded.neutral_exprs, original.neutral_exprs)
            np.testing.assert_array_equal(loaded.pose_vectors, original.pose_vectors)
            np.testing.assert_array_equal(loaded.identity.canonical, original.identity.canonical)
            self.assertEqual(loaded.emotion.label, original.emotion.label)

    def test_regeneration_is_identical(self):
        """Test that regenerating from the same seed gives the same fingerprint."""
        other = make_dataset(os.path.join(self.root, "again"))
        self.assertEqual(ds.read_manifest(other).fingerprint, ds.read_manifest(self.path).fingerprint)

    def test_basis(self):
        """Test that the stored basis loads with the requested dimension."""
        basis, manifest = ds.load_basis(self.path)
        self.assertEqual(basis.dim, TINY_PCA_DIM)
        self.assertEqual(manifest.k, 15)
        np.testing.assert_allclose(basis.basis.T @ basis.basis, np.eye(TINY_PCA_DIM), atol=1e-5)

    def test_clips_by_split_and_fraction(self):
        """Test split selection, nested fractions and emotion exclusion."""
        dataset = ds.SyntheticDataset(self.path)
        train = dataset.clips("train")
        self.assertEqual(len(train), 24)
        quarter = dataset.clips("train", 0.25)
        half = dataset.clips("train", 0.5)
        self.assertEqual(len(quarter), 6)
        self.assertEqual([f.clip_id for f in quarter], [f.clip_id for f in half[:6]])
        no_happy = dataset.clips("train", exclude=["happy"])
        self.assertNotIn("happy", {f.emotion for f in no_happy})
        with self.assertRaises(ConfigError):
            dataset.clips("nowhere")

    def test_clip_features(self):
        """Test per-clip feature shapes."""
        feat = ds.SyntheticDataset(self.path).features[0]
        self.assertEqual(feat.mel.shape, (12, 80))
        self.assertEqual(feat.mfcc_ctx.shape, (12, 5, 13))
        self.assertEqual(feat.tints.shape, (12, 3))

    def test_sampler_batches(self):
        """Test that sampled batches are clip-major runs of consecutive centres."""
        dataset = ds.SyntheticDataset(self.path)
        sampler = ds.BatchSampler(dataset.clips("train"), 2, 5, 2, "emotional", seed=3)
        batch = sampler.sample()
        self.assertEqual(batch.window.size, 10)
        self.assertEqual(tuple(batch.window.mel.shape), (10, 5, 80))
        self.assertEqual(tuple(batch.per_clip(batch.target).shape), (2, 5, 15, 3))
        self.assertEqual(tuple(batch.mel_center.shape), (10, 80))
        again = ds.BatchSampler(dataset.clips("train"), 2, 5, 2, "emotional", seed=3).sample()
        self.assertEqual(batch.clip_ids, again.clip_ids)

    def test_neutral_target_has_no_tint(self):
        """Test that neutral targets come with unit tints."""
        dataset = ds.SyntheticDataset(self.path)
        batch = ds.clip_batch(dataset.features[1], 2, target="neutral")
        self.assertEqual(float(batch.tints.min()), 1.0)
        self.assertEqual(float(batch.tints.max()), 1.0)
        with self.assertRaises(ConfigError):
            ds.clip_batch(dataset.features[1], 2, target="sideways")

    def test_dump_features(self):
        """Test that dumped features cover every frame."""
        root = ds.dump_features(ds.SyntheticDataset(self.path))
        self.assertEqual(StorageBinaryFile(root).get("mel").shape, (32 * 12, 80))


class TestDatasetIntegrity(unittest.TestCase):
    """Test cases for corrupted or incomplete containers."""

    def setUp(self):
        """Set up test fixtures before each test method."""
        self.root = tempfile.mkdtemp(prefix="eatlab_ds_")
        self.path = make_dataset(os.path.join(self.root, "data"), tiny_world(identities=2, clips_per_identity=4))

    def tearDown(self):
        """Clean up after each test method."""
        shutil.rmtree(self.root, ignore_errors=True)

    def test_tampered_array(self):
        """Test that a modified array fails the fingerprint check."""
        binary = StorageBinaryFile(self.path)
        waveform = binary.get("waveform")
        waveform[0] += 1.0
        binary.create("waveform", waveform)
        with self.assertRaises(StorageError):
            ds.load_dataset(self.path)

    def test_missing_manifest(self):
        """Test that a container without a manifest is refused."""
        os.remove(os.path.join(self.path, MANIFEST_NAME))
        with self.assertRaises(StorageError):
            ds.read_manifest(self.path)

    def test_missing_basis(self):
        """Test that loading requires the basis unless told otherwise."""
        shutil.rmtree(os.path.join(self.path, ds.BASIS_DIR))
        with self.assertRaises(StorageError):
            ds.SyntheticDataset(self.path)
        self.assertIsNone(ds.SyntheticDataset(self.path, require_basis=False).basis)


if __name__ == "__main__":
    unittest.main()
