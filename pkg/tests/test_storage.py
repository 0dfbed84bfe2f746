"""
Test module for the storage service.

This module provides tests for the container storage classes:
- StorageTextFile: JSON manifests and text reports
- StorageBinaryFile: array blobs with a magic + shape header

Run with: python -m unittest tests.test_storage
"""

import os
import shutil
import sys
import tempfile
import unittest

import numpy as np

# Add the parent directory to the path so we can import the eatlab package
parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, parent_dir)

from eatlab.errors import StorageError
from eatlab.services.storage import MAGIC, StorageBinaryFile, StorageTextFile, fingerprint_arrays


class TestStorageTextFile(unittest.TestCase):
    """Test cases for the StorageTextFile class."""

    def setUp(self):
        """Set up test fixtures before each test method."""
        self.root = tempfile.mkdtemp(prefix="eatlab_text_")
        self.storage = StorageTextFile(self.root)
        self.test_content = "Hello, World!"
        self.test_json_content = {"message": "Hello, World!", "count": 42}

    def tearDown(self):
        """Clean up after each test method."""
        shutil.rmtree(self.root, ignore_errors=True)

    def test_create_and_get(self):
        """Test creating and retrieving a text file."""
        path = self.storage.create("report.txt", self.test_content)
        self.assertTrue(os.path.isfile(path), "Failed to create a text file")
        self.assertEqual(self.storage.get("report.txt"), self.test_content, "Content doesn't match what was stored")

    def test_create_and_get_json(self):
        """Test creating and retrieving a JSON file."""
        self.storage.create_json("manifest.json", self.test_json_content)
        content = self.storage.get_json()
        self.assertEqual(content, self.test_json_content, "JSON content doesn't match what was stored")

    def test_overwrite_leaves_no_temp_file(self):
        """Test that replacing a file leaves only the final file behind."""
        self.storage.create("report.txt", self.test_content)
        self.storage.create("report.txt", "Updated content")
        self.assertEqual(self.storage.get("report.txt"), "Updated content", "Content wasn't properly updated")
        self.assertEqual(self.storage.list_files(), ["report.txt"])

    def test_delete(self):
        """Test deleting a file."""
        self.storage.create("report.txt", self.test_content)
        self.storage.delete("report.txt")
        self.assertFalse(self.storage.exists("report.txt"), "File wasn't properly deleted")
        with self.assertRaises(StorageError):
            self.storage.get("report.txt")

    def test_invalid_json(self):
        """Test that unparsable JSON raises StorageError with the path."""
        self.storage.create("manifest.json", "{not json")
        with self.assertRaises(StorageError) as ctx:
            self.storage.get_json()
        self.assertTrue(ctx.exception.path.endswith("manifest.json"))

    def test_list_files_skips_blobs(self):
        """Test that list_files reports text files only."""
        self.storage.create("a.txt", "a")
        StorageBinaryFile(self.root).create("arr", np.zeros(3, dtype=np.float32))
        self.assertEqual(self.storage.list_files(), ["a.txt"])


class TestStorageBinaryFile(unittest.TestCase):
    """Test cases for the StorageBinaryFile class."""

    def setUp(self):
        """Set up test fixtures before each test method."""
        self.root = tempfile.mkdtemp(prefix="eatlab_blob_")
        self.storage = StorageBinaryFile(self.root)

    def tearDown(self):
        """Clean up after each test method."""
        shutil.rmtree(self.root, ignore_errors=True)

    def test_create_and_get(self):
        """Test that stored arrays come back bit-identical with their dtype."""
        arrays = {
            "f32": np.arange(12, dtype=np.float32).reshape(3, 4) / 7.0,
            "i32": np.array([[1, -2], [3, 4]], dtype=np.int32),
            "f64": np.linspace(0.0, 1.0, 5),
            "scalar": np.array(3.5, dtype=np.float32),
        }
        infos = self.storage.create_many(arrays)
        loaded = self.storage.get_many(sorted(arrays))
        for name, arr in arrays.items():
            self.assertEqual(loaded[name].dtype, arr.dtype, f"dtype of {name} changed")
            np.testing.assert_array_equal(loaded[name], arr)
            self.assertEqual(infos[name].shape, list(arr.shape))
        self.assertEqual(infos["i32"].dtype, "int32")

    def test_header_layout(self):
        """Test the blob header: magic, dtype code, ndim and shape."""
        blob = StorageBinaryFile.encode(np.zeros((2, 3), dtype=np.float32))
        self.assertEqual(blob[:8], MAGIC)
        self.assertEqual(blob[8:12], (0).to_bytes(4, "little"))
        self.assertEqual(blob[12:16], (2).to_bytes(4, "little"))
        self.assertEqual(len(blob), 16 + 2 * 8 + 6 * 4)

    def test_bad_magic(self):
        """Test that a corrupted blob is rejected."""
        blob = bytearray(StorageBinaryFile.encode(np.ones(4, dtype=np.float32)))
        blob[0:8] = b"NOTMAGIC"
        with self.assertRaises(StorageError):
            StorageBinaryFile.decode(bytes(blob))

    def test_truncated_payload(self):
        """Test that a short payload is rejected."""
        blob = StorageBinaryFile.encode(np.ones(4, dtype=np.float32))
        with self.assertRaises(StorageError):
            StorageBinaryFile.decode(blob[:-2])

    def test_unsupported_dtype(self):
        """Test that complex arrays cannot be stored."""
        with self.assertRaises(StorageError):
            StorageBinaryFile.encode(np.ones(2, dtype=np.complex64))

    def test_delete_and_list(self):
        """Test deleting a blob and listing array names."""
        self.storage.create("b", np.zeros(1, dtype=np.float32))
        self.storage.create("a", np.zeros(1, dtype=np.float32))
        self.assertEqual(self.storage.list_files(), ["a", "b"])
        self.storage.delete("a")
        self.assertEqual(self.storage.list_files(), ["b"])

    def test_fingerprint_matches_in_memory(self):
        """Test that the on-disk fingerprint equals the in-memory fingerprint."""
        arrays = {"x": np.arange(5, dtype=np.float32), "y": np.eye(2)}
        self.storage.create_many(arrays)
        self.assertEqual(self.storage.fingerprint(), fingerprint_arrays(arrays))

    def test_fingerprint_changes_with_content(self):
        """Test that a single changed value changes the fingerprint."""
        self.storage.create("x", np.arange(5, dtype=np.float32))
        before = self.storage.fingerprint()
        self.storage.create("x", np.arange(5, dtype=np.float32) + np.float32(1e-3))
        self.assertNotEqual(before, self.storage.fingerprint())


if __name__ == "__main__":
    unittest.main()
