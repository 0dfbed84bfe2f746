"""
Test module for the command-line interface.

Run with: python -m unittest tests.test_cli
"""

import json
import os
import shutil
import sys
import tempfile
import unittest

from click.testing import CliRunner

parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, parent_dir)

from eatlab.cli import cli
from eatlab.services import dataset as ds


class TestCli(unittest.TestCase):
    """Test cases for the eatlab command group."""

    def setUp(self):
        """Set up test fixtures before each test method."""
        self.root = tempfile.mkdtemp(prefix="eatlab_cli_")
        self.runner = CliRunner()

    def tearDown(self):
        """Clean up after each test method."""
        shutil.rmtree(self.root, ignore_errors=True)

    def test_gen_data(self):
        """Test that gen-data writes a container with a basis of the requested size."""
        out = os.path.join(self.root, "data")
        result = self.runner.invoke(cli, [
            "--log-level", "WARNING", "gen-data", "--identities", "2", "--clips-per-identity", "4",
            "--frames", "10", "--test-fraction", "0.5", "--pca-dim", "4", "--out", out,
        ])
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("8 clips", result.output)
        self.assertEqual(len(ds.read_manifest(out).clips), 8)
        self.assertEqual(ds.load_basis(out)[0].dim, 4)

    def test_gen_data_bad_emotion(self):
        """Test that an unknown emotion label exits with status 1."""
        result = self.runner.invoke(cli, ["gen-data", "--emotions", "neutral,bored",
                                          "--out", os.path.join(self.root, "data")])
        self.assertEqual(result.exit_code, 1)
        self.assertIn("invalid configuration", result.output)

    def test_gen_data_bad_intensity(self):
        """Test that an intensity outside [0, 1] exits with status 1."""
        result = self.runner.invoke(cli, ["gen-data", "--intensities", "1.5",
                                          "--out", os.path.join(self.root, "data")])
        self.assertEqual(result.exit_code, 1)

    def test_params_json(self):
        """Test that params --json reports the three adaptation groups."""
        result = self.runner.invoke(cli, ["params", "--json"])
        self.assertEqual(result.exit_code, 0, result.output)
        report = json.loads(result.output)
        self.assertEqual(set(report["groups"]), {"prompts", "edn", "eam"})
        self.assertGreater(report["groups"]["prompts"]["count"], report["groups"]["edn"]["count"])
        self.assertGreater(report["groups"]["edn"]["count"], report["groups"]["eam"]["count"])
        self.assertLessEqual(report["total_added"]["percent"], 10.0)

    def test_params_table(self):
        """Test the plain-text parameter table."""
        result = self.runner.invoke(cli, ["params"])
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("total added", result.output)

    def test_params_adaptation_needs_backbone(self):
        """Test that --adaptation without --backbone is a usage error."""
        result = self.runner.invoke(cli, ["params", "--adaptation", self.root])
        self.assertEqual(result.exit_code, 2)
        self.assertIn("--adaptation needs --backbone", result.output)

    def test_missing_dataset(self):
        """Test that pretraining on a missing container exits with status 1."""
        result = self.runner.invoke(cli, ["pretrain", "--dataset", os.path.join(self.root, "nothing"),
                                          "--out", os.path.join(self.root, "run"), "--pca-dim", "4"])
        self.assertEqual(result.exit_code, 1)

    def test_unknown_command(self):
        """Test that an unknown command is a usage error."""
        self.assertEqual(self.runner.invoke(cli, ["dance"]).exit_code, 2)


if __name__ == "__main__":
    unittest.main()
