"""
Test module for the training harness: critics, pretraining, adaptation,
evaluation, zero-shot editing, ablations and parameter accounting.

Every stage runs for a handful of steps on a tiny dataset, so these tests check
wiring, provenance and file formats rather than learning quality.

Run with: python -m unittest tests.test_harness
"""

import os
import shutil
import tempfile
import unittest

import numpy as np
import torch

from tests.common import make_dataset, tiny_a2et, tiny_adapt, tiny_world
from eatlab.core.critics import CriticSet
from eatlab.core.objectives import LossParts
from eatlab.errors import MetricModelMissingError, ProvenanceError, TrainingDivergedError
from eatlab.models.config import RunConfig
from eatlab.services import ablation, accounting, editing, trainer
from eatlab.services.checkpoints import (
    checkpoint_hash,
    load_adaptation,
    load_backbone,
    load_critics,
    read_checkpoint_manifest,
)
from eatlab.services.dataset import BatchSampler, SyntheticDataset
from eatlab.services.storage import MANIFEST_NAME, StorageBinaryFile, StorageTextFile

SMALL = dict(batch_clips=2, centers_per_clip=5, log_every=1)


class TestHarnessPipeline(unittest.TestCase):
    """Test cases for the full critics -> pretrain -> adapt -> eval chain."""

    @classmethod
    def setUpClass(cls):
        cls.root = tempfile.mkdtemp(prefix="eatlab_run_")
        cls.data = make_dataset(os.path.join(cls.root, "data"))
        cls.critics_dir = os.path.join(cls.root, "critics")
        cls.backbone_dir = os.path.join(cls.root, "backbone")
        cls.adapt_dir = os.path.join(cls.root, "adapt")
        cls.critics_manifest = trainer.train_critics(RunConfig(
            stage="critics", dataset_dir=cls.data, out_dir=cls.critics_dir, steps=3, **SMALL))
        cls.backbone_manifest = trainer.pretrain(RunConfig(
            stage="pretrain", dataset_dir=cls.data, out_dir=cls.backbone_dir, critics_dir=cls.critics_dir,
            a2et=tiny_a2et(), steps=4, **SMALL))
        cls.backbone_hash = checkpoint_hash(cls.backbone_dir)
        cls.adapt_manifest = trainer.adapt(cls.adapt_config(cls.adapt_dir, steps=3), cls.backbone_dir)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.root, ignore_errors=True)

    @classmethod
    def adapt_config(cls, out_dir, **overrides):
        fields = dict(stage="adapt", dataset_dir=cls.data, out_dir=out_dir, critics_dir=cls.critics_dir,
                      a2et=tiny_a2et(), adapt=tiny_adapt(), eval_interval=2, val_clips=2, **SMALL)
        fields.update(overrides)
        return RunConfig(**fields)

    def eval_config(self, name, **overrides):
        fields = dict(stage="eval", dataset_dir=self.data, out_dir=os.path.join(self.root, name),
                      critics_dir=self.critics_dir, a2et=tiny_a2et())
        fields.update(overrides)
        return RunConfig(**fields)

    def test_critics_checkpoint(self):
        """Test that every metric model loads with the dataset fingerprint."""
        critics = load_critics(self.critics_dir)
        self.assertEqual(critics.dataset_fingerprint, SyntheticDataset(self.data).fingerprint)
        self.assertEqual(set(self.critics_manifest.quality),
                         {"sync_accuracy", "classifier_accuracy", "embedder_accuracy"})
        self.assertEqual(len(self.critics_manifest.loss_curve), 3)

    def test_backbone_manifest(self):
        """Test kind, phase boundary and recorded config of the backbone."""
        manifest = read_checkpoint_manifest(self.backbone_dir)
        self.assertEqual(manifest.kind, "backbone")
        self.assertEqual(manifest.phase_boundary, 2)
        self.assertEqual(manifest.fingerprint, self.backbone_hash)
        self.assertEqual(manifest.config["a2et"]["pca_dim"], 6)
        model, _ = load_backbone(self.backbone_dir)
        self.assertFalse(model.training)

    def test_adaptation_chain(self):
        """Test that the adaptation records the backbone hash and left the backbone untouched."""
        self.assertEqual(self.adapt_manifest.upstream_hash, self.backbone_hash)
        self.assertEqual(checkpoint_hash(self.backbone_dir), self.backbone_hash)
        self.assertEqual([s.step for s in self.adapt_manifest.snapshots], [2, 3])
        self.assertIn("prompts", self.adapt_manifest.param_counts)
        backbone, _ = load_backbone(self.backbone_dir)
        adapter, _ = load_adaptation(self.adapt_dir, backbone, self.backbone_dir)
        self.assertIsNotNone(adapter.edn)

    def test_expected_backbone_hash(self):
        """Test that a wrong expected backbone hash stops adaptation before training."""
        config = self.adapt_config(os.path.join(self.root, "wrong_hash"), steps=1, expected_backbone_hash="0" * 64)
        with self.assertRaises(ProvenanceError):
            trainer.adapt(config, self.backbone_dir)
        self.assertFalse(os.path.exists(os.path.join(self.root, "wrong_hash", MANIFEST_NAME)))

    def test_modified_backbone_is_refused(self):
        """Test that a tampered backbone fails both its own load and the adaptation load."""
        copy = os.path.join(self.root, "backbone_copy")
        shutil.copytree(self.backbone_dir, copy)
        binary = StorageBinaryFile(copy)
        name = sorted(read_checkpoint_manifest(copy).arrays)[0]
        tensor = binary.get(name)
        binary.create(name, tensor + np.ones_like(tensor))
        with self.assertRaises(ProvenanceError):
            load_backbone(copy)
        backbone, _ = load_backbone(self.backbone_dir)
        with self.assertRaises(ProvenanceError):
            load_adaptation(self.adapt_dir, backbone, copy)
        shutil.rmtree(copy)

    def test_critics_from_another_dataset(self):
        """Test that metric models trained on other data are refused."""
        dataset = SyntheticDataset(self.data)
        with self.assertRaises(ProvenanceError):
            trainer.check_critics(CriticSet(dataset_fingerprint="f" * 64), dataset)

    def test_evaluate_pretrained(self):
        """Test the pretrained evaluation report and its files."""
        config = self.eval_config("eval_pre")
        report = trainer.evaluate(config, self.backbone_dir, png=True)
        self.assertEqual(report.label, "pretrained")
        self.assertEqual(len(report.per_clip), 8)
        self.assertEqual(report.backbone_hash, self.backbone_hash)
        self.assertIsNone(report.adaptation_hash)
        self.assertTrue(0.0 <= report.aggregate.acc_emo <= 100.0)
        for name in (trainer.REPORT_JSON, trainer.REPORT_TXT, trainer.FRAMES_PNG, MANIFEST_NAME):
            self.assertTrue(os.path.isfile(os.path.join(config.out_dir, name)), f"{name} missing")
        self.assertEqual(StorageTextFile(config.out_dir).get_json(MANIFEST_NAME)["kind"], "eval")

    def test_evaluate_excludes_held_out(self):
        """Test that held-out emotions are left out of the evaluation."""
        report = trainer.evaluate(self.eval_config("eval_held", held_out_emotions=["happy"]), self.backbone_dir)
        self.assertNotIn("happy", {c.emotion for c in report.per_clip})
        self.assertEqual(len(report.per_clip), 7)

    def test_fresh_adapter_matches_pretrained(self):
        """Test that an adapter trained for zero steps reproduces the pretrained keypoints."""
        out = os.path.join(self.root, "adapt_zero")
        trainer.adapt(self.adapt_config(out, steps=0), self.backbone_dir)
        pre = trainer.evaluate(self.eval_config("eval_zero_pre"), self.backbone_dir)
        ada = trainer.evaluate(self.eval_config("eval_zero_ada"), self.backbone_dir, out)
        for a, b in zip(pre.per_clip, ada.per_clip):
            self.assertAlmostEqual(a.f_lmd, b.f_lmd, places=4)
            self.assertAlmostEqual(a.psnr, b.psnr, places=3)

    def test_evaluate_needs_critics(self):
        """Test that evaluation without metric models raises MetricModelMissingError."""
        with self.assertRaises(MetricModelMissingError):
            trainer.evaluate(self.eval_config("eval_none", critics_dir=None), self.backbone_dir)

    def test_edit_zero_shot(self):
        """Test that editing trains a head on neutral clips and writes its report and edited clip."""
        config = RunConfig(stage="edit", dataset_dir=self.data, out_dir=os.path.join(self.root, "edit"),
                           critics_dir=self.critics_dir, a2et=tiny_a2et(), adapt=tiny_adapt(), steps=2,
                           edit_text="surprised", **SMALL)
        report = editing.edit_zero_shot(config, self.backbone_dir, self.adapt_dir)
        self.assertEqual(report.text, "surprised")
        self.assertEqual(report.adaptation_hash, checkpoint_hash(self.adapt_dir))
        self.assertEqual(len(report.transfer_clips), 1)
        self.assertTrue(0.0 <= report.source_acc <= 100.0)
        self.assertTrue(os.path.isfile(os.path.join(config.out_dir, editing.EDIT_REPORT)))
        self.assertEqual(read_checkpoint_manifest(config.out_dir).kind, "edit")
        self.assertEqual(checkpoint_hash(self.backbone_dir), self.backbone_hash)
        edited_dir = os.path.join(config.out_dir, editing.EDITED_DIR)
        self.assertEqual(StorageTextFile(edited_dir).get_json()["clip_id"], report.edited_clip_id)
        self.assertIn(report.edited_clip_id, report.source_clips)
        frames = StorageBinaryFile(edited_dir).get("frames")
        self.assertEqual(frames.shape, (12, 3, 64, 64))
        self.assertTrue(np.isfinite(frames).all())
        self.assertTrue(os.path.isfile(os.path.join(config.out_dir, editing.EDITED_PNG)))

    def test_ablation_edn_init(self):
        """Test that an ablation writes one row per cell with the added-parameter share."""
        config = self.adapt_config(os.path.join(self.root, "ablate"), steps=1)
        report = ablation.run_ablation(config, self.backbone_dir, "edn-init", workers=1)
        self.assertEqual([r.label for r in report.rows], ["EDN from A2ET", "EDN random"])
        self.assertTrue(all(r.params_added_pct > 0 for r in report.rows))
        self.assertTrue(os.path.isfile(os.path.join(config.out_dir, ablation.ABLATION_TXT)))
        self.assertTrue(os.path.isdir(os.path.join(config.out_dir, "edn_random", "eval")))

    def test_params_report(self):
        """Test parameter accounting of the trained adapter."""
        backbone, _ = load_backbone(self.backbone_dir)
        adapter, _ = load_adaptation(self.adapt_dir, backbone, self.backbone_dir)
        report = accounting.params_report(backbone, adapter)
        self.assertEqual(report.total_added.count, sum(g.count for g in report.groups.values()))
        self.assertEqual(report.groups["prompts"].count, self.adapt_manifest.param_counts["prompts"])
        text = accounting.format_params(report)
        self.assertIn("total added", text)


class TestHarnessPieces(unittest.TestCase):
    """Test cases for harness helpers that do not need trained models."""

    def setUp(self):
        """Set up test fixtures before each test method."""
        self.root = tempfile.mkdtemp(prefix="eatlab_run_")
        self.data = make_dataset(os.path.join(self.root, "data"), tiny_world(identities=2, clips_per_identity=4))

    def tearDown(self):
        """Clean up after each test method."""
        shutil.rmtree(self.root, ignore_errors=True)

    def test_divergence_guard(self):
        """Test that a NaN loss raises TrainingDivergedError after writing a dump."""
        dataset = SyntheticDataset(self.data)
        batch = BatchSampler(dataset.clips("train"), 1, 5, 2, "emotional", seed=0).sample()
        guard = trainer.DivergenceGuard(self.root)
        with self.assertRaises(TrainingDivergedError) as ctx:
            guard.check(torch.tensor(float("nan")), 7, batch, LossParts(lat=torch.tensor(float("nan"))),
                        {"layer": torch.nn.Linear(2, 2)})
        self.assertEqual(ctx.exception.dump_path, guard.root)
        dump = StorageTextFile(guard.root).get_json(MANIFEST_NAME)
        self.assertEqual(dump["step"], 7)
        self.assertIn("layer.weight", StorageBinaryFile(guard.root).list_files())

    def test_finite_loss_passes(self):
        """Test that a finite loss leaves no dump."""
        guard = trainer.DivergenceGuard(self.root)
        guard.check(torch.tensor(1.0), 0, None, LossParts(), {})
        self.assertFalse(os.path.exists(guard.root))

    def test_pretrain_without_critics(self):
        """Test that pretraining runs without metric models and skips the sync term."""
        out = os.path.join(self.root, "backbone")
        manifest = trainer.pretrain(RunConfig(stage="pretrain", dataset_dir=self.data, out_dir=out,
                                              a2et=tiny_a2et(), steps=2, phase1_fraction=0.0, **SMALL))
        self.assertEqual(manifest.phase_boundary, 0)
        self.assertEqual(len(manifest.loss_curve), 2)

    def test_optimizer_step_without_grad(self):
        """Test that a loss with no graph leaves parameters unchanged."""
        layer = torch.nn.Linear(2, 2)
        before = layer.weight.detach().clone()
        trainer.optimizer_step(torch.optim.Adam(layer.parameters(), lr=1.0), torch.tensor(0.0))
        torch.testing.assert_close(layer.weight.detach(), before)

    def test_unknown_matrix(self):
        """Test that an unknown ablation matrix is refused."""
        config = RunConfig(stage="adapt", dataset_dir=self.data, out_dir=self.root, steps=1)
        with self.assertRaises(ValueError):
            ablation.run_ablation(config, self.root, "colours")

    def test_cell_config(self):
        """Test that the doubled-steps cell doubles steps and keeps the seed."""
        config = RunConfig(stage="adapt", dataset_dir=self.data, out_dir=self.root, steps=10, seed=4)
        cell = ablation.MATRICES["data-fraction"][-1]
        derived = ablation.cell_config(config, cell)
        self.assertEqual(derived.steps, 20)
        self.assertEqual(derived.seed, 4)
        self.assertEqual(derived.data_fraction, 0.25)
        self.assertEqual(derived.out_dir, os.path.join(self.root, "frac_25_x2"))


if __name__ == "__main__":
    unittest.main()
