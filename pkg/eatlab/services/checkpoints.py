"""
Checkpoint service: module state dicts in the array container, one blob per
tensor keyed by its module path, plus a provenance manifest.

The checkpoint hash is the container fingerprint (sha256 over the sorted
blobs), so a frozen backbone can be audited by re-hashing its directory.
"""

import logging
import os
from typing import Optional, Tuple

import torch
import torch.nn as nn

from eatlab.core.a2et import A2etModel
from eatlab.core.critics import CriticSet, ToyEmotionClassifier, ToySyncNet, ToyTextImageEmbedder
from eatlab.core.emoadapt import EmotionAdapter
from eatlab.errors import ProvenanceError, StorageError
from eatlab.models.config import A2etConfig, AdaptConfig
from eatlab.models.manifest import CheckpointManifest
from eatlab.services.storage import MANIFEST_NAME, StorageBinaryFile, StorageTextFile

logger = logging.getLogger("eatlab.checkpoints")

CRITIC_FACTORIES = {
    "sync": ToySyncNet,
    "classifier": ToyEmotionClassifier,
    "embedder": ToyTextImageEmbedder,
}


def save_checkpoint(module: nn.Module, out_dir: str, manifest: CheckpointManifest) -> CheckpointManifest:
    """
    Write every state-dict tensor of `module` and the manifest.

    Returns:
        The manifest with arrays and fingerprint filled in
    """
    arrays = {name: t.detach().cpu().numpy() for name, t in module.state_dict().items()}
    binary = StorageBinaryFile(out_dir)
    for stale in set(binary.list_files()) - set(arrays):
        binary.delete(stale)
    manifest.arrays = binary.create_many(arrays)
    manifest.fingerprint = binary.fingerprint()
    StorageTextFile(out_dir).create_json(MANIFEST_NAME, manifest.model_dump())
    logger.info(f"Saved {manifest.kind} checkpoint ({len(arrays)} tensors) to {out_dir}")
    return manifest


def read_checkpoint_manifest(path: str) -> CheckpointManifest:
    if not os.path.isfile(os.path.join(path, MANIFEST_NAME)):
        raise StorageError("no checkpoint manifest", os.path.join(path, MANIFEST_NAME))
    return CheckpointManifest.model_validate(StorageTextFile(path).get_json())


def checkpoint_hash(path: str) -> str:
    """Current fingerprint of the tensors on disk"""
    if not os.path.isdir(path):
        raise StorageError("checkpoint directory does not exist", path)
    return StorageBinaryFile(path).fingerprint()


def load_state(module: nn.Module, path: str, kind: Optional[str] = None) -> CheckpointManifest:
    """Load tensors into `module` after checking kind and fingerprint"""
    manifest = read_checkpoint_manifest(path)
    if kind is not None and manifest.kind != kind:
        raise ProvenanceError(f"expected a {kind} checkpoint, found {manifest.kind} at {path}")
    binary = StorageBinaryFile(path)
    if binary.fingerprint() != manifest.fingerprint:
        raise ProvenanceError(f"tensors at {path} were modified after the checkpoint was written")
    state = {name: torch.from_numpy(binary.get(name)) for name in manifest.arrays}
    module.load_state_dict(state)
    return manifest


def load_backbone(path: str, device: str = "cpu") -> Tuple[A2etModel, CheckpointManifest]:
    """Rebuild the backbone from its manifest config and load it in eval mode"""
    manifest = read_checkpoint_manifest(path)
    model = A2etModel(A2etConfig.model_validate(manifest.config["a2et"]))
    load_state(model, path, kind="backbone")
    model.has_basis = True
    return model.to(device).eval(), manifest


def load_adaptation(path: str, backbone: A2etModel, backbone_path: str,
                    device: str = "cpu") -> Tuple[EmotionAdapter, CheckpointManifest]:
    """Load adaptation modules, refusing a backbone other than the one they were trained against"""
    manifest = read_checkpoint_manifest(path)
    actual = checkpoint_hash(backbone_path)
    if manifest.upstream_hash != actual:
        raise ProvenanceError(
            f"adaptation at {path} was trained against backbone {manifest.upstream_hash}, got {actual}"
        )
    adapt_cfg = AdaptConfig.model_validate(manifest.config["adapt"])
    adapter = EmotionAdapter(adapt_cfg, backbone.config, backbone if adapt_cfg.edn_init == "a2et" else None)
    load_state(adapter, path, kind="adaptation")
    return adapter.to(device), manifest


def save_critics(critics: CriticSet, out_dir: str, base: CheckpointManifest) -> CheckpointManifest:
    """One container per metric model under out_dir, plus a summary manifest at out_dir"""
    hashes = {}
    for name in CRITIC_FACTORIES:
        model = critics.require(name)
        sub = base.model_copy(deep=True)
        sub.kind = f"critic:{name}"
        sub.param_counts = {name: sum(p.numel() for p in model.parameters())}
        hashes[name] = save_checkpoint(model, os.path.join(out_dir, name), sub).fingerprint
    summary = base.model_copy(deep=True)
    summary.kind = "critics"
    summary.param_counts = {
        name: sum(p.numel() for p in critics.require(name).parameters()) for name in CRITIC_FACTORIES
    }
    summary.fingerprint = "+".join(hashes[n] for n in sorted(hashes))
    StorageTextFile(out_dir).create_json(MANIFEST_NAME, summary.model_dump())
    return summary


def load_critics(path: str, device: str = "cpu") -> CriticSet:
    """Load all metric models; they must come from the same oracle dataset"""
    critics = CriticSet()
    fingerprints = set()
    for name, factory in CRITIC_FACTORIES.items():
        model = factory()
        manifest = load_state(model, os.path.join(path, name), kind=f"critic:{name}")
        fingerprints.add(manifest.dataset_fingerprint)
        setattr(critics, name, model.to(device))
    if len(fingerprints) != 1:
        raise ProvenanceError(f"metric models at {path} were trained on different datasets")
    critics.dataset_fingerprint = fingerprints.pop()
    return critics.eval()
