"""
Dataset service: synthetic clips in the array container, the PCA basis fit on
the training split, per-clip feature precomputation and training batches.

Container layout (see docs/formats.md):
    <dataset>/manifest.json           DatasetManifest
    <dataset>/<array>.arr             clip arrays concatenated along frames
    <dataset>/basis/manifest.json     BasisManifest
    <dataset>/basis/{U,M,eig}.arr
    <dataset>/features/               optional --dump-features output
"""

import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from eatlab.core import audiofeat, latent3d, synthworld
from eatlab.core.a2et import WindowBatch
from eatlab.errors import ConfigError, StorageError, UsageError
from eatlab.models.config import WorldConfig
from eatlab.models.manifest import BasisManifest, ClipEntry, DatasetManifest
from eatlab.services.storage import MANIFEST_NAME, StorageBinaryFile, StorageTextFile, fingerprint_arrays

logger = logging.getLogger("eatlab.dataset")

BASIS_DIR = "basis"
FEATURES_DIR = "features"


def export_dataset(
    clips: Sequence[synthworld.ClipRecord],
    path: str,
    world: WorldConfig,
    split: Optional[Dict[int, str]] = None,
) -> DatasetManifest:
    """
    Write clips into a dataset container.

    Args:
        clips: Records to export, in clip-id order
        path: Container directory
        world: Generator config recorded in the manifest
        split: identity id -> "train"/"test"; derived from the world seed when omitted

    Returns:
        The manifest that was written
    """
    if not clips:
        raise UsageError("export_dataset needs at least one clip")
    if split is None:
        split = synthworld.split_by_identity([c.identity.id for c in clips], world.test_fraction, world.seed)
    entries = []
    offset = 0
    for clip in clips:
        entries.append(
            ClipEntry(
                clip_id=clip.clip_id,
                identity_id=clip.identity.id,
                identity_seed=clip.identity.seed,
                emotion=clip.emotion.label,
                intensity=clip.emotion.intensity,
                frames=clip.frames,
                frame_offset=offset,
                utterance_seed=clip.utterance.seed,
                pose_seed=clip.pose_seed,
                split=split[clip.identity.id],
            )
        )
        offset += clip.frames
    arrays = {
        "waveform": np.concatenate([c.utterance.waveform for c in clips]).astype(np.float32),
        "phonemes": np.concatenate([c.utterance.phoneme_track for c in clips]).astype(np.int32),
        "pose_vectors": np.concatenate([c.pose_vectors for c in clips]).astype(np.float64),
        "neutral": np.concatenate([c.neutral_exprs for c in clips]).astype(np.float32),
        "emotional": np.concatenate([c.emotional_exprs for c in clips]).astype(np.float32),
        "canonical": np.stack([c.identity.canonical for c in clips]).astype(np.float32),
        "appearance": np.stack([c.identity.appearance for c in clips]).astype(np.float32),
    }
    binary = StorageBinaryFile(path)
    infos = binary.create_many(arrays)
    manifest = DatasetManifest(
        world=world.model_dump(),
        clips=entries,
        arrays=infos,
        fingerprint=binary.fingerprint(),
    )
    StorageTextFile(path).create_json(MANIFEST_NAME, manifest.model_dump())
    logger.info(f"Exported {len(clips)} clips ({offset} frames) to {path}")
    return manifest


def read_manifest(path: str) -> DatasetManifest:
    if not os.path.isfile(os.path.join(path, MANIFEST_NAME)):
        raise StorageError("no dataset manifest", os.path.join(path, MANIFEST_NAME))
    return DatasetManifest.model_validate(StorageTextFile(path).get_json())


def load_dataset(path: str, verify: bool = True) -> Tuple[DatasetManifest, List[synthworld.ClipRecord]]:
    """Bit-exact re-import of an exported container"""
    manifest = read_manifest(path)
    binary = StorageBinaryFile(path)
    if verify and binary.fingerprint() != manifest.fingerprint:
        raise StorageError("array fingerprint does not match the manifest", path)
    arrays = binary.get_many(list(manifest.arrays))
    records = []
    for index, entry in enumerate(manifest.clips):
        lo, hi = entry.frame_offset, entry.frame_offset + entry.frames
        identity = synthworld.IdentitySpec(
            id=entry.identity_id,
            seed=entry.identity_seed,
            canonical=arrays["canonical"][index],
            appearance=arrays["appearance"][index],
        )
        utterance = synthworld.SyntheticUtterance(
            seed=entry.utterance_seed,
            waveform=arrays["waveform"][lo * synthworld.HOP : hi * synthworld.HOP],
            phoneme_track=arrays["phonemes"][lo:hi],
        )
        records.append(
            synthworld.ClipRecord(
                clip_id=entry.clip_id,
                identity=identity,
                utterance=utterance,
                pose_vectors=arrays["pose_vectors"][lo:hi],
                neutral_exprs=arrays["neutral"][lo:hi],
                emotional_exprs=arrays["emotional"][lo:hi],
                emotion=synthworld.emotion_style(entry.emotion, entry.intensity),
                pose_seed=entry.pose_seed,
            )
        )
    logger.info(f"Loaded {len(records)} clips from {path}")
    return manifest, records


def fit_basis(records: Sequence[synthworld.ClipRecord], split: Dict[int, str], dim: int = 32) -> Tuple[latent3d.PcaBasis, str]:
    """PCA over neutral and emotional deformations of the training identities"""
    train = [r for r in records if split.get(r.identity.id) == "train"]
    data = np.concatenate([np.concatenate([r.neutral_exprs, r.emotional_exprs]) for r in train])
    basis = latent3d.pca_fit(data, dim)
    return basis, fingerprint_arrays({"deformations": data.astype(np.float32)})


def save_basis(basis: latent3d.PcaBasis, dataset_path: str, fit_fingerprint: str) -> BasisManifest:
    root = os.path.join(dataset_path, BASIS_DIR)
    binary = StorageBinaryFile(root)
    infos = binary.create_many(latent3d.basis_arrays(basis))
    manifest = BasisManifest(
        k=latent3d.NUM_KEYPOINTS,
        dim=basis.dim,
        fit_fingerprint=fit_fingerprint,
        arrays=infos,
        fingerprint=binary.fingerprint(),
    )
    StorageTextFile(root).create_json(MANIFEST_NAME, manifest.model_dump())

    dataset = read_manifest(dataset_path)
    dataset.basis_fingerprint = manifest.fingerprint
    StorageTextFile(dataset_path).create_json(MANIFEST_NAME, dataset.model_dump())
    logger.info(f"Saved {basis.dim}-dim PCA basis to {root}")
    return manifest


def load_basis(dataset_path: str) -> Tuple[latent3d.PcaBasis, BasisManifest]:
    root = os.path.join(dataset_path, BASIS_DIR)
    if not os.path.isfile(os.path.join(root, MANIFEST_NAME)):
        raise StorageError("dataset has no PCA basis; run gen-data with --pca-dim", root)
    manifest = BasisManifest.model_validate(StorageTextFile(root).get_json())
    binary = StorageBinaryFile(root)
    if binary.fingerprint() != manifest.fingerprint:
        raise StorageError("basis fingerprint does not match its manifest", root)
    return latent3d.basis_from_arrays(binary.get_many(["U", "M", "eig"])), manifest


@dataclass
class ClipFeatures:
    """Per-clip arrays the models consume, precomputed once per dataset load"""
    entry: ClipEntry
    mel: np.ndarray  # (T, 80)
    mfcc_ctx: np.ndarray  # (T, context, 13)
    pose_vectors: np.ndarray  # (T, 6)
    neutral: np.ndarray  # (T, 15, 3)
    emotional: np.ndarray  # (T, 15, 3)
    canonical: np.ndarray  # (15, 3)
    appearance: np.ndarray  # (15, 5)
    tints: np.ndarray  # (T, 3)

    @property
    def frames(self) -> int:
        return self.entry.frames

    @property
    def clip_id(self) -> int:
        return self.entry.clip_id

    @property
    def emotion(self) -> str:
        return self.entry.emotion


def clip_features(record: synthworld.ClipRecord, entry: ClipEntry, context: int = 5) -> ClipFeatures:
    log_mel = audiofeat.mel(record.utterance.waveform)
    mfcc = audiofeat.mfcc(record.utterance.waveform, log_mel)
    return ClipFeatures(
        entry=entry,
        mel=log_mel,
        mfcc_ctx=audiofeat.mfcc_context(mfcc, context),
        pose_vectors=record.pose_vectors,
        neutral=record.neutral_exprs,
        emotional=record.emotional_exprs,
        canonical=record.identity.canonical,
        appearance=record.identity.appearance,
        tints=synthworld.frame_tints(record),
    )


class SyntheticDataset:
    """A loaded dataset container with features and basis"""

    def __init__(self, path: str, context: int = 5, require_basis: bool = True):
        self.path = path
        self.manifest, self.records = load_dataset(path)
        self.basis: Optional[latent3d.PcaBasis] = None
        self.basis_manifest: Optional[BasisManifest] = None
        if require_basis or os.path.isfile(os.path.join(path, BASIS_DIR, MANIFEST_NAME)):
            self.basis, self.basis_manifest = load_basis(path)
        self.features = [clip_features(r, e, context) for r, e in zip(self.records, self.manifest.clips)]

    @property
    def fingerprint(self) -> str:
        return self.manifest.fingerprint

    def clips(self, split: str = "train", fraction: float = 1.0, exclude: Sequence[str] = ()) -> List[ClipFeatures]:
        """
        Clips of one split, nested by fraction: sorted clip ids, take a prefix.
        """
        chosen = sorted((f for f in self.features if f.entry.split == split), key=lambda f: f.clip_id)
        if fraction < 1.0:
            chosen = chosen[: max(1, int(math.ceil(fraction * len(chosen))))]
        chosen = [f for f in chosen if f.emotion not in set(exclude)]
        if not chosen:
            raise ConfigError(f"no {split} clips left (fraction {fraction}, excluded {list(exclude)})")
        return chosen


def dump_features(dataset: SyntheticDataset) -> str:
    """Write mel / MFCC-context / pose features of every clip to <dataset>/features"""
    root = os.path.join(dataset.path, FEATURES_DIR)
    StorageBinaryFile(root).create_many(
        {
            "mel": np.concatenate([f.mel for f in dataset.features]),
            "mfcc_ctx": np.concatenate([f.mfcc_ctx for f in dataset.features]),
            "pose_vectors": np.concatenate([f.pose_vectors for f in dataset.features]),
        }
    )
    logger.info(f"Dumped features of {len(dataset.features)} clips to {root}")
    return root


@dataclass
class TrainBatch:
    """Windows of `clips` clips x `centers` consecutive centre frames, clip-major"""
    window: WindowBatch
    target: torch.Tensor  # (B, 15, 3) target deformation at each centre
    neutral: torch.Tensor  # (B, 15, 3)
    tints: torch.Tensor  # (B, 3)
    emotions: List[str]
    clip_ids: List[int]
    clips: int
    centers: int

    def per_clip(self, t: torch.Tensor) -> torch.Tensor:
        return t.reshape((self.clips, self.centers) + tuple(t.shape[1:]))

    @property
    def mel_center(self) -> torch.Tensor:
        return self.window.mel[:, self.window.mel.shape[1] // 2]


def collate(
    clips: Sequence[ClipFeatures],
    centers: Sequence[np.ndarray],
    half_width: int,
    target: str = "neutral",
    device: str = "cpu",
) -> TrainBatch:
    """Gather edge-padded windows for the given centres of each clip"""
    if target not in ("neutral", "emotional"):
        raise ConfigError(f"unknown target '{target}'")
    parts: Dict[str, List[np.ndarray]] = {k: [] for k in
                                          ("mfcc", "mel", "pose_w", "pose_c", "canon", "app", "tgt", "neu", "tint")}
    emotions, clip_ids = [], []
    for feat, cen in zip(clips, centers):
        idx = audiofeat.window_indices(feat.frames, cen, half_width)
        parts["mfcc"].append(feat.mfcc_ctx[idx])
        parts["mel"].append(feat.mel[idx])
        parts["pose_w"].append(feat.pose_vectors[idx])
        parts["pose_c"].append(feat.pose_vectors[cen])
        parts["canon"].append(np.repeat(feat.canonical[None], len(cen), axis=0))
        parts["app"].append(np.repeat(feat.appearance[None], len(cen), axis=0))
        parts["tgt"].append((feat.emotional if target == "emotional" else feat.neutral)[cen])
        parts["neu"].append(feat.neutral[cen])
        parts["tint"].append(feat.tints[cen] if target == "emotional" else np.ones((len(cen), 3), np.float32))
        emotions.extend([feat.emotion] * len(cen))
        clip_ids.extend([feat.clip_id] * len(cen))
    t = {k: torch.as_tensor(np.concatenate(v), dtype=torch.float32, device=device) for k, v in parts.items()}
    window = WindowBatch(
        mfcc_ctx=t["mfcc"], mel=t["mel"], pose_window=t["pose_w"], pose_center=t["pose_c"],
        canonical=t["canon"], appearance=t["app"],
    )
    return TrainBatch(window=window, target=t["tgt"], neutral=t["neu"], tints=t["tint"], emotions=emotions,
                      clip_ids=clip_ids, clips=len(clips), centers=len(centers[0]))


def clip_batch(feat: ClipFeatures, half_width: int, target: str = "emotional", device: str = "cpu") -> TrainBatch:
    """One window per frame of a whole clip"""
    return collate([feat], [np.arange(feat.frames)], half_width, target, device)


class BatchSampler:
    """Random clips, each contributing a run of consecutive centre frames"""

    def __init__(self, clips: Sequence[ClipFeatures], batch_clips: int, centers_per_clip: int, half_width: int,
                 target: str = "neutral", seed: int = 0, device: str = "cpu"):
        self.clips = list(clips)
        self.batch_clips = batch_clips
        self.centers_per_clip = centers_per_clip
        self.half_width = half_width
        self.target = target
        self.device = device
        self.rng = np.random.default_rng([seed, 71])

    def sample(self) -> TrainBatch:
        picks = self.rng.integers(0, len(self.clips), size=self.batch_clips)
        chosen, centers = [], []
        for p in picks:
            feat = self.clips[int(p)]
            start = int(self.rng.integers(0, max(1, feat.frames - self.centers_per_clip + 1)))
            centers.append(np.clip(start + np.arange(self.centers_per_clip), 0, feat.frames - 1))
            chosen.append(feat)
        return collate(chosen, centers, self.half_width, self.target, self.device)
