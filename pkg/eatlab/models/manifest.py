"""Manifest models written next to every array container."""

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

SCHEMA_VERSION = 1


class ArrayInfo(BaseModel):
    """Shape and dtype of one named array blob"""
    shape: List[int]
    dtype: str


class ClipEntry(BaseModel):
    """One clip of a dataset container"""
    clip_id: int
    identity_id: int
    identity_seed: int
    emotion: str
    intensity: float
    frames: int
    frame_offset: int = Field(..., description="First row of this clip in the per-frame arrays")
    utterance_seed: int
    pose_seed: int
    split: str = Field(..., description="train or test (split by identity)")


class DatasetManifest(BaseModel):
    """Manifest of a synthetic dataset container"""
    model_config = ConfigDict(extra="allow")

    schema_version: int = SCHEMA_VERSION
    kind: str = "dataset"
    world: Dict[str, Any]
    clips: List[ClipEntry]
    arrays: Dict[str, ArrayInfo] = Field(default_factory=dict)
    fingerprint: str = ""
    basis_fingerprint: Optional[str] = None


class BasisManifest(BaseModel):
    """Manifest of a PCA basis container"""
    schema_version: int = SCHEMA_VERSION
    kind: str = "pca_basis"
    k: int
    dim: int
    flatten_order: str = "row-major (keypoint, axis)"
    fit_fingerprint: str = Field(..., description="Fingerprint of the deformations the basis was fit on")
    arrays: Dict[str, ArrayInfo] = Field(default_factory=dict)
    fingerprint: str = ""


class Snapshot(BaseModel):
    """Interval evaluation taken during adaptation"""
    step: int
    val_latent: float
    acc_emo: Optional[float] = Field(None, description="Validation emotion accuracy; needs the classifier")


class CheckpointManifest(BaseModel):
    """Manifest of a parameter container (backbone, adaptation or metric model)"""
    model_config = ConfigDict(extra="allow")

    schema_version: int = SCHEMA_VERSION
    kind: str = Field(..., description="backbone, adaptation or critic:<name>")
    config: Dict[str, Any] = Field(default_factory=dict)
    step: int = 0
    phase_boundary: Optional[int] = None
    upstream_hash: Optional[str] = Field(None, description="Fingerprint of the checkpoint this one was trained against")
    dataset_fingerprint: Optional[str] = None
    basis_fingerprint: Optional[str] = None
    param_counts: Dict[str, int] = Field(default_factory=dict)
    loss_curve: List[List[float]] = Field(default_factory=list)
    snapshots: List[Snapshot] = Field(default_factory=list)
    arrays: Dict[str, ArrayInfo] = Field(default_factory=dict)
    fingerprint: str = ""
