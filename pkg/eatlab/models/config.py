"""
Configuration models.

Every run resolves one RunConfig and writes it (model_dump) into its manifest,
so the config plus the seeds fully determine the run.
"""

import math
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

EMOTIONS: List[str] = [
    "neutral",
    "happy",
    "angry",
    "disgusted",
    "fear",
    "sad",
    "surprised",
    "contempt",
]


class A2etConfig(BaseModel):
    """Shape of the audio-to-expression transformer backbone"""
    model_config = ConfigDict(extra="forbid")

    layers_enc: int = Field(6, ge=1, description="Encoder transformer layers")
    layers_dec: int = Field(6, ge=1, description="Decoder transformer layers")
    heads: int = Field(8, ge=1, description="Attention heads")
    token_dim: int = Field(128, ge=8, description="Width of every token")
    ff_dim: int = Field(1024, ge=8, description="Feed-forward hidden width")
    half_width: int = Field(4, ge=0, description="Window half width w; windows hold 2w+1 frames")
    pca_dim: int = Field(32, ge=1, le=45, description="PCA code length predicted by the head")
    d_s: int = Field(64, ge=1, description="Semantic feature width")
    d_a: int = Field(64, ge=1, description="Acoustic feature width")
    dropout: float = Field(0.1, ge=0.0, lt=1.0, description="Dropout in attention and feed-forward")
    n_mels: int = Field(80, description="Mel bins")
    n_mfcc: int = Field(13, description="MFCC coefficients kept")
    mfcc_context: int = Field(5, ge=1, description="MFCC frames seen by the semantic projection")
    num_keypoints: int = Field(15, description="Latent keypoints k")
    appearance_dim: int = Field(5, description="Appearance parameters per keypoint")

    @model_validator(mode="after")
    def _check_widths(self) -> "A2etConfig":
        if self.token_dim % self.heads != 0:
            raise ValueError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if self.d_s >= self.token_dim:
            raise ValueError("d_s must leave room for the pose-window embedding in a speech token")
        if self.mfcc_context % 2 == 0:
            raise ValueError("mfcc_context must be odd so the context is centred")
        return self

    @property
    def window(self) -> int:
        return 2 * self.half_width + 1


class AdaptConfig(BaseModel):
    """Sizes and toggles of the emotional adaptation modules"""
    model_config = ConfigDict(extra="forbid")

    latent_dim: int = Field(16, description="Length of the latent code z")
    mapper_hidden: int = Field(32, ge=1, description="Hidden width of the emotion mapper")
    trunk_layers: int = Field(4, ge=1, description="Shared MLP layers")
    head_layers: int = Field(4, ge=1, description="Per-emotion MLP layers")
    eam_hidden: int = Field(16, ge=1, description="Hidden width of each EAM")
    edn_layers: int = Field(1, ge=1, description="Encoder layers in the EDN")
    edn_ff_dim: int = Field(128, ge=1, description="Feed-forward width of the EDN layers")
    edn_head_hidden: int = Field(128, ge=1, description="Hidden width of the EDN pooling head")
    prompt_depth: Literal["none", "shallow", "deep"] = "deep"
    prompt_site: Literal["encoder", "decoder", "both"] = "encoder"
    use_edn: bool = True
    use_eam: bool = True
    edn_init: Literal["a2et", "random"] = "a2et"
    debug_bounds: bool = Field(False, description="Assert the EAM tanh bound on every forward")

    @property
    def use_prompts(self) -> bool:
        return self.prompt_depth != "none"


class LossWeights(BaseModel):
    """Re-weighting of the loss terms; in zero-shot mode the `rec` weight applies to the clip-like term"""
    model_config = ConfigDict(extra="forbid")

    lat: float = Field(1.0, ge=0.0)
    sync: float = Field(0.3, ge=0.0)
    rec: float = Field(1.0, ge=0.0)

    @model_validator(mode="after")
    def _check_positive(self) -> "LossWeights":
        values = [self.lat, self.sync, self.rec]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("loss weights must be finite")
        if not any(v > 0 for v in values):
            raise ValueError("at least one loss weight must be positive")
        return self


class OptimizerConfig(BaseModel):
    """Adam settings"""
    model_config = ConfigDict(extra="forbid")

    beta1: float = 0.5
    beta2: float = 0.999
    lr_backbone: float = Field(1.5e-4, gt=0.0)
    lr_adapt: float = Field(2e-4, gt=0.0)
    lr_critic: float = Field(1e-3, gt=0.0)


class WorldConfig(BaseModel):
    """Parameters of the synthetic data generator"""
    model_config = ConfigDict(extra="forbid")

    identities: int = Field(20, ge=2)
    clips_per_identity: int = Field(8, ge=1)
    frames: int = Field(50, ge=5)
    emotions: List[str] = Field(default_factory=lambda: list(EMOTIONS))
    intensities: List[float] = Field(default_factory=lambda: [1.0])
    seed: int = 0
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)

    @field_validator("emotions")
    @classmethod
    def _known_emotions(cls, value: List[str]) -> List[str]:
        unknown = [e for e in value if e not in EMOTIONS]
        if unknown:
            raise ValueError(f"unknown emotions: {unknown}")
        if not value:
            raise ValueError("at least one emotion is required")
        return value

    @field_validator("intensities")
    @classmethod
    def _unit_interval(cls, value: List[float]) -> List[float]:
        if not value or any(not 0.0 <= v <= 1.0 for v in value):
            raise ValueError("intensities must be a non-empty list in [0, 1]")
        return value


class RunConfig(BaseModel):
    """Everything one pretrain/adapt/edit/critics/eval run needs"""
    model_config = ConfigDict(extra="forbid")

    stage: Literal["pretrain", "adapt", "edit", "critics", "eval"]
    dataset_dir: str = Field(..., description="Dataset container directory")
    out_dir: str = Field(..., description="Directory the run writes into")
    critics_dir: Optional[str] = Field(None, description="Metric models from the critics stage")
    expected_backbone_hash: Optional[str] = Field(None, description="Refuse to adapt or evaluate against any other backbone")
    seed: int = 0
    a2et: A2etConfig = Field(default_factory=A2etConfig)
    adapt: Optional[AdaptConfig] = None
    optim: OptimizerConfig = Field(default_factory=OptimizerConfig)
    weights: LossWeights = Field(default_factory=LossWeights)
    data_fraction: float = 1.0
    steps: int = Field(20000, ge=0, description="Optimizer steps")
    phase1_fraction: float = Field(0.5, ge=0.0, le=1.0, description="Share of pretrain steps on latent loss only")
    batch_clips: int = Field(2, ge=1, description="Clips sampled per step")
    centers_per_clip: int = Field(11, ge=1, description="Consecutive centre frames per sampled clip")
    eval_interval: int = Field(500, ge=1)
    log_every: int = Field(100, ge=1)
    val_clips: int = Field(16, ge=1)
    held_out_emotions: List[str] = Field(default_factory=list)
    edit_text: str = "surprised"
    edit_head_init: Literal["neutral", "random"] = "neutral"
    device: str = "cpu"

    @field_validator("data_fraction")
    @classmethod
    def _fraction(cls, value: float) -> float:
        if value not in (0.25, 0.5, 1.0):
            raise ValueError("data_fraction must be one of 0.25, 0.5, 1.0")
        return value

    @field_validator("held_out_emotions")
    @classmethod
    def _held_out(cls, value: List[str]) -> List[str]:
        unknown = [e for e in value if e not in EMOTIONS]
        if unknown:
            raise ValueError(f"unknown held-out emotions: {unknown}")
        return value

    @model_validator(mode="after")
    def _stage_rules(self) -> "RunConfig":
        if self.adapt is not None and self.stage not in ("adapt", "edit", "eval"):
            raise ValueError("component toggles are only valid in the adapt stage")
        if self.stage in ("adapt", "edit") and self.adapt is None:
            self.adapt = AdaptConfig()
        return self
