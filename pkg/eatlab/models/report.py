"""Report models: evaluation metrics, ablation tables and parameter accounting."""

from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class ClipMetrics(BaseModel):
    """Metrics of one predicted clip against its ground truth"""
    clip_id: int
    emotion: str
    psnr: float
    ssim: float
    m_lmd: float
    f_lmd: float
    sync_conf: float
    emo_correct: bool
    predicted_emotion: str


class MetricSummary(BaseModel):
    """Aggregate row mirroring the columns of the benchmark table (FID excluded)"""
    psnr: float
    ssim: float
    m_lmd: float
    f_lmd: float
    sync_conf: float
    acc_emo: float = Field(..., description="Percentage of clips classified as their target emotion")


class MetricReport(BaseModel):
    """Per-clip metrics plus aggregates and provenance"""
    label: str
    aggregate: MetricSummary
    per_emotion_acc: Dict[str, float] = Field(default_factory=dict)
    per_clip: List[ClipMetrics] = Field(default_factory=list)
    caveats: List[str] = Field(default_factory=list)
    backbone_hash: Optional[str] = None
    adaptation_hash: Optional[str] = None
    dataset_fingerprint: Optional[str] = None


class AblationRow(BaseModel):
    """One configuration of an ablation matrix"""
    label: str
    psnr: float
    ssim: float
    m_lmd: float
    f_lmd: float
    sync_conf: float
    acc_emo: float
    params_added_pct: float
    seed: int


class AblationReport(BaseModel):
    """Rows of an ablation matrix, all run from one backbone with shared seeds"""
    matrix: str
    backbone_hash: str
    rows: List[AblationRow] = Field(default_factory=list)


class ParamGroup(BaseModel):
    """Exact parameter count of one group and its share of the backbone"""
    count: int
    percent: float


class ParamsReport(BaseModel):
    """Parameter accounting of backbone and adaptation groups"""
    backbone: int
    groups: Dict[str, ParamGroup]
    total_added: ParamGroup


class EditReport(BaseModel):
    """Outcome of a zero-shot expression edit toward one emotion word"""
    text: str
    steps: int
    head_init: str
    source_clips: List[int]
    source_acc: float = Field(..., description="Percent of source clips classified as the target word")
    transfer_clips: List[int]
    transfer_acc: float = Field(..., description="Percent of unseen-identity clips classified as the target word")
    loss_curve: List[List[float]] = Field(default_factory=list)
    backbone_hash: str
    adaptation_hash: str
    edited_clip_id: int = Field(..., description="Source clip rendered through the edit head into edited/")
