# Pydantic schemas shared by services, routes and the CLI
from .config import (
    EMOTIONS,
    A2etConfig,
    AdaptConfig,
    LossWeights,
    OptimizerConfig,
    RunConfig,
    WorldConfig,
)
from .manifest import (
    ArrayInfo,
    BasisManifest,
    CheckpointManifest,
    ClipEntry,
    DatasetManifest,
    Snapshot,
)
from .report import (
    AblationReport,
    AblationRow,
    ClipMetrics,
    EditReport,
    MetricReport,
    MetricSummary,
    ParamGroup,
    ParamsReport,
)

__all__ = [
    "EMOTIONS",
    "A2etConfig",
    "AdaptConfig",
    "LossWeights",
    "OptimizerConfig",
    "RunConfig",
    "WorldConfig",
    "ArrayInfo",
    "BasisManifest",
    "CheckpointManifest",
    "ClipEntry",
    "DatasetManifest",
    "Snapshot",
    "AblationReport",
    "AblationRow",
    "ClipMetrics",
    "EditReport",
    "MetricReport",
    "MetricSummary",
    "ParamGroup",
    "ParamsReport",
]
