"""
Ablation runner: one adapt + eval run per cell of a configuration matrix, all
from the same backbone and the same seed.
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from eatlab.core.metrics import format_table
from eatlab.errors import ConfigError
from eatlab.models.config import AdaptConfig, RunConfig
from eatlab.models.manifest import CheckpointManifest
from eatlab.models.report import AblationReport, AblationRow
from eatlab.services.checkpoints import checkpoint_hash
from eatlab.services.storage import MANIFEST_NAME, StorageTextFile
from eatlab.services.trainer import adapt, check_backbone_hash, evaluate

logger = logging.getLogger("eatlab.ablation")

ABLATION_JSON = "ablation.json"
ABLATION_TXT = "ablation.txt"


@dataclass(frozen=True)
class AblationCell:
    label: str
    slug: str
    adapt: Dict[str, object] = field(default_factory=dict)
    run: Dict[str, object] = field(default_factory=dict)
    steps_factor: int = 1


PROMPTS_ONLY = {"use_edn": False, "use_eam": False}

MATRICES: Dict[str, List[AblationCell]] = {
    "prompt-depth": [
        AblationCell("w/o prompts", "none", {"prompt_depth": "none", **PROMPTS_ONLY}),
        AblationCell("shallow", "shallow", {"prompt_depth": "shallow", **PROMPTS_ONLY}),
        AblationCell("deep", "deep", {"prompt_depth": "deep", **PROMPTS_ONLY}),
    ],
    "components": [
        AblationCell("prompts", "prompts", dict(PROMPTS_ONLY)),
        AblationCell("prompts+EDN", "prompts_edn", {"use_eam": False}),
        AblationCell("prompts+EDN+EAM", "full"),
    ],
    "edn-init": [
        AblationCell("EDN from A2ET", "edn_a2et", {"edn_init": "a2et"}),
        AblationCell("EDN random", "edn_random", {"edn_init": "random"}),
    ],
    "data-fraction": [
        AblationCell("25%", "frac_25", run={"data_fraction": 0.25}),
        AblationCell("50%", "frac_50", run={"data_fraction": 0.5}),
        AblationCell("100%", "frac_100", run={"data_fraction": 1.0}),
        AblationCell("25% (2x steps)", "frac_25_x2", run={"data_fraction": 0.25}, steps_factor=2),
    ],
}


def cell_config(config: RunConfig, cell: AblationCell) -> RunConfig:
    """The adapt config of one cell; validated like any other run"""
    data = config.model_dump()
    data["stage"] = "adapt"
    data["adapt"] = {**(data.get("adapt") or AdaptConfig().model_dump()), **cell.adapt}
    data.update(cell.run)
    data["steps"] = config.steps * cell.steps_factor
    data["out_dir"] = os.path.join(config.out_dir, cell.slug)
    return RunConfig.model_validate(data)


def _run_cell(payload: Tuple[dict, str, str]) -> dict:
    """Adapt and evaluate one cell; top level so worker processes can pickle it"""
    data, backbone_dir, label = payload
    config = RunConfig.model_validate(data)
    manifest = adapt(config, backbone_dir)
    eval_config = config.model_copy(update={"stage": "eval", "out_dir": os.path.join(config.out_dir, "eval")})
    report = evaluate(eval_config, backbone_dir, config.out_dir, label=label)
    counts = manifest.param_counts
    added = sum(counts.get(g, 0) for g in ("prompts", "edn", "eam"))
    row = AblationRow(
        label=label,
        params_added_pct=100.0 * added / counts["backbone"],
        seed=config.seed,
        **report.aggregate.model_dump(),
    )
    return row.model_dump()


def run_ablation(config: RunConfig, backbone_dir: str, matrix: str, workers: int = 1) -> AblationReport:
    """
    Run every cell of `matrix` and write ablation.json / ablation.txt.

    Args:
        config: Base adapt config; its seed is shared by every cell
        backbone_dir: Pretrained backbone all cells adapt
        matrix: One of MATRICES
        workers: Cells run in this many processes
    """
    if matrix not in MATRICES:
        raise ConfigError(f"unknown ablation matrix '{matrix}'; expected one of {sorted(MATRICES)}")
    backbone_hash = checkpoint_hash(backbone_dir)
    check_backbone_hash(config, backbone_hash)
    cells = MATRICES[matrix]
    payloads = [(cell_config(config, c).model_dump(), backbone_dir, c.label) for c in cells]
    logger.info(f"Ablation '{matrix}': {len(cells)} cells, {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, payloads))
    else:
        rows = [_run_cell(p) for p in payloads]

    report = AblationReport(matrix=matrix, backbone_hash=backbone_hash,
                            rows=[AblationRow.model_validate(r) for r in rows])
    storage = StorageTextFile(config.out_dir)
    storage.create_json(ABLATION_JSON, report.model_dump())
    storage.create(ABLATION_TXT, format_table([(r.label, r) for r in report.rows],
                                              extra=[("Params%", "params_added_pct", "{:.2f}")]))
    storage.create_json(
        MANIFEST_NAME,
        CheckpointManifest(kind="ablation", config=config.model_dump(), upstream_hash=backbone_hash,
                           matrix=matrix).model_dump(),
    )
    return report
