"""
Run browser routes: read-only access to the manifests and reports that
pretrain/adapt/critics/eval/ablate/edit runs write under the runs directory.
"""

import logging
import os
from typing import Any, Dict, List, Optional

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from eatlab.errors import StorageError
from eatlab.services.storage import MANIFEST_NAME, StorageTextFile

logger = logging.getLogger("eatlab.api.routes.runs")

router = APIRouter(prefix="/api/v1/runs", tags=["Runs"])

REPORT_FILES = ("report.json", "ablation.json", "edit_report.json")


class RunInfo(BaseModel):
    """One run directory"""
    name: str
    kind: str
    step: int = 0
    has_report: bool = False


class RunListResponse(BaseModel):
    runs: List[RunInfo] = []
    root: str


def runs_root() -> str:
    root = os.environ.get("EATLAB_RUNS_DIR")
    if not root:
        logger.info("EATLAB_RUNS_DIR not set, browsing ./runs")
        root = "runs"
    return os.path.abspath(root)


def resolve_run(name: str) -> str:
    """Absolute run directory for `name`; 404 for anything outside the runs root"""
    root = runs_root()
    path = os.path.abspath(os.path.join(root, name))
    if os.path.dirname(path) != root or not os.path.isfile(os.path.join(path, MANIFEST_NAME)):
        raise HTTPException(status_code=404, detail=f"Run not found: {name}")
    return path


def _report_name(path: str) -> Optional[str]:
    return next((n for n in REPORT_FILES if os.path.isfile(os.path.join(path, n))), None)


@router.get("", response_model=RunListResponse)
async def list_runs():
    """
    List run directories that hold a manifest
    """
    root = runs_root()
    runs = []
    if os.path.isdir(root):
        for name in sorted(os.listdir(root)):
            path = os.path.join(root, name)
            if not os.path.isfile(os.path.join(path, MANIFEST_NAME)):
                continue
            try:
                manifest = StorageTextFile(path).get_json()
            except StorageError as e:
                logger.warning(f"Skipping unreadable run {name}: {e}")
                continue
            runs.append(RunInfo(name=name, kind=manifest.get("kind", "unknown"), step=manifest.get("step", 0),
                                has_report=_report_name(path) is not None))
    logger.info(f"Listed {len(runs)} runs under {root}")
    return RunListResponse(runs=runs, root=root)


@router.get("/{name}/manifest")
async def get_manifest(name: str) -> Dict[str, Any]:
    """
    Manifest of one run
    """
    return StorageTextFile(resolve_run(name)).get_json()


@router.get("/{name}/report")
async def get_report(name: str) -> Dict[str, Any]:
    """
    Metric, ablation or edit report of one run
    """
    path = resolve_run(name)
    report = _report_name(path)
    if report is None:
        raise HTTPException(status_code=404, detail=f"Run {name} has no report")
    return StorageTextFile(path).get_json(report)
