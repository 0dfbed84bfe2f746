"""
Evaluation metrics on rendered clips and keypoint sequences.

PSNR is capped at 99 dB (identical frames); SSIM uses a 7x7 uniform window
with the usual constants; M-LMD / F-LMD are mean pixel distances between
projected mouth / all keypoints. FID is not computed.
"""

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from eatlab.core import render
from eatlab.core.critics import SYNC_WINDOW, CriticSet, sliding_windows
from eatlab.core.synthworld import MOUTH
from eatlab.models.report import ClipMetrics, MetricReport, MetricSummary

PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SYNC_CAVEAT = "sync_conf on emotional clips is unreliable: the sync expert is sensitive to emotional mouth shapes"


def psnr(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """PSNR in dB over all frames and pixels (values in [0, 1])"""
    mse = float(torch.mean((pred.double() - gt.double()) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """Mean SSIM of (B, 3, H, W) frames, per channel, valid 7x7 windows"""
    x, y = pred.double(), gt.double()
    pool = lambda t: F.avg_pool2d(t, SSIM_WINDOW, stride=1)
    mu_x, mu_y = pool(x), pool(y)
    var_x = pool(x * x) - mu_x * mu_x
    var_y = pool(y * y) - mu_y * mu_y
    cov = pool(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float((num / den).mean())


def landmark_distance(pred_k: torch.Tensor, gt_k: torch.Tensor, indices: Optional[Sequence[int]] = None) -> float:
    """Mean pixel distance between projected keypoints, (T, 15, 3) each"""
    if indices is not None:
        pred_k, gt_k = pred_k[:, list(indices)], gt_k[:, list(indices)]
    diff = render.project(pred_k.double()) - render.project(gt_k.double())
    return float(diff.norm(dim=-1).mean())


def sync_confidence(critics: CriticSet, exprs: torch.Tensor, mel: torch.Tensor) -> float:
    """Mean sync cosine over every 5-frame window of a clip; exprs (T, 15, 3), mel (T, 80)"""
    sync = critics.require("sync")
    with torch.no_grad():
        v_win = sliding_windows(exprs.unsqueeze(0), SYNC_WINDOW)
        a_win = sliding_windows(mel.unsqueeze(0), SYNC_WINDOW)
        return float(sync.confidence(v_win, a_win).mean())


@dataclass
class ClipPrediction:
    """Everything metrics need for one clip, predicted or ground truth"""
    frames: torch.Tensor  # (T, 3, H, W)
    keypoints: torch.Tensor  # (T, 15, 3)
    exprs: torch.Tensor  # (T, 15, 3) emotional deformation E'


def eval_metrics(
    clip_id: int,
    emotion: str,
    pred: ClipPrediction,
    gt: ClipPrediction,
    mel: torch.Tensor,
    critics: CriticSet,
) -> ClipMetrics:
    """All per-clip metrics; the classifier reads the predicted deformations"""
    classifier = critics.require("classifier")
    with torch.no_grad():
        predicted = classifier.predict(pred.exprs.unsqueeze(0))[0]
    return ClipMetrics(
        clip_id=clip_id,
        emotion=emotion,
        psnr=psnr(pred.frames, gt.frames),
        ssim=ssim(pred.frames, gt.frames),
        m_lmd=landmark_distance(pred.keypoints, gt.keypoints, MOUTH),
        f_lmd=landmark_distance(pred.keypoints, gt.keypoints),
        sync_conf=sync_confidence(critics, pred.exprs, mel),
        emo_correct=predicted == emotion,
        predicted_emotion=predicted,
    )


def summarize(per_clip: Sequence[ClipMetrics]) -> Tuple[MetricSummary, Dict[str, float]]:
    """Aggregate means and per-emotion accuracy (percent)"""
    n = max(1, len(per_clip))
    mean = lambda key: sum(getattr(c, key) for c in per_clip) / n
    by_emotion: Dict[str, List[bool]] = defaultdict(list)
    for c in per_clip:
        by_emotion[c.emotion].append(c.emo_correct)
    per_emotion = {e: 100.0 * sum(v) / len(v) for e, v in sorted(by_emotion.items())}
    summary = MetricSummary(
        psnr=mean("psnr"),
        ssim=mean("ssim"),
        m_lmd=mean("m_lmd"),
        f_lmd=mean("f_lmd"),
        sync_conf=mean("sync_conf"),
        acc_emo=100.0 * sum(c.emo_correct for c in per_clip) / n,
    )
    return summary, per_emotion


def build_report(label: str, per_clip: Sequence[ClipMetrics], **provenance) -> MetricReport:
    summary, per_emotion = summarize(per_clip)
    caveats = [SYNC_CAVEAT] if any(c.emotion != "neutral" for c in per_clip) else []
    return MetricReport(
        label=label,
        aggregate=summary,
        per_emotion_acc=per_emotion,
        per_clip=list(per_clip),
        caveats=caveats,
        **provenance,
    )


TABLE_COLUMNS = [("PSNR", "psnr", "{:.2f}"), ("SSIM", "ssim", "{:.3f}"), ("M-LMD", "m_lmd", "{:.3f}"),
                 ("F-LMD", "f_lmd", "{:.3f}"), ("Sync", "sync_conf", "{:.3f}"), ("Acc_emo", "acc_emo", "{:.2f}")]


def format_table(rows: Sequence[Tuple[str, object]], extra: Optional[Sequence[Tuple[str, str, str]]] = None) -> str:
    """
    Aligned plain-text table.

    Args:
        rows: (label, object with the metric attributes) pairs
        extra: additional (header, attribute, format) columns
    """
    columns = list(TABLE_COLUMNS) + list(extra or [])
    header = ["Method"] + [c[0] for c in columns]
    body = [[label] + [fmt.format(getattr(obj, key)) for _, key, fmt in columns] for label, obj in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    line = lambda cells: "  ".join(cell.ljust(widths[0]) if i == 0 else cell.rjust(widths[i])
                                   for i, cell in enumerate(cells))
    out = [line(header), "-" * len(line(header))] + [line(r) for r in body]
    return "\n".join(out) + "\n"
