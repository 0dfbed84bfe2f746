"""
Training losses.

    L = lat * L_lat + sync * L_sync + rec * L_rec       (rec -> clip in zero-shot mode)
"""

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from eatlab.errors import AlignmentError, UnknownEmotionError, UsageError
from eatlab.models.config import LossWeights

if TYPE_CHECKING:
    from eatlab.core.critics import ToyTextImageEmbedder

SYNC_EPS = 1e-8
SYNC_COS_FLOOR = 1e-6
PERCEPTUAL_WEIGHT = 0.1
PERCEPTUAL_SEED = 1234


def latent_loss(
    pred_pe: Optional[torch.Tensor],
    gt_pe: Optional[torch.Tensor],
    pred_k: torch.Tensor,
    gt_k: torch.Tensor,
    edn_mode: bool = False,
) -> torch.Tensor:
    """
    Mean over N frames of |PE - PE_gt|^2 + |K - K_gt|^2.

    Args:
        pred_pe, gt_pe: (N, pca_dim); unused in EDN mode
        pred_k, gt_k: (N, 15, 3)
        edn_mode: keypoint term only
    """
    if pred_k.shape != gt_k.shape:
        raise AlignmentError(f"keypoint shapes differ: {tuple(pred_k.shape)} vs {tuple(gt_k.shape)}")
    k_term = (pred_k - gt_k).pow(2).flatten(1).sum(dim=1)
    if edn_mode:
        return k_term.mean()
    if pred_pe is None or gt_pe is None:
        raise UsageError("PE term requested without PE tensors")
    if pred_pe.shape != gt_pe.shape or pred_pe.shape[0] != pred_k.shape[0]:
        raise AlignmentError(f"PE shapes {tuple(pred_pe.shape)} / {tuple(gt_pe.shape)} do not match {pred_k.shape[0]} frames")
    return ((pred_pe - gt_pe).pow(2).sum(dim=-1) + k_term).mean()


def sync_loss(v: torch.Tensor, s: torch.Tensor, eps: float = SYNC_EPS) -> torch.Tensor:
    """-log(cos(v, s)), cosine clamped to [1e-6, 1]; mean over leading axes"""
    dot = (v * s).sum(dim=-1)
    denom = torch.sqrt((v * v).sum(dim=-1) * (s * s).sum(dim=-1)).clamp_min(eps)
    cos = (dot / denom).clamp(SYNC_COS_FLOOR, 1.0)
    return -torch.log(cos).mean()


class PerceptualPyramid(nn.Module):
    """Fixed random 3x3 conv features at three scales; nothing here is trained"""

    def __init__(self, scales: int = 3, channels: int = 16, seed: int = PERCEPTUAL_SEED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        weights = []
        in_ch = 3
        for _ in range(scales):
            w = torch.randn(channels, in_ch, 3, 3, generator=gen) / (3.0 * in_ch ** 0.5)
            weights.append(w)
            in_ch = channels
        for i, w in enumerate(weights):
            self.register_buffer(f"w{i}", w)
        self.scales = scales

    def features(self, x: torch.Tensor):
        feats = []
        for i in range(self.scales):
            x = F.relu(F.conv2d(x, getattr(self, f"w{i}").to(x.dtype), padding=1))
            feats.append(x)
            x = F.avg_pool2d(x, 2)
        return feats

    def forward(self, pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
        return sum(F.mse_loss(a, b) for a, b in zip(self.features(pred), self.features(gt)))


_PYRAMID: Optional[PerceptualPyramid] = None


def perceptual_pyramid() -> PerceptualPyramid:
    global _PYRAMID
    if _PYRAMID is None:
        _PYRAMID = PerceptualPyramid()
    return _PYRAMID


def recon_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    L1 inside the face mask plus 0.1 x perceptual distance over full frames.

    Args:
        pred, gt: (B, 3, H, W)
        mask: (B, H, W) boolean
    """
    if pred.shape != gt.shape:
        raise AlignmentError(f"frame shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if not bool(mask.any()):
        raise UsageError("face mask is empty")
    weight = mask.unsqueeze(1).to(pred.dtype).expand_as(pred)
    l1 = ((pred - gt).abs() * weight).sum() / weight.sum()
    return l1 + PERCEPTUAL_WEIGHT * perceptual_pyramid().to(pred.device)(pred, gt)


def clip_like_loss(frames: torch.Tensor, word: str, embedder: "ToyTextImageEmbedder") -> torch.Tensor:
    """
    1 - cos between the rendered frames and an emotion word under the
    text-image embedder; mean over frames, in [0, 2].

    Args:
        frames: (B, 3, H, W)
        word: one of the embedder's words
    """
    if word not in embedder.words:
        raise UnknownEmotionError(f"unknown emotion word '{word}'; expected one of {embedder.words}")
    image_embed = embedder.embed_image(frames)
    text_embed = embedder.embed_text(word)
    cos = F.cosine_similarity(image_embed, text_embed.expand_as(image_embed), dim=-1)
    return (1.0 - cos).mean()


@dataclass
class LossParts:
    lat: Optional[torch.Tensor] = None
    sync: Optional[torch.Tensor] = None
    rec: Optional[torch.Tensor] = None
    clip: Optional[torch.Tensor] = None

    def as_floats(self) -> dict:
        return {k: float(v.detach()) for k, v in self.__dict__.items() if v is not None}


def total_loss(parts: LossParts, weights: LossWeights, zero_shot: bool = False) -> torch.Tensor:
    """Weighted sum of the present terms; zero-shot mode puts clip in the rec slot"""
    terms = [(weights.lat, parts.lat), (weights.sync, parts.sync)]
    terms.append((weights.rec, parts.clip if zero_shot else parts.rec))
    present = [w * t for w, t in terms if t is not None and w != 0.0]
    if not present:
        ref = next((t for t in (parts.lat, parts.sync, parts.rec, parts.clip) if t is not None), None)
        if ref is None:
            raise UsageError("no loss terms supplied")
        return ref.new_zeros(())
    return torch.stack(present).sum()
