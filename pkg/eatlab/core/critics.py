"""
Small metric models trained on oracle data only: a sync expert, an emotion
classifier and a joint text-image embedder. They drive the sync and clip-like
losses and the sync_conf / acc_emo metrics.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from eatlab.core import latent3d
from eatlab.core.a2et import MEL_OFFSET, MEL_SCALE
from eatlab.core.render import IMAGE_SIZE
from eatlab.core.synthworld import MOUTH
from eatlab.errors import MetricModelMissingError, UnknownEmotionError
from eatlab.models.config import EMOTIONS

SYNC_WINDOW = 5
EMBED_DIM = 64
EXPR_SCALE = 10.0


class ToySyncNet(nn.Module):
    """Audio (mel window) and video (mouth deformation window) encoders into one 64-d space"""

    def __init__(self, n_mels: int = 80, window: int = SYNC_WINDOW, embed_dim: int = EMBED_DIM, hidden: int = 128):
        super().__init__()
        self.window = window
        mouth_dims = len(MOUTH) * 3
        self.audio = nn.Sequential(
            nn.Flatten(1), nn.Linear(window * n_mels, hidden), nn.GELU(), nn.Linear(hidden, embed_dim)
        )
        self.video = nn.Sequential(
            nn.Flatten(1), nn.Linear(window * mouth_dims, hidden), nn.GELU(), nn.Linear(hidden, embed_dim)
        )

    def embed_audio(self, mel_windows: torch.Tensor) -> torch.Tensor:
        """(B, window, n_mels) -> (B, 64)"""
        return self.audio((mel_windows - MEL_OFFSET) / MEL_SCALE)

    def embed_video(self, expr_windows: torch.Tensor) -> torch.Tensor:
        """(B, window, 15, 3) deformations -> (B, 64); reads only the mouth keypoints"""
        return self.video(expr_windows[:, :, list(MOUTH), :] * EXPR_SCALE)

    def confidence(self, expr_windows: torch.Tensor, mel_windows: torch.Tensor) -> torch.Tensor:
        """Cosine similarity of the two embeddings, per window"""
        return F.cosine_similarity(self.embed_video(expr_windows), self.embed_audio(mel_windows), dim=-1)


class ToyEmotionClassifier(nn.Module):
    """Per-frame MLP over flattened deformations, mean over time, 8-way logits"""

    def __init__(self, labels: Sequence[str] = EMOTIONS, hidden: int = 64):
        super().__init__()
        self.labels = list(labels)
        self.frame = nn.Sequential(
            nn.Linear(latent3d.FLAT_DIM, hidden), nn.GELU(), nn.Linear(hidden, hidden), nn.GELU()
        )
        self.out = nn.Linear(hidden, len(self.labels))

    def forward(self, exprs: torch.Tensor) -> torch.Tensor:
        """(B, T, 15, 3) -> (B, classes)"""
        return self.out(self.frame(exprs.flatten(2) * EXPR_SCALE).mean(dim=1))

    def predict(self, exprs: torch.Tensor) -> List[str]:
        return [self.labels[i] for i in self(exprs).argmax(dim=-1).tolist()]


class ToyTextImageEmbedder(nn.Module):
    """Learned emotion-word table and a conv image encoder, both unit-normalised"""

    def __init__(self, words: Sequence[str] = EMOTIONS, embed_dim: int = EMBED_DIM, image_size: int = IMAGE_SIZE):
        super().__init__()
        self.words = list(words)
        self.text = nn.Embedding(len(self.words), embed_dim)
        self.image = nn.Sequential(
            nn.Conv2d(3, 16, 4, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(16, 32, 4, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(32, 64, 4, stride=2, padding=1),
            nn.GELU(),
            nn.Flatten(1),
            nn.Linear(64 * (image_size // 8) ** 2, embed_dim),
        )
        self.register_buffer("logit_scale", torch.tensor(10.0))

    def word_index(self, word: str) -> int:
        if word not in self.words:
            raise UnknownEmotionError(f"unknown emotion word '{word}'; expected one of {self.words}")
        return self.words.index(word)

    def embed_text(self, words: Union[str, Sequence[str]]) -> torch.Tensor:
        single = isinstance(words, str)
        idx = torch.tensor([self.word_index(w) for w in ([words] if single else words)], device=self.text.weight.device)
        emb = F.normalize(self.text(idx), dim=-1)
        return emb[0] if single else emb

    def embed_image(self, frames: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.image(frames), dim=-1)

    def vocabulary_logits(self, frames: torch.Tensor) -> torch.Tensor:
        """Scaled cosine of each frame against every word, (B, words)"""
        return self.logit_scale * self.embed_image(frames) @ F.normalize(self.text.weight, dim=-1).T


@dataclass
class CriticSet:
    sync: Optional[ToySyncNet] = None
    classifier: Optional[ToyEmotionClassifier] = None
    embedder: Optional[ToyTextImageEmbedder] = None
    dataset_fingerprint: Optional[str] = None

    def require(self, name: str) -> nn.Module:
        model = getattr(self, name)
        if model is None:
            raise MetricModelMissingError(f"metric model '{name}' is not loaded; run `eatlab critics` first")
        return model

    def eval(self) -> "CriticSet":
        for model in (self.sync, self.classifier, self.embedder):
            if model is not None:
                model.eval()
                for p in model.parameters():
                    p.requires_grad = False
        return self


def sliding_windows(seq: torch.Tensor, window: int = SYNC_WINDOW) -> torch.Tensor:
    """
    All length-`window` windows along axis 1.

    Args:
        seq: (C, n, ...) consecutive frames per clip

    Returns:
        (C * (n - window + 1), window, ...)
    """
    count = seq.shape[1] - window + 1
    if count < 1:
        raise ValueError(f"need at least {window} consecutive frames, got {seq.shape[1]}")
    stacked = torch.stack([seq[:, i : i + window] for i in range(count)], dim=1)
    return stacked.reshape((-1, window) + tuple(seq.shape[2:]))
