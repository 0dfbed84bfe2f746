"""
Audio-to-Expression Transformer (A2ET).

For a window of 2w+1 frames centred on frame i the encoder reads speech tokens
(semantic features + head-pose window) followed by one pose token for frame i.
The decoder reads acoustic tokens, each fused additively with the latent source
token of the identity, cross-attends to the encoder memory and returns 2w+1
token features. The head reads only the centre feature and predicts the PCA
code of the expression deformation, which is back-projected with E = PE U^T + M.

Adaptation plugs in through AdaptationHooks: gated prompt tokens per layer and a
feature modulator for the acoustic and identity encoder outputs. Without hooks
the forward pass is the pretrained one.
"""

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from eatlab.core import latent3d
from eatlab.errors import ConfigError, UsageError
from eatlab.models.config import A2etConfig

MEL_OFFSET, MEL_SCALE = -5.0, 8.0
MFCC_SCALE = 20.0
A2ET_SITES = ("a2et.acoustic", "a2et.identity")


@dataclass
class WindowBatch:
    """A batch of B windows; all tensors share the leading batch axis"""
    mfcc_ctx: torch.Tensor  # (B, 2w+1, ctx, 13)
    mel: torch.Tensor  # (B, 2w+1, 80)
    pose_window: torch.Tensor  # (B, 2w+1, 6)
    pose_center: torch.Tensor  # (B, 6)
    canonical: torch.Tensor  # (B, 15, 3)
    appearance: torch.Tensor  # (B, 15, 5)

    @property
    def size(self) -> int:
        return self.mel.shape[0]

    def to(self, *args, **kwargs) -> "WindowBatch":
        return WindowBatch(**{k: v.to(*args, **kwargs) for k, v in self.__dict__.items()})


@dataclass
class AdaptationHooks:
    """
    Everything the adaptation stage injects into one forward pass.

    enc_prompts / dec_prompts hold one (B, D) token per layer (deep) or a single
    token (shallow); gates hold the per-layer, per-head gate parameters.
    """
    depth: str = "none"
    enc_prompts: Optional[List[torch.Tensor]] = None
    dec_prompts: Optional[List[torch.Tensor]] = None
    enc_gates: Optional[nn.ParameterList] = None
    dec_gates: Optional[nn.ParameterList] = None
    modulate: Optional[Callable[[str, torch.Tensor], torch.Tensor]] = None
    extras: dict = field(default_factory=dict)

    @property
    def has_prompts(self) -> bool:
        return self.enc_prompts is not None or self.dec_prompts is not None


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return table.float()


class GatedSelfAttention(nn.Module):
    """
    Multi-head self-attention with an optional prompt key/value.

    The prompt's share of a joint softmax over [prompt, sequence] is added to
    the plain attention output, scaled per head by tanh(gate); with gate = 0 the
    output is exactly the prompt-free one.
    """

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def _merge(self, x: torch.Tensor) -> torch.Tensor:
        b, _, n, _ = x.shape
        return x.transpose(1, 2).reshape(b, n, self.heads * self.head_dim)

    def forward(
        self, x: torch.Tensor, prompt: Optional[torch.Tensor] = None, gate: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        q, k, v = (self._split(t) for t in self.qkv(x).chunk(3, dim=-1))
        scale = 1.0 / math.sqrt(self.head_dim)
        logits = (q @ k.transpose(-1, -2)) * scale
        out = self.drop(logits.softmax(dim=-1)) @ v
        if prompt is not None:
            _, pk, pv = (self._split(t) for t in self.qkv(prompt).chunk(3, dim=-1))
            p_logit = (q @ pk.transpose(-1, -2)) * scale
            share = torch.cat([p_logit, logits], dim=-1).softmax(dim=-1)[..., :1]
            out = out + torch.tanh(gate).view(1, -1, 1, 1) * share * pv
        return self.out(self._merge(out))

    def attend_from(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """Plain attention of `query` tokens over `context` (used to advance a carried prompt)"""
        q = self._split(self.qkv(query).chunk(3, dim=-1)[0])
        _, k, v = (self._split(t) for t in self.qkv(context).chunk(3, dim=-1))
        attn = ((q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)).softmax(dim=-1)
        return self.out(self._merge(self.drop(attn) @ v))


class CrossAttention(nn.Module):
    """Decoder queries over encoder memory"""

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q = self.q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k, v = (t.view(b, memory.shape[1], self.heads, self.head_dim).transpose(1, 2)
                for t in self.kv(memory).chunk(2, dim=-1))
        attn = ((q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)).softmax(dim=-1)
        out = self.drop(attn) @ v
        return self.out(out.transpose(1, 2).reshape(b, n, d))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.drop(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer with optional gated prompt"""

    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = GatedSelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        prompt: Optional[torch.Tensor] = None,
        gate: Optional[torch.Tensor] = None,
        memory: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        h = self.norm1(x)
        p = self.norm1(prompt) if prompt is not None else None
        x = x + self.drop(self.attn(h, p, gate))
        x = x + self.drop(self.ff(self.norm2(x)))
        prompt_out = None
        if prompt is not None:
            prompt_out = prompt + self.attn.attend_from(p, torch.cat([p, h], dim=1))
            prompt_out = prompt_out + self.ff(self.norm2(prompt_out))
        return x, prompt_out


class DecoderLayer(nn.Module):
    """Pre-norm decoder layer: gated self-attention, cross-attention, feed-forward"""

    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = GatedSelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.cross = CrossAttention(dim, heads, dropout)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        prompt: Optional[torch.Tensor] = None,
        gate: Optional[torch.Tensor] = None,
        memory: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        h = self.norm1(x)
        p = self.norm1(prompt) if prompt is not None else None
        x = x + self.drop(self.attn(h, p, gate))
        x = x + self.drop(self.cross(self.norm2(x), memory))
        x = x + self.drop(self.ff(self.norm3(x)))
        prompt_out = None
        if prompt is not None:
            prompt_out = prompt + self.attn.attend_from(p, torch.cat([p, h], dim=1))
            prompt_out = prompt_out + self.cross(self.norm2(prompt_out), memory)
            prompt_out = prompt_out + self.ff(self.norm3(prompt_out))
        return x, prompt_out


def run_stack(
    layers: nn.ModuleList,
    x: torch.Tensor,
    prompts: Optional[List[torch.Tensor]],
    gates: Optional[nn.ParameterList],
    depth: str,
    memory: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Run a layer stack with prompt injection.

    deep: layer j sees prompts[j], replacing the previous layer's prompt state.
    shallow: prompts[0] enters layer 1 and its output state is carried on.
    """
    state = None
    for j, layer in enumerate(layers):
        prompt = None
        if prompts is not None:
            if depth == "deep":
                prompt = prompts[j].unsqueeze(1)
            elif depth == "shallow":
                prompt = prompts[0].unsqueeze(1) if j == 0 else state
        gate = gates[j] if prompt is not None else None
        x, state = layer(x, prompt, gate, memory)
    return x


class AcousticEncoder(nn.Module):
    """Strided 1-D convolutions over the mel bins of each frame"""

    def __init__(self, n_mels: int, d_a: int):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv1d(1, 8, 5, stride=2, padding=2),
            nn.GELU(),
            nn.Conv1d(8, 16, 5, stride=2, padding=2),
            nn.GELU(),
            nn.Conv1d(16, 32, 5, stride=2, padding=2),
            nn.GELU(),
        )
        length = n_mels
        for _ in range(3):
            length = (length + 2 * 2 - 5) // 2 + 1
        self.proj = nn.Linear(32 * length, d_a)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        lead = mel.shape[:-1]
        x = ((mel - MEL_OFFSET) / MEL_SCALE).reshape(-1, 1, mel.shape[-1])
        x = self.convs(x).flatten(1)
        return self.proj(x).reshape(lead + (-1,))


class A2etModel(nn.Module):
    """Backbone: feature extractors, encoder/decoder stacks and the PCA head"""

    def __init__(self, config: A2etConfig, basis: Optional[latent3d.PcaBasis] = None):
        super().__init__()
        self.config = config
        d = config.token_dim
        k = config.num_keypoints
        self.semantic = nn.Sequential(
            nn.Flatten(-2),
            nn.Linear(config.mfcc_context * config.n_mfcc, d),
            nn.GELU(),
            nn.Linear(d, config.d_s),
        )
        self.acoustic = AcousticEncoder(config.n_mels, config.d_a)
        self.pose_window = nn.Linear(6, d - config.d_s)
        self.pose_token = nn.Linear(6, d)
        self.identity = nn.Sequential(
            nn.Linear(k * 3 + k * config.appearance_dim, d),
            nn.GELU(),
            nn.Linear(d, d),
        )
        self.acoustic_proj = nn.Linear(config.d_a, d)
        self.type_embed = nn.Parameter(torch.randn(2, d) * 0.02)  # 0: pose token, 1: prompt tokens
        self.register_buffer("positions", sinusoidal_positions(config.window, d), persistent=False)
        self.encoder = nn.ModuleList(
            [EncoderLayer(d, config.heads, config.ff_dim, config.dropout) for _ in range(config.layers_enc)]
        )
        self.decoder = nn.ModuleList(
            [DecoderLayer(d, config.heads, config.ff_dim, config.dropout) for _ in range(config.layers_dec)]
        )
        self.enc_norm = nn.LayerNorm(d)
        self.dec_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.pca_dim)
        nn.init.zeros_(self.head.bias)
        self.register_buffer("pca_u", torch.zeros(latent3d.FLAT_DIM, config.pca_dim))
        self.register_buffer("pca_mean", torch.zeros(latent3d.FLAT_DIM))
        self.has_basis = False
        if basis is not None:
            self.set_basis(basis)

    def set_basis(self, basis: latent3d.PcaBasis) -> None:
        if basis.dim != self.config.pca_dim:
            raise ConfigError(f"basis has {basis.dim} components, config expects {self.config.pca_dim}")
        self.pca_u.copy_(torch.as_tensor(basis.basis, dtype=self.pca_u.dtype))
        self.pca_mean.copy_(torch.as_tensor(basis.mean, dtype=self.pca_mean.dtype))
        self.has_basis = True

    # token builders

    def speech_tokens(self, batch: WindowBatch) -> torch.Tensor:
        sem = self.semantic(batch.mfcc_ctx / MFCC_SCALE)
        return torch.cat([sem, self.pose_window(batch.pose_window)], dim=-1) + self.positions

    def pose_token_of(self, batch: WindowBatch) -> torch.Tensor:
        return self.pose_token(batch.pose_center) + self.type_embed[0]

    def acoustic_features(self, batch: WindowBatch, hooks: Optional[AdaptationHooks] = None) -> torch.Tensor:
        feats = self.acoustic(batch.mel)
        if hooks is not None and hooks.modulate is not None:
            feats = hooks.modulate("a2et.acoustic", feats)
        return feats

    def acoustic_tokens(self, batch: WindowBatch, hooks: Optional[AdaptationHooks] = None) -> torch.Tensor:
        return self.acoustic_proj(self.acoustic_features(batch, hooks)) + self.positions

    def source_token(self, canonical: torch.Tensor, appearance: torch.Tensor,
                     hooks: Optional[AdaptationHooks] = None) -> torch.Tensor:
        """Latent source token d from canonical keypoints and appearance"""
        flat = torch.cat([canonical.flatten(-2), appearance.flatten(-2)], dim=-1)
        token = self.identity(flat)
        if hooks is not None and hooks.modulate is not None:
            token = hooks.modulate("a2et.identity", token)
        return token

    # stages

    def _typed(self, prompts: Optional[List[torch.Tensor]]) -> Optional[List[torch.Tensor]]:
        if prompts is None:
            return None
        return [p + self.type_embed[1] for p in prompts]

    def _check_tokens(self, tokens: torch.Tensor, length: int, what: str) -> None:
        if tokens.shape[-1] != self.config.token_dim or tokens.shape[-2] != length:
            raise ConfigError(
                f"{what} have shape {tuple(tokens.shape)}; expected (..., {length}, {self.config.token_dim})"
            )

    def encode(self, speech_tokens: torch.Tensor, pose_token: torch.Tensor,
               hooks: Optional[AdaptationHooks] = None) -> torch.Tensor:
        """Encoder memory of length 2w+2: window tokens followed by the pose token"""
        self._check_tokens(speech_tokens, self.config.window, "speech tokens")
        x = torch.cat([speech_tokens, pose_token.unsqueeze(1)], dim=1)
        prompts = self._typed(hooks.enc_prompts) if hooks is not None else None
        gates = hooks.enc_gates if hooks is not None else None
        depth = hooks.depth if hooks is not None else "none"
        return self.enc_norm(run_stack(self.encoder, x, prompts, gates, depth))

    def decode(self, acoustic_tokens: torch.Tensor, source_token: torch.Tensor, memory: torch.Tensor,
               hooks: Optional[AdaptationHooks] = None) -> torch.Tensor:
        """Token features for the 2w+1 window positions"""
        self._check_tokens(acoustic_tokens, self.config.window, "acoustic tokens")
        x = acoustic_tokens + source_token.unsqueeze(1)
        prompts = self._typed(hooks.dec_prompts) if hooks is not None else None
        gates = hooks.dec_gates if hooks is not None else None
        depth = hooks.depth if hooks is not None else "none"
        return self.dec_norm(run_stack(self.decoder, x, prompts, gates, depth, memory))

    def predict_pe(self, token_features: torch.Tensor) -> torch.Tensor:
        """PCA code from the centre token only"""
        return self.head(token_features[..., self.config.half_width, :])

    def back_project(self, pe: torch.Tensor) -> torch.Tensor:
        return latent3d.pca_reconstruct_t(pe, self.pca_u, self.pca_mean)

    def forward(self, batch: WindowBatch,
                hooks: Optional[AdaptationHooks] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Predict (PE_i, E_i) for the centre frame of every window.

        Returns:
            pe: (B, pca_dim); expr: (B, 15, 3)
        """
        if hooks is not None and hooks.has_prompts and hooks.enc_gates is None and hooks.dec_gates is None:
            raise UsageError("prompts supplied but no prompt gates are configured; build hooks with inject_prompts")
        memory = self.encode(self.speech_tokens(batch), self.pose_token_of(batch), hooks)
        source = self.source_token(batch.canonical, batch.appearance, hooks)
        features = self.decode(self.acoustic_tokens(batch, hooks), source, memory, hooks)
        pe = self.predict_pe(features)
        return pe, self.back_project(pe)


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def state_hash(module: nn.Module) -> str:
    """sha256 over parameter and buffer bytes in state_dict order"""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return digest.hexdigest()
