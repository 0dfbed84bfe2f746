"""
Emotional adaptation modules trained against a frozen A2ET backbone.

    z --mapper--> guidance tokens e0..eL
        e1..eL  -> gated prompts in the transformer layers
        e0      -> EAM feature modulation (acoustic/identity encoders, renderer)
        [d, e0..eL] -> EDN -> dE, added to the backbone's E

All final projections are zero-initialised, so a fresh EmotionAdapter leaves
every backbone output unchanged.
"""

import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from eatlab.core import latent3d
from eatlab.core.a2et import A2etModel, AdaptationHooks, EncoderLayer, WindowBatch
from eatlab.core.render import RENDER_SITES
from eatlab.errors import AlignmentError, ConfigError, UnknownEmotionError, UnknownSiteError, UsageError
from eatlab.models.config import EMOTIONS, A2etConfig, AdaptConfig

FREE_LABEL = "free"
# tanh rounds to exactly 1.0 in float32 for large inputs; keep the bound strict
EAM_BOUND = 1.0 - 1e-6


def guidance_token_count(a2et: A2etConfig) -> int:
    """e0 for EAM plus one prompt per layer of the deeper stack (7 for the 6-layer backbone)"""
    return 1 + max(a2et.layers_enc, a2et.layers_dec)


def eam_sites(a2et: A2etConfig) -> Dict[str, int]:
    """Registered EAM sites and their channel counts"""
    sites = {"a2et.acoustic": a2et.d_a, "a2et.identity": a2et.token_dim}
    sites.update(RENDER_SITES)
    return sites


# channel axis of the features at each site
SITE_CHANNEL_DIM = {"a2et.acoustic": -1, "a2et.identity": -1, "render.splat": 1, "render.shade": 1}


@dataclass
class EmotionGuidance:
    """Guidance tokens (B, L+1, D) and the label each row was produced for"""
    tokens: torch.Tensor
    labels: List[str]

    @property
    def e0(self) -> torch.Tensor:
        return self.tokens[:, 0]


def _mlp(dims: Sequence[int], final_activation: bool = True) -> nn.Sequential:
    layers: List[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if final_activation or i < len(dims) - 2:
            layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


class EmotionMapper(nn.Module):
    """Shared MLP trunk over z, then one unshared MLP head per emotion"""

    def __init__(self, config: AdaptConfig, token_dim: int, num_tokens: int, emotions: Sequence[str] = EMOTIONS):
        super().__init__()
        self.config = config
        self.token_dim = token_dim
        self.num_tokens = num_tokens
        hidden = config.mapper_hidden
        self.trunk = _mlp([config.latent_dim] + [hidden] * config.trunk_layers)
        self.heads = nn.ModuleDict({label: self.make_head() for label in emotions})

    def make_head(self) -> nn.Sequential:
        hidden = self.config.mapper_hidden
        dims = [hidden] * self.config.head_layers + [self.num_tokens * self.token_dim]
        return _mlp(dims, final_activation=False)

    def forward(self, z: torch.Tensor, emotions: Sequence[str], head: Optional[nn.Module] = None) -> torch.Tensor:
        """
        Map latent codes to guidance tokens.

        Args:
            z: (B, latent_dim)
            emotions: B labels selecting the head of each row; ignored when `head` is given
            head: externally supplied head (zero-shot "free" mode)

        Returns:
            (B, num_tokens, token_dim)
        """
        h = self.trunk(z)
        if head is not None:
            out = head(h)
        else:
            if len(emotions) != z.shape[0]:
                raise AlignmentError(f"{len(emotions)} labels for {z.shape[0]} latent codes")
            out = h.new_zeros(z.shape[0], self.num_tokens * self.token_dim)
            for label in sorted(set(emotions)):
                if label not in self.heads:
                    raise UnknownEmotionError(f"no mapper head for '{label}'; expected one of {list(self.heads)}")
                rows = torch.tensor([i for i, e in enumerate(emotions) if e == label], device=z.device)
                out = out.index_copy(0, rows, self.heads[label](h[rows]))
        return out.view(z.shape[0], self.num_tokens, self.token_dim)


class FreeHead(nn.Module):
    """Per-experiment mapper head for zero-shot editing"""

    def __init__(self, mapper: EmotionMapper, init: str = "neutral"):
        super().__init__()
        self.net = mapper.make_head().to(next(mapper.parameters()).device)
        if init == "neutral":
            self.net.load_state_dict(mapper.heads["neutral"].state_dict())
        elif init != "random":
            raise ConfigError(f"free head init must be 'neutral' or 'random', got '{init}'")

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h)


class EamBank(nn.Module):
    """One EAM per registered site: gamma, beta = bound * tanh(FC(ReLU(FC(e0))))"""

    def __init__(self, sites: Dict[str, int], token_dim: int, hidden: int, debug_bounds: bool = False):
        super().__init__()
        self.sites = dict(sites)
        self.debug_bounds = debug_bounds or os.environ.get("EATLAB_DEBUG", "") == "1"
        self.nets = nn.ModuleDict()
        for site, channels in self.sites.items():
            net = nn.Sequential(nn.Linear(token_dim, hidden), nn.ReLU(), nn.Linear(hidden, 2 * channels))
            nn.init.zeros_(net[2].weight)
            nn.init.zeros_(net[2].bias)
            self.nets[site.replace(".", "_")] = net

    def params(self, e0: torch.Tensor, site: str) -> Tuple[torch.Tensor, torch.Tensor]:
        if site not in self.sites:
            raise UnknownSiteError(f"EAM site '{site}' is not registered; known sites: {sorted(self.sites)}")
        gamma, beta = (EAM_BOUND * torch.tanh(self.nets[site.replace(".", "_")](e0))).chunk(2, dim=-1)
        if self.debug_bounds and not (gamma.abs().lt(1).all() and beta.abs().lt(1).all()):
            raise AssertionError(f"EAM output at {site} left (-1, 1)")
        return gamma, beta


def eam_params(bank: EamBank, e0: torch.Tensor, site: str) -> Tuple[torch.Tensor, torch.Tensor]:
    """(gamma, beta), each (..., c) in (-1, 1)"""
    return bank.params(e0, site)


def eam_apply(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, channel_dim: int = -1) -> torch.Tensor:
    """
    out[..., ch] = x[..., ch] * (1 + gamma[ch]) + beta[ch]

    gamma/beta are (c,) or (B, c); with a batch axis it is matched to axis 0 of x.
    """
    cdim = channel_dim % x.dim()
    channels = x.shape[cdim]
    if gamma.shape[-1] != channels or beta.shape[-1] != channels:
        raise ConfigError(f"EAM has {gamma.shape[-1]} channels, features have {channels} on axis {cdim}")
    shape = [1] * x.dim()
    shape[cdim] = channels
    if gamma.dim() == 2:
        shape[0] = gamma.shape[0]
    return x * (1.0 + gamma.reshape(shape)) + beta.reshape(shape)


class EdnModel(nn.Module):
    """
    Emotional Deformation Network.

    A shallower, narrower stack of A2ET encoder layers over [d, e0..eL]; mean
    pooling over the emotion positions and an MLP head give dE (15, 3). Every
    parameter is trained.
    """

    def __init__(self, a2et: A2etConfig, config: AdaptConfig, backbone: Optional[A2etModel] = None):
        super().__init__()
        d = a2et.token_dim
        self.layers = nn.ModuleList(
            [EncoderLayer(d, a2et.heads, config.edn_ff_dim, a2et.dropout) for _ in range(config.edn_layers)]
        )
        self.norm = nn.LayerNorm(d)
        if config.edn_init == "a2et":
            if backbone is None:
                raise ConfigError("edn_init='a2et' needs the pretrained backbone")
            if config.edn_layers > a2et.layers_enc or config.edn_ff_dim > a2et.ff_dim:
                raise ConfigError(
                    f"EDN ({config.edn_layers} layers, ff {config.edn_ff_dim}) is larger than the backbone "
                    f"encoder ({a2et.layers_enc} layers, ff {a2et.ff_dim})"
                )
            for layer, source in zip(self.layers, backbone.encoder):
                copy_encoder_layer(layer, source)
            self.norm.load_state_dict(backbone.enc_norm.state_dict())
        self.head = nn.Sequential(
            nn.Linear(d, config.edn_head_hidden),
            nn.GELU(),
            nn.Linear(config.edn_head_hidden, latent3d.FLAT_DIM),
        )
        nn.init.zeros_(self.head[2].weight)
        nn.init.zeros_(self.head[2].bias)

    def forward(self, source_token: torch.Tensor, guidance_tokens: torch.Tensor) -> torch.Tensor:
        x = torch.cat([source_token.unsqueeze(1), guidance_tokens], dim=1)
        for layer in self.layers:
            x, _ = layer(x)
        pooled = self.norm(x)[:, 1:].mean(dim=1)
        return self.head(pooled).view(-1, latent3d.NUM_KEYPOINTS, 3)


@torch.no_grad()
def copy_encoder_layer(target: EncoderLayer, source: EncoderLayer) -> None:
    """
    Copy a pretrained encoder layer into a narrower one.

    Attention and norms are copied whole; the feed-forward keeps the hidden
    units with the largest |fc1 row| * |fc2 column|, in their original order.
    """
    target.norm1.load_state_dict(source.norm1.state_dict())
    target.norm2.load_state_dict(source.norm2.state_dict())
    target.attn.load_state_dict(source.attn.state_dict())
    hidden = target.ff.fc1.out_features
    score = source.ff.fc1.weight.norm(dim=1) * source.ff.fc2.weight.norm(dim=0)
    keep = score.topk(hidden).indices.sort().values
    target.ff.fc1.weight.copy_(source.ff.fc1.weight[keep])
    target.ff.fc1.bias.copy_(source.ff.fc1.bias[keep])
    target.ff.fc2.weight.copy_(source.ff.fc2.weight[:, keep])
    target.ff.fc2.bias.copy_(source.ff.fc2.bias)


class EmotionAdapter(nn.Module):
    """Mapper, prompt gates, EDN and EAM bank, honouring the component toggles"""

    def __init__(self, config: AdaptConfig, a2et: A2etConfig, backbone: Optional[A2etModel] = None,
                 emotions: Sequence[str] = EMOTIONS):
        super().__init__()
        self.config = config
        self.a2et = a2et
        self.num_tokens = guidance_token_count(a2et)
        self.mapper = EmotionMapper(config, a2et.token_dim, self.num_tokens, emotions)
        self.enc_gates: Optional[nn.ParameterList] = None
        self.dec_gates: Optional[nn.ParameterList] = None
        if config.use_prompts:
            if config.prompt_site in ("encoder", "both"):
                self.enc_gates = nn.ParameterList(
                    [nn.Parameter(torch.zeros(a2et.heads)) for _ in range(a2et.layers_enc)]
                )
            if config.prompt_site in ("decoder", "both"):
                self.dec_gates = nn.ParameterList(
                    [nn.Parameter(torch.zeros(a2et.heads)) for _ in range(a2et.layers_dec)]
                )
        self.edn = EdnModel(a2et, config, backbone) if config.use_edn else None
        self.eam = EamBank(eam_sites(a2et), a2et.token_dim, config.eam_hidden, config.debug_bounds) \
            if config.use_eam else None

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        """Trainable parameters by accounting group"""
        prompts = list(self.mapper.parameters())
        for gates in (self.enc_gates, self.dec_gates):
            if gates is not None:
                prompts.extend(gates)
        groups = {"prompts": prompts, "edn": [], "eam": []}
        if self.edn is not None:
            groups["edn"] = list(self.edn.parameters())
        if self.eam is not None:
            groups["eam"] = list(self.eam.parameters())
        return groups

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for group in self.parameter_groups().values() for p in group if p.requires_grad]

    def guidance(self, z: torch.Tensor, emotions: Sequence[str], head: Optional[nn.Module] = None) -> EmotionGuidance:
        labels = [FREE_LABEL] * z.shape[0] if head is not None else list(emotions)
        return EmotionGuidance(tokens=self.mapper(z, emotions, head), labels=labels)

    def modulator(self, guidance: EmotionGuidance, sites: Sequence[str]):
        """modulate(site, x) hook for the given sites; identity elsewhere"""
        if self.eam is None:
            return None
        e0 = guidance.e0
        wanted = set(sites)

        def modulate(site: str, x: torch.Tensor) -> torch.Tensor:
            if site not in wanted:
                return x
            gamma, beta = self.eam.params(e0, site)
            return eam_apply(x, gamma, beta, SITE_CHANNEL_DIM[site])

        return modulate

    def render_modulator(self, guidance: EmotionGuidance):
        return self.modulator(guidance, list(RENDER_SITES))


def map_guidance(adapter: EmotionAdapter, z: torch.Tensor, emotion: str) -> EmotionGuidance:
    """Guidance for a single label; z is (latent_dim,) or (B, latent_dim)"""
    if emotion == FREE_LABEL:
        raise UnknownEmotionError("'free' guidance needs an externally supplied head")
    batch = z.unsqueeze(0) if z.dim() == 1 else z
    return adapter.guidance(batch, [emotion] * batch.shape[0])


def sample_latent(count: int, latent_dim: int, training: bool,
                  generator: Optional[torch.Generator] = None, device: str = "cpu") -> torch.Tensor:
    """Standard Gaussian codes during training, zeros at inference"""
    if not training:
        return torch.zeros(count, latent_dim, device=device)
    return torch.randn(count, latent_dim, generator=generator).to(device)


def inject_prompts(adapter: EmotionAdapter, guidance: EmotionGuidance, depth: Optional[str] = None) -> AdaptationHooks:
    """
    Hooks for one prompted forward pass of the backbone.

    shallow: e1 enters the first layer and is carried on; deep: e_j enters layer j,
    replacing the previous prompt state. EAM on the A2ET encoder sites uses e0.
    """
    if guidance.tokens.shape[-2] != adapter.num_tokens:
        raise ConfigError(f"guidance has {guidance.tokens.shape[-2]} tokens, expected {adapter.num_tokens}")
    depth = depth or adapter.config.prompt_depth
    hooks = AdaptationHooks(depth=depth)
    if depth != "none":
        if adapter.enc_gates is None and adapter.dec_gates is None:
            raise UsageError(f"{depth} prompts requested but the adapter was built without prompt gates")
        layer_tokens = [guidance.tokens[:, j] for j in range(1, adapter.num_tokens)]
        if adapter.enc_gates is not None:
            hooks.enc_prompts = layer_tokens[: adapter.a2et.layers_enc]
            hooks.enc_gates = adapter.enc_gates
        if adapter.dec_gates is not None:
            hooks.dec_prompts = layer_tokens[: adapter.a2et.layers_dec]
            hooks.dec_gates = adapter.dec_gates
    hooks.modulate = adapter.modulator(guidance, ["a2et.acoustic", "a2et.identity"])
    return hooks


@dataclass
class AdaptedOutput:
    pe: torch.Tensor  # (B, pca_dim)
    expr: torch.Tensor  # E from the prompted backbone, (B, 15, 3)
    delta: torch.Tensor  # dE from the EDN, (B, 15, 3)
    expr_emotional: torch.Tensor  # E' = E + dE
    keypoints: torch.Tensor  # K = R Kc + T + E'
    guidance: EmotionGuidance


def edn_forward(adapter: EmotionAdapter, source_token: torch.Tensor, guidance: EmotionGuidance) -> torch.Tensor:
    if adapter.edn is None:
        return source_token.new_zeros(source_token.shape[0], latent3d.NUM_KEYPOINTS, 3)
    return adapter.edn(source_token, guidance.tokens)


def adapted_forward(
    backbone: A2etModel,
    adapter: EmotionAdapter,
    batch: WindowBatch,
    z: torch.Tensor,
    emotions: Sequence[str],
    head: Optional[nn.Module] = None,
) -> AdaptedOutput:
    """E' = E + dE and the emotional keypoints for the centre frame of every window"""
    if not backbone.has_basis:
        raise UsageError("backbone has no PCA basis loaded")
    guidance = adapter.guidance(z, emotions, head)
    hooks = inject_prompts(adapter, guidance)
    pe, expr = backbone(batch, hooks)
    source = backbone.source_token(batch.canonical, batch.appearance, hooks)
    delta = edn_forward(adapter, source, guidance)
    expr_emotional = expr + delta
    rotation, translation = latent3d.split_pose_vector_t(batch.pose_center)
    keypoints = latent3d.compose_keypoints_t(batch.canonical, rotation, translation, expr_emotional)
    return AdaptedOutput(pe, expr, delta, expr_emotional, keypoints, guidance)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad = False
    return module


def gate_summary(adapter: EmotionAdapter) -> Dict[str, float]:
    """Mean |tanh(gate)| per stack, logged during adaptation"""
    out = {}
    for name, gates in (("encoder", adapter.enc_gates), ("decoder", adapter.dec_gates)):
        if gates is not None:
            out[name] = float(torch.stack([torch.tanh(g).abs().mean() for g in gates]).mean())
    return out
