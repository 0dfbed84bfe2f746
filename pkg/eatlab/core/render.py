"""
Differentiable Gaussian-splat renderer for latent keypoints.

Keypoints are projected orthographically, (x, y) in [-1, 1] mapping to pixel
coordinates u = (x + 1) / 2 * W, v = (1 - y) / 2 * H, and each keypoint is
rasterized as an anisotropic Gaussian coloured by its appearance row
(r, g, b, size, aspect). There is no hard visibility anywhere, so gradients
reach keypoints and appearance everywhere.

Two feature stages can be modulated by EAM:
    render.splat  (B, 4, H, W): colour accumulation and density
    render.shade  (B, 4, H, W): normalized colour and coverage alpha
Frames are returned channels-first (B, 3, H, W) with values in [0, 1].
"""

from typing import Callable, Optional

import numpy as np
import torch
from PIL import Image

IMAGE_SIZE = 64
MIN_SIGMA_PX = 1.5
SIGMA_SCALE_PX = 4.0
BACKGROUND = 0.1
RENDER_SITES = {"render.splat": 4, "render.shade": 4}

Modulator = Callable[[str, torch.Tensor], torch.Tensor]


def project(keypoints: torch.Tensor, size: int = IMAGE_SIZE) -> torch.Tensor:
    """Orthographic projection of (..., k, 3) keypoints to (..., k, 2) pixel coordinates (u, v)"""
    u = (keypoints[..., 0] + 1.0) * 0.5 * size
    v = (1.0 - keypoints[..., 1]) * 0.5 * size
    return torch.stack([u, v], dim=-1)


def _pixel_grid(size: int, like: torch.Tensor):
    coords = torch.arange(size, dtype=like.dtype, device=like.device) + 0.5
    return coords.view(1, 1, 1, size), coords.view(1, 1, size, 1)


def splat_render(
    keypoints: torch.Tensor,
    appearance: torch.Tensor,
    modulate: Optional[Modulator] = None,
    tint: Optional[torch.Tensor] = None,
    size: int = IMAGE_SIZE,
) -> torch.Tensor:
    """
    Render frames from keypoints.

    Args:
        keypoints: (B, k, 3) latent keypoints
        appearance: (B, k, 5) or (k, 5) per-keypoint r, g, b, size, aspect
        modulate: optional hook called as modulate(site, features) at each stage
        tint: optional (B, 3) colour multiplier applied to the keypoint colours

    Returns:
        (B, 3, size, size) frames clamped to [0, 1]
    """
    if appearance.dim() == 2:
        appearance = appearance.unsqueeze(0).expand(keypoints.shape[0], -1, -1)
    uv = project(keypoints, size)
    colors = appearance[..., :3]
    if tint is not None:
        colors = colors * tint.unsqueeze(1)
    sigma = torch.clamp(appearance[..., 3] * SIGMA_SCALE_PX, min=MIN_SIGMA_PX)
    aspect = appearance[..., 4]
    sigma_x = (sigma * (1.0 + aspect))[..., None, None]
    sigma_y = (sigma * (1.0 - aspect))[..., None, None]

    px, py = _pixel_grid(size, keypoints)
    dx = px - uv[..., 0][..., None, None]
    dy = py - uv[..., 1][..., None, None]
    weights = torch.exp(-0.5 * ((dx / sigma_x) ** 2 + (dy / sigma_y) ** 2))  # (B, k, H, W)

    accum = torch.einsum("bkhw,bkc->bchw", weights, colors)
    density = weights.sum(dim=1, keepdim=True)
    splat = torch.cat([accum, density], dim=1)
    if modulate is not None:
        splat = modulate("render.splat", splat)

    rgb = splat[:, :3] / (splat[:, 3:4] + 1e-3)
    alpha = 1.0 - torch.exp(-2.0 * splat[:, 3:4])
    shade = torch.cat([rgb, alpha], dim=1)
    if modulate is not None:
        shade = modulate("render.shade", shade)

    image = shade[:, 3:4] * shade[:, :3] + (1.0 - shade[:, 3:4]) * BACKGROUND
    return image.clamp(0.0, 1.0)


def face_mask(keypoints: torch.Tensor, radius: float = 6.0, size: int = IMAGE_SIZE) -> torch.Tensor:
    """
    Union of disks of `radius` pixels around the projected keypoints.

    Args:
        keypoints: (k, 3) or (B, k, 3)

    Returns:
        Boolean mask (size, size) or (B, size, size)
    """
    single = keypoints.dim() == 2
    kp = keypoints.unsqueeze(0) if single else keypoints
    uv = project(kp.detach(), size)
    px, py = _pixel_grid(size, kp)
    dist2 = (px - uv[..., 0][..., None, None]) ** 2 + (py - uv[..., 1][..., None, None]) ** 2
    mask = (dist2 <= radius * radius).any(dim=1)
    return mask[0] if single else mask


def to_hwc(frames: torch.Tensor) -> np.ndarray:
    """(B, 3, H, W) tensor to (B, H, W, 3) float array"""
    return frames.detach().permute(0, 2, 3, 1).cpu().numpy()


def save_frame_grid(gt: torch.Tensor, pred: torch.Tensor, path: str, max_frames: int = 8) -> str:
    """Write a two-row PNG: ground truth on top, prediction below"""
    count = min(max_frames, gt.shape[0], pred.shape[0])
    rows = [np.concatenate(list(to_hwc(batch[:count])), axis=1) for batch in (gt, pred)]
    grid = np.clip(np.concatenate(rows, axis=0), 0.0, 1.0)
    Image.fromarray((grid * 255.0 + 0.5).astype(np.uint8)).save(path)
    return path
