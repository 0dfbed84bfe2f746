"""
Shared fixtures for the test modules: tiny model configs, random window
batches and small on-disk datasets.
"""

import os
import sys

import numpy as np
import torch

parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, parent_dir)

from eatlab.core import latent3d, synthworld
from eatlab.core.a2et import WindowBatch
from eatlab.models.config import A2etConfig, AdaptConfig, WorldConfig
from eatlab.services import dataset as ds

TINY_PCA_DIM = 6


def tiny_a2et(**overrides) -> A2etConfig:
    values = dict(layers_enc=2, layers_dec=2, heads=2, token_dim=16, ff_dim=32, half_width=2,
                  pca_dim=TINY_PCA_DIM, d_s=8, d_a=8, dropout=0.0)
    values.update(overrides)
    return A2etConfig(**values)


def tiny_adapt(**overrides) -> AdaptConfig:
    values = dict(latent_dim=4, mapper_hidden=8, trunk_layers=2, head_layers=2, eam_hidden=4, edn_ff_dim=16,
                  edn_head_hidden=8)
    values.update(overrides)
    return AdaptConfig(**values)


def random_basis(dim: int = TINY_PCA_DIM, seed: int = 0) -> latent3d.PcaBasis:
    rng = np.random.default_rng(seed)
    return latent3d.pca_fit(rng.normal(0.0, 0.05, size=(64, 15, 3)), dim)


def random_window_batch(config: A2etConfig, size: int = 3, seed: int = 0,
                        dtype: torch.dtype = torch.float32) -> WindowBatch:
    gen = torch.Generator().manual_seed(seed)
    win = config.window

    def rand(*shape, scale=1.0):
        return (torch.randn(*shape, generator=gen) * scale).to(dtype)

    return WindowBatch(
        mfcc_ctx=rand(size, win, config.mfcc_context, config.n_mfcc, scale=10.0),
        mel=rand(size, win, config.n_mels, scale=3.0) - 5.0,
        pose_window=rand(size, win, 6, scale=0.05),
        pose_center=rand(size, 6, scale=0.05),
        canonical=rand(size, 15, 3, scale=0.4),
        appearance=torch.rand(size, 15, 5, generator=gen).to(dtype),
    )


def tiny_world(**overrides) -> WorldConfig:
    values = dict(identities=4, clips_per_identity=8, frames=12, seed=1, test_fraction=0.25)
    values.update(overrides)
    return WorldConfig(**values)


def make_dataset(path: str, world: WorldConfig = None, pca_dim: int = TINY_PCA_DIM) -> str:
    """Generate, export and fit the basis exactly like `eatlab gen-data`"""
    world = world or tiny_world()
    clips = synthworld.generate_clips(world)
    manifest = ds.export_dataset(clips, path, world)
    split = {c.identity_id: c.split for c in manifest.clips}
    basis, fit_fp = ds.fit_basis(clips, split, pca_dim)
    ds.save_basis(basis, path, fit_fp)
    return path
