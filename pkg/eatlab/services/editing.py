"""
Zero-shot expression editing: optimise a free mapper head and the EAM bank so
rendered faces match an emotion word under the text-image embedder. The
backbone, the mapper trunk and the EDN stay frozen.
"""

import logging
import os
from typing import List, Optional, Sequence

import torch
import torch.nn as nn

from eatlab.core import render
from eatlab.core.emoadapt import FreeHead, adapted_forward, freeze, sample_latent
from eatlab.core.objectives import LossParts, clip_like_loss, total_loss
from eatlab.errors import ConfigError, MetricModelMissingError
from eatlab.models.config import RunConfig
from eatlab.models.manifest import CheckpointManifest
from eatlab.models.report import EditReport
from eatlab.services.checkpoints import checkpoint_hash, load_adaptation, load_backbone, load_critics, save_checkpoint
from eatlab.services.dataset import BatchSampler, ClipFeatures, SyntheticDataset
from eatlab.services.storage import MANIFEST_NAME, StorageBinaryFile, StorageTextFile
from eatlab.services.trainer import (
    DivergenceGuard,
    check_backbone_hash,
    check_critics,
    check_dataset,
    make_optimizer,
    optimizer_step,
    predict_clip,
    project_pe,
    seed_everything,
    sync_term,
)

logger = logging.getLogger("eatlab.editing")

EDIT_REPORT = "edit_report.json"
EDITED_DIR = "edited"
EDITED_PNG = "edited.png"


def _neutral_clips(dataset: SyntheticDataset, split: str) -> List[ClipFeatures]:
    clips = [f for f in dataset.clips(split) if f.emotion == "neutral"]
    return clips or dataset.clips(split)


def classified_as(critics, backbone, adapter, head, clips: Sequence[ClipFeatures], word: str, device: str) -> float:
    """Percent of clips the classifier labels `word` when driven by `head`"""
    classifier = critics.require("classifier")
    hits = []
    for feat in clips:
        pred = predict_clip(backbone, feat, adapter, head=head, device=device)
        with torch.no_grad():
            hits.append(classifier.predict(pred.exprs.unsqueeze(0))[0] == word)
    return 100.0 * sum(hits) / max(1, len(hits))


def save_edited_clip(backbone, adapter, head, feat: ClipFeatures, word: str, out_dir: str, device: str) -> str:
    """
    Render one clip through the edit head and store it.

    Writes an `edited/` container (frames, keypoints, exprs) and a PNG with the
    clip under neutral guidance on top and the edited clip below.
    """
    before = predict_clip(backbone, feat, adapter, emotion="neutral", device=device)
    after = predict_clip(backbone, feat, adapter, head=head, device=device)
    root = os.path.join(out_dir, EDITED_DIR)
    StorageBinaryFile(root).create_many({
        "frames": after.frames.cpu().numpy(),
        "keypoints": after.keypoints.cpu().numpy(),
        "exprs": after.exprs.cpu().numpy(),
    })
    StorageTextFile(root).create_json(
        MANIFEST_NAME, {"kind": "edited_clip", "clip_id": feat.clip_id, "text": word, "frames": feat.frames}
    )
    render.save_frame_grid(before.frames, after.frames, os.path.join(out_dir, EDITED_PNG))
    logger.info(f"Stored clip {feat.clip_id} edited toward '{word}' in {root}")
    return root


def edit_zero_shot(
    config: RunConfig,
    backbone_dir: str,
    adaptation_dir: str,
    source_clip_id: Optional[int] = None,
) -> EditReport:
    """
    Learn a guidance head for config.edit_text without emotional videos of it.

    Trains on neutral training clips (or one source clip), then reports the
    classified accuracy on those clips and on neutral clips of unseen identities.
    """
    if config.critics_dir is None:
        raise MetricModelMissingError("zero-shot editing needs the text-image embedder; pass --critics")
    seed_everything(config.seed)
    device = config.device
    backbone_hash = checkpoint_hash(backbone_dir)
    check_backbone_hash(config, backbone_hash)
    backbone, backbone_manifest = load_backbone(backbone_dir, device)
    dataset = SyntheticDataset(config.dataset_dir, backbone.config.mfcc_context)
    check_dataset(backbone_manifest, dataset)
    critics = load_critics(config.critics_dir, device)
    check_critics(critics, dataset)
    embedder = critics.require("embedder")
    word = config.edit_text
    embedder.word_index(word)

    adapter, _ = load_adaptation(adaptation_dir, backbone, backbone_dir, device)
    adaptation_hash = checkpoint_hash(adaptation_dir)
    freeze(backbone).eval()
    freeze(adapter).eval()
    head = FreeHead(adapter.mapper, config.edit_head_init)
    params = list(head.parameters())
    if adapter.eam is not None:
        for p in adapter.eam.parameters():
            p.requires_grad = True
        params.extend(adapter.eam.parameters())

    if source_clip_id is not None:
        source = [f for f in dataset.features if f.clip_id == source_clip_id]
        if not source:
            raise ConfigError(f"no clip with id {source_clip_id}")
    else:
        source = _neutral_clips(dataset, "train")
    transfer = _neutral_clips(dataset, "test")
    sampler = BatchSampler(source, config.batch_clips, config.centers_per_clip, backbone.config.half_width,
                           "neutral", config.seed, device)
    optimizer = make_optimizer(params, config.optim.lr_adapt, config)
    generator = torch.Generator().manual_seed(config.seed)
    guard = DivergenceGuard(config.out_dir)
    curve: List[List[float]] = []
    logger.info(f"Editing toward '{word}' on {len(source)} clips for {config.steps} steps")

    for step in range(config.steps):
        batch = sampler.sample()
        z = sample_latent(batch.clips, adapter.config.latent_dim, True, generator, device)
        z = z.repeat_interleave(batch.centers, dim=0)
        out = adapted_forward(backbone, adapter, batch.window, z, batch.emotions, head=head)
        frames = render.splat_render(out.keypoints, batch.window.appearance, adapter.render_modulator(out.guidance))
        parts = LossParts(
            lat=(out.pe - project_pe(backbone, batch.neutral)).pow(2).sum(dim=-1).mean(),
            sync=sync_term(critics, batch, out.expr_emotional),
            clip=clip_like_loss(frames, word, embedder),
        )
        loss = total_loss(parts, config.weights, zero_shot=True)
        guard.check(loss, step, batch, parts, {"head": head})
        optimizer_step(optimizer, loss)
        if step % config.log_every == 0 or step == config.steps - 1:
            curve.append([float(step), float(loss.detach()), float(parts.clip.detach())])
            logger.info(f"edit step {step}: {parts.as_floats()}")

    head.eval()
    report = EditReport(
        text=word,
        steps=config.steps,
        head_init=config.edit_head_init,
        source_clips=[f.clip_id for f in source],
        source_acc=classified_as(critics, backbone, adapter, head, source, word, device),
        transfer_clips=[f.clip_id for f in transfer],
        transfer_acc=classified_as(critics, backbone, adapter, head, transfer, word, device),
        loss_curve=curve,
        backbone_hash=backbone_hash,
        adaptation_hash=adaptation_hash,
        edited_clip_id=source[0].clip_id,
    )
    edited = nn.ModuleDict({"head": head})
    if adapter.eam is not None:
        edited["eam"] = adapter.eam
    save_checkpoint(
        edited,
        config.out_dir,
        CheckpointManifest(
            kind="edit",
            config=config.model_dump(),
            step=config.steps,
            upstream_hash=adaptation_hash,
            dataset_fingerprint=dataset.fingerprint,
            basis_fingerprint=backbone_manifest.basis_fingerprint,
            param_counts={name: sum(p.numel() for p in m.parameters()) for name, m in edited.items()},
            loss_curve=curve,
        ),
    )
    save_edited_clip(backbone, adapter, head, source[0], word, config.out_dir, device)
    StorageTextFile(config.out_dir).create_json(EDIT_REPORT, report.model_dump())
    logger.info(f"'{word}': source {report.source_acc:.1f}% transfer {report.transfer_acc:.1f}%")
    return report
