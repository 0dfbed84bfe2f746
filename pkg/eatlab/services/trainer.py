"""
Trainer service: metric-model training, A2ET pretraining, emotional adaptation
against the frozen backbone, and evaluation.

Every stage resolves one RunConfig, writes it into the manifest of what it
produces and is fully determined by (config, seed) on a fixed platform.
"""

import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from eatlab.core import latent3d, render
from eatlab.core.a2et import A2etModel, WindowBatch, count_parameters, state_hash
from eatlab.core.critics import (
    SYNC_WINDOW,
    CriticSet,
    ToyEmotionClassifier,
    ToySyncNet,
    ToyTextImageEmbedder,
    sliding_windows,
)
from eatlab.core.emoadapt import EmotionAdapter, adapted_forward, freeze, gate_summary, sample_latent
from eatlab.core.metrics import ClipPrediction, build_report, eval_metrics, format_table
from eatlab.core.objectives import LossParts, latent_loss, recon_loss, sync_loss, total_loss
from eatlab.errors import ConfigError, MetricModelMissingError, ProvenanceError, TrainingDivergedError
from eatlab.models.config import RunConfig
from eatlab.models.manifest import CheckpointManifest, Snapshot
from eatlab.models.report import MetricReport
from eatlab.services.checkpoints import (
    checkpoint_hash,
    load_adaptation,
    load_backbone,
    load_critics,
    save_checkpoint,
    save_critics,
)
from eatlab.services.dataset import BatchSampler, ClipFeatures, SyntheticDataset, TrainBatch, clip_batch
from eatlab.services.storage import MANIFEST_NAME, StorageBinaryFile, StorageTextFile

logger = logging.getLogger("eatlab.trainer")

SYNC_NEGATIVE_OFFSET = 3
SYNC_LOGIT_SCALE = 5.0
CLASSIFIER_SEQ = 25
EMBEDDER_GROUPS = 4
SNAPSHOT_WINDOW = 5
REPORT_JSON = "report.json"
REPORT_TXT = "report.txt"
FRAMES_PNG = "frames.png"


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def make_optimizer(params, lr: float, config: RunConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(config.optim.beta1, config.optim.beta2))


def keypoints_of(window: WindowBatch, expr: torch.Tensor) -> torch.Tensor:
    """K = R Kc + T + E at the centre frame of every window"""
    rotation, translation = latent3d.split_pose_vector_t(window.pose_center)
    return latent3d.compose_keypoints_t(window.canonical, rotation, translation, expr)


def project_pe(model: A2etModel, expr: torch.Tensor) -> torch.Tensor:
    return latent3d.pca_project_t(expr, model.pca_u, model.pca_mean)


class DivergenceGuard:
    """Aborts a run on a non-finite loss after dumping the batch and parameters"""

    def __init__(self, out_dir: str):
        self.root = os.path.join(out_dir, "diagnostic")

    def check(self, loss: torch.Tensor, step: int, batch: TrainBatch, parts: LossParts,
              modules: Dict[str, nn.Module]) -> None:
        if bool(torch.isfinite(loss)):
            return
        arrays = {f"batch.{k}": v.detach().cpu().numpy() for k, v in batch.window.__dict__.items()}
        arrays["batch.target"] = batch.target.detach().cpu().numpy()
        for prefix, module in modules.items():
            for name, param in module.state_dict().items():
                arrays[f"{prefix}.{name}"] = param.detach().cpu().numpy()
        StorageBinaryFile(self.root).create_many(arrays)
        StorageTextFile(self.root).create_json(
            MANIFEST_NAME,
            {
                "kind": "diagnostic",
                "step": step,
                "loss": repr(float(loss)),
                "parts": {k: repr(v) for k, v in parts.as_floats().items()},
                "clip_ids": batch.clip_ids,
            },
        )
        logger.error(f"Non-finite loss at step {step}; dumped batch and parameters to {self.root}")
        raise TrainingDivergedError(f"loss became {float(loss)} at step {step}", self.root)


def sync_term(critics: Optional[CriticSet], batch: TrainBatch, exprs: torch.Tensor) -> Optional[torch.Tensor]:
    """Sync loss over every 5-frame run of consecutive centres; None without a sync expert"""
    if critics is None or critics.sync is None or batch.centers < SYNC_WINDOW:
        return None
    v_win = sliding_windows(batch.per_clip(exprs), SYNC_WINDOW)
    a_win = sliding_windows(batch.per_clip(batch.mel_center), SYNC_WINDOW)
    return sync_loss(critics.sync.embed_video(v_win), critics.sync.embed_audio(a_win))


def render_term(batch: TrainBatch, pred_k: torch.Tensor, gt_k: torch.Tensor, modulate=None) -> torch.Tensor:
    """Reconstruction loss of rendered prediction against tinted ground-truth frames"""
    appearance = batch.window.appearance
    with torch.no_grad():
        gt_frames = render.splat_render(gt_k, appearance, tint=batch.tints)
    pred_frames = render.splat_render(pred_k, appearance, modulate=modulate)
    return recon_loss(pred_frames, gt_frames, render.face_mask(gt_k))


def _record(curve: List[List[float]], step: int, loss: torch.Tensor, parts: LossParts) -> None:
    lat = parts.lat if parts.lat is not None else loss
    curve.append([float(step), float(loss.detach()), float(lat.detach())])


def optimizer_step(optimizer: torch.optim.Optimizer, loss: torch.Tensor) -> None:
    optimizer.zero_grad()
    if loss.requires_grad:
        loss.backward()
        optimizer.step()


def _optional_critics(config: RunConfig, dataset: SyntheticDataset) -> Optional[CriticSet]:
    if config.critics_dir is None:
        logger.warning("No critics_dir configured; the sync term is disabled for this run")
        return None
    critics = load_critics(config.critics_dir, config.device)
    check_critics(critics, dataset)
    return critics


def check_critics(critics: CriticSet, dataset: SyntheticDataset) -> None:
    if critics.dataset_fingerprint != dataset.fingerprint:
        raise ProvenanceError(
            f"metric models were trained on dataset {critics.dataset_fingerprint}, not {dataset.fingerprint}"
        )


def check_dataset(backbone_manifest: CheckpointManifest, dataset: SyntheticDataset) -> None:
    if backbone_manifest.dataset_fingerprint != dataset.fingerprint:
        raise ProvenanceError(
            f"backbone was pretrained on dataset {backbone_manifest.dataset_fingerprint}, not {dataset.fingerprint}"
        )
    basis_fp = dataset.basis_manifest.fingerprint if dataset.basis_manifest else None
    if backbone_manifest.basis_fingerprint != basis_fp:
        raise ProvenanceError("backbone was pretrained with a different PCA basis")


def check_backbone_hash(config: RunConfig, backbone_hash: str) -> None:
    if config.expected_backbone_hash is not None and config.expected_backbone_hash != backbone_hash:
        raise ProvenanceError(f"backbone hash {backbone_hash} does not match expected {config.expected_backbone_hash}")


# metric models


def _sync_batch(clips: Sequence[ClipFeatures], rng: np.random.Generator, count: int, device: str):
    """Aligned (label 1) and offset >= 3 frames (label 0) expression/mel windows from oracle clips"""
    videos, audios, labels = [], [], []
    for _ in range(count):
        feat = clips[int(rng.integers(len(clips)))]
        last = feat.frames - SYNC_WINDOW
        start = int(rng.integers(0, last + 1))
        exprs = feat.emotional if rng.random() < 0.5 else feat.neutral
        videos.append(exprs[start : start + SYNC_WINDOW])
        offsets = [s for s in range(last + 1) if abs(s - start) >= SYNC_NEGATIVE_OFFSET]
        if offsets and rng.random() < 0.5:
            other = offsets[int(rng.integers(len(offsets)))]
            audios.append(feat.mel[other : other + SYNC_WINDOW])
            labels.append(0.0)
        else:
            audios.append(feat.mel[start : start + SYNC_WINDOW])
            labels.append(1.0)
    as_t = lambda a: torch.as_tensor(np.stack(a), dtype=torch.float32, device=device)
    return as_t(videos), as_t(audios), torch.tensor(labels, device=device)


def _classifier_batch(clips: Sequence[ClipFeatures], labels: Sequence[str], rng: np.random.Generator,
                      count: int, device: str):
    length = min(CLASSIFIER_SEQ, min(f.frames for f in clips))
    seqs, targets = [], []
    for _ in range(count):
        feat = clips[int(rng.integers(len(clips)))]
        start = int(rng.integers(0, feat.frames - length + 1))
        seqs.append(feat.emotional[start : start + length])
        targets.append(labels.index(feat.emotion))
    return (torch.as_tensor(np.stack(seqs), dtype=torch.float32, device=device),
            torch.tensor(targets, device=device))


def _oracle_frames(feats: Sequence[ClipFeatures], frames: Sequence[int], tinted: Sequence[bool],
                   device: str) -> torch.Tensor:
    """Render emotional oracle frames; untinted frames carry geometry as the only emotion cue"""
    idx = list(frames)
    pose = torch.as_tensor(np.stack([f.pose_vectors[i] for f, i in zip(feats, idx)]), dtype=torch.float32)
    rotation, translation = latent3d.split_pose_vector_t(pose)
    canonical = torch.as_tensor(np.stack([f.canonical for f in feats]), dtype=torch.float32)
    exprs = torch.as_tensor(np.stack([f.emotional[i] for f, i in zip(feats, idx)]), dtype=torch.float32)
    keypoints = latent3d.compose_keypoints_t(canonical, rotation, translation, exprs)
    tints = torch.as_tensor(np.stack([f.tints[i] if t else np.ones(3, np.float32)
                                      for f, i, t in zip(feats, idx, tinted)]), dtype=torch.float32)
    appearance = torch.as_tensor(np.stack([f.appearance for f in feats]), dtype=torch.float32)
    with torch.no_grad():
        return render.splat_render(keypoints, appearance, tint=tints).to(device)


def _plateau_frame(feat: ClipFeatures, rng: np.random.Generator) -> int:
    """A frame where the emotion envelope is fully on"""
    ramp = max(1, int(round(0.1 * feat.frames)))
    return int(rng.integers(ramp, max(ramp + 1, feat.frames - ramp)))


def _embedder_batch(clips: Sequence[ClipFeatures], words: Sequence[str], rng: np.random.Generator, device: str):
    """EMBEDDER_GROUPS groups holding one frame of every emotion present in the split"""
    by_emotion: Dict[str, List[ClipFeatures]] = {}
    for feat in clips:
        by_emotion.setdefault(feat.emotion, []).append(feat)
    classes = sorted(by_emotion, key=words.index)
    feats, frames, tinted = [], [], []
    for _ in range(EMBEDDER_GROUPS):
        for label in classes:
            pool = by_emotion[label]
            feat = pool[int(rng.integers(len(pool)))]
            feats.append(feat)
            frames.append(_plateau_frame(feat, rng))
            tinted.append(bool(rng.random() < 0.5))
    images = _oracle_frames(feats, frames, tinted, device)
    targets = torch.tensor([words.index(c) for c in classes], device=device)
    return images.view(EMBEDDER_GROUPS, len(classes), *images.shape[1:]), targets


def _embedder_loss(embedder: ToyTextImageEmbedder, images: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Symmetric InfoNCE between the frames of each group and their emotion words"""
    groups, classes = images.shape[:2]
    image_emb = embedder.embed_image(images.flatten(0, 1)).view(groups, classes, -1)
    text_emb = F.normalize(embedder.text(targets), dim=-1)
    logits = embedder.logit_scale * image_emb @ text_emb.T
    order = torch.arange(classes, device=images.device).repeat(groups)
    i2t = F.cross_entropy(logits.flatten(0, 1), order)
    t2i = F.cross_entropy(logits.transpose(1, 2).flatten(0, 1), order)
    return 0.5 * (i2t + t2i)


@torch.no_grad()
def critic_quality(critics: CriticSet, clips: Sequence[ClipFeatures], device: str = "cpu") -> Dict[str, float]:
    """Oracle accuracy of each metric model on held-out clips"""
    sync, classifier, embedder = critics.sync, critics.classifier, critics.embedder
    sync_hits, cls_hits, emb_hits = [], [], []
    rng = np.random.default_rng(0)
    for feat in clips:
        exprs = torch.as_tensor(feat.emotional, dtype=torch.float32, device=device)
        mel = torch.as_tensor(feat.mel, dtype=torch.float32, device=device)
        if feat.frames >= SYNC_WINDOW + SYNC_NEGATIVE_OFFSET:
            video = exprs[None, :SYNC_WINDOW]
            pos = sync.confidence(video, mel[None, :SYNC_WINDOW])
            neg = sync.confidence(video, mel[None, SYNC_NEGATIVE_OFFSET : SYNC_NEGATIVE_OFFSET + SYNC_WINDOW])
            sync_hits.append(float(pos[0] > neg[0]))
        cls_hits.append(float(classifier.predict(exprs[None])[0] == feat.emotion))
        frame = _oracle_frames([feat], [_plateau_frame(feat, rng)], [True], device)
        emb_hits.append(float(embedder.words[int(embedder.vocabulary_logits(frame).argmax())] == feat.emotion))
    mean = lambda v: 100.0 * float(np.mean(v)) if v else 0.0
    return {"sync_accuracy": mean(sync_hits), "classifier_accuracy": mean(cls_hits),
            "embedder_accuracy": mean(emb_hits)}


def train_critics(config: RunConfig) -> CheckpointManifest:
    """
    Train the sync expert, emotion classifier and text-image embedder on oracle data.

    Only ground-truth deformations and frames rendered from them are seen, so
    the metric models never learn from model outputs.
    """
    seed_everything(config.seed)
    device = config.device
    dataset = SyntheticDataset(config.dataset_dir, config.a2et.mfcc_context, require_basis=False)
    train = dataset.clips("train")
    critics = CriticSet(ToySyncNet().to(device), ToyEmotionClassifier().to(device), ToyTextImageEmbedder().to(device),
                        dataset_fingerprint=dataset.fingerprint)
    models = [critics.sync, critics.classifier, critics.embedder]
    optimizer = make_optimizer([p for m in models for p in m.parameters()], config.optim.lr_critic, config)
    rng = np.random.default_rng([config.seed, 97])
    batch = config.batch_clips * config.centers_per_clip
    curve: List[List[float]] = []
    for m in models:
        m.train()

    for step in range(config.steps):
        video, audio, labels = _sync_batch(train, rng, batch, device)
        logits = SYNC_LOGIT_SCALE * critics.sync.confidence(video, audio)
        l_sync = F.binary_cross_entropy_with_logits(logits, labels)
        seqs, targets = _classifier_batch(train, critics.classifier.labels, rng, batch, device)
        l_cls = F.cross_entropy(critics.classifier(seqs), targets)
        images, words = _embedder_batch(train, critics.embedder.words, rng, device)
        l_emb = _embedder_loss(critics.embedder, images, words)
        loss = l_sync + l_cls + l_emb
        if not bool(torch.isfinite(loss)):
            raise TrainingDivergedError(f"metric-model loss became {float(loss)} at step {step}")
        optimizer_step(optimizer, loss)
        if step % config.log_every == 0 or step == config.steps - 1:
            curve.append([float(step), float(l_sync), float(l_cls), float(l_emb)])
            logger.info(f"critics step {step}: sync {float(l_sync):.4f} cls {float(l_cls):.4f} emb {float(l_emb):.4f}")

    critics.eval()
    quality = critic_quality(critics, dataset.clips("test"), device)
    logger.info(f"Metric-model quality on test identities: {quality}")
    base = CheckpointManifest(
        kind="critics",
        config=config.model_dump(),
        step=config.steps,
        dataset_fingerprint=dataset.fingerprint,
        loss_curve=curve,
        quality=quality,
    )
    return save_critics(critics, config.out_dir, base)


# stage 1


def pretrain(config: RunConfig) -> CheckpointManifest:
    """
    Train the A2ET backbone on neutral speech.

    The first phase1_fraction of the steps use the latent loss only; the rest use
    the full loss (sync needs metric models, otherwise it is skipped).
    """
    seed_everything(config.seed)
    device = config.device
    dataset = SyntheticDataset(config.dataset_dir, config.a2et.mfcc_context)
    critics = _optional_critics(config, dataset)
    model = A2etModel(config.a2et, dataset.basis).to(device)
    sampler = BatchSampler(dataset.clips("train", config.data_fraction), config.batch_clips,
                           config.centers_per_clip, config.a2et.half_width, "neutral", config.seed, device)
    optimizer = make_optimizer(model.parameters(), config.optim.lr_backbone, config)
    boundary = int(round(config.phase1_fraction * config.steps))
    guard = DivergenceGuard(config.out_dir)
    curve: List[List[float]] = []
    logger.info(f"Pretraining {count_parameters(model)} parameters for {config.steps} steps "
                f"(latent-only until step {boundary})")

    model.train()
    for step in range(config.steps):
        batch = sampler.sample()
        pe, expr = model(batch.window)
        pred_k = keypoints_of(batch.window, expr)
        gt_k = keypoints_of(batch.window, batch.target)
        parts = LossParts(lat=latent_loss(pe, project_pe(model, batch.target), pred_k, gt_k))
        if step >= boundary:
            parts.sync = sync_term(critics, batch, expr)
            parts.rec = render_term(batch, pred_k, gt_k)
        loss = total_loss(parts, config.weights)
        guard.check(loss, step, batch, parts, {"backbone": model})
        optimizer_step(optimizer, loss)
        if step % config.log_every == 0 or step == config.steps - 1:
            _record(curve, step, loss, parts)
            logger.info(f"pretrain step {step}: {parts.as_floats()}")

    model.eval()
    manifest = CheckpointManifest(
        kind="backbone",
        config=config.model_dump(),
        step=config.steps,
        phase_boundary=boundary,
        dataset_fingerprint=dataset.fingerprint,
        basis_fingerprint=dataset.basis_manifest.fingerprint,
        param_counts={"backbone": count_parameters(model)},
        loss_curve=curve,
    )
    return save_checkpoint(model, config.out_dir, manifest)


# stage 2


@torch.no_grad()
def predict_clip(
    backbone: A2etModel,
    feat: ClipFeatures,
    adapter: Optional[EmotionAdapter] = None,
    emotion: Optional[str] = None,
    head: Optional[nn.Module] = None,
    device: str = "cpu",
) -> ClipPrediction:
    """
    Full-clip prediction at inference (z = 0).

    Without an adapter this is the pretrained backbone; otherwise the guidance of
    `emotion` (default: the clip's label) or of the free `head` drives it.
    """
    batch = clip_batch(feat, backbone.config.half_width, "emotional", device)
    modulate = None
    if adapter is None:
        _, exprs = backbone(batch.window)
    else:
        n = batch.window.size
        z = sample_latent(n, adapter.config.latent_dim, training=False, device=device)
        out = adapted_forward(backbone, adapter, batch.window, z, [emotion or feat.emotion] * n, head)
        exprs = out.expr_emotional
        modulate = adapter.render_modulator(out.guidance)
    keypoints = keypoints_of(batch.window, exprs)
    frames = render.splat_render(keypoints, batch.window.appearance, modulate)
    return ClipPrediction(frames=frames, keypoints=keypoints, exprs=exprs)


@torch.no_grad()
def ground_truth_clip(feat: ClipFeatures, half_width: int, device: str = "cpu") -> ClipPrediction:
    batch = clip_batch(feat, half_width, "emotional", device)
    keypoints = keypoints_of(batch.window, batch.target)
    frames = render.splat_render(keypoints, batch.window.appearance, tint=batch.tints)
    return ClipPrediction(frames=frames, keypoints=keypoints, exprs=batch.target)


@torch.no_grad()
def _snapshot(step: int, backbone: A2etModel, adapter: EmotionAdapter, clips: Sequence[ClipFeatures],
              critics: Optional[CriticSet], device: str) -> Snapshot:
    """Validation keypoint loss and accuracy with z = 0"""
    adapter.eval()
    losses, hits = [], []
    for feat in clips:
        pred = predict_clip(backbone, feat, adapter, device=device)
        gt = ground_truth_clip(feat, backbone.config.half_width, device)
        losses.append(float(latent_loss(None, None, pred.keypoints, gt.keypoints, edn_mode=True)))
        if critics is not None and critics.classifier is not None:
            hits.append(critics.classifier.predict(pred.exprs.unsqueeze(0))[0] == feat.emotion)
    adapter.train()
    acc = 100.0 * sum(hits) / len(hits) if hits else None
    return Snapshot(step=step, val_latent=float(np.mean(losses)), acc_emo=acc)


def _warn_if_rising(snapshots: Sequence[Snapshot]) -> None:
    window = [s.val_latent for s in snapshots[-SNAPSHOT_WINDOW:]]
    if len(window) == SNAPSHOT_WINDOW and any(b > a for a, b in zip(window, window[1:])):
        logger.warning(f"Validation latent loss is not monotone over the last {SNAPSHOT_WINDOW} snapshots: "
                       f"{[round(v, 5) for v in window]}")


def build_adapter(config: RunConfig, backbone: A2etModel) -> EmotionAdapter:
    adapt_cfg = config.adapt
    return EmotionAdapter(adapt_cfg, backbone.config, backbone if adapt_cfg.edn_init == "a2et" else None)


def adapt(config: RunConfig, backbone_dir: str) -> CheckpointManifest:
    """
    Train the emotional adaptation modules against a frozen pretrained backbone.

    Only the adapter's trainable groups receive gradients; the backbone is
    checked bit-for-bit before the adaptation checkpoint is written.
    """
    if config.adapt is None:
        raise ConfigError("adapt needs an adaptation config")
    seed_everything(config.seed)
    device = config.device
    backbone_hash = checkpoint_hash(backbone_dir)
    check_backbone_hash(config, backbone_hash)
    backbone, backbone_manifest = load_backbone(backbone_dir, device)
    dataset = SyntheticDataset(config.dataset_dir, backbone.config.mfcc_context)
    check_dataset(backbone_manifest, dataset)
    freeze(backbone).eval()
    before = state_hash(backbone)
    critics = _optional_critics(config, dataset)

    adapter = build_adapter(config, backbone).to(device)
    adapter.train()
    groups = {name: sum(p.numel() for p in params) for name, params in adapter.parameter_groups().items()}
    optimizer = make_optimizer(adapter.trainable_parameters(), config.optim.lr_adapt, config)
    train = dataset.clips("train", config.data_fraction, exclude=config.held_out_emotions)
    val = dataset.clips("test", exclude=config.held_out_emotions)[: config.val_clips]
    sampler = BatchSampler(train, config.batch_clips, config.centers_per_clip, backbone.config.half_width,
                           "emotional", config.seed, device)
    generator = torch.Generator().manual_seed(config.seed)
    guard = DivergenceGuard(config.out_dir)
    use_edn = config.adapt.use_edn
    curve: List[List[float]] = []
    snapshots: List[Snapshot] = []
    logger.info(f"Adapting {groups} on {len(train)} clips for {config.steps} steps")

    for step in range(config.steps):
        batch = sampler.sample()
        z = sample_latent(batch.clips, config.adapt.latent_dim, True, generator, device)
        z = z.repeat_interleave(batch.centers, dim=0)
        out = adapted_forward(backbone, adapter, batch.window, z, batch.emotions)
        gt_k = keypoints_of(batch.window, batch.target)
        if use_edn:
            lat = latent_loss(None, None, out.keypoints, gt_k, edn_mode=True)
        else:
            lat = latent_loss(out.pe, project_pe(backbone, batch.target), out.keypoints, gt_k)
        parts = LossParts(
            lat=lat,
            sync=sync_term(critics, batch, out.expr_emotional),
            rec=render_term(batch, out.keypoints, gt_k, adapter.render_modulator(out.guidance)),
        )
        loss = total_loss(parts, config.weights)
        guard.check(loss, step, batch, parts, {"adapter": adapter})
        optimizer_step(optimizer, loss)
        if step % config.log_every == 0 or step == config.steps - 1:
            _record(curve, step, loss, parts)
            logger.info(f"adapt step {step}: {parts.as_floats()} gates {gate_summary(adapter)}")
        if (step + 1) % config.eval_interval == 0 or step == config.steps - 1:
            snapshots.append(_snapshot(step + 1, backbone, adapter, val, critics, device))
            logger.info(f"snapshot {snapshots[-1].model_dump()}")
            _warn_if_rising(snapshots)

    if state_hash(backbone) != before or checkpoint_hash(backbone_dir) != backbone_hash:
        raise ProvenanceError("backbone parameters changed during adaptation")
    adapter.eval()
    counts = dict(groups)
    counts["backbone"] = count_parameters(backbone)
    manifest = CheckpointManifest(
        kind="adaptation",
        config=config.model_dump(),
        step=config.steps,
        upstream_hash=backbone_hash,
        dataset_fingerprint=dataset.fingerprint,
        basis_fingerprint=backbone_manifest.basis_fingerprint,
        param_counts=counts,
        loss_curve=curve,
        snapshots=snapshots,
    )
    return save_checkpoint(adapter, config.out_dir, manifest)


# evaluation


def evaluate(
    config: RunConfig,
    backbone_dir: str,
    adaptation_dir: Optional[str] = None,
    split: str = "test",
    png: bool = False,
    label: Optional[str] = None,
) -> MetricReport:
    """
    Metrics of the pretrained (or adapted) model on one split.

    Writes report.json, report.txt and an eval manifest into config.out_dir.
    """
    if config.critics_dir is None:
        raise MetricModelMissingError("evaluation needs metric models; pass --critics")
    device = config.device
    backbone_hash = checkpoint_hash(backbone_dir)
    check_backbone_hash(config, backbone_hash)
    backbone, backbone_manifest = load_backbone(backbone_dir, device)
    dataset = SyntheticDataset(config.dataset_dir, backbone.config.mfcc_context)
    check_dataset(backbone_manifest, dataset)
    critics = load_critics(config.critics_dir, device)
    check_critics(critics, dataset)
    adapter, adaptation_hash = None, None
    if adaptation_dir is not None:
        adapter, _ = load_adaptation(adaptation_dir, backbone, backbone_dir, device)
        adapter.eval()
        adaptation_hash = checkpoint_hash(adaptation_dir)
    label = label or ("adapted" if adapter is not None else "pretrained")

    clips = dataset.clips(split, exclude=config.held_out_emotions)
    per_clip = []
    first: Optional[Tuple[ClipPrediction, ClipPrediction]] = None
    for feat in clips:
        pred = predict_clip(backbone, feat, adapter, device=device)
        gt = ground_truth_clip(feat, backbone.config.half_width, device)
        mel = torch.as_tensor(feat.mel, dtype=torch.float32, device=device)
        per_clip.append(eval_metrics(feat.clip_id, feat.emotion, pred, gt, mel, critics))
        if first is None:
            first = (gt, pred)
    report = build_report(label, per_clip, backbone_hash=backbone_hash, adaptation_hash=adaptation_hash,
                          dataset_fingerprint=dataset.fingerprint)
    write_report(report, config.out_dir)
    if png and first is not None:
        render.save_frame_grid(first[0].frames, first[1].frames, os.path.join(config.out_dir, FRAMES_PNG))
    manifest = CheckpointManifest(
        kind="eval",
        config=config.model_dump(),
        upstream_hash=backbone_hash,
        dataset_fingerprint=dataset.fingerprint,
        basis_fingerprint=backbone_manifest.basis_fingerprint,
        adaptation_hash=adaptation_hash,
        split=split,
    )
    StorageTextFile(config.out_dir).create_json(MANIFEST_NAME, manifest.model_dump())
    logger.info(f"{label}: {report.aggregate.model_dump()}")
    return report


def write_report(report: MetricReport, out_dir: str) -> None:
    storage = StorageTextFile(out_dir)
    storage.create_json(REPORT_JSON, report.model_dump())
    lines = [format_table([(report.label, report.aggregate)])]
    if report.per_emotion_acc:
        lines.append("Acc_emo by emotion: " + ", ".join(f"{k} {v:.2f}" for k, v in report.per_emotion_acc.items()))
    lines.extend(f"note: {c}" for c in report.caveats)
    storage.create(REPORT_TXT, "\n".join(lines) + "\n")
