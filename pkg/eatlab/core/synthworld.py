"""
Procedural synthetic world: identities, utterances, head poses and emotion fields.

Serves both as dataset factory and as ground-truth oracle. Emotional clips are
built additively from their neutral counterpart,

    emotional[i] = neutral[i] + template * intensity * envelope(i)

so every adaptation claim can be checked against the exact emotion template.
Everything is a pure function of its seeds.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from eatlab.core import latent3d, render
from eatlab.errors import UnknownEmotionError
from eatlab.models.config import EMOTIONS, WorldConfig

logger = logging.getLogger("eatlab.synthworld")

SAMPLE_RATE = 16000
FPS = 25
HOP = SAMPLE_RATE // FPS  # 640 samples per video frame
NUM_PHONEMES = 12
CARRIER_BASE_HZ = 1000.0
CARRIER_STEP_HZ = 500.0
APPEARANCE_DIM = 5  # r, g, b, size, aspect

# Keypoint groups
MOUTH = (0, 1, 2, 3)  # left corner, right corner, upper lip, lower lip
LIP_CORNERS = (0, 1)
BROW = (4, 5, 6, 7)  # left outer, left inner, right inner, right outer
EYE = (8, 9, 10, 11)  # left upper lid, left lower lid, right upper lid, right lower lid
JAW_CHEEK = (12, 13, 14)  # chin, left cheek, right cheek

_BASE_LAYOUT = np.array(
    [
        [-0.25, -0.45, 0.30],
        [0.25, -0.45, 0.30],
        [0.00, -0.38, 0.35],
        [0.00, -0.55, 0.33],
        [-0.45, 0.40, 0.25],
        [-0.15, 0.42, 0.30],
        [0.15, 0.42, 0.30],
        [0.45, 0.40, 0.25],
        [-0.30, 0.22, 0.28],
        [-0.30, 0.12, 0.28],
        [0.30, 0.22, 0.28],
        [0.30, 0.12, 0.28],
        [0.00, -0.80, 0.25],
        [-0.55, -0.15, 0.15],
        [0.55, -0.15, 0.15],
    ]
)

_GROUP_COLORS = {
    MOUTH: np.array([0.75, 0.25, 0.30]),
    BROW: np.array([0.25, 0.18, 0.12]),
    EYE: np.array([0.15, 0.20, 0.35]),
}

_OPENNESS = np.array([0.0, 0.10, 0.06, 0.03, 0.12, 0.08, 0.02, 0.05, 0.11, 0.04, 0.07, 0.09])
_WIDTH = np.array([0.0, 0.02, -0.03, 0.04, 0.0, -0.02, 0.03, -0.04, 0.01, 0.05, -0.01, -0.05])


def _template(moves: Dict[int, Tuple[float, float, float]]) -> np.ndarray:
    field = np.zeros((latent3d.NUM_KEYPOINTS, 3))
    for idx, delta in moves.items():
        field[idx] = delta
    return field


_TEMPLATES: Dict[str, np.ndarray] = {
    "neutral": _template({}),
    "happy": _template({0: (-0.04, 0.06, 0.0), 1: (0.04, 0.06, 0.0), 13: (0.0, 0.04, 0.0), 14: (0.0, 0.04, 0.0),
                        9: (0.0, 0.02, 0.0), 11: (0.0, 0.02, 0.0)}),
    "angry": _template({5: (0.03, -0.06, 0.0), 6: (-0.03, -0.06, 0.0), 4: (0.0, -0.03, 0.0), 7: (0.0, -0.03, 0.0),
                        8: (0.0, -0.02, 0.0), 10: (0.0, -0.02, 0.0), 2: (0.0, -0.02, 0.0), 3: (0.0, 0.02, 0.0)}),
    "disgusted": _template({2: (0.0, 0.05, 0.0), 0: (0.0, -0.02, 0.0), 1: (0.0, -0.02, 0.0), 13: (0.0, 0.04, 0.0),
                            14: (0.0, 0.04, 0.0), 5: (0.0, -0.04, 0.0), 6: (0.0, -0.04, 0.0)}),
    "fear": _template({4: (0.0, 0.04, 0.0), 5: (0.02, 0.04, 0.0), 6: (-0.02, 0.04, 0.0), 7: (0.0, 0.04, 0.0),
                       8: (0.0, 0.03, 0.0), 10: (0.0, 0.03, 0.0), 0: (-0.05, 0.0, 0.0), 1: (0.05, 0.0, 0.0),
                       3: (0.0, -0.03, 0.0)}),
    "sad": _template({0: (0.0, -0.06, 0.0), 1: (0.0, -0.06, 0.0), 5: (0.0, 0.05, 0.0), 6: (0.0, 0.05, 0.0),
                      4: (0.0, -0.02, 0.0), 7: (0.0, -0.02, 0.0), 12: (0.0, 0.02, 0.0)}),
    "surprised": _template({4: (0.0, 0.08, 0.0), 5: (0.0, 0.08, 0.0), 6: (0.0, 0.08, 0.0), 7: (0.0, 0.08, 0.0),
                            8: (0.0, 0.04, 0.0), 10: (0.0, 0.04, 0.0), 3: (0.0, -0.09, 0.0), 12: (0.0, -0.07, 0.0)}),
    "contempt": _template({1: (0.03, 0.05, 0.0), 14: (0.0, 0.02, 0.0), 0: (0.0, -0.01, 0.0), 2: (0.015, 0.0, 0.0)}),
}

_TINTS: Dict[str, Tuple[float, float, float]] = {
    "neutral": (1.0, 1.0, 1.0),
    "happy": (1.06, 1.02, 0.96),
    "angry": (1.18, 0.90, 0.88),
    "disgusted": (0.95, 1.06, 0.90),
    "fear": (0.90, 0.93, 1.02),
    "sad": (0.90, 0.92, 1.05),
    "surprised": (1.04, 1.04, 1.04),
    "contempt": (1.02, 0.97, 0.97),
}


@dataclass(frozen=True)
class IdentitySpec:
    """One synthetic face: canonical keypoints (15, 3) and appearance (15, 5)"""
    id: int
    seed: int
    canonical: np.ndarray
    appearance: np.ndarray


@dataclass(frozen=True)
class EmotionStyle:
    """Emotion label with its deformation template, intensity and colour tint"""
    label: str
    field: np.ndarray
    intensity: float
    tint: np.ndarray


@dataclass(frozen=True)
class SyntheticUtterance:
    """Narrowband-carrier waveform whose frames encode a phoneme track"""
    seed: int
    waveform: np.ndarray
    phoneme_track: np.ndarray

    @property
    def duration_frames(self) -> int:
        return int(self.phoneme_track.shape[0])


@dataclass(frozen=True)
class ClipRecord:
    """One paired neutral/emotional clip"""
    clip_id: int
    identity: IdentitySpec
    utterance: SyntheticUtterance
    pose_vectors: np.ndarray
    neutral_exprs: np.ndarray
    emotional_exprs: np.ndarray
    emotion: EmotionStyle
    pose_seed: int

    @property
    def frames(self) -> int:
        return self.utterance.duration_frames

    @property
    def poses(self) -> List[latent3d.PoseParams]:
        return [latent3d.pose_from_vector(v) for v in self.pose_vectors]

    @property
    def envelope(self) -> np.ndarray:
        return emotion_envelope(self.frames)


def carrier_hz(phoneme: int) -> float:
    return CARRIER_BASE_HZ + CARRIER_STEP_HZ * phoneme


def emotion_style(label: str, intensity: float = 1.0) -> EmotionStyle:
    """Template, tint and intensity for one of the eight emotion classes"""
    if label not in _TEMPLATES:
        raise UnknownEmotionError(f"unknown emotion '{label}'; expected one of {EMOTIONS}")
    if not 0.0 <= intensity <= 1.0:
        raise ValueError(f"intensity must be in [0, 1], got {intensity}")
    return EmotionStyle(
        label=label,
        field=_TEMPLATES[label].astype(np.float32),
        intensity=float(intensity),
        tint=np.asarray(_TINTS[label], dtype=np.float32),
    )


def emotion_envelope(frames: int) -> np.ndarray:
    """Raised-cosine ramp over the first and last 10% of frames, 1.0 in between"""
    ramp = max(1, int(round(0.1 * frames)))
    env = np.ones(frames)
    for i in range(min(ramp, frames)):
        value = 0.5 * (1.0 - math.cos(math.pi * (i + 1) / (ramp + 1)))
        env[i] = min(env[i], value)
        env[frames - 1 - i] = min(env[frames - 1 - i], value)
    return env


def mouth_offset(phoneme: int) -> np.ndarray:
    """Deformation of the four mouth keypoints for one phoneme; zero elsewhere"""
    o, w = _OPENNESS[phoneme], _WIDTH[phoneme]
    offset = np.zeros((latent3d.NUM_KEYPOINTS, 3))
    protrude = 0.5 * max(-w, 0.0)
    offset[0] = (-w, -0.2 * o, protrude)
    offset[1] = (w, -0.2 * o, protrude)
    offset[2] = (0.0, 0.25 * o, protrude)
    offset[3] = (0.0, -o, protrude + 0.1 * o)
    return offset


def gen_identity(seed: int, identity_id: Optional[int] = None) -> IdentitySpec:
    """Deterministic identity: jittered, scaled face layout and per-keypoint appearance"""
    rng = np.random.default_rng([seed, 17])
    scale = rng.uniform(0.85, 1.1)
    width = rng.uniform(0.9, 1.1)
    jitter = np.clip(rng.normal(0.0, 0.03, size=(latent3d.NUM_KEYPOINTS, 3)), -0.06, 0.06)
    canonical = _BASE_LAYOUT * np.array([scale * width, scale, scale]) + jitter
    canonical = np.clip(canonical, -1.0, 1.0).astype(np.float32)

    skin = np.array([rng.uniform(0.55, 0.95), rng.uniform(0.4, 0.75), rng.uniform(0.3, 0.6)])
    colors = np.tile(skin, (latent3d.NUM_KEYPOINTS, 1))
    for group, tone in _GROUP_COLORS.items():
        colors[list(group)] = 0.6 * tone + 0.4 * skin
    colors = np.clip(colors + rng.normal(0.0, 0.02, size=colors.shape), 0.0, 1.0)
    size = rng.uniform(0.6, 1.0, size=(latent3d.NUM_KEYPOINTS, 1))
    aspect = rng.uniform(-0.3, 0.3, size=(latent3d.NUM_KEYPOINTS, 1))
    appearance = np.concatenate([colors, size, aspect], axis=1).astype(np.float32)
    return IdentitySpec(
        id=seed if identity_id is None else identity_id,
        seed=seed,
        canonical=canonical,
        appearance=appearance,
    )


def gen_utterance(seed: int, frames: int) -> SyntheticUtterance:
    """
    Phoneme track in segments of 2-5 frames, rendered as a phase-continuous
    sine at the phoneme's carrier frequency plus faint noise.
    """
    if frames < 5:
        raise ValueError(f"an utterance needs at least 5 frames, got {frames}")
    rng = np.random.default_rng([seed, 29])
    track = np.empty(frames, dtype=np.int32)
    pos = 0
    while pos < frames:
        length = int(rng.integers(2, 6))
        track[pos : pos + length] = int(rng.integers(0, NUM_PHONEMES))
        pos += length

    t = np.arange(HOP) / SAMPLE_RATE
    phase = 0.0
    chunks = []
    for symbol in track:
        freq = carrier_hz(int(symbol))
        chunks.append(0.5 * np.sin(2.0 * np.pi * freq * t + phase))
        phase = (phase + 2.0 * np.pi * freq * HOP / SAMPLE_RATE) % (2.0 * np.pi)
    waveform = np.concatenate(chunks) + rng.normal(0.0, 0.005, size=frames * HOP)
    return SyntheticUtterance(seed=seed, waveform=waveform.astype(np.float32), phoneme_track=track)


def decode_phonemes(waveform: np.ndarray) -> np.ndarray:
    """Recover the phoneme track from dominant frequencies of each 640-sample frame"""
    wave = np.asarray(waveform, dtype=np.float64)
    frames = wave.shape[0] // HOP
    segments = wave[: frames * HOP].reshape(frames, HOP)
    spectrum = np.abs(np.fft.rfft(segments, axis=1))
    spectrum[:, 0] = 0.0
    peak_hz = np.argmax(spectrum, axis=1) * SAMPLE_RATE / HOP
    symbols = np.rint((peak_hz - CARRIER_BASE_HZ) / CARRIER_STEP_HZ)
    return np.clip(symbols, 0, NUM_PHONEMES - 1).astype(np.int32)


def gen_pose_track(seed: int, frames: int) -> np.ndarray:
    """Smooth damped random walk of 6-vector poses; per-frame rotation stays below 3 degrees"""
    rng = np.random.default_rng([seed, 41])
    max_angle = math.radians(15.0)
    max_step = math.radians(0.6)
    angles = rng.uniform(-0.5, 0.5, size=3) * max_angle
    trans = rng.uniform(-0.02, 0.02, size=3)
    ang_vel = np.zeros(3)
    trans_vel = np.zeros(3)
    out = np.empty((frames, 6))
    for i in range(frames):
        out[i, :3] = angles
        out[i, 3:] = trans
        ang_vel = np.clip(0.8 * ang_vel + rng.normal(0.0, math.radians(0.2), size=3), -max_step, max_step)
        angles = np.clip(0.98 * angles + ang_vel, -max_angle, max_angle)
        trans_vel = np.clip(0.8 * trans_vel + rng.normal(0.0, 0.001, size=3), -0.003, 0.003)
        trans = np.clip(0.98 * trans + trans_vel, -0.05, 0.05)
    return out


def synthesize_clip(
    identity: IdentitySpec,
    utterance: SyntheticUtterance,
    emotion: EmotionStyle,
    pose_seed: int,
    clip_id: int = 0,
) -> ClipRecord:
    """Neutral mouth motion from the phoneme track, emotion added by the oracle rule"""
    frames = utterance.duration_frames
    neutral = np.stack([mouth_offset(int(p)) for p in utterance.phoneme_track]).astype(np.float32)
    scale = (emotion.intensity * emotion_envelope(frames))[:, None, None]
    emotional = (neutral.astype(np.float64) + emotion.field.astype(np.float64)[None] * scale).astype(np.float32)
    return ClipRecord(
        clip_id=clip_id,
        identity=identity,
        utterance=utterance,
        pose_vectors=gen_pose_track(pose_seed, frames),
        neutral_exprs=neutral,
        emotional_exprs=emotional,
        emotion=emotion,
        pose_seed=pose_seed,
    )


def frame_tints(clip: ClipRecord) -> np.ndarray:
    """Per-frame RGB multipliers 1 + (tint - 1) * intensity * envelope, shape (frames, 3)"""
    scale = clip.emotion.intensity * clip.envelope
    return (1.0 + (clip.emotion.tint.astype(np.float64)[None, :] - 1.0) * scale[:, None]).astype(np.float32)


@dataclass(frozen=True)
class ClipPlan:
    clip_id: int
    identity_id: int
    identity_seed: int
    emotion: str
    intensity: float
    utterance_seed: int
    pose_seed: int
    frames: int


def plan_dataset(world: WorldConfig) -> List[ClipPlan]:
    """Seeds and labels of every clip; a pure function of the world config"""
    base = world.seed * 1_000_003
    plans = []
    clip_id = 0
    for ident in range(world.identities):
        for j in range(world.clips_per_identity):
            plans.append(
                ClipPlan(
                    clip_id=clip_id,
                    identity_id=ident,
                    identity_seed=base + ident,
                    emotion=world.emotions[j % len(world.emotions)],
                    intensity=world.intensities[(j // len(world.emotions)) % len(world.intensities)],
                    utterance_seed=base + 500_000 + 10_007 * ident + j,
                    pose_seed=base + 700_000 + 10_007 * ident + j,
                    frames=world.frames,
                )
            )
            clip_id += 1
    return plans


def build_clip(plan: ClipPlan) -> ClipRecord:
    identity = gen_identity(plan.identity_seed, plan.identity_id)
    utterance = gen_utterance(plan.utterance_seed, plan.frames)
    style = emotion_style(plan.emotion, plan.intensity)
    return synthesize_clip(identity, utterance, style, plan.pose_seed, plan.clip_id)


def generate_clips(world: WorldConfig, workers: int = 1) -> List[ClipRecord]:
    """Generate every planned clip, optionally fanned out over worker processes"""
    plans = plan_dataset(world)
    logger.info(f"Generating {len(plans)} clips ({world.identities} identities, {world.frames} frames each)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(build_clip, plans, chunksize=8))
    return [build_clip(p) for p in plans]


def split_by_identity(identity_ids: Sequence[int], test_fraction: float, seed: int) -> Dict[int, str]:
    """Deterministic identity-level train/test split; test identities never appear in training"""
    ids = sorted(set(int(i) for i in identity_ids))
    n_test = max(1, int(math.ceil(test_fraction * len(ids))))
    if n_test >= len(ids):
        raise ValueError("split leaves no training identities")
    order = np.random.default_rng([seed, 53]).permutation(len(ids))
    test = {ids[k] for k in order[:n_test]}
    return {i: ("test" if i in test else "train") for i in ids}


def render_clip_frames(clip: ClipRecord, emotional: bool = True) -> np.ndarray:
    """Ground-truth frames (T, 3, H, W) of a clip; emotional frames carry the emotion tint"""
    exprs = clip.emotional_exprs if emotional else clip.neutral_exprs
    pose = torch.as_tensor(clip.pose_vectors, dtype=torch.float32)
    rotation, translation = latent3d.split_pose_vector_t(pose)
    canonical = torch.as_tensor(clip.identity.canonical, dtype=torch.float32)
    keypoints = latent3d.compose_keypoints_t(canonical, rotation, translation,
                                             torch.as_tensor(exprs, dtype=torch.float32))
    tint = torch.as_tensor(frame_tints(clip)) if emotional else None
    with torch.no_grad():
        frames = render.splat_render(keypoints, torch.as_tensor(clip.identity.appearance, dtype=torch.float32),
                                     tint=tint)
    return frames.numpy()
