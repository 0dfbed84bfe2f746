"""
Audio features aligned to video frames, and (2w+1)-frame window assembly.

One analysis frame per video frame: window and hop are both 640 samples at
16 kHz (25 fps). Each frame is Hann-windowed, zero-padded to a 2048-point FFT
(1025 bins), reduced to 80 unnormalised HTK-scale mel bands over 0-8000 Hz
(librosa filterbank) and log-compressed with a 1e-10 floor. MFCCs are the
first 13 orthonormal DCT-II coefficients of the log-mel frame.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import librosa
import numpy as np
import scipy.fft
import scipy.signal
import torch

from eatlab.errors import AlignmentError

SAMPLE_RATE = 16000
HOP = 640
WIN = 640
N_FFT = 2048
N_MELS = 80
N_MFCC = 13
LOG_FLOOR = 1e-10
FMAX = 8000.0

ArrayLike = Union[np.ndarray, torch.Tensor]


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float = FMAX) -> np.ndarray:
    """Unnormalised HTK-scale triangular filters, shape (n_mels, n_fft // 2 + 1)"""
    return librosa.filters.mel(sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax,
                               htk=True, norm=None, dtype=np.float64)


def band_centres(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = FMAX) -> np.ndarray:
    """Centre frequency in Hz of each mel band"""
    return librosa.mel_frequencies(n_mels=n_mels + 2, fmin=fmin, fmax=fmax, htk=True)[1:-1]


_FILTERBANK = mel_filterbank()
_WINDOW = scipy.signal.get_window("hann", WIN, fftbins=True)


def _frames(waveform: np.ndarray) -> np.ndarray:
    wave = np.asarray(waveform, dtype=np.float64)
    if wave.ndim != 1 or wave.shape[0] == 0 or wave.shape[0] % HOP != 0:
        raise AlignmentError(f"waveform length {wave.shape[-1] if wave.ndim else 0} is not a positive multiple of {HOP}")
    return wave.reshape(-1, HOP)


def power_spectrum(waveform: np.ndarray) -> np.ndarray:
    """|FFT|^2 of each Hann-windowed frame, shape (frames, 1025)"""
    spec = scipy.fft.rfft(_frames(waveform) * _WINDOW[None, :], n=N_FFT, axis=1)
    return np.abs(spec) ** 2


def mel(waveform: np.ndarray) -> np.ndarray:
    """Log-mel spectrogram, shape (len / 640, 80)"""
    energies = power_spectrum(waveform) @ _FILTERBANK.T
    return np.log(np.maximum(energies, LOG_FLOOR)).astype(np.float32)


def mfcc(waveform: np.ndarray, log_mel: Optional[np.ndarray] = None) -> np.ndarray:
    """First 13 orthonormal DCT-II coefficients of the log-mel frames"""
    if log_mel is None:
        log_mel = mel(waveform)
    coeffs = librosa.feature.mfcc(S=np.asarray(log_mel, dtype=np.float64).T, n_mfcc=N_MFCC, dct_type=2, norm="ortho")
    return coeffs.T.astype(np.float32)


def window_indices(frames: int, centers: ArrayLike, half_width: int) -> np.ndarray:
    """Edge-clamped frame indices, shape (len(centers), 2w+1)"""
    centers = np.asarray(centers, dtype=np.int64).reshape(-1)
    offsets = np.arange(-half_width, half_width + 1)
    return np.clip(centers[:, None] + offsets[None, :], 0, frames - 1)


def mfcc_context(mfcc_frames: np.ndarray, context: int = 5) -> np.ndarray:
    """Stack each frame with its neighbours: (frames, context, 13), edges replicated"""
    half = context // 2
    idx = window_indices(mfcc_frames.shape[0], np.arange(mfcc_frames.shape[0]), half)
    return np.asarray(mfcc_frames)[idx]


def semantic_features(mfcc_ctx: torch.Tensor, proj: torch.nn.Module) -> torch.Tensor:
    """Apply the learned semantic projection to (..., context, 13) MFCC context -> (..., d_s)"""
    return proj(mfcc_ctx)


@dataclass(frozen=True)
class FeatureWindow:
    """Edge-padded window of 2w+1 frames centred at `center`"""
    center: int
    half_width: int
    speech: ArrayLike
    acoustic: ArrayLike
    poses: ArrayLike


def _take(values: ArrayLike, idx: np.ndarray) -> ArrayLike:
    if isinstance(values, torch.Tensor):
        return values[torch.as_tensor(idx, device=values.device)]
    return np.asarray(values)[idx]


def make_window(speech: ArrayLike, acoustic: ArrayLike, poses: ArrayLike, i: int, w: int) -> FeatureWindow:
    """
    Window of per-frame features around frame i.

    Args:
        speech, acoustic, poses: per-frame arrays sharing the leading frame axis
        i: centre frame, 0 <= i < frames
        w: half width

    Returns:
        FeatureWindow whose arrays have 2w+1 rows; row w is frame i
    """
    frames = speech.shape[0]
    if not 0 <= i < frames:
        raise IndexError(f"centre {i} outside [0, {frames})")
    idx = window_indices(frames, [i], w)[0]
    return FeatureWindow(center=i, half_width=w, speech=_take(speech, idx),
                         acoustic=_take(acoustic, idx), poses=_take(poses, idx))


def windows_for(frames: int, half_width: int, centers: Optional[Sequence[int]] = None) -> np.ndarray:
    """Index grid for every centre (default: all frames)"""
    centers = np.arange(frames) if centers is None else np.asarray(centers)
    return window_indices(frames, centers, half_width)
