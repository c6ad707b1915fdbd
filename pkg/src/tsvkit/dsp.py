"""Waveform I/O, two-talker mixing, SI-SDR and spectral features.

Feature extraction comes in two flavours that share their arithmetic: numpy
functions on :class:`Waveform` / :class:`FeatureMatrix` for analysis, and
``*_tensor`` variants that record on the autodiff tape so a speaker
classification loss can reach back through the STFT into the extractor.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SAMPLE_RATE = 8000
WIN_LENGTH = 256
HOP_LENGTH = 128
N_BINS = WIN_LENGTH // 2 + 1
DELTA_WINDOW = 2
SI_SDR_FLOOR = 1e-12


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise ValueError("waveform is empty")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureMatrix:
    """frames × dims."""

    data: np.ndarray
    frame_shift: float = HOP_LENGTH / SAMPLE_RATE

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError("feature matrix needs at least one frame")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> int:
        return self.data.shape[1]


# ------------------------------------------------------------------------ I/O

def load_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def quantize(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def save_wav(w: Waveform, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(quantize(w.samples).tobytes())


# --------------------------------------------------------------------- mixing

def _power(x: np.ndarray) -> float:
    return float(np.mean(x * x))


def mix_at_snr(target: Waveform, interference: Waveform, snr_db: float,
               protocol: str = "max") -> tuple[Waveform, Waveform]:
    """Mix two utterances so the target-to-interference ratio is ``snr_db``.

    Powers are measured over the region where both signals are present.
    ``max`` pads the shorter signal with trailing zeros, ``min`` truncates the
    longer one.  Returns ``(mixture, aligned_target)``.
    """
    if target.sample_rate != interference.sample_rate:
        raise ValueError("sample rates differ")
    if protocol not in ("max", "min"):
        raise ValueError(f"unknown protocol {protocol!r}")
    s, n = target.samples, interference.samples
    overlap = min(s.size, n.size)
    p_s, p_n = _power(s[:overlap]), _power(n[:overlap])
    if p_s == 0.0 or p_n == 0.0:
        raise ValueError("cannot mix a silent signal")
    gain = np.sqrt(p_s / (p_n * 10.0 ** (snr_db / 10.0)))
    length = max(s.size, n.size) if protocol == "max" else overlap
    s_al = np.zeros(length)
    n_al = np.zeros(length)
    s_al[:min(length, s.size)] = s[:length]
    n_al[:min(length, n.size)] = gain * n[:length]
    return Waveform(s_al + n_al, target.sample_rate), Waveform(s_al, target.sample_rate)


def overlap_rate(target_len: int, interf_len: int, protocol: str = "max") -> float:
    if target_len <= 0 or interf_len <= 0:
        raise ValueError("lengths must be positive")
    if protocol == "min":
        return 1.0
    return min(target_len, interf_len) / max(target_len, interf_len)


# --------------------------------------------------------------------- SI-SDR

def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB on mean-removed signals, capped by the residual floor."""
    est = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    ref = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = ref @ ref
    if ref_energy == 0.0:
        raise ValueError("reference has zero energy")
    proj = (est @ ref) / ref_energy * ref
    signal = proj @ proj
    resid = proj - est
    noise = max(resid @ resid, SI_SDR_FLOOR * signal)
    return float(10.0 * np.log10(signal / noise))


def si_sdr_tensor(estimate: Tensor, reference) -> Tensor:
    """Differentiable SI-SDR of a 1-D estimate against a constant reference."""
    ref = np.asarray(getattr(reference, "samples", reference), dtype=np.float64).reshape(-1)
    ref = ref - ref.mean()
    ref_energy = ref @ ref
    if ref_energy == 0.0:
        raise ValueError("reference has zero energy")
    est = ad.reshape(estimate, (-1,))
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    est = est - ad.mean(est)
    scale = ad.sum_(est * ref) * (1.0 / ref_energy)
    proj = scale * ref
    signal = ad.sum_(proj * proj)
    resid = proj - est
    noise = ad.maximum(ad.sum_(resid * resid), signal * SI_SDR_FLOOR)
    return 10.0 * ad.log10(signal / noise)


# ------------------------------------------------------------------- spectra

@lru_cache(maxsize=None)
def _analysis_basis() -> tuple[np.ndarray, np.ndarray]:
    """Hamming-windowed real DFT matrices, WIN_LENGTH × N_BINS each."""
    window = np.hamming(WIN_LENGTH)  # symmetric
    n = np.arange(WIN_LENGTH)[:, None]
    k = np.arange(N_BINS)[None, :]
    phase = 2.0 * np.pi * n * k / WIN_LENGTH
    cos_b = window[:, None] * np.cos(phase)
    sin_b = -window[:, None] * np.sin(phase)
    cos_b.flags.writeable = False
    sin_b.flags.writeable = False
    return cos_b, sin_b


def n_stft_frames(length: int) -> int:
    if length < WIN_LENGTH:
        raise ValueError(f"need at least {WIN_LENGTH} samples, got {length}")
    return 1 + (length - WIN_LENGTH) // HOP_LENGTH


def stft_magnitude(w) -> FeatureMatrix:
    x = np.asarray(getattr(w, "samples", w), dtype=np.float64)
    n_stft_frames(x.size)
    cos_b, sin_b = _analysis_basis()
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH]
    re, im = frames @ cos_b, frames @ sin_b
    return FeatureMatrix(np.sqrt(re * re + im * im))


def stft_magnitude_tensor(x: Tensor) -> Tensor:
    """Magnitude spectrogram as a tape op, laid out N_BINS × frames."""
    x = ad.reshape(x, (-1,))
    n_stft_frames(x.shape[0])
    cos_b, sin_b = _analysis_basis()
    frames = ad.frame(x, WIN_LENGTH, HOP_LENGTH)
    re = ad.matmul(frames, cos_b)
    im = ad.matmul(frames, sin_b)
    return ad.transpose(ad.sqrt(re * re + im * im))


def _delta_indices(n_frames: int):
    t = np.arange(n_frames)
    return [(n, np.clip(t + n, 0, n_frames - 1), np.clip(t - n, 0, n_frames - 1))
            for n in range(1, DELTA_WINDOW + 1)]


def _delta_np(f: np.ndarray) -> np.ndarray:
    norm = 2.0 * sum(n * n for n in range(1, DELTA_WINDOW + 1))
    out = np.zeros_like(f)
    for n, plus, minus in _delta_indices(f.shape[0]):
        out += n * (f[plus] - f[minus])
    return out / norm


def add_deltas(f: FeatureMatrix) -> FeatureMatrix:
    """Append regression deltas and accelerations: width goes from d to 3d."""
    d1 = _delta_np(f.data)
    d2 = _delta_np(d1)
    return FeatureMatrix(np.concatenate([f.data, d1, d2], axis=1), f.frame_shift)


def _delta_tensor(f: Tensor) -> Tensor:
    norm = 2.0 * sum(n * n for n in range(1, DELTA_WINDOW + 1))
    out = None
    for n, plus, minus in _delta_indices(f.shape[1]):
        term = (ad.take(f, plus, axis=1) - ad.take(f, minus, axis=1)) * float(n)
        out = term if out is None else out + term
    return out * (1.0 / norm)


def add_deltas_tensor(f: Tensor) -> Tensor:
    """Tape version of :func:`add_deltas` for a dims × frames tensor."""
    d1 = _delta_tensor(f)
    return ad.concat([f, d1, _delta_tensor(d1)], axis=0)
