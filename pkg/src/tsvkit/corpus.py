"""Deterministic synthetic speakers and the toy corpus built from them.

Each toy speaker is an 8th-order all-pole vocal-tract envelope (four resonances)
driven by a pulse train at a speaker-specific rate plus seeded noise, gated by a
random syllable envelope.  Regenerating from the same settings is sample-identical.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import lfilter

from .dsp import SAMPLE_RATE, Waveform, mix_at_snr

FORMANT_RANGES = ((300.0, 900.0), (900.0, 2200.0), (2200.0, 3000.0), (3000.0, 3800.0))


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    f0: float
    formants: tuple[float, ...]
    bandwidths: tuple[float, ...]
    breathiness: float

    def lpc(self, sample_rate: int = SAMPLE_RATE, shift: float = 1.0) -> np.ndarray:
        poles = []
        for f, bw in zip(self.formants, self.bandwidths):
            r = np.exp(-np.pi * bw / sample_rate)
            theta = 2.0 * np.pi * f * shift / sample_rate
            poles += [r * np.exp(1j * theta), r * np.exp(-1j * theta)]
        return np.real(np.poly(poles))


@dataclass(frozen=True)
class ToyCorpusSpec:
    n_train_speakers: int = 8
    n_eval_speakers: int = 4
    utts_per_speaker: int = 12
    heldout_per_speaker: int = 4
    min_duration: float = 2.0
    max_duration: float = 4.0
    sample_rate: int = SAMPLE_RATE
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def make_speaker(seed: int, index: int) -> SpeakerProfile:
    rng = np.random.default_rng([seed, 7919, index])
    return SpeakerProfile(
        speaker_id=f"spk{index:03d}",
        f0=float(rng.uniform(90.0, 260.0)),
        formants=tuple(float(rng.uniform(lo, hi)) for lo, hi in FORMANT_RANGES),
        bandwidths=tuple(float(b) for b in rng.uniform(60.0, 180.0, size=4)),
        breathiness=float(rng.uniform(0.02, 0.15)),
    )


def _syllable_envelope(n: int, rng: np.random.Generator, sample_rate: int) -> np.ndarray:
    env = np.zeros(n)
    t = int(rng.integers(0, int(0.05 * sample_rate)))
    while t < n:
        on = int(rng.uniform(0.12, 0.35) * sample_rate)
        seg = np.hanning(on) ** 0.5 * rng.uniform(0.5, 1.0)
        end = min(n, t + on)
        env[t:end] = seg[:end - t]
        t = end + int(rng.uniform(0.02, 0.12) * sample_rate)
    return env


def synthesize(profile: SpeakerProfile, duration: float, rng: np.random.Generator,
               sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    rate = profile.f0 * rng.uniform(0.95, 1.05)
    contour = rate * (1.0 + 0.06 * np.sin(2 * np.pi * rng.uniform(1.5, 4.0) * t + rng.uniform(0, 2 * np.pi)))
    phase = np.cumsum(contour) / sample_rate
    pulses = np.diff(np.floor(phase), prepend=0.0)
    excitation = pulses + profile.breathiness * rng.standard_normal(n)
    voiced = lfilter([1.0], profile.lpc(sample_rate, shift=rng.uniform(0.97, 1.03)), excitation)
    out = voiced * _syllable_envelope(n, rng, sample_rate)
    peak = np.max(np.abs(out))
    return out / peak * rng.uniform(0.3, 0.6)


@dataclass
class Utterance:
    utt_id: str
    speaker: str
    wave: Waveform


@dataclass
class ToyCorpus:
    spec: ToyCorpusSpec
    speakers: list[SpeakerProfile]
    utterances: dict[str, Utterance] = field(default_factory=dict)

    @property
    def train_speakers(self) -> list[str]:
        return [s.speaker_id for s in self.speakers[:self.spec.n_train_speakers]]

    @property
    def eval_speakers(self) -> list[str]:
        return [s.speaker_id for s in self.speakers[self.spec.n_train_speakers:]]

    def speaker_index(self, speaker: str) -> int:
        return self.train_speakers.index(speaker)

    def utts_of(self, speaker: str, split: str = "train") -> list[str]:
        ids = sorted(u for u, v in self.utterances.items() if v.speaker == speaker)
        cut = len(ids) - self.spec.heldout_per_speaker
        return {"train": ids[:cut], "heldout": ids[cut:], "all": ids}[split]


def build_corpus(spec: ToyCorpusSpec) -> ToyCorpus:
    speakers = [make_speaker(spec.seed, i) for i in range(spec.n_train_speakers + spec.n_eval_speakers)]
    corpus = ToyCorpus(spec, speakers)
    for s_idx, prof in enumerate(speakers):
        for u in range(spec.utts_per_speaker):
            rng = np.random.default_rng([spec.seed, 104729, s_idx, u])
            dur = rng.uniform(spec.min_duration, spec.max_duration)
            uid = f"{prof.speaker_id}_u{u:03d}"
            corpus.utterances[uid] = Utterance(uid, prof.speaker_id,
                                               Waveform(synthesize(prof, dur, rng, spec.sample_rate),
                                                        spec.sample_rate))
    return corpus


@dataclass
class Mixture:
    mix_id: str
    target_utt: str
    interf_utt: str
    reference_utt: str
    snr_db: float
    protocol: str
    mixture: Waveform
    target: Waveform


def make_mixture(corpus: ToyCorpus, target_utt: str, interf_utt: str, reference_utt: str,
                 snr_db: float, protocol: str, mix_id: str | None = None) -> Mixture:
    mix, tgt = mix_at_snr(corpus.utterances[target_utt].wave, corpus.utterances[interf_utt].wave,
                          snr_db, protocol)
    return Mixture(mix_id or f"{target_utt}+{interf_utt}", target_utt, interf_utt, reference_utt,
                   float(snr_db), protocol, mix, tgt)


def random_mixtures(corpus: ToyCorpus, speakers: list[str], count: int, rng: np.random.Generator,
                    split: str = "train", snr_range=(0.0, 5.0), protocol: str = "max") -> list[Mixture]:
    """Two-talker mixtures of distinct speakers; the reference is another utterance of the target."""
    out = []
    for k in range(count):
        a, b = rng.choice(len(speakers), size=2, replace=False)
        t_utts = corpus.utts_of(speakers[a], split)
        i_utts = corpus.utts_of(speakers[b], split)
        tu, ru = rng.choice(len(t_utts), size=2, replace=False)
        iu = rng.integers(len(i_utts))
        snr = float(rng.uniform(*snr_range))
        out.append(make_mixture(corpus, t_utts[tu], i_utts[iu], t_utts[ru], snr, protocol,
                                mix_id=f"mix{k:04d}_{t_utts[tu]}_{i_utts[iu]}"))
    return out
