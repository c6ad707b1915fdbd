"""Multi-task losses, Adam, the plateau learning-rate rule and the staged
training procedure.

Stage 1 trains the attention module on reconstruction plus reference-speaker
classification, first on mixtures, then on mixtures and clean speech.  Stage 2
freezes it and trains the representation module on speaker classification of
the extracted signal.  Stage 3 fine-tunes both on the weighted sum of all
three losses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import representation as rep
from .attention import AttentionParams, forward_attention
from .autodiff import Tensor
from .corpus import ToyCorpus, make_mixture
from .dsp import SAMPLE_RATE, si_sdr_tensor
from .nn import ParamSet

log = logging.getLogger(__name__)

SEGMENT_SECONDS = 4.0


class TrainingError(RuntimeError):
    pass


@dataclass
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 10.0
    eta: float = 10.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta > 1:
            raise ValueError("need alpha, beta >= 0 and alpha + beta <= 1")


# ------------------------------------------------------------------- losses

def loss_j1(signals: Sequence[Tensor], target, alpha: float = 0.1, beta: float = 0.1) -> Tensor:
    """Negative scale-weighted SI-SDR of the three reconstructions."""
    s1, s2, s3 = signals
    return -((1.0 - alpha - beta) * si_sdr_tensor(s1, target)
             + alpha * si_sdr_tensor(s2, target) + beta * si_sdr_tensor(s3, target))


def loss_ce(logits: Tensor, label: int) -> Tensor:
    n = logits.shape[-1]
    if not 0 <= label < n:
        raise ValueError(f"label {label} outside [0, {n})")
    return -ad.reshape(ad.log_softmax(logits), (-1,))[label]


def total_loss(j1, j2, j3, gamma: float = 10.0, eta: float = 10.0):
    return j1 + gamma * j2 + eta * j3


# ----------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        t = params[name]
        if g.shape != t.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {t.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data = t.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule_update(history: Sequence[float], lr: float, patience: int = 3) -> float:
    """Halve ``lr`` iff the latest epoch completes ``patience`` epochs without a new best."""
    if not history:
        raise ValueError("need at least one epoch loss")
    best, stagnant, halve = np.inf, 0, False
    for loss in history:
        halve = False
        if loss < best:
            best, stagnant = loss, 0
        else:
            stagnant += 1
            if stagnant == patience:
                halve, stagnant = True, 0
    return lr / 2 if halve else lr


# -------------------------------------------------------------------- stages

@dataclass
class StagePlan:
    stage: int
    name: str
    trainable: str               # attention | representation | all
    losses: tuple[str, ...]      # subset of j1, j2, j3
    lr: float
    data: str                    # mixture | mixture+single | single
    epochs: int = 20
    patience: int = 3
    batch_size: int = 4
    batches_per_epoch: int = 25
    segment: int = int(SEGMENT_SECONDS * SAMPLE_RATE)
    single_fraction: float = 0.5
    snr_range: tuple[float, float] = (0.0, 5.0)
    attended: bool = True        # False trains the representation on raw input (single-talker SV)
    clip: float = 5.0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2 or 3")
        if self.trainable not in ("attention", "representation", "all"):
            raise ValueError(f"bad trainable set {self.trainable!r}")
        if self.data not in ("mixture", "mixture+single", "single"):
            raise ValueError(f"bad data mix {self.data!r}")


def default_plans(epochs=(20, 20, 20, 10), **overrides) -> list[StagePlan]:
    """Stage 1 pre-training and fine-tuning, stage 2, stage 3."""
    plans = [
        StagePlan(1, "pretrain", "attention", ("j1", "j2"), 1e-3, "mixture", epochs[0]),
        StagePlan(1, "finetune", "attention", ("j1", "j2"), 1e-4, "mixture+single", epochs[1]),
        StagePlan(2, "representation", "representation", ("j3",), 1e-4, "mixture+single", epochs[2]),
        StagePlan(3, "joint", "all", ("j1", "j2", "j3"), 1e-5, "mixture+single", epochs[3]),
    ]
    return [replace(p, **overrides) for p in plans]


@dataclass
class Sample:
    y: np.ndarray
    x: np.ndarray
    s: np.ndarray
    label: int
    kind: str        # mixture | single


def _segment(a: np.ndarray, start: int, length: int) -> np.ndarray:
    out = np.zeros(length)
    piece = a[start:start + length]
    out[:piece.size] = piece
    return out


def sample_batch(corpus: ToyCorpus, plan: StagePlan, rng: np.random.Generator) -> list[Sample]:
    """Draw ``plan.batch_size`` fixed-length segments from the training speakers."""
    speakers = corpus.train_speakers
    if not speakers or not corpus.utterances:
        raise ValueError("empty corpus")
    out = []
    for _ in range(plan.batch_size):
        single = plan.data == "single" or (plan.data == "mixture+single"
                                           and rng.random() < plan.single_fraction)
        spk = int(rng.integers(len(speakers)))
        utts = corpus.utts_of(speakers[spk])
        tu, ru = rng.choice(len(utts), size=2, replace=False)
        target = corpus.utterances[utts[tu]].wave.samples
        reference = corpus.utterances[utts[ru]].wave.samples
        start = int(rng.integers(0, max(0, target.size - plan.segment) + 1))
        x = reference[:plan.segment]
        if single:
            s = _segment(target, start, plan.segment)
            out.append(Sample(s, x, s, spk, "single"))
            continue
        other = int(rng.integers(len(speakers) - 1))
        other += other >= spk
        o_utts = corpus.utts_of(speakers[other])
        iu = o_utts[int(rng.integers(len(o_utts)))]
        snr = float(rng.uniform(*plan.snr_range))
        mix = make_mixture(corpus, utts[tu], iu, utts[ru], snr, "max")
        out.append(Sample(_segment(mix.mixture.samples, start, plan.segment), x,
                          _segment(mix.target.samples, start, plan.segment), spk, "mixture"))
    return out


@dataclass
class StageResult:
    plan: StagePlan
    epoch_losses: list[float]
    epoch_j1: list[float]
    lrs: list[float]

    def log_lines(self) -> list[str]:
        return [f"{self.plan.stage} {e + 1} {loss!r} {lr!r}"
                for e, (loss, lr) in enumerate(zip(self.epoch_losses, self.lrs))]


def sample_loss(sample: Sample, plan: StagePlan, attention: AttentionParams | None,
                representation: rep.RepresentationParams | None,
                weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted loss of one sample under ``plan``; records on the active tape."""
    parts: dict[str, Tensor] = {}
    if attention is not None and plan.attended:
        out = forward_attention(sample.y, sample.x, attention)
        if "j1" in plan.losses:
            parts["j1"] = loss_j1(out.signals, sample.s, weights.alpha, weights.beta)
        if "j2" in plan.losses:
            parts["j2"] = loss_ce(out.logits, sample.label)
        rep_input = out.coefficients if representation is not None and not representation.config.uses_waveform \
            else out.signals[0]
    else:
        rep_input = sample.y
    if "j3" in plan.losses:
        e = rep.embed(rep_input, representation)
        parts["j3"] = loss_ce(rep.classify(e, representation), sample.label)
    zero = Tensor(0.0)
    loss = total_loss(parts.get("j1", zero), parts.get("j2", zero), parts.get("j3", zero),
                      weights.gamma, weights.eta)
    return loss, {k: float(v.data) for k, v in parts.items()}


def _trainable(plan: StagePlan, attention, representation) -> ParamSet:
    out = ParamSet()
    if plan.trainable in ("attention", "all"):
        out.update(attention)
    if plan.trainable in ("representation", "all"):
        out.update(representation)
    return out


def run_stage(plan: StagePlan, corpus: ToyCorpus, attention: AttentionParams | None = None,
              representation: rep.RepresentationParams | None = None,
              weights: LossWeights | None = None, seed: int = 0, phase: int = 0,
              on_epoch: Callable[[int, float, float], None] | None = None) -> StageResult:
    """Train the parameter sets named by ``plan`` in place; returns the loss curve."""
    weights = weights or LossWeights()
    if plan.trainable in ("attention", "all") and attention is None:
        raise ValueError(f"stage {plan.stage} needs attention parameters")
    if "j3" in plan.losses and representation is None:
        raise ValueError(f"stage {plan.stage} needs representation parameters")
    trainable = _trainable(plan, attention, representation)
    frozen = [p for p in (attention, representation) if p is not None]
    for p in frozen:
        p.set_trainable(False)
    trainable.set_trainable(True)

    rng = np.random.default_rng([seed, plan.stage, phase])
    state = OptimizerState(lr=plan.lr)
    result = StageResult(plan, [], [], [])
    try:
        for epoch in range(plan.epochs):
            batch_losses, batch_j1 = [], []
            for _ in range(plan.batches_per_epoch):
                batch = sample_batch(corpus, plan, rng)
                grads = {k: np.zeros_like(t.data) for k, t in trainable.items()}
                total, j1 = 0.0, 0.0
                for sample in batch:
                    with ad.Tape() as tape:
                        loss, parts = sample_loss(sample, plan, attention, representation, weights)
                    if not np.isfinite(loss.data):
                        raise TrainingError(f"stage {plan.stage} ({plan.name}) epoch {epoch + 1}: "
                                            f"non-finite loss {parts}")
                    g = tape.backward(loss, trainable.tensors())
                    for k in grads:
                        grads[k] += g[k]
                    total += float(loss.data)
                    j1 += parts.get("j1", 0.0)
                n = len(batch)
                for k in grads:
                    grads[k] /= n
                clip_global_norm(grads, plan.clip)
                adam_step(trainable, grads, state)
                batch_losses.append(total / n)
                batch_j1.append(j1 / n)
            epoch_loss = float(np.mean(batch_losses))
            result.epoch_losses.append(epoch_loss)
            result.epoch_j1.append(float(np.mean(batch_j1)))
            result.lrs.append(state.lr)
            log.info("stage %d %s epoch %d loss %.4f lr %.2e", plan.stage, plan.name, epoch + 1,
                     epoch_loss, state.lr)
            if on_epoch is not None:
                on_epoch(epoch + 1, epoch_loss, state.lr)
            state.lr = lr_schedule_update(result.epoch_losses, state.lr, plan.patience)
    finally:
        for p in frozen:
            p.set_trainable(True)
    return result
