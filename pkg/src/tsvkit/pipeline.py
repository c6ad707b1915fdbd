"""End-to-end target-speaker verification: training the two modules,
extracting enrollment and test embeddings, fitting the back-end and scoring
trials.

Test embeddings are conditioned on the enrollment utterance, so they are keyed
by the ``(enrol, test)`` pair rather than by the test utterance alone.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import backend as be
from . import representation as rep
from .attention import AttentionParams, forward_attention
from .config import ExperimentConfig
from .corpus import Mixture, ToyCorpus, make_mixture
from .training import StagePlan, StageResult, run_stage

log = logging.getLogger(__name__)

THREADS_ENV = "TSVKIT_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        n = int(raw)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)


def parallel_map(fn: Callable, items: Sequence, threads: int | None = None) -> list:
    """``[fn(x) for x in items]`` over a thread pool; results keep input order."""
    threads = worker_count() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------------- system

@dataclass
class TsvSystem:
    """Attention and representation parameters.  ``attention=None`` is the
    zero-effort verifier that embeds its input directly."""

    attention: AttentionParams | None
    representation: rep.RepresentationParams

    @classmethod
    def build(cls, cfg: ExperimentConfig, with_attention: bool = True) -> "TsvSystem":
        att = AttentionParams(cfg.attention, seed=cfg.seed) if with_attention else None
        return cls(att, rep.RepresentationParams(cfg.representation, seed=cfg.seed + 1))

    @property
    def scheme(self) -> str:
        return self.representation.config.scheme

    def state(self) -> dict[str, np.ndarray]:
        out = self.representation.state()
        if self.attention is not None:
            out.update(self.attention.state())
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        att_keys = {k for k in state if k.startswith("attention.")}
        if self.attention is not None:
            self.attention.load_state({k: state[k] for k in att_keys})
        elif att_keys:
            raise KeyError("checkpoint holds attention parameters but the system has none")
        self.representation.load_state({k: v for k, v in state.items() if k not in att_keys})


def _embed_attended(system: TsvSystem, y, x) -> np.ndarray:
    out = forward_attention(y, x, system.attention)
    inp = out.coefficients if system.scheme == "R" else out.signals[0]
    return rep.embed(inp, system.representation).data.copy()


def observed_embedding(system: TsvSystem, y, x) -> np.ndarray:
    """Embedding of observed ``y`` with attention steered by enrollment ``x``."""
    if system.attention is None:
        return rep.embed(y, system.representation).data.copy()
    return _embed_attended(system, y, x)


def enrol_embedding(system: TsvSystem, x, mode: str = "attended") -> np.ndarray:
    """``attended`` feeds ``x`` as both observed and reference speech; ``direct``
    bypasses the attention module."""
    if mode not in ("attended", "direct"):
        raise ValueError(f"unknown enrollment mode {mode!r}")
    if mode == "direct" and system.scheme == "R":
        raise ValueError("direct enrollment is undefined for scheme R: "
                         "masked coefficients have no waveform bypass")
    if system.attention is None or mode == "direct":
        return rep.embed(x, system.representation).data.copy()
    return _embed_attended(system, x, x)


# ----------------------------------------------------------------- training

def stage_plans(cfg: ExperimentConfig, stages: Iterable[int]) -> list[tuple[int, StagePlan]]:
    """(phase, plan) pairs for the requested stage ids, in training order."""
    wanted = set(stages)
    bad = wanted - {1, 2, 3}
    if bad:
        raise ValueError(f"unknown stages {sorted(bad)}")
    out, phase = [], {}
    for plan in cfg.plans:
        phase[plan.stage] = phase.get(plan.stage, -1) + 1
        if plan.stage in wanted:
            out.append((phase[plan.stage], plan))
    return out


def baseline_plan(cfg: ExperimentConfig) -> StagePlan:
    """Representation-only training on clean speech, without attention."""
    stage2 = next(p for p in cfg.plans if p.stage == 2)
    stage3 = next(p for p in cfg.plans if p.stage == 3)
    return replace(stage2, name="baseline", data="single", attended=False,
                   epochs=stage2.epochs + stage3.epochs)


def train_system(cfg: ExperimentConfig, corpus: ToyCorpus, system: TsvSystem,
                 stages: Iterable[int] = (1, 2, 3),
                 after_stage: Callable[[int, TsvSystem], None] | None = None) -> list[StageResult]:
    """Run the requested stages in order, calling ``after_stage`` when each stage id completes."""
    plans = stage_plans(cfg, stages)
    if system.attention is None:
        raise ValueError("the staged procedure needs an attention module; use train_baseline")
    results = []
    for k, (phase, plan) in enumerate(plans):
        log.info("stage %d (%s): %d epochs at lr %g", plan.stage, plan.name, plan.epochs, plan.lr)
        results.append(run_stage(plan, corpus, system.attention, system.representation,
                                 cfg.weights, seed=cfg.seed, phase=phase))
        last_of_stage = k + 1 == len(plans) or plans[k + 1][1].stage != plan.stage
        if after_stage is not None and last_of_stage:
            after_stage(plan.stage, system)
    return results


def train_baseline(cfg: ExperimentConfig, corpus: ToyCorpus) -> tuple[TsvSystem, StageResult]:
    system = TsvSystem.build(cfg, with_attention=False)
    result = run_stage(baseline_plan(cfg), corpus, None, system.representation, cfg.weights,
                       seed=cfg.seed, phase=9)
    return system, result


# --------------------------------------------------------------- data sets

@dataclass
class EvalSet:
    enrol: dict[str, str]            # enrollment utterance id -> speaker
    mixtures: list[Mixture]
    trials: list[be.Trial]


def make_eval_set(corpus: ToyCorpus, per_speaker: int, snr_range=(0.0, 5.0),
                  protocol: str = "max", seed: int = 0) -> EvalSet:
    """One enrollment utterance per evaluation speaker and ``per_speaker`` two-talker
    test mixtures with that speaker as the target.

    A trial is a target trial when the enrolled speaker is the mixture's target and
    a nontarget trial when the enrolled speaker is absent from the mixture.
    """
    speakers = corpus.eval_speakers
    if len(speakers) < 3:
        raise ValueError("need at least three evaluation speakers")
    rng = np.random.default_rng([seed, 31337])
    enrol_of = {s: corpus.utts_of(s, "all")[0] for s in speakers}
    enrol = {u: s for s, u in enrol_of.items()}
    mixtures = []
    for a, spk in enumerate(speakers):
        pool = corpus.utts_of(spk, "all")[1:]
        for k in range(per_speaker):
            b = int(rng.integers(len(speakers) - 1))
            b += b >= a
            other = corpus.utts_of(speakers[b], "all")
            tu = pool[int(rng.integers(len(pool)))]
            iu = other[int(rng.integers(len(other)))]
            snr = float(rng.uniform(*snr_range))
            mixtures.append(make_mixture(corpus, tu, iu, enrol_of[spk], snr, protocol,
                                         mix_id=f"{protocol}{a:02d}{k:03d}_{tu}_{iu}"))
    trials = []
    for e_id, e_spk in enrol.items():
        for m in mixtures:
            tgt = corpus.utterances[m.target_utt].speaker
            itf = corpus.utterances[m.interf_utt].speaker
            if e_spk == tgt:
                trials.append(be.Trial(e_id, m.mix_id, True))
            elif e_spk != itf:
                trials.append(be.Trial(e_id, m.mix_id, False))
    return EvalSet(enrol, mixtures, trials)


def backend_training_items(corpus: ToyCorpus, per_speaker: int, with_mixtures: bool = True,
                           seed: int = 0) -> list[tuple[np.ndarray, np.ndarray, str]]:
    """(observed, reference, speaker) triples from training speakers: every training
    utterance as single-talker speech plus ``per_speaker`` two-talker mixtures."""
    rng = np.random.default_rng([seed, 4242])
    speakers = corpus.train_speakers
    items = []
    for a, spk in enumerate(speakers):
        utts = corpus.utts_of(spk)
        for k, u in enumerate(utts):
            ref = utts[(k + 1) % len(utts)]
            items.append((corpus.utterances[u].wave.samples, corpus.utterances[ref].wave.samples, spk))
        if not with_mixtures:
            continue
        for _ in range(per_speaker):
            tu, ru = rng.choice(len(utts), size=2, replace=False)
            b = int(rng.integers(len(speakers) - 1))
            b += b >= a
            other = corpus.utts_of(speakers[b])
            iu = other[int(rng.integers(len(other)))]
            m = make_mixture(corpus, utts[tu], iu, utts[ru], float(rng.uniform(0.0, 5.0)), "max")
            items.append((m.mixture.samples, corpus.utterances[utts[ru]].wave.samples, spk))
    return items


# ------------------------------------------------------------------ backend

@dataclass
class BackendModels:
    lda: be.LdaModel
    plda: be.PldaModel
    cohort: np.ndarray          # processed per-speaker mean embeddings
    top_k: int

    def process(self, e: np.ndarray) -> np.ndarray:
        return be.length_normalize(self.lda.transform(e))

    def raw_score(self, e_ref: np.ndarray, e_test: np.ndarray) -> float:
        return float(be.score_plda(self.plda, self.process(e_ref), self.process(e_test)))

    def cohort_scores(self, e: np.ndarray) -> np.ndarray:
        p = self.process(e)
        return be.score_plda(self.plda, np.repeat(p[None, :], len(self.cohort), axis=0), self.cohort)

    def score(self, e_ref: np.ndarray, e_test: np.ndarray) -> tuple[float, float]:
        raw = self.raw_score(e_ref, e_test)
        norm = be.adaptive_snorm(raw, self.cohort_scores(e_ref), self.cohort_scores(e_test), self.top_k)
        return raw, norm


def fit_backend(embeddings: np.ndarray, labels: Sequence[str], lda_dim: int = 100,
                plda_dim: int = 100, plda_iters: int = 10, top_k: int = be.SNORM_TOP_K) -> BackendModels:
    """LDA, length normalization and PLDA on training embeddings; the s-norm cohort is
    the per-speaker mean of the processed embeddings."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = np.unique(labels).size
    out_dim = min(lda_dim, n_classes - 1, x.shape[1])
    lda = be.fit_lda(x, labels, out_dim)
    processed = be.length_normalize(lda.transform(x))
    q = min(plda_dim, out_dim - 1)
    plda = be.fit_plda(processed, labels, q=q, iters=plda_iters)
    cohort = np.stack([processed[labels == s].mean(axis=0) for s in np.unique(labels)])
    return BackendModels(lda, plda, cohort, min(top_k, len(cohort)))


def fit_backend_for(system: TsvSystem, cfg: ExperimentConfig, corpus: ToyCorpus,
                    threads: int | None = None) -> BackendModels:
    items = backend_training_items(corpus, cfg.backend.mixtures_per_speaker,
                                   with_mixtures=system.attention is not None, seed=cfg.seed)
    embs = parallel_map(lambda it: observed_embedding(system, it[0], it[1]), items, threads)
    b = cfg.backend
    return fit_backend(np.stack(embs), [it[2] for it in items], b.lda_dim, b.plda_dim,
                       b.plda_iters, b.snorm_top_k)


def score_trials(models: BackendModels, enrol: dict[str, np.ndarray],
                 test: dict[tuple[str, str], np.ndarray], trials: Sequence[be.Trial],
                 threads: int | None = None) -> list[be.ScoreRecord]:
    def one(t: be.Trial) -> be.ScoreRecord:
        if t.enrol not in enrol:
            raise KeyError(f"no embedding for enrollment utterance {t.enrol!r}")
        if (t.enrol, t.test) not in test:
            raise KeyError(f"no embedding for test utterance {t.test!r} under enrollment {t.enrol!r}")
        raw, norm = models.score(enrol[t.enrol], test[(t.enrol, t.test)])
        return be.ScoreRecord(t.enrol, t.test, raw, norm)

    return parallel_map(one, list(trials), threads)


# --------------------------------------------------------------- evaluation

@dataclass
class Metrics:
    eer: float
    dcf08: float
    dcf10: float

    def report(self) -> str:
        return f"EER {self.eer:.4f} DCF08 {self.dcf08:.4f} DCF10 {self.dcf10:.4f}"


def metrics(scores: Sequence[float], labels: Sequence[bool]) -> Metrics:
    return Metrics(be.compute_eer(scores, labels),
                   be.compute_min_dcf(scores, labels, **be.DCF08),
                   be.compute_min_dcf(scores, labels, **be.DCF10))


def trial_embeddings(system: TsvSystem, corpus: ToyCorpus, eval_set: EvalSet, mode: str,
                     threads: int | None = None):
    mix = {m.mix_id: m for m in eval_set.mixtures}
    enrol_ids = sorted(eval_set.enrol)
    enrol_vecs = parallel_map(lambda u: enrol_embedding(system, corpus.utterances[u].wave.samples, mode),
                              enrol_ids, threads)
    pairs = sorted({(t.enrol, t.test) for t in eval_set.trials})
    test_vecs = parallel_map(lambda p: observed_embedding(system, mix[p[1]].mixture.samples,
                                                      corpus.utterances[p[0]].wave.samples),
                             pairs, threads)
    return dict(zip(enrol_ids, enrol_vecs)), dict(zip(pairs, test_vecs))


def evaluate(system: TsvSystem, cfg: ExperimentConfig, corpus: ToyCorpus, eval_set: EvalSet,
             mode: str | None = None, models: BackendModels | None = None,
             threads: int | None = None) -> tuple[Metrics, list[be.ScoreRecord]]:
    """Fit the back-end (unless given), score every trial and compute metrics on
    the normalized scores."""
    mode = mode or cfg.enroll_mode
    models = models or fit_backend_for(system, cfg, corpus, threads)
    enrol, test = trial_embeddings(system, corpus, eval_set, mode, threads)
    records = score_trials(models, enrol, test, eval_set.trials, threads)
    m = metrics([r.norm for r in records], [t.target for t in eval_set.trials])
    return m, records
