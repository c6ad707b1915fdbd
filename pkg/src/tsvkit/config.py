"""Experiment configuration: flat ``key = value`` files with profile includes.

A file may start with ``include = NAME`` where NAME is a bundled profile
(``default``, ``toy``) or a path relative to the including file.  Later keys
override earlier ones.  Every value is validated when the config is built.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .attention import AttentionConfig
from .corpus import ToyCorpusSpec
from .representation import SCHEMES, RepresentationConfig
from .training import LossWeights, StagePlan, default_plans

PROFILE_DIR = Path(__file__).with_name("profiles")
ENROLL_MODES = ("attended", "direct")


class ConfigError(ValueError):
    """A config key is unknown, malformed, or violates a module precondition."""


def parse_text(text: str, origin: str = "<text>") -> list[tuple[str, str]]:
    pairs = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{n}: empty key")
        pairs.append((key, value))
    return pairs


def _resolve_include(name: str, base: Path | None) -> Path:
    bundled = PROFILE_DIR / f"{name}.cfg"
    if bundled.exists():
        return bundled
    path = Path(name) if base is None else base / name
    if not path.exists():
        raise ConfigError(f"include {name!r} is neither a bundled profile nor an existing file")
    return path


def load_pairs(path, _seen: tuple[Path, ...] = ()) -> dict[str, str]:
    """Flatten a config file and its includes into one ordered mapping."""
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"include cycle through {path}")
    out: dict[str, str] = {}
    for key, value in parse_text(path.read_text(encoding="utf-8"), str(path)):
        if key == "include":
            out.update(load_pairs(_resolve_include(value, path.parent), _seen + (path,)))
        else:
            out[key] = value
    return out


def profile_pairs(name: str) -> dict[str, str]:
    return load_pairs(_resolve_include(name, None))


@dataclass
class BackendConfig:
    lda_dim: int = 100
    plda_dim: int = 100
    plda_iters: int = 10
    snorm_top_k: int = 200
    mixtures_per_speaker: int = 8


@dataclass
class ExperimentConfig:
    attention: AttentionConfig
    representation: RepresentationConfig
    weights: LossWeights
    plans: list[StagePlan]
    corpus: ToyCorpusSpec
    backend: BackendConfig = field(default_factory=BackendConfig)
    eval_mixtures_per_speaker: int = 6
    enroll_mode: str = "attended"
    seed: int = 0

    @property
    def scheme(self) -> str:
        return self.representation.scheme

    def architecture_text(self) -> str:
        """Canonical text of everything that fixes parameter names and shapes."""
        items = [f"attention.{k}={v}" for k, v in sorted(self.attention.to_dict().items())]
        items += [f"representation.{k}={v}" for k, v in sorted(self.representation.to_dict().items())]
        return "\n".join(items) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.architecture_text().encode()).digest()

    def validate(self) -> None:
        try:
            self.attention.validate()
            self.representation.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from err
        if self.attention.kernels != self.representation.kernels:
            raise ConfigError("representation kernels must match the attention encoder")
        if self.enroll_mode not in ENROLL_MODES:
            raise ConfigError(f"enroll_mode must be one of {ENROLL_MODES}")
        if self.enroll_mode == "direct" and self.scheme == "R":
            raise ConfigError("direct enrollment needs a waveform scheme (T, F or FA), not R")
        c = self.corpus
        if c.n_train_speakers < 2:
            raise ConfigError("need at least two training speakers")
        if c.n_eval_speakers < 3:
            raise ConfigError("need at least three evaluation speakers to form nontarget trials")
        if c.heldout_per_speaker < 2 or c.utts_per_speaker - c.heldout_per_speaker < 2:
            raise ConfigError("each speaker needs at least two training and two held-out utterances")
        if not 0 < c.min_duration <= c.max_duration:
            raise ConfigError("need 0 < min_duration <= max_duration")
        shortest = int(c.min_duration * c.sample_rate)
        if shortest < self.attention.kernels[-1]:
            raise ConfigError("utterances shorter than the longest encoder kernel")
        for p in self.plans:
            if p.epochs < 0 or p.batch_size < 1 or p.batches_per_epoch < 1:
                raise ConfigError(f"stage {p.stage} ({p.name}): counts must be positive")
            if p.lr <= 0 or p.clip <= 0 or p.patience < 1:
                raise ConfigError(f"stage {p.stage} ({p.name}): lr, clip and patience must be positive")
            if not 0 <= p.single_fraction <= 1:
                raise ConfigError("single_fraction must lie in [0, 1]")
            if p.snr_range[0] > p.snr_range[1]:
                raise ConfigError("snr_min exceeds snr_max")
            if p.segment < self.attention.kernels[-1]:
                raise ConfigError("training segment shorter than the longest encoder kernel")
        b = self.backend
        for name in ("lda_dim", "plda_dim", "plda_iters", "snorm_top_k", "mixtures_per_speaker"):
            if getattr(b, name) < 1:
                raise ConfigError(f"backend.{name} must be positive")
        if self.eval_mixtures_per_speaker < 1:
            raise ConfigError("corpus.mixtures_per_speaker must be positive")


def _floats(value: str, n: int, key: str) -> list[float]:
    parts = [p for p in value.replace(" ", "").split(",") if p]
    if len(parts) != n:
        raise ConfigError(f"{key}: expected {n} comma-separated values, got {value!r}")
    try:
        return [float(p) for p in parts]
    except ValueError as err:
        raise ConfigError(f"{key}: {err}") from err


def _typed(value: str, kind, key: str):
    try:
        if kind is int:
            f = float(value)
            if f != int(f):
                raise ValueError(f"{value!r} is not an integer")
            return int(f)
        return kind(value)
    except ValueError as err:
        raise ConfigError(f"{key}: {err}") from err


_ATTENTION_INTS = ("n_filters", "extractor_channels", "tcn_channels", "tcn_kernel", "tcn_blocks",
                   "tcn_stacks", "resnet_blocks", "resnet_channels", "speaker_dim")
_REPRESENTATION_INTS = ("resnet_channels", "resnet_blocks", "embed_dim", "attention_hidden")
_CORPUS = {"n_train_speakers": int, "n_eval_speakers": int, "utts_per_speaker": int,
           "heldout_per_speaker": int, "min_duration": float, "max_duration": float}
_TRAIN_SCALARS = {"patience": int, "batch_size": int, "batches_per_epoch": int, "segment": int,
                  "single_fraction": float, "clip": float}


def build(pairs: dict[str, str], overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Typed, validated config from flat key/value pairs."""
    kv = dict(pairs)
    kv.update(overrides or {})
    used: set[str] = set()

    def take(key, kind=str, default=None):
        if key not in kv:
            if default is None:
                raise ConfigError(f"missing key {key!r}")
            return default
        used.add(key)
        return _typed(kv[key], kind, key)

    att = {k: take(f"attention.{k}", int) for k in _ATTENTION_INTS}
    kernels = tuple(int(k) for k in _floats(take("attention.kernels"), 3, "attention.kernels"))
    corpus_kw = {k: take(f"corpus.{k}", t) for k, t in _CORPUS.items()}
    seed = take("seed", int, 0)
    corpus = ToyCorpusSpec(seed=seed, **corpus_kw)
    n_speakers = corpus.n_train_speakers
    attention = AttentionConfig(kernels=kernels, n_speakers=n_speakers, **att)
    scheme = take("scheme").upper()
    if scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    representation = RepresentationConfig(
        scheme=scheme, n_filters=attention.n_filters, kernels=kernels, n_speakers=n_speakers,
        **{k: take(f"representation.{k}", int) for k in _REPRESENTATION_INTS})
    try:
        weights = LossWeights(*(take(f"loss.{k}", float) for k in ("alpha", "beta", "gamma", "eta")))
    except ValueError as err:
        raise ConfigError(str(err)) from err

    epochs = [int(e) for e in _floats(take("train.epochs"), 4, "train.epochs")]
    lrs = _floats(take("train.lr"), 4, "train.lr")
    scalars = {k: take(f"train.{k}", t) for k, t in _TRAIN_SCALARS.items()}
    snr = (take("train.snr_min", float), take("train.snr_max", float))
    plans = default_plans(epochs, snr_range=snr, **scalars)
    for plan, lr in zip(plans, lrs):
        plan.lr = lr

    backend = BackendConfig(**{k: take(f"backend.{k}", int) for k in
                               ("lda_dim", "plda_dim", "plda_iters", "snorm_top_k", "mixtures_per_speaker")})
    cfg = ExperimentConfig(attention, representation, weights, plans, corpus, backend,
                           eval_mixtures_per_speaker=take("corpus.mixtures_per_speaker", int),
                           enroll_mode=take("enroll_mode").lower(), seed=seed)
    unknown = sorted(set(kv) - used)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg.validate()
    return cfg


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Load ``path`` (default: the bundled default profile) with optional overrides."""
    pairs = profile_pairs("default") if path is None else load_pairs(_resolve_include(str(path), None))
    return build(pairs, overrides)


def profile(name: str, **overrides) -> ExperimentConfig:
    return build(profile_pairs(name), {k.replace("__", "."): str(v) for k, v in overrides.items()})


def dump(cfg: ExperimentConfig) -> str:
    """Flat text that ``build`` maps back to an equal config."""
    a, r, c = cfg.attention, cfg.representation, cfg.corpus
    plans = cfg.plans
    lines = [f"seed = {cfg.seed}", f"scheme = {r.scheme}", f"enroll_mode = {cfg.enroll_mode}"]
    lines += [f"attention.{k} = {getattr(a, k)}" for k in _ATTENTION_INTS]
    lines.append("attention.kernels = " + ",".join(str(k) for k in a.kernels))
    lines += [f"representation.{k} = {getattr(r, k)}" for k in _REPRESENTATION_INTS]
    lines += [f"loss.{k} = {getattr(cfg.weights, k)!r}" for k in ("alpha", "beta", "gamma", "eta")]
    lines.append("train.epochs = " + ",".join(str(p.epochs) for p in plans))
    lines.append("train.lr = " + ",".join(repr(p.lr) for p in plans))
    lines += [f"train.{k} = {getattr(plans[0], k)!r}" for k in _TRAIN_SCALARS]
    lines += [f"train.snr_min = {plans[0].snr_range[0]!r}", f"train.snr_max = {plans[0].snr_range[1]!r}"]
    lines += [f"corpus.{k} = {getattr(c, k)!r}" for k in _CORPUS]
    lines.append(f"corpus.mixtures_per_speaker = {cfg.eval_mixtures_per_speaker}")
    lines += [f"backend.{k} = {getattr(cfg.backend, k)}" for k in
              ("lda_dim", "plda_dim", "plda_iters", "snorm_top_k", "mixtures_per_speaker")]
    return "\n".join(lines) + "\n"
