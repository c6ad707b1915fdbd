"""Command-line driver: ``simulate``, ``train``, ``embed``, ``score`` and ``eval``.

Corpus directory layout written by ``simulate`` and read by the other commands::

    corpus.cfg            corpus settings (key = value)
    utt2spk               "UTT SPEAKER" per single-talker utterance
    single/UTT.wav
    mix_max.list          "MIX TARGET_UTT INTERF_UTT REFERENCE_UTT SNR_DB"
    mix_max/MIX.wav       mixture, and MIX-target.wav its aligned target
    mix_min.list, mix_min/   same for the minimum-duration protocol
    trials                "ENROL TEST target|nontarget" over evaluation speakers
    trials_min            the same trials against the min-protocol mixtures
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import backend as be
from . import checkpoint
from .config import ConfigError, ExperimentConfig, dump, load_config
from .corpus import Mixture, ToyCorpus, ToyCorpusSpec, Utterance, build_corpus, make_speaker
from .dsp import load_wav, save_wav
from .pipeline import (TsvSystem, backend_training_items, enrol_embedding, fit_backend, make_eval_set,
                       metrics, observed_embedding, parallel_map, score_trials, train_baseline,
                       train_system)

log = logging.getLogger("tsvkit")

_CORPUS_KEYS = ("n_train_speakers", "n_eval_speakers", "utts_per_speaker", "heldout_per_speaker",
                "min_duration", "max_duration", "sample_rate", "seed")


# ------------------------------------------------------------ corpus on disk

def write_corpus(cfg: ExperimentConfig, out: Path) -> None:
    corpus = build_corpus(cfg.corpus)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.corpus
    (out / "corpus.cfg").write_text("".join(f"{k} = {getattr(spec, k)!r}\n" for k in _CORPUS_KEYS))
    (out / "single").mkdir(exist_ok=True)
    lines = []
    for uid in sorted(corpus.utterances):
        u = corpus.utterances[uid]
        save_wav(u.wave, out / "single" / f"{uid}.wav")
        lines.append(f"{uid} {u.speaker}\n")
    (out / "utt2spk").write_text("".join(lines))
    snr = cfg.plans[0].snr_range
    for protocol, suffix in (("max", ""), ("min", "_min")):
        ev = make_eval_set(corpus, cfg.eval_mixtures_per_speaker, snr, protocol, seed=cfg.seed)
        mdir = out / f"mix_{protocol}"
        mdir.mkdir(exist_ok=True)
        rows = []
        for m in ev.mixtures:
            save_wav(m.mixture, mdir / f"{m.mix_id}.wav")
            save_wav(m.target, mdir / f"{m.mix_id}-target.wav")
            rows.append(f"{m.mix_id} {m.target_utt} {m.interf_utt} {m.reference_utt} {m.snr_db!r}\n")
        (out / f"mix_{protocol}.list").write_text("".join(rows))
        be.write_trials(ev.trials, out / f"trials{suffix}")


def read_corpus(root: Path) -> ToyCorpus:
    root = Path(root)
    if not (root / "corpus.cfg").exists():
        raise FileNotFoundError(f"{root} is not a corpus directory (no corpus.cfg)")
    kv = dict(line.split(" = ", 1) for line in (root / "corpus.cfg").read_text().splitlines() if line)
    spec = ToyCorpusSpec(**{k: (float if "duration" in k else int)(kv[k]) for k in _CORPUS_KEYS})
    speakers = [make_speaker(spec.seed, i) for i in range(spec.n_train_speakers + spec.n_eval_speakers)]
    corpus = ToyCorpus(spec, speakers)
    for line in (root / "utt2spk").read_text().splitlines():
        uid, spk = line.split()
        corpus.utterances[uid] = Utterance(uid, spk, load_wav(root / "single" / f"{uid}.wav"))
    return corpus


def read_mixtures(root: Path, protocol: str = "max") -> dict[str, Mixture]:
    out = {}
    for line in (Path(root) / f"mix_{protocol}.list").read_text().splitlines():
        mid, tu, iu, ru, snr = line.split()
        d = Path(root) / f"mix_{protocol}"
        out[mid] = Mixture(mid, tu, iu, ru, float(snr), protocol,
                           load_wav(d / f"{mid}.wav"), load_wav(d / f"{mid}-target.wav"))
    return out


# ----------------------------------------------------------- embedding archive

def write_archive(rows: list[tuple[tuple[str, ...], np.ndarray]], path: Path) -> None:
    """One line per vector: tag fields followed by the values as round-trip floats."""
    with open(path, "w", encoding="utf-8") as f:
        for keys, vec in rows:
            f.write(" ".join(keys) + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def read_archive(path: Path):
    enrol, test, train, labels = {}, {}, [], []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        kind = parts[0] if parts else ""
        if kind == "enrol":
            enrol[parts[1]] = np.array([float(v) for v in parts[2:]])
        elif kind == "test":
            test[(parts[1], parts[2])] = np.array([float(v) for v in parts[3:]])
        elif kind == "train":
            labels.append(parts[1])
            train.append(np.array([float(v) for v in parts[3:]]))
        else:
            raise ValueError(f"{path}:{n}: unknown record kind {kind!r}")
    return enrol, test, (np.stack(train) if train else np.zeros((0, 0))), labels


# ------------------------------------------------------------------- commands

def _config(args) -> ExperimentConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "scheme", None):
        overrides["scheme"] = args.scheme.upper()
    if getattr(args, "enroll_mode", None):
        overrides["enroll_mode"] = args.enroll_mode
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return load_config(args.config, overrides)


def _load_system(cfg: ExperimentConfig, path, baseline: bool = False) -> TsvSystem:
    system = TsvSystem.build(cfg, with_attention=not baseline)
    system.load_state(checkpoint.load(path, cfg.digest()))
    return system


def cmd_simulate(args) -> int:
    cfg = _config(args)
    write_corpus(cfg, Path(args.out))
    print(f"wrote corpus to {args.out}")
    return 0


def _parse_stages(text: str) -> list[int]:
    try:
        stages = sorted({int(s) for s in text.split(",") if s.strip()})
    except ValueError as err:
        raise ConfigError(f"--stages expects a list like 1,2,3, got {text!r}") from err
    if not stages or not set(stages) <= {1, 2, 3}:
        raise ConfigError(f"--stages must name stages among 1,2,3, got {text!r}")
    return stages


def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = read_corpus(Path(args.corpus))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump(cfg))
    if args.baseline:
        system, result = train_baseline(cfg, corpus)
        checkpoint.save(out / "baseline.ckpt", system.state(), cfg.digest())
        (out / "baseline_loss.log").write_text("".join(line + "\n" for line in result.log_lines()))
        return 0
    system = TsvSystem.build(cfg)
    if args.init:
        system.load_state(checkpoint.load(args.init, cfg.digest()))

    def save(stage, sys_):
        checkpoint.save(out / f"stage{stage}.ckpt", sys_.state(), cfg.digest())
        log.info("wrote %s", out / f"stage{stage}.ckpt")

    results = train_system(cfg, corpus, system, _parse_stages(args.stages), after_stage=save)
    with open(out / "loss.log", "a", encoding="utf-8") as f:
        for r in results:
            f.writelines(line + "\n" for line in r.log_lines())
    return 0


def cmd_embed(args) -> int:
    cfg = _config(args)
    system = _load_system(cfg, args.checkpoint, args.baseline)
    root = Path(args.corpus)
    corpus = read_corpus(root)
    trials = be.read_trials(args.trials or root / "trials")
    mixtures = read_mixtures(root, args.protocol)
    mode = cfg.enroll_mode
    if mode == "direct" and cfg.scheme == "R":
        raise ConfigError("direct enrollment is undefined for scheme R")

    def wave(uid):
        if uid not in corpus.utterances:
            raise KeyError(f"unknown utterance {uid!r}")
        return corpus.utterances[uid].wave.samples

    def mixture(mid):
        if mid not in mixtures:
            raise KeyError(f"unknown test mixture {mid!r}")
        return mixtures[mid].mixture.samples

    enrol_ids = sorted({t.enrol for t in trials})
    pairs = sorted({(t.enrol, t.test) for t in trials})
    items = backend_training_items(corpus, cfg.backend.mixtures_per_speaker,
                                   with_mixtures=system.attention is not None, seed=cfg.seed)
    rows = [(("enrol", u), v) for u, v in
            zip(enrol_ids, parallel_map(lambda u: enrol_embedding(system, wave(u), mode), enrol_ids))]
    rows += [(("test",) + p, v) for p, v in
             zip(pairs, parallel_map(lambda p: observed_embedding(system, mixture(p[1]), wave(p[0])), pairs))]
    rows += [(("train", spk, str(k)), v) for k, (spk, v) in
             enumerate(zip([it[2] for it in items],
                           parallel_map(lambda it: observed_embedding(system, it[0], it[1]), items)))]
    write_archive(rows, Path(args.out))
    return 0


def cmd_score(args) -> int:
    cfg = _config(args)
    enrol, test, train, labels = read_archive(Path(args.embeddings))
    if not labels:
        raise ValueError("embedding archive has no training records to fit the back-end")
    b = cfg.backend
    models = fit_backend(train, labels, b.lda_dim, b.plda_dim, b.plda_iters, b.snorm_top_k)
    trials = be.read_trials(args.trials)
    be.write_scores(score_trials(models, enrol, test, trials), Path(args.out))
    return 0


def cmd_eval(args) -> int:
    records = be.read_scores(args.scores)
    labels = {(t.enrol, t.test): t.target for t in be.read_trials(args.trials)}
    missing = [(r.enrol, r.test) for r in records if (r.enrol, r.test) not in labels]
    if missing:
        raise KeyError(f"score for a pair absent from the trial list: {missing[0]}")
    scores = [r.raw if args.raw else r.norm for r in records]
    y = [labels[(r.enrol, r.test)] for r in records]
    m = metrics(scores, y)
    report = m.report()
    print(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report + "\n")
        (out / "det.txt").write_text("".join(f"{t!r} {pm!r} {pf!r}\n"
                                             for t, pm, pf in be.det_points(scores, y)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsvkit", description="Target speaker verification toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", default="default",
                        help="config file or bundled profile name (default, toy)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--scheme", choices=["r", "t", "f", "fa"], type=str.lower)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", required=True, help=out_help)

    sp = sub.add_parser("simulate", help="write the toy corpus, mixtures and trial lists")
    common(sp, "corpus directory")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="run training stages and write one checkpoint per stage")
    common(sp, "run directory")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--stages", default="1,2,3")
    sp.add_argument("--init", help="checkpoint to start from, e.g. stage1.ckpt")
    sp.add_argument("--baseline", action="store_true",
                    help="train the zero-effort verifier on clean speech instead")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("embed", help="extract enrollment, test and back-end training embeddings")
    common(sp, "embedding archive")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--trials", help="trial list (default: CORPUS/trials)")
    sp.add_argument("--protocol", choices=["max", "min"], default="max")
    sp.add_argument("--enroll-mode", choices=["attended", "direct"])
    sp.add_argument("--baseline", action="store_true", help="checkpoint has no attention module")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("score", help="LDA, PLDA and adaptive s-norm scores for a trial list")
    common(sp, "score file")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--trials", required=True)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("eval", help="EER, minDCF and DET points for a score file")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--trials", required=True)
    sp.add_argument("--raw", action="store_true", help="use raw PLDA scores instead of normalized")
    sp.add_argument("--out", help="directory for report.txt and det.txt")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, checkpoint.CheckpointError, KeyError, ValueError, FileNotFoundError) as err:
        print(f"tsvkit {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
