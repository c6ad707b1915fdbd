"""Verification back-end: LDA, length normalization, two-covariance PLDA,
adaptive s-norm and detection metrics (EER, minimum DCF, DET points)."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

DCF08 = dict(p_target=0.01, c_miss=10.0, c_fa=1.0)
DCF10 = dict(p_target=0.001, c_miss=1.0, c_fa=1.0)
SNORM_TOP_K = 200


# ------------------------------------------------------------------- LDA

@dataclass
class LdaModel:
    mean: np.ndarray
    projection: np.ndarray  # out_dim × d_in

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.projection.T


def _check_labels(x: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.asarray(labels)
    if labels.shape[0] != x.shape[0]:
        raise ValueError("one label per embedding required")
    classes, inverse = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise ValueError("need at least two speakers")
    return classes, inverse


def fit_lda(embeddings, labels, out_dim: int) -> LdaModel:
    x = np.asarray(embeddings, dtype=np.float64)
    classes, inverse = _check_labels(x, labels)
    counts = np.bincount(inverse)
    if counts.min() < 2:
        raise ValueError("every speaker needs at least two embeddings")
    d = x.shape[1]
    if out_dim > min(classes.size - 1, d) or out_dim < 1:
        raise ValueError(f"out_dim {out_dim} exceeds min(classes-1, dim) = {min(classes.size - 1, d)}")
    mu = x.mean(axis=0)
    xc = x - mu
    means = np.stack([xc[inverse == k].mean(axis=0) for k in range(classes.size)])
    within = xc - means[inverse]
    s_w = within.T @ within / x.shape[0]
    s_b = (means * counts[:, None]).T @ means / x.shape[0]
    reg = 1e-6 * max(np.trace(s_w) / d, np.finfo(float).tiny)
    try:
        vals, vecs = scipy.linalg.eigh(s_b, s_w + reg * np.eye(d))
    except np.linalg.LinAlgError as err:
        raise ValueError("within-class scatter is singular beyond regularization") from err
    order = np.argsort(vals)[::-1][:out_dim]
    return LdaModel(mu, vecs[:, order].T.copy())


def length_normalize(e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot length-normalize a zero vector")
    return e / norm


# ------------------------------------------------------------------- PLDA

@dataclass
class PldaModel:
    """e = mean + V h + eps with h ~ N(0, I) and eps ~ N(0, Sigma)."""

    mean: np.ndarray
    V: np.ndarray
    Sigma: np.ndarray
    log_likelihoods: list[float] = field(default_factory=list)

    @property
    def between(self) -> np.ndarray:
        return self.V @ self.V.T

    def _scoring_terms(self):
        b = self.between
        t = b + self.Sigma
        t_inv_b = np.linalg.solve(t, b)
        s = t - b @ t_inv_b
        s = 0.5 * (s + s.T)
        t_inv = np.linalg.inv(t)
        s_inv = np.linalg.inv(s)
        q = t_inv - s_inv
        p = t_inv_b @ s_inv
        p = 0.5 * (p + p.T)
        const = 0.5 * (np.linalg.slogdet(t)[1] - np.linalg.slogdet(s)[1])
        return 0.5 * (q + q.T), p, const

    def score(self, e_ref: np.ndarray, e_test: np.ndarray) -> np.ndarray:
        return score_plda(self, e_ref, e_test)


def _gauss_loglik(xc: np.ndarray, sigma: np.ndarray) -> float:
    sign, logdet = np.linalg.slogdet(sigma)
    if sign <= 0:
        raise ValueError("covariance is not positive definite")
    sol = np.linalg.solve(sigma, xc.T)
    d = xc.shape[1]
    return float(-0.5 * (np.sum(xc.T * sol) + xc.shape[0] * (logdet + d * np.log(2 * np.pi))))


def _plda_stats(xc, inverse, n_spk):
    counts = np.bincount(inverse, minlength=n_spk)
    sums = np.zeros((n_spk, xc.shape[1]))
    np.add.at(sums, inverse, xc)
    return counts, sums


def plda_log_likelihood(xc: np.ndarray, inverse: np.ndarray, V: np.ndarray, Sigma: np.ndarray) -> float:
    """Exact marginal log-likelihood of centered data grouped by speaker."""
    n_spk = int(inverse.max()) + 1
    counts, sums = _plda_stats(xc, inverse, n_spk)
    total = _gauss_loglik(xc, Sigma)
    q = V.shape[1]
    if q == 0:
        return total
    vt_si = np.linalg.solve(Sigma, V).T
    vt_si_v = vt_si @ V
    for i in range(n_spk):
        prec = np.eye(q) + counts[i] * vt_si_v
        b = vt_si @ sums[i]
        total += 0.5 * (b @ np.linalg.solve(prec, b)) - 0.5 * np.linalg.slogdet(prec)[1]
    return float(total)


def fit_plda(embeddings, labels, q: int = 100, iters: int = 10,
             min_var: float = 1e-10) -> PldaModel:
    x = np.asarray(embeddings, dtype=np.float64)
    classes, inverse = _check_labels(x, labels)
    n, d = x.shape
    if q > d or q < 0:
        raise ValueError(f"latent dimension {q} must lie in [0, {d}]")
    n_spk = classes.size
    mu = x.mean(axis=0)
    xc = x - mu
    counts, sums = _plda_stats(xc, inverse, n_spk)
    means = sums / counts[:, None]
    within = xc - means[inverse]
    sigma = within.T @ within / n + min_var * np.eye(d)
    if q == 0:
        sigma = xc.T @ xc / n + min_var * np.eye(d)
        return PldaModel(mu, np.zeros((d, 0)), sigma, [plda_log_likelihood(xc, inverse, np.zeros((d, 0)), sigma)])

    vals, vecs = np.linalg.eigh(means.T @ means / n_spk)
    top = np.argsort(vals)[::-1][:q]
    V = vecs[:, top] * np.sqrt(np.maximum(vals[top], min_var))
    scatter = xc.T @ xc
    history = [plda_log_likelihood(xc, inverse, V, sigma)]
    for _ in range(iters):
        vt_si = np.linalg.solve(sigma, V).T
        vt_si_v = vt_si @ V
        acc_hh = np.zeros((q, q))
        acc_fh = np.zeros((d, q))
        for i in range(n_spk):
            cov = np.linalg.inv(np.eye(q) + counts[i] * vt_si_v)
            h = cov @ (vt_si @ sums[i])
            acc_hh += counts[i] * (cov + np.outer(h, h))
            acc_fh += np.outer(sums[i], h)
        V = np.linalg.solve(acc_hh.T, acc_fh.T).T
        sigma = (scatter - V @ acc_fh.T) / n
        sigma = 0.5 * (sigma + sigma.T) + min_var * np.eye(d)
        try:
            np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError as err:
            raise ValueError("PLDA within-class covariance became degenerate") from err
        history.append(plda_log_likelihood(xc, inverse, V, sigma))
    return PldaModel(mu, V, sigma, history)


def score_plda(model: PldaModel, e_ref, e_test) -> np.ndarray:
    """Same-vs-different speaker log-likelihood ratio; accepts single vectors or row batches."""
    a = np.atleast_2d(np.asarray(e_ref, dtype=np.float64)) - model.mean
    b = np.atleast_2d(np.asarray(e_test, dtype=np.float64)) - model.mean
    if a.shape[1] != model.mean.size or b.shape[1] != model.mean.size:
        raise ValueError(f"embedding dimension must be {model.mean.size}")
    q, p, const = model._scoring_terms()
    s = 0.5 * np.sum(a @ q * a, axis=1) + 0.5 * np.sum(b @ q * b, axis=1) + np.sum(a @ p * b, axis=1) + const
    return s if np.ndim(e_ref) > 1 or np.ndim(e_test) > 1 else s[0]


def score_matrix(model: PldaModel, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """All-pairs LLR between rows of ``left`` and rows of ``right``."""
    a = np.atleast_2d(left) - model.mean
    b = np.atleast_2d(right) - model.mean
    q, p, const = model._scoring_terms()
    return (0.5 * np.sum(a @ q * a, axis=1)[:, None] + 0.5 * np.sum(b @ q * b, axis=1)[None, :]
            + a @ p @ b.T + const)


# ----------------------------------------------------------------- s-norm

def adaptive_snorm(raw: float, enrol_cohort, test_cohort, top_k: int = SNORM_TOP_K) -> float:
    """Symmetric normalization with statistics of the ``top_k`` highest cohort scores per side."""
    def stats(cohort):
        c = np.sort(np.asarray(cohort, dtype=np.float64).reshape(-1))[::-1]
        if c.size == 0:
            raise ValueError("empty cohort")
        top = c[:min(top_k, c.size)]
        return top.mean(), max(top.std(), 1e-6)

    mu_e, sd_e = stats(enrol_cohort)
    mu_t, sd_t = stats(test_cohort)
    return float(0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t))


# ----------------------------------------------------------------- metrics

def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    tgt, non = np.sort(scores[labels]), np.sort(scores[~labels])
    if tgt.size == 0 or non.size == 0:
        raise ValueError("need at least one target and one nontarget score")
    return tgt, non


def _sweep(tgt: np.ndarray, non: np.ndarray):
    """Miss/false-alarm counts at every distinct threshold plus both endpoints.

    A trial is accepted iff its score >= threshold.
    """
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([tgt, non])), [np.inf]])
    misses = np.searchsorted(tgt, thresholds, side="left")
    fas = non.size - np.searchsorted(non, thresholds, side="left")
    return thresholds, misses, fas


def compute_eer(scores, labels) -> float:
    """Equal error rate by linear interpolation between consecutive sweep points."""
    tgt, non = _split(scores, labels)
    _, misses, fas = _sweep(tgt, non)
    nt, nn = tgt.size, non.size
    diff = misses.astype(object) * nn - fas.astype(object) * nt  # sign of P_miss - P_fa
    j = next(i for i, dv in enumerate(diff) if dv >= 0)
    if diff[j] == 0:
        return float(Fraction(int(misses[j]), nt))
    lam = Fraction(-int(diff[j - 1]), int(diff[j] - diff[j - 1]))
    return float(Fraction(int(misses[j - 1]), nt) + lam * Fraction(int(misses[j] - misses[j - 1]), nt))


def compute_min_dcf(scores, labels, p_target: float, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    tgt, non = _split(scores, labels)
    _, misses, fas = _sweep(tgt, non)
    p_miss = misses / tgt.size
    p_fa = fas / non.size
    cost = c_miss * p_miss * p_target + c_fa * p_fa * (1 - p_target)
    return float(np.min(cost) / min(c_miss * p_target, c_fa * (1 - p_target)))


def det_points(scores, labels) -> list[tuple[float, float, float]]:
    """(threshold, P_miss, P_fa) at each distinct score plus the two endpoints."""
    tgt, non = _split(scores, labels)
    thresholds, misses, fas = _sweep(tgt, non)
    return [(float(t), float(m / tgt.size), float(f / non.size)) for t, m, f in zip(thresholds, misses, fas)]


# ------------------------------------------------------------------ file I/O

@dataclass
class Trial:
    enrol: str
    test: str
    target: bool


def read_trials(path) -> list[Trial]:
    trials = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
            raise ValueError(f"{path}:{n}: expected 'ENROL TEST target|nontarget'")
        trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
    return trials


def write_trials(trials: Sequence[Trial], path) -> None:
    lines = [f"{t.enrol} {t.test} {'target' if t.target else 'nontarget'}\n" for t in trials]
    Path(path).write_text("".join(lines), encoding="utf-8")


@dataclass
class ScoreRecord:
    enrol: str
    test: str
    raw: float
    norm: float


def write_scores(records: Sequence[ScoreRecord], path) -> None:
    lines = [f"{r.enrol} {r.test} {float(r.raw)!r} {float(r.norm)!r}\n" for r in records]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_scores(path) -> list[ScoreRecord]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{n}: expected 'ENROL TEST raw norm'")
        out.append(ScoreRecord(parts[0], parts[1], float(parts[2]), float(parts[3])))
    return out
