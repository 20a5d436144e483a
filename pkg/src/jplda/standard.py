"""SPLDA and FPLDA: initialization, EM training, marginal likelihood and scoring.

Model: ``m_i = mu + V y_s + U x_i + z_i`` with ``y_s ~ N(0, I)`` shared by all
samples of speaker ``s``, ``x_i ~ N(0, I)`` per sample (FPLDA only) and
``z_i ~ N(0, D^-1)``.  SPLDA has no U and a full D; FPLDA has a diagonal D.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from ._linalg import LOG_2PI, cholesky, fix_signs, inv_logdet, inv_pd, sym
from .data import LabeledDataset, PldaParams, ScoreSet, TrialList
from .errors import DataError, NumericalError

log = logging.getLogger(__name__)

DEFAULT_RY = 200
DEFAULT_RX = 16
RANDOM_INIT_STD = 0.01
MONOTONE_RTOL = 1e-8


# ------------------------------------------------------------------ statistics

def class_stats(vectors: np.ndarray, labels: np.ndarray, n_classes: int):
    """Per-class sample counts and vector sums."""
    counts = np.bincount(labels, minlength=n_classes)
    sums = np.zeros((n_classes, vectors.shape[1]))
    np.add.at(sums, labels, vectors)
    return counts, sums


def within_between(vectors: np.ndarray, labels: np.ndarray, n_classes: int):
    """Within-class covariance (per sample) and between-class covariance (per class).

    Classes are weighted equally in the between-class term; the global mean
    used for centering is the sample mean.
    """
    counts, sums = class_stats(vectors, labels, n_classes)
    present = counts > 0
    means = sums[present] / counts[present, None]
    dev = vectors - (sums / np.maximum(counts, 1)[:, None])[labels]
    within = dev.T @ dev / vectors.shape[0]
    centered = means - vectors.mean(axis=0)
    between = centered.T @ centered / means.shape[0]
    return sym(within), sym(between)


def _check_ranks(dim: int, ry: int, rx: int) -> None:
    if not 1 <= ry <= dim:
        raise DataError(f"speaker rank {ry} outside [1, {dim}]")
    if not 0 <= rx <= dim:
        raise DataError(f"condition rank {rx} outside [0, {dim}]")


# ------------------------------------------------------------------ initialization

def init_random(dim: int, ry: int, rx: int, seed, *, mu=None, variant: str | None = None,
                d_diagonal: bool | None = None) -> PldaParams:
    """D = I and N(0, 0.01^2) loadings from a seeded generator."""
    _check_ranks(dim, ry, rx)
    rng = np.random.default_rng(seed)
    V = rng.normal(0.0, RANDOM_INIT_STD, size=(dim, ry))
    U = rng.normal(0.0, RANDOM_INIT_STD, size=(dim, rx))
    if variant is None:
        variant = "splda" if rx == 0 else "fplda"
    if d_diagonal is None:
        d_diagonal = variant == "fplda"
    mu = np.zeros(dim) if mu is None else mu
    return PldaParams(mu, V, U, np.eye(dim), d_diagonal=d_diagonal, variant=variant)


def init_smart_splda(dataset: LabeledDataset, ry: int, *, labels=None, n_classes=None,
                     d_diagonal: bool = False) -> PldaParams:
    """Closed-form start from the class scatter eigenstructure.

    ``V V^T`` is the rank-``ry`` approximation of the between-class covariance
    and the noise covariance is the within-class covariance.  ``labels``
    defaults to the speaker labels; the joint model's initializer passes
    condition labels instead.
    """
    if labels is None:
        labels, n_classes = dataset.speaker_labels, dataset.n_speakers
    counts = np.bincount(labels, minlength=n_classes)
    n_present = int(np.count_nonzero(counts))
    if n_present < 2:
        raise DataError("smart initialization needs at least 2 classes")
    if dataset.n_samples - n_present < 1:
        raise DataError("within-class covariance undefined: every class has a single sample")
    if not 1 <= ry <= min(dataset.dim, n_present - 1):
        raise DataError(f"rank {ry} exceeds the between-class rank limit "
                        f"min(dim, classes - 1) = {min(dataset.dim, n_present - 1)}")
    within, between = within_between(dataset.vectors, labels, n_classes)
    evals, evecs = np.linalg.eigh(between)
    order = np.argsort(evals)[::-1][:ry]
    evals, evecs = evals[order], fix_signs(evecs[:, order])
    if evals[-1] <= 1e-12 * max(evals[0], np.finfo(float).tiny):
        raise DataError(f"between-class covariance has rank below {ry}")
    V = evecs * np.sqrt(evals)
    if d_diagonal:
        diag = np.diag(within)
        if np.any(diag <= 0):
            raise NumericalError("within-class covariance has a non-positive diagonal")
        D = np.diag(1.0 / diag)
    else:
        D = sym(inv_pd(within, "within-class covariance"))
    return PldaParams(dataset.vectors.mean(axis=0), V, np.zeros((dataset.dim, 0)), D,
                      d_diagonal=d_diagonal, variant="splda")


# ------------------------------------------------------------------ posteriors

@dataclass
class SpeakerPosterior:
    """Posterior of the speaker latents (and FPLDA per-sample channel latents).

    ``y_mean`` is S x Ry; the posterior covariance of speaker ``s`` is
    ``y_cov[cov_index[s]]`` (speakers with equal sample counts share it).
    ``stats`` holds the sufficient statistics for the M-step.
    """

    y_mean: np.ndarray
    y_cov: np.ndarray
    cov_index: np.ndarray
    loglik: float
    stats: "LoadingStats | None" = None


@dataclass
class LoadingStats:
    """Accumulators for the closed-form M-step of ``W = [V U]``.

    ``cross`` = sum_i r_i E[w_i]^T, ``second`` = sum_i E[w_i w_i^T],
    ``scatter`` = sum_i r_i r_i^T, ``n`` = number of samples.
    """

    cross: np.ndarray
    second: np.ndarray
    scatter: np.ndarray
    n: int


def _centered(params: PldaParams, dataset: LabeledDataset) -> np.ndarray:
    if dataset.dim != params.dim:
        raise DataError(f"dataset dimension {dataset.dim} != model dimension {params.dim}")
    return dataset.vectors - params.mu


def effective_noise(params: PldaParams) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    """Precision of ``U x + z`` with x marginalized, its log-det, ``A^-1`` and ``A^-1 U^T D``.

    For SPLDA this is just D.
    """
    D = params.D
    ld_D = inv_logdet(D, "D")[1]
    if params.rx == 0:
        return D, ld_D, np.zeros((0, 0)), np.zeros((0, params.dim))
    DU = D @ params.U
    A_inv, ld_A = inv_logdet(np.eye(params.rx) + params.U.T @ DU, "channel posterior precision")
    gain = A_inv @ DU.T
    return sym(D - DU @ gain), ld_D - ld_A, A_inv, gain


def speaker_posterior(params: PldaParams, dataset: LabeledDataset, moments: bool = True) -> SpeakerPosterior:
    """Exact E-step for SPLDA/FPLDA; also yields the marginal log-likelihood."""
    R = _centered(params, dataset)
    n_samples, dim = R.shape
    counts, F = class_stats(R, dataset.speaker_labels, dataset.n_speakers)
    prec, ld_prec, A_inv, gain = effective_noise(params)
    V = params.V
    PV = prec @ V
    lam = V.T @ PV
    b = F @ PV
    sizes, cov_index = np.unique(counts, return_inverse=True)
    y_cov = np.empty((len(sizes), params.ry, params.ry))
    y_mean = np.empty_like(b)
    ld_post = 0.0
    for k, n in enumerate(sizes):
        idx = cov_index == k
        y_cov[k], ld = inv_logdet(np.eye(params.ry) + n * lam, "speaker posterior precision")
        y_mean[idx] = b[idx] @ y_cov[k]
        ld_post += ld * np.count_nonzero(idx)
    quad = float(np.sum((R @ prec) * R))
    loglik = -0.5 * (n_samples * dim * LOG_2PI - n_samples * ld_prec + ld_post + quad
                     - float(np.sum(b * y_mean)))
    if not np.isfinite(loglik):
        raise NumericalError("marginal log-likelihood is not finite")
    post = SpeakerPosterior(y_mean, y_cov, cov_index, loglik)
    if not moments:
        return post
    # sum_s n_s Cov(y_s)
    cov_sum = np.einsum("k,kij->ij", sizes * np.bincount(cov_index, minlength=len(sizes)), y_cov)
    Yw = y_mean * counts[:, None]
    yy = cov_sum + y_mean.T @ Yw
    cross_y = F.T @ y_mean
    if params.rx == 0:
        post.stats = LoadingStats(cross_y, sym(yy), R.T @ R, n_samples)
        return post
    # channel latents: E[x_i] = G (r_i - V E[y_s]), Cov(x_i, y_s) = -G V Cov(y_s)
    GV = gain @ V
    y_samples = y_mean[dataset.speaker_labels]
    X = (R - y_samples @ V.T) @ gain.T
    xx = n_samples * A_inv + GV @ cov_sum @ GV.T + X.T @ X
    xy = -GV @ cov_sum + X.T @ y_samples
    second = np.block([[yy, xy.T], [xy, xx]])
    cross = np.hstack([cross_y, R.T @ X])
    post.stats = LoadingStats(cross, sym(second), R.T @ R, n_samples)
    return post


def mstep_loadings(stats: LoadingStats, d_diagonal: bool):
    """Closed-form maximizer of the expected complete-data log-likelihood.

    Returns the stacked loadings ``[V U]`` and the noise precision.
    """
    chol = cholesky(stats.second, "latent second-moment matrix")
    W = cho_solve((chol, True), stats.cross.T).T
    noise = sym(stats.scatter - W @ stats.cross.T) / stats.n
    if d_diagonal:
        diag = np.diag(noise)
        if np.any(diag <= 0):
            raise NumericalError("noise variance estimate is not positive")
        return W, np.diag(1.0 / diag)
    return W, sym(inv_pd(noise, "noise covariance estimate"))


def marginal_loglik(params: PldaParams, dataset: LabeledDataset) -> float:
    """Exact log density of the dataset; speakers are independent blocks."""
    if params.variant == "jplda":
        raise DataError("use joint.marginal_loglik for jplda models")
    return speaker_posterior(params, dataset, moments=False).loglik


def _check_monotone(trace: list[float], what: str) -> None:
    prev, cur = trace[-2], trace[-1]
    if cur < prev - MONOTONE_RTOL * abs(prev):
        log.warning("%s: log-likelihood decreased from %.12g to %.12g", what, prev, cur)


def em_fit(dataset: LabeledDataset, init: PldaParams, variant: str = "splda", n_iters: int = 10,
           d_diagonal: bool | None = None) -> tuple[PldaParams, list[float]]:
    """EM for SPLDA (rx = 0, full or diagonal D) or FPLDA (rx >= 1, diagonal D).

    ``mu`` is set once to the global training mean and kept fixed.  The
    returned trace holds the log-likelihood of the start point followed by the
    value after each iteration.
    """
    if variant not in ("splda", "fplda"):
        raise DataError(f"em_fit handles splda/fplda, not {variant!r}")
    if d_diagonal is None:
        d_diagonal = init.d_diagonal or variant == "fplda"
    if variant == "splda" and init.rx != 0:
        raise DataError("splda requires condition rank 0")
    if variant == "fplda":
        if init.rx < 1:
            raise DataError("fplda requires condition rank >= 1")
        if not d_diagonal:
            raise DataError("fplda requires a diagonal D")
    if n_iters < 0:
        raise DataError("n_iters must be >= 0")
    if dataset.dim != init.dim:
        raise DataError(f"dataset dimension {dataset.dim} != model dimension {init.dim}")
    mu = dataset.vectors.mean(axis=0)
    params = init.replace(mu=mu, variant=variant)
    post = speaker_posterior(params, dataset, moments=n_iters > 0)
    trace = [post.loglik]
    for it in range(n_iters):
        W, D = mstep_loadings(post.stats, d_diagonal)
        params = params.replace(V=W[:, :params.ry], U=W[:, params.ry:], D=D, d_diagonal=d_diagonal)
        post = speaker_posterior(params, dataset, moments=it + 1 < n_iters)
        trace.append(post.loglik)
        _check_monotone(trace, variant)
        log.debug("%s iter %d loglik %.10g", variant, it + 1, post.loglik)
    return params, trace


# ------------------------------------------------------------------ scoring

class PairGaussian:
    """Log density of a stacked pair (e, t) with equal diagonal blocks ``T`` and cross block ``K``.

    With symmetric K the covariance diagonalizes in the sum/difference basis:
    ``log p = -1/2 [2R log 2pi + log|T+K| + log|T-K|
                    + 1/2 (e+t)'(T+K)^-1(e+t) + 1/2 (e-t)'(T-K)^-1(e-t)]``.
    """

    def __init__(self, T: np.ndarray, K: np.ndarray, what: str = "pair covariance"):
        self.plus, ld_plus = inv_logdet(T + K, what)
        self.minus, ld_minus = inv_logdet(T - K, what)
        self.const = -0.5 * (2 * T.shape[0] * LOG_2PI + ld_plus + ld_minus)

    def logpdf(self, e: np.ndarray, t: np.ndarray) -> np.ndarray:
        s, d = e + t, e - t
        q = np.einsum("ij,ij->i", s @ self.plus, s) + np.einsum("ij,ij->i", d @ self.minus, d)
        return self.const - 0.25 * q


CHUNK = 4096


def _chunked(fn, e: np.ndarray, t: np.ndarray, threads: int = 1) -> np.ndarray:
    """Apply ``fn`` over fixed-size trial chunks; chunking is independent of ``threads``."""
    starts = range(0, len(e), CHUNK)
    if threads <= 1 or len(e) <= CHUNK:
        parts = [fn(e[i:i + CHUNK], t[i:i + CHUNK]) for i in starts]
    else:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda i: fn(e[i:i + CHUNK], t[i:i + CHUNK]), starts))
    return np.concatenate(parts) if parts else np.zeros(0)


class StandardScorer:
    """Precomputed same/different-speaker pair densities for SPLDA/FPLDA."""

    def __init__(self, params: PldaParams):
        if params.variant == "jplda":
            raise DataError("use joint.JointScorer for jplda models")
        self.params = params
        between = params.V @ params.V.T
        within = params.noise_cov() + params.U @ params.U.T
        total = between + within
        self.same = PairGaussian(total, between, "same-speaker pair covariance")
        self.diff = PairGaussian(total, np.zeros_like(total), "single-sample covariance")

    def llr(self, e: np.ndarray, t: np.ndarray, threads: int = 1) -> np.ndarray:
        mu = self.params.mu
        e = np.atleast_2d(e) - mu
        t = np.atleast_2d(t) - mu
        return _chunked(lambda a, b: self.same.logpdf(a, b) - self.diff.logpdf(a, b), e, t, threads)


def trial_vectors(enroll: LabeledDataset, test: LabeledDataset, trials: TrialList, dim: int):
    if enroll.dim != dim or test.dim != dim:
        raise DataError(f"vector dimension does not match model dimension {dim}")
    ei = enroll.rows(trials.enroll_ids, "enroll")
    ti = test.rows(trials.test_ids, "test")
    return ei, ti


def score_trials(params: PldaParams, enroll: LabeledDataset, test: LabeledDataset,
                 trials: TrialList, threads: int = 1) -> ScoreSet:
    """Single-sample verification log-likelihood ratios."""
    ei, ti = trial_vectors(enroll, test, trials, params.dim)
    llr = StandardScorer(params).llr(enroll.vectors[ei], test.vectors[ti], threads)
    return ScoreSet(trials.enroll_ids, trials.test_ids, llr)
