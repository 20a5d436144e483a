"""Joint PLDA: the channel latent is tied across all samples sharing a condition.

Model: ``m_i = mu + V y_{s_i} + U x_{c_i} + z_i``.  Speakers are no longer
independent given the data, so the E-step works on the coupled posterior of
all ``y_s`` and ``x_c`` at once.  Its precision has the block structure

    y_s block:       I + n_s V'DV           (block diagonal over speakers)
    x_c block:       I + n_c U'DU           (block diagonal over conditions)
    (y_s, x_c):      n_sc V'DU

and is solved by eliminating the speaker blocks (cheap, grouped by sample
count) and factorizing the dense C*Rx Schur complement over conditions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ._linalg import LOG_2PI, inv_logdet, sym
from .data import LabeledDataset, PldaParams, ScoreSet, TrialList
from .errors import DataError, NumericalError
from .standard import (LoadingStats, PairGaussian, _check_monotone, _chunked, class_stats,
                       init_smart_splda, mstep_loadings, trial_vectors)

log = logging.getLogger(__name__)

MAX_UNKNOWNS = 2_000_000
DEFAULT_PRIOR = 0.5


@dataclass
class JointPosterior:
    """Posterior over the stacked latents (y_1..y_S, x_1..x_C).

    ``x_cov`` is the full C*Rx posterior covariance of the condition latents;
    speaker covariances are not materialized, only their M-step sums.
    """

    y_mean: np.ndarray
    x_mean: np.ndarray
    x_cov: np.ndarray
    loglik: float
    stats: LoadingStats | None = None


def _counts(dataset: LabeledDataset) -> np.ndarray:
    nsc = np.zeros((dataset.n_speakers, dataset.n_conditions), dtype=np.int64)
    np.add.at(nsc, (dataset.speaker_labels, dataset.condition_labels), 1)
    return nsc


def joint_posterior(params: PldaParams, dataset: LabeledDataset, moments: bool = True,
                    max_unknowns: int = MAX_UNKNOWNS) -> JointPosterior:
    """Exact E-step of the joint model plus the exact marginal log-likelihood."""
    dataset.require_conditions("joint PLDA")
    if dataset.dim != params.dim:
        raise DataError(f"dataset dimension {dataset.dim} != model dimension {params.dim}")
    S, C, ry, rx = dataset.n_speakers, dataset.n_conditions, params.ry, params.rx
    if S * ry + C * rx > max_unknowns:
        raise DataError(f"latent system has {S * ry + C * rx} unknowns, above the cap {max_unknowns}")
    R = dataset.vectors - params.mu
    n_samples, dim = R.shape
    D, V, U = params.D, params.V, params.U
    ld_D = inv_logdet(D, "D")[1]
    DV, DU = D @ V, D @ U
    lam, gam, xi = V.T @ DV, U.T @ DU, V.T @ DU
    _, F = class_stats(R, dataset.speaker_labels, S)
    _, G = class_stats(R, dataset.condition_labels, C)
    by, bx = F @ DV, G @ DU
    nsc = _counts(dataset)
    ns, nc = nsc.sum(axis=1), nsc.sum(axis=0)

    # eliminate speaker blocks
    sizes, group = np.unique(ns, return_inverse=True)
    p_inv = np.empty((len(sizes), ry, ry))
    u = np.empty((S, ry))
    schur = np.zeros((C * rx, C * rx))
    ld_y = 0.0
    for k, n in enumerate(sizes):
        idx = group == k
        p_inv[k], ld = inv_logdet(np.eye(ry) + n * lam, "speaker posterior precision")
        ld_y += ld * np.count_nonzero(idx)
        u[idx] = by[idx] @ p_inv[k]
        if rx:
            nk = nsc[idx]
            schur -= np.kron(nk.T @ nk, xi.T @ p_inv[k] @ xi)
    for c in range(C):
        sl = slice(c * rx, (c + 1) * rx)
        schur[sl, sl] += np.eye(rx) + nc[c] * gam
    x_cov, ld_x = inv_logdet(schur, "condition Schur complement")
    rhs = bx - (nsc.T @ u) @ xi
    x_mean = (x_cov @ rhs.reshape(-1)).reshape(C, rx)
    # back-substitute: y_s = P_s^-1 (b_s - sum_c n_sc xi x_c)
    shift = (nsc @ x_mean) @ xi.T
    y_mean = u.copy()
    for k in range(len(sizes)):
        idx = group == k
        y_mean[idx] -= shift[idx] @ p_inv[k]
    quad = float(np.sum((R @ D) * R))
    loglik = -0.5 * (n_samples * dim * LOG_2PI - n_samples * ld_D + ld_y + ld_x + quad
                     - float(np.sum(by * y_mean)) - float(np.sum(bx * x_mean)))
    if not np.isfinite(loglik):
        raise NumericalError("joint marginal log-likelihood is not finite")
    post = JointPosterior(y_mean, x_mean, x_cov, loglik)
    if not moments:
        return post

    cx = x_cov.reshape(C, rx, C, rx)
    # Z_s = sum_{c,c'} n_sc n_sc' Cov(x_c, x_c')
    Z = np.einsum("sc,sd,cidj->sij", nsc, nsc, cx, optimize=True)
    yy = (y_mean * ns[:, None]).T @ y_mean
    yx = y_mean.T @ nsc @ x_mean
    for k, n in enumerate(sizes):
        idx = group == k
        cnt = np.count_nonzero(idx)
        Zk = Z[idx].sum(axis=0)
        pxi = p_inv[k] @ xi
        yy += n * cnt * p_inv[k] + n * pxi @ Zk @ pxi.T
        yx -= pxi @ Zk
    diag_cov = cx[np.arange(C), :, np.arange(C), :]
    xx = np.einsum("c,cij->ij", nc, diag_cov) + (x_mean * nc[:, None]).T @ x_mean
    second = np.block([[yy, yx], [yx.T, xx]])
    cross = np.hstack([F.T @ y_mean, G.T @ x_mean])
    post.stats = LoadingStats(cross, sym(second), R.T @ R, n_samples)
    return post


def marginal_loglik(params: PldaParams, dataset: LabeledDataset) -> float:
    """Exact log density of all samples under the joint model."""
    return joint_posterior(params, dataset, moments=False).loglik


def init_smart(dataset: LabeledDataset, ry: int, rx: int, d_diagonal: bool = False) -> PldaParams:
    """Two-stage closed-form start: condition subspace first, then speakers on the residual."""
    dataset.require_conditions("joint PLDA initialization")
    C, S = dataset.n_conditions, dataset.n_speakers
    if C < 2 or S < 2:
        raise DataError("joint initialization needs at least 2 conditions and 2 speakers")
    if not 0 <= rx <= C - 1:
        raise DataError(f"condition rank {rx} exceeds number of conditions - 1 = {C - 1}")
    if not 1 <= ry <= S - 1:
        raise DataError(f"speaker rank {ry} exceeds number of speakers - 1 = {S - 1}")
    mu = dataset.vectors.mean(axis=0)
    if rx == 0:
        spk = init_smart_splda(dataset, ry, d_diagonal=d_diagonal)
        return spk.replace(mu=mu, variant="jplda")
    cond = init_smart_splda(dataset, rx, labels=dataset.condition_labels, n_classes=C)
    # posterior mean of each condition latent under the condition model
    R = dataset.vectors - cond.mu
    counts, G = class_stats(R, dataset.condition_labels, C)
    DVc = cond.D @ cond.V
    lam = cond.V.T @ DVc
    X = np.empty((C, rx))
    for c in range(C):
        X[c] = np.linalg.solve(np.eye(rx) + counts[c] * lam, DVc.T @ G[c])
    residual = dataset.vectors - X[dataset.condition_labels] @ cond.V.T
    spk = init_smart_splda(dataset.with_vectors(residual), ry, d_diagonal=d_diagonal)
    return PldaParams(mu, spk.V, cond.V, spk.D, d_diagonal=d_diagonal, variant="jplda")


def em_fit(dataset: LabeledDataset, init: PldaParams, n_iters: int = 1, d_diagonal: bool | None = None,
           max_unknowns: int = MAX_UNKNOWNS) -> tuple[PldaParams, list[float]]:
    """EM on the exact joint posterior; ``mu`` stays at the global mean."""
    dataset.require_conditions("joint PLDA training")
    if n_iters < 0:
        raise DataError("n_iters must be >= 0")
    if dataset.dim != init.dim:
        raise DataError(f"dataset dimension {dataset.dim} != model dimension {init.dim}")
    if d_diagonal is None:
        d_diagonal = init.d_diagonal
    params = init.replace(mu=dataset.vectors.mean(axis=0), variant="jplda")
    post = joint_posterior(params, dataset, moments=n_iters > 0, max_unknowns=max_unknowns)
    trace = [post.loglik]
    for it in range(n_iters):
        W, D = mstep_loadings(post.stats, d_diagonal)
        params = params.replace(V=W[:, :params.ry], U=W[:, params.ry:], D=D, d_diagonal=d_diagonal)
        post = joint_posterior(params, dataset, moments=it + 1 < n_iters, max_unknowns=max_unknowns)
        trace.append(post.loglik)
        _check_monotone(trace, "jplda")
        log.debug("jplda iter %d loglik %.10g", it + 1, post.loglik)
    return params, trace


# ------------------------------------------------------------------ scoring

@dataclass(frozen=True)
class ConditionPriors:
    """P(same condition | same speaker) and P(same condition | different speakers)."""

    p_sc_given_ss: float = DEFAULT_PRIOR
    p_sc_given_ds: float = DEFAULT_PRIOR

    def __post_init__(self):
        for p in (self.p_sc_given_ss, self.p_sc_given_ds):
            if not 0.0 <= p <= 1.0:
                raise DataError(f"condition prior {p} outside [0, 1]")


HYPOTHESES = (("same", "same"), ("same", "diff"), ("diff", "same"), ("diff", "diff"))


def _mix(l_same: np.ndarray, l_diff: np.ndarray, p) -> np.ndarray:
    """log(p e^l_same + (1-p) e^l_diff); exact at p in {0, 1}."""
    p = np.broadcast_to(np.asarray(p, dtype=float), l_same.shape)
    out = np.empty_like(l_same)
    only_same, only_diff = p == 1.0, p == 0.0
    both = ~(only_same | only_diff)
    out[only_same] = l_same[only_same]
    out[only_diff] = l_diff[only_diff]
    pb = p[both]
    out[both] = np.logaddexp(l_same[both] + np.log(pb), l_diff[both] + np.log1p(-pb))
    return out


class JointScorer:
    """The four (speaker, condition) hypothesis densities of a single-sample trial."""

    def __init__(self, params: PldaParams):
        self.params = params
        B = params.V @ params.V.T
        X = params.U @ params.U.T
        T = B + X + params.noise_cov()
        cross = {("same", "same"): B + X, ("same", "diff"): B,
                 ("diff", "same"): X, ("diff", "diff"): np.zeros_like(B)}
        self.pairs = {h: PairGaussian(T, K, f"{h} pair covariance") for h, K in cross.items()}

    def component_logliks(self, e: np.ndarray, t: np.ndarray) -> dict:
        e = np.atleast_2d(e) - self.params.mu
        t = np.atleast_2d(t) - self.params.mu
        return {h: g.logpdf(e, t) for h, g in self.pairs.items()}

    def llr(self, e, t, priors: ConditionPriors = ConditionPriors(), same_condition=None,
            threads: int = 1) -> np.ndarray:
        """Condition-marginalized LLR; ``same_condition`` (bool per trial) selects known-condition mode."""
        e = np.atleast_2d(e)
        t = np.atleast_2d(t)
        if same_condition is None:
            p_ss = np.full(len(e), priors.p_sc_given_ss)
            p_ds = np.full(len(e), priors.p_sc_given_ds)
        else:
            p_ss = p_ds = np.asarray(same_condition, dtype=float)
        stacked = np.hstack([e, t, p_ss[:, None], p_ds[:, None]])
        dim = e.shape[1]

        def run(chunk, _):
            l = self.component_logliks(chunk[:, :dim], chunk[:, dim:2 * dim])
            num = _mix(l["same", "same"], l["same", "diff"], chunk[:, 2 * dim])
            den = _mix(l["diff", "same"], l["diff", "diff"], chunk[:, 2 * dim + 1])
            return num - den

        return _chunked(run, stacked, stacked, threads)


def score_trials(params: PldaParams, enroll: LabeledDataset, test: LabeledDataset, trials: TrialList,
                 priors: ConditionPriors = ConditionPriors(), known_condition_mode: bool = False,
                 threads: int = 1) -> ScoreSet:
    ei, ti = trial_vectors(enroll, test, trials, params.dim)
    same = trials.is_same_condition() if known_condition_mode else None
    llr = JointScorer(params).llr(enroll.vectors[ei], test.vectors[ti], priors, same, threads)
    return ScoreSet(trials.enroll_ids, trials.test_ids, llr)
