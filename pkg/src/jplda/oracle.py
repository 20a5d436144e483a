"""Brute-force reference densities.

Builds the explicit joint covariance over a handful of samples under any
model variant and evaluates the multivariate normal density directly.  This
is deliberately slow and shares no shortcuts with the fast paths it checks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset, PldaParams, TiedPldaParams
from .errors import DataError, NumericalError

MAX_DIM = 5000


@dataclass(frozen=True)
class StackedGaussian:
    mean: np.ndarray
    cov: np.ndarray


def _noise_cov(p: PldaParams) -> np.ndarray:
    return np.linalg.inv(p.D)


def build_joint(model, samples, speaker_labels, condition_labels=None, components=None) -> StackedGaussian:
    """Mean and covariance of ``n`` stacked samples under the model's tying pattern.

    Block (i, j) is ``[s_i = s_j] V V'`` plus ``[c_i = c_j] U U'`` for the joint
    model, or ``[i = j] U U'`` for the standard models, plus ``[i = j] D^-1``.
    Tied models index V, U, D and mu by each sample's component.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n, dim = samples.shape
    if n * dim > MAX_DIM:
        raise DataError(f"oracle limited to n*dim <= {MAX_DIM}, got {n * dim}")
    spk = np.asarray(speaker_labels)
    if isinstance(model, TiedPldaParams):
        comps = np.zeros(n, dtype=int) if components is None else np.asarray(components)
        parts = [model.components[d] for d in comps]
        tie_u_by_condition = False
    else:
        parts = [model] * n
        tie_u_by_condition = model.variant == "jplda"
        if tie_u_by_condition and condition_labels is None:
            raise DataError("joint model oracle needs condition labels")
    cond = None if condition_labels is None else np.asarray(condition_labels)
    if parts[0].dim != dim:
        raise DataError("sample dimension does not match model")
    cov = np.zeros((n * dim, n * dim))
    for i in range(n):
        for j in range(n):
            block = np.zeros((dim, dim))
            if spk[i] == spk[j]:
                block += parts[i].V @ parts[j].V.T
            if tie_u_by_condition:
                if cond[i] == cond[j]:
                    block += parts[i].U @ parts[j].U.T
            elif i == j:
                block += parts[i].U @ parts[i].U.T
            if i == j:
                block += _noise_cov(parts[i])
            cov[i * dim:(i + 1) * dim, j * dim:(j + 1) * dim] = block
    mean = np.concatenate([p.mu for p in parts])
    return StackedGaussian(mean, 0.5 * (cov + cov.T))


def logpdf(g: StackedGaussian, x) -> float:
    """Multivariate normal log-density through a Cholesky factor."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != g.mean.shape:
        raise DataError("point dimension does not match the Gaussian")
    try:
        L = np.linalg.cholesky(g.cov)
    except np.linalg.LinAlgError:
        raise NumericalError("oracle covariance is not positive definite") from None
    w = np.linalg.solve(L, x - g.mean)
    return float(-0.5 * (x.size * np.log(2 * np.pi) + 2 * np.sum(np.log(np.diag(L))) + w @ w))


def oracle_lr(model, e, t, same_speaker: bool, same_condition: bool = False, components=None) -> float:
    """``log p(e, t | hypothesis)`` for a single-sample trial.

    The condition hypothesis only matters for the joint model; ``components``
    gives the (enroll, test) mixture components of a tied model.
    """
    samples = np.vstack([np.ravel(e), np.ravel(t)])
    g = build_joint(model, samples, [0, 0 if same_speaker else 1],
                    [0, 0 if same_condition else 1], components)
    return logpdf(g, samples)


def oracle_llr(model, e, t, priors=None, components=None) -> float:
    """Verification LLR assembled from oracle hypothesis densities."""
    if isinstance(model, TiedPldaParams) or model.variant != "jplda":
        return (oracle_lr(model, e, t, True, components=components)
                - oracle_lr(model, e, t, False, components=components))
    p_ss = 0.5 if priors is None else priors.p_sc_given_ss
    p_ds = 0.5 if priors is None else priors.p_sc_given_ds
    lik = {(s, c): np.exp(np.longdouble(oracle_lr(model, e, t, s, c)))
           for s in (True, False) for c in (True, False)}
    num = p_ss * lik[True, True] + (1 - p_ss) * lik[True, False]
    den = p_ds * lik[False, True] + (1 - p_ds) * lik[False, False]
    return float(np.log(num) - np.log(den))


def dataset_loglik(model, dataset: LabeledDataset) -> float:
    """Log density of an entire (small) dataset from one dense Gaussian."""
    comps = None
    if isinstance(model, TiedPldaParams):
        comps = model.component_of(dataset.conditions())
    g = build_joint(model, dataset.vectors, dataset.speaker_labels, dataset.condition_labels, comps)
    return logpdf(g, dataset.vectors)
