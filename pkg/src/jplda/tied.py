"""Tied PLDA: per-component SPLDA models sharing one speaker latent.

Model: ``m_i = mu_d + V_d y_s + z_i`` with ``z_i ~ N(0, D_d^-1)`` and ``d`` the
known mixture component of sample ``i`` (derived from its condition through a
user-supplied many-to-one map).
"""
from __future__ import annotations

import logging
from typing import Mapping

import numpy as np

from ._linalg import LOG_2PI, inv_logdet, sym
from .data import LabeledDataset, PldaParams, ScoreSet, TiedPldaParams, TrialList
from .errors import DataError, NumericalError
from .standard import (LoadingStats, _check_monotone, _chunked, class_stats, init_random,
                       init_smart_splda, mstep_loadings, trial_vectors)

log = logging.getLogger(__name__)


def parse_component_map(text: str) -> dict[str, int]:
    """Parse ``cond=comp,cond=comp``; component names are indexed by first appearance."""
    names: dict[str, int] = {}
    out: dict[str, int] = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        cond, sep, comp = item.partition("=")
        if not sep or not cond or not comp:
            raise DataError(f"bad component map entry {item!r}; expected cond=comp")
        if cond in out:
            raise DataError(f"condition {cond!r} mapped twice")
        out[cond] = names.setdefault(comp, len(names))
    if not out:
        raise DataError("empty component map")
    return out


def sample_components(dataset: LabeledDataset, component_map: Mapping[str, int]) -> np.ndarray:
    dataset.require_conditions("tied PLDA")
    try:
        return np.array([component_map[c] for c in dataset.conditions()], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"condition {exc.args[0]!r} has no mixture component") from None


def _posterior(model: TiedPldaParams, dataset: LabeledDataset, comp: np.ndarray, moments: bool):
    """Speaker posteriors and marginal log-likelihood; optional per-component M-step stats."""
    K, S, ry = model.n_components, dataset.n_speakers, model.ry
    if dataset.dim != model.dim:
        raise DataError(f"dataset dimension {dataset.dim} != model dimension {model.dim}")
    R = dataset.vectors - np.stack([c.mu for c in model.components])[comp]
    counts = np.zeros((S, K), dtype=np.int64)
    np.add.at(counts, (dataset.speaker_labels, comp), 1)
    b = np.zeros((S, ry))
    lams, sums, quad, ld_noise = [], [], 0.0, 0.0
    for d, p in enumerate(model.components):
        rows = comp == d
        _, F = class_stats(R[rows], dataset.speaker_labels[rows], S)
        DV = p.D @ p.V
        b += F @ DV
        lams.append(p.V.T @ DV)
        sums.append(F)
        quad += float(np.sum((R[rows] @ p.D) * R[rows]))
        ld_noise += np.count_nonzero(rows) * inv_logdet(p.D, "D")[1]
    patterns, group = np.unique(counts, axis=0, return_inverse=True)
    group = group.reshape(-1)
    y_mean = np.empty((S, ry))
    y_cov = np.empty((len(patterns), ry, ry))
    ld_post = 0.0
    for g, pattern in enumerate(patterns):
        idx = group == g
        prec = np.eye(ry) + sum(n * lam for n, lam in zip(pattern, lams))
        y_cov[g], ld = inv_logdet(prec, "speaker posterior precision")
        y_mean[idx] = b[idx] @ y_cov[g]
        ld_post += ld * np.count_nonzero(idx)
    n_samples, dim = R.shape
    loglik = -0.5 * (n_samples * dim * LOG_2PI - ld_noise + ld_post + quad - float(np.sum(b * y_mean)))
    if not np.isfinite(loglik):
        raise NumericalError("tied marginal log-likelihood is not finite")
    if not moments:
        return loglik, None
    stats = []
    for d in range(K):
        rows = comp == d
        w = counts[:, d]
        cov_sum = np.einsum("g,gij->ij", np.bincount(group, weights=w, minlength=len(patterns)), y_cov)
        second = cov_sum + (y_mean * w[:, None]).T @ y_mean
        stats.append(LoadingStats(sums[d].T @ y_mean, sym(second), R[rows].T @ R[rows],
                                  int(np.count_nonzero(rows))))
    return loglik, stats


def marginal_loglik(model: TiedPldaParams, dataset: LabeledDataset, components=None) -> float:
    comp = sample_components(dataset, model.condition_to_component) if components is None else np.asarray(components)
    return _posterior(model, dataset, comp, moments=False)[0]


def _component_data(dataset: LabeledDataset, comp: np.ndarray, d: int) -> LabeledDataset:
    rows = comp == d
    if not np.any(rows):
        raise DataError(f"mixture component {d} has no training samples")
    sub = dataset.subset(rows)
    if sub.n_speakers < 2:
        raise DataError(f"mixture component {d} has a single speaker")
    return sub


def init_tied(dataset: LabeledDataset, component_map: Mapping[str, int], ry: int, *, init: str = "smart",
              seed=0, d_diagonal: bool = True) -> TiedPldaParams:
    """Per-component start; ``mu_d`` is always the component's sample mean."""
    comp = sample_components(dataset, component_map)
    K = max(component_map.values()) + 1
    rng = np.random.default_rng(seed)
    comps = []
    for d in range(K):
        sub = _component_data(dataset, comp, d)
        if init == "smart":
            p = init_smart_splda(sub, ry, d_diagonal=d_diagonal)
        elif init == "random":
            p = init_random(sub.dim, ry, 0, rng, mu=sub.vectors.mean(axis=0), variant="splda",
                            d_diagonal=d_diagonal)
        else:
            raise DataError(f"unknown init {init!r}")
        comps.append(p)
    return TiedPldaParams(tuple(comps), dict(component_map))


def em_fit(dataset: LabeledDataset, init: TiedPldaParams, n_iters: int = 10,
           d_diagonal: bool | None = None) -> tuple[TiedPldaParams, list[float]]:
    """EM with the speaker latent tied across components; ``mu_d`` stays fixed."""
    if n_iters < 0:
        raise DataError("n_iters must be >= 0")
    if d_diagonal is None:
        d_diagonal = init.d_diagonal
    comp = sample_components(dataset, init.condition_to_component)
    model = init
    loglik, stats = _posterior(model, dataset, comp, moments=n_iters > 0)
    trace = [loglik]
    for it in range(n_iters):
        new = []
        for p, st in zip(model.components, stats):
            if st.n == 0:
                new.append(p)
                continue
            W, D = mstep_loadings(st, d_diagonal)
            new.append(p.replace(V=W, D=D, d_diagonal=d_diagonal))
        model = TiedPldaParams(tuple(new), model.condition_to_component)
        loglik, stats = _posterior(model, dataset, comp, moments=it + 1 < n_iters)
        trace.append(loglik)
        _check_monotone(trace, "tplda")
    return model, trace


def tplda_fit(dataset: LabeledDataset, component_map: Mapping[str, int], ry: int, n_iters: int = 10,
              seed=0, *, init: str = "smart", d_diagonal: bool = True) -> tuple[TiedPldaParams, list[float]]:
    start = init_tied(dataset, component_map, ry, init=init, seed=seed, d_diagonal=d_diagonal)
    return em_fit(dataset, start, n_iters, d_diagonal)


class TiedScorer:
    """LLR with the speaker latent shared between the enroll and test components.

    In information form: ``llr = h(e,t) - h(e) - h(t)`` where
    ``h = 1/2 b' P^-1 b - 1/2 log|P|`` for the posterior of ``y`` given the
    samples involved.
    """

    def __init__(self, model: TiedPldaParams):
        self.model = model
        self.proj = [p.V.T @ p.D for p in model.components]
        self.lam = [pr @ p.V for pr, p in zip(self.proj, model.components)]
        ry = model.ry
        self.single = [inv_logdet(np.eye(ry) + lam, "posterior precision") for lam in self.lam]
        K = model.n_components
        self.pair = {(a, b): inv_logdet(np.eye(ry) + self.lam[a] + self.lam[b], "posterior precision")
                     for a in range(K) for b in range(K)}

    def _h(self, b: np.ndarray, cov_ld) -> np.ndarray:
        cov, ld = cov_ld
        return 0.5 * np.einsum("ij,ij->i", b @ cov, b) - 0.5 * ld

    def llr(self, e, t, ce, ct, threads: int = 1) -> np.ndarray:
        e, t = np.atleast_2d(e), np.atleast_2d(t)
        ce, ct = np.asarray(ce, dtype=np.int64), np.asarray(ct, dtype=np.int64)
        K = self.model.n_components
        if len(ce) != len(e) or len(ct) != len(t) or np.any((ce < 0) | (ce >= K) | (ct < 0) | (ct >= K)):
            raise DataError("unknown mixture component id")
        out = np.empty(len(e))
        for a in range(K):
            for c in range(K):
                rows = (ce == a) & (ct == c)
                if not np.any(rows):
                    continue
                be = (e[rows] - self.model.components[a].mu) @ self.proj[a].T
                bt = (t[rows] - self.model.components[c].mu) @ self.proj[c].T
                pair, sa, sc = self.pair[a, c], self.single[a], self.single[c]
                out[rows] = _chunked(lambda x, y: self._h(x + y, pair) - self._h(x, sa) - self._h(y, sc),
                                     be, bt, threads)
        return out


def tplda_score(model: TiedPldaParams, enroll: LabeledDataset, test: LabeledDataset, trials: TrialList,
                enroll_component=None, test_component=None, threads: int = 1) -> ScoreSet:
    """Score with known components; by default they come from each side's condition label."""
    ei, ti = trial_vectors(enroll, test, trials, model.dim)
    if enroll_component is None:
        enroll_component = sample_components(enroll, model.condition_to_component)[ei]
    if test_component is None:
        test_component = sample_components(test, model.condition_to_component)[ti]
    llr = TiedScorer(model).llr(enroll.vectors[ei], test.vectors[ti], enroll_component, test_component, threads)
    return ScoreSet(trials.enroll_ids, trials.test_ids, llr)
