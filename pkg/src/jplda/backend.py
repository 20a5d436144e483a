"""One entry point per operation across the four back-end variants."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import joint, oracle, standard, tied
from .data import VARIANTS, LabeledDataset, PldaParams, ScoreSet, TiedPldaParams, TrialList
from .errors import DataError
from .joint import ConditionPriors


@dataclass(frozen=True)
class TrainDefaults:
    init: str
    n_iters: int
    d_diagonal: bool


DEFAULTS = {
    "splda": TrainDefaults("smart", 10, False),
    "fplda": TrainDefaults("random", 50, True),
    "jplda": TrainDefaults("smart", 1, False),
    "tplda": TrainDefaults("smart", 10, True),
}


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise DataError(f"unknown model variant {variant!r}; expected one of {VARIANTS}")


def initialize(variant: str, dataset: LabeledDataset, ry: int, rx: int = 0, *, init: str | None = None,
               seed=0, d_diagonal: bool | None = None, component_map: Mapping[str, int] | None = None):
    """Starting point for EM (see ``DEFAULTS`` for per-variant choices)."""
    _check_variant(variant)
    d = DEFAULTS[variant]
    init = d.init if init is None else init
    d_diagonal = d.d_diagonal if d_diagonal is None else d_diagonal
    if init not in ("smart", "random"):
        raise DataError(f"unknown init {init!r}")
    mu = dataset.vectors.mean(axis=0)
    if variant == "tplda":
        if component_map is None:
            raise DataError("tplda needs a condition-to-component map")
        return tied.init_tied(dataset, component_map, ry, init=init, seed=seed, d_diagonal=d_diagonal)
    if variant == "splda":
        if init == "smart":
            return standard.init_smart_splda(dataset, ry, d_diagonal=d_diagonal)
        return standard.init_random(dataset.dim, ry, 0, seed, mu=mu, variant="splda", d_diagonal=d_diagonal)
    if variant == "fplda":
        if not d_diagonal:
            raise DataError("fplda requires a diagonal D")
        if rx < 1:
            raise DataError("fplda requires condition rank >= 1")
        start = standard.init_random(dataset.dim, ry, rx, seed, mu=mu, variant="fplda", d_diagonal=True)
        if init == "smart":
            # closed-form speaker part; the channel loadings keep their small random start
            spk = standard.init_smart_splda(dataset, ry, d_diagonal=True)
            start = start.replace(V=spk.V, D=spk.D)
        return start
    dataset.require_conditions("jplda")
    if init == "smart":
        return joint.init_smart(dataset, ry, rx, d_diagonal=d_diagonal)
    return standard.init_random(dataset.dim, ry, rx, seed, mu=mu, variant="jplda", d_diagonal=d_diagonal)


def fit(model, dataset: LabeledDataset, n_iters: int, d_diagonal: bool | None = None):
    """Run EM from ``model``; returns (model, log-likelihood trace)."""
    if isinstance(model, TiedPldaParams):
        return tied.em_fit(dataset, model, n_iters, d_diagonal)
    if model.variant == "jplda":
        return joint.em_fit(dataset, model, n_iters, d_diagonal)
    return standard.em_fit(dataset, model, model.variant, n_iters, d_diagonal)


def train(variant: str, dataset: LabeledDataset, ry: int, rx: int = 0, *, n_iters: int | None = None,
          init: str | None = None, seed=0, d_diagonal: bool | None = None,
          component_map: Mapping[str, int] | None = None):
    _check_variant(variant)
    if variant in ("jplda", "tplda"):
        dataset.require_conditions(variant)
    d_diagonal = DEFAULTS[variant].d_diagonal if d_diagonal is None else d_diagonal
    if variant == "splda" or variant == "tplda":
        rx = 0
    start = initialize(variant, dataset, ry, rx, init=init, seed=seed, d_diagonal=d_diagonal,
                       component_map=component_map)
    n_iters = DEFAULTS[variant].n_iters if n_iters is None else n_iters
    return fit(start, dataset, n_iters, d_diagonal)


def marginal_loglik(model, dataset: LabeledDataset) -> float:
    if isinstance(model, TiedPldaParams):
        return tied.marginal_loglik(model, dataset)
    if model.variant == "jplda":
        return joint.marginal_loglik(model, dataset)
    return standard.marginal_loglik(model, dataset)


def score(model, enroll: LabeledDataset, test: LabeledDataset, trials: TrialList, *,
          priors: ConditionPriors = ConditionPriors(), known_condition: bool = False, threads: int = 1,
          use_oracle: bool = False) -> ScoreSet:
    """Verification LLRs for ``trials`` with the variant's scoring rule."""
    if threads < 1:
        raise DataError("threads must be >= 1")
    if use_oracle:
        return oracle_score(model, enroll, test, trials, priors=priors, known_condition=known_condition)
    if isinstance(model, TiedPldaParams):
        return tied.tplda_score(model, enroll, test, trials, threads=threads)
    if model.variant == "jplda":
        return joint.score_trials(model, enroll, test, trials, priors, known_condition, threads)
    return standard.score_trials(model, enroll, test, trials, threads)


def oracle_score(model, enroll: LabeledDataset, test: LabeledDataset, trials: TrialList, *,
                 priors: ConditionPriors = ConditionPriors(), known_condition: bool = False) -> ScoreSet:
    """Trial-by-trial scores from dense stacked Gaussians (small models only)."""
    if 2 * model.dim > oracle.MAX_DIM:
        raise DataError(f"oracle scoring limited to 2*dim <= {oracle.MAX_DIM}")
    ei, ti = standard.trial_vectors(enroll, test, trials, model.dim)
    E, T = enroll.vectors[ei], test.vectors[ti]
    if isinstance(model, TiedPldaParams):
        ce = tied.sample_components(enroll, model.condition_to_component)[ei]
        ct = tied.sample_components(test, model.condition_to_component)[ti]
        llr = [oracle.oracle_llr(model, e, t, components=(a, b)) for e, t, a, b in zip(E, T, ce, ct)]
    elif model.variant == "jplda" and known_condition:
        same = trials.is_same_condition()
        llr = [oracle.oracle_lr(model, e, t, True, bool(s)) - oracle.oracle_lr(model, e, t, False, bool(s))
               for e, t, s in zip(E, T, same)]
    else:
        llr = [oracle.oracle_llr(model, e, t, priors) for e, t in zip(E, T)]
    return ScoreSet(trials.enroll_ids, trials.test_ids, np.array(llr, dtype=float))


def rank_limits(variant: str, dataset: LabeledDataset, component_map=None) -> tuple[int, int]:
    """Largest (ry, rx) the variant can be trained with on ``dataset``."""
    _check_variant(variant)
    dim, S = dataset.dim, dataset.n_speakers
    if variant == "splda":
        return min(dim, S - 1), 0
    if variant == "fplda":
        return min(dim, S - 1), dim
    if variant == "jplda":
        dataset.require_conditions(variant)
        return min(dim, S - 1), min(dim, dataset.n_conditions - 1)
    comp = tied.sample_components(dataset, component_map or {})
    per = [dataset.subset(comp == d).n_speakers for d in np.unique(comp)]
    return min(dim, min(per) - 1), 0

