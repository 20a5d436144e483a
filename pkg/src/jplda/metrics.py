"""Verification metrics (EER, DET, Cllr) and linear logistic calibration."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import special, stats

from .data import ScoreSet, TrialList
from .errors import DataError

LN2 = np.log(2.0)
NEWTON_TOL = 1e-8
NEWTON_MAX_ITERS = 100


def split_scores(scores, key) -> tuple[np.ndarray, np.ndarray]:
    """Return (target, impostor) score arrays.

    ``scores`` is a ScoreSet or an array; ``key`` is a TrialList (scores are
    aligned to it) or a boolean is-target array.
    """
    if isinstance(key, TrialList):
        s = scores.aligned_to(key) if isinstance(scores, ScoreSet) else np.asarray(scores, dtype=float)
        is_tgt = key.is_target()
    else:
        s = scores.scores if isinstance(scores, ScoreSet) else np.asarray(scores, dtype=float)
        is_tgt = np.asarray(key, dtype=bool)
    if s.shape != is_tgt.shape:
        raise DataError("scores and key differ in length")
    tgt, imp = s[is_tgt], s[~is_tgt]
    if len(tgt) == 0 or len(imp) == 0:
        raise DataError("need at least one target and one impostor trial")
    if not (np.all(np.isfinite(tgt)) and np.all(np.isfinite(imp))):
        raise DataError("scores must be finite")
    return tgt, imp


def roc(tgt: np.ndarray, imp: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Step ROC as (thresholds, p_fa, p_miss) with p_fa decreasing.

    A trial is accepted when its score is strictly above the threshold.  The
    first entry (threshold -inf) accepts everything.
    """
    thr = np.unique(np.concatenate([tgt, imp]))
    tgt_sorted, imp_sorted = np.sort(tgt), np.sort(imp)
    p_miss = np.searchsorted(tgt_sorted, thr, side="right") / len(tgt)
    p_fa = 1.0 - np.searchsorted(imp_sorted, thr, side="right") / len(imp)
    return (np.concatenate([[-np.inf], thr]), np.concatenate([[1.0], p_fa]),
            np.concatenate([[0.0], p_miss]))


def rocch(p_fa: np.ndarray, p_miss: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lower-left convex hull of ROC points, ordered by increasing p_fa."""
    pts = sorted(set(zip(p_fa.tolist(), p_miss.tolist())))
    hull: list[tuple[float, float]] = []
    for p in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    arr = np.array(hull)
    return arr[:, 0], arr[:, 1]


def _eer_on_polyline(x: np.ndarray, y: np.ndarray) -> float:
    """Crossing of ``y = x`` along a polyline with x increasing and y nonincreasing."""
    d = y - x
    k = int(np.argmax(d <= 0))
    if k == 0:
        return float(x[0]) if d[0] == 0 else float(y[0])
    x0, y0, x1, y1 = x[k - 1], y[k - 1], x[k], y[k]
    t = d[k - 1] / (d[k - 1] - d[k])
    return float(x0 + t * (x1 - x0))


def eer(scores, key) -> float:
    """Equal error rate on the ROC convex hull (in [0, 0.5])."""
    tgt, imp = split_scores(scores, key)
    _, p_fa, p_miss = roc(tgt, imp)
    hx, hy = rocch(p_fa, p_miss)
    return _eer_on_polyline(hx, hy)


def probit(p, n: int | None = None) -> np.ndarray:
    """Inverse standard-normal CDF; with ``n`` rates are clamped to [1/(2n), 1-1/(2n)]."""
    p = np.asarray(p, dtype=float)
    if n is not None:
        lo = 1.0 / (2 * n)
        p = np.clip(p, lo, 1.0 - lo)
    return stats.norm.ppf(p)


@dataclass(frozen=True)
class DetPoint:
    p_fa: float
    p_miss: float
    probit_fa: float
    probit_miss: float


def det_points(scores, key, n_points: int | None = None) -> list[DetPoint]:
    """DET operating points with p_fa increasing, optionally downsampled.

    Downsampling keeps both endpoints.  Miss rates are clamped with the
    target count and false-alarm rates with the impostor count before the
    probit transform.
    """
    tgt, imp = split_scores(scores, key)
    _, p_fa, p_miss = roc(tgt, imp)
    p_fa, p_miss = p_fa[::-1], p_miss[::-1]
    if n_points is not None:
        if n_points < 2:
            raise DataError("n_points must be at least 2")
        if n_points < len(p_fa):
            idx = np.unique(np.round(np.linspace(0, len(p_fa) - 1, n_points)).astype(np.int64))
            p_fa, p_miss = p_fa[idx], p_miss[idx]
    pf, pm = probit(p_fa, len(imp)), probit(p_miss, len(tgt))
    return [DetPoint(*map(float, row)) for row in zip(p_fa, p_miss, pf, pm)]


def cllr(scores, key) -> float:
    """Log-likelihood-ratio cost in bits."""
    tgt, imp = split_scores(scores, key)
    # base-2 softplus keeps each zero score at exactly one bit
    return float(0.5 * (np.mean(np.logaddexp2(0.0, -tgt / LN2)) + np.mean(np.logaddexp2(0.0, imp / LN2))))


# ---------------------------------------------------------------- calibration

@dataclass(frozen=True)
class Calibrator:
    """Affine score map ``s' = a s + b``."""

    a: float
    b: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise DataError("calibration parameters must be finite")

    def __call__(self, scores) -> np.ndarray:
        return self.a * np.asarray(scores, dtype=float) + self.b

    def apply(self, scores: ScoreSet) -> ScoreSet:
        return ScoreSet(scores.enroll_ids, scores.test_ids, self(scores.scores))


def logistic_loss(tgt: np.ndarray, imp: np.ndarray, a: float, b: float, prior: float = 0.5) -> float:
    """Prior-weighted cross-entropy (nats) of ``a s + b + logit(prior)`` as log posterior odds."""
    off = special.logit(prior)
    return float(prior * np.mean(np.logaddexp(0.0, -(a * tgt + b + off)))
                 + (1 - prior) * np.mean(np.logaddexp(0.0, a * imp + b + off)))


def calibrate_fit(scores, key, prior: float = 0.5) -> Calibrator:
    """Fit ``(a, b)`` by Newton's method on the prior-weighted logistic loss."""
    if not 0.0 < prior < 1.0:
        raise DataError("prior must lie strictly between 0 and 1")
    tgt, imp = split_scores(scores, key)
    s = np.concatenate([tgt, imp])
    if np.ptp(s) == 0.0:
        warnings.warn("all calibration scores are equal; returning a=0, b=0", RuntimeWarning, stacklevel=2)
        return Calibrator(0.0, 0.0)
    y = np.concatenate([np.ones(len(tgt)), np.zeros(len(imp))])
    w = np.concatenate([np.full(len(tgt), prior / len(tgt)), np.full(len(imp), (1 - prior) / len(imp))])
    X = np.column_stack([s, np.ones_like(s)])
    off = special.logit(prior)

    def loss(theta):
        z = X @ theta + off
        return float(w @ (y * np.logaddexp(0.0, -z) + (1 - y) * np.logaddexp(0.0, z)))

    theta = np.array([1.0, 0.0])
    cur = loss(theta)
    converged = False
    for _ in range(NEWTON_MAX_ITERS):
        p = special.expit(X @ theta + off)
        grad = X.T @ (w * (p - y))
        if np.linalg.norm(grad) < NEWTON_TOL:
            converged = True
            break
        hess = (X * (w * p * (1 - p))[:, None]).T @ X
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            new = loss(cand)
            if new <= cur:
                break
            t *= 0.5
        else:
            break
        theta, cur = cand, new
    if not converged:
        warnings.warn("calibration did not reach gradient tolerance (separable scores?)",
                      RuntimeWarning, stacklevel=2)
    if theta[0] < 0:
        warnings.warn(f"calibration scale is negative (a={theta[0]:.4g})", RuntimeWarning, stacklevel=2)
    return Calibrator(float(theta[0]), float(theta[1]))


def speaker_splits(speakers, n_splits: int = 2, seed=0) -> dict[str, int]:
    """Assign each speaker to one of ``n_splits`` folds by a seeded shuffle."""
    if n_splits < 2:
        raise DataError("n_splits must be at least 2")
    names = sorted(set(speakers))
    if len(names) < n_splits:
        raise DataError(f"{len(names)} speakers cannot fill {n_splits} splits")
    order = np.random.default_rng(seed).permutation(len(names))
    return {names[j]: pos % n_splits for pos, j in enumerate(order)}


def cv_calibrate(scores: ScoreSet, trials: TrialList, speaker_of: Mapping[str, str], n_splits: int = 2,
                 seed=0, prior: float = 0.5, return_models: bool = False):
    """Cross-validated calibration with speakers split into disjoint folds.

    Trials whose enroll and test speakers land in different folds are dropped.
    The rest are calibrated by a model fit on the within-fold trials of all
    other folds.  Output keeps the input trial order.
    """
    try:
        spk_e = [speaker_of[i] for i in trials.enroll_ids]
        spk_t = [speaker_of[i] for i in trials.test_ids]
    except KeyError as exc:
        raise DataError(f"no speaker for sample id {exc.args[0]!r}") from None
    fold_of = speaker_splits(spk_e + spk_t, n_splits, seed)
    fe = np.array([fold_of[s] for s in spk_e])
    ft = np.array([fold_of[s] for s in spk_t])
    s = scores.aligned_to(trials)
    is_tgt = trials.is_target()
    out = np.full(len(trials), np.nan)
    models = []
    for k in range(n_splits):
        train = (fe == ft) & (fe != k)
        apply_to = (fe == k) & (ft == k)
        if not np.any(apply_to):
            models.append(None)
            continue
        if np.all(is_tgt[train]) or not np.any(is_tgt[train]):
            raise DataError(f"calibration training data for split {k} has a single class")
        cal = calibrate_fit(s[train], is_tgt[train], prior)
        out[apply_to] = cal(s[apply_to])
        models.append(cal)
    kept = ~np.isnan(out)
    result = ScoreSet([trials.enroll_ids[i] for i in np.flatnonzero(kept)],
                      [trials.test_ids[i] for i in np.flatnonzero(kept)], out[kept])
    return (result, models) if return_models else result


# ---------------------------------------------------------------- report

@dataclass(frozen=True)
class EvalReport:
    eer: float
    cllr: float
    n_target: int
    n_impostor: int
    det: list[DetPoint] = field(repr=False)
    subsets: dict[str, "EvalReport"] = field(default_factory=dict)

    def summary(self, label: str | None = None) -> str:
        head = "" if label is None else f"subset={label} "
        return f"{head}eer={self.eer!r} cllr={self.cllr!r} n_tgt={self.n_target} n_imp={self.n_impostor}"


def evaluate(scores: ScoreSet, trials: TrialList, n_points: int | None = None,
             by_condition: bool = False) -> EvalReport:
    """Metrics over ``trials``; with ``by_condition`` also the same/cross subsets."""
    s = scores.aligned_to(trials)
    is_tgt = trials.is_target()
    subsets = {}
    if by_condition:
        same = trials.is_same_condition()
        for name, mask in (("same", same), ("cross", ~same)):
            subsets[name] = _report(s[mask], is_tgt[mask], n_points)
    return _report(s, is_tgt, n_points, subsets)


def _report(s, is_tgt, n_points, subsets=None) -> EvalReport:
    return EvalReport(eer(s, is_tgt), cllr(s, is_tgt), int(np.count_nonzero(is_tgt)),
                      int(np.count_nonzero(~is_tgt)), det_points(s, is_tgt, n_points), subsets or {})
