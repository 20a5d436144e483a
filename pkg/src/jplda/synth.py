"""Synthetic speaker/condition data drawn from the joint generative model.

The desk-scale default mimics a multilingual corpus: one dominant condition
holding most samples, a minority of speakers recorded in two conditions
(the dominant one plus another), and a held-out test population in which
every speaker is recorded in two conditions so that cross-condition target
trials exist.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._linalg import sym
from .data import LabeledDataset, PldaParams, TrialList
from .errors import DataError

NOISE_KINDS = ("diagonal", "full")
CELLS = (("target", "same"), ("target", "cross"), ("impostor", "same"), ("impostor", "cross"))
ENUMERATE_MAX_PAIRS = 2_000_000


def _as_scales(value, rank: int, what: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=float), (rank,)) if np.ndim(value) == 0 else np.asarray(value, float)
    if arr.shape != (rank,):
        raise DataError(f"{what} needs {rank} magnitudes, got {arr.size}")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise DataError(f"{what} magnitudes must be finite and non-negative")
    return np.array(arr)


@dataclass(frozen=True)
class ScenarioConfig:
    """Population and model settings for a synthetic scenario.

    ``samples_per_cell`` is the inclusive (min, max) range of samples drawn
    per (speaker, condition) cell.  ``condition_skew`` gives relative sample
    shares of the conditions (``None`` means uniform).  Speaker and condition
    magnitudes scale the orthonormal loading columns; the noise standard
    deviations are log-spaced over ``noise_spread`` around ``noise_scale``.
    """

    dim: int = 20
    ry: int = 4
    rx: int = 2
    n_speakers: int = 300
    n_test_speakers: int = 100
    n_conditions: int = 5
    samples_per_cell: tuple[int, int] = (4, 6)
    bilingual_fraction: float = 0.15
    test_bilingual_fraction: float = 1.0
    condition_skew: tuple[float, ...] | None = (0.7, 0.075, 0.075, 0.075, 0.075)
    speaker_scale: float | tuple[float, ...] = (2.0, 1.7, 1.4, 1.2)
    condition_scale: float | tuple[float, ...] = (3.0, 2.5)
    noise: str = "full"
    noise_scale: float = 1.0
    noise_spread: float = 4.0
    mean_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("samples_per_cell", "condition_skew", "speaker_scale", "condition_scale"):
            value = getattr(self, name)
            if isinstance(value, list):
                object.__setattr__(self, name, tuple(value))
        if not (1 <= self.ry <= self.dim and 0 <= self.rx <= self.dim and self.ry + self.rx <= self.dim):
            raise DataError("ranks must satisfy 1 <= ry, 0 <= rx, ry + rx <= dim")
        if self.n_speakers < 2 or self.n_test_speakers < 0 or self.n_conditions < 1:
            raise DataError("need >= 2 training speakers, >= 0 test speakers and >= 1 condition")
        lo, hi = self.samples_per_cell
        if not 1 <= lo <= hi:
            raise DataError("samples_per_cell must be a (min, max) range with 1 <= min <= max")
        for name in ("bilingual_fraction", "test_bilingual_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DataError(f"{name} must lie in [0, 1]")
        if self.n_conditions < 2 and (self.bilingual_fraction > 0 or
                                      (self.n_test_speakers and self.test_bilingual_fraction > 0)):
            raise DataError("two-condition speakers need at least 2 conditions")
        if self.condition_skew is not None:
            skew = np.asarray(self.condition_skew, dtype=float)
            if skew.shape != (self.n_conditions,) or np.any(skew <= 0) or not np.all(np.isfinite(skew)):
                raise DataError("condition_skew needs one positive share per condition")
        if self.noise not in NOISE_KINDS:
            raise DataError(f"noise must be one of {NOISE_KINDS}")
        if not (self.noise_scale > 0 and self.noise_spread >= 1 and self.mean_scale >= 0):
            raise DataError("noise_scale must be > 0, noise_spread >= 1, mean_scale >= 0")
        _as_scales(self.speaker_scale, self.ry, "speaker_scale")
        _as_scales(self.condition_scale, self.rx, "condition_scale")

    @property
    def single_condition(self) -> bool:
        return self.bilingual_fraction == 0.0

    def replace(self, **changes) -> "ScenarioConfig":
        return ScenarioConfig(**{**asdict(self), **changes})

    def condition_shares(self) -> np.ndarray:
        if self.condition_skew is None:
            return np.full(self.n_conditions, 1.0 / self.n_conditions)
        skew = np.asarray(self.condition_skew, dtype=float)
        return skew / skew.sum()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed scenario JSON: {exc}") from None
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise DataError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def read(cls, path) -> "ScenarioConfig":
        try:
            return cls.from_json(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read scenario {path}: {exc.strerror}") from None


def gen_model(config: ScenarioConfig, seed=None) -> PldaParams:
    """True joint model: orthonormal [V U] columns scaled per factor, noise per ``config.noise``."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dim, ry, rx = config.dim, config.ry, config.rx
    mu = config.mean_scale * rng.standard_normal(dim)
    q, _ = np.linalg.qr(rng.standard_normal((dim, ry + rx)))
    V = q[:, :ry] * _as_scales(config.speaker_scale, ry, "speaker_scale")
    U = q[:, ry:] * _as_scales(config.condition_scale, rx, "condition_scale")
    half = np.log(config.noise_spread) / 2
    std = config.noise_scale * np.exp(rng.uniform(-half, half, dim))
    if config.noise == "diagonal":
        D = np.diag(1.0 / std**2)
    else:
        rot, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        D = sym((rot / std**2) @ rot.T)
    return PldaParams(mu, V, U, D, d_diagonal=config.noise == "diagonal", variant="jplda")


def draw_condition_latents(config: ScenarioConfig, rng) -> np.ndarray:
    return rng.standard_normal((config.n_conditions, config.rx))


def _speaker_conditions(n_speakers: int, two_cond_fraction: float, config: ScenarioConfig, rng) -> list[list[int]]:
    """Condition set per speaker: one condition drawn by share, or condition 0 plus another."""
    shares = config.condition_shares()
    n_two = int(round(two_cond_fraction * n_speakers))
    two = np.zeros(n_speakers, dtype=bool)
    two[rng.permutation(n_speakers)[:n_two]] = True
    first = rng.choice(config.n_conditions, size=n_speakers, p=shares)
    first[two] = 0
    out = [[int(c)] for c in first]
    if n_two:
        second = 1 + rng.choice(config.n_conditions - 1, size=n_two, p=shares[1:] / shares[1:].sum())
        for s, c in zip(np.flatnonzero(two), second):
            out[s].append(int(c))
    return out


def gen_dataset(model: PldaParams, config: ScenarioConfig, seed=None, *, n_speakers: int | None = None,
                two_cond_fraction: float | None = None, condition_latents=None,
                speaker_prefix: str = "spk", first_speaker: int = 0, return_latents: bool = False):
    """Draw ``m = mu + V y_s + U x_c + z`` for a population described by ``config``.

    With ``return_latents`` the speaker latents ``Y`` and condition latents
    ``X`` are returned alongside the dataset.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    n_speakers = config.n_speakers if n_speakers is None else n_speakers
    frac = config.bilingual_fraction if two_cond_fraction is None else two_cond_fraction
    X = draw_condition_latents(config, rng) if condition_latents is None else np.asarray(condition_latents)
    if X.shape != (config.n_conditions, model.rx):
        raise DataError("condition latents must have shape (n_conditions, rx)")
    assign = _speaker_conditions(n_speakers, frac, config, rng)
    lo, hi = config.samples_per_cell
    spk, cond = [], []
    for s, conds in enumerate(assign):
        for c in conds:
            n = int(rng.integers(lo, hi + 1))
            spk += [s] * n
            cond += [c] * n
    spk, cond = np.array(spk), np.array(cond)
    Y = rng.standard_normal((n_speakers, model.ry))
    L = np.linalg.cholesky(model.noise_cov())
    Z = rng.standard_normal((len(spk), model.dim)) @ L.T
    M = model.mu + Y[spk] @ model.V.T + X[cond] @ model.U.T + Z
    names = [f"{speaker_prefix}{first_speaker + s:04d}" for s in spk]
    counter: dict[str, int] = {}
    ids = []
    for name, c in zip(names, cond):
        k = counter[name] = counter.get(name, -1) + 1
        ids.append(f"{name}_cond{c}_{k:03d}")
    dataset = LabeledDataset.from_labels(M, ids, names, [f"cond{c}" for c in cond])
    return (dataset, Y, X) if return_latents else dataset


def single_condition(dataset: LabeledDataset, seed=0) -> LabeledDataset:
    """Keep one randomly chosen condition per speaker (two-condition speakers lose the other)."""
    dataset.require_conditions("single-condition reduction")
    rng = np.random.default_rng(seed)
    keep = np.zeros(dataset.n_samples, dtype=bool)
    for s in range(dataset.n_speakers):
        rows = dataset.speaker_labels == s
        conds = np.unique(dataset.condition_labels[rows])
        chosen = conds[rng.integers(len(conds))]
        keep |= rows & (dataset.condition_labels == chosen)
    return dataset.subset(keep)


def _cell_counts(spk: np.ndarray, cond: np.ndarray) -> dict[tuple[str, str], int]:
    def pairs(labels):
        _, n = np.unique(labels, axis=0, return_counts=True)
        return int(np.sum(n * (n - 1) // 2))

    N = len(spk)
    same_spk, same_cond = pairs(spk), pairs(cond)
    same_both = pairs(np.column_stack([spk, cond]))
    return {("target", "same"): same_both, ("target", "cross"): same_spk - same_both,
            ("impostor", "same"): same_cond - same_both,
            ("impostor", "cross"): N * (N - 1) // 2 - same_spk - same_cond + same_both}


def _cell_of(spk, cond, i, j) -> np.ndarray:
    return 2 * (spk[i] != spk[j]) + (cond[i] != cond[j])


def _sample_pairs(spk, cond, need: dict[int, int], rng) -> dict[int, np.ndarray]:
    """Unordered pairs ``i < j`` drawn without replacement for each cell index."""
    N = len(spk)
    out = {}
    if N * (N - 1) // 2 <= ENUMERATE_MAX_PAIRS:
        i, j = np.triu_indices(N, k=1)
        cells = _cell_of(spk, cond, i, j)
        for k, n in need.items():
            idx = np.flatnonzero(cells == k)
            pick = np.sort(rng.choice(len(idx), size=n, replace=False))
            out[k] = np.column_stack([i[idx[pick]], j[idx[pick]]])
        return out
    # Large sets: target cells are enumerated per speaker, impostor cells rejection-sampled.
    for k, n in need.items():
        if k < 2:
            found = []
            for s in np.unique(spk):
                rows = np.flatnonzero(spk == s)
                a, b = np.triu_indices(len(rows), k=1)
                keep = (cond[rows[a]] != cond[rows[b]]) == bool(k)
                found.append(np.column_stack([rows[a[keep]], rows[b[keep]]]))
            pool = np.concatenate(found)
            out[k] = pool[np.sort(rng.choice(len(pool), size=n, replace=False))]
            continue
        chosen: set[tuple[int, int]] = set()
        while len(chosen) < n:
            a, b = rng.integers(N, size=(2, 4 * n))
            a, b = np.minimum(a, b), np.maximum(a, b)
            ok = (a != b) & (_cell_of(spk, cond, a, b) == k)
            for pair in zip(a[ok].tolist(), b[ok].tolist()):
                chosen.add(pair)
                if len(chosen) == n:
                    break
        out[k] = np.array(sorted(chosen))
    return out


def gen_trials(dataset: LabeledDataset, per_cell: int, seed=0) -> TrialList:
    """Balanced trials over {target, impostor} x {same, cross} condition.

    Every cell gets ``min(per_cell, smallest availability)`` distinct pairs;
    a warning is issued when that truncates the request.
    """
    dataset.require_conditions("trial generation")
    if per_cell < 1:
        raise DataError("per_cell must be >= 1")
    spk, cond = dataset.speaker_labels, dataset.condition_labels
    avail = _cell_counts(spk, cond)
    n = min(per_cell, *avail.values())
    if n == 0:
        empty = [f"{k}/{c}" for (k, c), v in avail.items() if v == 0]
        raise DataError(f"no trials available for cell(s) {', '.join(empty)}")
    if n < per_cell:
        warnings.warn(f"only {n} trials available in the smallest cell; all cells truncated to {n}",
                      RuntimeWarning, stacklevel=2)
    rng = np.random.default_rng(seed)
    pairs = _sample_pairs(spk, cond, {k: n for k in range(4)}, rng)
    rows = [(int(i), int(j), k) for k in range(4) for i, j in pairs[k]]
    order = rng.permutation(len(rows))
    ids = dataset.sample_ids
    enroll, test, keys, tags = [], [], [], []
    for r in order:
        i, j, k = rows[r]
        if rng.random() < 0.5:
            i, j = j, i
        key, tag = CELLS[k]
        enroll.append(ids[i])
        test.append(ids[j])
        keys.append(key)
        tags.append(tag)
    return TrialList(enroll, test, keys, tags)


@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    model: PldaParams
    condition_latents: np.ndarray = field(repr=False)
    train: LabeledDataset = field(repr=False)
    test: LabeledDataset = field(repr=False)
    trials: TrialList = field(repr=False)


def make_scenario(config: ScenarioConfig, per_cell: int = 1000) -> Scenario:
    """Model, training set, held-out test set and balanced trials from one seed.

    The test population shares the conditions (and their latents) with the
    training population but not the speakers.  When ``bilingual_fraction`` is
    zero the training set is the two-condition population reduced to one
    condition per speaker with the same seed.
    """
    rng = np.random.default_rng(config.seed)
    seeds = rng.integers(2**63 - 1, size=5)
    model = gen_model(config, seeds[0])
    X = draw_condition_latents(config, np.random.default_rng(seeds[1]))
    if config.single_condition:
        full = gen_dataset(model, config, seeds[2], two_cond_fraction=ScenarioConfig.bilingual_fraction,
                           condition_latents=X)
        train = single_condition(full, seeds[3])
    else:
        train = gen_dataset(model, config, seeds[2], condition_latents=X)
    test = gen_dataset(model, config, seeds[4], n_speakers=config.n_test_speakers,
                       two_cond_fraction=config.test_bilingual_fraction, condition_latents=X,
                       speaker_prefix="tst")
    trials = gen_trials(test, per_cell, seeds[4])
    return Scenario(config, model, X, train, test, trials)
