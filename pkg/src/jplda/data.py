"""Datasets, model parameter sets, trial lists, score sets and their file formats.

Files use plain TSV (datasets, trials, scores) and JSON (models).  Floats are
written with ``repr`` so every value survives a write/read cycle bit-for-bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

UNKNOWN = "-"
KEYS = ("target", "impostor")
COND_TAGS = ("same", "cross")
PLAIN_VARIANTS = ("splda", "fplda", "jplda")
VARIANTS = ("splda", "fplda", "tplda", "jplda")


def _readonly(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def dense_index(labels: Iterable) -> tuple[np.ndarray, tuple]:
    """Map arbitrary labels to 0..K-1 in order of first appearance."""
    names: dict = {}
    idx = [names.setdefault(lab, len(names)) for lab in labels]
    return np.asarray(idx, dtype=np.int64), tuple(names)


@dataclass(frozen=True)
class LabeledDataset:
    """N fixed-length vectors with speaker and (optional) condition labels.

    ``speaker_labels``/``condition_labels`` are dense integer indices into
    ``speaker_names``/``condition_names``.  A dataset without condition
    information has ``condition_labels is None``.
    """

    vectors: np.ndarray
    sample_ids: tuple[str, ...]
    speaker_labels: np.ndarray
    speaker_names: tuple[str, ...]
    condition_labels: np.ndarray | None = None
    condition_names: tuple[str, ...] | None = None

    def __post_init__(self):
        vec = np.array(self.vectors, dtype=float, copy=True)
        if vec.ndim != 2 or vec.shape[0] < 1 or vec.shape[1] < 1:
            raise DataError(f"vectors must be a non-empty N x R matrix, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise DataError("vectors contain non-finite values")
        n = vec.shape[0]
        ids = tuple(str(s) for s in self.sample_ids)
        if len(ids) != n:
            raise DataError(f"{len(ids)} sample ids for {n} vectors")
        if len(set(ids)) != n:
            seen: set = set()
            dup = next(s for s in ids if s in seen or seen.add(s))
            raise DataError(f"duplicate sample id {dup!r}")
        spk = np.asarray(self.speaker_labels, dtype=np.int64)
        spk_names = tuple(str(s) for s in self.speaker_names)
        if spk.shape != (n,) or (n and (spk.min() < 0 or spk.max() >= len(spk_names))):
            raise DataError("speaker labels must be N indices into speaker_names")
        vec.setflags(write=False)
        spk.setflags(write=False)
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "speaker_labels", spk)
        object.__setattr__(self, "speaker_names", spk_names)
        if self.condition_labels is None:
            object.__setattr__(self, "condition_names", None)
            return
        cond = np.asarray(self.condition_labels, dtype=np.int64)
        names = tuple(str(s) for s in (self.condition_names or ()))
        if cond.shape != (n,) or cond.min() < 0 or cond.max() >= len(names):
            raise DataError("condition labels must be N indices into condition_names")
        cond.setflags(write=False)
        object.__setattr__(self, "condition_labels", cond)
        object.__setattr__(self, "condition_names", names)

    @classmethod
    def from_labels(cls, vectors, sample_ids, speakers, conditions=None) -> "LabeledDataset":
        """Build a dataset from raw (string) labels, re-indexing them densely."""
        spk, spk_names = dense_index(speakers)
        if conditions is None:
            return cls(vectors, tuple(sample_ids), spk, spk_names)
        cond, cond_names = dense_index(conditions)
        return cls(vectors, tuple(sample_ids), spk, spk_names, cond, cond_names)

    @property
    def n_samples(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_names)

    @property
    def n_conditions(self) -> int:
        return 0 if self.condition_names is None else len(self.condition_names)

    @property
    def has_conditions(self) -> bool:
        return self.condition_labels is not None

    def speakers(self) -> list[str]:
        return [self.speaker_names[i] for i in self.speaker_labels]

    def conditions(self) -> list[str] | None:
        if self.condition_labels is None:
            return None
        return [self.condition_names[i] for i in self.condition_labels]

    def require_conditions(self, what: str) -> None:
        if not self.has_conditions:
            raise DataError(f"{what} needs condition labels but the dataset has none")

    def subset(self, index) -> "LabeledDataset":
        """Rows selected by a boolean mask or index array, labels re-indexed densely."""
        idx = np.arange(self.n_samples)[index]
        if idx.size == 0:
            raise DataError("subset selects no samples")
        conds = None
        if self.has_conditions:
            conds = [self.condition_names[self.condition_labels[i]] for i in idx]
        return LabeledDataset.from_labels(
            self.vectors[idx],
            [self.sample_ids[i] for i in idx],
            [self.speaker_names[self.speaker_labels[i]] for i in idx],
            conds,
        )

    def with_vectors(self, vectors) -> "LabeledDataset":
        return LabeledDataset(vectors, self.sample_ids, self.speaker_labels, self.speaker_names,
                              self.condition_labels, self.condition_names)

    def id_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.sample_ids)}

    def rows(self, ids: Sequence[str], what: str = "sample") -> np.ndarray:
        lookup = self.id_index()
        try:
            return np.fromiter((lookup[i] for i in ids), dtype=np.int64, count=len(ids))
        except KeyError as exc:
            raise DataError(f"{what} id {exc.args[0]!r} not found in dataset") from None


@dataclass(frozen=True)
class PldaParams:
    """Parameters {mu, V, U, D} of one PLDA model; D is the noise precision.

    ``variant`` decides how the U factor is tied: per sample (``fplda``), per
    condition (``jplda``) or absent (``splda``).
    """

    mu: np.ndarray
    V: np.ndarray
    U: np.ndarray
    D: np.ndarray
    d_diagonal: bool = False
    variant: str = "splda"

    def __post_init__(self):
        mu = _readonly(self.mu)
        if mu.ndim != 1 or mu.size < 1:
            raise DataError("mu must be a non-empty vector")
        dim = mu.size
        V = _readonly(self.V)
        U = _readonly(self.U if np.size(self.U) else np.zeros((dim, 0)))
        if V.ndim != 2 or V.shape[0] != dim or U.ndim != 2 or U.shape[0] != dim:
            raise DataError(f"V and U must have {dim} rows")
        D = _readonly(self.D)
        if self.variant not in PLAIN_VARIANTS:
            raise DataError(f"unknown variant {self.variant!r}")
        if V.shape[1] < 1 or V.shape[1] > dim:
            raise DataError(f"speaker rank must be in [1, {dim}], got {V.shape[1]}")
        if U.shape[1] > dim:
            raise DataError(f"condition rank must be in [0, {dim}], got {U.shape[1]}")
        if D.shape != (dim, dim):
            raise DataError(f"D must be {dim}x{dim}, got {D.shape}")
        if not (np.all(np.isfinite(V)) and np.all(np.isfinite(U)) and np.all(np.isfinite(D))):
            raise DataError("model parameters contain non-finite values")
        if not np.array_equal(D, D.T):
            raise DataError("D must be symmetric")
        if self.d_diagonal and np.any(D[~np.eye(dim, dtype=bool)] != 0):
            raise DataError("D flagged diagonal but has non-zero off-diagonal entries")
        try:
            np.linalg.cholesky(D)
        except np.linalg.LinAlgError:
            raise DataError("D must be positive definite") from None
        for name, val in (("mu", mu), ("V", V), ("U", U), ("D", D)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "d_diagonal", bool(self.d_diagonal))

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def ry(self) -> int:
        return self.V.shape[1]

    @property
    def rx(self) -> int:
        return self.U.shape[1]

    def replace(self, **changes) -> "PldaParams":
        fields = dict(mu=self.mu, V=self.V, U=self.U, D=self.D,
                      d_diagonal=self.d_diagonal, variant=self.variant)
        fields.update(changes)
        return PldaParams(**fields)

    def noise_cov(self) -> np.ndarray:
        from ._linalg import inv_pd
        return inv_pd(self.D, "D")


@dataclass(frozen=True)
class TiedPldaParams:
    """Mixture of PLDA components sharing the speaker latent variable."""

    components: tuple[PldaParams, ...]
    condition_to_component: Mapping[str, int] = field(default_factory=dict)
    variant: str = "tplda"

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise DataError("a tied model needs at least one component")
        if len({(c.dim, c.ry) for c in comps}) != 1:
            raise DataError("all components must share the vector dimension and speaker rank")
        cmap = {str(k): int(v) for k, v in dict(self.condition_to_component).items()}
        bad = [k for k, v in cmap.items() if not 0 <= v < len(comps)]
        if bad:
            raise DataError(f"conditions {bad} map to non-existent components")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "condition_to_component", cmap)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def ry(self) -> int:
        return self.components[0].ry

    @property
    def rx(self) -> int:
        return 0

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def d_diagonal(self) -> bool:
        return all(c.d_diagonal for c in self.components)

    def component_of(self, condition_names: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.condition_to_component[c] for c in condition_names], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"condition {exc.args[0]!r} has no mixture component") from None


@dataclass(frozen=True)
class TrialList:
    """(enroll, test) sample-id pairs with optional target/impostor key and condition tag."""

    enroll_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    keys: tuple[str | None, ...] | None = None
    cond_tags: tuple[str | None, ...] | None = None

    def __post_init__(self):
        enroll = tuple(str(s) for s in self.enroll_ids)
        test = tuple(str(s) for s in self.test_ids)
        n = len(enroll)
        if len(test) != n:
            raise DataError("enroll and test id lists differ in length")
        keys = tuple(self.keys) if self.keys is not None else (None,) * n
        tags = tuple(self.cond_tags) if self.cond_tags is not None else (None,) * n
        if len(keys) != n or len(tags) != n:
            raise DataError("keys/condition tags must have one entry per trial")
        if any(k not in (None,) + KEYS for k in keys):
            raise DataError("trial keys must be 'target', 'impostor' or unknown")
        if any(t not in (None,) + COND_TAGS for t in tags):
            raise DataError("condition tags must be 'same', 'cross' or unknown")
        pairs = set(zip(enroll, test))
        if len(pairs) != n:
            raise DataError("duplicate (enroll_id, test_id) pair in trial list")
        object.__setattr__(self, "enroll_ids", enroll)
        object.__setattr__(self, "test_ids", test)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "cond_tags", tags)

    def __len__(self) -> int:
        return len(self.enroll_ids)

    @property
    def has_keys(self) -> bool:
        return bool(len(self)) and all(k is not None for k in self.keys)

    @property
    def has_cond_tags(self) -> bool:
        return bool(len(self)) and all(t is not None for t in self.cond_tags)

    def is_target(self) -> np.ndarray:
        if not self.has_keys:
            raise DataError("trial list lacks target/impostor keys")
        return np.array([k == "target" for k in self.keys])

    def is_same_condition(self) -> np.ndarray:
        if not self.has_cond_tags:
            raise DataError("trial list lacks same/cross condition tags")
        return np.array([t == "same" for t in self.cond_tags])

    def select(self, mask) -> "TrialList":
        idx = np.arange(len(self))[mask]
        return TrialList(
            [self.enroll_ids[i] for i in idx], [self.test_ids[i] for i in idx],
            [self.keys[i] for i in idx], [self.cond_tags[i] for i in idx],
        )


@dataclass(frozen=True)
class ScoreSet:
    """Per-trial natural-log likelihood ratios."""

    enroll_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    scores: np.ndarray

    def __post_init__(self):
        scores = _readonly(self.scores)
        enroll = tuple(str(s) for s in self.enroll_ids)
        test = tuple(str(s) for s in self.test_ids)
        if scores.shape != (len(enroll),) or len(test) != len(enroll):
            raise DataError("score set needs one score per (enroll, test) pair")
        if not np.all(np.isfinite(scores)):
            raise DataError("scores must be finite")
        object.__setattr__(self, "enroll_ids", enroll)
        object.__setattr__(self, "test_ids", test)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.scores)

    def aligned_to(self, trials: TrialList) -> np.ndarray:
        """Scores reordered to match ``trials``; every trial must be scored."""
        lookup = {p: i for i, p in enumerate(zip(self.enroll_ids, self.test_ids))}
        try:
            idx = [lookup[p] for p in zip(trials.enroll_ids, trials.test_ids)]
        except KeyError as exc:
            raise DataError(f"trial {exc.args[0]} has no score") from None
        return self.scores[np.asarray(idx, dtype=np.int64)]


# ---------------------------------------------------------------- TSV formats

def _fmt(values) -> str:
    return "\t".join(repr(float(v)) for v in values)


def read_dataset(path, format: str = "tsv") -> LabeledDataset:
    if format != "tsv":
        raise DataError(f"unsupported dataset format {format!r}")
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").split("\n")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror}") from None
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataError(f"{path}: empty file")
    header = lines[0].split("\t")
    if header[:3] != ["id", "speaker", "condition"] or len(header) < 4:
        raise DataError(f"{path}: line 1: header must be id, speaker, condition, dim0...")
    dim = len(header) - 3
    ids, spk, cond, rows = [], [], [], []
    seen: set = set()
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) < 3:
            raise DataError(f"{path}: malformed row at line {lineno}")
        if len(fields) != dim + 3:
            raise DataError(f"{path}: inconsistent dimension at line {lineno}")
        sid = fields[0]
        if not sid:
            raise DataError(f"{path}: empty id at line {lineno}")
        if sid in seen:
            raise DataError(f"{path}: duplicate id {sid!r} at line {lineno}")
        seen.add(sid)
        try:
            row = [float(v) for v in fields[3:]]
        except ValueError:
            raise DataError(f"{path}: malformed number at line {lineno}") from None
        if not all(math.isfinite(v) for v in row):
            raise DataError(f"{path}: non-finite value at line {lineno}")
        ids.append(sid)
        spk.append(fields[1])
        cond.append(fields[2])
        rows.append(row)
    if not rows:
        raise DataError(f"{path}: no samples")
    unknown = [c == UNKNOWN for c in cond]
    if any(unknown) and not all(unknown):
        lineno = unknown.index(True) + 2 if not unknown[0] else unknown.index(False) + 2
        raise DataError(f"{path}: mixed known and unknown conditions at line {lineno}")
    conditions = None if all(unknown) else cond
    return LabeledDataset.from_labels(np.array(rows), ids, spk, conditions)


def write_dataset(dataset: LabeledDataset, path) -> None:
    header = ["id", "speaker", "condition"] + [f"dim{j}" for j in range(dataset.dim)]
    conds = dataset.conditions() or [UNKNOWN] * dataset.n_samples
    out = ["\t".join(header)]
    for sid, spk, cond, row in zip(dataset.sample_ids, dataset.speakers(), conds, dataset.vectors):
        out.append(f"{sid}\t{spk}\t{cond}\t{_fmt(row)}")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def read_trials(path) -> TrialList:
    enroll, test, keys, tags = [], [], [], []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read trials {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        fields = line.split("\t")
        if not 2 <= len(fields) <= 4:
            raise DataError(f"{path}: malformed trial at line {lineno}")
        key = tag = None
        for extra in fields[2:]:
            if extra in KEYS and key is None and tag is None:
                key = extra
            elif extra in COND_TAGS and tag is None:
                tag = extra
            else:
                raise DataError(f"{path}: unexpected field {extra!r} at line {lineno}")
        enroll.append(fields[0])
        test.append(fields[1])
        keys.append(key)
        tags.append(tag)
    return TrialList(enroll, test, keys, tags)


def write_trials(trials: TrialList, path) -> None:
    out = []
    for e, t, k, c in zip(trials.enroll_ids, trials.test_ids, trials.keys, trials.cond_tags):
        out.append("\t".join([e, t] + [x for x in (k, c) if x is not None]))
    Path(path).write_text("".join(line + "\n" for line in out), encoding="utf-8")


def read_scores(path) -> ScoreSet:
    enroll, test, scores = [], [], []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read scores {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        fields = line.split("\t")
        try:
            e, t, s = fields
            scores.append(float(s))
        except ValueError:
            raise DataError(f"{path}: malformed score at line {lineno}") from None
        enroll.append(e)
        test.append(t)
    return ScoreSet(enroll, test, np.array(scores))


def write_scores(scores: ScoreSet, path) -> None:
    out = [f"{e}\t{t}\t{float(s)!r}\n" for e, t, s in zip(scores.enroll_ids, scores.test_ids, scores.scores)]
    Path(path).write_text("".join(out), encoding="utf-8")


# ---------------------------------------------------------------- model JSON

def _params_to_dict(p: PldaParams) -> dict:
    return {
        "mu": p.mu.tolist(), "V": p.V.tolist(), "U": p.U.tolist(), "D": p.D.tolist(),
        "d_diagonal": p.d_diagonal, "ry": p.ry, "rx": p.rx,
    }


def _matrix(obj, rows: int, cols: int, name: str) -> np.ndarray:
    try:
        arr = np.array(obj, dtype=float)
    except (TypeError, ValueError):
        raise DataError(f"model field {name} is not a numeric matrix") from None
    if cols == 0 and arr.size == 0:
        arr = arr.reshape(rows, 0)
    if arr.shape != (rows, cols):
        raise DataError(f"model field {name} has shape {arr.shape}, declared ranks imply {(rows, cols)}")
    return arr


def _params_from_dict(d: Mapping, variant: str) -> PldaParams:
    try:
        mu = np.array(d["mu"], dtype=float)
        ry, rx = int(d["ry"]), int(d["rx"])
        dim = mu.size
        return PldaParams(
            mu=mu,
            V=_matrix(d["V"], dim, ry, "V"),
            U=_matrix(d["U"], dim, rx, "U"),
            D=_matrix(d["D"], dim, dim, "D"),
            d_diagonal=bool(d["d_diagonal"]),
            variant=variant,
        )
    except KeyError as exc:
        raise DataError(f"model JSON lacks field {exc.args[0]!r}") from None


def model_to_dict(model: PldaParams | TiedPldaParams) -> dict:
    if isinstance(model, TiedPldaParams):
        return {
            "variant": "tplda",
            "ry": model.ry,
            "rx": 0,
            "d_diagonal": model.d_diagonal,
            "components": [_params_to_dict(c) for c in model.components],
            "condition_to_component": dict(model.condition_to_component),
        }
    return {"variant": model.variant, **_params_to_dict(model)}


def model_from_dict(d: Mapping) -> PldaParams | TiedPldaParams:
    variant = d.get("variant")
    if variant not in VARIANTS:
        raise DataError(f"unknown model variant {variant!r}")
    if variant != "tplda":
        return _params_from_dict(d, variant)
    try:
        comps = [_params_from_dict(c, "splda") for c in d["components"]]
        cmap = d["condition_to_component"]
    except KeyError as exc:
        raise DataError(f"tplda model JSON lacks field {exc.args[0]!r}") from None
    if any(c.ry != int(d.get("ry", comps[0].ry if comps else 0)) for c in comps):
        raise DataError("component speaker rank disagrees with declared ry")
    return TiedPldaParams(tuple(comps), cmap)


def write_model(model: PldaParams | TiedPldaParams, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")


def read_model(path) -> PldaParams | TiedPldaParams:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg})") from None
    return model_from_dict(d)
