"""LDA projection, centering and length normalization applied before PLDA."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg

from ._linalg import fix_signs, sym
from .data import LabeledDataset, _readonly
from .errors import DataError, NumericalError
from .standard import class_stats

DEFAULT_LDA_DIM = 400
DEFAULT_LDA_DIM_TIED = 200
RIDGE = 1e-6
ZERO_NORM = 1e-300


@dataclass(frozen=True)
class PreprocessPipeline:
    """``x -> lengthnorm(lda' x - mean)``; ``eigenvalues`` are the LDA criterion values."""

    lda: np.ndarray
    mean: np.ndarray
    eigenvalues: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lda", _readonly(self.lda))
        object.__setattr__(self, "mean", _readonly(self.mean))
        object.__setattr__(self, "eigenvalues", _readonly(self.eigenvalues))
        if self.lda.ndim != 2 or self.mean.shape != (self.lda.shape[1],):
            raise DataError("pipeline mean length must equal the number of LDA directions")

    @property
    def input_dim(self) -> int:
        return self.lda.shape[0]

    @property
    def output_dim(self) -> int:
        return self.lda.shape[1]


def scatter_matrices(dataset: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    """Count-weighted between-class and pooled within-class scatter (both divided by N)."""
    X = dataset.vectors
    counts, sums = class_stats(X, dataset.speaker_labels, dataset.n_speakers)
    means = sums / counts[:, None]
    centered = means - X.mean(axis=0)
    between = (centered * counts[:, None]).T @ centered / len(X)
    dev = X - means[dataset.speaker_labels]
    within = dev.T @ dev / len(X)
    return sym(between), sym(within)


def fit_lda(dataset: LabeledDataset, d: int) -> PreprocessPipeline:
    """Solve ``B q = lambda W q`` for the ``d`` largest ``lambda``.

    ``d`` may be at most ``min(dim, speakers - 1)``, or exactly ``dim`` to
    transform without reducing.  W is ridged by ``1e-6 * trace(W) / dim``.
    """
    dim, S = dataset.dim, dataset.n_speakers
    if S < 2:
        raise DataError("LDA needs at least 2 speakers")
    if not (1 <= d <= min(dim, S - 1) or d == dim):
        raise DataError(f"LDA dimension {d} exceeds min(dim, speakers - 1) = {min(dim, S - 1)}")
    between, within = scatter_matrices(dataset)
    eps = RIDGE * np.trace(within) / dim
    if not eps > 0:
        raise NumericalError("within-class scatter is singular (zero trace)")
    try:
        evals, evecs = linalg.eigh(between, within + eps * np.eye(dim))
    except linalg.LinAlgError:
        raise NumericalError("within-class scatter is singular even after ridge") from None
    order = np.argsort(evals, kind="stable")[::-1][:d]
    lda = evecs[:, order]
    lda = fix_signs(lda / np.linalg.norm(lda, axis=0))
    mean = (dataset.vectors @ lda).mean(axis=0)
    return PreprocessPipeline(lda, mean, evals[order])


def apply(pipeline: PreprocessPipeline, vectors: np.ndarray) -> np.ndarray:
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    if vectors.shape[1] != pipeline.input_dim:
        raise DataError(f"input dimension {vectors.shape[1]} != pipeline input {pipeline.input_dim}")
    out = vectors @ pipeline.lda - pipeline.mean
    norms = np.linalg.norm(out, axis=1)
    zero = norms <= ZERO_NORM
    if np.any(zero):
        warnings.warn(f"{np.count_nonzero(zero)} vector(s) project onto the training mean; left as zero",
                      RuntimeWarning, stacklevel=2)
        norms[zero] = 1.0
        out[zero] = 0.0
    return out / norms[:, None]


def apply_dataset(pipeline: PreprocessPipeline, dataset: LabeledDataset) -> LabeledDataset:
    return dataset.with_vectors(apply(pipeline, dataset.vectors))


def write_pipeline(pipeline: PreprocessPipeline, path) -> None:
    doc = {"input_dim": pipeline.input_dim, "output_dim": pipeline.output_dim,
           "lda": pipeline.lda.tolist(), "mean": pipeline.mean.tolist(),
           "eigenvalues": pipeline.eigenvalues.tolist()}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_pipeline(path) -> PreprocessPipeline:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        lda = np.array(doc["lda"], dtype=float).reshape(doc["input_dim"], doc["output_dim"])
        return PreprocessPipeline(lda, np.array(doc["mean"], dtype=float),
                                  np.array(doc.get("eigenvalues", [np.nan] * lda.shape[1]), dtype=float))
    except OSError as exc:
        raise DataError(f"cannot read pipeline {path}: {exc.strerror}") from None
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed pipeline file ({exc})") from None
