import warnings

import numpy as np
import pytest

from jplda import preprocess
from jplda.data import LabeledDataset
from jplda.errors import DataError
from jplda.preprocess import PreprocessPipeline, apply, fit_lda

from conftest import random_dataset


def labelled(X, spk):
    return LabeledDataset.from_labels(np.asarray(X, dtype=float), [f"u{i}" for i in range(len(spk))],
                                      [str(s) for s in spk])


def brute_force_scatter(X, spk):
    """Plain loops over classes; shares no code with the package."""
    X, spk = np.asarray(X), np.asarray(spk)
    mean = X.mean(axis=0)
    B = np.zeros((X.shape[1],) * 2)
    W = np.zeros_like(B)
    for s in np.unique(spk):
        Xs = X[spk == s]
        ms = Xs.mean(axis=0)
        B += len(Xs) * np.outer(ms - mean, ms - mean)
        for x in Xs:
            W += np.outer(x - ms, x - ms)
    return B / len(X), W / len(X)


def test_axis_aligned_separation():
    # a balanced cross of offsets makes the within-class scatter exactly isotropic
    cross = 0.3 * np.array([[1, 0], [-1, 0], [0, 1], [0, -1]])
    X = np.vstack([cross + [-3.0, 0.5], cross + [3.0, 0.5]])
    p = fit_lda(labelled(X, [0] * 4 + [1] * 4), 1)
    np.testing.assert_allclose(p.lda[:, 0], [1.0, 0.0], atol=1e-12)  # largest entry made positive


def test_full_dimension_keeps_span(rng):
    ds = random_dataset(rng, 4, n_speakers=3, max_per_cell=4)
    p = fit_lda(ds, 4)  # more than speakers - 1 is allowed only at full dimension
    assert p.output_dim == 4 and np.linalg.matrix_rank(p.lda) == 4
    out = apply(p, ds.vectors)
    assert np.linalg.matrix_rank(out) == min(ds.n_samples, 4)


def test_top_eigenvalue_matches_dense_solver():
    rng = np.random.default_rng(1)
    spk = np.repeat(np.arange(4), 6)
    X = rng.standard_normal((24, 5)) + 2 * rng.standard_normal((4, 5))[spk]
    B, W = brute_force_scatter(X, spk)
    eps = 1e-6 * np.trace(W) / 5
    dense = np.linalg.eigvals(np.linalg.inv(W + eps * np.eye(5)) @ B).real
    p = fit_lda(labelled(X, spk), 3)
    assert p.eigenvalues[0] == pytest.approx(dense.max(), rel=1e-10)
    np.testing.assert_allclose(p.eigenvalues, np.sort(dense)[::-1][:3], rtol=1e-10, atol=1e-12)
    # every column solves the generalized problem
    for q, lam in zip(p.lda.T, p.eigenvalues):
        np.testing.assert_allclose(B @ q, lam * (W + eps * np.eye(5)) @ q, atol=1e-10)


def test_scatter_matrices_match_brute_force(rng):
    ds = random_dataset(rng, 4, n_speakers=5, max_per_cell=3)
    B, W = preprocess.scatter_matrices(ds)
    Bb, Wb = brute_force_scatter(ds.vectors, ds.speaker_labels)
    np.testing.assert_allclose(B, Bb, atol=1e-12)
    np.testing.assert_allclose(W, Wb, atol=1e-12)


def test_columns_unit_norm_and_mean_from_training(rng):
    ds = random_dataset(rng, 6, n_speakers=6, max_per_cell=3)
    p = fit_lda(ds, 3)
    np.testing.assert_allclose(np.linalg.norm(p.lda, axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(p.mean, (ds.vectors @ p.lda).mean(axis=0), atol=1e-12)


def test_unit_arithmetic():
    p = PreprocessPipeline(np.eye(2), np.zeros(2), np.ones(2))
    np.testing.assert_allclose(apply(p, [3.0, 4.0]), [[0.6, 0.8]], atol=1e-15)


def test_mean_input_maps_to_zero_with_warning():
    p = PreprocessPipeline(np.eye(2), np.array([1.0, 2.0]), np.ones(2))
    with pytest.warns(RuntimeWarning, match="training mean"):
        out = apply(p, [[1.0, 2.0], [4.0, 6.0]])
    np.testing.assert_array_equal(out[0], 0.0)
    np.testing.assert_allclose(out[1], [0.6, 0.8])


def test_norms_are_one(rng):
    ds = random_dataset(rng, 10, n_speakers=8, max_per_cell=3)
    p = fit_lda(ds, 5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = apply(p, 100 * rng.standard_normal((1000, 10)))
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


def test_spectrum_invariant_under_orthogonal_reembedding():
    rng = np.random.default_rng(2)
    spk = np.repeat(np.arange(8), 5)
    X = rng.standard_normal((40, 6)) + np.array([3, 2, 1.5, 1, 0.5, 0.2]) * rng.standard_normal((8, 6))[spk]
    Q = np.linalg.qr(rng.standard_normal((6, 6)))[0]
    a = fit_lda(labelled(X, spk), 4)
    b = fit_lda(labelled(X @ Q.T, spk), 4)
    np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, rtol=1e-9)
    # directions map through Q, up to column sign
    np.testing.assert_allclose(np.abs(Q @ a.lda), np.abs(b.lda), atol=1e-8)


def test_round_trip(tmp_path, rng):
    p = fit_lda(random_dataset(rng, 5, n_speakers=5, max_per_cell=3), 3)
    preprocess.write_pipeline(p, tmp_path / "p.json")
    back = preprocess.read_pipeline(tmp_path / "p.json")
    for name in ("lda", "mean", "eigenvalues"):
        assert np.array_equal(getattr(back, name), getattr(p, name))


def test_errors(tmp_path, rng):
    ds = random_dataset(rng, 5, n_speakers=3, max_per_cell=3)
    with pytest.raises(DataError, match="exceeds"):
        fit_lda(ds, 3)
    with pytest.raises(DataError, match="2 speakers"):
        fit_lda(labelled(rng.standard_normal((4, 3)), [0, 0, 0, 0]), 1)
    p = fit_lda(ds, 2)
    with pytest.raises(DataError, match="dimension"):
        apply(p, np.zeros((1, 4)))
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(DataError, match="malformed"):
        preprocess.read_pipeline(tmp_path / "bad.json")
    with pytest.raises(DataError, match="cannot read"):
        preprocess.read_pipeline(tmp_path / "missing.json")
