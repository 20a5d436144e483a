import numpy as np
import pytest

from jplda.data import LabeledDataset, PldaParams, TiedPldaParams


def rel_err(a, b) -> float:
    """Largest elementwise |a - b| / max(1, |b|)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)), initial=0.0))


def random_precision(rng, dim, diagonal=False):
    if diagonal:
        return np.diag(rng.uniform(0.5, 2.0, dim))
    A = rng.standard_normal((dim, dim))
    cov = A @ A.T / dim + 0.5 * np.eye(dim)
    P = np.linalg.inv(cov)
    return 0.5 * (P + P.T)


def random_model(rng, dim=5, ry=2, rx=1, variant="jplda", diagonal=False, scale=1.0):
    return PldaParams(
        mu=rng.standard_normal(dim),
        V=scale * rng.standard_normal((dim, ry)),
        U=scale * rng.standard_normal((dim, rx)),
        D=random_precision(rng, dim, diagonal),
        d_diagonal=diagonal,
        variant=variant,
    )


def random_tied(rng, dim=4, ry=2, k=2, diagonal=False):
    comps = tuple(random_model(rng, dim, ry, 0, "splda", diagonal) for _ in range(k))
    cmap = {f"c{j}": j % k for j in range(max(k, 3))}
    return TiedPldaParams(comps, cmap)


def random_dataset(rng, dim=5, n_speakers=3, n_conditions=2, max_per_cell=2, conditions=True):
    """Small dataset where every speaker has 1..max_per_cell samples in random conditions."""
    vecs, spk, cond = [], [], []
    for s in range(n_speakers):
        for c in range(n_conditions):
            if c > 0 and rng.random() < 0.4:
                continue
            n = int(rng.integers(1, max_per_cell + 1))
            spk += [f"s{s}"] * n
            cond += [f"c{c}"] * n
    vecs = rng.standard_normal((len(spk), dim))
    ids = [f"u{i}" for i in range(len(spk))]
    return LabeledDataset.from_labels(vecs, ids, spk, cond if conditions else None)


def sample_from(model, rng, n_speakers, n_conditions, per_cell, return_latents=False):
    """Draw data from a joint model where every speaker appears in every condition."""
    Y = rng.standard_normal((n_speakers, model.ry))
    X = rng.standard_normal((n_conditions, model.rx))
    spk = np.repeat(np.arange(n_speakers), n_conditions * per_cell)
    cond = np.tile(np.repeat(np.arange(n_conditions), per_cell), n_speakers)
    L = np.linalg.cholesky(np.linalg.inv(model.D))
    M = model.mu + Y[spk] @ model.V.T + X[cond] @ model.U.T + rng.standard_normal((len(spk), model.dim)) @ L.T
    ids = [f"u{i}" for i in range(len(spk))]
    ds = LabeledDataset.from_labels(M, ids, [f"s{s}" for s in spk], [f"c{c}" for c in cond])
    return (ds, Y, X) if return_latents else ds


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
