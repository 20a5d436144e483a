import numpy as np
import pytest

from jplda import synth
from jplda.errors import DataError
from jplda.synth import ScenarioConfig, gen_dataset, gen_model, gen_trials


SMALL = ScenarioConfig(dim=6, ry=2, rx=1, n_speakers=40, n_test_speakers=20, n_conditions=3,
                       condition_skew=(0.6, 0.2, 0.2), speaker_scale=(1.5, 1.0), condition_scale=(1.2,))


def test_model_is_seeded():
    a, b = gen_model(SMALL, 3), gen_model(SMALL, 3)
    for name in ("mu", "V", "U", "D"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.V, gen_model(SMALL, 4).V)


def test_model_structure():
    m = gen_model(SMALL)
    np.testing.assert_allclose(np.linalg.norm(m.V, axis=0), [1.5, 1.0])
    np.testing.assert_allclose(m.V.T @ m.U, 0.0, atol=1e-12)  # one orthonormal basis
    assert np.all(np.linalg.eigvalsh(m.D) > 0)
    diag = gen_model(SMALL.replace(noise="diagonal"))
    assert diag.d_diagonal and np.count_nonzero(diag.D - np.diag(np.diag(diag.D))) == 0


def test_zero_condition_magnitude():
    m = gen_model(SMALL.replace(condition_scale=(0.0,)))
    assert np.array_equal(m.U, np.zeros((6, 1)))


def test_covariance_of_independent_samples():
    # one sample per speaker and (almost always) per condition
    cfg = ScenarioConfig(dim=6, ry=2, rx=1, n_speakers=100_000, n_conditions=100_000, samples_per_cell=(1, 1),
                         bilingual_fraction=0.0, test_bilingual_fraction=0.0, condition_skew=None,
                         speaker_scale=(1.5, 1.0), condition_scale=(1.2,))
    m = gen_model(cfg)
    ds = gen_dataset(m, cfg)
    want = m.V @ m.V.T + m.U @ m.U.T + np.linalg.inv(m.D)
    got = np.cov(ds.vectors.T)
    assert np.linalg.norm(got - want) / np.linalg.norm(want) < 0.03


def test_same_cell_differences_have_twice_the_noise():
    cfg = SMALL.replace(n_speakers=20_000, samples_per_cell=(2, 2), bilingual_fraction=0.0)
    m = gen_model(cfg)
    ds = gen_dataset(m, cfg)
    # rows come in consecutive same-speaker same-condition pairs
    assert ds.speakers()[0::2] == ds.speakers()[1::2]
    diff = ds.vectors[0::2] - ds.vectors[1::2]
    want = 2 * np.linalg.inv(m.D)
    assert np.linalg.norm(diff.T @ diff / len(diff) - want) / np.linalg.norm(want) < 0.05


def test_single_condition_population():
    ds = gen_dataset(gen_model(SMALL), SMALL.replace(bilingual_fraction=0.0))
    for s in set(ds.speakers()):
        rows = np.array(ds.speakers()) == s
        assert len(set(np.array(ds.conditions())[rows])) == 1


def test_two_condition_speakers_include_condition_zero():
    ds = gen_dataset(gen_model(SMALL), SMALL.replace(bilingual_fraction=1.0))
    spk, cond = np.array(ds.speakers()), np.array(ds.conditions())
    for s in set(spk):
        cs = set(cond[spk == s])
        assert len(cs) == 2 and "cond0" in cs


def test_sample_counts_per_cell():
    ds = gen_dataset(gen_model(SMALL), SMALL.replace(samples_per_cell=(2, 3)))
    _, counts = np.unique(np.column_stack([ds.speaker_labels, ds.condition_labels]), axis=0, return_counts=True)
    assert counts.min() >= 2 and counts.max() <= 3


def test_reduction_keeps_one_condition_per_speaker():
    full = gen_dataset(gen_model(SMALL), SMALL.replace(bilingual_fraction=0.5))
    red = synth.single_condition(full, seed=1)
    spk, cond = np.array(red.speakers()), np.array(red.conditions())
    assert set(spk) == set(full.speakers())
    for s in set(spk):
        assert len(set(cond[spk == s])) == 1
    # kept samples are unchanged rows of the full set
    idx = full.rows(red.sample_ids)
    assert np.array_equal(full.vectors[idx], red.vectors)


def test_trials_balanced_and_distinct():
    ds = gen_dataset(gen_model(SMALL), SMALL.replace(bilingual_fraction=0.5))
    t = gen_trials(ds, 50, seed=2)
    cells = list(zip(t.keys, t.cond_tags))
    for cell in [("target", "same"), ("target", "cross"), ("impostor", "same"), ("impostor", "cross")]:
        assert cells.count(cell) == 50
    pairs = {frozenset(p) for p in zip(t.enroll_ids, t.test_ids)}
    assert len(pairs) == len(t) and all(len(p) == 2 for p in pairs)
    # keys and tags agree with the labels
    spk = dict(zip(ds.sample_ids, ds.speakers()))
    cond = dict(zip(ds.sample_ids, ds.conditions()))
    for e, x, k, c in zip(t.enroll_ids, t.test_ids, t.keys, t.cond_tags):
        assert (k == "target") == (spk[e] == spk[x])
        assert (c == "same") == (cond[e] == cond[x])
    again = gen_trials(ds, 50, seed=2)
    assert again == t


def test_trials_truncate_to_smallest_cell():
    # 4 speakers, one with two conditions: 5 + 5 samples gives 5 * 5 = 25 cross-condition targets
    cfg = SMALL.replace(n_speakers=4, samples_per_cell=(5, 5), bilingual_fraction=0.25)
    ds = gen_dataset(gen_model(cfg), cfg)
    with pytest.warns(RuntimeWarning, match="truncated to 25"):
        t = gen_trials(ds, 100)
    assert len(t) == 4 * 25


def test_trials_need_every_cell():
    ds = gen_dataset(gen_model(SMALL), SMALL.replace(bilingual_fraction=0.0))
    with pytest.raises(DataError, match="target/cross"):
        gen_trials(ds, 10)


def test_large_population_uses_sampling_path():
    cfg = SMALL.replace(n_speakers=500, samples_per_cell=(4, 4), bilingual_fraction=0.5)
    ds = gen_dataset(gen_model(cfg), cfg)
    assert ds.n_samples * (ds.n_samples - 1) // 2 > synth.ENUMERATE_MAX_PAIRS
    t = gen_trials(ds, 300, seed=0)
    assert len(t) == 1200 and len({frozenset(p) for p in zip(t.enroll_ids, t.test_ids)}) == 1200


def test_config_validation_and_json(tmp_path):
    with pytest.raises(DataError):
        ScenarioConfig(bilingual_fraction=1.5)
    with pytest.raises(DataError):
        ScenarioConfig(ry=15, rx=10, dim=20)
    with pytest.raises(DataError, match="speaker_scale"):
        gen_model(SMALL.replace(speaker_scale=(1.0,)))
    p = tmp_path / "c.json"
    p.write_text(SMALL.to_json())
    assert ScenarioConfig.read(p) == SMALL
    with pytest.raises(DataError, match="unknown"):
        ScenarioConfig.from_json('{"n_speakers": 10, "colour": 3}')


def test_scenario_shares_condition_latents():
    sc = synth.make_scenario(SMALL, per_cell=20)
    assert not set(sc.train.speakers()) & set(sc.test.speakers())
    assert set(sc.test.conditions()) <= {f"cond{c}" for c in range(3)}
    again = synth.make_scenario(SMALL, per_cell=20)
    assert np.array_equal(again.train.vectors, sc.train.vectors) and again.trials == sc.trials


def test_single_condition_scenario_is_reduction_of_full():
    # SMALL keeps the default two-condition fraction, so both share one population
    full = synth.make_scenario(SMALL, per_cell=20)
    single = synth.make_scenario(SMALL.replace(bilingual_fraction=0.0), per_cell=20)
    assert set(single.train.sample_ids) < set(full.train.sample_ids)
    assert np.array_equal(full.train.vectors[full.train.rows(single.train.sample_ids)], single.train.vectors)
    spk, cond = np.array(single.train.speakers()), np.array(single.train.conditions())
    assert all(len(set(cond[spk == s])) == 1 for s in set(spk))
    assert set(spk) == set(full.train.speakers())
