import json
import time

import numpy as np
import pytest

from jplda import cli
from jplda.data import (LabeledDataset, ScoreSet, TrialList, read_dataset, read_model, read_scores, read_trials,
                        write_dataset, write_scores, write_trials)
from jplda.synth import ScenarioConfig

SMALL = ScenarioConfig(dim=10, ry=3, rx=2, n_speakers=60, n_test_speakers=30, n_conditions=3,
                       condition_skew=(0.6, 0.2, 0.2), speaker_scale=(2.0, 1.5, 1.2), condition_scale=(2.0, 1.5),
                       seed=4)
CMAP = "cond0=0,cond1=1,cond2=1"
VARIANT_FLAGS = {"splda": [], "fplda": ["--rx", "2"], "jplda": ["--rx", "2"], "tplda": ["--component-map", CMAP]}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def scenario(tmp_path_factory):
    d = tmp_path_factory.mktemp("scenario")
    (d / "config.json").write_text(SMALL.to_json())
    assert run("synth", "--config", d / "config.json", "--per-cell", 50, "--out-dir", d) == 0
    return d


def test_synth_outputs(scenario):
    for name in ("train.tsv", "test.tsv", "trials.tsv", "true_model.json", "scenario.json", "train.tsv.manifest.json"):
        assert (scenario / name).exists()
    assert read_model(scenario / "true_model.json").variant == "jplda"
    doc = json.loads((scenario / "train.tsv.manifest.json").read_text())
    assert doc["command"] == "synth" and doc["version"]
    assert {"command", "flags", "seeds", "inputs", "outputs", "wall_clock_seconds"} <= set(doc)


def test_jplda_defaults(tmp_path):
    # large enough that the default ranks are not clamped
    rng = np.random.default_rng(0)
    S, C, dim = 220, 18, 230
    spk = np.repeat(np.arange(S), 3)
    cond = rng.integers(0, C, len(spk))
    cond[:C] = np.arange(C)
    X = rng.standard_normal((len(spk), dim)) + rng.standard_normal((S, dim))[spk] + rng.standard_normal((C, dim))[cond]
    write_dataset(LabeledDataset.from_labels(X, [f"u{i}" for i in range(len(spk))], [f"s{s}" for s in spk],
                                             [f"c{c}" for c in cond]), tmp_path / "d.tsv")
    assert run("train", "--model", "jplda", "--data", tmp_path / "d.tsv", "--out", tmp_path / "m.json") == 0
    resolved = json.loads((tmp_path / "m.json.manifest.json").read_text())["resolved"]
    assert resolved == {"ry": 200, "rx": 16, "iters": 1, "init": "smart", "d_diagonal": False}
    m = read_model(tmp_path / "m.json")
    assert (m.ry, m.rx) == (200, 16)


def test_zero_iterations(scenario, tmp_path, capsys):
    out = tmp_path / "m.json"
    assert run("train", "--model", "splda", "--init", "smart", "--iters", 0, "--ry", 3,
               "--data", scenario / "train.tsv", "--out", out) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "iter\tloglik" and len(lines) == 2 and lines[1].startswith("0\t")
    assert read_model(out).variant == "splda"


def test_default_ranks_clamp_with_warning(scenario, tmp_path, caplog):
    assert run("train", "--model", "splda", "--data", scenario / "train.tsv", "--out", tmp_path / "m.json") == 0
    assert "clamped" in caplog.text
    assert read_model(tmp_path / "m.json").ry == 10


def test_jplda_needs_conditions(tmp_path, capsys):
    rows = "id\tspeaker\tcondition\tdim0\tdim1\na\ts\t-\t1\t2\nb\tt\t-\t3\t4\n"
    (tmp_path / "d.tsv").write_text(rows)
    assert run("train", "--model", "jplda", "--data", tmp_path / "d.tsv", "--out", tmp_path / "m.json") == 2
    assert "condition" in capsys.readouterr().err


def test_usage_errors(scenario, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("train", "--model", "xplda", "--data", scenario / "train.tsv", "--out", tmp_path / "m.json")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("score", "--model-file", "m.json")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("score", "--model-file", "m", "--enroll", "e", "--test", "t", "--trials", "x", "--out", "o",
            "--p-same-cond-ss", "1.5")
    assert exc.value.code == 1


def test_rank_and_flag_contracts(scenario, tmp_path):
    data = scenario / "train.tsv"
    assert run("train", "--model", "splda", "--ry", 11, "--data", data, "--out", tmp_path / "m.json") == 2
    assert run("train", "--model", "splda", "--rx", 2, "--data", data, "--out", tmp_path / "m.json") == 2
    assert run("train", "--model", "splda", "--component-map", CMAP, "--data", data, "--out", tmp_path / "m.json") == 2
    assert run("train", "--model", "tplda", "--data", data, "--out", tmp_path / "m.json") == 2


@pytest.fixture(scope="module")
def jplda_model(scenario):
    out = scenario / "jplda.json"
    assert run("train", "--model", "jplda", "--ry", 3, "--rx", 2, "--data", scenario / "train.tsv", "--out", out) == 0
    return out


def test_oracle_matches_fast_path(scenario, jplda_model, tmp_path):
    args = ["score", "--model-file", jplda_model, "--enroll", scenario / "test.tsv", "--test", scenario / "test.tsv",
            "--trials", scenario / "trials.tsv", "--p-same-cond-ss", 0.3, "--p-same-cond-ds", 0.6]
    assert run(*args, "--out", tmp_path / "fast.tsv") == 0
    assert run(*args, "--use-oracle", "--out", tmp_path / "oracle.tsv") == 0
    fast, slow = read_scores(tmp_path / "fast.tsv"), read_scores(tmp_path / "oracle.tsv")
    assert np.max(np.abs(fast.scores - slow.scores)) < 1e-8


def test_threads_do_not_change_output(scenario, jplda_model, tmp_path):
    args = ["score", "--model-file", jplda_model, "--enroll", scenario / "test.tsv", "--test", scenario / "test.tsv",
            "--trials", scenario / "trials.tsv"]
    assert run(*args, "--out", tmp_path / "a.tsv") == 0
    assert run(*args, "--threads", 3, "--out", tmp_path / "b.tsv") == 0
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


def test_unknown_trial_id(scenario, jplda_model, tmp_path, capsys):
    write_trials(TrialList(["ghost-id"], [read_dataset(scenario / "test.tsv").sample_ids[0]]), tmp_path / "t.tsv")
    code = run("score", "--model-file", jplda_model, "--enroll", scenario / "test.tsv", "--test",
               scenario / "test.tsv", "--trials", tmp_path / "t.tsv", "--out", tmp_path / "s.tsv")
    assert code == 2 and "ghost-id" in capsys.readouterr().err


def test_known_condition_only_for_jplda(scenario, tmp_path):
    assert run("train", "--model", "splda", "--ry", 3, "--data", scenario / "train.tsv", "--out",
               tmp_path / "s.json") == 0
    assert run("score", "--model-file", tmp_path / "s.json", "--enroll", scenario / "test.tsv", "--test",
               scenario / "test.tsv", "--trials", scenario / "trials.tsv", "--known-condition",
               "--out", tmp_path / "x.tsv") == 2


def _keyed_trials(tmp_path, scores, keys, tags=None):
    n = len(scores)
    trials = TrialList([f"e{i}" for i in range(n)], [f"t{i}" for i in range(n)], keys, tags)
    write_trials(trials, tmp_path / "t.tsv")
    write_scores(ScoreSet(trials.enroll_ids, trials.test_ids, np.asarray(scores, float)), tmp_path / "s.tsv")


def test_eval_perfect_scores(tmp_path, capsys):
    _keyed_trials(tmp_path, [3.0, 2.0, -1.0, -2.0], ["target", "target", "impostor", "impostor"])
    assert run("eval", "--scores", tmp_path / "s.tsv", "--trials", tmp_path / "t.tsv",
               "--out-det", tmp_path / "det.tsv") == 0
    out = capsys.readouterr().out
    assert out.startswith("eer=0.0 ") and "n_tgt=2 n_imp=2" in out
    det = (tmp_path / "det.tsv").read_text().splitlines()
    assert det[0] == "p_fa\tp_miss\tprobit_fa\tprobit_miss" and len(det) > 2


def test_eval_subsets_need_tags(tmp_path, capsys):
    _keyed_trials(tmp_path, [1.0, -1.0], ["target", "impostor"])
    assert run("eval", "--scores", tmp_path / "s.tsv", "--trials", tmp_path / "t.tsv",
               "--out-det", tmp_path / "d.tsv", "--subset-by-condition") == 2
    assert "same/cross" in capsys.readouterr().err


def test_eval_zero_scores_calibrated(scenario, tmp_path, capsys):
    trials = scenario / "trials.tsv"
    t = read_trials(trials)
    write_scores(ScoreSet(t.enroll_ids, t.test_ids, np.zeros(len(t))), tmp_path / "zero.tsv")
    assert run("eval", "--scores", tmp_path / "zero.tsv", "--trials", trials, "--out-det", tmp_path / "d.tsv",
               "--calibrate-cv", 2, "--data", scenario / "test.tsv", "--subset-by-condition") == 0
    lines = capsys.readouterr().out.splitlines()
    cllr = float(lines[0].split("cllr=")[1].split()[0])
    assert cllr <= 1.0
    assert lines[1].startswith("subset=same ") and lines[2].startswith("subset=cross ")
    assert lines[3].startswith("uncalibrated ") and "dropped_cross_split=" in lines[3]


def _pipeline(root, variant):
    """synth -> preprocess -> train -> score -> eval; returns the eval summary line."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(SMALL.to_json())
    steps = [
        ["synth", "--config", root / "config.json", "--per-cell", 50, "--out-dir", root],
        ["preprocess", "fit", "--data", root / "train.tsv", "--dim", 8, "--out", root / "lda.json"],
        ["preprocess", "apply", "--pipeline", root / "lda.json", "--data", root / "train.tsv", "--out",
         root / "train.lda.tsv"],
        ["preprocess", "apply", "--pipeline", root / "lda.json", "--data", root / "test.tsv", "--out",
         root / "test.lda.tsv"],
        ["train", "--model", variant, "--ry", 3, *VARIANT_FLAGS[variant], "--seed", 7,
         "--data", root / "train.lda.tsv", "--out", root / "model.json"],
        ["score", "--model-file", root / "model.json", "--enroll", root / "test.lda.tsv", "--test",
         root / "test.lda.tsv", "--trials", root / "trials.tsv", "--out", root / "scores.tsv"],
        ["eval", "--scores", root / "scores.tsv", "--trials", root / "trials.tsv", "--out-det", root / "det.tsv",
         "--subset-by-condition", "--calibrate-cv", 2, "--seed", 1, "--data", root / "test.lda.tsv",
         "--out-scores", root / "calibrated.tsv"],
    ]
    for argv in steps:
        assert run(*argv) == 0, argv


def output_bytes(root):
    """Every output file except manifests, which carry wall-clock times."""
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if not p.name.endswith(".manifest.json")}


def test_all_variants_smoke_and_determinism(tmp_path, capsys):
    start = time.perf_counter()
    for variant in VARIANT_FLAGS:
        _pipeline(tmp_path / variant / "a", variant)
        summary = capsys.readouterr().out
        assert "eer=" in summary and "subset=cross" in summary
        _pipeline(tmp_path / variant / "b", variant)
        assert output_bytes(tmp_path / variant / "a") == output_bytes(tmp_path / variant / "b")
    assert time.perf_counter() - start < 60
