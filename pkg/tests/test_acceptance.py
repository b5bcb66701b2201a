"""Numbered acceptance criteria, each run at its stated tolerance.

Every test tags itself with its criterion number and the measured value; the
terminal summary prints one PASS/FAIL line per criterion. The synthetic
experiments (criteria 4 to 8) share session fixtures, so each seed's data and
trained models are built once.
"""

import hashlib
import logging
import time

import numpy as np
import pytest

from relabelkit import cli
from relabelkit.dataset import DEFAULT_SCENARIOS, feature_matrix, verified_labels
from relabelkit.embednet import NetConfig, TrainConfig, embed
from relabelkit.evaluation import (METRIC_NAMES, ConfusionMatrix, ExperimentSpec,
                                   compute_metrics, run_experiment, scenario_sweep)
from relabelkit.relabel import (RelabelConfig, data_reduction, relabel_comparator,
                                relabeled_labels, select_queries, top_count)
from relabelkit.siamese import ContrastiveConfig, class_distance_gap, train_siamese
from relabelkit.synth import GeneratorConfig, generate, oracle_accuracy

import oracles

pytestmark = pytest.mark.acceptance

SEEDS = tuple(range(10))
SWEEP = ("A", "B", "C", "D", "E", "F")
# mini-batches of 16 keep the multi-seed experiments inside their time budget
HARNESS_TRAIN = TrainConfig(batch_size=16)


@pytest.fixture(scope="session")
def datasets():
    return {s: generate(GeneratorConfig(seed=s)) for s in SEEDS}


@pytest.fixture(scope="session")
def sweeps(datasets):
    start = time.perf_counter()
    out = {s: scenario_sweep(d.noisy, d.reference, SWEEP, (s,), train=HARNESS_TRAIN)
           for s, d in datasets.items()}
    return out, time.perf_counter() - start


@pytest.fixture(scope="session")
def retrains(datasets):
    start = time.perf_counter()
    out = {}
    for include in (False, True):
        spec_cfg = RelabelConfig(include_uncertain=include)
        out[include] = {
            s: run_experiment(ExperimentSpec("relabel_retrain", "A", spec_cfg, seeds=(s,),
                                             train=HARNESS_TRAIN), d.noisy, d.reference)
            for s, d in datasets.items()}
    return out, time.perf_counter() - start


@pytest.fixture(scope="session")
def comparators(datasets):
    return {s: train_siamese(NetConfig(16, seed=s), d.reference,
                             TrainConfig(seed=s, batch_size=16),
                             ContrastiveConfig(seed=s))[0]
            for s, d in datasets.items()}


def _accuracy(result):
    return compute_metrics(result.pooled).accuracy


class TestCriteria:
    def test_c01_metric_arithmetic(self, criterion):
        report = compute_metrics(ConfusionMatrix(tp=60, fp=36, tn=54, fn=30))
        expected = (0.6667, 0.6000, 0.6250, 0.6429, 0.6333, 0.6452)
        got = [getattr(report, n) for n in METRIC_NAMES]
        worst = max(abs(g - e) for g, e in zip(got, expected))
        criterion(1, f"max |error| {worst:.2e} (tol 5e-5)")
        assert worst <= 5e-5

    def test_c02_gradient_check(self, criterion):
        start = time.perf_counter()
        cases = oracles.gradient_check_matrix(24)
        errors = [oracles.gradient_case_error(c, step=1e-5) for c in cases]
        elapsed = time.perf_counter() - start
        criterion(2, f"{len(cases)} configs, max rel error {max(errors):.2e} (tol 1e-4), "
                     f"{elapsed:.1f}s")
        assert len(cases) >= 20 and max(errors) < 1e-4 and elapsed < 10

    def test_c03_metric_learning_separation(self, datasets, criterion):
        start = time.perf_counter()
        wins = 0
        for s, d in datasets.items():
            params, _ = train_siamese(NetConfig(16, seed=s), d.reference, TrainConfig(seed=s),
                                      ContrastiveConfig(seed=s))
            within, cross = class_distance_gap(params, d.reference)
            wins += within < cross
        elapsed = time.perf_counter() - start
        criterion(3, f"within < cross in {wins}/10 seeds (need 9), {elapsed:.0f}s")
        assert wins >= 9 and elapsed < 120

    def test_c04_bias_detection(self, sweeps, criterion):
        results, elapsed = sweeps
        gaps, specs = [], []
        for s in SEEDS:
            m = compute_metrics(results[s][0].pooled)
            gaps.append(m.sensitivity - m.specificity)
            specs.append(m.specificity)
        gap = float(np.mean(gaps))
        criterion(4, f"mean sens-spec {gap:.3f} (need >= 0.15), mean spec "
                     f"{np.mean(specs):.3f}, sweep {elapsed:.0f}s")
        assert gap >= 0.15

    def test_c05_threshold_trend(self, sweeps, criterion):
        results, elapsed = sweeps
        fp = np.mean([[r.pooled.fp for r in results[s]] for s in SEEDS], axis=0)
        inversions = int(np.sum(np.diff(fp) > 0))
        criterion(5, "mean FP " + " ".join(f"{n}={v:.1f}" for n, v in zip(SWEEP, fp))
                  + f"; {inversions} inversion(s) (max 1)")
        assert inversions <= 1 and elapsed < 15 * 60

    def test_c06a_relabels_beat_scenario_labels(self, datasets, retrains, criterion):
        results, _ = retrains
        gains = []
        for s, d in datasets.items():
            outcomes = results[False][s].outcomes[s]
            new = relabeled_labels(outcomes)
            original = {o.id: o.original_label for o in outcomes}
            gains.append(oracle_accuracy(new, d.truth) - oracle_accuracy(original, d.truth))
        gain = float(np.mean(gains))
        criterion("6a", f"mean oracle-accuracy gain {gain:.3f} (need >= 0.05)")
        assert gain >= 0.05

    def test_c06b_retrained_beats_scenario_classifier(self, sweeps, retrains, criterion):
        sweep_results, _ = sweeps
        results, elapsed = retrains
        deltas = [_accuracy(results[False][s]) - _accuracy(sweep_results[s][0]) for s in SEEDS]
        delta = float(np.mean(deltas))
        criterion("6b", f"mean accuracy gain {delta:.3f} (need >= 0.03), "
                        f"retrain runs {elapsed:.0f}s")
        assert delta >= 0.03 and elapsed < 20 * 60

    def test_c07_uncertain_inclusion(self, retrains, criterion):
        results, _ = retrains
        deltas = [_accuracy(results[True][s]) - _accuracy(results[False][s]) for s in SEEDS]
        delta = float(np.mean(deltas))
        criterion(7, f"mean include-exclude accuracy {delta:+.3f} (need >= -0.01)")
        assert delta >= -0.01

    def test_c08_mode_contracts(self, datasets, retrains, comparators, caplog, criterion):
        results, _ = retrains
        checked = 0
        for include in (False, True):
            for s, d in datasets.items():
                outcomes = results[include][s].outcomes[s]
                queries, _ = select_queries(d.noisy, DEFAULT_SCENARIOS["A"], include)
                assert [o.id for o in outcomes] == [q.id for q in queries]
                assert len(relabeled_labels(outcomes)) == len(queries)
                checked += 1
        reductions = []
        caplog.set_level(logging.INFO, logger="relabelkit.relabel")
        for include in (False, True):
            for s, d in datasets.items():
                queries, original = select_queries(d.noisy, DEFAULT_SCENARIOS["A"], include)
                sub = relabel_comparator(comparators[s], queries, d.reference,
                                         RelabelConfig(include_uncertain=include), original)
                caplog.clear()
                con = relabel_comparator(comparators[s], queries, d.reference,
                                         RelabelConfig(mode="consensus",
                                                       include_uncertain=include), original)
                assert len(relabeled_labels(sub)) == len(queries)
                for a, b in zip(sub, con):
                    if b.original_label is None:
                        assert b.new_label == a.new_label
                    elif b.new_label is not None:
                        assert b.new_label == b.original_label and b.agreed
                    else:
                        assert a.new_label != a.original_label and b.agreed is False
                n_disagree = sum(1 for a in sub if a.original_label is not None
                                 and a.new_label != a.original_label)
                assert data_reduction(con) == n_disagree
                assert f"discarded {n_disagree} of {len(queries)}" in caplog.text
                reductions.append(n_disagree)
                checked += 2
        criterion(8, f"{checked} runs checked; consensus discards "
                     f"{min(reductions)}-{max(reductions)} per run")

    def test_c09_one_nn_equivalence(self, datasets, comparators, criterion):
        d = datasets[0]
        params = comparators[0]
        rng = np.random.default_rng(99)
        queries = [d.noisy[i] for i in rng.choice(len(d.noisy), 100, replace=False)]
        frac = 1 / len(d.reference)
        assert top_count(frac, len(d.reference)) == 1
        out = relabel_comparator(params, queries, d.reference, RelabelConfig(top_fraction=frac))
        ref_emb = embed(params, feature_matrix(d.reference))
        q_emb = embed(params, feature_matrix(queries))
        ids = [r.id for r in d.reference]
        labels = verified_labels(d.reference)
        expected = [oracles.brute_force_1nn(e, ref_emb, ids, labels) for e in q_emb]
        matches = sum(o.new_label == y for o, y in zip(out, expected))
        criterion(9, f"{matches}/100 queries match brute-force 1-NN")
        assert matches == 100

    def test_c10_cli_determinism(self, tmp_path, monkeypatch, criterion):
        monkeypatch.chdir(tmp_path)
        small = ["--n_noisy", "120", "--n_reference", "40", "--feature_dim", "4"]
        fast = ["--epochs", "2", "--batch_size", "16", "--hidden_dims", "8"]
        (tmp_path / "spec.json").write_text(
            '{"case": "relabel_retrain", "scenario": "A", "seeds": [0, 1], "k": 2,'
            ' "relabel": {"include_uncertain": true}, "hidden_dims": [8],'
            ' "train": {"epochs": 2, "batch_size": 16},'
            ' "noisy": "data/noisy.csv", "reference": "data/reference.csv"}')
        data = ["--data", "data/reference.csv"]
        commands = [
            ["assign-labels", "--data", "data/noisy.csv", "--scenario", "C"],
            ["train-classifier", *data, *fast],
            ["train-siamese", *data, *fast],
            ["relabel", "--queries", "data/noisy.csv", "--references", "data/reference.csv",
             "--crossfit", "2", *fast],
            ["run", "--spec", "spec.json"],
            ["audit", "--outcomes", "OUT/outcomes.csv", "--truth", "data/ground_truth.csv"],
            ["report", "OUT/report.json", "--format", "markdown"],
        ]
        digests = []
        for rep in ("r1", "r2"):
            assert cli.main(["generate", "--seed", "5", "--out", "data", *small]) == 0
            files = {}
            for cmd in commands:
                out = tmp_path / rep / cmd[0]
                argv = [a.replace("OUT", str(tmp_path / rep / "run")) for a in cmd]
                assert cli.main([*argv, "--out", str(out)]) == 0, cmd
            for p in sorted((tmp_path / rep).rglob("*")) + sorted((tmp_path / "data").glob("*")):
                if p.is_file():
                    files[str(p.relative_to(tmp_path)).replace(rep, "R")] = \
                        hashlib.sha256(p.read_bytes()).hexdigest()
            digests.append(files)
        same = sum(digests[0].get(k) == v for k, v in digests[1].items())
        criterion(10, f"{same}/{len(digests[1])} output files byte-identical across reruns "
                      f"({len(commands) + 1} commands)")
        assert digests[0] == digests[1] and len(digests[1]) >= 15
