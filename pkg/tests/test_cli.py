"""End-to-end command-line behaviour, exit codes and output files."""

import hashlib
import json

import pytest

from relabelkit import cli
from relabelkit.dataset import label_distribution, load_dataset
from relabelkit.relabel import outcomes_from_csv, relabeled_labels
from relabelkit.synth import load_truth

SMALL = ["--n_noisy", "120", "--n_reference", "40", "--feature_dim", "4"]
FAST = ["--epochs", "2", "--batch_size", "16", "--hidden_dims", "8"]


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "out"))
    return tmp_path


@pytest.fixture
def generated(workdir):
    assert cli.main(["generate", "--seed", "1", *SMALL]) == 0
    return workdir / "out"


def _write_spec(path, **fields):
    base = {"noisy": "out/noisy.csv", "reference": "out/reference.csv", "seeds": [0], "k": 5,
            "train": {"epochs": 2, "batch_size": 16}, "hidden_dims": [8]}
    base.update(fields)
    path.write_text(json.dumps(base))
    return path


class TestGenerate:
    def test_writes_dataset_files(self, generated):
        names = sorted(p.name for p in generated.iterdir())
        assert {"noisy.csv", "reference.csv", "ground_truth.csv"} <= set(names)
        assert (generated / "noisy.csv").read_text().startswith("# seed=1\n")
        assert len(load_dataset(generated / "noisy.csv")) == 120

    def test_rerun_byte_identical(self, workdir):
        for d in ("a", "b"):
            assert cli.main(["generate", "--seed", "4", "--out", d, *SMALL]) == 0
        for name in ("noisy.csv", "reference.csv", "ground_truth.csv", "generator_config.json"):
            assert _digest(workdir / "a" / name) == _digest(workdir / "b" / name)

    def test_missing_config_names_path(self, workdir, capsys):
        assert cli.main(["generate", "--config", "nowhere.json"]) == cli.EXIT_USAGE
        assert "nowhere.json" in capsys.readouterr().err

    def test_flag_overrides_config(self, workdir):
        (workdir / "g.json").write_text(json.dumps({"n_noisy": 30, "n_reference": 10,
                                                    "feature_dim": 3, "seed": 2}))
        assert cli.main(["generate", "--config", "g.json", "--n_noisy", "12"]) == 0
        noisy = load_dataset(workdir / "out" / "noisy.csv")
        assert len(noisy) == 12 and noisy[0].dim == 3
        assert (workdir / "out" / "noisy.csv").read_text().startswith("# seed=2\n")

    def test_invalid_value_is_config_error(self, workdir):
        assert cli.main(["generate", "--n_reference", "7"]) == cli.EXIT_USAGE

    def test_unknown_flag_is_usage_error(self, workdir):
        with pytest.raises(SystemExit) as exc:
            cli.main(["generate", "--colour", "red"])
        assert exc.value.code == cli.EXIT_USAGE


class TestAssignLabels:
    def test_counts(self, generated, capsys):
        assert cli.main(["assign-labels", "--data", "out/noisy.csv", "--scenario", "E"]) == 0
        rows = (generated / "labels.csv").read_text().splitlines()
        assert rows[0] == "# scenario=E" and len(rows) == 2 + 120
        assert "excluded" in capsys.readouterr().out

    def test_invalid_scenario_lists_known(self, generated, capsys):
        code = cli.main(["assign-labels", "--data", "out/noisy.csv", "--scenario", "Q"])
        assert code == cli.EXIT_USAGE
        assert "A, B, C, D, E, F" in capsys.readouterr().err

    def test_missing_data_file(self, workdir):
        assert cli.main(["assign-labels", "--data", "nope.csv"]) == cli.EXIT_DATA


class TestTraining:
    def test_classifier_then_fine_tune(self, generated):
        assert cli.main(["train-classifier", "--data", "out/reference.csv", *FAST]) == 0
        log = (generated / "classifier_log.jsonl").read_text().splitlines()
        assert [json.loads(line)["epoch"] for line in log] == [0, 1, 2]
        assert cli.main(["train-classifier", "--data", "out/reference.csv",
                         "--init", "out/classifier.json", "--fine_tune_epochs", "1",
                         "--output", "tuned"]) == 0
        assert json.loads((generated / "tuned.json").read_text())["seed"] == 0

    def test_classifier_on_scenario_labels(self, generated):
        assert cli.main(["assign-labels", "--data", "out/noisy.csv", "--scenario", "A"]) == 0
        assert cli.main(["train-classifier", "--data", "out/noisy.csv",
                         "--labels", "out/labels.csv", *FAST]) == 0

    def test_siamese_writes_pairs(self, generated):
        assert cli.main(["train-siamese", "--data", "out/reference.csv", *FAST]) == 0
        pairs = (generated / "siamese_pairs.csv").read_text().splitlines()
        assert pairs[0] == "# seed=0" and pairs[1] == "id_a,id_b,same_class"
        assert len(pairs) == 2 + 4 * 40

    def test_numeric_failure_exit_code(self, generated):
        code = cli.main(["train-classifier", "--data", "out/reference.csv", "--epochs", "3",
                         "--optimizer", "sgd", "--learning_rate", "1e300"])
        assert code == cli.EXIT_NUMERIC


class TestRelabelAndAudit:
    def test_relabel_with_params_then_audit(self, generated, capsys):
        assert cli.main(["train-siamese", "--data", "out/reference.csv", *FAST]) == 0
        assert cli.main(["relabel", "--queries", "out/noisy.csv", "--references",
                         "out/reference.csv", "--params", "out/siamese.json",
                         "--include_uncertain", "true"]) == 0
        outcomes = outcomes_from_csv(generated / "outcomes.csv")
        assert len(outcomes) == 120
        hist = json.loads((generated / "histogram.json").read_text())
        assert sum(sum(b.values()) for b in hist["bins"].values()) == 120
        capsys.readouterr()
        assert cli.main(["audit", "--outcomes", "out/outcomes.csv",
                         "--truth", "out/ground_truth.csv"]) == 0
        audit = json.loads((generated / "audit.json").read_text())
        nb, nm = label_distribution(relabeled_labels(outcomes))
        assert (audit["count_benign"], audit["count_malignant"]) == (nb, nm)

    def test_crossfit_consensus(self, generated):
        assert cli.main(["relabel", "--queries", "out/noisy.csv", "--references",
                         "out/reference.csv", "--crossfit", "2", "--mode", "consensus",
                         *FAST]) == 0
        outcomes = outcomes_from_csv(generated / "outcomes.csv")
        assert all(o.new_label in (None, o.original_label) for o in outcomes)

    def test_audit_perfect_outcomes(self, generated):
        truth = load_truth(generated / "ground_truth.csv")
        rows = ["id,new_label,vote_mean,original_label,agreed,avg_score"]
        rows += [f"{i},{y},{float(y)},,,3.0" for i, y in sorted(truth.items())]
        (generated / "perfect.csv").write_text("\n".join(rows) + "\n")
        assert cli.main(["audit", "--outcomes", "out/perfect.csv",
                         "--truth", "out/ground_truth.csv"]) == 0
        assert json.loads((generated / "audit.json").read_text())["relabel_accuracy"] == 1.0

    def test_audit_disjoint_ids(self, generated):
        (generated / "alien.csv").write_text(
            "id,new_label,vote_mean,original_label,agreed,avg_score\nX1,1,1.0,,,4.0\n")
        assert cli.main(["audit", "--outcomes", "out/alien.csv",
                         "--truth", "out/ground_truth.csv"]) == cli.EXIT_DATA


class TestRun:
    def test_case2_report(self, generated):
        spec = _write_spec(generated.parent / "spec.json", case="case2_reference_cv")
        assert cli.main(["run", "--spec", str(spec)]) == 0
        doc = json.loads((generated / "report.json").read_text())
        assert len(doc[0]["per_seed"]) == 5
        assert "| Row | Method |" in (generated / "report.md").read_text()

    def test_relabel_retrain_outputs(self, generated):
        spec = _write_spec(generated.parent / "spec.json", case="relabel_retrain",
                           scenario="A", k=2,
                           relabel={"strategy": "comparator", "include_uncertain": True})
        assert cli.main(["run", "--spec", str(spec)]) == 0
        for name in ("report.json", "report.md", "outcomes.csv", "histogram.json"):
            assert (generated / name).is_file()

    def test_sweep(self, generated):
        spec = _write_spec(generated.parent / "spec.json", case="case3_cross_test",
                           sweep=["A", "F"])
        assert cli.main(["run", "--spec", str(spec)]) == 0
        assert len(json.loads((generated / "report.json").read_text())) == 2

    def test_invalid_scenario(self, generated, capsys):
        spec = _write_spec(generated.parent / "spec.json", case="case3_cross_test",
                           scenario="Z")
        assert cli.main(["run", "--spec", str(spec)]) == cli.EXIT_USAGE
        assert "known scenarios" in capsys.readouterr().err

    def test_missing_dataset(self, generated):
        spec = _write_spec(generated.parent / "spec.json", case="case2_reference_cv",
                           reference="out/missing.csv")
        assert cli.main(["run", "--spec", str(spec)]) == cli.EXIT_DATA
        assert not (generated / "report.json").exists()

    def test_partial_outputs_removed(self, generated, monkeypatch):
        spec = _write_spec(generated.parent / "spec.json", case="case2_reference_cv")
        real = cli.render_report

        def failing(reports, format="markdown"):
            if format == "markdown":
                raise ValueError("disk full")
            return real(reports, format)

        monkeypatch.setattr(cli, "render_report", failing)
        assert cli.main(["run", "--spec", str(spec)]) == cli.EXIT_DATA
        assert not (generated / "report.json").exists()

    def test_inputs_not_mutated(self, generated):
        before = {p.name: _digest(p) for p in generated.iterdir()}
        spec = _write_spec(generated.parent / "spec.json", case="case3_cross_test",
                           scenario="A")
        assert cli.main(["run", "--spec", str(spec)]) == 0
        assert all(_digest(generated / n) == d for n, d in before.items())


class TestReport:
    def test_renders_markdown(self, generated, capsys):
        spec = _write_spec(generated.parent / "spec.json", case="case2_reference_cv")
        assert cli.main(["run", "--spec", str(spec)]) == 0
        capsys.readouterr()
        assert cli.main(["report", "out/report.json"]) == 0
        assert capsys.readouterr().out == (generated / "report.md").read_text().split("\n", 1)[1]
