"""Confusion-matrix metrics and the cross-validated experiment harness.

Malignant is the positive class throughout. Metrics whose denominator is zero
are reported as ``None`` (rendered ``n/a``), never as 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from .dataset import (SampleRecord, Scenario, assign_labels, feature_matrix, get_scenario,
                      stratified_kfold, verified_labels)
from .embednet import NetConfig, NetParams, TrainConfig, fine_tune, predict_proba, train
from .relabel import (RelabelConfig, RelabelOutcome, apply_relabeler, data_reduction,
                      relabeled_labels, select_queries, train_relabeler)
from .siamese import ContrastiveConfig

METRIC_NAMES = ("sensitivity", "specificity", "precision", "precision_b", "accuracy", "f1")
METRIC_TITLES = ("Sensitivity", "Specificity", "Precision", "Precision_b", "Accuracy", "F1")

CASES = ("case1_scenario_train", "case2_reference_cv", "case3_cross_test",
         "case3_fine_tune", "relabel_retrain")
DECISION_THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion-matrix counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    def swapped(self) -> "ConfusionMatrix":
        """The same predictions scored with benign as the positive class."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "ConfusionMatrix":
        t = np.asarray(y_true, dtype=int)
        p = np.asarray(y_pred, dtype=int)
        if t.shape != p.shape:
            raise ValueError("y_true and y_pred differ in length")
        return cls(tp=int(np.sum((t == 1) & (p == 1))), fp=int(np.sum((t == 0) & (p == 1))),
                   tn=int(np.sum((t == 0) & (p == 0))), fn=int(np.sum((t == 1) & (p == 0))))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MetricsReport:
    sensitivity: float | None
    specificity: float | None
    precision: float | None
    precision_b: float | None
    accuracy: float | None
    f1: float | None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(**{k: d.get(k) for k in METRIC_NAMES})


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    if cm.total == 0:
        raise ValueError("cannot compute metrics from an empty confusion matrix")
    sens = _ratio(cm.tp, cm.tp + cm.fn)
    prec = _ratio(cm.tp, cm.tp + cm.fp)
    if sens is None or prec is None or sens + prec == 0:
        f1 = None
    else:
        f1 = 2 * prec * sens / (prec + sens)
    return MetricsReport(
        sensitivity=sens,
        specificity=_ratio(cm.tn, cm.tn + cm.fp),
        precision=prec,
        precision_b=_ratio(cm.tn, cm.tn + cm.fn),
        accuracy=(cm.tp + cm.tn) / cm.total,
        f1=f1,
    )


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    """One protocol run over a list of seeds.

    ``annotator_source`` selects the annotator for ``relabel_retrain`` with the
    annotator strategy: ``"case2"`` trains it from scratch on the reference
    folds, ``"case3"`` pre-trains on scenario labels and fine-tunes on them.
    """

    case: str
    scenario: str | None = None
    relabel: RelabelConfig | None = None
    seeds: tuple[int, ...] = tuple(range(10))
    k: int = 5
    hidden_dims: tuple[int, ...] = (32, 16)
    embed_dim: int = 8
    activation: str = "relu"
    train: TrainConfig = field(default_factory=TrainConfig)
    pairs: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    annotator_source: str = "case2"
    name: str | None = None

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"unknown case {self.case!r}; expected one of {CASES}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.case in ("case1_scenario_train", "case3_cross_test", "case3_fine_tune") \
                and self.scenario is None:
            raise ValueError(f"{self.case} requires a scenario")
        if self.case == "relabel_retrain" and self.relabel is None:
            raise ValueError("relabel_retrain requires a relabel config")
        if self.annotator_source not in ("case2", "case3"):
            raise ValueError("annotator_source must be 'case2' or 'case3'")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        parts = [self.case]
        if self.scenario:
            parts.append(f"scenario {self.scenario}")
        if self.relabel:
            r = self.relabel
            parts.append(f"{r.strategy}/{r.mode}"
                         f"{'/+uncertain' if r.include_uncertain else ''}")
        return " ".join(parts)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["seeds"] = list(self.seeds)
        d["hidden_dims"] = list(self.hidden_dims)
        d["train"] = asdict(self.train)
        d["pairs"] = asdict(self.pairs)
        d["relabel"] = None if self.relabel is None else asdict(self.relabel)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentSpec":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment fields: {sorted(unknown)}")
        if d.get("relabel") is not None:
            d["relabel"] = RelabelConfig(**d["relabel"])
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        if "pairs" in d:
            d["pairs"] = ContrastiveConfig(**d["pairs"])
        return cls(**d)


@dataclass
class FoldResult:
    seed: int
    fold: int | None
    cm: ConfusionMatrix
    n_train: int
    n_test: int
    n_discarded: int | None = None

    @property
    def metrics(self) -> MetricsReport:
        return compute_metrics(self.cm)

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "fold": self.fold, "cm": self.cm.to_dict(),
             "metrics": self.metrics.to_dict(), "n_train": self.n_train,
             "n_test": self.n_test}
        if self.n_discarded is not None:
            d["n_discarded"] = self.n_discarded
        return d


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    entries: list[FoldResult]
    outcomes: dict[int, list[RelabelOutcome]] = field(default_factory=dict)

    @property
    def pooled(self) -> ConfusionMatrix:
        total = ConfusionMatrix()
        for e in self.entries:
            total = total + e.cm
        return total

    def pooled_for_seed(self, seed: int) -> ConfusionMatrix:
        total = ConfusionMatrix()
        for e in self.entries:
            if e.seed == seed:
                total = total + e.cm
        return total

    def per_seed_metrics(self) -> list[MetricsReport]:
        return [compute_metrics(self.pooled_for_seed(s)) for s in self.spec.seeds]

    def aggregate(self) -> dict:
        per = [e.metrics for e in self.entries]
        mean, std = {}, {}
        for name in METRIC_NAMES:
            vals = [getattr(m, name) for m in per if getattr(m, name) is not None]
            mean[name] = float(np.mean(vals)) if vals else None
            std[name] = float(np.std(vals)) if vals else None
        return {"micro": compute_metrics(self.pooled).to_dict(),
                "micro_cm": self.pooled.to_dict(),
                "macro_mean": mean, "macro_std": std}

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(),
                "per_seed": [e.to_dict() for e in self.entries],
                "aggregate": self.aggregate()}


def _net(spec: ExperimentSpec, input_dim: int, seed: int, head: str) -> NetConfig:
    return NetConfig(input_dim=input_dim, hidden_dims=spec.hidden_dims,
                     embed_dim=spec.embed_dim, activation=spec.activation,
                     head=head, seed=seed)


def _fit_classifier(records: Sequence[SampleRecord], labels: Mapping[str, int],
                    spec: ExperimentSpec, seed: int) -> NetParams:
    X = feature_matrix(records)
    y = np.array([labels[r.id] for r in records])
    params, _ = train(replace(spec.train, seed=seed),
                      _net(spec, X.shape[1], seed, "sigmoid_classifier"), X, y)
    return params


def _score(params: NetParams, records: Sequence[SampleRecord],
           labels: Mapping[str, int]) -> ConfusionMatrix:
    probs = predict_proba(params, feature_matrix(records))
    y_true = [labels[r.id] for r in records]
    return ConfusionMatrix.from_predictions(y_true, (probs > DECISION_THRESHOLD).astype(int))


def _assert_disjoint(train_ids, test_ids):
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise AssertionError(f"training and test sets share ids: {sorted(overlap)[:5]}")


def _subset(records, ids) -> list[SampleRecord]:
    keep = set(ids)
    return [r for r in records if r.id in keep]


def run_experiment(spec: ExperimentSpec, noisy: Sequence[SampleRecord],
                   reference: Sequence[SampleRecord],
                   scenarios: Mapping[str, Scenario] | None = None) -> ExperimentResult:
    """Run one protocol for every seed in ``spec.seeds``.

    ``noisy`` plays the rater-scored training pool and ``reference`` the
    verified benchmark. Each entry of the result is one (seed, fold) test.
    """
    scenario = None
    if spec.scenario is not None or spec.case == "relabel_retrain":
        scenario = get_scenario(spec.scenario or "A", scenarios)
    result = ExperimentResult(spec, [])
    ref_labels = verified_labels(reference) if reference else {}

    for seed in spec.seeds:
        train_cfg = replace(spec.train, seed=seed)

        if spec.case == "case1_scenario_train":
            labels = assign_labels(noisy, scenario).labels
            split = stratified_kfold(labels, spec.k, seed)
            for f in range(spec.k):
                tr, te = split.train_ids(f), split.test_ids(f)
                _assert_disjoint(tr, te)
                params = _fit_classifier(_subset(noisy, tr), labels, spec, seed)
                cm = _score(params, _subset(noisy, te), labels)
                result.entries.append(FoldResult(seed, f, cm, len(tr), len(te)))

        elif spec.case == "case2_reference_cv":
            split = stratified_kfold(ref_labels, spec.k, seed)
            for f in range(spec.k):
                tr, te = split.train_ids(f), split.test_ids(f)
                _assert_disjoint(tr, te)
                params = _fit_classifier(_subset(reference, tr), ref_labels, spec, seed)
                cm = _score(params, _subset(reference, te), ref_labels)
                result.entries.append(FoldResult(seed, f, cm, len(tr), len(te)))

        elif spec.case == "case3_cross_test":
            labels = assign_labels(noisy, scenario).labels
            _assert_disjoint(labels, ref_labels)
            params = _fit_classifier(_subset(noisy, labels), labels, spec, seed)
            cm = _score(params, reference, ref_labels)
            result.entries.append(FoldResult(seed, None, cm, len(labels), len(reference)))

        elif spec.case == "case3_fine_tune":
            labels = assign_labels(noisy, scenario).labels
            pre = _fit_classifier(_subset(noisy, labels), labels, spec, seed)
            split = stratified_kfold(ref_labels, spec.k, seed)
            for f in range(spec.k):
                tr, te = split.train_ids(f), split.test_ids(f)
                _assert_disjoint(tr, te)
                _assert_disjoint(labels, te)
                fold_refs = _subset(reference, tr)
                params, _ = fine_tune(pre, train_cfg, feature_matrix(fold_refs),
                                      np.array([ref_labels[r.id] for r in fold_refs]))
                cm = _score(params, _subset(reference, te), ref_labels)
                result.entries.append(FoldResult(seed, f, cm, len(tr), len(te)))

        else:
            _relabel_retrain(spec, scenario, noisy, reference, ref_labels, seed, train_cfg,
                             result)
    return result


def _relabel_retrain(spec, scenario, noisy, reference, ref_labels, seed, train_cfg, result):
    cfg = spec.relabel
    queries, original = select_queries(noisy, scenario, cfg.include_uncertain)
    pretrained = None
    if cfg.strategy == "annotator" and spec.annotator_source == "case3":
        pretrained = _fit_classifier(_subset(noisy, original), original, spec, seed)
    pair_cfg = replace(spec.pairs, seed=seed)
    split = stratified_kfold(ref_labels, spec.k, seed)
    fold_outcomes = []
    for f in range(spec.k):
        tr, te = split.train_ids(f), split.test_ids(f)
        _assert_disjoint(tr, te)
        fold_refs = _subset(reference, tr)
        head = "embedding" if cfg.strategy == "comparator" else "sigmoid_classifier"
        machine = train_relabeler(fold_refs, cfg, net_cfg=_net(spec, fold_refs[0].dim, seed, head),
                                  train_cfg=train_cfg, pair_cfg=pair_cfg, pretrained=pretrained)
        outcomes = apply_relabeler(machine, queries, fold_refs, cfg, original)
        new_labels = relabeled_labels(outcomes)
        _assert_disjoint(new_labels, te)
        params = _fit_classifier(_subset(noisy, new_labels), new_labels, spec, seed)
        cm = _score(params, _subset(reference, te), ref_labels)
        result.entries.append(FoldResult(seed, f, cm, len(new_labels), len(te),
                                         data_reduction(outcomes)))
        fold_outcomes.append(outcomes)
    result.outcomes[seed] = fold_outcomes[0]


def scenario_sweep(noisy: Sequence[SampleRecord], reference: Sequence[SampleRecord],
                   scenarios: Sequence[str], seeds: Sequence[int],
                   case: str = "case3_cross_test",
                   scenario_table: Mapping[str, Scenario] | None = None,
                   **spec_kwargs) -> list[ExperimentResult]:
    """One aggregate per scenario, all run with the same seeds."""
    if not scenarios:
        raise ValueError("scenario_sweep needs at least one scenario")
    return [run_experiment(ExperimentSpec(case=case, scenario=name, seeds=tuple(seeds),
                                          **spec_kwargs),
                           noisy, reference, scenario_table)
            for name in scenarios]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _fmt_metric(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def render_report(reports: Sequence, format: str = "markdown") -> str:
    """Serialise experiment results as JSON or as a Markdown metrics grid.

    ``reports`` may hold :class:`ExperimentResult` objects or their
    ``to_dict()`` form.
    """
    docs = [r.to_dict() if isinstance(r, ExperimentResult) else r for r in reports]
    if format == "json":
        return json.dumps(docs, indent=2, sort_keys=True) + "\n"
    if format != "markdown":
        raise ValueError(f"unknown report format {format!r}")
    lines = ["# Re-labeling evaluation", "",
             "| Row | Method | " + " | ".join(METRIC_TITLES) + " |",
             "|---|---|" + "---|" * len(METRIC_TITLES)]
    for i, doc in enumerate(docs, start=1):
        micro = doc["aggregate"]["micro"]
        spec = doc.get("spec", {})
        method = spec.get("name") or _spec_label(spec)
        cells = [_fmt_metric(micro.get(n)) for n in METRIC_NAMES]
        lines.append(f"| {i} | {method} | " + " | ".join(cells) + " |")
    lines.append("")
    return "\n".join(lines)


def _spec_label(spec: Mapping) -> str:
    try:
        return ExperimentSpec.from_dict(spec).label
    except (TypeError, ValueError):
        return str(spec.get("case", "?"))


def parse_markdown_report(text: str) -> list[dict[str, float | None]]:
    """Read the metric grid back out of :func:`render_report` markdown."""
    rows = []
    for line in text.splitlines():
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        if len(cells) != 2 + len(METRIC_NAMES) or not cells[0].isdigit():
            continue
        rows.append({n: (None if c == "n/a" else float(c))
                     for n, c in zip(METRIC_NAMES, cells[2:])})
    return rows


def mean_metric(reports: Sequence[MetricsReport], name: str) -> float:
    vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
    return float(np.mean(vals)) if vals else math.nan
