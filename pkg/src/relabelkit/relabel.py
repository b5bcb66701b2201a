"""Re-labeling strategies (annotator, comparator) and modes (substitute, consensus)."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import (SampleRecord, Scenario, assign_labels, average_score,
                      feature_matrix, stratified_kfold, verified_labels)
from .embednet import (NetConfig, NetParams, TrainConfig, embed, fine_tune, forward,
                       train)
from .siamese import ContrastiveConfig, rank_by_distance, train_siamese

log = logging.getLogger(__name__)

STRATEGIES = ("annotator", "comparator")
MODES = ("substitute", "consensus")
SCORE_BINS = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class RelabelConfig:
    strategy: str = "comparator"
    mode: str = "substitute"
    top_fraction: float = 0.2
    include_uncertain: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.top_fraction <= 1:
            raise ValueError("top_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class RelabelOutcome:
    id: str
    new_label: int | None  # None: discarded by consensus
    vote_mean: float
    original_label: int | None = None
    agreed: bool | None = None
    avg_score: float | None = None


def top_count(top_fraction: float, n_references: int) -> int:
    # round() first so 0.2 * 180 does not become 37 through float noise
    return max(1, math.ceil(round(top_fraction * n_references, 9)))


def select_queries(records: Sequence[SampleRecord], scenario: Scenario,
                   include_uncertain: bool) -> tuple[list[SampleRecord], dict[str, int]]:
    """Records to re-label, plus their scenario labels.

    Samples the scenario excludes are queries only when ``include_uncertain``
    is set; they have no original label.
    """
    assignment = assign_labels(records, scenario)
    keep = set(assignment.labels)
    if include_uncertain:
        keep.update(assignment.excluded)
    return [r for r in records if r.id in keep], dict(assignment.labels)


def _finalize(rid: str, label: int, vote: float, original: int | None,
              cfg: RelabelConfig, avg: float | None) -> RelabelOutcome:
    if original is None:
        if cfg.mode == "consensus" and not cfg.include_uncertain:
            raise ValueError(
                f"consensus mode needs an original label for query {rid!r} "
                f"(set include_uncertain to re-label unlabelled queries)")
        return RelabelOutcome(rid, label, vote, None, None, avg)
    agreed = label == original
    if cfg.mode == "consensus" and not agreed:
        return RelabelOutcome(rid, None, vote, original, False, avg)
    return RelabelOutcome(rid, label, vote, original, agreed, avg)


def _log_reduction(outcomes: list[RelabelOutcome], cfg: RelabelConfig) -> list[RelabelOutcome]:
    if cfg.mode == "consensus":
        log.info("consensus re-labeling discarded %d of %d queries",
                 data_reduction(outcomes), len(outcomes))
    return outcomes


def relabel_comparator(params: NetParams, queries: Sequence[SampleRecord],
                       references: Sequence[SampleRecord], cfg: RelabelConfig,
                       original_labels: Mapping[str, int] | None = None) -> list[RelabelOutcome]:
    """Vote each query's label from its most similar references.

    The top ``ceil(top_fraction * |references|)`` references by embedding
    distance vote; a mean above 0.5 means malignant, below means benign, and
    an exact tie takes the label of the single nearest reference.
    """
    if not references:
        raise ValueError("no reference samples to compare against")
    original_labels = original_labels or {}
    ref_labels = verified_labels(references)
    ref_ids = [r.id for r in references]
    n_top = top_count(cfg.top_fraction, len(references))
    if not queries:
        return []
    # one stacked pass keeps embeddings of identical inputs bitwise equal
    E = embed(params, np.vstack([feature_matrix(queries), feature_matrix(references)]))
    q_emb, ref_emb = E[:len(queries)], E[len(queries):]

    out = []
    for q, e in zip(queries, q_emb):
        ranking = rank_by_distance(e, ref_emb, ref_ids)
        votes = [ref_labels[rid] for rid, _ in ranking[:n_top]]
        vote = sum(votes) / len(votes)
        if vote > 0.5:
            label = 1
        elif vote < 0.5:
            label = 0
        else:
            label = votes[0]
        out.append(_finalize(q.id, label, vote, original_labels.get(q.id), cfg,
                             average_score(q)))
    return _log_reduction(out, cfg)


def relabel_annotator(params: NetParams, queries: Sequence[SampleRecord],
                      cfg: RelabelConfig,
                      original_labels: Mapping[str, int] | None = None) -> list[RelabelOutcome]:
    """Label each query with a trained classifier (probability 0.5 is benign)."""
    if params.config.head != "sigmoid_classifier":
        raise ValueError("annotator re-labeling needs a sigmoid_classifier network")
    original_labels = original_labels or {}
    if not queries:
        return []
    probs = forward(params, feature_matrix(queries))
    return _log_reduction([_finalize(q.id, int(p > 0.5), float(p), original_labels.get(q.id),
                                     cfg, average_score(q))
                           for q, p in zip(queries, probs)], cfg)


def train_relabeler(references: Sequence[SampleRecord], cfg: RelabelConfig, *,
                    net_cfg: NetConfig, train_cfg: TrainConfig,
                    pair_cfg: ContrastiveConfig | None = None,
                    pretrained: NetParams | None = None) -> NetParams:
    """Fit the label machine for ``cfg.strategy`` on a labelled reference set.

    For the annotator, ``pretrained`` switches from training from scratch to
    fine-tuning an existing classifier.
    """
    if cfg.strategy == "comparator":
        params, _ = train_siamese(net_cfg, references, train_cfg, pair_cfg)
        return params
    labels = verified_labels(references)
    X = feature_matrix(references)
    y = np.array([labels[r.id] for r in references])
    if pretrained is not None:
        params, _ = fine_tune(pretrained, train_cfg, X, y)
    else:
        params, _ = train(train_cfg, net_cfg, X, y)
    return params


def apply_relabeler(params: NetParams, queries, references, cfg: RelabelConfig,
                    original_labels=None) -> list[RelabelOutcome]:
    if cfg.strategy == "comparator":
        return relabel_comparator(params, queries, references, cfg, original_labels)
    return relabel_annotator(params, queries, cfg, original_labels)


def crossfit_relabel(references: Sequence[SampleRecord], queries: Sequence[SampleRecord],
                     k: int, cfg: RelabelConfig, *, net_cfg: NetConfig,
                     train_cfg: TrainConfig, pair_cfg: ContrastiveConfig | None = None,
                     original_labels: Mapping[str, int] | None = None,
                     pretrained: NetParams | None = None,
                     seed: int = 0) -> list[RelabelOutcome]:
    """Re-label every query exactly once with k cross-fitted label machines.

    References are split into k stratified folds. Queries are shuffled and
    dealt round-robin into k partitions; partition f is re-labeled by the
    machine trained on all reference folds except f. Outcomes come back in
    query order.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    split = stratified_kfold(verified_labels(references), k, seed)
    order = np.random.default_rng(seed).permutation(len(queries))
    partition = np.empty(len(queries), dtype=int)
    partition[order] = np.arange(len(queries)) % k

    by_id = {}
    for f in range(k):
        part = [q for q, p in zip(queries, partition) if p == f]
        if not part:
            continue
        train_ids = set(split.train_ids(f))
        fold_refs = [r for r in references if r.id in train_ids]
        params = train_relabeler(fold_refs, cfg, net_cfg=net_cfg, train_cfg=train_cfg,
                                 pair_cfg=pair_cfg, pretrained=pretrained)
        for o in apply_relabeler(params, part, fold_refs, cfg, original_labels):
            by_id[o.id] = o
    return [by_id[q.id] for q in queries]


def relabeled_labels(outcomes: Sequence[RelabelOutcome]) -> dict[str, int]:
    """Retained labels only (consensus discards drop out)."""
    return {o.id: o.new_label for o in outcomes if o.new_label is not None}


def data_reduction(outcomes: Sequence[RelabelOutcome]) -> int:
    return sum(1 for o in outcomes if o.new_label is None)


def score_bin(avg: float) -> int:
    """Nearest integer score, halves rounding up (2.5 -> 3)."""
    return int(math.floor(avg + 0.5))


def relabel_statistics(outcomes: Sequence[RelabelOutcome],
                       avg_scores: Mapping[str, float] | None = None) -> dict[int, dict[str, int]]:
    """Per-score-bin counts of re-labeled benign, malignant and discarded samples."""
    hist = {b: {"benign": 0, "malignant": 0, "discarded": 0} for b in SCORE_BINS}
    for o in outcomes:
        avg = avg_scores[o.id] if avg_scores is not None else o.avg_score
        if avg is None:
            raise ValueError(f"outcome {o.id!r} has no average score")
        key = {None: "discarded", 0: "benign", 1: "malignant"}[o.new_label]
        hist[score_bin(avg)][key] += 1
    return hist


def histogram_to_json(hist: Mapping[int, Mapping[str, int]], extra: dict | None = None) -> str:
    doc = dict(extra or {})
    doc["bins"] = {str(b): dict(hist[b]) for b in sorted(hist)}
    return json.dumps(doc, indent=2, sort_keys=True)


_CSV_FIELDS = ["id", "new_label", "vote_mean", "original_label", "agreed", "avg_score"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def outcomes_to_csv(outcomes: Sequence[RelabelOutcome], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_CSV_FIELDS)
    for o in outcomes:
        w.writerow([_fmt(getattr(o, f)) for f in _CSV_FIELDS])
    return buf.getvalue()


def outcomes_from_csv(path) -> list[RelabelOutcome]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
             if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))

    def opt(v, conv):
        return None if v in ("", None) else conv(v)

    return [RelabelOutcome(
        id=r["id"],
        new_label=opt(r["new_label"], int),
        vote_mean=float(r["vote_mean"]),
        original_label=opt(r.get("original_label"), int),
        agreed=opt(r.get("agreed"), lambda s: s == "1"),
        avg_score=opt(r.get("avg_score"), float)) for r in rows]
