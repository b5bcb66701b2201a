"""Pairwise metric learning with a weight-tied (Siamese) embedding network."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .dataset import SampleRecord, feature_matrix, verified_labels
from .embednet import (NetConfig, NetParams, TrainConfig, TrainingLog, embed, fit,
                       init_params, mean_loss, split_validation)


@dataclass(frozen=True)
class PairSample:
    id_a: str
    id_b: str
    same_class: bool  # True (1) = both samples share a class

    def __post_init__(self):
        if self.id_a == self.id_b:
            raise ValueError(f"a pair needs two distinct samples, got {self.id_a!r} twice")


@dataclass(frozen=True)
class ContrastiveConfig:
    margin: float = 1.0
    pairs_per_epoch: int | None = None  # None: 4 x number of training samples
    positive_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be > 0")
        if not 0 <= self.positive_fraction <= 1:
            raise ValueError("positive_fraction must lie in [0, 1]")
        if self.pairs_per_epoch is not None and self.pairs_per_epoch < 1:
            raise ValueError("pairs_per_epoch must be >= 1")


def euclidean_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.sqrt(np.sum((u - v) ** 2)))


def contrastive_loss(distance: float, same_class: bool, margin: float = 1.0) -> float:
    """``d**2`` for a same-class pair, ``max(0, margin - d)**2`` otherwise."""
    if distance < 0:
        raise ValueError(f"distance must be non-negative, got {distance}")
    if not margin > 0:
        raise ValueError("margin must be > 0")
    if same_class:
        return distance * distance
    return max(0.0, margin - distance) ** 2


def sample_pairs(labels: Mapping[str, int], config: ContrastiveConfig,
                 rng: np.random.Generator | None = None) -> list[PairSample]:
    """Draw labelled pairs from a reference set.

    Same-class pairs alternate between the two classes; cross-class pairs take
    one sample of each class in random order. The list is shuffled before it
    is returned.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    by_class = {c: sorted(i for i, y in labels.items() if y == c) for c in (0, 1)}
    n_pairs = config.pairs_per_epoch or 4 * len(labels)
    n_pos = int(round(n_pairs * config.positive_fraction))
    n_neg = n_pairs - n_pos
    if n_pos > 0:
        for c, ids in by_class.items():
            if len(ids) < 2:
                raise ValueError(
                    f"class {c} has {len(ids)} samples; same-class pairs need at least 2")
    if n_neg > 0 and (not by_class[0] or not by_class[1]):
        raise ValueError("cross-class pairs need at least one sample of each class")

    pairs = []
    for k in range(n_pos):
        ids = by_class[k % 2]
        a, b = rng.choice(len(ids), size=2, replace=False)
        pairs.append(PairSample(ids[a], ids[b], True))
    for _ in range(n_neg):
        a = by_class[0][rng.integers(len(by_class[0]))]
        b = by_class[1][rng.integers(len(by_class[1]))]
        if rng.random() < 0.5:
            a, b = b, a
        pairs.append(PairSample(a, b, False))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def pairs_to_csv(pairs: Sequence[PairSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id_a", "id_b", "same_class"])
    for p in pairs:
        w.writerow([p.id_a, p.id_b, int(p.same_class)])
    return buf.getvalue()


def _pair_batch(pairs, index: Mapping[str, int], X: np.ndarray):
    a = np.array([index[p.id_a] for p in pairs])
    b = np.array([index[p.id_b] for p in pairs])
    same = np.array([p.same_class for p in pairs])
    return X[a], X[b], same


def train_siamese(net: NetConfig, references: Sequence[SampleRecord],
                  train_cfg: TrainConfig | None = None,
                  pair_cfg: ContrastiveConfig | None = None) -> tuple[NetParams, TrainingLog]:
    """Fit one shared embedding network with contrastive loss.

    Both members of a pair pass through the same parameter set, so weight
    tying needs no bookkeeping. A stratified validation slice of the
    references supplies a fixed set of validation pairs for checkpointing;
    training pairs are redrawn every epoch.
    """
    train_cfg = train_cfg or TrainConfig()
    pair_cfg = pair_cfg or ContrastiveConfig()
    if net.head != "embedding":
        net = replace(net, head="embedding")
    labels = verified_labels(references)
    ids = [r.id for r in references]
    X = feature_matrix(references)
    y = np.array([labels[i] for i in ids])
    index = {i: k for k, i in enumerate(ids)}

    rng = np.random.default_rng([train_cfg.seed, pair_cfg.seed])
    tr, va = split_validation(y, train_cfg.validation_fraction, rng)
    train_labels = {ids[k]: int(y[k]) for k in tr}
    val_labels = {ids[k]: int(y[k]) for k in va}
    n_epoch_pairs = pair_cfg.pairs_per_epoch or 4 * len(train_labels)
    epoch_cfg = replace(pair_cfg, pairs_per_epoch=n_epoch_pairs)

    val_batch = None
    if len(va) >= 4 and min(np.bincount(y[va], minlength=2)) >= 2:
        val_cfg = replace(pair_cfg, pairs_per_epoch=4 * len(va))
        val_batch = _pair_batch(sample_pairs(val_labels, val_cfg, rng), index, X)

    def epoch_batches(rng, epoch):
        Xa, Xb, same = _pair_batch(sample_pairs(train_labels, epoch_cfg, rng), index, X)
        bs = train_cfg.batch_size
        return [(Xa[i:i + bs], Xb[i:i + bs], same[i:i + bs]) for i in range(0, len(same), bs)]

    def train_loss(params, batches):
        if not batches:
            return None
        stacked = tuple(np.concatenate([b[j] for b in batches]) for j in range(3))
        return mean_loss(params, stacked, "contrastive", pair_cfg.margin)

    def val_loss(params):
        if val_batch is None:
            return None
        return mean_loss(params, val_batch, "contrastive", pair_cfg.margin)

    return fit(init_params(net), lr=train_cfg.learning_rate, epochs=train_cfg.epochs,
               optimizer=train_cfg.optimizer, rng=rng, epoch_batches=epoch_batches,
               loss_kind="contrastive", train_loss=train_loss, val_loss=val_loss,
               margin=pair_cfg.margin)


def similarity_scores(params: NetParams, query: SampleRecord,
                      references: Sequence[SampleRecord]) -> list[tuple[str, float]]:
    """References ranked by embedding distance to ``query`` (closest first).

    Equal distances are ordered by reference id.
    """
    if not references:
        raise ValueError("no reference samples to rank against")
    # one stacked pass so a query equal to a reference gets the same embedding
    E = embed(params, np.vstack([query.features, feature_matrix(references)]))
    return rank_by_distance(E[0], E[1:], [r.id for r in references])


def rank_by_distance(query_emb: np.ndarray, ref_emb: np.ndarray,
                     ref_ids: Sequence[str]) -> list[tuple[str, float]]:
    d = np.sqrt(np.sum((ref_emb - query_emb) ** 2, axis=1))
    return sorted(zip(ref_ids, (float(v) for v in d)), key=lambda t: (t[1], t[0]))


def class_distance_gap(params: NetParams, records: Sequence[SampleRecord]) -> tuple[float, float]:
    """Mean within-class and mean cross-class embedding distance."""
    E = embed(params, feature_matrix(records))
    y = np.array([r.verified_label for r in records])
    D = np.sqrt(np.maximum(np.sum((E[:, None, :] - E[None, :, :]) ** 2, axis=-1), 0.0))
    iu = np.triu_indices(len(records), k=1)
    same = (y[:, None] == y[None, :])[iu]
    dists = D[iu]
    return float(dists[same].mean()), float(dists[~same].mean())
