"""Synthetic noisy/reference data with biased multi-rater scores.

Features come from two isotropic unit-variance Gaussian clusters whose means
sit ``class_separation`` apart along a random unit direction. Every rater
sees the same latent margin (signed distance to the midpoint hyperplane,
scaled so that points three standard deviations beyond a class mean reach
+/-1) and scores it as::

    clamp(round(3 + gain * margin + rater_bias + noise), 1, 5)

The noisy set carries rater scores only; the reference set is balanced and
carries the true class as its verified label.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .dataset import SampleRecord

# Cluster-membership prior of the noisy set: 174 / 922, the malignant share
# of the re-labeled benchmark.
DEFAULT_NOISY_MALIGNANT_FRACTION = 0.19


@dataclass(frozen=True)
class GeneratorConfig:
    n_noisy: int = 922
    n_reference: int = 180
    feature_dim: int = 16
    class_separation: float = 2.5
    rater_count: int = 4
    rater_bias: float = 0.8
    rater_noise_std: float = 0.7
    uncertain_band: float | None = None  # None: 1 / gain, the plain linear mapping
    gain: float = 2.0
    noisy_malignant_fraction: float = DEFAULT_NOISY_MALIGNANT_FRACTION
    reference_balanced: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_noisy < 0 or self.n_reference < 0:
            raise ValueError("dataset sizes must be non-negative")
        if self.reference_balanced and self.n_reference % 2:
            raise ValueError("a balanced reference set needs an even n_reference")
        if self.feature_dim < 1 or self.rater_count < 1:
            raise ValueError("feature_dim and rater_count must be >= 1")
        if not (self.class_separation > 0 and self.rater_noise_std > 0 and self.gain > 0):
            raise ValueError("class_separation, rater_noise_std and gain must be > 0")
        if self.uncertain_band is not None and not 0 < self.uncertain_band < 2:
            raise ValueError("uncertain_band must lie in (0, 2)")
        if not 0 <= self.noisy_malignant_fraction <= 1:
            raise ValueError("noisy_malignant_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SyntheticData:
    noisy: list[SampleRecord]
    reference: list[SampleRecord]
    truth: dict[str, int]  # every id in both sets -> true class


def latent_margin(t: np.ndarray, config: GeneratorConfig) -> np.ndarray:
    scale = config.class_separation / 2 + 3.0
    return np.clip(t / scale, -1.0, 1.0)


def _band_warp(m: np.ndarray, config: GeneratorConfig) -> np.ndarray:
    """Piecewise-linear remap so |m| < band/2 scores exactly 3 before bias/noise.

    With the default band (1/gain) this is the identity.
    """
    band = config.uncertain_band if config.uncertain_band is not None else 1.0 / config.gain
    half, knot = band / 2, 0.5 / config.gain
    a = np.abs(m)
    inner = a * knot / half
    outer = knot + (a - half) * (1.0 - knot) / (1.0 - half)
    return np.sign(m) * np.where(a <= half, inner, outer)


def rate(margins: np.ndarray, config: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """Integer rater scores, shape ``(n, rater_count)``."""
    base = 3.0 + config.gain * _band_warp(margins, config) + config.rater_bias
    noise = rng.normal(0.0, config.rater_noise_std, size=(len(margins), config.rater_count))
    raw = np.floor(base[:, None] + noise + 0.5)
    return np.clip(raw, 1, 5).astype(int)


def _draw(n: int, n_mal: int, prefix: str, with_label: bool, direction: np.ndarray,
          config: GeneratorConfig, rng: np.random.Generator):
    y = np.zeros(n, dtype=int)
    y[:n_mal] = 1
    y = y[rng.permutation(n)]
    centers = np.outer(y - 0.5, direction) * config.class_separation
    X = centers + rng.normal(size=(n, config.feature_dim))
    scores = rate(latent_margin(X @ direction, config), config, rng)
    width = max(4, len(str(max(n - 1, 0))))
    records = [SampleRecord(f"{prefix}{i:0{width}d}", X[i], tuple(scores[i]),
                            int(y[i]) if with_label else None)
               for i in range(n)]
    return records, {r.id: int(label) for r, label in zip(records, y)}


def generate(config: GeneratorConfig) -> SyntheticData:
    rng = np.random.default_rng(config.seed)
    direction = rng.normal(size=config.feature_dim)
    direction /= np.linalg.norm(direction)

    n_mal_noisy = int(round(config.noisy_malignant_fraction * config.n_noisy))
    noisy, truth_noisy = _draw(config.n_noisy, n_mal_noisy, "N", False, direction, config, rng)
    if config.reference_balanced:
        n_mal_ref = config.n_reference // 2
    else:
        n_mal_ref = int(rng.binomial(config.n_reference, 0.5))
    reference, truth_ref = _draw(config.n_reference, n_mal_ref, "R", True, direction,
                                 config, rng)
    return SyntheticData(noisy, reference, {**truth_noisy, **truth_ref})


def oracle_accuracy(labels: Mapping[str, int], ground_truth: Mapping[str, int]) -> float:
    """Fraction of ``labels`` that agree with the hidden ground truth."""
    if not labels:
        raise ValueError("no labels to score")
    unknown = [i for i in labels if i not in ground_truth]
    if unknown:
        raise KeyError(f"ids missing from ground truth: {unknown[:5]}")
    hits = sum(1 for i, y in labels.items() if ground_truth[i] == y)
    return hits / len(labels)


def truth_to_csv(truth: Mapping[str, int], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "true_label"])
    for i in sorted(truth):
        w.writerow([i, truth[i]])
    return buf.getvalue()


def load_truth(path) -> dict[str, int]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
             if not ln.startswith("#")]
    out = {}
    for lineno, row in enumerate(csv.DictReader(lines), start=2):
        try:
            out[row["id"]] = int(row["true_label"])
        except (KeyError, TypeError, ValueError):
            raise ValueError(f"ground-truth row {lineno}: expected 'id,true_label'") from None
    return out
