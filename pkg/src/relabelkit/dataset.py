"""Sample records, scenario label assignment and stratified folds.

A dataset is a list of :class:`SampleRecord`. Noisy records carry only
rater scores (1-5); reference records additionally carry a verified binary
label (0 = benign, 1 = malignant).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

BENIGN = 0
MALIGNANT = 1
MIN_SCORE = 1
MAX_SCORE = 5


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset input."""


@dataclass(frozen=True, eq=False)
class SampleRecord:
    id: str
    features: np.ndarray
    rater_scores: tuple[int, ...]
    verified_label: int | None = None

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64).reshape(-1)
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        scores = tuple(int(s) for s in self.rater_scores)
        object.__setattr__(self, "rater_scores", scores)
        if not self.id:
            raise DatasetError("record id must be non-empty")
        if not scores:
            raise DatasetError(f"record {self.id!r}: rater_scores is empty")
        for s in scores:
            if not MIN_SCORE <= s <= MAX_SCORE:
                raise DatasetError(
                    f"record {self.id!r}: rater score {s} out of range [1, 5]")
        if self.verified_label is not None and self.verified_label not in (0, 1):
            raise DatasetError(
                f"record {self.id!r}: verified_label must be 0 or 1, "
                f"got {self.verified_label!r}")

    @property
    def dim(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (self.id == other.id
                and self.rater_scores == other.rater_scores
                and self.verified_label == other.verified_label
                and np.array_equal(self.features, other.features))

    __hash__ = None


def average_score(record: SampleRecord | Sequence[int]) -> float:
    """Arithmetic mean of a record's rater scores."""
    scores = record.rater_scores if isinstance(record, SampleRecord) else record
    if len(scores) == 0:
        raise DatasetError("cannot average an empty list of rater scores")
    # math.fsum keeps the mean independent of score order
    return math.fsum(scores) / len(scores)


def feature_matrix(records: Sequence[SampleRecord]) -> np.ndarray:
    if not records:
        return np.zeros((0, 0))
    return np.stack([r.features for r in records])


def check_dimensions(records: Sequence[SampleRecord]) -> int | None:
    """Return the shared feature dimension, or raise on a mismatch."""
    dim = None
    for r in records:
        if dim is None:
            dim = r.dim
        elif r.dim != dim:
            raise DatasetError(
                f"dimension mismatch: record {r.id!r} has {r.dim} features, "
                f"expected {dim}")
    return dim


def _check_unique(records: Sequence[SampleRecord]):
    seen = set()
    for r in records:
        if r.id in seen:
            raise DatasetError(f"duplicate id {r.id!r}")
        seen.add(r.id)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _data_lines(text: str):
    """Yield (line_number, line) pairs, skipping '#' comment lines."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith("#"):
            continue
        yield lineno, line


def _parse_csv(text: str) -> list[SampleRecord]:
    lines = list(_data_lines(text))
    if not lines:
        return []
    header_lineno, header_line = lines[0]
    header = next(csv.reader([header_line]))
    if len(header) < 3 or header[0] != "id" or header[-2:] != ["scores", "label"]:
        raise DatasetError(
            f"line {header_lineno}: header must be 'id,f0,...,f{{D-1}},scores,label'")
    feat_cols = header[1:-2]
    for j, name in enumerate(feat_cols):
        if name != f"f{j}":
            raise DatasetError(
                f"line {header_lineno}: expected column 'f{j}', got {name!r}")

    records = []
    for lineno, line in lines[1:]:
        if not line.strip():
            continue
        row = next(csv.reader([line]))
        if len(row) != len(header):
            raise DatasetError(
                f"line {lineno}: expected {len(header)} fields, got {len(row)} "
                f"(dimension mismatch?)")
        rid = row[0]
        feats = []
        for name, value in zip(feat_cols, row[1:-2]):
            try:
                feats.append(float(value))
            except ValueError:
                raise DatasetError(
                    f"line {lineno}: field {name!r}: not a number: {value!r}") from None
        try:
            scores = [int(s) for s in row[-2].split(";") if s.strip() != ""]
        except ValueError:
            raise DatasetError(
                f"line {lineno}: field 'scores': expected ';'-separated integers, "
                f"got {row[-2]!r}") from None
        label_text = row[-1].strip()
        if label_text == "":
            label = None
        elif label_text in ("0", "1"):
            label = int(label_text)
        else:
            raise DatasetError(
                f"line {lineno}: field 'label': expected empty, 0 or 1, "
                f"got {label_text!r}")
        try:
            records.append(SampleRecord(rid, feats, scores, label))
        except DatasetError as exc:
            raise DatasetError(f"line {lineno}: {exc}") from None
    return records


def _parse_json(text: str) -> list[SampleRecord]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from None
    if isinstance(data, dict) and "records" in data:
        data = data["records"]
    if not isinstance(data, list):
        raise DatasetError("JSON dataset must be an array of objects")
    records = []
    for i, obj in enumerate(data):
        if not isinstance(obj, dict):
            raise DatasetError(f"record {i}: expected an object")
        for key in ("id", "features", "rater_scores"):
            if key not in obj:
                raise DatasetError(f"record {i}: missing field {key!r}")
        try:
            records.append(SampleRecord(
                str(obj["id"]), obj["features"], obj["rater_scores"],
                obj.get("verified_label")))
        except (TypeError, ValueError) as exc:
            raise DatasetError(f"record {i}: {exc}") from None
    return records


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is None:
        fmt = path.suffix.lstrip(".").lower()
    if fmt not in ("csv", "json"):
        raise DatasetError(f"unsupported dataset format {fmt!r} (use csv or json)")
    return fmt


def load_dataset(path, format: str | None = None) -> list[SampleRecord]:
    """Read a CSV or JSON dataset.

    Lines starting with ``#`` in CSV files are treated as comments (the CLI
    writes a seed header there).
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    text = path.read_text(encoding="utf-8")
    records = _parse_csv(text) if fmt == "csv" else _parse_json(text)
    check_dimensions(records)
    _check_unique(records)
    return records


def dumps_csv(records: Sequence[SampleRecord], header_comment: str | None = None) -> str:
    dim = check_dimensions(records) or 0
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", *[f"f{j}" for j in range(dim)], "scores", "label"])
    for r in records:
        label = "" if r.verified_label is None else str(r.verified_label)
        writer.writerow([r.id, *[repr(float(v)) for v in r.features],
                         ";".join(str(s) for s in r.rater_scores), label])
    return buf.getvalue()


def dumps_json(records: Sequence[SampleRecord]) -> str:
    out = []
    for r in records:
        obj = {"id": r.id, "features": [float(v) for v in r.features],
               "rater_scores": list(r.rater_scores)}
        if r.verified_label is not None:
            obj["verified_label"] = r.verified_label
        out.append(obj)
    return json.dumps(out, indent=1)


def save_dataset(records: Sequence[SampleRecord], path, format: str | None = None,
                 header_comment: str | None = None):
    path = Path(path)
    fmt = _infer_format(path, format)
    text = dumps_csv(records, header_comment) if fmt == "csv" else dumps_json(records)
    path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    lo_closed: bool = True
    hi_closed: bool = True

    def contains(self, x: float) -> bool:
        above = x >= self.lo if self.lo_closed else x > self.lo
        below = x <= self.hi if self.hi_closed else x < self.hi
        return above and below

    def is_empty(self) -> bool:
        if self.lo > self.hi:
            return True
        return self.lo == self.hi and not (self.lo_closed and self.hi_closed)

    def overlaps(self, other: "Interval") -> bool:
        if self.is_empty() or other.is_empty():
            return False
        lo, lo_closed = max((self.lo, self.lo_closed), (other.lo, other.lo_closed),
                            key=lambda t: (t[0], not t[1]))
        hi, hi_closed = min((self.hi, self.hi_closed), (other.hi, other.hi_closed),
                            key=lambda t: (t[0], t[1]))
        return not Interval(lo, hi, lo_closed, hi_closed).is_empty()

    def to_list(self) -> list:
        return [self.lo, self.hi, self.lo_closed, self.hi_closed]

    @classmethod
    def from_list(cls, values) -> "Interval":
        if len(values) == 2:
            return cls(float(values[0]), float(values[1]))
        if len(values) != 4:
            raise ValueError(f"interval must be [lo, hi, lo_closed, hi_closed], got {values!r}")
        return cls(float(values[0]), float(values[1]), bool(values[2]), bool(values[3]))

    def __str__(self):
        return f"{'[' if self.lo_closed else '('}{self.lo:g},{self.hi:g}{']' if self.hi_closed else ')'}"


@dataclass(frozen=True)
class Scenario:
    """Maps an average rater score to benign, malignant or excluded."""

    name: str
    benign: Interval
    malignant: Interval

    def __post_init__(self):
        if self.benign.overlaps(self.malignant):
            raise ValueError(
                f"scenario {self.name!r}: benign range {self.benign} overlaps "
                f"malignant range {self.malignant}")

    def classify(self, avg: float) -> int | None:
        if self.benign.contains(avg):
            return BENIGN
        if self.malignant.contains(avg):
            return MALIGNANT
        return None

    def to_dict(self) -> dict:
        return {"benign": self.benign.to_list(), "malignant": self.malignant.to_list()}


def _scn(name, b, m):
    return Scenario(name, Interval(*b), Interval(*m))


# Only A (1&2 vs 4&5) and E (score 3 benign) are pinned down; the rest are
# threshold placements moving from the benign to the malignant side.
DEFAULT_SCENARIOS: dict[str, Scenario] = {
    "A": _scn("A", (1, 2, True, True), (4, 5, True, True)),
    "B": _scn("B", (1, 2.5, True, False), (3.5, 5, False, True)),
    "C": _scn("C", (1, 2.5, True, False), (2.5, 5, True, True)),
    "D": _scn("D", (1, 3, True, False), (3, 5, True, True)),
    "E": _scn("E", (1, 3, True, True), (3, 5, False, True)),
    "F": _scn("F", (1, 3.5, True, False), (3.5, 5, True, True)),
}


def load_scenarios(path) -> dict[str, Scenario]:
    """Read a scenario table: ``{name: {benign: [lo,hi,lo_closed,hi_closed], malignant: [...]}}``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return scenarios_from_dict(data)


def scenarios_from_dict(data: Mapping) -> dict[str, Scenario]:
    out = {}
    for name, spec in data.items():
        try:
            out[name] = Scenario(name, Interval.from_list(spec["benign"]),
                                 Interval.from_list(spec["malignant"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"scenario {name!r}: malformed entry ({exc})") from None
    return out


def scenarios_to_json(scenarios: Mapping[str, Scenario]) -> str:
    return json.dumps({k: s.to_dict() for k, s in scenarios.items()}, indent=2)


def get_scenario(name_or_scenario, table: Mapping[str, Scenario] | None = None) -> Scenario:
    if isinstance(name_or_scenario, Scenario):
        return name_or_scenario
    table = DEFAULT_SCENARIOS if table is None else table
    try:
        return table[name_or_scenario]
    except KeyError:
        raise KeyError(
            f"unknown scenario {name_or_scenario!r}; known scenarios: "
            f"{', '.join(sorted(table))}") from None


@dataclass(frozen=True)
class LabelAssignment:
    labels: dict[str, int]
    excluded: list[str] = field(default_factory=list)


def assign_labels(records: Iterable[SampleRecord], scenario: Scenario) -> LabelAssignment:
    labels, excluded = {}, []
    for r in records:
        y = scenario.classify(average_score(r))
        if y is None:
            excluded.append(r.id)
        else:
            labels[r.id] = y
    return LabelAssignment(labels, excluded)


def verified_labels(records: Iterable[SampleRecord]) -> dict[str, int]:
    out = {}
    for r in records:
        if r.verified_label is None:
            raise DatasetError(f"record {r.id!r} has no verified label")
        out[r.id] = r.verified_label
    return out


def label_distribution(labels: Mapping[str, int | None]) -> tuple[int, int]:
    """Return ``(count_benign, count_malignant)``; missing labels are ignored."""
    values = [v for v in labels.values() if v is not None]
    n_mal = sum(1 for v in values if v == MALIGNANT)
    return len(values) - n_mal, n_mal


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignments: dict[str, int]

    def test_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f != fold]


def stratified_kfold(labels: Mapping[str, int], k: int, seed: int) -> FoldSplit:
    """Seeded stratified k-fold assignment.

    Each class is shuffled independently (after sorting ids, so input order
    does not matter) and dealt round-robin over the folds. The dealing
    offset carries over between classes to keep total fold sizes even.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    assignments = {}
    offset = 0
    for cls in sorted(set(labels.values())):
        ids = sorted(i for i, y in labels.items() if y == cls)
        if len(ids) < k:
            raise ValueError(
                f"class {cls} has {len(ids)} samples, fewer than k={k} folds")
        order = rng.permutation(len(ids))
        for pos, idx in enumerate(order):
            assignments[ids[idx]] = (offset + pos) % k
        offset = (offset + len(ids)) % k
    return FoldSplit(k, assignments)
