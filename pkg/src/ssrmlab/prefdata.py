"""Preference records, JSONL ingestion, template rendering and splitting.

A record is a prompt with two candidate responses.  Labeled records carry
``"A"`` or ``"B"`` naming the preferred response.  Files are JSON Lines,
one object per line::

    {"id": "0", "prompt": "...", "response_a": "...", "response_b": "...",
     "label": "A", "category": "chat"}

``label``, ``category`` and ``id`` are optional.  A leading line of the form
``{"_meta": {...}}`` is treated as a provenance header and kept on the
dataset rather than parsed as a record.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

CONTEXT_MARKER = "[CONTEXT]"
RESPONSE_A_MARKER = "[RESPONSE A]"
RESPONSE_B_MARKER = "[RESPONSE B]"

META_KEY = "_meta"


class Label(str, enum.Enum):
    A = "A"
    B = "B"

    def flipped(self) -> "Label":
        return Label.B if self is Label.A else Label.A


class LabelSource(str, enum.Enum):
    GROUND_TRUTH = "ground_truth"
    PSEUDO = "pseudo"


class DatasetError(ValueError):
    """Raised for malformed dataset files or inconsistent pools."""


@dataclass(frozen=True)
class PreferenceTriplet:
    prompt: str
    response_a: str
    response_b: str
    id: str = ""
    category: str | None = None

    def swapped(self) -> "PreferenceTriplet":
        return replace(self, response_a=self.response_b, response_b=self.response_a)


@dataclass(frozen=True)
class LabeledExample:
    triplet: PreferenceTriplet
    label: Label
    label_source: LabelSource = LabelSource.GROUND_TRUTH
    confidence: float | None = None

    def __post_init__(self):
        if not isinstance(self.label, Label):
            object.__setattr__(self, "label", Label(self.label))
        if (self.confidence is not None) != (self.label_source is LabelSource.PSEUDO):
            raise ValueError("confidence must be set exactly when label_source is PSEUDO")
        if self.confidence is not None and not 0.5 <= self.confidence <= 1.0:
            raise ValueError(f"pseudo-label confidence {self.confidence} outside [0.5, 1]")

    @property
    def id(self) -> str:
        return self.triplet.id


@dataclass(frozen=True)
class PreferenceDataset:
    """Labeled pool D_l and unlabeled pool D_u.

    ``order`` optionally records the file order of all ids so that a loaded
    dataset can be written back unchanged; ``meta`` holds a provenance header.
    """

    labeled: tuple[LabeledExample, ...] = ()
    unlabeled: tuple[PreferenceTriplet, ...] = ()
    order: tuple[str, ...] | None = None
    meta: dict[str, Any] | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "labeled", tuple(self.labeled))
        object.__setattr__(self, "unlabeled", tuple(self.unlabeled))
        labeled_ids = [ex.id for ex in self.labeled]
        unlabeled_ids = [t.id for t in self.unlabeled]
        if len(set(labeled_ids)) != len(labeled_ids):
            raise DatasetError("duplicate id in labeled pool")
        if len(set(unlabeled_ids)) != len(unlabeled_ids):
            raise DatasetError("duplicate id in unlabeled pool")
        both = set(labeled_ids) & set(unlabeled_ids)
        if both:
            raise DatasetError(f"ids present in both pools: {sorted(both)[:5]}")

    @property
    def m(self) -> int:
        return len(self.labeled)

    @property
    def n(self) -> int:
        return len(self.unlabeled)


@dataclass(frozen=True)
class SplitSpec:
    labeled_fraction: Fraction | float = Fraction(1, 4)
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        frac = Fraction(self.labeled_fraction).limit_denominator(10**9) if isinstance(
            self.labeled_fraction, float) else Fraction(self.labeled_fraction)
        if not 0 < frac <= 1:
            raise ValueError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        object.__setattr__(self, "labeled_fraction", frac)


def format_template(t: PreferenceTriplet) -> str:
    """Render the instruction template ``[CONTEXT]x[RESPONSE A]a1[RESPONSE B]a2``."""
    return f"{CONTEXT_MARKER}{t.prompt}{RESPONSE_A_MARKER}{t.response_a}{RESPONSE_B_MARKER}{t.response_b}"


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------

_REQUIRED = ("prompt", "response_a", "response_b")


def _record_from_obj(obj: Any, line_no: int, default_id: str) -> PreferenceTriplet | LabeledExample:
    if not isinstance(obj, dict):
        raise DatasetError(f"line {line_no}: expected a JSON object")
    for key in _REQUIRED:
        if key not in obj:
            raise DatasetError(f"line {line_no}: missing field {key!r}")
        if not isinstance(obj[key], str):
            raise DatasetError(f"line {line_no}: field {key!r} must be a string")
    rid = obj.get("id")
    rid = default_id if rid is None else str(rid)
    category = obj.get("category")
    triplet = PreferenceTriplet(obj["prompt"], obj["response_a"], obj["response_b"],
                                id=rid, category=category)
    if "label" not in obj or obj["label"] is None:
        return triplet
    label = obj["label"]
    if label not in ("A", "B"):
        raise DatasetError(f"record {rid!r} (line {line_no}): label must be 'A' or 'B', got {label!r}")
    source = LabelSource(obj.get("label_source", LabelSource.GROUND_TRUTH.value))
    return LabeledExample(triplet, Label(label), source, obj.get("confidence"))


def read_records(path: str | Path) -> tuple[list[PreferenceTriplet | LabeledExample], dict | None]:
    """Parse a JSONL file into records in file order plus its optional header."""
    records: list[PreferenceTriplet | LabeledExample] = []
    meta = None
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {line_no + 1}: malformed JSON ({e.msg})") from e
            if line_no == 0 and isinstance(obj, dict) and set(obj) == {META_KEY}:
                meta = obj[META_KEY]
                continue
            records.append(_record_from_obj(obj, line_no + 1, str(len(records))))
    return records, meta


def load_jsonl(path: str | Path) -> PreferenceDataset:
    """Load a dataset; labeled records go to D_l and the rest to D_u.

    Missing ids become the record's zero-based position in the file.
    """
    records, meta = read_records(path)
    labeled = [r for r in records if isinstance(r, LabeledExample)]
    unlabeled = [r for r in records if isinstance(r, PreferenceTriplet)]
    order = tuple(r.id for r in records)
    return PreferenceDataset(labeled, unlabeled, order=order, meta=meta)


def record_to_obj(record: PreferenceTriplet | LabeledExample) -> dict[str, Any]:
    t = record.triplet if isinstance(record, LabeledExample) else record
    obj: dict[str, Any] = {"id": t.id, "prompt": t.prompt,
                           "response_a": t.response_a, "response_b": t.response_b}
    if isinstance(record, LabeledExample):
        obj["label"] = record.label.value
        if record.label_source is LabelSource.PSEUDO:
            obj["label_source"] = record.label_source.value
            obj["confidence"] = record.confidence
    if t.category is not None:
        obj["category"] = t.category
    return obj


def dumps_record(record: PreferenceTriplet | LabeledExample) -> str:
    return json.dumps(record_to_obj(record), ensure_ascii=False)


def write_records(path: str | Path, records: Iterable[PreferenceTriplet | LabeledExample],
                  meta: dict[str, Any] | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if meta is not None:
            f.write(json.dumps({META_KEY: meta}, sort_keys=True) + "\n")
        for r in records:
            f.write(dumps_record(r) + "\n")


def dataset_records(ds: PreferenceDataset) -> list[PreferenceTriplet | LabeledExample]:
    """All records of ``ds`` in file order when known, else labeled first."""
    if ds.order is None:
        return [*ds.labeled, *ds.unlabeled]
    by_id: dict[str, PreferenceTriplet | LabeledExample] = {ex.id: ex for ex in ds.labeled}
    by_id.update((t.id, t) for t in ds.unlabeled)
    return [by_id[i] for i in ds.order]


def dump_jsonl(ds: PreferenceDataset, path: str | Path, meta: dict[str, Any] | None = None) -> None:
    write_records(path, dataset_records(ds), meta if meta is not None else ds.meta)


# ---------------------------------------------------------------------------
# Preparation
# ---------------------------------------------------------------------------

def swap_example(ex: LabeledExample) -> LabeledExample:
    """Exchange the two responses and flip the label; the preference is unchanged."""
    return replace(ex, triplet=ex.triplet.swapped(), label=ex.label.flipped())


def randomize_order(examples: Sequence[LabeledExample], seed: int) -> list[LabeledExample]:
    """Swap each example's response order independently with probability 1/2."""
    rng = np.random.default_rng(seed)
    flips = rng.random(len(examples)) < 0.5
    return [swap_example(ex) if flip else ex for ex, flip in zip(examples, flips)]


def split(examples: Sequence[LabeledExample], spec: SplitSpec) -> PreferenceDataset:
    """Keep labels on floor(fraction * N) examples and strip the rest into D_u."""
    n_total = len(examples)
    m = math.floor(spec.labeled_fraction * n_total)
    idx = np.arange(n_total)
    if spec.shuffle:
        idx = np.random.default_rng(spec.seed).permutation(n_total)
    ordered = [examples[i] for i in idx]
    labeled = ordered[:m]
    unlabeled = [ex.triplet for ex in ordered[m:]]
    return PreferenceDataset(labeled, unlabeled)
