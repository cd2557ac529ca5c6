"""Domain types, dataset I/O and the masking rule shared by every module."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_CLASSES = 3
DEFAULT_VIEWS = ("PLAX", "PLAX", "PSAX", "PSAX")
FEATURE_DTYPE = np.float32


class DatasetError(ValueError):
    """Raised for malformed or inconsistent study data."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ViewSlot:
    view: str
    features: np.ndarray
    cost: float = 1.0

    def __post_init__(self):
        feats = np.array(self.features, dtype=FEATURE_DTYPE).reshape(-1)
        if not np.all(np.isfinite(feats)):
            raise DatasetError(f"non-finite feature values in {self.view} slot")
        cost = float(self.cost)
        if not cost >= 0.0:
            raise DatasetError(f"slot cost must be >= 0, got {self.cost!r}")
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "cost", cost)


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    label: int
    slots: tuple[ViewSlot, ...]
    matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))
        if self.label not in range(N_CLASSES):
            raise DatasetError(f"study {self.study_id}: label {self.label!r} not in {{0,1,2}}")
        if not self.slots:
            raise DatasetError(f"study {self.study_id}: no slots")
        dims = {s.features.shape[0] for s in self.slots}
        if len(dims) != 1:
            raise DatasetError(f"study {self.study_id}: slots have differing dimensions {sorted(dims)}")
        object.__setattr__(self, "matrix", _frozen(np.stack([s.features for s in self.slots])))

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def costs(self) -> np.ndarray:
        return np.array([s.cost for s in self.slots])

    @property
    def views(self) -> tuple[str, ...]:
        return tuple(s.view for s in self.slots)

    def slot_names(self) -> list[str]:
        return slot_names(self.views)


def slot_names(views: Sequence[str]) -> list[str]:
    """Display names such as ``PLAX_1, PLAX_2, PSAX_1`` from the view tags."""
    seen: Counter = Counter()
    names = []
    for v in views:
        seen[v] += 1
        names.append(f"{v}_{seen[v]}")
    return names


class AcquisitionState:
    """Acquisition mask plus the zero-filled feature matrix it induces.

    Immutable; row ``i`` of ``features`` is the slot-``i`` feature vector when
    ``mask[i]`` is set and exactly zero otherwise.
    """

    __slots__ = ("mask", "features", "steps_taken", "terminated")

    def __init__(self, mask: np.ndarray, features: np.ndarray, steps_taken: int,
                 terminated: bool = False):
        object.__setattr__(self, "mask", _frozen(np.array(mask, dtype=bool)))
        object.__setattr__(self, "features", _frozen(np.array(features)))
        object.__setattr__(self, "steps_taken", int(steps_taken))
        object.__setattr__(self, "terminated", bool(terminated))

    def __setattr__(self, name, value):
        raise AttributeError("AcquisitionState is immutable")

    def __eq__(self, other):
        if not isinstance(other, AcquisitionState):
            return NotImplemented
        return (
            self.steps_taken == other.steps_taken
            and self.terminated == other.terminated
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.features, other.features)
        )

    def __repr__(self):
        bits = "".join("1" if m else "0" for m in self.mask)
        return f"AcquisitionState(mask={bits}, steps_taken={self.steps_taken})"

    @property
    def n_slots(self) -> int:
        return self.mask.shape[0]

    @property
    def acquired(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.mask)]

    @property
    def mask_code(self) -> int:
        return mask_to_code(self.mask)


def mask_to_code(mask) -> int:
    return int(sum(1 << i for i, m in enumerate(mask) if m))


def code_to_mask(code: int, n_slots: int) -> np.ndarray:
    return np.array([(code >> i) & 1 for i in range(n_slots)], dtype=bool)


@dataclass(frozen=True)
class Action:
    """Either ``Terminate`` (slot is None) or ``Acquire(slot)``.

    ``index`` is the position in a length N+1 action-value vector; terminate
    sits at index 0 and ``Acquire(i)`` at ``i + 1``.
    """

    slot: int | None = None

    @classmethod
    def terminate(cls) -> "Action":
        return cls(None)

    @classmethod
    def acquire(cls, i: int) -> "Action":
        if i < 0:
            raise ValueError(f"slot index must be >= 0, got {i}")
        return cls(int(i))

    @classmethod
    def from_index(cls, k: int) -> "Action":
        return cls.terminate() if k == 0 else cls.acquire(k - 1)

    @property
    def is_terminate(self) -> bool:
        return self.slot is None

    @property
    def index(self) -> int:
        return 0 if self.slot is None else self.slot + 1

    def to_str(self) -> str:
        return "terminate" if self.slot is None else f"acquire:{self.slot}"

    @classmethod
    def from_str(cls, s: str) -> "Action":
        if s == "terminate":
            return cls.terminate()
        kind, _, idx = s.partition(":")
        if kind != "acquire" or not idx.isdigit():
            raise ValueError(f"unrecognised action {s!r}")
        return cls.acquire(int(idx))


def all_actions(n_slots: int) -> list[Action]:
    return [Action.from_index(k) for k in range(n_slots + 1)]


def apply_mask(study: StudyRecord, mask) -> AcquisitionState:
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != study.n_slots:
        raise ValueError(f"mask length {mask.shape[0]} != {study.n_slots} slots")
    feats = study.matrix * mask[:, None].astype(FEATURE_DTYPE)
    return AcquisitionState(mask, feats, int(mask.sum()))


# ---------------------------------------------------------------------------
# Dataset I/O


@dataclass
class DatasetSummary:
    n_studies: int
    n_slots: int
    dim: int
    class_counts: dict[int, int]
    views: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "n_studies": self.n_studies,
            "n_slots": self.n_slots,
            "dim": self.dim,
            "class_counts": {str(k): v for k, v in sorted(self.class_counts.items())},
            "views": list(self.views),
        }


def study_to_json(study: StudyRecord) -> dict:
    # float64 repr of each float32 value parses back to the identical float32
    return {
        "study_id": study.study_id,
        "label": int(study.label),
        "slots": [
            {"view": s.view, "cost": s.cost, "features": [float(x) for x in s.features]}
            for s in study.slots
        ],
    }


def study_from_json(obj: dict) -> StudyRecord:
    try:
        slots = tuple(
            ViewSlot(view=str(s["view"]), features=s["features"], cost=s.get("cost", 1.0))
            for s in obj["slots"]
        )
        label = obj["label"]
        if isinstance(label, bool) or not isinstance(label, int):
            raise DatasetError(f"study {obj.get('study_id')}: label must be an integer")
        return StudyRecord(study_id=str(obj["study_id"]), label=label, slots=slots)
    except KeyError as e:
        raise DatasetError(f"missing field {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, DatasetError):
            raise
        raise DatasetError(str(e)) from None


def write_dataset(records: Iterable[StudyRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(study_to_json(r), separators=(",", ":")))
            fh.write("\n")


def summarize(records: Sequence[StudyRecord]) -> DatasetSummary:
    counts = Counter(r.label for r in records)
    first = records[0]
    return DatasetSummary(
        n_studies=len(records),
        n_slots=first.n_slots,
        dim=first.dim,
        class_counts={c: counts.get(c, 0) for c in range(N_CLASSES)},
        views=first.views,
    )


def validate_records(records: Sequence[StudyRecord], expected_n: int | None = 4,
                     expected_d: int | None = None) -> None:
    if not records:
        raise DatasetError("dataset is empty")
    n = expected_n if expected_n is not None else records[0].n_slots
    d = expected_d if expected_d is not None else records[0].dim
    views = records[0].views
    for r in records:
        if r.n_slots != n:
            raise DatasetError(f"study {r.study_id}: has {r.n_slots} slots, expected {n}")
        if r.dim != d:
            raise DatasetError(f"study {r.study_id}: feature dimension {r.dim}, expected {d}")
        if r.views != views:
            raise DatasetError(f"study {r.study_id}: view order {r.views} differs from {views}")


def load_dataset(path, expected_n: int | None = 4, expected_d: int | None = None):
    """Read a JSON Lines study file; returns ``(records, summary)``.

    ``expected_d=None`` takes the dimension from the first study and then
    requires every other study to agree.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    records: list[StudyRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"{path}:{lineno}: expected a JSON object")
            try:
                records.append(study_from_json(obj))
            except DatasetError as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from None
    validate_records(records, expected_n, expected_d)
    return records, summarize(records)


def split_dataset(records: Sequence[StudyRecord], fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Study-level train/val/test partition.

    Validation and test get ``floor(fraction * n)`` studies; train keeps the rest.
    """
    if not records:
        raise DatasetError("cannot split an empty dataset")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(records)
    n_val = int(np.floor(fractions[1] * n + 1e-9))
    n_test = int(np.floor(fractions[2] * n + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    val_idx = order[:n_val]
    test_idx = order[n_val:n_val + n_test]
    train_idx = order[n_val + n_test:]
    pick = lambda idx: [records[i] for i in sorted(idx)]
    return pick(train_idx), pick(val_idx), pick(test_idx)


def stack_studies(studies: Sequence[StudyRecord]):
    """``(features (B,N,D), labels (B,))`` as float32 / int arrays."""
    feats = np.stack([s.matrix for s in studies])
    labels = np.array([s.label for s in studies], dtype=np.int64)
    return feats, labels
