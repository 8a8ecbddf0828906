"""Latent spaces, belief records, datasets and their line-delimited file format."""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Iterable, Sequence, Union

import numpy as np

FORMAT_VERSION = 1

#: Sums of supplied probabilities within this distance of one are renormalized.
PROB_SUM_TOLERANCE = 1e-6
SIMPLEX_TOLERANCE = 1e-9

KINDS = ("categorical", "ordinal", "answer_abstain", "product", "binary_decision")

ANSWER, ABSTAIN = 0, 1
INCLUDE, EXCLUDE = 0, 1


class ValidationError(ValueError):
    """Input data violates a documented precondition."""


class LengthMismatchError(ValidationError):
    pass


class CountSumError(ValidationError):
    pass


class EmptySampleError(ValidationError):
    pass


class NumericalError(ArithmeticError):
    """A numeric routine produced a non-finite value."""


Source = Union[bytes, str, os.PathLike, IO]


@dataclass(frozen=True)
class LatentSpace:
    """A finite task-induced latent space indexed by ``0..C-1``.

    ``values`` holds one scalar per class for ordinal spaces and one integer
    vector per class for product spaces. Product indices use mixed radix with
    the leftmost factor most significant.
    """

    kind: str
    labels: tuple[str, ...]
    values: tuple | None = None
    factor_sizes: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(str(s) for s in self.labels))
        if self.values is not None:
            vals = tuple(tuple(v) if isinstance(v, (list, tuple, np.ndarray)) else v for v in self.values)
            object.__setattr__(self, "values", vals)
        if self.factor_sizes is not None:
            object.__setattr__(self, "factor_sizes", tuple(int(s) for s in self.factor_sizes))

        if self.kind not in KINDS:
            raise ValidationError(f"unknown latent space kind {self.kind!r}")
        C = len(self.labels)
        if C < 2:
            raise ValidationError("a latent space needs at least 2 classes")
        if len(set(self.labels)) != C:
            raise ValidationError("class labels must be unique")
        if self.values is not None and len(self.values) != C:
            raise ValidationError(f"expected {C} values, got {len(self.values)}")

        if self.kind == "ordinal":
            if self.values is None:
                raise ValidationError("ordinal space requires numeric values")
            vals = [float(v) for v in self.values]
            if not all(math.isfinite(v) for v in vals):
                raise ValidationError("ordinal values must be finite")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValidationError("ordinal values must be strictly increasing")
            object.__setattr__(self, "values", tuple(vals))
        elif self.kind == "product":
            if not self.factor_sizes or len(self.factor_sizes) < 2:
                raise ValidationError("product space requires at least 2 factor sizes")
            if any(s < 2 for s in self.factor_sizes):
                raise ValidationError("every product factor needs at least 2 classes")
            if math.prod(self.factor_sizes) != C:
                raise ValidationError(
                    f"product of factor sizes {self.factor_sizes} does not equal C={C}"
                )
            if self.values is None:
                raise ValidationError("product space requires per-class value vectors")
            for i, v in enumerate(self.values):
                if not isinstance(v, tuple) or len(v) != len(self.factor_sizes):
                    raise ValidationError(f"value of class {i} must be a length-{len(self.factor_sizes)} vector")
            # values must factor as the mixed-radix decoding of the index
            axes = [dict() for _ in self.factor_sizes]
            for i, v in enumerate(self.values):
                for k, d in enumerate(decode_mixed_radix(i, self.factor_sizes)):
                    if axes[k].setdefault(d, v[k]) != v[k]:
                        raise ValidationError(f"class {i} value {v} is not the mixed-radix decoding of its index")
            for k, ax in enumerate(axes):
                vals = [float(ax[d]) for d in range(self.factor_sizes[k])]
                if any(b <= a for a, b in zip(vals, vals[1:])):
                    raise ValidationError(f"factor {k} values must be strictly increasing")
        elif self.kind == "answer_abstain":
            if C != 2:
                raise ValidationError("answer_abstain space must have exactly 2 classes (Answer, Abstain)")
        elif self.kind == "binary_decision":
            if C != 2:
                raise ValidationError("binary_decision space must have exactly 2 classes")

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    @property
    def has_numeric_values(self) -> bool:
        return self.kind in ("ordinal", "product")

    def digits(self, index: int) -> tuple[int, ...]:
        """Mixed-radix digits of ``index`` (product spaces only)."""
        if self.factor_sizes is None:
            raise ValidationError("digits() is defined for product spaces only")
        return decode_mixed_radix(index, self.factor_sizes)

    def index_of(self, digits: Sequence[int]) -> int:
        if self.factor_sizes is None:
            raise ValidationError("index_of() is defined for product spaces only")
        return encode_mixed_radix(digits, self.factor_sizes)

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind, "labels": list(self.labels)}
        if self.values is not None:
            out["values"] = [list(v) if isinstance(v, tuple) else v for v in self.values]
        if self.factor_sizes is not None:
            out["factor_sizes"] = list(self.factor_sizes)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "LatentSpace":
        if not isinstance(obj, dict) or "kind" not in obj:
            raise ValidationError("space must be an object with a 'kind' field")
        kind = obj["kind"]
        values = obj.get("values")
        labels = obj.get("labels")
        if labels is None and kind == "answer_abstain":
            labels = ["A", "abstain"]
        if labels is None and values is not None:
            labels = [_value_label(v) for v in values]
        if labels is None:
            raise ValidationError("space requires 'labels'")
        return cls(kind, tuple(labels), tuple(values) if values is not None else None,
                   tuple(obj["factor_sizes"]) if obj.get("factor_sizes") is not None else None)


def _value_label(v) -> str:
    if isinstance(v, (list, tuple)):
        return "(" + ",".join(_value_label(x) for x in v) + ")"
    if float(v) == int(v):
        return str(int(v))
    return repr(float(v))


def categorical_space(labels: Sequence[str]) -> LatentSpace:
    return LatentSpace("categorical", tuple(labels))


def ordinal_space(values: Sequence[float], labels: Sequence[str] | None = None) -> LatentSpace:
    if labels is None:
        labels = [_value_label(v) for v in values]
    return LatentSpace("ordinal", tuple(labels), tuple(values))


def answer_abstain_space() -> LatentSpace:
    return LatentSpace("answer_abstain", ("A", "abstain"))


def binary_decision_space() -> LatentSpace:
    return LatentSpace("binary_decision", ("include", "exclude"))


def decode_mixed_radix(index: int, sizes: Sequence[int]) -> tuple[int, ...]:
    total = math.prod(sizes)
    if not 0 <= index < total:
        raise ValidationError(f"index {index} out of range [0, {total})")
    digits = []
    for s in reversed(sizes):
        index, d = divmod(index, s)
        digits.append(d)
    return tuple(reversed(digits))


def encode_mixed_radix(digits: Sequence[int], sizes: Sequence[int]) -> int:
    if len(digits) != len(sizes):
        raise ValidationError("digit count does not match factor count")
    index = 0
    for d, s in zip(digits, sizes):
        if not 0 <= d < s:
            raise ValidationError(f"digit {d} out of range [0, {s})")
        index = index * s + int(d)
    return index


def product_space(factors: Sequence[LatentSpace]) -> LatentSpace:
    """Cartesian product of ordinal factors.

    Class ``i`` carries the vector of factor values obtained by mixed-radix
    decoding of ``i`` (leftmost factor most significant).

    >>> f = ordinal_space(range(5))
    >>> product_space([f, f]).values[7]
    (1.0, 2.0)
    """
    if len(factors) < 2:
        raise ValidationError("product_space needs at least 2 factors")
    for f in factors:
        if f.kind != "ordinal":
            raise ValidationError(f"product factors must be ordinal, got {f.kind!r}")
    sizes = tuple(f.n_classes for f in factors)
    labels, values = [], []
    for i in range(math.prod(sizes)):
        ds = decode_mixed_radix(i, sizes)
        labels.append("(" + ",".join(f.labels[d] for f, d in zip(factors, ds)) + ")")
        values.append(tuple(f.values[d] for f, d in zip(factors, ds)))
    return LatentSpace("product", tuple(labels), tuple(values), sizes)


@dataclass(frozen=True)
class SimplexPoint:
    """A categorical distribution over ``C`` classes."""

    probs: tuple[float, ...]

    def __post_init__(self):
        p = tuple(float(x) for x in self.probs)
        object.__setattr__(self, "probs", p)
        check_simplex(p)

    def __len__(self):
        return len(self.probs)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.probs, dtype=dtype or float)


def check_simplex(q, tol: float = SIMPLEX_TOLERANCE) -> np.ndarray:
    """Return ``q`` as a float array after checking simplex membership."""
    arr = np.asarray(q, dtype=float)
    if arr.ndim != 1 or arr.size < 1:
        raise ValidationError("a simplex point must be a non-empty vector")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("simplex point has non-finite entries")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValidationError("simplex entries must lie in [0, 1]")
    if abs(math.fsum(arr) - 1.0) > tol:
        raise ValidationError(f"simplex entries sum to {math.fsum(arr)!r}, not 1")
    return arr


def estimate_push_forward(counts: Sequence[int], M: int, C: int | None = None) -> SimplexPoint:
    """Empirical belief from per-class sample counts: ``counts / M``."""
    counts = list(counts)
    if C is not None and len(counts) != C:
        raise LengthMismatchError(f"expected {C} counts, got {len(counts)}")
    if M < 1:
        raise EmptySampleError("M must be at least 1")
    if any(int(c) != c or c < 0 for c in counts):
        raise ValidationError("counts must be nonnegative integers")
    if sum(counts) != M:
        raise CountSumError(f"counts sum to {sum(counts)}, expected M={M}")
    return SimplexPoint(tuple(c / M for c in counts))


@dataclass(frozen=True)
class PredictionRecord:
    """One query: its empirical latent belief and (optionally) its true class.

    Exactly one of ``counts`` or ``probs`` is set. ``label`` may be ``None`` for
    records that are only decoded, never scored.
    """

    id: str
    label: int | None
    counts: tuple[int, ...] | None = None
    probs: tuple[float, ...] | None = None

    def __post_init__(self):
        if (self.counts is None) == (self.probs is None):
            raise ValidationError("ambiguous belief: exactly one of counts/probs is required")
        if self.counts is not None:
            object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
            if any(c < 0 for c in self.counts):
                raise ValidationError("counts must be nonnegative")
            if sum(self.counts) < 1:
                raise EmptySampleError("counts must sum to M >= 1")
        else:
            object.__setattr__(self, "probs", _normalize_probs(self.probs))

    @property
    def n_classes(self) -> int:
        return len(self.counts if self.counts is not None else self.probs)

    def belief(self) -> np.ndarray:
        if self.counts is not None:
            c = np.asarray(self.counts, dtype=float)
            return c / c.sum()
        return np.asarray(self.probs, dtype=float)

    def to_dict(self) -> dict:
        out: dict = {"id": self.id}
        if self.counts is not None:
            out["counts"] = list(self.counts)
        else:
            out["probs"] = list(self.probs)
        if self.label is not None:
            out["label"] = self.label
        return out


def _normalize_probs(probs) -> tuple[float, ...]:
    p = [float(x) for x in probs]
    if not all(math.isfinite(x) and x >= 0.0 for x in p):
        raise ValidationError("probs must be finite and nonnegative")
    s = math.fsum(p)
    if abs(s - 1.0) > PROB_SUM_TOLERANCE:
        raise ValidationError(f"probs sum to {s!r}; deviation from 1 exceeds {PROB_SUM_TOLERANCE}")
    if s != 1.0:
        p = [x / s for x in p]
    return tuple(p)


@dataclass(frozen=True)
class Dataset:
    space: LatentSpace
    records: tuple[PredictionRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        C = self.space.n_classes
        for i, r in enumerate(self.records):
            if r.n_classes != C:
                raise LengthMismatchError(f"record {i} ({r.id!r}) has {r.n_classes} entries, expected {C}")
            if r.label is not None and not 0 <= r.label < C:
                raise ValidationError(f"record {i} ({r.id!r}) has label {r.label} outside [0, {C})")

    def __len__(self):
        return len(self.records)

    @property
    def n_classes(self) -> int:
        return self.space.n_classes

    @cached_property
    def beliefs(self) -> np.ndarray:
        """``(n, C)`` array of normalized beliefs (read-only)."""
        if not self.records:
            arr = np.zeros((0, self.n_classes))
        else:
            arr = np.vstack([r.belief() for r in self.records])
        arr.setflags(write=False)
        return arr

    @cached_property
    def labels(self) -> np.ndarray:
        if any(r.label is None for r in self.records):
            raise ValidationError("dataset contains unlabeled records")
        arr = np.fromiter((r.label for r in self.records), dtype=np.int64, count=len(self.records))
        arr.setflags(write=False)
        return arr

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(self.space, tuple(self.records[int(i)] for i in indices))

    def with_beliefs(self, probs: np.ndarray) -> "Dataset":
        """Copy of the dataset with every belief replaced by a row of ``probs``."""
        probs = np.asarray(probs, dtype=float)
        recs = tuple(
            PredictionRecord(r.id, r.label, probs=tuple(row)) for r, row in zip(self.records, probs)
        )
        return Dataset(self.space, recs)

    @classmethod
    def from_arrays(cls, space: LatentSpace, probs, labels, ids: Sequence[str] | None = None) -> "Dataset":
        probs = np.asarray(probs, dtype=float)
        labels = np.asarray(labels)
        if ids is None:
            width = len(str(max(len(probs) - 1, 0)))
            ids = [f"r{i:0{width}d}" for i in range(len(probs))]
        recs = tuple(
            PredictionRecord(str(i), int(y), probs=tuple(p)) for i, p, y in zip(ids, probs, labels)
        )
        return cls(space, recs)


def _read_bytes(source: Source) -> bytes:
    if isinstance(source, bytes):
        return source
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    data = source.read()
    return data.encode("utf-8") if isinstance(data, str) else data


def load_dataset(source: Source, space: LatentSpace, require_labels: bool = True) -> Dataset:
    """Parse a line-delimited JSON dataset.

    Each non-blank line is an object with ``id``, exactly one of ``counts`` or
    ``probs`` and an integer ``label``. Errors name the offending line number.
    """
    text = _read_bytes(source).decode("utf-8")
    C = space.n_classes
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        try:
            records.append(_record_from_obj(obj, C, require_labels))
        except ValidationError as exc:
            raise type(exc)(f"line {lineno}: {exc}") from None
    return Dataset(space, tuple(records))


def _record_from_obj(obj, C: int, require_labels: bool) -> PredictionRecord:
    if not isinstance(obj, dict):
        raise ValidationError("record must be a JSON object")
    if "counts" in obj and "probs" in obj:
        raise ValidationError("ambiguous belief: both counts and probs present")
    if "id" not in obj:
        raise ValidationError("missing field 'id'")
    label = obj.get("label")
    if label is None:
        if require_labels:
            raise ValidationError("missing field 'label'")
    elif isinstance(label, bool) or not isinstance(label, int):
        raise ValidationError(f"label must be an integer, got {label!r}")
    elif not 0 <= label < C:
        raise ValidationError(f"label {label} out of range [0, {C})")
    vec = obj.get("counts", obj.get("probs"))
    if not isinstance(vec, list):
        raise ValidationError("record needs a 'counts' or 'probs' array")
    if len(vec) != C:
        raise LengthMismatchError(f"belief has {len(vec)} entries, expected {C}")
    if "counts" in obj:
        if any(isinstance(c, bool) or not isinstance(c, int) for c in vec):
            raise ValidationError("counts must be integers")
        return PredictionRecord(str(obj["id"]), label, counts=tuple(vec))
    if any(isinstance(c, bool) or not isinstance(c, (int, float)) for c in vec):
        raise ValidationError("probs must be numbers")
    return PredictionRecord(str(obj["id"]), label, probs=tuple(vec))


def dump_dataset(dataset: Dataset) -> bytes:
    buf = io.StringIO()
    for r in dataset.records:
        buf.write(json.dumps(r.to_dict()))
        buf.write("\n")
    return buf.getvalue().encode("utf-8")


@dataclass(frozen=True)
class CandidateAnswer:
    answer: str
    included: int
    in_truth: bool


@dataclass(frozen=True)
class MultiAnswerRecord:
    """A set-valued query: per candidate answer, how many of ``M`` sampled
    responses included it and whether the reference set contains it."""

    id: str
    M: int
    candidates: tuple[CandidateAnswer, ...]


def binary_set_view(records: Sequence[MultiAnswerRecord]) -> Dataset:
    """Pool every (query, candidate) pair into one include/exclude dataset.

    Class 0 is *include*, so a candidate seen in 15 of 20 samples has belief
    ``(0.75, 0.25)``. Records follow query order, then candidate order.
    """
    out = []
    for rec in records:
        if rec.M < 1:
            raise EmptySampleError(f"query {rec.id!r}: M must be at least 1")
        for cand in rec.candidates:
            if not 0 <= cand.included <= rec.M:
                raise CountSumError(
                    f"query {rec.id!r}, answer {cand.answer!r}: inclusion count "
                    f"{cand.included} outside [0, M={rec.M}]"
                )
            out.append(
                PredictionRecord(
                    f"{rec.id}::{cand.answer}",
                    INCLUDE if cand.in_truth else EXCLUDE,
                    counts=(cand.included, rec.M - cand.included),
                )
            )
    return Dataset(binary_decision_space(), tuple(out))


def multi_answer_from_dict(obj: dict) -> MultiAnswerRecord:
    cands = tuple(
        CandidateAnswer(str(c["answer"]), int(c["included"]), bool(c["in_truth"]))
        for c in obj["candidates"]
    )
    return MultiAnswerRecord(str(obj["id"]), int(obj["M"]), cands)
