"""Task losses materialized as dense ``C x C`` tables.

Rows index the true class, columns the predicted class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ABSTAIN, ANSWER, LatentSpace, ValidationError

LOSS_KINDS = ("l1", "exact_match", "bas", "separable_l1")
DEFAULT_BAS_THRESHOLD = 0.25


@dataclass(frozen=True)
class LossSpec:
    kind: str
    t: float | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValidationError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.kind == "bas":
            t = DEFAULT_BAS_THRESHOLD if self.t is None else float(self.t)
            _check_threshold(t)
            object.__setattr__(self, "t", t)
        elif self.t is not None:
            raise ValidationError(f"threshold t only applies to bas, not {self.kind!r}")

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.t is not None:
            out["t"] = self.t
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "LossSpec":
        if not isinstance(obj, dict) or "kind" not in obj:
            raise ValidationError("loss must be an object with a 'kind' field")
        return cls(obj["kind"], obj.get("t"))


@dataclass(frozen=True, eq=False)
class LossMatrix:
    """``entries[a, b]`` is the loss of predicting ``b`` when ``a`` is true."""

    entries: np.ndarray
    kind: str = "custom"
    t: float | None = None

    def __post_init__(self):
        arr = np.array(self.entries, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 2:
            raise ValidationError(f"loss matrix must be square with C >= 2, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("loss matrix entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def n_classes(self) -> int:
        return self.entries.shape[0]

    def __getitem__(self, ab):
        return self.entries[ab]


def _check_threshold(t: float) -> None:
    if not (0.0 <= t < 1.0):
        raise ValidationError(f"BAS threshold t must lie in [0, 1), got {t!r}")


def bas_loss(true_class: int, predicted_class: int, t: float = DEFAULT_BAS_THRESHOLD) -> float:
    """Answer-or-abstain loss with risk tolerance ``t``.

    Abstaining costs nothing, a correct answer earns -1 and answering when
    abstention was right costs ``t / (1 - t)``.
    """
    _check_threshold(t)
    for c in (true_class, predicted_class):
        if c not in (ANSWER, ABSTAIN):
            raise ValidationError(f"BAS classes are {ANSWER} (answer) and {ABSTAIN} (abstain), got {c!r}")
    if predicted_class == ABSTAIN:
        return 0.0
    if true_class == ANSWER:
        return -1.0
    return t / (1.0 - t)


def build_loss_matrix(space: LatentSpace, spec: LossSpec) -> LossMatrix:
    C = space.n_classes
    if spec.kind == "exact_match":
        return LossMatrix(np.ones((C, C)) - np.eye(C), "exact_match")
    if spec.kind == "l1":
        if space.kind != "ordinal":
            raise ValidationError(f"l1 loss needs an ordinal space, got {space.kind!r}")
        v = np.asarray(space.values, dtype=float)
        return LossMatrix(np.abs(v[:, None] - v[None, :]), "l1")
    if spec.kind == "separable_l1":
        if space.kind != "product":
            raise ValidationError(f"separable_l1 loss needs a product space, got {space.kind!r}")
        v = np.asarray(space.values, dtype=float)
        return LossMatrix(np.abs(v[:, None, :] - v[None, :, :]).sum(axis=2), "separable_l1")
    # bas
    if space.kind != "answer_abstain":
        raise ValidationError(f"bas loss needs an answer_abstain space, got {space.kind!r}")
    entries = [[bas_loss(a, b, spec.t) for b in range(2)] for a in range(2)]
    return LossMatrix(np.array(entries), "bas", spec.t)
