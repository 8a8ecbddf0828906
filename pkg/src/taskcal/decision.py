"""Bayes risk, minimum-Bayes-risk decoding and simple baseline decision rules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ABSTAIN, ANSWER, Dataset, ValidationError, check_simplex, estimate_push_forward
from .losses import LossMatrix

#: Risks within this relative distance of the minimum count as ties.
TIE_TOLERANCE = 1e-12

RULES = ("mbr", "argmax_policy", "bas_threshold")


@dataclass(frozen=True)
class DecisionRuleOutput:
    actions: tuple[int, ...]
    rule: str

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValidationError(f"unknown decision rule {self.rule!r}")
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))

    def __len__(self):
        return len(self.actions)


def _as_loss(loss) -> np.ndarray:
    return loss.entries if isinstance(loss, LossMatrix) else np.asarray(loss, dtype=float)


def _tie_tol(L: np.ndarray) -> float:
    return TIE_TOLERANCE * (1.0 + float(np.max(np.abs(L))))


def bayes_risk(action: int, q, loss) -> float:
    """Expected loss of ``action`` when the true class is drawn from ``q``."""
    L = _as_loss(loss)
    q = check_simplex(q)
    if q.shape[0] != L.shape[0]:
        raise ValidationError(f"belief has {q.shape[0]} classes, loss has {L.shape[0]}")
    if not 0 <= action < L.shape[1]:
        raise ValidationError(f"action {action} out of range [0, {L.shape[1]})")
    return float(q @ L[:, action])


def bayes_risks(Q, loss) -> np.ndarray:
    """``(n, C)`` matrix of Bayes risks, one row per belief in ``Q``."""
    L = _as_loss(loss)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.shape[1] != L.shape[0]:
        raise ValidationError(f"beliefs have {Q.shape[1]} classes, loss has {L.shape[0]}")
    return Q @ L


def _argmin_first(R: np.ndarray, tol: float) -> np.ndarray:
    if R.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    best = R.min(axis=1, keepdims=True)
    return np.argmax(R <= best + tol, axis=1).astype(np.int64)


def mbr_decode_batch(Q, loss) -> np.ndarray:
    L = _as_loss(loss)
    return _argmin_first(bayes_risks(Q, L), _tie_tol(L))


def mbr_decode(q, loss) -> int:
    """Action with minimal Bayes risk under ``q``; ties go to the smallest index."""
    q = check_simplex(q)
    return int(mbr_decode_batch(q[None, :], loss)[0])


def argmax_policy(q) -> int:
    q = check_simplex(q)
    return int(np.argmax(q))


def argmax_policy_batch(Q) -> np.ndarray:
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(Q, axis=1).astype(np.int64)


def bas_threshold_decide(p_answer: float, t: float) -> int:
    """Answer iff the probability of answering correctly is at least ``t``."""
    if not 0.0 <= p_answer <= 1.0:
        raise ValidationError(f"p_answer must lie in [0, 1], got {p_answer!r}")
    if not 0.0 <= t < 1.0:
        raise ValidationError(f"t must lie in [0, 1), got {t!r}")
    return ANSWER if p_answer >= t else ABSTAIN


def decode_pipeline(counts, M: int, calibrator, loss) -> int:
    """Push-forward estimate, then calibration map, then MBR."""
    q = estimate_push_forward(counts, M, C=_as_loss(loss).shape[0])
    return mbr_decode(calibrator.apply(q), loss)


def decide(dataset: Dataset, loss, rule: str = "mbr", calibrator=None) -> DecisionRuleOutput:
    Q = dataset.beliefs
    if calibrator is not None:
        Q = calibrator.apply(Q)
    if rule == "mbr":
        actions = mbr_decode_batch(Q, loss)
    elif rule == "argmax_policy":
        actions = argmax_policy_batch(Q)
    elif rule == "bas_threshold":
        if not isinstance(loss, LossMatrix) or loss.kind != "bas":
            raise ValidationError("bas_threshold rule needs a bas loss matrix")
        actions = [bas_threshold_decide(float(p), loss.t) for p in Q[:, ANSWER]]
    else:
        raise ValidationError(f"unknown decision rule {rule!r}")
    return DecisionRuleOutput(tuple(actions), rule)


def group_by_mbr_action(dataset: Dataset, loss) -> dict[int, list[int]]:
    """Partition record indices by the MBR action of their belief.

    Keys are sorted; indices within a group keep dataset order.
    """
    groups: dict[int, list[int]] = {}
    for i, a in enumerate(mbr_decode_batch(dataset.beliefs, loss)):
        groups.setdefault(int(a), []).append(i)
    return dict(sorted(groups.items()))
