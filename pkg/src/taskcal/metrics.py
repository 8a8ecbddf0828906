"""Decision-aware calibration metrics.

The divergence between beliefs ``q`` and ``r`` under a task loss is the excess
Bayes risk (measured under ``r``) of acting on ``q`` instead of on ``r``. The
task calibration error (TCE) averages it between each prediction and an
estimate of the true label distribution given that prediction.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .core import Dataset, ValidationError, check_simplex
from .decision import DecisionRuleOutput, _as_loss, bayes_risks, mbr_decode_batch
from .losses import LossMatrix

DEFAULT_BINS_PER_DIM = 4
DEFAULT_BANDWIDTH = 0.01
DEFAULT_ECE_BINS = 10
KDE_EPSILON = 1e-12


@dataclass(frozen=True)
class TceBinConfig:
    bins_per_dimension: int = DEFAULT_BINS_PER_DIM

    def __post_init__(self):
        if int(self.bins_per_dimension) != self.bins_per_dimension or self.bins_per_dimension < 1:
            raise ValidationError("bins_per_dimension must be a positive integer")

    def n_bins(self, C: int) -> int:
        return self.bins_per_dimension ** (C - 1)


@dataclass(frozen=True)
class MetricReport:
    mean_task_loss: float
    tce: float
    ece: float
    n: int
    bas_score: float | None = None

    def to_dict(self) -> dict:
        return {
            "mean_task_loss": self.mean_task_loss,
            "bas_score": self.bas_score,
            "tce": self.tce,
            "ece": self.ece,
            "n": self.n,
        }


def _pair(q, r, L):
    q = check_simplex(q)
    r = check_simplex(r)
    if not (q.shape[0] == r.shape[0] == L.shape[0]):
        raise ValidationError("belief and loss dimensions disagree")
    return q, r


def generalized_entropy(q, loss) -> float:
    """Minimal Bayes risk attainable under ``q``."""
    L = _as_loss(loss)
    q, _ = _pair(q, q, L)
    R = bayes_risks(q[None, :], L)
    a = mbr_decode_batch(q[None, :], L)[0]
    return float(R[0, a])


def divergences(Q, Rb, loss) -> np.ndarray:
    """Row-wise divergence between beliefs ``Q`` and reference beliefs ``Rb``."""
    L = _as_loss(loss)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    Rb = np.atleast_2d(np.asarray(Rb, dtype=float))
    if Q.shape != Rb.shape or Q.shape[1] != L.shape[0]:
        raise ValidationError("belief and loss dimensions disagree")
    if Q.shape[0] == 0:
        return np.zeros(0)
    aq = mbr_decode_batch(Q, L)
    ar = mbr_decode_batch(Rb, L)
    risks = bayes_risks(Rb, L)
    rows = np.arange(Q.shape[0])
    d = risks[rows, aq] - risks[rows, ar]
    # identical actions give an exact zero, not a rounding residue; risks
    # within the tie tolerance count as equal, so their tiny difference does too
    d[(aq == ar) | (d < 0)] = 0.0
    return d


def divergence(q, r, loss) -> float:
    """Excess risk under ``r`` of the MBR action for ``q``.

    >>> from taskcal.losses import LossMatrix
    >>> em = LossMatrix([[0, 1], [1, 0]])
    >>> round(divergence([0.6, 0.4], [0.3, 0.7], em), 12)
    0.4
    """
    L = _as_loss(loss)
    q, r = _pair(q, r, L)
    return float(divergences(q[None, :], r[None, :], L)[0])


# --- simplex binning -------------------------------------------------------


def _scaled_cumulative(q: np.ndarray, m: int) -> np.ndarray:
    d = q.shape[0] - 1
    y = np.empty(d)
    acc = 0.0
    for i in range(d):
        acc += q[i]
        y[i] = acc
    return np.clip(m * y, 0.0, float(m))


def bin_index(q, config: TceBinConfig = TceBinConfig()) -> int:
    """Cell of ``q`` in the Freudenthal subdivision of the simplex.

    The simplex is mapped to the ordered region ``0 <= y_0 <= ... <= y_{C-2}
    <= m`` by scaled cumulative sums; the Kuhn triangulation of the unit cubes
    tiles this region with ``m^(C-1)`` congruent simplices. A cell is named by
    the integer parts of ``y`` read in descending order of their fractional
    parts, interpreted as base-``m`` digits. Points on cell boundaries go to
    the smallest containing cell id.
    """
    q = check_simplex(q)
    m = int(config.bins_per_dimension)
    if q.shape[0] < 2:
        raise ValidationError("binning needs at least 2 classes")
    y = _scaled_cumulative(q, m)
    d = y.shape[0]

    # Each coordinate's cube offset: fixed unless y sits on an integer, where
    # both neighbouring cubes contain it. Runs of equal integer values must
    # keep offsets nondecreasing, so a run of length g has g + 1 choices.
    fixed = np.minimum(np.floor(y), m - 1).astype(np.int64)
    on_grid = (y == np.floor(y)) & (y > 0) & (y < m)
    runs: list[tuple[int, int]] = []  # (start, length) of equal on-grid values
    i = 0
    while i < d:
        if on_grid[i]:
            j = i
            while j + 1 < d and on_grid[j + 1] and y[j + 1] == y[i]:
                j += 1
            runs.append((i, j - i + 1))
            i = j + 1
        else:
            i += 1

    best = None
    for split in itertools.product(*(range(g + 1) for _, g in runs)):
        f = fixed.copy()
        for (start, g), k in zip(runs, split):
            f[start:start + k] -= 1  # first k of the run take the lower cube
        z = y - f
        order = sorted(range(d), key=lambda c: (-z[c], f[c]))
        code = 0
        for c in order:
            code = code * m + int(f[c])
        if best is None or code < best:
            best = code
    return best


def bin_indices(Q, config: TceBinConfig = TceBinConfig()) -> list[int]:
    return [bin_index(q, config) for q in np.asarray(Q, dtype=float)]


# --- TCE estimators --------------------------------------------------------


def _one_hot(labels: np.ndarray, C: int) -> np.ndarray:
    Y = np.zeros((labels.shape[0], C))
    Y[np.arange(labels.shape[0]), labels] = 1.0
    return Y


def binned_conditionals(dataset: Dataset, config: TceBinConfig = TceBinConfig()) -> np.ndarray:
    """Per-record empirical label distribution of the record's bin."""
    C = dataset.n_classes
    keys = bin_indices(dataset.beliefs, config)
    Y = _one_hot(dataset.labels, C)
    members: dict[int, list[int]] = {}
    for i, k in enumerate(keys):
        members.setdefault(k, []).append(i)
    out = np.empty_like(Y)
    for idx in members.values():
        out[idx] = Y[idx].mean(axis=0)
    return out


def tce_binned(dataset: Dataset, loss, config: TceBinConfig = TceBinConfig()) -> float:
    """Binned TCE estimate: mean divergence from each belief to its bin's label mean."""
    if len(dataset) == 0:
        raise ValidationError("TCE of an empty dataset is undefined")
    L = _as_loss(loss)
    cond = binned_conditionals(dataset, config)
    d = divergences(dataset.beliefs, cond, L)
    return math.fsum(d) / len(dataset)


def kde_conditionals(dataset: Dataset, bandwidth: float = DEFAULT_BANDWIDTH,
                     chunk: int = 512) -> np.ndarray:
    """Leave-one-out Dirichlet-kernel regression of labels on beliefs.

    Record ``j`` contributes to the estimate at ``q_i`` with weight
    proportional to the Dirichlet density with concentration
    ``(q_j + eps) / bandwidth + 1`` evaluated at ``q_i``.
    """
    if bandwidth <= 0 or not math.isfinite(bandwidth):
        raise ValidationError("bandwidth must be positive")
    n = len(dataset)
    if n < 2:
        raise ValidationError("kernel TCE needs at least 2 records")
    Q = dataset.beliefs
    Y = _one_hot(dataset.labels, dataset.n_classes)
    alpha = (Q + KDE_EPSILON) / bandwidth + 1.0  # (n, C), one row per kernel centre j
    log_norm = gammaln(alpha.sum(axis=1)) - gammaln(alpha).sum(axis=1)  # (n,)
    logx = np.log(Q + KDE_EPSILON)  # evaluation points i
    out = np.empty_like(Y)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        # logw[i, j] = log Dir(q_i | alpha_j)
        logw = logx[s:e] @ (alpha - 1.0).T + log_norm[None, :]
        logw[np.arange(e - s), np.arange(s, e)] = -np.inf
        logw -= logsumexp(logw, axis=1, keepdims=True)
        out[s:e] = np.exp(logw) @ Y
    return out


def tce_kde(dataset: Dataset, loss, bandwidth: float = DEFAULT_BANDWIDTH) -> float:
    L = _as_loss(loss)
    cond = kde_conditionals(dataset, bandwidth)
    d = divergences(dataset.beliefs, cond, L)
    return math.fsum(d) / len(dataset)


# --- classical and loss-based metrics --------------------------------------


def ece_confidence(dataset: Dataset, n_bins: int = DEFAULT_ECE_BINS) -> float:
    """Top-label confidence ECE with equal-width bins on [0, 1].

    Bin ``b`` covers ``(b/n_bins, (b+1)/n_bins]``; confidence 0 falls in bin 0.
    """
    if len(dataset) == 0:
        raise ValidationError("ECE of an empty dataset is undefined")
    if n_bins < 1:
        raise ValidationError("n_bins must be at least 1")
    Q = dataset.beliefs
    conf = Q.max(axis=1)
    correct = (np.argmax(Q, axis=1) == dataset.labels).astype(float)
    b = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    n = len(dataset)
    total = 0.0
    for k in range(n_bins):
        mask = b == k
        nk = int(mask.sum())
        if nk:
            total += nk / n * abs(correct[mask].mean() - conf[mask].mean())
    return min(max(total, 0.0), 1.0)


def expected_task_loss(dataset: Dataset, decisions, loss) -> float:
    """Mean ``loss[label_i, decision_i]``."""
    L = _as_loss(loss)
    actions = decisions.actions if isinstance(decisions, DecisionRuleOutput) else decisions
    actions = np.asarray(actions, dtype=np.int64)
    if actions.shape[0] != len(dataset):
        raise ValidationError(f"{actions.shape[0]} decisions for {len(dataset)} records")
    if len(dataset) == 0:
        raise ValidationError("expected loss of an empty dataset is undefined")
    return math.fsum(L[dataset.labels, actions]) / len(dataset)


def bas_score(mean_loss: float) -> float:
    """Reported BAS score: higher is better, the negated mean BAS loss."""
    return -mean_loss


def action_movement_matrix(dataset: Dataset, calibrator, loss) -> np.ndarray:
    """Counts ``[u, c]`` of records moving from MBR action ``u`` to ``c``."""
    L = _as_loss(loss)
    C = L.shape[0]
    if dataset.n_classes != C or calibrator.dimension != C:
        raise ValidationError("dataset, calibrator and loss dimensions disagree")
    M = np.zeros((C, C), dtype=np.int64)
    if len(dataset) == 0:
        return M
    Q = dataset.beliefs
    u = mbr_decode_batch(Q, L)
    c = mbr_decode_batch(calibrator.apply(Q), L)
    np.add.at(M, (u, c), 1)
    return M


def movement_from_beliefs(Q_before, Q_after, loss) -> np.ndarray:
    L = _as_loss(loss)
    C = L.shape[0]
    M = np.zeros((C, C), dtype=np.int64)
    np.add.at(M, (mbr_decode_batch(Q_before, L), mbr_decode_batch(Q_after, L)), 1)
    return M


def evaluate(dataset: Dataset, loss, *, config: TceBinConfig = TceBinConfig(),
             ece_bins: int = DEFAULT_ECE_BINS) -> MetricReport:
    """MBR loss, TCE and ECE of the beliefs stored in ``dataset``."""
    L = _as_loss(loss)
    actions = mbr_decode_batch(dataset.beliefs, L)
    mean_loss = expected_task_loss(dataset, actions, L)
    is_bas = isinstance(loss, LossMatrix) and loss.kind == "bas"
    return MetricReport(
        mean_task_loss=mean_loss,
        tce=tce_binned(dataset, L, config),
        ece=ece_confidence(dataset, ece_bins),
        n=len(dataset),
        bas_score=bas_score(mean_loss) if is_bas else None,
    )
