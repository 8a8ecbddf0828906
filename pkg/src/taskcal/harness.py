"""Cross-validated calibration experiments, synthetic data and reports."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .calibrate import Calibrator, FitConfig, fit
from .core import (
    FORMAT_VERSION,
    Dataset,
    LatentSpace,
    ValidationError,
    _read_bytes,
    categorical_space,
)
from .losses import LossMatrix, LossSpec, build_loss_matrix
from .metrics import (
    MetricReport,
    TceBinConfig,
    divergences,
    evaluate,
    movement_from_beliefs,
)

PRESETS = ("calibrated", "overconfident", "grouped")
BAS_CONVENTION = "bas_score = -(mean BAS loss); higher is better"


# --- task spec files -------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    space: LatentSpace
    loss: LossSpec

    def loss_matrix(self) -> LossMatrix:
        return build_loss_matrix(self.space, self.loss)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "space": self.space.to_dict(), "loss": self.loss.to_dict()}


def load_task_spec(source) -> TaskSpec:
    try:
        obj = json.loads(_read_bytes(source))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"task spec is not valid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ValidationError("task spec must be a JSON object")
    if obj.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"unsupported task spec format_version {obj.get('format_version')!r}; expected {FORMAT_VERSION}"
        )
    if "space" not in obj or "loss" not in obj:
        raise ValidationError("task spec needs 'space' and 'loss'")
    spec = TaskSpec(LatentSpace.from_dict(obj["space"]), LossSpec.from_dict(obj["loss"]))
    spec.loss_matrix()  # reject incompatible space/loss pairs early
    return spec


def dump_task_spec(spec: TaskSpec) -> bytes:
    return (json.dumps(spec.to_dict(), indent=2) + "\n").encode("utf-8")


# --- folds -----------------------------------------------------------------


def kfold_split(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Shuffled partition of ``range(n)`` into ``k`` test folds.

    Fold sizes differ by at most one; indices inside a fold are sorted.
    """
    if not 2 <= k <= n:
        raise ValidationError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, k)]


# --- synthetic data --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SyntheticTruth:
    true_probs: np.ndarray
    preset: str | None = None
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None


def preset_distortion(preset: str, C: int) -> tuple[np.ndarray, np.ndarray] | None:
    """``(W*, b*)`` with ``softmax(W* log q + b*)`` mapping beliefs to truth.

    ``overconfident`` beliefs are a sharpened, class-biased image of the truth
    (square of the tilted truth), so both the scale and the argmax change.
    ``grouped`` has no inverse and returns ``None``.
    """
    if preset == "calibrated":
        return np.eye(C), np.zeros(C)
    if preset == "overconfident":
        return 0.5 * np.eye(C), np.linspace(0.8, -0.8, C)
    if preset == "grouped":
        return None
    raise ValidationError(f"unknown preset {preset!r}; expected one of {PRESETS}")


def invert_dirichlet_map(P: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Beliefs ``Q`` with ``softmax(W log Q + b) = P`` row-wise (ignoring eps)."""
    try:
        Winv = np.linalg.inv(W)
    except np.linalg.LinAlgError:
        raise ValidationError("distortion matrix is singular") from None
    if not np.all(np.isfinite(Winv)) or np.linalg.cond(W) > 1e12:
        raise ValidationError("distortion matrix is singular")
    A = (np.log(P) - b) @ Winv.T
    v = Winv @ np.ones(W.shape[0])
    logQ = np.empty_like(A)
    if np.allclose(v, v[0]):
        logQ = A - logsumexp(A, axis=1, keepdims=True)
    else:
        # log q = a + c v, with c chosen so that q sums to one
        for i, a in enumerate(A):
            h = lambda c: logsumexp(a + c * v)
            lo, hi = -1.0, 1.0
            for _ in range(200):
                if h(lo) * h(hi) < 0 or h(lo) == 0 or h(hi) == 0:
                    break
                lo, hi = 2 * lo, 2 * hi
            else:
                raise ValidationError("distortion cannot be inverted on the simplex")
            if np.sign(h(lo)) == np.sign(h(hi)):
                raise ValidationError("distortion cannot be inverted on the simplex")
            logQ[i] = a + brentq(h, lo, hi, xtol=1e-14) * v
    Q = np.exp(logQ)
    return Q / Q.sum(axis=1, keepdims=True)


def _sample_labels(P: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(P.shape[0])
    cum = np.cumsum(P, axis=1)
    labels = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(labels, P.shape[1] - 1)


def generate_synthetic(n: int, C: int, distortion="overconfident", seed: int = 0,
                       space: LatentSpace | None = None) -> tuple[Dataset, SyntheticTruth]:
    """Draw truths from a flat Dirichlet, labels from the truths, and beliefs
    from the inverse of a Dirichlet calibration map.

    ``distortion`` is a preset name or a ``(W*, b*)`` pair.
    """
    if n < 1 or C < 2:
        raise ValidationError("need n >= 1 and C >= 2")
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(C), size=n)
    P = np.maximum(P, 1e-300)
    P /= P.sum(axis=1, keepdims=True)
    labels = _sample_labels(P, rng)
    preset = distortion if isinstance(distortion, str) else None
    params = preset_distortion(preset, C) if preset is not None else tuple(np.asarray(x, float) for x in distortion)
    if params is None:
        # beliefs only retain the argmax of the truth
        Q = np.full((n, C), 0.4 / C)
        Q[np.arange(n), np.argmax(P, axis=1)] += 0.6
        W = b = None
    else:
        W, b = params
        if W.shape != (C, C) or b.shape != (C,):
            raise ValidationError(f"distortion must have shapes ({C},{C}) and ({C},)")
        identity = np.array_equal(W, np.eye(C)) and not b.any()
        Q = P if identity else invert_dirichlet_map(P, W, b)
    if space is None:
        space = categorical_space([f"c{i}" for i in range(C)])
    dataset = Dataset.from_arrays(space, Q, labels)
    if params is not None and identity:
        P = dataset.beliefs.copy()  # bit-identical to the stored beliefs
    return dataset, SyntheticTruth(P, preset, W, b)


# --- experiments -----------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    loss: LossSpec
    folds: int = 5
    seed: int = 0
    family: str = "dirichlet"
    fit: FitConfig = field(default_factory=FitConfig)
    bins: TceBinConfig = field(default_factory=TceBinConfig)
    ece_bins: int = 10

    def __post_init__(self):
        if self.family not in ("identity", "temperature", "dirichlet"):
            raise ValidationError(f"unknown calibrator family {self.family!r}")

    def to_dict(self) -> dict:
        return {
            "loss": self.loss.to_dict(),
            "folds": self.folds,
            "seed": self.seed,
            "family": self.family,
            "fit": self.fit.to_dict(),
            "bins_per_dimension": self.bins.bins_per_dimension,
            "ece_bins": self.ece_bins,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class FoldResult:
    fold: int
    test_indices: tuple[int, ...]
    uncalibrated: MetricReport
    calibrated: MetricReport
    calibrator: Calibrator


@dataclass(frozen=True, eq=False)
class ExperimentReport:
    config: ExperimentConfig
    n: int
    folds: tuple[FoldResult, ...]
    whole_uncalibrated: MetricReport
    whole_calibrated: MetricReport
    action_movement: np.ndarray
    calibrated_beliefs: np.ndarray
    refinement: dict | None = None

    def fold_values(self, which: str, metric: str) -> np.ndarray:
        return np.array([getattr(getattr(f, which), metric) for f in self.folds], dtype=float)

    def aggregate(self, which: str) -> dict:
        out = {}
        for metric in ("mean_task_loss", "bas_score", "tce", "ece"):
            if getattr(getattr(self.folds[0], which), metric) is None:
                continue
            vals = self.fold_values(which, metric)
            out[metric] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        return out

    def to_dict(self) -> dict:
        is_bas = self.config.loss.kind == "bas"
        return {
            "format_version": FORMAT_VERSION,
            "provenance": {
                "seed": self.config.seed,
                "config_hash": self.config.digest(),
                "config": self.config.to_dict(),
            },
            "metadata": {
                "std": "population standard deviation over folds",
                "tce_ece_scope": "per_fold entries use the held-out fold; whole_dataset uses all records "
                                 "with out-of-fold calibrated beliefs",
                "bas_score_convention": BAS_CONVENTION if is_bas else None,
            },
            "n": self.n,
            "folds": [
                {
                    "fold": f.fold,
                    "n_test": len(f.test_indices),
                    "uncalibrated": f.uncalibrated.to_dict(),
                    "calibrated": f.calibrated.to_dict(),
                }
                for f in self.folds
            ],
            "aggregate": {
                "uncalibrated": self.aggregate("uncalibrated"),
                "calibrated": self.aggregate("calibrated"),
            },
            "whole_dataset": {
                "uncalibrated": self.whole_uncalibrated.to_dict(),
                "calibrated": self.whole_calibrated.to_dict(),
            },
            "action_movement": self.action_movement.tolist(),
            "refinement": self.refinement,
        }


def _fold_report(ds: Dataset, loss: LossMatrix, config: ExperimentConfig) -> MetricReport:
    return evaluate(ds, loss, config=config.bins, ece_bins=config.ece_bins)


def run_experiment(dataset: Dataset, config: ExperimentConfig,
                   truth: SyntheticTruth | None = None) -> ExperimentReport:
    """k-fold protocol: fit on k-1 folds, score MBR decisions on the held-out fold.

    Whole-dataset TCE and ECE use every record, with each calibrated belief
    coming from the calibrator that did not see that record.
    """
    n = len(dataset)
    loss = build_loss_matrix(dataset.space, config.loss)
    splits = kfold_split(n, config.folds, config.seed)
    Q = dataset.beliefs
    F = np.empty_like(Q)
    results = []
    for k, test in enumerate(splits):
        train = np.setdiff1d(np.arange(n), test, assume_unique=True)
        if config.family == "identity":
            cal = Calibrator.identity(dataset.n_classes, config.fit.epsilon)
        else:
            cal = fit(dataset.subset(train), config.family, config.fit)
        test_ds = dataset.subset(test)
        F[test] = cal.apply(Q[test])
        results.append(FoldResult(
            k,
            tuple(int(i) for i in test),
            _fold_report(test_ds, loss, config),
            _fold_report(test_ds.with_beliefs(F[test]), loss, config),
            cal,
        ))
    cal_ds = dataset.with_beliefs(F)
    refinement = None
    if truth is not None:
        P = truth.true_probs
        refinement = {
            "uncalibrated_total": math.fsum(divergences(Q, P, loss)) / n,
            "calibrated_total": math.fsum(divergences(F, P, loss)) / n,
        }
    F.setflags(write=False)
    return ExperimentReport(
        config,
        n,
        tuple(results),
        _fold_report(dataset, loss, config),
        _fold_report(cal_ds, loss, config),
        movement_from_beliefs(Q, F, loss),
        F,
        refinement,
    )


def report_bytes(report: ExperimentReport) -> bytes:
    return (json.dumps(report.to_dict(), indent=2) + "\n").encode("utf-8")


def emit_report(report: ExperimentReport, destination) -> int:
    """Write the report as JSON to a path or binary stream; return bytes written."""
    data = report_bytes(report)
    if isinstance(destination, (str, os.PathLike)):
        try:
            with open(destination, "wb") as fh:
                fh.write(data)
        except OSError as exc:
            raise ValidationError(f"cannot write report to {destination!s}: {exc.strerror}") from None
    else:
        destination.write(data)
    return len(data)
