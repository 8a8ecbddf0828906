"""Parametric calibration maps on the simplex and their NLL fitting.

Three families are supported:

* ``identity``: returns the belief unchanged.
* ``temperature``: ``softmax(log(q + eps) / exp(log_tau))``.
* ``dirichlet``: ``softmax(W @ log(q + eps) + b)``.

Fitting minimizes the mean negative log-likelihood of the observed labels by
full-batch gradient descent with a backtracking (Armijo) line search, starting
from the identity parameters. Everything is deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .core import FORMAT_VERSION, Dataset, NumericalError, ValidationError

FAMILIES = ("identity", "temperature", "dirichlet")
DEFAULT_EPSILON = 1e-12
ARMIJO_C = 1e-4
MAX_HALVINGS = 60


def _softmax(Z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(Z, axis=-1))


@dataclass(frozen=True, eq=False)
class Calibrator:
    family: str
    dimension: int
    epsilon: float = DEFAULT_EPSILON
    log_tau: float | None = None
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown calibrator family {self.family!r}")
        if int(self.dimension) < 2:
            raise ValidationError("calibrator dimension must be at least 2")
        object.__setattr__(self, "dimension", int(self.dimension))
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValidationError("epsilon must be a positive finite number")
        C = self.dimension
        if self.family == "identity":
            if self.log_tau is not None or self.weight is not None or self.bias is not None:
                raise ValidationError("identity calibrator takes no parameters")
        elif self.family == "temperature":
            if self.log_tau is None or not math.isfinite(self.log_tau):
                raise ValidationError("temperature calibrator needs a finite log_tau")
            object.__setattr__(self, "log_tau", float(self.log_tau))
        else:
            W = np.array(self.weight, dtype=float)
            b = np.array(self.bias, dtype=float)
            if W.shape != (C, C) or b.shape != (C,):
                raise ValidationError(f"dirichlet parameters must have shapes ({C},{C}) and ({C},)")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValidationError("dirichlet parameters must be finite")
            W.setflags(write=False)
            b.setflags(write=False)
            object.__setattr__(self, "weight", W)
            object.__setattr__(self, "bias", b)

    @classmethod
    def identity(cls, dimension: int, epsilon: float = DEFAULT_EPSILON) -> "Calibrator":
        return cls("identity", dimension, epsilon)

    @classmethod
    def temperature(cls, dimension: int, log_tau: float = 0.0, epsilon: float = DEFAULT_EPSILON) -> "Calibrator":
        return cls("temperature", dimension, epsilon, log_tau=log_tau)

    @classmethod
    def dirichlet(cls, weight, bias, epsilon: float = DEFAULT_EPSILON) -> "Calibrator":
        weight = np.asarray(weight, dtype=float)
        return cls("dirichlet", weight.shape[0], epsilon, weight=weight, bias=bias)

    def logits(self, Q: np.ndarray) -> np.ndarray:
        X = np.log(Q + self.epsilon)
        if self.family == "temperature":
            return X * math.exp(-self.log_tau)
        return X @ self.weight.T + self.bias

    def apply(self, q) -> np.ndarray:
        """Calibrate one belief (shape ``(C,)``) or a batch (shape ``(n, C)``)."""
        Q = np.asarray(q, dtype=float)
        if Q.shape[-1] != self.dimension:
            raise ValidationError(f"belief has {Q.shape[-1]} classes, calibrator expects {self.dimension}")
        if self.family == "identity":
            return Q.copy()
        return _softmax(self.logits(Q))

    def parameters(self) -> np.ndarray:
        if self.family == "identity":
            return np.zeros(0)
        if self.family == "temperature":
            return np.array([self.log_tau])
        return np.concatenate([self.weight.ravel(), self.bias])

    def with_parameters(self, theta: np.ndarray) -> "Calibrator":
        C = self.dimension
        if self.family == "temperature":
            return Calibrator("temperature", C, self.epsilon, log_tau=float(theta[0]))
        if self.family == "dirichlet":
            return Calibrator("dirichlet", C, self.epsilon, weight=theta[: C * C].reshape(C, C), bias=theta[C * C:])
        return self


def _check_dims(calibrator: Calibrator, dataset: Dataset) -> None:
    if dataset.n_classes != calibrator.dimension:
        raise ValidationError(
            f"dataset has {dataset.n_classes} classes, calibrator expects {calibrator.dimension}"
        )


def nll(calibrator: Calibrator, dataset: Dataset) -> float:
    """Mean ``-log(f(q_i)[y_i] + eps)`` over the dataset."""
    _check_dims(calibrator, dataset)
    if len(dataset) == 0:
        raise ValidationError("nll of an empty dataset is undefined")
    P = calibrator.apply(dataset.beliefs)
    py = P[np.arange(len(dataset)), dataset.labels]
    return float(np.mean(-np.log(py + calibrator.epsilon)))


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-7
    initial_step: float = 1.0
    seed: int = 0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be at least 1")
        for name in ("gradient_tolerance", "initial_step", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "gradient_tolerance": self.gradient_tolerance,
            "initial_step": self.initial_step,
            "seed": self.seed,
            "epsilon": self.epsilon,
        }


@dataclass
class FitResult:
    calibrator: Calibrator
    objective_trace: list[float] = field(default_factory=list)
    gradient_norm: float = math.inf
    iterations: int = 0
    converged: bool = False


class _Objective:
    """Mean clamped NLL and its gradient for one family on a fixed dataset."""

    def __init__(self, template: Calibrator, dataset: Dataset):
        self.template = template
        self.eps = template.epsilon
        self.X = np.log(dataset.beliefs + self.eps)
        self.y = dataset.labels
        self.n = len(dataset)
        self.rows = np.arange(self.n)

    def _logits(self, theta):
        C = self.template.dimension
        if self.template.family == "temperature":
            return self.X * math.exp(-theta[0])
        W = theta[: C * C].reshape(C, C)
        return self.X @ W.T + theta[C * C:]

    def value(self, theta) -> float:
        logp = log_softmax(self._logits(theta), axis=1)[self.rows, self.y]
        return float(np.mean(-np.log(np.exp(logp) + self.eps)))

    def value_and_grad(self, theta):
        Z = self._logits(theta)
        P = _softmax(Z)
        py = P[self.rows, self.y]
        f = float(np.mean(-np.log(py + self.eps)))
        G = P.copy()
        G[self.rows, self.y] -= 1.0
        G *= (py / (py + self.eps))[:, None]
        G /= self.n
        if self.template.family == "temperature":
            grad = np.array([-np.sum(G * Z)])
        else:
            grad = np.concatenate([(G.T @ self.X).ravel(), G.sum(axis=0)])
        return f, grad


def _initial(family: str, C: int, eps: float) -> Calibrator:
    if family == "temperature":
        return Calibrator.temperature(C, 0.0, eps)
    if family == "dirichlet":
        return Calibrator.dirichlet(np.eye(C), np.zeros(C), eps)
    raise ValidationError(f"cannot fit family {family!r}; expected temperature or dirichlet")


def minimize_nll(dataset: Dataset, family: str, config: FitConfig = FitConfig(),
                 initial: Calibrator | None = None) -> FitResult:
    """Gradient descent with monotone backtracking line search.

    The step tried at each iteration is twice the previously accepted one
    (capped at ``initial_step``), halved until the Armijo condition holds.
    """
    if len(dataset) == 0:
        raise ValidationError("cannot fit a calibrator on an empty dataset")
    C = dataset.n_classes
    start = initial if initial is not None else _initial(family, C, config.epsilon)
    if start.family != family or start.dimension != C:
        raise ValidationError("initial calibrator does not match the requested family/dimension")
    obj = _Objective(start, dataset)
    theta = start.parameters().astype(float)

    f, g = obj.value_and_grad(theta)
    if not math.isfinite(f):
        raise NumericalError("non-finite objective at iteration 0")
    trace = [f]
    step = config.initial_step
    gnorm = float(np.linalg.norm(g))
    it = 0
    converged = gnorm <= config.gradient_tolerance
    while not converged and it < config.max_iterations:
        it += 1
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient at iteration {it}")
        g2 = gnorm * gnorm
        s = step
        for _ in range(MAX_HALVINGS):
            cand = theta - s * g
            fc = obj.value(cand)
            if math.isfinite(fc) and fc <= f - ARMIJO_C * s * g2:
                break
            s *= 0.5
        else:
            # no step gives sufficient decrease: numerically stationary
            break
        theta = cand
        f_new, g = obj.value_and_grad(theta)
        if not math.isfinite(f_new):
            raise NumericalError(f"non-finite objective at iteration {it}")
        f = f_new
        trace.append(f)
        step = min(2.0 * s, config.initial_step)
        gnorm = float(np.linalg.norm(g))
        converged = gnorm <= config.gradient_tolerance
    return FitResult(start.with_parameters(theta), trace, gnorm, it, converged)


def fit(dataset: Dataset, family: str, config: FitConfig = FitConfig(),
        initial: Calibrator | None = None) -> Calibrator:
    """Fit a calibration map to ``dataset`` by minimizing NLL."""
    return minimize_nll(dataset, family, config, initial).calibrator


def calibrator_to_dict(cal: Calibrator) -> dict:
    params: dict = {}
    if cal.family == "temperature":
        params["log_tau"] = cal.log_tau
    elif cal.family == "dirichlet":
        params["weight"] = [float(x) for x in cal.weight.ravel()]
        params["bias"] = [float(x) for x in cal.bias]
    return {
        "format_version": FORMAT_VERSION,
        "family": cal.family,
        "dimension": cal.dimension,
        "epsilon": cal.epsilon,
        "parameters": params,
    }


def serialize(cal: Calibrator) -> bytes:
    return (json.dumps(calibrator_to_dict(cal), indent=2) + "\n").encode("utf-8")


def deserialize(payload: bytes | str, expected_dimension: int | None = None) -> Calibrator:
    try:
        obj = json.loads(payload)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValidationError(f"calibrator payload is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ValidationError("calibrator payload must be a JSON object")
    if obj.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"unsupported calibrator format_version {obj.get('format_version')!r}; expected {FORMAT_VERSION}"
        )
    try:
        family, C, eps = obj["family"], int(obj["dimension"]), float(obj["epsilon"])
        params = obj["parameters"]
        if expected_dimension is not None and C != expected_dimension:
            raise ValidationError(f"calibrator dimension {C} does not match task space ({expected_dimension})")
        if family == "identity":
            return Calibrator.identity(C, eps)
        if family == "temperature":
            return Calibrator.temperature(C, float(params["log_tau"]), eps)
        if family == "dirichlet":
            W = np.asarray(params["weight"], dtype=float)
            if W.size != C * C:
                raise ValidationError("dirichlet weight has the wrong number of entries")
            return Calibrator("dirichlet", C, eps, weight=W.reshape(C, C), bias=np.asarray(params["bias"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed calibrator payload: {exc!r}") from None
    raise ValidationError(f"unknown calibrator family {family!r}")


def apply(calibrator: Calibrator, q) -> np.ndarray:
    """Functional form of :meth:`Calibrator.apply`."""
    return calibrator.apply(q)


apply_calibrator = apply
