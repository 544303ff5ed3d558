"""Fatigue-aware conversion-rate prediction.

A logistic model fit by full-batch gradient ascent with backtracking
line search. The fatigue variable (prior ad exposure at display time)
enters as a one-hot over exposure buckets; leaving it out makes the
model overpredict on recently exposed users, which the calibration
curve makes visible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import DEFAULT_BUCKETS, ValidationError, assign_clusters


class ConvergenceError(RuntimeError):
    """Gradient ascent did not reach the tolerance; carries the last
    gradient max-norm and the partially fitted model."""

    def __init__(self, grad_norm: float, model: "CtrModel"):
        super().__init__(
            f"gradient ascent did not converge: last gradient max-norm {grad_norm:.3e}"
        )
        self.grad_norm = grad_norm
        self.model = model


@dataclass(frozen=True)
class DisplayEvent:
    """One won display: optional context features, the fatigue state at
    display time, and whether a conversion followed."""

    fatigue: int
    converted: bool
    features: tuple[float, ...] = ()


def events_from_trace(exposure: np.ndarray, converted: np.ndarray) -> list[DisplayEvent]:
    """Wrap a simulator display trace as events."""
    return [DisplayEvent(fatigue=int(k), converted=bool(c)) for k, c in zip(exposure, converted)]


@dataclass(frozen=True)
class CtrModel:
    """Logistic conversion model; prediction = logistic(weights . features)."""

    weights: tuple[float, ...]
    includes_fatigue: bool
    fatigue_boundaries: tuple[int, ...]
    n_context_features: int

    def design_matrix(self, events: Sequence[DisplayEvent]) -> np.ndarray:
        return _design_matrix(
            events, self.includes_fatigue, self.fatigue_boundaries, self.n_context_features
        )

    def predict_proba(self, events: Sequence[DisplayEvent]) -> np.ndarray:
        z = self.design_matrix(events) @ np.asarray(self.weights)
        return _sigmoid(z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _design_matrix(
    events: Sequence[DisplayEvent],
    include_fatigue: bool,
    boundaries: tuple[int, ...],
    n_context: int,
) -> np.ndarray:
    n = len(events)
    cols = [np.ones(n)]
    if n_context:
        bad = next((e for e in events if len(e.features) != n_context), None)
        if bad is not None:
            raise ValidationError(
                f"expected {n_context} context features per event, got {len(bad.features)}"
            )
        ctx = np.array([e.features for e in events], dtype=np.float64)
        cols.append(ctx)
    if include_fatigue:
        fat = np.array([e.fatigue for e in events])
        bucket = assign_clusters(fat, boundaries)
        onehot = np.zeros((n, len(boundaries)))  # bucket 0 is the reference level
        nonzero = bucket > 0
        onehot[nonzero, bucket[nonzero] - 1] = 1.0
        cols.append(onehot)
    return np.column_stack(cols)


def penalized_loglik(weights: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> float:
    """Mean Bernoulli log-likelihood minus (l2/2) ||w||^2."""
    z = X @ weights
    # log(sigmoid(z)) and log(1 - sigmoid(z)) via logaddexp for stability
    ll = -(np.logaddexp(0.0, -z) * y + np.logaddexp(0.0, z) * (1 - y)).mean()
    return float(ll - 0.5 * l2 * weights @ weights)


def loglik_gradient(weights: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> np.ndarray:
    p = _sigmoid(X @ weights)
    return X.T @ (y - p) / len(y) - l2 * weights


def fit_ctr(
    events: Sequence[DisplayEvent],
    include_fatigue: bool = True,
    l2: float = 0.0,
    max_iters: int = 10_000,
    tol: float = 1e-7,
    fatigue_boundaries: tuple[int, ...] = DEFAULT_BUCKETS,
    strict: bool = True,
) -> CtrModel:
    """Fit the logistic model by gradient ascent with backtracking.

    The mean penalized log-likelihood is non-decreasing across
    iterations; convergence is declared when the gradient max-norm
    drops below `tol`. With `strict`, hitting `max_iters` first raises
    :class:`ConvergenceError` (which carries the partial model).
    """
    if l2 < 0:
        raise ValidationError("l2 must be >= 0")
    y = np.array([1.0 if e.converted else 0.0 for e in events])
    if len(y) == 0 or y.min() == y.max():
        raise ValidationError("need at least one positive and one negative event")
    n_context = len(events[0].features)
    X = _design_matrix(events, include_fatigue, fatigue_boundaries, n_context)
    w = np.zeros(X.shape[1])
    ll = penalized_loglik(w, X, y, l2)
    grad_norm = np.inf
    step = 4.0
    for _ in range(max_iters):
        g = loglik_gradient(w, X, y, l2)
        grad_norm = float(np.abs(g).max())
        if grad_norm < tol:
            break
        gg = float(g @ g)
        t = step
        while t > 1e-18:
            cand = w + t * g
            cand_ll = penalized_loglik(cand, X, y, l2)
            if cand_ll >= ll + 0.5 * t * gg:  # Armijo for ascent
                break
            t /= 2
        w = w + t * g
        ll = penalized_loglik(w, X, y, l2)
        step = min(4.0 * t, 64.0)  # let the step grow back after backtracks

    model = CtrModel(
        weights=tuple(float(v) for v in w),
        includes_fatigue=include_fatigue,
        fatigue_boundaries=tuple(fatigue_boundaries),
        n_context_features=n_context,
    )
    if grad_norm >= tol and strict:
        raise ConvergenceError(grad_norm, model)
    return model


@dataclass(frozen=True)
class CalibrationRow:
    bucket: int
    n: int
    empirical_rate: float | None
    mean_predicted: float | None


def calibration_curve(
    model: CtrModel,
    events: Sequence[DisplayEvent],
    boundaries: tuple[int, ...] | None = None,
) -> list[CalibrationRow]:
    """Per-fatigue-bucket empirical conversion rate vs mean prediction."""
    if boundaries is None:
        boundaries = model.fatigue_boundaries
    fat = np.array([e.fatigue for e in events])
    y = np.array([1.0 if e.converted else 0.0 for e in events])
    pred = model.predict_proba(events)
    bucket = assign_clusters(fat, boundaries)
    rows = []
    for b in range(len(boundaries) + 1):
        mask = bucket == b
        n = int(mask.sum())
        if n == 0:
            rows.append(CalibrationRow(bucket=b, n=0, empirical_rate=None, mean_predicted=None))
        else:
            rows.append(
                CalibrationRow(
                    bucket=b,
                    n=n,
                    empirical_rate=float(y[mask].mean()),
                    mean_predicted=float(pred[mask].mean()),
                )
            )
    return rows
