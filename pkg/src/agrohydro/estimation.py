"""Joint state / model-mismatch estimation.

Contains the extended Kalman filter recursions for the column model and
the recursive EM scheme that estimates an additive per-node unknown
input alongside the states.  The E-step folds each new measurement into
exponentially decaying sufficient statistics; the M-step is the
closed-form convex combination

    a_N = (1 - gamma_N) a_{N-1} + gamma_N M^{-1} (x_hat_N - f(x_hat_{N-1}, u_{N-1})).

A log-likelihood ledger keeps enough running moments to evaluate the
decayed Q-function at any candidate unknown input; it exists for
diagnostics and testing, not for the filter loop itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .soil import (ColumnModel, output_jacobian, output_map, state_jacobian,
                   step_and_jacobian, step_state)

__all__ = [
    "IllConditionedUpdateError",
    "StateBelief",
    "UnknownInputVector",
    "NoiseModel",
    "StepSizeSchedule",
    "RecursiveQLedger",
    "step_size",
    "ekf_predict",
    "ekf_update",
    "rem_mstep",
    "rem_step",
    "evaluate_recursive_q",
]

_COND_LIMIT = 1e12


class IllConditionedUpdateError(RuntimeError):
    """Innovation covariance is numerically singular."""

    def __init__(self, condition: float):
        self.condition = float(condition)
        super().__init__(
            f"innovation covariance is ill-conditioned (cond ~ {condition:.3e})"
        )


def _symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


@dataclass
class StateBelief:
    """Filter state: head mean, covariance, and step counter."""

    mean: np.ndarray
    covariance: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        n = self.mean.size
        if self.covariance.shape != (n, n):
            raise ValueError("covariance shape does not match the mean")
        asym = np.abs(self.covariance - self.covariance.T).max()
        scale = max(np.abs(self.covariance).max(), 1e-300)
        if asym > 1e-9 * scale:
            raise ValueError("covariance is not symmetric")


@dataclass
class UnknownInputVector:
    """Additive per-node mismatch a (head units per sampling interval)."""

    a: np.ndarray
    gain: Optional[np.ndarray] = None  # M; identity when None

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        if self.gain is not None:
            self.gain = np.asarray(self.gain, dtype=float)
            if self.gain.shape != (self.a.size, self.a.size):
                raise ValueError("gain matrix shape does not match a")

    def gain_matrix(self) -> np.ndarray:
        if self.gain is None:
            return np.eye(self.a.size)
        return self.gain

    def effect(self) -> np.ndarray:
        """M @ a."""
        if self.gain is None:
            return self.a
        return self.gain @ self.a


@dataclass(frozen=True)
class NoiseModel:
    """Process covariance Q (head units^2) and measurement covariance R."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        for name, mat in (("Q", self.Q), ("R", self.R)):
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise ValueError(f"{name} must be square")
            if np.abs(mat - mat.T).max() > 1e-12 * max(np.abs(mat).max(), 1e-300):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(mat).min() <= 0:
                raise ValueError(f"{name} must be positive definite")

    @classmethod
    def isotropic(cls, q_var: float, r_var: float, n_states: int,
                  n_sensors: int) -> "NoiseModel":
        return cls(q_var * np.eye(n_states), r_var * np.eye(n_sensors))


@dataclass(frozen=True)
class StepSizeSchedule:
    """Step size gamma_N: harmonic 1/N or a fixed constant."""

    kind: str = "fixed"
    gamma0: float = 0.02

    def __post_init__(self):
        if self.kind not in ("harmonic", "fixed"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "fixed" and not 0 < self.gamma0 <= 1:
            raise ValueError("fixed step size must lie in (0, 1]")


def step_size(schedule: StepSizeSchedule, n: int) -> float:
    if n < 2:
        raise ValueError("step size is defined for time indices N >= 2")
    if schedule.kind == "harmonic":
        return 1.0 / n
    return schedule.gamma0


@dataclass
class RecursiveQLedger:
    """Decayed sufficient statistics of the recursive Q-function.

    Only the innovation moments depend on the unknown input, so the full
    weighted history collapses exactly to:
      weight_total      sum of the step weights (telescopes to 1),
      weighted_d        sum of w_k * d_k with d_k = x_hat_k - f(x_hat_{k-1}, u_{k-1}),
      weighted_outer    sum of w_k * d_k d_k^T,
      constant          every a-independent log-likelihood term, same weights.
    """

    weighted_d: np.ndarray
    weighted_outer: np.ndarray
    constant: float = 0.0
    weight_total: float = 1.0
    steps: int = 1

    @classmethod
    def initialize(cls, a_init: UnknownInputVector, constant: float = 0.0) -> "RecursiveQLedger":
        # The initial unknown-input guess acts as the initial sufficient
        # statistic, so the recursion's fixed point matches the M-step.
        d0 = a_init.effect()
        return cls(weighted_d=d0.copy(), weighted_outer=np.outer(d0, d0),
                   constant=float(constant), weight_total=1.0, steps=1)

    def decayed_and_accumulated(self, gamma: float, d: np.ndarray,
                                constant_term: float) -> "RecursiveQLedger":
        if not 0 < gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        keep = 1.0 - gamma
        return RecursiveQLedger(
            weighted_d=keep * self.weighted_d + gamma * d,
            weighted_outer=keep * self.weighted_outer + gamma * np.outer(d, d),
            constant=keep * self.constant + gamma * float(constant_term),
            weight_total=keep * self.weight_total + gamma,
            steps=self.steps + 1,
        )


def evaluate_recursive_q(ledger: RecursiveQLedger, a: UnknownInputVector,
                         noise: NoiseModel) -> float:
    """Decayed Q-function evaluated at a candidate unknown input."""
    if ledger.steps < 1:
        raise ValueError("ledger has not accumulated any step")
    q_inv = np.linalg.inv(noise.Q)
    ma = a.effect()
    quad = (np.trace(q_inv @ ledger.weighted_outer)
            - 2.0 * ma @ q_inv @ ledger.weighted_d
            + ledger.weight_total * ma @ q_inv @ ma)
    return ledger.constant - 0.5 * float(quad)


def ekf_predict(belief: StateBelief, u: float, a: UnknownInputVector,
                model: ColumnModel, noise: NoiseModel) -> StateBelief:
    """Propagate the belief one sampling interval, including the mismatch term."""
    f_mean, jac = step_and_jacobian(belief.mean, u, model)
    cov = _symmetrize(jac @ belief.covariance @ jac.T + noise.Q)
    return StateBelief(mean=f_mean + a.effect(), covariance=cov,
                       time_index=belief.time_index + 1)


def ekf_update(predicted: StateBelief, y: np.ndarray, sensors: Sequence[int],
               model: ColumnModel, noise: NoiseModel) -> StateBelief:
    """Measurement update with moisture observations at the sensed nodes."""
    y = np.asarray(y, dtype=float)
    h_jac = output_jacobian(predicted.mean, sensors, model.params)
    if y.shape != (h_jac.shape[0],):
        raise ValueError(f"measurement length {y.size} does not match {h_jac.shape[0]} sensors")
    if y.size == 0:
        return predicted
    innov_cov = h_jac @ predicted.covariance @ h_jac.T + noise.R
    cond = np.linalg.cond(innov_cov)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise IllConditionedUpdateError(cond)
    gain = np.linalg.solve(innov_cov, h_jac @ predicted.covariance).T
    mean = predicted.mean + gain @ (y - output_map(predicted.mean, sensors, model.params))
    cov = _symmetrize((np.eye(predicted.mean.size) - gain @ h_jac) @ predicted.covariance)
    return StateBelief(mean=mean, covariance=cov, time_index=predicted.time_index)


def rem_mstep(a_prev: UnknownInputVector, x_hat_now: np.ndarray,
              x_hat_prev: np.ndarray, u: float, gamma: float,
              model: ColumnModel) -> UnknownInputVector:
    """Closed-form unknown-input update (convex combination)."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    d = np.asarray(x_hat_now, dtype=float) - step_state(np.asarray(x_hat_prev, dtype=float), u, model)
    gain = a_prev.gain
    if gain is None:
        instantaneous = d
    else:
        if abs(np.linalg.det(gain)) < 1e-300:
            raise ValueError("gain matrix M is singular")
        instantaneous = np.linalg.solve(gain, d)
    return UnknownInputVector(a=(1.0 - gamma) * a_prev.a + gamma * instantaneous,
                              gain=a_prev.gain)


def _gaussian_constant(dim: int, cov: np.ndarray) -> float:
    sign, logdet = np.linalg.slogdet(cov)
    return -0.5 * dim * math.log(2.0 * math.pi) - 0.5 * logdet


def initial_likelihood_constant(belief: StateBelief) -> float:
    """a-independent expectation of the initial-state log-likelihood."""
    n = belief.mean.size
    return _gaussian_constant(n, belief.covariance) - 0.5 * n


def rem_step(belief: StateBelief, a: UnknownInputVector, y: np.ndarray, u: float,
             schedule: StepSizeSchedule, ledger: RecursiveQLedger,
             model: ColumnModel, noise: NoiseModel, sensors: Sequence[int],
             mstep_enabled: bool = True, diagnostics: bool = True):
    """One full recursive-EM cycle: E-step bookkeeping, EKF, M-step.

    Returns (updated belief, updated unknown input, updated ledger).
    """
    n_new = belief.time_index + 1
    gamma = step_size(schedule, n_new) if n_new >= 2 else 1.0
    predicted = ekf_predict(belief, u, a, model, noise)
    updated = ekf_update(predicted, y, sensors, model, noise)
    # d_N = x_hat_N - f(x_hat_{N-1}, u); the predicted mean already holds
    # f(...) + M a, so subtracting M a recovers the bare transition.
    d = updated.mean - (predicted.mean - a.effect())

    constant = 0.0
    if diagnostics:
        constant = _likelihood_constant(belief, predicted, updated, y, u, model,
                                        noise, sensors)
    if n_new >= 2:
        new_ledger = ledger.decayed_and_accumulated(gamma, d, constant)
    else:
        # First step seeds the sufficient statistics from the initial
        # unknown-input guess, keeping the M-step recursion and the ledger
        # argmax aligned from the start.
        new_ledger = RecursiveQLedger.initialize(a, constant)
    if mstep_enabled:
        gain = a.gain
        if gain is None:
            instantaneous = d
        else:
            instantaneous = np.linalg.solve(gain, d)
        a_new = UnknownInputVector(a=(1.0 - gamma) * a.a + gamma * instantaneous
                                   if n_new >= 2 else a.a.copy(),
                                   gain=a.gain)
    else:
        a_new = UnknownInputVector(a=a.a.copy(), gain=a.gain)
    return updated, a_new, new_ledger


def _likelihood_constant(prev: StateBelief, predicted: StateBelief,
                         updated: StateBelief, y: np.ndarray, u: float,
                         model: ColumnModel, noise: NoiseModel,
                         sensors: Sequence[int]) -> float:
    """a-independent part of the per-step expected complete-data log-likelihood.

    Includes the covariance cross-terms of the transition expectation and the
    full measurement expectation; all are constants with respect to a.
    """
    n = prev.mean.size
    m = np.asarray(y).size
    f_prev = state_jacobian(prev.mean, u, model)
    f_now = state_jacobian(updated.mean, u, model)
    q_inv = np.linalg.inv(noise.Q)
    r_inv = np.linalg.inv(noise.R)

    sign, logdet_p = np.linalg.slogdet(updated.covariance)
    out = (-0.5 * (n + m) * math.log(2.0 * math.pi)
           - 0.5 * (np.linalg.slogdet(noise.Q)[1] + np.linalg.slogdet(noise.R)[1])
           - 0.5 * logdet_p)
    cross = ((updated.covariance - f_now @ predicted.covariance)
             - (predicted.covariance @ f_now.T - f_prev @ prev.covariance @ f_prev.T))
    out -= 0.5 * float(np.trace(q_inv @ cross))
    h_jac = output_jacobian(updated.mean, sensors, model.params)
    resid = np.asarray(y, dtype=float) - output_map(updated.mean, sensors, model.params)
    meas = h_jac @ updated.covariance @ h_jac.T + np.outer(resid, resid)
    out -= 0.5 * float(np.trace(r_inv @ meas))
    return out
