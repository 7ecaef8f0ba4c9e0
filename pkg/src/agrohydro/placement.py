"""Sensor placement by sensitivity analysis and orthogonal projection.

States and unknown inputs are stacked into an augmented system (the
unknown inputs held constant between steps).  Output sensitivities to
the augmented state at the start of a data window are chained along a
nominal trajectory; candidate sensor locations are then ranked by
greedy orthogonal deflation of the row-blocks they contribute, and
sensors are added in rank order until the selected rows reach full
column rank.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .soil import ColumnModel, output_jacobian, state_jacobian

__all__ = [
    "DegenerateInputError",
    "UnobservableConfigurationError",
    "SensitivityMatrix",
    "SensorRanking",
    "augmented_jacobians",
    "sensitivity_matrix",
    "rank_by_orthogonal_projection",
    "select_sensors",
]


class DegenerateInputError(ValueError):
    """All candidate vectors are (numerically) zero."""


class UnobservableConfigurationError(RuntimeError):
    """Even the complete candidate set cannot reach full column rank."""

    def __init__(self, achieved_rank: int, target_rank: int):
        self.achieved_rank = achieved_rank
        self.target_rank = target_rank
        super().__init__(
            f"sensitivity matrix rank {achieved_rank} < target {target_rank} "
            "with every candidate sensor selected"
        )


def augmented_jacobians(x: np.ndarray, u: float, model: ColumnModel,
                        candidates: Sequence[int],
                        gain: Optional[np.ndarray] = None):
    """Jacobians of the augmented (state + unknown input) system.

    Returns (F_a, H_a) with the block structure
      F_a = [[dF/dx, M], [0, I]]   and   H_a = [dH/dx, 0],
    H_a restricted to the candidate sensor rows.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    m_gain = np.eye(n) if gain is None else np.asarray(gain, dtype=float)
    f_jac = state_jacobian(x, u, model)
    f_aug = np.block([[f_jac, m_gain],
                      [np.zeros((n, n)), np.eye(n)]])
    h_jac = output_jacobian(x, candidates, model.params)
    h_aug = np.hstack([h_jac, np.zeros((h_jac.shape[0], n))])
    return f_aug, h_aug


@dataclass
class SensitivityMatrix:
    """Stacked windowed output sensitivities to the initial augmented state."""

    matrix: np.ndarray  # ((window+1) * |candidates|, n_aug)
    window: int
    candidates: tuple
    n_aug: int

    def candidate_signature(self, candidate: int) -> np.ndarray:
        """Vectorized row-block contributed by one candidate sensor."""
        pos = self.candidates.index(candidate)
        rows = self.matrix[pos::len(self.candidates), :]
        return rows.reshape(-1)

    def rows_for(self, selected: Sequence[int]) -> np.ndarray:
        """Sub-matrix holding the rows of the selected candidate sensors."""
        if not selected:
            return np.empty((0, self.n_aug))
        keep = np.zeros(len(self.candidates), dtype=bool)
        for c in selected:
            keep[self.candidates.index(c)] = True
        mask = np.tile(keep, self.window + 1)
        return self.matrix[mask, :]


def sensitivity_matrix(trajectory: Sequence[np.ndarray], inputs: Sequence[float],
                       window: int, candidates: Sequence[int], model: ColumnModel,
                       gain: Optional[np.ndarray] = None,
                       augmented: bool = True) -> SensitivityMatrix:
    """Windowed sensitivity of candidate measurements to the window-start state.

    ``trajectory`` holds head vectors x_0..x_T along a nominal run and
    ``inputs`` the matching irrigation rates; the window uses the last
    ``window + 1`` states.  With ``augmented=False`` the unknown-input
    block is dropped (state observability only).
    """
    candidates = tuple(int(c) for c in candidates)
    n = model.node_count
    n_aug = 2 * n if augmented else n
    if window < n_aug:
        raise ValueError(f"window {window} must be at least {n_aug}")
    if len(trajectory) < window + 1:
        raise ValueError("trajectory does not cover the data window")
    if len(inputs) < len(trajectory) - 1:
        raise ValueError("need one input per trajectory transition")
    start = len(trajectory) - (window + 1)

    blocks = []
    chain = np.eye(n_aug)
    for j in range(window + 1):
        x_j = np.asarray(trajectory[start + j], dtype=float)
        if j > 0:
            x_prev = np.asarray(trajectory[start + j - 1], dtype=float)
            u_prev = float(inputs[start + j - 1])
            if augmented:
                f_aug, _ = augmented_jacobians(x_prev, u_prev, model, candidates, gain)
            else:
                f_aug = state_jacobian(x_prev, u_prev, model)
            chain = f_aug @ chain
        h_jac = output_jacobian(x_j, candidates, model.params)
        if augmented:
            h_row = np.hstack([h_jac, np.zeros((h_jac.shape[0], n))])
        else:
            h_row = h_jac
        blocks.append(h_row @ chain)
    return SensitivityMatrix(matrix=np.vstack(blocks), window=window,
                             candidates=candidates, n_aug=n_aug)


def rank_by_orthogonal_projection(vectors: Sequence[np.ndarray]):
    """Greedy deflation ranking: repeatedly pick the largest residual,
    normalize it, and remove its component from the rest.

    Returns (order, residual_norms), both in selection order.
    """
    vecs = [np.asarray(v, dtype=float).copy() for v in vectors]
    if not vecs:
        raise DegenerateInputError("no candidate vectors supplied")
    length = vecs[0].size
    if any(v.size != length for v in vecs):
        raise ValueError("candidate vectors must share one length")
    if max(np.linalg.norm(v) for v in vecs) == 0.0:
        raise DegenerateInputError("all candidate vectors are zero")

    remaining = list(range(len(vecs)))
    order, norms = [], []
    while remaining:
        res = [np.linalg.norm(vecs[i]) for i in remaining]
        best = int(np.argmax(res))
        idx = remaining.pop(best)
        norm = res[best]
        order.append(idx)
        norms.append(float(norm))
        if norm > 0.0:
            direction = vecs[idx] / norm
            for i in remaining:
                vecs[i] = vecs[i] - (direction @ vecs[i]) * direction
    return order, norms


@dataclass
class SensorRanking:
    """Outcome of the greedy placement loop."""

    order: list  # candidate node indices, best first
    scores: list  # residual norms in selection order
    selected: list  # minimal full-rank prefix
    achieved_rank: int
    target_rank: int
    rank_tolerance: float
    augmented: bool

    def to_dict(self) -> dict:
        return {
            "ranked_candidates": [int(c) for c in self.order],
            "residual_norms": [float(s) for s in self.scores],
            "selected_sensors": [int(c) for c in self.selected],
            "achieved_rank": int(self.achieved_rank),
            "target_rank": int(self.target_rank),
            "rank_tolerance": float(self.rank_tolerance),
            "mode": "augmented" if self.augmented else "states-only",
        }


def _numerical_rank(matrix: np.ndarray, tol: float) -> int:
    if matrix.size == 0:
        return 0
    # Columns mix head units with unknown-input units and the chain spans
    # many orders of magnitude; equilibrate columns before the rank test.
    norms = np.linalg.norm(matrix, axis=0)
    scaled = matrix / np.where(norms > 0.0, norms, 1.0)
    sv = np.linalg.svd(scaled, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv >= tol * sv[0]))


def select_sensors(model: ColumnModel, trajectory: Sequence[np.ndarray],
                   inputs: Sequence[float], window: Optional[int] = None,
                   rank_tolerance: float = 1e-8,
                   gain: Optional[np.ndarray] = None,
                   augmented: bool = True) -> SensorRanking:
    """Greedy minimum sensor set achieving full column rank.

    Candidates are all node indices; each candidate's signature is the
    vectorized row-block it contributes to the windowed sensitivity
    matrix.  Candidates are added in orthogonal-projection rank order
    until the selected rows span the augmented state space.
    """
    n = model.node_count
    target = 2 * n if augmented else n
    if window is None:
        window = target
    candidates = list(range(1, n + 1))
    sens = sensitivity_matrix(trajectory, inputs, window, candidates, model,
                              gain=gain, augmented=augmented)
    signatures = [sens.candidate_signature(c) for c in candidates]
    order_pos, norms = rank_by_orthogonal_projection(signatures)
    order = [candidates[i] for i in order_pos]

    selected = []
    achieved = 0
    for node in order:
        selected.append(node)
        achieved = _numerical_rank(sens.rows_for(selected), rank_tolerance)
        if achieved >= target:
            break
    if achieved < target:
        raise UnobservableConfigurationError(achieved, target)
    return SensorRanking(order=order, scores=norms, selected=selected,
                         achieved_rank=achieved, target_rank=target,
                         rank_tolerance=rank_tolerance, augmented=augmented)
