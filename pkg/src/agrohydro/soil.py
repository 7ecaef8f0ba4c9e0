"""Soil water physics for a 1D unsaturated column.

Implements the van Genuchten-Mualem closure relations, an explicit
finite-difference discretization of the Richards equation with a
prescribed top flux and free drainage at the bottom, a uniform root
water extraction sink, and numeric Jacobians of the resulting
discrete-time state-space maps.

Conventions:
  * capillary pressure head h is in metres, negative when unsaturated;
  * node 1 is the surface node, node ``node_count`` is the bottom node;
  * fluxes are positive downward; the irrigation rate q_T enters the
    top face, free drainage K(h_bottom) leaves the bottom face;
  * node indices exposed through the API are 1-based to match the
    column diagram; head vectors are plain float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "SATURATED_CAPACITY_FLOOR",
    "IntegrationInstabilityError",
    "SoilHydraulicParams",
    "SinkConfig",
    "ColumnModel",
    "LOAM",
    "hydraulic_conductivity",
    "capillary_capacity",
    "moisture_from_head",
    "head_from_moisture",
    "sink_rate",
    "step_state",
    "state_jacobian",
    "output_map",
    "output_jacobian",
]

# Capacity assigned to the saturated branch (h >= 0), 1/m.  Keeps the
# 1/C(h) factor in the time stepping finite when a node saturates.
SATURATED_CAPACITY_FLOOR = 1e-8


class IntegrationInstabilityError(RuntimeError):
    """Raised when an explicit Euler substep produces a non-finite head."""

    def __init__(self, node: int, substep: int):
        self.node = int(node)
        self.substep = int(substep)
        super().__init__(
            f"head blew up at node {self.node} during substep {self.substep}; "
            "increase the substep count or shorten dt"
        )


@dataclass(frozen=True)
class SoilHydraulicParams:
    """van Genuchten-Mualem parameter bundle.

    K_s     saturated hydraulic conductivity, m/s
    theta_s saturated moisture content, m3/m3
    theta_r residual moisture content, m3/m3
    alpha   curve-fitting parameter, 1/m
    n       curve-fitting exponent, dimensionless (> 1)
    """

    K_s: float
    theta_s: float
    theta_r: float
    alpha: float
    n: float

    def __post_init__(self):
        if not self.K_s > 0:
            raise ValueError(f"K_s must be positive, got {self.K_s}")
        if not (0 <= self.theta_r < self.theta_s <= 1):
            raise ValueError(
                f"need 0 <= theta_r < theta_s <= 1, got theta_r={self.theta_r}, "
                f"theta_s={self.theta_s}"
            )
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.n > 1:
            raise ValueError(f"n must exceed 1, got {self.n}")

    @property
    def m(self) -> float:
        return 1.0 - 1.0 / self.n


#: Loam column parameters (Carsel & Parrish soil class).
LOAM = SoilHydraulicParams(K_s=2.89e-6, theta_s=0.430, theta_r=0.0780, alpha=3.60, n=1.56)


@dataclass(frozen=True)
class SinkConfig:
    """Root water extraction: uniform K_c * E_t / root_depth over the root zone."""

    crop_coefficient: float = 0.0
    evapotranspiration_rate: float = 0.0  # m/s
    root_depth: float = 0.30  # m
    enabled: bool = False

    def __post_init__(self):
        if self.evapotranspiration_rate < 0:
            raise ValueError("evapotranspiration_rate must be non-negative")
        if not self.root_depth > 0:
            raise ValueError("root_depth must be positive")


@dataclass(frozen=True)
class ColumnModel:
    """Discretized soil column: grid, soil parameters, time step, sink."""

    depth: float
    node_count: int
    dz: float
    params: SoilHydraulicParams
    dt: float = 120.0
    substeps: int = 12
    sink: SinkConfig = field(default_factory=SinkConfig)
    internode_mean: str = "arithmetic"  # or "geometric"

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError("node_count must be at least 1")
        if abs(self.dz * self.node_count - self.depth) > 1e-9 * max(self.depth, 1.0):
            raise ValueError(
                f"dz * node_count = {self.dz * self.node_count} does not match depth {self.depth}"
            )
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.internode_mean not in ("arithmetic", "geometric"):
            raise ValueError(f"unknown internode_mean {self.internode_mean!r}")
        if self.sink.enabled and self.sink.root_depth > self.depth + 1e-12:
            raise ValueError("root_depth cannot exceed the column depth")

    @classmethod
    def uniform(cls, depth: float, node_count: int, params: SoilHydraulicParams,
                **kwargs) -> "ColumnModel":
        return cls(depth=depth, node_count=node_count, dz=depth / node_count,
                   params=params, **kwargs)

    def with_sink(self, sink: SinkConfig) -> "ColumnModel":
        return replace(self, sink=sink)

    def node_depths(self) -> np.ndarray:
        """Depth of each node center below the surface, m (1-based node order)."""
        return (np.arange(self.node_count) + 0.5) * self.dz


def _as_head(h, allow_vector=True):
    arr = np.asarray(h, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("pressure head must be finite")
    if not allow_vector and arr.ndim != 0:
        raise ValueError("expected a scalar pressure head")
    return arr


def hydraulic_conductivity(h, params: SoilHydraulicParams):
    """Unsaturated hydraulic conductivity K(h), m/s; K_s on the saturated branch."""
    arr = _as_head(h)
    hn = np.minimum(arr, 0.0)
    m = params.m
    with np.errstate(over="ignore"):
        se = (1.0 + (-params.alpha * hn) ** params.n) ** (-m)
        k = params.K_s * np.sqrt(se) * (1.0 - (1.0 - se ** (1.0 / m)) ** m) ** 2
    out = np.where(arr >= 0.0, params.K_s, k)
    return float(out) if arr.ndim == 0 else out


def capillary_capacity(h, params: SoilHydraulicParams):
    """Capillary capacity c(h) = d(theta)/dh, 1/m; floored on the saturated branch."""
    arr = _as_head(h)
    hn = np.minimum(arr, -1e-300)
    m = params.m
    x = -params.alpha * hn
    with np.errstate(over="ignore"):
        c = ((params.theta_s - params.theta_r) * params.alpha * params.n * m
             * x ** (params.n - 1.0) * (1.0 + x ** params.n) ** (-(2.0 - 1.0 / params.n)))
    out = np.where(arr >= 0.0, SATURATED_CAPACITY_FLOOR, c)
    return float(out) if arr.ndim == 0 else out


def moisture_from_head(h, params: SoilHydraulicParams):
    """Volumetric moisture content theta(h), m3/m3; theta_s on the saturated branch."""
    arr = _as_head(h)
    hn = np.minimum(arr, 0.0)
    with np.errstate(over="ignore"):
        se = (1.0 / (1.0 + (-params.alpha * hn) ** params.n)) ** params.m
    theta = (params.theta_s - params.theta_r) * se + params.theta_r
    out = np.where(arr >= 0.0, params.theta_s, theta)
    return float(out) if arr.ndim == 0 else out


def head_from_moisture(theta, params: SoilHydraulicParams):
    """Analytic inverse of moisture_from_head on (theta_r, theta_s]."""
    arr = np.asarray(theta, dtype=float)
    if np.any(arr <= params.theta_r) or np.any(arr > params.theta_s):
        raise ValueError(
            f"moisture content must lie in ({params.theta_r}, {params.theta_s}]"
        )
    se = (arr - params.theta_r) / (params.theta_s - params.theta_r)
    with np.errstate(divide="ignore"):
        h = -np.where(
            se >= 1.0, 0.0,
            (se ** (-1.0 / params.m) - 1.0) ** (1.0 / params.n) / params.alpha,
        )
    return float(h) if arr.ndim == 0 else h


def sink_rate(h, node_index: int, sink: SinkConfig, column: ColumnModel) -> float:
    """Root extraction rate at one node, m3 m-3 s-1 (1-based node index)."""
    if not 1 <= node_index <= column.node_count:
        raise ValueError(f"node index {node_index} outside 1..{column.node_count}")
    _as_head(h)
    if not sink.enabled:
        return 0.0
    center = (node_index - 0.5) * column.dz
    if center > sink.root_depth:
        return 0.0
    return sink.crop_coefficient * sink.evapotranspiration_rate / sink.root_depth


def _sink_vector(column: ColumnModel) -> np.ndarray:
    sink = column.sink
    if not sink.enabled:
        return np.zeros(column.node_count)
    rate = sink.crop_coefficient * sink.evapotranspiration_rate / sink.root_depth
    return np.where(column.node_depths() <= sink.root_depth, rate, 0.0)


def _advance(h: np.ndarray, u: float, column: ColumnModel) -> np.ndarray:
    """Advance a head vector (or a batch of columns) one sampling interval.

    ``h`` has shape (n,) or (n, b); all columns share the irrigation rate u.
    """
    p = column.params
    dz = column.dz
    dt_sub = column.dt / column.substeps
    sink = _sink_vector(column)
    if h.ndim == 2:
        sink = sink[:, None]
    cur = np.array(h, dtype=float)
    for s in range(column.substeps):
        k = hydraulic_conductivity(cur, p)
        c = capillary_capacity(cur, p)
        if column.internode_mean == "arithmetic":
            k_half = 0.5 * (k[:-1] + k[1:])
        else:
            k_half = np.sqrt(k[:-1] * k[1:])
        # downward Darcy flux between adjacent nodes; +1 gravity term with z
        # measured upward, equivalently -K*((h[i+1]-h[i])/dz - 1) with z down
        q_inner = -k_half * ((cur[1:] - cur[:-1]) / dz - 1.0)
        q_top = np.full_like(cur[:1], u)
        q_bottom = k[-1:]  # free drainage: unit total-head gradient
        q = np.concatenate([q_top, q_inner, q_bottom], axis=0)
        with np.errstate(all="ignore"):  # blow-ups are caught just below
            cur = cur + dt_sub * ((q[:-1] - q[1:]) / dz - sink) / c
        bad = ~np.isfinite(cur)
        if bad.any():
            node = int(np.argwhere(bad)[0][0]) + 1
            raise IntegrationInstabilityError(node, s + 1)
    return cur


def step_state(x: np.ndarray, u: float, column: ColumnModel) -> np.ndarray:
    """One sampling interval of the discretized Richards equation."""
    x = np.asarray(x, dtype=float)
    if x.shape != (column.node_count,):
        raise ValueError(f"state must have shape ({column.node_count},)")
    if not np.all(np.isfinite(x)):
        raise ValueError("state must be finite")
    if u < 0:
        raise ValueError("irrigation rate must be non-negative")
    return _advance(x, u, column)


def state_jacobian(x: np.ndarray, u: float, column: ColumnModel) -> np.ndarray:
    """Jacobian F = d(step_state)/dx by central finite differences."""
    x = np.asarray(x, dtype=float)
    n = column.node_count
    step = np.maximum(1e-7, 1e-7 * np.abs(x))
    batch = np.concatenate([x[:, None] + np.diag(step), x[:, None] - np.diag(step)],
                           axis=1)
    out = _advance(batch, u, column)
    return (out[:, :n] - out[:, n:]) / (2.0 * step[None, :])


def step_and_jacobian(x: np.ndarray, u: float, column: ColumnModel):
    """step_state and state_jacobian from one batched sweep."""
    x = np.asarray(x, dtype=float)
    n = column.node_count
    step = np.maximum(1e-7, 1e-7 * np.abs(x))
    batch = np.concatenate(
        [x[:, None], x[:, None] + np.diag(step), x[:, None] - np.diag(step)], axis=1)
    out = _advance(batch, u, column)
    jac = (out[:, 1:n + 1] - out[:, n + 1:]) / (2.0 * step[None, :])
    return out[:, 0], jac


def _check_sensors(sensors: Iterable[int], node_count: int) -> np.ndarray:
    idx = np.asarray(list(sensors), dtype=int)
    if idx.size and (idx.min() < 1 or idx.max() > node_count):
        raise ValueError(f"sensor indices must lie in 1..{node_count}, got {idx}")
    return idx


def output_map(x: np.ndarray, sensors: Sequence[int],
               params: SoilHydraulicParams) -> np.ndarray:
    """Moisture measurements at the sensed nodes: y_i = theta(h_{s_i})."""
    x = np.asarray(x, dtype=float)
    idx = _check_sensors(sensors, x.size)
    if idx.size == 0:
        return np.empty(0)
    return moisture_from_head(x[idx - 1], params)


def output_jacobian(x: np.ndarray, sensors: Sequence[int],
                    params: SoilHydraulicParams) -> np.ndarray:
    """Jacobian of output_map: row i holds c(h_{s_i}) in column s_i."""
    x = np.asarray(x, dtype=float)
    idx = _check_sensors(sensors, x.size)
    jac = np.zeros((idx.size, x.size))
    if idx.size:
        jac[np.arange(idx.size), idx - 1] = capillary_capacity(x[idx - 1], params)
    return jac
