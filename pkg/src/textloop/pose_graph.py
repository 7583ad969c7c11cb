"""Pose graph optimization over SE(3) relative-pose edges.

Nodes are absolute poses; each edge measures the pose of node j expressed in
node i's frame.  Levenberg-Marquardt with analytic Jacobians and a sparse
normal-equation solve.  The first node is held fixed to pin the gauge freedom.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix, identity as sparse_identity
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from .geometry import Pose, adjoint, exp_map, log_map, se3_right_jacobian_inverse
from .loop_closure import LoopConstraint

ODOM_SIGMA_T = 0.02
ODOM_SIGMA_R = 0.005

_LAMBDA_MAX = 1e12
_LAMBDA_MIN = 1e-12
_COST_FLOOR = 1e-20


class SingularNormalEquations(RuntimeError):
    """The damped normal equations could not be solved."""


@dataclass(frozen=True)
class PoseGraphEdge:
    i: int
    j: int
    measured: Pose
    information: np.ndarray

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError(f"edge endpoints must differ, got {self.i}")
        info = np.asarray(self.information, dtype=float).reshape(6, 6)
        object.__setattr__(self, "information", info)


@dataclass(frozen=True)
class OptimizationReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool


def _robust_cost(s: float, delta: float | None) -> float:
    if delta is None or s <= delta * delta:
        return s
    return 2.0 * delta * np.sqrt(s) - delta * delta


def _robust_weight(s: float, delta: float | None) -> float:
    if delta is None or s <= delta * delta:
        return 1.0
    return delta / np.sqrt(s)


class PoseGraph:
    def __init__(self, nodes):
        self.nodes: list[Pose] = list(nodes)
        self.edges: list[PoseGraphEdge] = []

    @classmethod
    def from_odometry(
        cls, poses, sigma_t: float = ODOM_SIGMA_T, sigma_r: float = ODOM_SIGMA_R
    ) -> "PoseGraph":
        """Chain graph whose edges measure the odometry increments."""
        graph = cls(poses)
        info = np.diag([1.0 / sigma_t**2] * 3 + [1.0 / sigma_r**2] * 3)
        for k in range(len(graph.nodes) - 1):
            measured = graph.nodes[k].inverse() @ graph.nodes[k + 1]
            graph.edges.append(PoseGraphEdge(k, k + 1, measured, info))
        return graph

    def add_edge(self, i: int, j: int, measured: Pose, information: np.ndarray) -> None:
        n = len(self.nodes)
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"edge ({i}, {j}) outside node range {n}")
        self.edges.append(PoseGraphEdge(i, j, measured, information))

    def add_loop(self, constraint: LoopConstraint) -> None:
        self.add_edge(
            constraint.frame_i,
            constraint.frame_j,
            constraint.relative_pose,
            constraint.information,
        )

    def residual(self, edge: PoseGraphEdge, nodes=None) -> np.ndarray:
        nodes = self.nodes if nodes is None else nodes
        x = nodes[edge.i].inverse() @ nodes[edge.j]
        return log_map(edge.measured.inverse() @ x)

    def edge_jacobians(self, edge: PoseGraphEdge):
        """Residual and its derivatives for right perturbations of the two nodes."""
        x = self.nodes[edge.i].inverse() @ self.nodes[edge.j]
        r = log_map(edge.measured.inverse() @ x)
        jr_inv = se3_right_jacobian_inverse(r)
        return r, -jr_inv @ adjoint(x.inverse()), jr_inv

    def cost(self, nodes=None, huber_delta: float | None = None) -> float:
        total = 0.0
        for edge in self.edges:
            r = self.residual(edge, nodes)
            total += _robust_cost(float(r @ edge.information @ r), huber_delta)
        return total

    def _linearize(self, huber_delta):
        dim = 6 * (len(self.nodes) - 1)
        rows, cols, vals = [], [], []
        b = np.zeros(dim)
        span = np.arange(6)
        for edge in self.edges:
            r, j_i, j_j = self.edge_jacobians(edge)
            weight = _robust_weight(float(r @ edge.information @ r), huber_delta)
            info = edge.information * weight
            blocks = []
            if edge.i > 0:
                blocks.append((edge.i - 1, j_i))
            if edge.j > 0:
                blocks.append((edge.j - 1, j_j))
            for var_a, jac_a in blocks:
                b[6 * var_a : 6 * var_a + 6] += jac_a.T @ info @ r
                for var_b, jac_b in blocks:
                    rows.append(np.repeat(6 * var_a + span, 6))
                    cols.append(np.tile(6 * var_b + span, 6))
                    vals.append((jac_a.T @ info @ jac_b).ravel())
        if vals:
            h = coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(dim, dim),
            ).tocsr()
        else:
            h = coo_matrix((dim, dim)).tocsr()
        return h, b

    def _solve(self, h, b, lam):
        dim = h.shape[0]
        system = (h + lam * sparse_identity(dim, format="csr")).tocsc()
        with warnings.catch_warnings():
            warnings.simplefilter("error", MatrixRankWarning)
            try:
                delta = spsolve(system, -b)
            except MatrixRankWarning as exc:
                raise SingularNormalEquations("normal equations are singular") from exc
        delta = np.atleast_1d(np.asarray(delta, dtype=float))
        if not np.all(np.isfinite(delta)):
            raise SingularNormalEquations("normal equation solve produced non-finite step")
        return delta

    def _retract(self, delta):
        nodes = [self.nodes[0]]
        for k in range(1, len(self.nodes)):
            nodes.append(self.nodes[k] @ exp_map(delta[6 * (k - 1) : 6 * k]))
        return nodes

    def optimize(
        self,
        max_iterations: int = 100,
        lambda_init: float = 1e-6,
        huber_delta: float | None = None,
        tolerance: float = 1e-12,
    ) -> OptimizationReport:
        """Minimize the weighted residual cost in place; node 0 never moves."""
        cost = self.cost(huber_delta=huber_delta)
        initial = cost
        if len(self.nodes) <= 1 or not self.edges:
            return OptimizationReport(initial, cost, 0, True)
        lam = lambda_init
        converged = False
        iteration = 0
        while iteration < max_iterations:
            if cost < _COST_FLOOR:
                converged = True
                break
            h, b = self._linearize(huber_delta)
            improved = False
            while lam <= _LAMBDA_MAX:
                delta = self._solve(h, b, lam)
                trial = self._retract(delta)
                trial_cost = self.cost(nodes=trial, huber_delta=huber_delta)
                if trial_cost < cost:
                    decrease = cost - trial_cost
                    self.nodes = trial
                    cost = trial_cost
                    lam = max(lam * 0.3, _LAMBDA_MIN)
                    improved = True
                    step = float(np.max(np.abs(delta)))
                    if step < tolerance or decrease <= tolerance * (1.0 + cost):
                        converged = True
                    break
                lam *= 10.0
            iteration += 1
            if not improved:
                # no damped step reduces the cost: already at a local minimum
                converged = True
                break
            if converged:
                break
        return OptimizationReport(initial, cost, iteration, converged)
