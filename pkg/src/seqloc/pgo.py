"""Pose-graph refinement of a batch of localization estimates.

Nodes are the global poses T(r<-i) of all frames in the batch; consecutive
frames are linked by relative odometry constraints weighted by the sequence
covariance, with a robust kernel on every factor. The node with the most PnP
inliers is fixed to remove the gauge freedom.

Two modes ship. paper_literal uses only the relative chain: with a single
fixed node the exactly-determined optimum is dead reckoning from the anchor.
prior_augmented (default) additionally anchors every localized node to its
PnP estimate with an inlier-weighted prior, so all localization evidence
shapes the result.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, adjoint, boxminus, boxplus, se3_right_jacobian_inv
from .pose_estimation import PoseEstimate, PoseStatus

# Huber/Tukey transition point on the squared Mahalanobis norm: chi^2-style
# gate scaled to 6 DoF.
DEFAULT_KERNEL_PARAM = 12.59

COST_FLOOR = 1e-24


class PgoMode(str, enum.Enum):
    PAPER_LITERAL = "paper_literal"
    PRIOR_AUGMENTED = "prior_augmented"


class RobustKernel(str, enum.Enum):
    HUBER = "huber"
    TUKEY = "tukey"
    NONE = "none"


class GraphBuildError(ValueError):
    pass


@dataclass
class OdometryEdge:
    """Relative constraint between node i and node i+1."""

    i: int
    measurement: Pose  # (Tq_{i+1})^-1 * Tq_i
    information: np.ndarray  # 6x6


@dataclass
class PriorFactor:
    node: int
    target: Pose
    information: np.ndarray


@dataclass
class PoseGraph:
    nodes: list[Pose]
    frame_ids: list[str]
    fixed: int
    edges: list[OdometryEdge]
    priors: list[PriorFactor]
    kernel: RobustKernel = RobustKernel.HUBER
    kernel_param: float = DEFAULT_KERNEL_PARAM


@dataclass
class PgoReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    edge_weights: list[float] = field(default_factory=list)
    prior_weights: list[float] = field(default_factory=list)


def residual(measurement: Pose, T_a: Pose, T_b: Pose) -> np.ndarray:
    """e = (T_b^-1 T_a) boxminus measurement, for the edge between a=i, b=i+1."""
    return boxminus(T_b.inverse().compose(T_a), measurement)


def residual_with_jacobians(measurement: Pose, T_a: Pose, T_b: Pose):
    """Residual plus its 6x6 Jacobians w.r.t. right perturbations of both nodes."""
    X = T_b.inverse().compose(T_a)
    e = boxminus(X, measurement)
    Jinv = se3_right_jacobian_inv(e)
    J_a = Jinv
    J_b = -Jinv @ adjoint(X.inverse())
    return e, J_a, J_b


def prior_residual_with_jacobian(target: Pose, T: Pose):
    e = boxminus(T, target)
    return e, se3_right_jacobian_inv(e)


def build_graph(
    estimates: list[PoseEstimate],
    odometry: list[Pose],
    covariance: np.ndarray,
    mode: PgoMode | str = PgoMode.PRIOR_AUGMENTED,
    *,
    prior_sigma_scale: float = 10.0,
    kernel: RobustKernel | str = RobustKernel.HUBER,
    kernel_param: float = DEFAULT_KERNEL_PARAM,
) -> PoseGraph:
    """Nodes for all N frames, odometry edges for every consecutive pair.

    Localized nodes start at their PnP estimate; the rest are propagated from
    the nearest localized node along odometry. The max-inlier node is fixed
    (ties: lowest index). prior_augmented adds one prior per localized node
    with covariance prior_sigma_scale^2 * Sigma / inlier_count.
    """
    mode = PgoMode(mode)
    kernel = RobustKernel(kernel)
    n = len(estimates)
    if n != len(odometry):
        raise GraphBuildError(f"{n} estimates vs {len(odometry)} odometry poses")
    localized = [i for i, e in enumerate(estimates) if e.status is PoseStatus.LOCALIZED]
    if not localized:
        raise GraphBuildError("no localized frames in batch")

    nodes: list[Pose] = []
    for i, est in enumerate(estimates):
        if est.status is PoseStatus.LOCALIZED:
            nodes.append(est.pose)
        else:
            near = min(localized, key=lambda l: (abs(l - i), l))
            anchor = estimates[near].pose
            nodes.append(anchor.compose(odometry[near].inverse().compose(odometry[i])))

    counts = np.array([e.inlier_count for e in estimates])
    fixed = int(np.argmax(counts))

    info = np.linalg.inv(covariance)
    info = 0.5 * (info + info.T)
    edges = [
        OdometryEdge(
            i=i,
            measurement=odometry[i + 1].inverse().compose(odometry[i]),
            information=info,
        )
        for i in range(n - 1)
    ]

    priors: list[PriorFactor] = []
    if mode is PgoMode.PRIOR_AUGMENTED:
        for i in localized:
            prior_info = info * (estimates[i].inlier_count / prior_sigma_scale**2)
            priors.append(
                PriorFactor(node=i, target=estimates[i].pose, information=prior_info)
            )

    return PoseGraph(
        nodes=nodes,
        frame_ids=[e.frame_id for e in estimates],
        fixed=fixed,
        edges=edges,
        priors=priors,
        kernel=kernel,
        kernel_param=kernel_param,
    )


def _rho_and_weight(s: float, kernel: RobustKernel, p: float) -> tuple[float, float]:
    """Robust cost and IRLS weight for one factor's squared Mahalanobis norm."""
    if kernel is RobustKernel.NONE or s <= 0.0:
        return s, 1.0
    if kernel is RobustKernel.HUBER:
        if s <= p:
            return s, 1.0
        d = math.sqrt(p)
        return 2.0 * d * math.sqrt(s) - p, d / math.sqrt(s)
    # Tukey biweight
    if s >= p:
        return p / 3.0, 0.0
    r = 1.0 - s / p
    return p / 3.0 * (1.0 - r**3), r * r


def _graph_cost(graph: PoseGraph, nodes: list[Pose]) -> float:
    total = 0.0
    for edge in graph.edges:
        e = residual(edge.measurement, nodes[edge.i], nodes[edge.i + 1])
        rho, _ = _rho_and_weight(float(e @ edge.information @ e), graph.kernel, graph.kernel_param)
        total += rho
    for prior in graph.priors:
        e = boxminus(nodes[prior.node], prior.target)
        rho, _ = _rho_and_weight(float(e @ prior.information @ e), graph.kernel, graph.kernel_param)
        total += rho
    return total


def optimize(
    graph: PoseGraph, max_iters: int = 100, tol: float = 1e-9
) -> tuple[list[Pose], PgoReport]:
    """Levenberg-Marquardt over the free nodes' right perturbations.

    The fixed node is excluded from the state and returned bit-identical to
    its initialization. Accepted steps strictly decrease the robust cost.
    """
    nodes = list(graph.nodes)
    n = len(nodes)
    free = [i for i in range(n) if i != graph.fixed]
    slot = {node: k for k, node in enumerate(free)}
    dim = 6 * len(free)

    cost = _graph_cost(graph, nodes)
    initial_cost = cost
    lam = 1e-4
    converged = False
    iterations = 0

    for _ in range(max_iters):
        if not free or cost < COST_FLOOR:
            converged = True
            break
        H = np.zeros((dim, dim))
        g = np.zeros(dim)

        def add_block(node_idx, J, e, info, w):
            if node_idx not in slot:
                return
            k = slot[node_idx] * 6
            H[k : k + 6, k : k + 6] += w * J.T @ info @ J
            g[k : k + 6] += w * J.T @ info @ e

        def add_cross(na, nb, Ja, Jb, info, w):
            if na not in slot or nb not in slot:
                return
            ka, kb = slot[na] * 6, slot[nb] * 6
            blk = w * Ja.T @ info @ Jb
            H[ka : ka + 6, kb : kb + 6] += blk
            H[kb : kb + 6, ka : ka + 6] += blk.T

        for edge in graph.edges:
            a, b = edge.i, edge.i + 1
            e, Ja, Jb = residual_with_jacobians(edge.measurement, nodes[a], nodes[b])
            _, w = _rho_and_weight(float(e @ edge.information @ e), graph.kernel, graph.kernel_param)
            add_block(a, Ja, e, edge.information, w)
            add_block(b, Jb, e, edge.information, w)
            add_cross(a, b, Ja, Jb, edge.information, w)
        for prior in graph.priors:
            e, J = prior_residual_with_jacobian(prior.target, nodes[prior.node])
            _, w = _rho_and_weight(float(e @ prior.information @ e), graph.kernel, graph.kernel_param)
            add_block(prior.node, J, e, prior.information, w)

        stepped = False
        for _ in range(12):
            try:
                delta = np.linalg.solve(
                    H + lam * np.diag(np.diag(H)) + 1e-15 * np.eye(dim), -g
                )
            except np.linalg.LinAlgError:
                lam *= 10.0
                if lam > 1e15:
                    break
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            candidate = list(nodes)
            for node_idx, k in slot.items():
                candidate[node_idx] = boxplus(nodes[node_idx], delta[6 * k : 6 * k + 6])
            try:
                new_cost = _graph_cost(graph, candidate)
            except ValueError:
                lam *= 10.0
                continue
            if new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                nodes, cost = candidate, new_cost
                lam = max(lam * 0.1, 1e-12)
                stepped = True
                iterations += 1
                if rel < tol or cost < COST_FLOOR:
                    converged = True
                break
            lam *= 10.0
            if lam > 1e15:
                break
        if not stepped:
            # no descent step exists at machine precision: treat as converged
            converged = True
            break
        if converged:
            break

    edge_weights = []
    for edge in graph.edges:
        e = residual(edge.measurement, nodes[edge.i], nodes[edge.i + 1])
        edge_weights.append(
            _rho_and_weight(float(e @ edge.information @ e), graph.kernel, graph.kernel_param)[1]
        )
    prior_weights = []
    for prior in graph.priors:
        e = boxminus(nodes[prior.node], prior.target)
        prior_weights.append(
            _rho_and_weight(float(e @ prior.information @ e), graph.kernel, graph.kernel_param)[1]
        )

    report = PgoReport(
        iterations=iterations,
        initial_cost=initial_cost,
        final_cost=cost,
        converged=converged,
        edge_weights=edge_weights,
        prior_weights=prior_weights,
    )
    return nodes, report
