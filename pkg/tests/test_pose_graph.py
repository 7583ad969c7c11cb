"""Tests for the SE(3) pose graph: residuals, Jacobians, and the LM solver."""

import numpy as np
import pytest

from textloop.geometry import Pose, exp_map, random_pose
from textloop.loop_closure import LoopConstraint, LoopSource
from textloop.pose_graph import (
    OptimizationReport,
    PoseGraph,
    PoseGraphEdge,
    SingularNormalEquations,
)


def _yaw_pose(yaw, t):
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose(rot, np.asarray(t, dtype=float))


def test_edge_rejects_self_loop():
    with pytest.raises(ValueError):
        PoseGraphEdge(2, 2, Pose.identity(), np.eye(6))


def test_add_edge_checks_node_range():
    graph = PoseGraph([Pose.identity(), Pose.identity()])
    with pytest.raises(ValueError):
        graph.add_edge(0, 5, Pose.identity(), np.eye(6))


def test_from_odometry_structure():
    rng = np.random.default_rng(3)
    poses = [random_pose(rng) for _ in range(4)]
    graph = PoseGraph.from_odometry(poses)
    assert len(graph.edges) == 3
    for k, edge in enumerate(graph.edges):
        assert (edge.i, edge.j) == (k, k + 1)
        assert edge.measured.is_close(poses[k].inverse() @ poses[k + 1], tol=1e-12)
        assert np.allclose(np.diag(edge.information), [2500.0] * 3 + [40000.0] * 3)


def test_residual_zero_on_consistent_edge():
    rng = np.random.default_rng(11)
    nodes = [random_pose(rng) for _ in range(3)]
    graph = PoseGraph(nodes)
    graph.add_edge(0, 2, nodes[0].inverse() @ nodes[2], np.eye(6))
    assert np.linalg.norm(graph.residual(graph.edges[0])) < 1e-12


def test_residual_pure_translation():
    graph = PoseGraph([Pose.identity(), Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))])
    graph.add_edge(0, 1, Pose.identity(), np.eye(6))
    assert np.allclose(graph.residual(graph.edges[0]), [1.0, 0.0, 0.0, 0.0, 0.0, 0.0])


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(29)
    eps = 1e-6
    for _ in range(20):
        nodes = [random_pose(rng) for _ in range(3)]
        graph = PoseGraph(nodes)
        graph.add_edge(1, 2, random_pose(rng, max_angle=1.0), np.eye(6))
        edge = graph.edges[0]
        r0, j_i, j_j = graph.edge_jacobians(edge)
        for node_index, analytic in ((1, j_i), (2, j_j)):
            numeric = np.zeros((6, 6))
            for k in range(6):
                step = np.zeros(6)
                step[k] = eps
                plus = list(nodes)
                plus[node_index] = nodes[node_index] @ exp_map(step)
                minus = list(nodes)
                minus[node_index] = nodes[node_index] @ exp_map(-step)
                numeric[:, k] = (
                    graph.residual(edge, plus) - graph.residual(edge, minus)
                ) / (2.0 * eps)
            scale = max(1.0, float(np.abs(analytic).max()))
            assert np.abs(analytic - numeric).max() / scale < 1e-5


def test_optimize_is_noop_without_loops():
    rng = np.random.default_rng(5)
    poses = [Pose.identity()]
    for _ in range(10):
        poses.append(poses[-1] @ random_pose(rng, max_angle=0.3, max_radius=1.0))
    graph = PoseGraph.from_odometry(poses)
    report = graph.optimize()
    assert report.final_cost <= report.initial_cost
    assert report.initial_cost < 1e-18
    assert report.converged
    for before, after in zip(poses, graph.nodes):
        assert after.is_close(before, tol=1e-12)


def test_two_node_weighted_mean():
    # two disagreeing translation measurements: minimum of
    # 100 (x - 1)^2 + 300 (x - 1.2)^2 sits at x = 1.15
    graph = PoseGraph([Pose.identity(), Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))])
    graph.add_edge(0, 1, Pose(np.eye(3), np.array([1.0, 0.0, 0.0])), 100.0 * np.eye(6))
    graph.add_edge(0, 1, Pose(np.eye(3), np.array([1.2, 0.0, 0.0])), 300.0 * np.eye(6))
    report = graph.optimize()
    assert report.final_cost < report.initial_cost
    assert np.allclose(graph.nodes[1].translation, [1.15, 0.0, 0.0], atol=1e-9)
    assert np.allclose(graph.nodes[1].rotation, np.eye(3), atol=1e-9)


def _drifted_ring(n=24, radius=6.0, bias=(0.01, 0.002, 0.0, 0.0, 0.0, 0.004)):
    """Ground-truth circle plus odometry that accumulates a fixed bias per step."""
    gt = []
    for k in range(n + 1):
        phi = 2.0 * np.pi * (k % n) / n
        gt.append(_yaw_pose(phi + np.pi / 2.0, [radius * np.cos(phi), radius * np.sin(phi), 0.0]))
    twist = exp_map(np.array(bias))
    odom = [gt[0]]
    for k in range(1, n + 1):
        odom.append(odom[-1] @ (gt[k - 1].inverse() @ gt[k]) @ twist)
    return gt, odom


def test_loop_edge_closes_drifted_ring():
    gt, odom = _drifted_ring()
    gap_before = np.linalg.norm(odom[-1].translation - odom[0].translation)
    assert gap_before > 0.3
    graph = PoseGraph.from_odometry(odom)
    # revisit measurement: the last pose coincides with the first
    graph.add_edge(len(odom) - 1, 0, Pose.identity(), 1e6 * np.eye(6))
    report = graph.optimize()
    assert report.final_cost < report.initial_cost
    assert report.converged
    gap_after = np.linalg.norm(graph.nodes[-1].translation - graph.nodes[0].translation)
    assert gap_after < 0.01 * gap_before


def test_first_node_stays_fixed():
    gt, odom = _drifted_ring()
    graph = PoseGraph.from_odometry(odom)
    graph.add_edge(len(odom) - 1, 0, Pose.identity(), 1e6 * np.eye(6))
    graph.optimize()
    assert np.array_equal(graph.nodes[0].rotation, odom[0].rotation)
    assert np.array_equal(graph.nodes[0].translation, odom[0].translation)


def test_add_loop_uses_constraint_fields():
    nodes = [Pose.identity() for _ in range(5)]
    graph = PoseGraph(nodes)
    constraint = LoopConstraint(
        frame_i=4,
        frame_j=1,
        relative_pose=_yaw_pose(0.2, [0.5, 0.0, 0.0]),
        information=np.diag([100.0] * 3 + [400.0] * 3),
        source=LoopSource.ID_TEXT,
    )
    graph.add_loop(constraint)
    edge = graph.edges[-1]
    assert (edge.i, edge.j) == (4, 1)
    assert edge.measured.is_close(constraint.relative_pose, tol=1e-12)
    assert np.allclose(edge.information, constraint.information)


def _outlier_chain():
    """Straight chain with exact odometry, one true loop edge, one corrupted one."""
    gt = [Pose(np.eye(3), np.array([float(k), 0.0, 0.0])) for k in range(5)]
    graph = PoseGraph.from_odometry(gt)
    graph.add_edge(4, 0, gt[4].inverse() @ gt[0], 100.0 * np.eye(6))
    bad = Pose(np.eye(3), np.array([-1.0, 0.0, 0.0]))  # truth is [-3, 0, 0]
    graph.add_edge(3, 0, bad, 100.0 * np.eye(6))
    return gt, graph


def test_huber_downweights_outlier_edge():
    gt, plain = _outlier_chain()
    plain.optimize()
    plain_err = max(
        np.linalg.norm(node.translation - ref.translation) for node, ref in zip(plain.nodes, gt)
    )
    _, robust = _outlier_chain()
    report = robust.optimize(huber_delta=1.0)
    robust_err = max(
        np.linalg.norm(node.translation - ref.translation)
        for node, ref in zip(robust.nodes, gt)
    )
    assert report.final_cost <= report.initial_cost
    assert plain_err > 0.1
    assert robust_err < 0.05
    assert robust_err < plain_err / 3.0


def test_singular_system_raises():
    # node 2 is not touched by any edge, so with zero damping the system is singular
    nodes = [Pose.identity(), Pose(np.eye(3), np.array([1.0, 0.0, 0.0])), Pose.identity()]
    graph = PoseGraph(nodes)
    graph.add_edge(0, 1, Pose(np.eye(3), np.array([1.1, 0.0, 0.0])), np.eye(6))
    with pytest.raises(SingularNormalEquations):
        graph.optimize(lambda_init=0.0)


def test_report_fields():
    graph = PoseGraph([Pose.identity()])
    report = graph.optimize()
    assert isinstance(report, OptimizationReport)
    assert report.iterations == 0
    assert report.converged
