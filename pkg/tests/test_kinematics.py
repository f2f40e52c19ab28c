"""Kinematic model tests: hand-computed forward kinematics, finite-difference
checks of the spatial velocity Jacobians, and the node graph construction
helpers."""

import json

import numpy as np
import pytest

from twistreg.errors import BindingError
from twistreg.geometry import PointCloud, RigidTransform, rotation_about_axis
from twistreg.kinematics import (
    ArticulatedTree,
    Body,
    Joint,
    NodeGraph,
    RigidModel,
    Skinning,
    bind_points_to_nodes,
    build_node_graph,
    forward_points,
    load_articulated_model,
)


def two_link_arm(floating=False):
    """Root at origin, link2's joint frame 1 m along root x, both revolute about z."""
    bodies = [
        Body("base", -1, RigidTransform.identity(), Joint()),
        Body("link1", 0, RigidTransform.identity(), Joint("revolute", [0, 0, 1])),
        Body("link2", 1, RigidTransform(np.eye(3), [1.0, 0, 0]), Joint("revolute", [0, 0, 1])),
    ]
    return ArticulatedTree(bodies, floating=floating)


class TestRigidModel:
    def test_forward_points_applies_pose(self):
        rng = np.random.default_rng(0)
        cloud = PointCloud(rng.standard_normal((10, 3)))
        pose = RigidTransform(rotation_about_axis([0, 0, 1], 0.3), [1, 2, 3])
        out = forward_points(cloud, RigidModel(pose))
        np.testing.assert_allclose(out.positions, pose.apply(cloud.positions), rtol=1e-15)

    def test_updated_composes(self):
        model = RigidModel()
        tw = np.array([0.1, -0.2, 0.3, 0.01, 0.02, 0.03])
        assert model.updated(tw).pose.almost_equal(
            RigidModel().updated(tw).pose, 1e-15)
        assert model.n_params == 6


class TestForwardKinematics:
    def test_two_link_hand_computed(self):
        # link1 at 90 deg: link2's frame sits at (0, 1, 0) rotated 90 deg
        arm = two_link_arm().with_joint_values([np.pi / 2, 0.0])
        T2 = arm.body_pose(2)
        np.testing.assert_allclose(T2.translation, [0, 1, 0], atol=1e-12)
        np.testing.assert_allclose(T2.rotation, rotation_about_axis([0, 0, 1], np.pi / 2),
                                   atol=1e-12)
        # both at 90 deg: tip frame rotated 180, still at (0, 1, 0)
        arm = arm.with_joint_values([np.pi / 2, np.pi / 2])
        T2 = arm.body_pose(2)
        np.testing.assert_allclose(T2.translation, [0, 1, 0], atol=1e-12)
        np.testing.assert_allclose(T2.rotation, rotation_about_axis([0, 0, 1], np.pi),
                                   atol=1e-12)

    def test_prismatic_joint(self):
        bodies = [
            Body("base", -1, RigidTransform.identity(), Joint()),
            Body("slider", 0, RigidTransform.identity(), Joint("prismatic", [0, 1, 0])),
        ]
        tree = ArticulatedTree(bodies, floating=False, joint_values=[0.7])
        np.testing.assert_allclose(tree.body_pose(1).translation, [0, 0.7, 0], atol=1e-15)
        np.testing.assert_allclose(tree.body_pose(1).rotation, np.eye(3), atol=1e-15)

    def test_base_pose_composes_through(self):
        base = RigidTransform(rotation_about_axis([1, 0, 0], 0.4), [0.1, 0.2, 0.3])
        arm = ArticulatedTree(list(two_link_arm().bodies), floating=True,
                              joint_values=[0.3, -0.2], base_pose=base)
        plain = two_link_arm().with_joint_values([0.3, -0.2])
        expected = base @ plain.body_pose(2)
        assert arm.body_pose(2).almost_equal(expected, 1e-12)

    def test_forward_points_by_body(self):
        arm = two_link_arm()
        pts = np.array([[0.5, 0, 0], [0.5, 0, 0], [0.2, 0.1, 0]])
        cloud = PointCloud(pts)
        tree = ArticulatedTree(list(arm.bodies), floating=False,
                               joint_values=[np.pi / 2, 0.0],
                               point_bodies=np.array([1, 2, 0]))
        out = forward_points(cloud, tree)
        np.testing.assert_allclose(out.positions[0], [0, 0.5, 0], atol=1e-12)
        np.testing.assert_allclose(out.positions[1], [0, 1.5, 0], atol=1e-12)
        np.testing.assert_allclose(out.positions[2], pts[2], atol=1e-15)

    def test_validation(self):
        with pytest.raises(ValueError):
            ArticulatedTree([])
        with pytest.raises(ValueError):
            ArticulatedTree([Body("a", 0, RigidTransform.identity())])
        with pytest.raises(ValueError):
            Joint("revolute", [0, 0, 0])
        with pytest.raises(ValueError):
            Joint("helical", [0, 0, 1])
        with pytest.raises(ValueError):
            two_link_arm().with_joint_values([0.0])


class TestSpatialJacobian:
    @staticmethod
    def numeric_point_jacobian(tree, body, point_local, eps=1e-7):
        """d(world point)/d(params) by central differences through updated()."""
        n = tree.n_params
        J = np.zeros((3, n))
        for c in range(n):
            d = np.zeros(n)
            d[c] = eps
            plus = tree.updated(d).body_pose(body).apply(point_local[None])[0]
            minus = tree.updated(-d).body_pose(body).apply(point_local[None])[0]
            J[:, c] = (plus - minus) / (2 * eps)
        return J

    def check_tree(self, tree, body, rng):
        point_local = rng.uniform(-0.5, 0.5, 3)
        x_world = tree.body_pose(body).apply(point_local[None])[0]
        S = tree.spatial_velocity_jacobian(body)
        # world twist (omega, v) moves x as omega x x + v
        skew_x = np.array([[0, -x_world[2], x_world[1]],
                           [x_world[2], 0, -x_world[0]],
                           [-x_world[1], x_world[0], 0]])
        J_analytic = np.hstack([-skew_x, np.eye(3)]) @ S
        J_numeric = self.numeric_point_jacobian(tree, body, point_local)
        np.testing.assert_allclose(J_analytic, J_numeric, atol=1e-6)

    def test_fixed_base_chain(self):
        rng = np.random.default_rng(1)
        tree = two_link_arm().with_joint_values(rng.uniform(-1, 1, 2))
        for body in (1, 2):
            self.check_tree(tree, body, rng)

    def test_floating_base_chain(self):
        rng = np.random.default_rng(2)
        base = RigidTransform(rotation_about_axis(rng.standard_normal(3), 0.7),
                              rng.uniform(-1, 1, 3))
        tree = ArticulatedTree(list(two_link_arm(floating=True).bodies), floating=True,
                               joint_values=rng.uniform(-1, 1, 2), base_pose=base)
        assert tree.n_params == 8
        for body in (0, 1, 2):
            self.check_tree(tree, body, rng)

    def test_mixed_joint_types(self):
        rng = np.random.default_rng(3)
        bodies = [
            Body("base", -1, RigidTransform.identity(), Joint()),
            Body("pan", 0, RigidTransform(np.eye(3), [0.1, 0, 0.2]),
                 Joint("revolute", [0, 0, 1])),
            Body("lift", 1, RigidTransform(rotation_about_axis([1, 0, 0], 0.3), [0, 0.4, 0]),
                 Joint("prismatic", [0, 0, 1])),
            Body("wrist", 2, RigidTransform(np.eye(3), [0, 0, 0.3]),
                 Joint("revolute", [1, 0, 0])),
        ]
        tree = ArticulatedTree(bodies, floating=True,
                               joint_values=rng.uniform(-0.5, 0.5, 3),
                               base_pose=RigidTransform(
                                   rotation_about_axis([0, 1, 0], -0.4), [0.3, 0, 0.1]))
        for body in range(4):
            self.check_tree(tree, body, rng)

    def test_joint_not_on_path_has_zero_column(self):
        bodies = [
            Body("base", -1, RigidTransform.identity(), Joint()),
            Body("left", 0, RigidTransform(np.eye(3), [1, 0, 0]), Joint("revolute", [0, 0, 1])),
            Body("right", 0, RigidTransform(np.eye(3), [-1, 0, 0]), Joint("revolute", [0, 0, 1])),
        ]
        tree = ArticulatedTree(bodies, floating=False, joint_values=[0.2, -0.4])
        S_left = tree.spatial_velocity_jacobian(1)
        assert np.all(S_left[:, 1] == 0.0)
        assert np.any(S_left[:, 0] != 0.0)

    def test_stacked_jacobians_match_per_body(self):
        rng = np.random.default_rng(5)
        bodies = [Body("base", -1, RigidTransform.identity(), Joint())]
        for i in range(10):
            # random topology: attach to any earlier body
            parent = int(rng.integers(0, len(bodies)))
            kind = "revolute" if rng.random() < 0.7 else "prismatic"
            axis = rng.standard_normal(3)
            bodies.append(Body(f"b{i}", parent,
                               RigidTransform(np.eye(3), rng.uniform(-0.2, 0.2, 3)),
                               Joint(kind, axis / np.linalg.norm(axis))))
        tree = ArticulatedTree(bodies, floating=True,
                               joint_values=rng.uniform(-0.8, 0.8, 10))
        stack = tree.spatial_velocity_jacobians()
        assert stack.shape == (tree.n_bodies, 6, tree.n_params)
        for j in range(tree.n_bodies):
            np.testing.assert_array_equal(stack[j], tree.spatial_velocity_jacobian(j))


class TestNodeGraph:
    def grid_points(self, rng, n=600, extent=0.15):
        return rng.uniform(0, extent, (n, 3))

    def test_node_count_scales_with_spacing(self):
        rng = np.random.default_rng(4)
        pts = self.grid_points(rng)
        nodes_coarse, _ = build_node_graph(pts, spacing=0.05)
        nodes_fine, _ = build_node_graph(pts, spacing=0.025)
        assert len(nodes_fine) > len(nodes_coarse) >= 4
        for nodes in (nodes_coarse, nodes_fine):
            d = np.linalg.norm(nodes[:, None] - nodes[None], axis=2)
            np.fill_diagonal(d, np.inf)
            spacing = 0.05 if nodes is nodes_coarse else 0.025
            assert d.min() >= spacing - 1e-12

    def test_edges_are_sorted_unique_pairs(self):
        rng = np.random.default_rng(5)
        nodes, edges = build_node_graph(self.grid_points(rng), spacing=0.04)
        assert np.all(edges[:, 0] < edges[:, 1])
        assert len({tuple(e) for e in edges}) == len(edges)

    def test_binding_weights(self):
        rng = np.random.default_rng(6)
        pts = self.grid_points(rng)
        nodes, _ = build_node_graph(pts, spacing=0.04)
        sk = bind_points_to_nodes(pts, nodes, radius=0.08)
        assert sk.indices.shape == sk.weights.shape == (len(pts), 4)
        sums = sk.weights.sum(axis=1)
        np.testing.assert_allclose(sums[sk.bound_mask], 1.0, rtol=1e-12)
        assert sk.bound_mask.all()
        # nearer node gets the larger weight
        row = sk.weights[0]
        order = np.argsort(np.linalg.norm(nodes[sk.indices[0]] - pts[0], axis=1))
        assert row[order[0]] == row.max()

    def test_binding_failure_raises(self):
        pts = np.vstack([np.zeros((5, 3)), np.full((5, 3), 10.0)])
        nodes = np.zeros((1, 3))
        with pytest.raises(BindingError):
            bind_points_to_nodes(pts, nodes, radius=0.1)

    def test_identity_graph_is_identity_warp(self):
        rng = np.random.default_rng(7)
        pts = self.grid_points(rng, n=100)
        nodes, edges = build_node_graph(pts, spacing=0.05)
        sk = bind_points_to_nodes(pts, nodes, radius=0.1)
        graph = NodeGraph(nodes, edges, sk)
        out = forward_points(PointCloud(pts), graph)
        np.testing.assert_allclose(out.positions, pts, atol=1e-12)

    def test_uniform_translation_warp(self):
        rng = np.random.default_rng(8)
        pts = self.grid_points(rng, n=100)
        nodes, edges = build_node_graph(pts, spacing=0.05)
        sk = bind_points_to_nodes(pts, nodes, radius=0.1)
        shift = np.array([0.01, -0.02, 0.03])
        transforms = [RigidTransform(np.eye(3), shift) for _ in range(len(nodes))]
        graph = NodeGraph(nodes, edges, sk, transforms)
        out = forward_points(PointCloud(pts), graph)
        np.testing.assert_allclose(out.positions, pts + shift, atol=1e-10)

    def test_single_node_rigid_warp_matches_transform(self):
        rng = np.random.default_rng(9)
        pts = rng.uniform(-0.05, 0.05, (50, 3))
        nodes = np.zeros((1, 3))
        sk = bind_points_to_nodes(pts, nodes, radius=1.0, k=1)
        T = RigidTransform(rotation_about_axis([0.3, 1, 0.2], 0.8), [0.01, 0.02, -0.03])
        graph = NodeGraph(nodes, np.zeros((0, 2), dtype=int), sk, [T])
        out = forward_points(PointCloud(pts), graph)
        np.testing.assert_allclose(out.positions, T.apply(pts), atol=1e-12)

    def test_updated_applies_per_node_twists(self):
        rng = np.random.default_rng(10)
        pts = self.grid_points(rng, n=80)
        nodes, edges = build_node_graph(pts, spacing=0.06)
        sk = bind_points_to_nodes(pts, nodes, radius=0.12)
        graph = NodeGraph(nodes, edges, sk)
        delta = rng.standard_normal(graph.n_params) * 0.01
        moved = graph.updated(delta)
        for k in range(graph.n_nodes):
            tw = delta[6 * k:6 * k + 6]
            assert moved.node_transforms[k].almost_equal(
                RigidModel().updated(tw).pose, 1e-12)

    def test_skinning_validation(self):
        with pytest.raises(ValueError):
            Skinning(np.array([[-1, 0]]), np.array([[0.5, 0.5]]))
        with pytest.raises(ValueError):
            Skinning(np.array([[0]]), np.array([0.5]))


class TestModelFiles:
    def test_round_trip_json(self, tmp_path):
        doc = {
            "floating": True,
            "bodies": [
                {"name": "base", "parent": -1},
                {"name": "link1", "parent": 0,
                 "joint": {"type": "revolute", "axis": [0, 0, 1]}},
                {"name": "link2", "parent": 1,
                 "transform": {"translation": [1.0, 0, 0]},
                 "joint": {"type": "revolute", "axis": [0, 0, 1]}},
            ],
            "joint_values": [0.5 * np.pi, 0.0],
        }
        path = tmp_path / "arm.json"
        path.write_text(json.dumps(doc))
        tree = load_articulated_model(path)
        assert tree.floating and tree.n_params == 8
        np.testing.assert_allclose(tree.body_pose(2).translation, [0, 1, 0], atol=1e-12)
