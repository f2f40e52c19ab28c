"""Kinematic models the registration can fit: a single rigid pose, a joint
tree, or a graph of deformation nodes.

All three expose the same two capabilities the EM loop needs: push the
reference model points through the current parameters (forward_points) and
describe how points move under a parameter perturbation (the solver builds
Jacobians from body twists via spatial_velocity_jacobian, or from skinning
weights for node graphs). Parameter updates return new snapshots; a model
instance is never mutated.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import BindingError
from .geometry import (
    PointCloud,
    RigidTransform,
    apply_twist,
    blend_node_transforms,
    rigid_to_dq,
)

JOINT_TYPES = ("revolute", "prismatic", "fixed")


@dataclass(frozen=True)
class RigidModel:
    """A single pose applied to every model point."""

    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    @property
    def n_params(self) -> int:
        return 6

    def updated(self, twist: np.ndarray) -> "RigidModel":
        return RigidModel(apply_twist(twist, self.pose))


@dataclass(frozen=True)
class Joint:
    kind: str = "fixed"
    axis: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in JOINT_TYPES:
            raise ValueError(f"unknown joint type {self.kind!r}")
        if self.kind != "fixed":
            axis = np.asarray(self.axis, dtype=float).reshape(3)
            n = np.linalg.norm(axis)
            if not np.isfinite(n) or n == 0:
                raise ValueError("joint axis must be a nonzero 3-vector")
            object.__setattr__(self, "axis", axis / n)

    def motion(self, value: float) -> RigidTransform:
        if self.kind == "fixed":
            return RigidTransform.identity()
        if self.kind == "revolute":
            tw = np.concatenate([self.axis * value, np.zeros(3)])
            return apply_twist(tw, RigidTransform.identity())
        return RigidTransform(np.eye(3), self.axis * value)


@dataclass(frozen=True)
class Body:
    name: str
    parent: int                      # -1 for the root
    transform: RigidTransform        # parent frame -> this body's joint frame
    joint: Joint = field(default_factory=Joint)


class ArticulatedTree:
    """Joint tree with an optionally floating root.

    Parameters are stacked as [root twist chart (6, when floating)] followed
    by one value per movable joint in body order. The root chart is centered
    at the current base pose: evaluating it at zero reproduces the stored
    state, and updates act multiplicatively through apply_twist.
    """

    def __init__(self, bodies: list[Body], floating: bool = True,
                 joint_values: np.ndarray | None = None,
                 base_pose: RigidTransform | None = None,
                 point_bodies: np.ndarray | None = None):
        if not bodies:
            raise ValueError("tree needs at least one body")
        if bodies[0].parent != -1:
            raise ValueError("first body must be the root (parent -1)")
        for i, b in enumerate(bodies[1:], start=1):
            if not 0 <= b.parent < i:
                raise ValueError(f"body {i} must have a parent earlier in the list")
        if bodies[0].joint.kind != "fixed":
            raise ValueError("root mobility comes from the floating flag, not a joint")
        self.bodies = tuple(bodies)
        self.floating = bool(floating)
        self._movable = [i for i, b in enumerate(bodies) if b.joint.kind != "fixed"]
        joint_values = (np.zeros(len(self._movable)) if joint_values is None
                        else np.asarray(joint_values, dtype=float).reshape(-1))
        if joint_values.shape != (len(self._movable),):
            raise ValueError(f"expected {len(self._movable)} joint values, "
                             f"got {joint_values.shape}")
        self.joint_values = joint_values
        self.base_pose = base_pose if base_pose is not None else RigidTransform.identity()
        if point_bodies is not None:
            point_bodies = np.asarray(point_bodies, dtype=int).reshape(-1)
            if point_bodies.min() < 0 or point_bodies.max() >= len(bodies):
                raise ValueError("point binding references a body out of range")
        self.point_bodies = point_bodies
        self._world = self._forward_kinematics()
        self._jacobians = None

    @property
    def n_params(self) -> int:
        return (6 if self.floating else 0) + len(self._movable)

    @property
    def n_bodies(self) -> int:
        return len(self.bodies)

    def _forward_kinematics(self) -> list[RigidTransform]:
        values = {}
        for slot, idx in enumerate(self._movable):
            values[idx] = self.joint_values[slot]
        world = []
        for i, body in enumerate(self.bodies):
            local = body.transform @ body.joint.motion(values.get(i, 0.0))
            if i == 0:
                world.append(self.base_pose @ local)
            else:
                world.append(world[body.parent] @ local)
        return world

    def body_pose(self, index: int) -> RigidTransform:
        return self._world[index]

    def joint_origin(self, index: int) -> np.ndarray:
        """World position of body `index`'s joint frame origin."""
        return self._world[index].translation

    def joint_axis_world(self, index: int) -> np.ndarray:
        body = self.bodies[index]
        if body.joint.kind == "fixed":
            raise ValueError(f"body {index} has no movable joint")
        # the joint frame carries the axis; rotation does not move its own axis
        return self._world[index].rotation @ body.joint.axis

    def spatial_velocity_jacobian(self, body_index: int) -> np.ndarray:
        """(6, n_params) mapping parameter rates to the body's world twist.

        Twist convention matches point_twist_jacobian: a world point x on the
        body moves as dx = omega x x + v.
        """
        J = np.zeros((6, self.n_params))
        col0 = 0
        if self.floating:
            J[:, :6] = np.eye(6)
            col0 = 6
        ancestors = set()
        i = body_index
        while i != -1:
            ancestors.add(i)
            i = self.bodies[i].parent
        for slot, idx in enumerate(self._movable):
            if idx not in ancestors:
                continue
            body = self.bodies[idx]
            axis = self.joint_axis_world(idx)
            origin = self.joint_origin(idx)
            if body.joint.kind == "revolute":
                J[:3, col0 + slot] = axis
                J[3:, col0 + slot] = np.cross(origin, axis)
            else:
                J[3:, col0 + slot] = axis
        return J

    def spatial_velocity_jacobians(self) -> np.ndarray:
        """(n_bodies, 6, n_params) stack of spatial_velocity_jacobian rows.

        Every body sees the same world twist per joint; a body's Jacobian
        just keeps the columns of its ancestor joints. Building the shared
        6 x n_params twist matrix once and masking it per body keeps the
        cost O(n_bodies), where one ancestor walk per body would be
        O(n_bodies x n_joints).
        """
        if self._jacobians is None:
            nb, P = self.n_bodies, self.n_params
            col0 = 6 if self.floating else 0
            Z = np.zeros((6, P))
            mask = np.zeros((nb, P), dtype=bool)
            if self.floating:
                Z[:, :6] = np.eye(6)
                mask[:, :6] = True
            ancestry = np.zeros((nb, nb), dtype=bool)
            for i, body in enumerate(self.bodies):
                ancestry[i, i] = True
                if body.parent != -1:
                    ancestry[i] |= ancestry[body.parent]
            for slot, idx in enumerate(self._movable):
                axis = self.joint_axis_world(idx)
                if self.bodies[idx].joint.kind == "revolute":
                    Z[:3, col0 + slot] = axis
                    Z[3:, col0 + slot] = np.cross(self.joint_origin(idx), axis)
                else:
                    Z[3:, col0 + slot] = axis
                mask[:, col0 + slot] = ancestry[:, idx]
            self._jacobians = Z[None, :, :] * mask[:, None, :]
        return self._jacobians

    def updated(self, delta: np.ndarray) -> "ArticulatedTree":
        """New tree with base chart updated multiplicatively, joints additively."""
        delta = np.asarray(delta, dtype=float).reshape(self.n_params)
        base = self.base_pose
        joints = self.joint_values
        if self.floating:
            base = apply_twist(delta[:6], base)
            joints = joints + delta[6:]
        else:
            joints = joints + delta
        return ArticulatedTree(list(self.bodies), self.floating, joints, base,
                               self.point_bodies)

    def with_joint_values(self, joint_values, base_pose=None) -> "ArticulatedTree":
        return ArticulatedTree(list(self.bodies), self.floating, joint_values,
                               base_pose if base_pose is not None else self.base_pose,
                               self.point_bodies)


@dataclass(frozen=True)
class Skinning:
    """Per-point node attachment: up to K indices (-1 padding) and weights."""

    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int)
        w = np.asarray(self.weights, dtype=float)
        if idx.shape != w.shape or idx.ndim != 2:
            raise ValueError("indices and weights must both be (n, K)")
        if np.any((idx < 0) & (w != 0.0)):
            raise ValueError("padding entries must carry zero weight")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    @property
    def bound_mask(self) -> np.ndarray:
        return self.weights.sum(axis=1) > 0


class NodeGraph:
    """Deformation nodes with per-node transforms, edges, and skinning.

    Each model point blends the dual quaternions of its skinned nodes; edges
    feed the as-rigid-as-possible regularizer in the solver.
    """

    def __init__(self, node_positions: np.ndarray, edges: np.ndarray,
                 skinning: Skinning,
                 node_transforms: list[RigidTransform] | None = None):
        P = np.asarray(node_positions, dtype=float)
        if P.ndim != 2 or P.shape[1] != 3:
            raise ValueError("node positions must be (n, 3)")
        self.node_positions = P
        E = np.asarray(edges, dtype=int).reshape(-1, 2)
        if len(E) and (E.min() < 0 or E.max() >= len(P)):
            raise ValueError("edge references a node out of range")
        self.edges = E
        self.skinning = skinning
        if skinning.indices.max(initial=-1) >= len(P):
            raise ValueError("skinning references a node out of range")
        if node_transforms is None:
            node_transforms = [RigidTransform.identity() for _ in range(len(P))]
        if len(node_transforms) != len(P):
            raise ValueError("one transform per node required")
        self.node_transforms = tuple(node_transforms)
        self._dqs = np.stack([np.concatenate([d.real, d.dual]) for d in
                              (rigid_to_dq(T) for T in node_transforms)])

    @property
    def n_nodes(self) -> int:
        return len(self.node_positions)

    @property
    def n_params(self) -> int:
        return 6 * self.n_nodes

    def point_transforms(self) -> tuple[np.ndarray, np.ndarray]:
        """Blended per-point rotations and translations for the skinned cloud.

        Unbound points (all-zero weight rows) keep the identity: they are
        outside every node's support and the solver never moves them.
        """
        bound = self.skinning.bound_mask
        R = np.tile(np.eye(3), (len(bound), 1, 1))
        t = np.zeros((len(bound), 3))
        if bound.any():
            Rb, tb = blend_node_transforms(self._dqs, self.skinning.indices[bound],
                                           self.skinning.weights[bound])
            R[bound] = Rb
            t[bound] = tb
        return R, t

    def updated(self, delta: np.ndarray) -> "NodeGraph":
        """Per-node multiplicative twist update; delta is (6 * n_nodes,)."""
        delta = np.asarray(delta, dtype=float).reshape(self.n_nodes, 6)
        transforms = [apply_twist(d, T) for d, T in zip(delta, self.node_transforms)]
        return NodeGraph(self.node_positions, self.edges, self.skinning, transforms)


KinematicModel = RigidModel | ArticulatedTree | NodeGraph


def forward_points(reference: PointCloud, model: KinematicModel) -> PointCloud:
    """Push the reference cloud through the model's current parameters."""
    if isinstance(model, RigidModel):
        return reference.transformed(model.pose)
    if isinstance(model, ArticulatedTree):
        if model.point_bodies is None:
            raise ValueError("articulated model has no point binding")
        if len(model.point_bodies) != len(reference):
            raise ValueError("point binding does not match the reference cloud")
        out = np.empty_like(reference.positions)
        normals = np.empty_like(reference.positions) if reference.normals is not None else None
        for b in range(model.n_bodies):
            sel = model.point_bodies == b
            if not np.any(sel):
                continue
            T = model.body_pose(b)
            out[sel] = T.apply(reference.positions[sel])
            if normals is not None:
                normals[sel] = T.rotate(reference.normals[sel])
        return PointCloud(out, normals, reference.features)
    if isinstance(model, NodeGraph):
        if len(model.skinning.indices) != len(reference):
            raise ValueError("skinning does not match the reference cloud")
        R, t = model.point_transforms()
        moved = np.einsum("nij,nj->ni", R, reference.positions) + t
        normals = None
        if reference.normals is not None:
            normals = np.einsum("nij,nj->ni", R, reference.normals)
        return PointCloud(moved, normals, reference.features)
    raise TypeError(f"unsupported kinematic model {type(model).__name__}")


def build_node_graph(positions: np.ndarray, spacing: float,
                     max_neighbors: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Subsample deformation nodes at least `spacing` apart and connect each
    to its nearest neighbors. Returns (node_positions, edges)."""
    positions = np.asarray(positions, dtype=float)
    if spacing <= 0:
        raise ValueError("node spacing must be positive")
    nodes = []
    for p in positions:
        if not nodes:
            nodes.append(p)
            continue
        d = np.linalg.norm(np.asarray(nodes) - p, axis=1)
        if d.min() >= spacing:
            nodes.append(p)
    nodes = np.asarray(nodes)
    k = min(max_neighbors + 1, len(nodes))
    edges = set()
    if k > 1:
        tree = cKDTree(nodes)
        _, idx = tree.query(nodes, k=k)
        for i, row in enumerate(idx):
            for j in row[1:]:
                edges.add((min(i, int(j)), max(i, int(j))))
    return nodes, np.asarray(sorted(edges), dtype=int).reshape(-1, 2)


def bind_points_to_nodes(points: np.ndarray, node_positions: np.ndarray,
                         radius: float, k: int = 4,
                         max_unbound_fraction: float = 0.1) -> Skinning:
    """Skin each point to its K nearest nodes within `radius`.

    Weights follow exp(-d^2 / (2 (radius/2)^2)) and are normalized per point.
    Points with no node in reach stay unbound (zero row); more than
    max_unbound_fraction of them is an error.
    """
    points = np.asarray(points, dtype=float)
    node_positions = np.asarray(node_positions, dtype=float)
    if radius <= 0:
        raise ValueError("binding radius must be positive")
    k = min(k, len(node_positions))
    tree = cKDTree(node_positions)
    dist, idx = tree.query(points, k=k)
    dist = np.atleast_2d(dist.reshape(len(points), -1))
    idx = np.atleast_2d(idx.reshape(len(points), -1))
    within = dist <= radius
    weights = np.where(within, np.exp(-0.5 * (dist / (radius / 2.0)) ** 2), 0.0)
    indices = np.where(within, idx, -1)
    totals = weights.sum(axis=1)
    unbound = totals == 0.0
    if unbound.mean() > max_unbound_fraction:
        raise BindingError(
            f"{unbound.sum()} of {len(points)} points have no node within "
            f"{radius} ({unbound.mean():.0%} > {max_unbound_fraction:.0%})")
    weights = np.where(unbound[:, None], 0.0, weights / np.where(totals == 0, 1.0, totals)[:, None])
    return Skinning(indices, weights)


# --- articulated model description files ---

def articulated_from_dict(doc: dict) -> ArticulatedTree:
    """Build a tree from the documented JSON schema (see README)."""
    bodies = []
    for entry in doc["bodies"]:
        joint_doc = entry.get("joint", {"type": "fixed"})
        joint = Joint(joint_doc.get("type", "fixed"), joint_doc.get("axis"))
        tf = entry.get("transform", {})
        T = RigidTransform(np.asarray(tf.get("rotation", np.eye(3).tolist()), dtype=float),
                           np.asarray(tf.get("translation", [0.0, 0.0, 0.0]), dtype=float))
        bodies.append(Body(entry.get("name", f"body{len(bodies)}"),
                           int(entry.get("parent", -1)), T, joint))
    point_bodies = doc.get("point_bodies")
    if point_bodies is not None:
        point_bodies = np.asarray(point_bodies, dtype=int)
    return ArticulatedTree(bodies,
                           floating=bool(doc.get("floating", True)),
                           joint_values=doc.get("joint_values"),
                           point_bodies=point_bodies)


def load_articulated_model(path) -> ArticulatedTree:
    with open(path, "r", encoding="utf-8") as fh:
        return articulated_from_dict(json.load(fh))
