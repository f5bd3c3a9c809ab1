"""Articulated body: canonical mesh, joint tree, skinning, surface sampling.

The canonical template never changes after construction; every operation
here is a pure function of (model, pose, inputs).  Hand refinement is the
one trainable piece and lives in :class:`HandResidual`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import matrix_to_6d, polar_rotation, quat_normalize, quat_to_matrix
from .nn import Mlp

WEIGHT_ROW_TOL = 1e-4


@dataclass
class BodyModel:
    """Canonical template mesh plus its skeleton and skinning weights."""

    template_vertices: np.ndarray          # (V, 3) meters
    faces: np.ndarray                      # (F, 3) int
    joint_parents: np.ndarray              # (J,) int, parent[root] == -1
    rest_joints: np.ndarray                # (J, 3) meters
    skin_weights: np.ndarray               # (V, J), rows sum to 1
    hand_vertex_map: dict[str, np.ndarray]  # side -> vertex indices
    face_vertex_mask: np.ndarray           # (V,) bool
    joint_names: list[str] = field(default_factory=list)
    scan_hand_vertices: dict[str, np.ndarray] = field(default_factory=dict)
    vertex_colors: np.ndarray | None = None

    def __post_init__(self):
        self.validate()

    @property
    def n_joints(self) -> int:
        return len(self.joint_parents)

    @property
    def n_vertices(self) -> int:
        return len(self.template_vertices)

    def validate(self) -> None:
        W = self.skin_weights
        if (W < -1e-12).any():
            raise ValueError("skin weights must be non-negative")
        if np.abs(W.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError("skin weight rows must sum to 1 within 1e-6")
        roots = np.flatnonzero(self.joint_parents < 0)
        if len(roots) != 1:
            raise ValueError(f"joint tree must have exactly one root, found {len(roots)}")
        order = np.asarray(self.joint_parents)
        if (order[1:] >= np.arange(1, self.n_joints)).any():
            raise ValueError("joint parents must precede children (topological order)")
        maps = [np.asarray(v) for v in self.hand_vertex_map.values()]
        for m in maps:
            if len(np.unique(m)) != len(m):
                raise ValueError("hand vertex maps must be injective")
        if len(maps) == 2 and np.intersect1d(maps[0], maps[1]).size:
            raise ValueError("hand vertex maps must be disjoint")

    def save_json(self, path) -> None:
        doc = {
            "format": "gsavatar-body",
            "version": 1,
            "vertices": self.template_vertices.tolist(),
            "faces": self.faces.tolist(),
            "joint_parents": self.joint_parents.tolist(),
            "joint_names": list(self.joint_names),
            "rest_joints": self.rest_joints.tolist(),
            "skin_weights": self.skin_weights.ravel().tolist(),
            "hand_vertex_map": {k: v.tolist() for k, v in self.hand_vertex_map.items()},
            "face_vertex_mask": np.flatnonzero(self.face_vertex_mask).tolist(),
            "scan_hand_vertices": {k: v.tolist() for k, v in self.scan_hand_vertices.items()},
        }
        if self.vertex_colors is not None:
            doc["vertex_colors"] = self.vertex_colors.tolist()
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load_json(cls, path) -> "BodyModel":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "gsavatar-body":
            raise ValueError(f"{path}: not a body model file")
        V = np.asarray(doc["vertices"], dtype=np.float64)
        J = len(doc["joint_parents"])
        mask = np.zeros(len(V), dtype=bool)
        mask[np.asarray(doc["face_vertex_mask"], dtype=int)] = True
        colors = doc.get("vertex_colors")
        return cls(
            template_vertices=V,
            faces=np.asarray(doc["faces"], dtype=np.int64),
            joint_parents=np.asarray(doc["joint_parents"], dtype=np.int64),
            rest_joints=np.asarray(doc["rest_joints"], dtype=np.float64),
            skin_weights=np.asarray(doc["skin_weights"], dtype=np.float64).reshape(len(V), J),
            hand_vertex_map={k: np.asarray(v, dtype=np.int64) for k, v in doc["hand_vertex_map"].items()},
            face_vertex_mask=mask,
            joint_names=doc.get("joint_names", []),
            scan_hand_vertices={k: np.asarray(v, dtype=np.float64) for k, v in doc.get("scan_hand_vertices", {}).items()},
            vertex_colors=None if colors is None else np.asarray(colors, dtype=np.float64),
        )


@dataclass
class Pose:
    """Per-joint local rotations (unit quaternions) plus root translation."""

    joint_rotations: np.ndarray   # (J, 4) [w, x, y, z]
    root_translation: np.ndarray  # (3,)
    timestamp: float = 0.0

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        norms = np.linalg.norm(self.joint_rotations, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("pose quaternions must be unit-norm within 1e-6")
        if not 0.0 <= self.timestamp <= 1.0:
            raise ValueError("pose timestamp must lie in [0, 1]")

    @property
    def n_joints(self) -> int:
        return len(self.joint_rotations)

    @classmethod
    def identity(cls, n_joints: int, timestamp: float = 0.0) -> "Pose":
        q = np.zeros((n_joints, 4))
        q[:, 0] = 1.0
        return cls(q, np.zeros(3), timestamp)

    def rotation_6d(self) -> np.ndarray:
        """(J, 6) continuous encoding of the local joint rotations."""
        return matrix_to_6d(quat_to_matrix(self.joint_rotations))


def pose_transforms(model: BodyModel, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """World rigid transform per joint: x_posed = R[j] @ x_rest + t[j].

    Forward kinematics along the joint tree; the root picks up the pose's
    translation on top of its rotation about the rest root position.
    """
    J = model.n_joints
    if pose.n_joints != J:
        raise ValueError(f"pose has {pose.n_joints} joints, model has {J}")
    local = quat_to_matrix(quat_normalize(pose.joint_rotations))
    rest = model.rest_joints
    Rw = np.zeros((J, 3, 3))
    pw = np.zeros((J, 3))
    for j in range(J):
        p = model.joint_parents[j]
        if p < 0:
            Rw[j] = local[j]
            pw[j] = rest[j] + pose.root_translation
        else:
            Rw[j] = Rw[p] @ local[j]
            pw[j] = Rw[p] @ (rest[j] - rest[p]) + pw[p]
    t = pw - np.einsum("jab,jb->ja", Rw, rest)
    return Rw, t


def posed_joint_positions(model: BodyModel, pose: Pose) -> np.ndarray:
    R, t = pose_transforms(model, pose)
    return np.einsum("jab,jb->ja", R, model.rest_joints) + t


def _check_weights(points: np.ndarray, weights: np.ndarray) -> None:
    if weights.shape[0] != points.shape[0]:
        raise ValueError("one skinning-weight row per point required")
    if np.abs(weights.sum(axis=1) - 1.0).max() > WEIGHT_ROW_TOL:
        raise ValueError("skinning-weight rows must sum to 1 within 1e-4")


def blend_transforms(model: BodyModel, weights: np.ndarray, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Weight-blended rigid transforms (A, b) per point."""
    R, t = pose_transforms(model, pose)
    A = np.einsum("nj,jab->nab", weights, R)
    b = weights @ t
    return A, b


def lbs(model: BodyModel, points: np.ndarray, weights: np.ndarray, pose: Pose) -> np.ndarray:
    """Linear blend skinning of canonical points into the posed frame."""
    points = np.asarray(points, dtype=np.float64)
    _check_weights(points, weights)
    A, b = blend_transforms(model, weights, pose)
    return np.einsum("nab,nb->na", A, points) + b


def lbs_rotation(model: BodyModel, weights: np.ndarray, pose: Pose) -> np.ndarray:
    """Rotation part of the blended transform, re-orthonormalised.

    Used as the local Jacobian of the posing map when rotating Gaussian
    covariances; the polar factor is the nearest true rotation.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if np.abs(weights.sum(axis=-1) - 1.0).max() > WEIGHT_ROW_TOL:
        raise ValueError("skinning-weight rows must sum to 1 within 1e-4")
    R, _ = pose_transforms(model, pose)
    M = np.einsum("nj,jab->nab", np.atleast_2d(weights), R)
    out = polar_rotation(M)
    return out if weights.ndim > 1 else out[0]


@dataclass
class SurfaceSamples:
    """Point set sampled on the template surface with interpolated attributes."""

    points: np.ndarray          # (N, 3)
    skin_weights: np.ndarray    # (N, J)
    normals: np.ndarray         # (N, 3) unit
    dominant_joint: np.ndarray  # (N,) int
    face_mask: np.ndarray       # (N,) bool
    hand_mask: np.ndarray       # (N,) int: -1 none, 0 left, 1 right
    tri_index: np.ndarray       # (N,) int
    barycentric: np.ndarray     # (N, 3)


def vertex_normals(model: BodyModel) -> np.ndarray:
    V, F = model.template_vertices, model.faces
    fn = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    out = np.zeros_like(V)
    for k in range(3):
        np.add.at(out, F[:, k], fn)
    n = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.maximum(n, 1e-12)


def upsample_surface(model: BodyModel, n_points: int, seed: int = 0) -> SurfaceSamples:
    """Area-uniform sampling of the template surface.

    Attributes are barycentrically interpolated from the vertices; skinning
    rows are renormalised, the dominant joint is the argmax of the row with
    ties broken toward the lowest joint index.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    V, F = model.template_vertices, model.faces
    e1 = V[F[:, 1]] - V[F[:, 0]]
    e2 = V[F[:, 2]] - V[F[:, 0]]
    areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(F), size=n_points, p=areas / total)
    r1 = np.sqrt(rng.random(n_points))
    r2 = rng.random(n_points)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)

    idx = F[tri]
    points = np.einsum("nk,nkd->nd", bary, V[idx])
    weights = np.einsum("nk,nkj->nj", bary, model.skin_weights[idx])
    weights = np.maximum(weights, 0.0)
    weights /= weights.sum(axis=1, keepdims=True)
    vn = vertex_normals(model)
    normals = np.einsum("nk,nkd->nd", bary, vn[idx])
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    dominant = np.argmax(weights, axis=1)

    face_flag = np.einsum("nk,nk->n", bary, model.face_vertex_mask[idx].astype(np.float64)) >= 0.5
    hand = np.full(n_points, -1, dtype=np.int64)
    for hid, side in enumerate(("left", "right")):
        inset = np.zeros(model.n_vertices, dtype=bool)
        inset[model.hand_vertex_map[side]] = True
        hand[inset[F[tri]].all(axis=1)] = hid
    return SurfaceSamples(points, weights, normals, dominant, face_flag, hand, tri, bary)


# --------------------------------------------------------------------- hands


def hand_residual_base(scan_verts: np.ndarray, body_hand_verts: np.ndarray) -> np.ndarray:
    """Vertex-wise difference between the detailed scan and the body's hand.

    Both meshes share topology, so index i maps to index i.
    """
    scan_verts = np.asarray(scan_verts, dtype=np.float64)
    body_hand_verts = np.asarray(body_hand_verts, dtype=np.float64)
    if scan_verts.shape != body_hand_verts.shape:
        raise ValueError(f"hand meshes disagree: {scan_verts.shape} vs {body_hand_verts.shape}")
    return scan_verts - body_hand_verts


class HandResidual:
    """Pose-conditioned refinement of the static hand residual field.

    The MLP maps [base residual (3), hand pose (6 per hand joint)] per
    vertex to a refined displacement that replaces the static residual.
    Zero output init means refinement starts from "no correction".
    """

    def __init__(self, base_residual: np.ndarray, hand_joints: np.ndarray,
                 hidden: int = 32, rng: np.random.Generator | None = None, name: str = "hand"):
        self.base_residual = np.asarray(base_residual, dtype=np.float64)
        if self.base_residual.ndim != 2 or self.base_residual.shape[1] != 3:
            raise ValueError("base residual must be (n_hand_vertices, 3)")
        self.hand_joints = np.asarray(hand_joints, dtype=np.int64)
        self.pose_dim = 6 * len(self.hand_joints)
        self.refine_mlp = Mlp([3 + self.pose_dim, hidden, 3], rng=rng, zero_output=True, name=f"{name}.refine")

    def hand_pose_vector(self, pose: Pose) -> np.ndarray:
        return pose.rotation_6d()[self.hand_joints].ravel()

    def refined(self, eng, pose: Pose, handles=None, base_ids=None):
        """Per-vertex refined residual (n_hand_vertices, 3) on the engine."""
        p = self.hand_pose_vector(pose)
        if p.size != self.pose_dim:
            raise ValueError(f"hand pose vector has size {p.size}, expected {self.pose_dim}")
        n = len(self.base_residual)
        pose_block = eng.constant(np.tile(p, (n, 1)))
        base = base_ids if base_ids is not None else eng.constant(self.base_residual)
        X = np.concatenate([base, pose_block], axis=1)
        return self.refine_mlp.forward(eng, X, handles)


def refine_hand(residual: HandResidual, pose: Pose, tape) -> np.ndarray:
    """Refined residual for the given pose, recorded on the tape."""
    return residual.refined(tape, pose)
