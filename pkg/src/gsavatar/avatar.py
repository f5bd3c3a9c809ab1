"""Canonical Gaussian set, regression heads, and the per-frame composition.

The composition order is fixed: plane features -> fused feature -> base
offsets -> structure-aware offsets -> hand refinement, all in canonical
space, then skinning to the posed frame and covariance rotation.  With all
offset heads zero-initialised the avatar reduces exactly to skinning of the
canonical point cloud.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body import (BodyModel, HandResidual, Pose, SurfaceSamples, blend_transforms,
                   lbs_rotation, posed_joint_positions)
from .nn import Mlp, ParameterStore
from .planes import PlaneField, FusionHead, fuse_features, hexplane_feature, triplane_feature

JOINT_EMBED_DIM = 16
JOINT_FEATURE_DIM = 25  # 6D rotation + 3D position + 16 embedding


@dataclass
class GaussianSet:
    """Trainable per-Gaussian state plus frozen surface attributes."""

    means: np.ndarray           # (N, 3) canonical, trainable
    log_scales: np.ndarray      # (N, 3) trainable
    rotations: np.ndarray       # (N, 4) quaternions, trainable
    base_colors: np.ndarray     # (N, 3) trainable, clamped at render time
    opacity_logits: np.ndarray  # (N,) trainable, opacity = sigmoid(logit)
    skin_weights: np.ndarray    # (N, J) frozen
    normals: np.ndarray         # (N, 3) frozen canonical normals
    dominant_joint: np.ndarray  # (N,) frozen
    face_mask: np.ndarray       # (N,) bool
    hand_mask: np.ndarray       # (N,) int: -1 none, 0 left, 1 right
    tri_index: np.ndarray       # (N,) template triangle per Gaussian
    barycentric: np.ndarray     # (N, 3)

    @property
    def count(self) -> int:
        return len(self.means)

    def add_to(self, store: ParameterStore) -> None:
        store.add("gauss.means", self.means, "gauss_geom")
        store.add("gauss.log_scales", self.log_scales, "gauss_geom")
        store.add("gauss.rotations", self.rotations, "gauss_geom")
        store.add("gauss.base_colors", self.base_colors, "gauss_color")
        store.add("gauss.opacity_logits", self.opacity_logits, "gauss_color")


def init_gaussians(samples: SurfaceSamples, surface_area: float,
                   init_color: float = 0.5, init_opacity: float = 0.9,
                   scale_factor: float = 0.7) -> GaussianSet:
    """Gaussians seeded on the sampled surface with area-matched footprints."""
    n = len(samples.points)
    radius = scale_factor * float(np.sqrt(surface_area / n))
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    logit = float(np.log(init_opacity / (1.0 - init_opacity)))
    return GaussianSet(
        means=samples.points.copy(),
        log_scales=np.full((n, 3), np.log(radius)),
        rotations=quats,
        base_colors=np.full((n, 3), init_color),
        opacity_logits=np.full(n, logit),
        skin_weights=samples.skin_weights,
        normals=samples.normals,
        dominant_joint=samples.dominant_joint,
        face_mask=samples.face_mask,
        hand_mask=samples.hand_mask,
        tri_index=samples.tri_index,
        barycentric=samples.barycentric,
    )


class JointEmbeddingTable:
    """One trainable 16-vector per joint."""

    def __init__(self, n_joints: int, rng: np.random.Generator | None = None, name: str = "joint_embed"):
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.table = 0.01 * rng.standard_normal((n_joints, JOINT_EMBED_DIM))

    def add_to(self, store: ParameterStore, group: str = "embeddings") -> None:
        store.add(self.name, self.table, group)

    def handle(self, handles, eng):
        return eng.constant(self.table) if handles is None else handles[self.name]


class OffsetHeads:
    """Regression heads on the fused feature.

    base: fused -> (position, log-scale, colour) deltas; struct: fused +
    joint feature -> hidden, then two linear branches for position and
    per-axis log-scale deltas; colour: fused + pose embedding + normal ->
    colour delta.  All output layers start at zero.
    """

    def __init__(self, channels: int, hidden: int = 256,
                 rng: np.random.Generator | None = None, name: str = "heads"):
        rng = rng or np.random.default_rng(0)
        d = 3 * channels
        self.channels = channels
        self.base_head = Mlp([d, hidden, 9], rng=rng, zero_output=True, name=f"{name}.base")
        self.struct_mlp = Mlp([d + JOINT_FEATURE_DIM, hidden, hidden], rng=rng, name=f"{name}.struct")
        self.struct_dv = Mlp([hidden, 3], rng=rng, zero_output=True, name=f"{name}.struct_dv")
        self.struct_ds = Mlp([hidden, 3], rng=rng, zero_output=True, name=f"{name}.struct_ds")
        self.color_head = Mlp([d + 6 + 3, hidden, 3], rng=rng, zero_output=True, name=f"{name}.color")

    def add_to(self, store: ParameterStore, group: str = "mlps") -> None:
        for mlp in (self.base_head, self.struct_mlp, self.struct_dv, self.struct_ds, self.color_head):
            mlp.add_to(store, group)


def joint_feature(eng, pose: Pose, model: BodyModel, table: JointEmbeddingTable,
                  j: int, handles=None):
    """Per-joint conditioning vector [6D rotation, posed position, embedding]."""
    if not 0 <= j < model.n_joints:
        raise IndexError(f"joint index {j} out of range for {model.n_joints} joints")
    r6 = pose.rotation_6d()[j]
    pj = posed_joint_positions(model, pose)[j]
    z = table.handle(handles, eng)[j]
    return np.concatenate([eng.constant(r6), eng.constant(pj), z])


def pose_embedding(pose: Pose, skin_weights: np.ndarray) -> np.ndarray:
    """Skinning-weighted mix of the 6D joint rotations; constant per frame."""
    w = np.atleast_2d(np.asarray(skin_weights, dtype=np.float64))
    if np.abs(w.sum(axis=1) - 1.0).max() > 1e-4:
        raise ValueError("pose_embedding: weight rows must sum to 1")
    out = w @ pose.rotation_6d()
    return out if np.asarray(skin_weights).ndim > 1 else out[0]


def structural_offset(eng, heads: OffsetHeads, f_fused, e_joint, handles=None):
    """Pose-aware position and log-scale deltas from the joint feature."""
    X = np.concatenate([np.atleast_2d(f_fused), np.atleast_2d(e_joint)], axis=1)
    h = eng.relu(heads.struct_mlp.forward(eng, X, handles))
    dv = heads.struct_dv.forward(eng, h, handles)
    ds = heads.struct_ds.forward(eng, h, handles)
    if np.asarray(f_fused).ndim == 1:
        return dv[0], ds[0]
    return dv, ds


def color_offset(eng, heads: OffsetHeads, f_fused, pose_emb, normal, handles=None):
    """Colour delta conditioned on pose mix and surface orientation."""
    nv = eng.value(normal)
    if np.abs(np.linalg.norm(np.atleast_2d(nv), axis=1) - 1.0).max() > 1e-4:
        raise ValueError("color_offset: normals must be unit length")
    X = np.concatenate([np.atleast_2d(f_fused), np.atleast_2d(pose_emb), np.atleast_2d(normal)], axis=1)
    out = heads.color_head.forward(eng, X, handles)
    return out if np.asarray(f_fused).ndim > 1 else out[0]


def quat_matrix_entries(eng, q):
    """Rotation-matrix entries of unit quaternion rows -> (n, 9) handles.

    Entry order is row-major (R00, R01, ..., R22).
    """
    qv = eng.value(q)
    w, x, y, z = qv.T
    o = np.zeros_like(w)
    vals = np.stack(
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        axis=1,
    )
    if not eng.recording:
        return vals
    # partials of each entry w.r.t. (w, x, y, z)
    p = np.stack(
        [
            np.stack([o, o, -4 * y, -4 * z], 1),
            np.stack([-2 * z, 2 * y, 2 * x, -2 * w], 1),
            np.stack([2 * y, 2 * z, 2 * w, 2 * x], 1),
            np.stack([2 * z, 2 * y, 2 * x, 2 * w], 1),
            np.stack([o, -4 * x, o, -4 * z], 1),
            np.stack([-2 * x, -2 * w, 2 * z, 2 * y], 1),
            np.stack([-2 * y, 2 * z, -2 * w, 2 * x], 1),
            np.stack([2 * x, 2 * w, 2 * z, 2 * y], 1),
            np.stack([o, -4 * x, -4 * y, o], 1),
        ],
        axis=1,
    )
    idx = np.broadcast_to(q[:, None, :], (len(qv), 9, 4))
    return eng.fused(vals.ravel(), idx.reshape(-1, 4), p.reshape(-1, 4)).reshape(len(qv), 9)


_COV_PAIRS = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))  # xx, xy, xz, yy, yz, zz


def covariance_entries(eng, R9, D):
    """Sigma = R diag(D) R^T from matrix entries (n, 9) and D = s^2 (n, 3).

    Returns the 6 unique entries (n, 6) in xx, xy, xz, yy, yz, zz order.
    """
    Rv = eng.value(R9).reshape(-1, 3, 3)
    Dv = eng.value(D)
    n = len(Dv)
    vals = np.empty((n, 6))
    for e, (a, b) in enumerate(_COV_PAIRS):
        vals[:, e] = (Rv[:, a, :] * Rv[:, b, :] * Dv).sum(axis=1)
    if not eng.recording:
        return vals
    R9 = R9.reshape(-1, 3, 3)
    idx = np.empty((n, 6, 9), dtype=np.int64)
    part = np.empty((n, 6, 9))
    for e, (a, b) in enumerate(_COV_PAIRS):
        idx[:, e, :3] = R9[:, a, :]
        idx[:, e, 3:6] = R9[:, b, :]
        idx[:, e, 6:] = D
        part[:, e, :3] = Rv[:, b, :] * Dv
        part[:, e, 3:6] = Rv[:, a, :] * Dv
        part[:, e, 6:] = Rv[:, a, :] * Rv[:, b, :]
    return eng.fused(vals.ravel(), idx.reshape(-1, 9), part.reshape(-1, 9)).reshape(n, 6)


def rotate_covariance(eng, cov6, L):
    """L Sigma L^T for constant rotations L (n, 3, 3); 6-entry layout."""
    coeff = np.empty((len(L), 6, 6))
    for o, (i, j) in enumerate(_COV_PAIRS):
        for e, (a, b) in enumerate(_COV_PAIRS):
            if a == b:
                coeff[:, o, e] = L[:, i, a] * L[:, j, a]
            else:
                coeff[:, o, e] = L[:, i, a] * L[:, j, b] + L[:, i, b] * L[:, j, a]
    vals = np.einsum("noe,ne->no", coeff, eng.value(cov6))
    if not eng.recording:
        return vals
    idx = np.broadcast_to(cov6[:, None, :], coeff.shape)
    return eng.fused(vals.ravel(), idx.reshape(-1, 6), coeff.reshape(-1, 6)).reshape(len(L), 6)


def apply_affine(eng, A, b, pts):
    """Constant per-row affine map (A[n] @ p[n] + b[n]) on engine points."""
    vals = np.einsum("nab,nb->na", A, eng.value(pts)) + b
    if not eng.recording:
        return vals
    idx = np.broadcast_to(pts[:, None, :], (len(b), 3, 3))
    return eng.fused(vals.ravel(), idx.reshape(-1, 3), A.reshape(-1, 3)).reshape(len(b), 3)


@dataclass
class AvatarModel:
    """Everything the per-frame composition needs, in one bundle."""

    body: BodyModel
    gaussians: GaussianSet
    tri_body: PlaneField
    hex_body: PlaneField
    tri_face: PlaneField | None
    hex_face: PlaneField | None
    fusion: FusionHead
    heads: OffsetHeads
    joint_table: JointEmbeddingTable
    hand_residuals: dict[str, HandResidual] = field(default_factory=dict)
    use_hexplane: bool = True
    use_struct_offset: bool = True
    use_color_offset: bool = True
    use_hand_refine: bool = True
    max_disp_body: float = 0.05
    max_disp_detail: float = 0.01
    log_scale_range: tuple[float, float] = (np.log(1e-4), np.log(0.3))

    def add_to(self, store: ParameterStore) -> None:
        self.gaussians.add_to(store)
        self.tri_body.add_to(store)
        self.hex_body.add_to(store)
        if self.tri_face is not None:
            self.tri_face.add_to(store)
        if self.hex_face is not None:
            self.hex_face.add_to(store)
        self.fusion.add_to(store)
        self.heads.add_to(store)
        self.joint_table.add_to(store)
        for side, hr in self.hand_residuals.items():
            store.add(f"hand.{side}.base", hr.base_residual, "hand")
            hr.refine_mlp.add_to(store, "hand")

    def detail_displacement_cap(self) -> np.ndarray:
        gs = self.gaussians
        cap = np.full(gs.count, self.max_disp_body)
        cap[gs.face_mask | (gs.hand_mask >= 0)] = self.max_disp_detail
        return cap


@dataclass
class FrameGaussians:
    """Per-frame posed Gaussian quantities (engine handles)."""

    positions: np.ndarray   # (N, 3)
    cov6: np.ndarray        # (N, 6) posed covariance, xx xy xz yy yz zz
    colors: np.ndarray      # (N, 3)
    opacities: np.ndarray   # (N,)
    dpos: np.ndarray | None  # (N, 3) bounded canonical position offsets
    dscale: np.ndarray | None  # (N, 3) log-scale offsets


def _bounded(eng, x, cap):
    """cap * tanh(x / cap) per component; smooth, identity near zero."""
    inv = 1.0 / cap
    return eng.axpb(eng.tanh(eng.axpb(x, inv)), cap)


def _partitioned_features(eng, avatar: AvatarModel, pts, t, handles, use_time: bool):
    gs = avatar.gaussians
    n = gs.count
    face = np.flatnonzero(gs.face_mask) if avatar.tri_face is not None else np.empty(0, dtype=np.int64)
    body = np.setdiff1d(np.arange(n), face)

    def build(fn, field_body, field_face, *extra):
        dim = field_body.feature_dim
        out = np.zeros((n, dim)) if not eng.recording else np.zeros((n, dim), dtype=np.int64)
        if len(body):
            out[body] = fn(eng, field_body, pts[body], *extra)
        if len(face):
            out[face] = fn(eng, field_face, pts[face], *extra)
        return out

    f_tri = build(triplane_feature, avatar.tri_body, avatar.tri_face, handles)
    if not use_time:
        return f_tri, None
    f_hex = build(hexplane_feature, avatar.hex_body, avatar.hex_face, t, handles)
    return f_tri, f_hex


def build_frame_gaussians(eng, avatar: AvatarModel, pose: Pose, t: float,
                          handles=None) -> FrameGaussians:
    """Full canonical -> posed composition for one frame on the engine."""
    gs = avatar.gaussians
    body = avatar.body
    n = gs.count
    if handles is None:
        store = ParameterStore()
        avatar.add_to(store)
        handles = store.register(eng)

    means = handles["gauss.means"]
    f_tri, f_hex = _partitioned_features(eng, avatar, means, t, handles, avatar.use_hexplane)
    if avatar.use_hexplane:
        f_fused, _ = fuse_features(eng, avatar.fusion, f_tri, f_hex, handles)
    else:
        f_fused = f_tri

    base = avatar.heads.base_head.forward(eng, f_fused, handles)
    dpos0, dls0, dcol0 = base[:, 0:3], base[:, 3:6], base[:, 6:9]

    cap = avatar.detail_displacement_cap()[:, None]
    dpos = _bounded(eng, dpos0, cap)
    dls = dls0

    if avatar.use_struct_offset:
        r6 = pose.rotation_6d()[gs.dominant_joint]
        pj = posed_joint_positions(body, pose)[gs.dominant_joint]
        z = avatar.joint_table.handle(handles, eng)[gs.dominant_joint]
        e_joint = np.concatenate([eng.constant(r6), eng.constant(pj), z], axis=1)
        dv, ds = structural_offset(eng, avatar.heads, f_fused, e_joint, handles)
        dpos = eng.add(dpos, _bounded(eng, dv, cap))
        dls = eng.add(dls, ds)

    pos_canon = eng.add(means, dpos)

    if avatar.use_hand_refine and avatar.hand_residuals:
        lookup = {}
        for hid, side in enumerate(("left", "right")):
            if side not in avatar.hand_residuals:
                continue
            hr = avatar.hand_residuals[side]
            refined = hr.refined(eng, pose, handles, base_ids=handles.get(f"hand.{side}.base"))
            sel = np.flatnonzero(gs.hand_mask == hid)
            if not len(sel):
                continue
            lut = -np.ones(body.n_vertices, dtype=np.int64)
            lut[body.hand_vertex_map[side]] = np.arange(len(body.hand_vertex_map[side]))
            tri_verts = lut[body.faces[gs.tri_index[sel]]]
            disp_cols = []
            for c in range(3):
                disp_cols.append(eng.rows_wsum(refined[tri_verts, c], gs.barycentric[sel]))
            disp = np.stack(disp_cols, axis=1)
            updated = eng.add(pos_canon[sel], disp)
            if eng.recording:
                pos_canon = pos_canon.copy()
            else:
                pos_canon = np.array(pos_canon, copy=True)
            pos_canon[sel] = updated
            lookup[side] = disp

    # colour
    colors = eng.add(handles["gauss.base_colors"], dcol0)
    if avatar.use_color_offset:
        pemb = pose_embedding(pose, gs.skin_weights)
        dcol = color_offset(eng, avatar.heads, f_fused, eng.constant(pemb), eng.constant(gs.normals), handles)
        colors = eng.add(colors, dcol)
    colors = eng.clamp(colors, 0.0, 1.0)
    opac = eng.sigmoid(handles["gauss.opacity_logits"])

    # canonical covariance from quaternion and per-axis scale
    q = handles["gauss.rotations"]
    qn_norm = eng.sqrt(eng.rows_dot(q, q))
    qn = eng.div(q, np.broadcast_to(qn_norm[:, None], (n, 4)) if eng.recording
                 else np.broadcast_to(eng.value(qn_norm)[:, None], (n, 4)))
    R9 = quat_matrix_entries(eng, qn)
    ls_total = eng.clamp(eng.add(handles["gauss.log_scales"], dls), *avatar.log_scale_range)
    D = eng.exp(eng.axpb(ls_total, 2.0))
    cov_canon = covariance_entries(eng, R9, D)

    # pose
    A, b = blend_transforms(body, gs.skin_weights, pose)
    positions = apply_affine(eng, A, b, pos_canon)
    Rlbs = lbs_rotation(body, gs.skin_weights, pose)
    cov_posed = rotate_covariance(eng, cov_canon, Rlbs)

    return FrameGaussians(positions, cov_posed, colors, opac, dpos, dls)
