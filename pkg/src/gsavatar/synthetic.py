"""Procedural articulated test body: capsule limbs, fingered hands, texture.

Stands in for a scanned parametric body with the same structural contract:
joint tree, skinning matrix, hand/face sub-regions, and a companion
"scanned hand" mesh that differs from the body's hand by a known bump
field.  Everything is deterministic given the config.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import BodyModel


@dataclass
class SyntheticBodyConfig:
    n_fingers: int = 5
    n_face_joints: int = 3
    height_scale: float = 1.0
    density: float = 1.0           # multiplies ring/segment counts
    bump_amplitude: float = 0.006  # meters, max-norm of the hand bump field
    texture_seed: int = 0

    def validate(self) -> None:
        if self.n_fingers < 1 or self.n_face_joints < 0:
            raise ValueError("n_fingers must be >= 1 and n_face_joints >= 0")
        if self.height_scale <= 0 or self.density <= 0:
            raise ValueError("height_scale and density must be positive")
        if self.bump_amplitude < 0:
            raise ValueError("bump_amplitude must be non-negative")


# ------------------------------------------------------------------ mesh bits


def _frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[1]) > 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(ref, axis)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def capsule(p0, p1, r0, r1, n_seg=8, n_rings=4, n_cap=2):
    """Closed tapered capsule from p0 to p1; returns (verts, faces)."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    w = p1 - p0
    length = np.linalg.norm(w)
    w = w / length
    u, v = _frame(w)
    ang = 2 * np.pi * np.arange(n_seg) / n_seg
    radial = np.outer(np.cos(ang), u) + np.outer(np.sin(ang), v)

    rings = []
    for a in range(1, n_cap + 1):
        th = 0.5 * np.pi * a / (n_cap + 1)
        rings.append(p0 + r0 * (np.sin(th) * radial - np.cos(th) * w))
    for t in np.linspace(0.0, 1.0, n_rings + 1):
        r = (1 - t) * r0 + t * r1
        rings.append(p0 + t * length * w + r * radial)
    for a in range(n_cap, 0, -1):
        th = 0.5 * np.pi * a / (n_cap + 1)
        rings.append(p1 + r1 * (np.sin(th) * radial + np.cos(th) * w))

    verts = [p0 - r0 * w] + [q for ring in rings for q in ring] + [p1 + r1 * w]
    verts = np.asarray(verts)
    faces = []
    top = len(verts) - 1
    for i in range(n_seg):
        j = (i + 1) % n_seg
        faces.append([0, 1 + j, 1 + i])
    for a in range(len(rings) - 1):
        base0 = 1 + a * n_seg
        base1 = base0 + n_seg
        for i in range(n_seg):
            j = (i + 1) % n_seg
            faces.append([base0 + i, base0 + j, base1 + i])
            faces.append([base0 + j, base1 + j, base1 + i])
    last = 1 + (len(rings) - 1) * n_seg
    for i in range(n_seg):
        j = (i + 1) % n_seg
        faces.append([last + i, last + j, top])
    return verts, np.asarray(faces, dtype=np.int64)


def ellipsoid(center, radii, n_lat=9, n_lon=12):
    """Closed axis-aligned lat-long ellipsoid; returns (verts, faces)."""
    center = np.asarray(center, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    verts = [center - radii * np.array([0.0, 1.0, 0.0])]
    for a in range(1, n_lat):
        th = np.pi * a / n_lat
        y = -np.cos(th)
        s = np.sin(th)
        for b in range(n_lon):
            ph = 2 * np.pi * b / n_lon
            verts.append(center + radii * np.array([s * np.cos(ph), y, s * np.sin(ph)]))
    verts.append(center + radii * np.array([0.0, 1.0, 0.0]))
    verts = np.asarray(verts)
    faces = []
    top = len(verts) - 1
    for b in range(n_lon):
        c = (b + 1) % n_lon
        faces.append([0, 1 + b, 1 + c])
    for a in range(n_lat - 2):
        base0 = 1 + a * n_lon
        base1 = base0 + n_lon
        for b in range(n_lon):
            c = (b + 1) % n_lon
            faces.append([base0 + b, base1 + b, base0 + c])
            faces.append([base0 + c, base1 + b, base1 + c])
    last = 1 + (n_lat - 2) * n_lon
    for b in range(n_lon):
        c = (b + 1) % n_lon
        faces.append([last + b, top, last + c])
    return verts, np.asarray(faces, dtype=np.int64)


# ------------------------------------------------------------------- skeleton


def _skeleton(cfg: SyntheticBodyConfig):
    s = cfg.height_scale
    joints: list[tuple[str, int, tuple[float, float, float]]] = [
        ("pelvis", -1, (0.0, 0.95, 0.0)),
        ("spine", 0, (0.0, 1.08, 0.0)),
        ("chest", 1, (0.0, 1.22, 0.0)),
        ("neck", 2, (0.0, 1.40, 0.0)),
        ("head", 3, (0.0, 1.48, 0.0)),
        ("l_shoulder", 2, (0.17, 1.36, 0.0)),
        ("l_elbow", 5, (0.43, 1.36, 0.0)),
        ("l_wrist", 6, (0.67, 1.36, 0.0)),
        ("r_shoulder", 2, (-0.17, 1.36, 0.0)),
        ("r_elbow", 8, (-0.43, 1.36, 0.0)),
        ("r_wrist", 9, (-0.67, 1.36, 0.0)),
        ("l_hip", 0, (0.09, 0.88, 0.0)),
        ("l_knee", 11, (0.10, 0.48, 0.0)),
        ("l_ankle", 12, (0.10, 0.07, 0.0)),
        ("r_hip", 0, (-0.09, 0.88, 0.0)),
        ("r_knee", 14, (-0.10, 0.48, 0.0)),
        ("r_ankle", 15, (-0.10, 0.07, 0.0)),
    ]
    finger_z = np.linspace(0.04, -0.04, cfg.n_fingers)
    for side, sign, wrist in (("l", 1.0, 7), ("r", -1.0, 10)):
        for f in range(cfg.n_fingers):
            z = float(finger_z[f])
            base = len(joints)
            joints.append((f"{side}_f{f}_mcp", wrist, (sign * 0.755, 1.36, z)))
            joints.append((f"{side}_f{f}_pip", base, (sign * 0.79, 1.36, z)))
            joints.append((f"{side}_f{f}_dip", base + 1, (sign * 0.812, 1.36, z)))
    if cfg.n_face_joints >= 1:
        joints.append(("jaw", 4, (0.0, 1.50, 0.065)))
    if cfg.n_face_joints >= 2:
        joints.append(("face_l", 4, (0.035, 1.58, 0.08)))
    if cfg.n_face_joints >= 3:
        joints.append(("face_r", 4, (-0.035, 1.58, 0.08)))

    names = [j[0] for j in joints]
    parents = np.asarray([j[1] for j in joints], dtype=np.int64)
    rest = np.asarray([j[2] for j in joints], dtype=np.float64) * s
    return names, parents, rest


_SIGMA = {
    "pelvis": 0.10, "spine": 0.10, "chest": 0.10, "neck": 0.06, "head": 0.09,
    "shoulder": 0.055, "elbow": 0.05, "wrist": 0.035,
    "hip": 0.08, "knee": 0.07, "ankle": 0.055,
    "mcp": 0.011, "pip": 0.010, "dip": 0.010,
    "jaw": 0.035, "face": 0.035,
}


def _sigma_for(name: str) -> float:
    for key, s in _SIGMA.items():
        if key in name:
            return s
    return 0.06


def _point_segment_dist(P: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    denom = float(d @ d)
    if denom < 1e-18:
        return np.linalg.norm(P - a, axis=1)
    t = np.clip((P - a) @ d / denom, 0.0, 1.0)
    return np.linalg.norm(P - (a + t[:, None] * d), axis=1)


def _skin_weights(verts, names, parents, rest, top_k=4):
    J = len(names)
    children: list[list[int]] = [[] for _ in range(J)]
    for j, p in enumerate(parents):
        if p >= 0:
            children[p].append(j)
    tip = {
        "head": (0.0, 0.16, 0.0), "ankle": (0.0, -0.03, 0.11),
        "jaw": (0.0, -0.02, 0.03), "face": (0.0, 0.02, 0.02),
    }
    dist = np.full((len(verts), J), np.inf)
    for j in range(J):
        segs = [(rest[j], rest[c]) for c in children[j]]
        if not segs:
            if "dip" in names[j]:
                sign = 1.0 if names[j].startswith("l_") else -1.0
                off = (sign * 0.021, 0.0, 0.0)
            else:
                off = next((o for key, o in tip.items() if key in names[j]), (0.0, 0.02, 0.0))
            segs = [(rest[j], rest[j] + np.asarray(off))]
        for a, b in segs:
            dist[:, j] = np.minimum(dist[:, j], _point_segment_dist(verts, np.asarray(a), np.asarray(b)))
    sigma = np.asarray([_sigma_for(n) for n in names])
    w = np.exp(-((dist / sigma) ** 2))
    # keep only the strongest joints per vertex for crisp articulation
    order = np.argsort(-w, axis=1, kind="stable")
    keep = order[:, :top_k]
    sparse = np.zeros_like(w)
    rows = np.arange(len(verts))[:, None]
    sparse[rows, keep] = w[rows, keep]
    sums = sparse.sum(axis=1)
    dead = sums < 1e-12
    if dead.any():
        nearest = np.argmin(dist[dead], axis=1)
        sparse[np.flatnonzero(dead), nearest] = 1.0
        sums = sparse.sum(axis=1)
    return sparse / sums[:, None]


# -------------------------------------------------------------------- texture


def _albedo(verts, regions, rng):
    palette = {
        "torso": (0.24, 0.40, 0.72), "head": (0.82, 0.64, 0.52),
        "arm": (0.80, 0.62, 0.50), "leg": (0.26, 0.23, 0.30),
        "foot": (0.16, 0.16, 0.19), "hand": (0.76, 0.58, 0.47),
        "face": (0.85, 0.68, 0.55),
    }
    base = np.zeros((len(verts), 3))
    for i, r in enumerate(regions):
        base[i] = palette[r.split("_")[0]]
    x, y, z = verts.T
    wave = 0.5 * np.sin(9.0 * x) * np.cos(7.0 * y + 1.3) + 0.5 * np.sin(5.0 * z + 0.7) * np.sin(11.0 * y)
    stripes = 0.5 * np.sin(26.0 * y)
    mod = 1.0 + 0.10 * wave + 0.08 * stripes
    base *= mod[:, None]
    base += rng.normal(0.0, 0.01, size=base.shape)
    return np.clip(base, 0.02, 0.98)


# ----------------------------------------------------------------- assembling


def make_synthetic_body(config: SyntheticBodyConfig | None = None) -> BodyModel:
    """Build the articulated test body with companion scanned hands."""
    cfg = config or SyntheticBodyConfig()
    cfg.validate()
    s = cfg.height_scale
    d = cfg.density

    def n(x):
        return max(3, int(round(x * d)))

    names, parents, rest = _skeleton(cfg)
    jidx = {nm: i for i, nm in enumerate(names)}

    pieces: list[tuple[np.ndarray, np.ndarray, str]] = []

    def add(verts, faces, region):
        pieces.append((verts, faces, region))

    add(*capsule(rest[jidx["pelvis"]] - (0, 0.12 * s, 0), rest[jidx["neck"]], 0.145 * s, 0.105 * s,
                 n_seg=n(12), n_rings=n(8)), "torso")
    add(*ellipsoid(rest[jidx["head"]] + (0, 0.085 * s, 0), (0.090 * s, 0.115 * s, 0.095 * s),
                   n_lat=n(9), n_lon=n(12)), "head")
    for side, sign in (("l", 1.0), ("r", -1.0)):
        sh, el, wr = rest[jidx[f"{side}_shoulder"]], rest[jidx[f"{side}_elbow"]], rest[jidx[f"{side}_wrist"]]
        add(*capsule(sh, el, 0.047 * s, 0.040 * s, n_seg=n(8), n_rings=n(4)), f"arm_{side}")
        add(*capsule(el, wr, 0.038 * s, 0.030 * s, n_seg=n(8), n_rings=n(4)), f"arm_{side}")
        hp, kn, an = rest[jidx[f"{side}_hip"]], rest[jidx[f"{side}_knee"]], rest[jidx[f"{side}_ankle"]]
        add(*capsule(hp, kn, 0.072 * s, 0.056 * s, n_seg=n(10), n_rings=n(5)), f"leg_{side}")
        add(*capsule(kn, an, 0.056 * s, 0.040 * s, n_seg=n(10), n_rings=n(5)), f"leg_{side}")
        add(*capsule(an, an + np.array([0.0, -0.035, 0.115]) * s, 0.038 * s, 0.030 * s,
                     n_seg=n(8), n_rings=n(3)), f"foot_{side}")
        palm_c = wr + np.array([sign * 0.055, 0.0, 0.0]) * s
        add(*ellipsoid(palm_c, (0.052 * s, 0.017 * s, 0.044 * s), n_lat=n(6), n_lon=n(10)), f"hand_{side}")
        for f in range(cfg.n_fingers):
            mcp = rest[jidx[f"{side}_f{f}_mcp"]]
            pip = rest[jidx[f"{side}_f{f}_pip"]]
            dip = rest[jidx[f"{side}_f{f}_dip"]]
            tipp = dip + np.array([sign * 0.021, 0.0, 0.0]) * s
            r = 0.0115 * s if f == 0 else 0.0095 * s
            add(*capsule(mcp, pip, r, r * 0.92, n_seg=n(6), n_rings=n(2), n_cap=1), f"hand_{side}")
            add(*capsule(pip, dip, r * 0.92, r * 0.85, n_seg=n(6), n_rings=n(2), n_cap=1), f"hand_{side}")
            add(*capsule(dip, tipp, r * 0.85, r * 0.7, n_seg=n(6), n_rings=n(2), n_cap=1), f"hand_{side}")

    verts = np.concatenate([p[0] for p in pieces])
    offsets = np.cumsum([0] + [len(p[0]) for p in pieces])
    faces = np.concatenate([p[1] + offsets[i] for i, p in enumerate(pieces)])
    regions: list[str] = []
    for p in pieces:
        regions += [p[2]] * len(p[0])

    hand_map = {
        "left": np.flatnonzero([r == "hand_l" for r in regions]).astype(np.int64),
        "right": np.flatnonzero([r == "hand_r" for r in regions]).astype(np.int64),
    }

    head_c = rest[jidx["head"]] + np.array([0.0, 0.085 * s, 0.0])
    is_head = np.asarray([r == "head" for r in regions])
    face_mask = is_head & (verts[:, 2] > head_c[2] + 0.030 * s)

    weights = _skin_weights(verts, names, parents, rest)
    rng = np.random.default_rng(cfg.texture_seed)
    colors = _albedo(verts, regions, rng)

    model = BodyModel(
        template_vertices=verts,
        faces=faces,
        joint_parents=parents,
        rest_joints=rest,
        skin_weights=weights,
        hand_vertex_map=hand_map,
        face_vertex_mask=face_mask,
        joint_names=names,
        vertex_colors=colors,
    )
    model.scan_hand_vertices = {
        side: verts[hand_map[side]] + hand_bump_field(model, side, cfg.bump_amplitude)
        for side in ("left", "right")
    }
    return model


def hand_bump_field(model: BodyModel, side: str, amplitude: float) -> np.ndarray:
    """Deterministic displacement field on the hand sub-mesh, max-norm == amplitude."""
    from .body import vertex_normals

    idx = model.hand_vertex_map[side]
    v = model.template_vertices[idx]
    nrm = vertex_normals(model)[idx]
    x, y, z = (v - v.mean(axis=0)).T
    profile = np.sin(260.0 * x) * np.cos(210.0 * z) + 0.6 * np.sin(170.0 * y + 0.9)
    disp = profile[:, None] * nrm
    peak = np.linalg.norm(disp, axis=1).max()
    if peak < 1e-12 or amplitude == 0.0:
        return np.zeros_like(disp)
    return disp * (amplitude / peak)


def hand_submesh(model: BodyModel, side: str) -> tuple[np.ndarray, np.ndarray]:
    """Hand vertices and locally re-indexed faces for one side."""
    idx = model.hand_vertex_map[side]
    lookup = -np.ones(model.n_vertices, dtype=np.int64)
    lookup[idx] = np.arange(len(idx))
    inside = (lookup[model.faces] >= 0).all(axis=1)
    return model.template_vertices[idx], lookup[model.faces[inside]]


def hand_joint_indices(model: BodyModel, side: str) -> np.ndarray:
    prefix = "l_f" if side == "left" else "r_f"
    return np.asarray([i for i, n in enumerate(model.joint_names) if n.startswith(prefix)], dtype=np.int64)
