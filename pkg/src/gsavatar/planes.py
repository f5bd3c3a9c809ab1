"""Plane-factorised feature fields: triplane (space) and hexplane (space-time).

Each field is a list of C x H x W trainable grids queried by projecting a
canonical point (plus normalised time for the hexplane) onto axis pairs and
bilinearly sampling.  Sampling is differentiable w.r.t. both the grids and
the query coordinates; out-of-range queries clamp to the border.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Mlp, ParameterStore

TRIPLANE_AXES = ((0, 1), (1, 2), (0, 2))
HEXPLANE_AXES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
TIME_AXIS = 3


@dataclass
class PlaneField:
    """A set of 2D feature grids spanning fixed coordinate pairs."""

    kind: str                   # "triplane" | "hexplane"
    channels: int
    resolution: int
    bounds_lo: np.ndarray       # (3,) canonical-space box, time is always [0, 1]
    bounds_hi: np.ndarray
    planes: list[np.ndarray] = field(default_factory=list)
    name: str = "planes"

    @property
    def axis_pairs(self):
        return TRIPLANE_AXES if self.kind == "triplane" else HEXPLANE_AXES

    @property
    def feature_dim(self) -> int:
        return len(self.axis_pairs) * self.channels

    @classmethod
    def create(cls, kind: str, channels: int = 32, resolution: int = 128,
               bounds=None, rng: np.random.Generator | None = None,
               init_halfwidth: float = 1e-4, name: str = "planes") -> "PlaneField":
        if kind not in ("triplane", "hexplane"):
            raise ValueError(f"unknown plane field kind {kind!r}")
        lo, hi = bounds if bounds is not None else (np.full(3, -1.0), np.full(3, 1.0))
        f = cls(kind, channels, resolution, np.asarray(lo, dtype=np.float64),
                np.asarray(hi, dtype=np.float64), [], name)
        rng = rng or np.random.default_rng(0)
        n_planes = len(f.axis_pairs)
        for _ in range(n_planes):
            f.planes.append(rng.uniform(-init_halfwidth, init_halfwidth,
                                        size=(channels, resolution, resolution)))
        return f

    @classmethod
    def bounds_from_points(cls, points: np.ndarray, margin: float = 0.05):
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        pad = margin * (hi - lo)
        return lo - pad, hi + pad

    def add_to(self, store: ParameterStore, group: str = "planes") -> None:
        for i, p in enumerate(self.planes):
            store.add(f"{self.name}.p{i}", p, group)

    def handles(self, handles_or_none, eng):
        if handles_or_none is None:
            return [eng.constant(p) for p in self.planes]
        return [handles_or_none[f"{self.name}.p{i}"] for i in range(len(self.planes))]

    def grid_scale_shift(self, axis: int) -> tuple[float, float]:
        """Linear map from canonical coordinate (or t) to [0, res-1]."""
        if axis == TIME_AXIS:
            lo, hi = 0.0, 1.0
        else:
            lo, hi = self.bounds_lo[axis], self.bounds_hi[axis]
        scale = (self.resolution - 1) / (hi - lo)
        return scale, -lo * scale


def sample_grid(eng, grid, u, v):
    """Bilinear sample of a (C, H, W) grid at per-row grid coords (u, v).

    ``grid``/``u``/``v`` are engine handles; coordinates clamp to the
    border, which also zeroes their gradient outside the grid.
    Returns an (n, C) handle array.
    """
    C, H, W = grid.shape
    uv = np.atleast_1d(eng.value(u))
    vv = np.atleast_1d(eng.value(v))
    n = uv.size

    uc = np.clip(uv, 0.0, H - 1.0)
    vc = np.clip(vv, 0.0, W - 1.0)
    iu = np.minimum(uc.astype(np.int64), H - 2) if H > 1 else np.zeros(n, dtype=np.int64)
    iv = np.minimum(vc.astype(np.int64), W - 2) if W > 1 else np.zeros(n, dtype=np.int64)
    fu = uc - iu
    fv = vc - iv
    w00 = (1 - fu) * (1 - fv)
    w01 = (1 - fu) * fv
    w10 = fu * (1 - fv)
    w11 = fu * fv

    gflat = grid.reshape(C, H * W)
    gv = eng.value(gflat)
    t00 = iu * W + iv
    g00 = gv[:, t00].T
    g01 = gv[:, t00 + 1].T
    g10 = gv[:, t00 + W].T
    g11 = gv[:, t00 + W + 1].T
    out = (w00[:, None] * g00 + w01[:, None] * g01
           + w10[:, None] * g10 + w11[:, None] * g11)

    if not eng.recording:
        return out

    in_u = ((uv > 0.0) & (uv < H - 1.0)).astype(np.float64)[:, None]
    in_v = ((vv > 0.0) & (vv < W - 1.0)).astype(np.float64)[:, None]
    du = ((1 - fv)[:, None] * (g10 - g00) + fv[:, None] * (g11 - g01)) * in_u
    dv = ((1 - fu)[:, None] * (g01 - g00) + fu[:, None] * (g11 - g10)) * in_v
    bshape = (n, C)
    idx = np.stack(
        [gflat[:, t00].T, gflat[:, t00 + 1].T, gflat[:, t00 + W].T, gflat[:, t00 + W + 1].T,
         np.broadcast_to(np.atleast_1d(u)[:, None], bshape),
         np.broadcast_to(np.atleast_1d(v)[:, None], bshape)],
        axis=2,
    )
    partials = np.stack(
        [np.broadcast_to(w00[:, None], bshape), np.broadcast_to(w01[:, None], bshape),
         np.broadcast_to(w10[:, None], bshape), np.broadcast_to(w11[:, None], bshape),
         du, dv],
        axis=2,
    )
    return eng.fused(out.ravel(), idx.reshape(-1, 6), partials.reshape(-1, 6)).reshape(n, C)


def sample_plane(eng, grid, u, v):
    """Single-query convenience: one (u, v) against one grid -> C handles.

    ``u``/``v`` may be plain floats (treated as constants) or existing
    engine handles.
    """

    def as_handle(x):
        if eng.recording and isinstance(x, float):
            return eng.constant([x])
        return np.atleast_1d(x)

    return sample_grid(eng, grid, as_handle(u), as_handle(v))[0]


def _plane_coords(eng, field: PlaneField, pts, t_handle, axis: int):
    if axis == TIME_AXIS:
        return t_handle
    scale, shift = field.grid_scale_shift(axis)
    return eng.axpb(pts[:, axis], scale, shift)


def _time_handle(eng, field: PlaneField, t: float, n: int):
    scale, shift = field.grid_scale_shift(TIME_AXIS)
    tg = scale * float(t) + shift
    if eng.recording:
        tid = eng.constant([tg])
        return np.full(n, tid[0], dtype=np.int64)
    return np.full(n, tg)


def triplane_feature(eng, field: PlaneField, pts, handles=None):
    """Concatenated bilinear samples over the (XY, YZ, XZ) planes -> (n, 3C)."""
    if field.kind != "triplane":
        raise ValueError("triplane_feature needs a triplane field")
    grids = field.handles(handles, eng)
    feats = []
    for grid, (a, b) in zip(grids, field.axis_pairs):
        u = _plane_coords(eng, field, pts, None, a)
        v = _plane_coords(eng, field, pts, None, b)
        feats.append(sample_grid(eng, grid, u, v))
    return np.concatenate(feats, axis=1)


def hexplane_feature(eng, field: PlaneField, pts, t: float, handles=None):
    """Concatenated samples over (XY, XZ, XT, YZ, YT, ZT) -> (n, 6C)."""
    if field.kind != "hexplane":
        raise ValueError("hexplane_feature needs a hexplane field")
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"normalised time {t} outside [0, 1]")
    n = len(pts)
    grids = field.handles(handles, eng)
    th = _time_handle(eng, field, t, n)
    feats = []
    for grid, (a, b) in zip(grids, field.axis_pairs):
        u = _plane_coords(eng, field, pts, th, a)
        v = _plane_coords(eng, field, pts, th, b)
        feats.append(sample_grid(eng, grid, u, v))
    return np.concatenate(feats, axis=1)


class FusionHead:
    """Aligns the hexplane feature to triplane width and blends the two.

    The alignment MLP maps 6C -> 3C; the fusion MLP maps the concatenated
    [triplane; aligned hexplane] pair to a per-channel weight in (0, 1).
    """

    def __init__(self, channels: int, hidden: int = 256,
                 rng: np.random.Generator | None = None, name: str = "fusion"):
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.align_mlp = Mlp([6 * channels, hidden, 3 * channels], rng=rng, name=f"{name}.align")
        self.fuse_mlp = Mlp([6 * channels, hidden, 3 * channels], rng=rng, name=f"{name}.fuse")

    def add_to(self, store: ParameterStore, group: str = "mlps") -> None:
        self.align_mlp.add_to(store, group)
        self.fuse_mlp.add_to(store, group)


def blend_features(eng, alpha, f_tri, f_aligned):
    """(1 - alpha) * f_tri + alpha * f_aligned, element-wise."""
    return eng.blend(alpha, f_tri, f_aligned)


def fuse_features(eng, head: FusionHead, f_tri, f_hex, handles=None):
    """Adaptive fusion of triplane and raw hexplane features.

    Returns (fused (n, 3C), alpha (n, 3C)); alpha is exposed so tests and
    diagnostics can inspect the learned balance.
    """
    d = 3 * head.channels
    if f_tri.shape[1] != d or f_hex.shape[1] != 2 * d:
        raise ValueError(f"fuse_features: expected widths {d} and {2 * d}, got {f_tri.shape[1]} and {f_hex.shape[1]}")
    aligned = head.align_mlp.forward(eng, f_hex, handles)
    alpha = eng.sigmoid(head.fuse_mlp.forward(eng, np.concatenate([f_tri, aligned], axis=1), handles))
    return blend_features(eng, alpha, f_tri, aligned), alpha
