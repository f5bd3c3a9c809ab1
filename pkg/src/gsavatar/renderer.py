"""Forward Gaussian-splat rasteriser: projection, footprints, compositing.

Three compositing paths share one set of per-pixel formulas:

* :func:`composite_reference` - dumb per-pixel loops, the correctness oracle;
* the tiled fast path used for plain rendering (bit-identical to the oracle);
* the same vectorised kernel running on a recording tape for training.

Splats are blended front to back with a stable depth sort; a pixel stops
accumulating once its transmittance drops below ``T_MIN``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .avatar import AvatarModel, FrameGaussians, apply_affine, build_frame_gaussians, rotate_covariance
from .body import Pose

ALPHA_CLAMP = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
COV_BLUR = 0.3     # px^2 added to the diagonal, floors the eigenvalues
TILE = 16
RADIUS_SIGMA = 3.0


@dataclass
class Camera:
    """Calibrated pinhole camera with a world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray       # (3, 3) world -> camera rotation
    t: np.ndarray       # (3,)
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("near must be < far")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")

    def world_to_cam(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.t

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "extrinsic": np.concatenate([self.R, self.t[:, None]], axis=1).tolist(),
            "width": self.width, "height": self.height,
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Camera":
        ext = np.asarray(doc["extrinsic"], dtype=np.float64)
        return cls(doc["fx"], doc["fy"], doc["cx"], doc["cy"], ext[:, :3], ext[:, 3],
                   doc["width"], doc["height"], doc.get("near", 0.05), doc.get("far", 100.0))


@dataclass
class Splat2D:
    """One projected Gaussian footprint in pixel space."""

    center: np.ndarray   # (2,) pixel coords
    cov2d: np.ndarray    # (2, 2) SPD, pixels^2 (blur included)
    color: np.ndarray    # (3,)
    opacity: float
    depth: float


class ProjectedSplats:
    """Batched engine-side footprint data plus numeric culling info."""

    def __init__(self, u, v, conic, colors, opacities, depths, radii, keep):
        self.u = u                  # (N,) handles: pixel x of the center
        self.v = v                  # (N,) handles: pixel y
        self.conic = conic          # (N, 3) handles: inverse cov (a, b, c)
        self.colors = colors        # (N, 3) handles
        self.opacities = opacities  # (N,) handles
        self.depths = depths        # (N,) numeric camera-z
        self.radii = radii          # (N,) numeric pixel radius
        self.keep = keep            # (N,) bool: survived culling


def _cov2d_entries(eng, a, b, c, d, cov_cam):
    """J Sigma_cam J^T for J = [[a, 0, b], [0, c, d]] per row."""
    av, bv, cv, dv = (eng.value(x) for x in (a, b, c, d))
    S = eng.value(cov_cam)
    s00, s01, s02, s11, s12, s22 = S.T
    v00 = av * av * s00 + 2 * av * bv * s02 + bv * bv * s22
    v01 = av * cv * s01 + av * dv * s02 + bv * cv * s12 + bv * dv * s22
    v11 = cv * cv * s11 + 2 * cv * dv * s12 + dv * dv * s22
    if not eng.recording:
        return np.stack([v00, v01, v11], axis=1)
    n = len(av)
    i00 = np.stack([a, b, cov_cam[:, 0], cov_cam[:, 2], cov_cam[:, 5]], 1)
    p00 = np.stack([2 * av * s00 + 2 * bv * s02, 2 * av * s02 + 2 * bv * s22,
                    av * av, 2 * av * bv, bv * bv], 1)
    i01 = np.stack([a, b, c, d, cov_cam[:, 1], cov_cam[:, 2], cov_cam[:, 4], cov_cam[:, 5]], 1)
    p01 = np.stack([cv * s01 + dv * s02, cv * s12 + dv * s22,
                    av * s01 + bv * s12, av * s02 + bv * s22,
                    av * cv, av * dv, bv * cv, bv * dv], 1)
    i11 = np.stack([c, d, cov_cam[:, 3], cov_cam[:, 4], cov_cam[:, 5]], 1)
    p11 = np.stack([2 * cv * s11 + 2 * dv * s12, 2 * cv * s12 + 2 * dv * s22,
                    cv * cv, 2 * cv * dv, dv * dv], 1)
    o00 = eng.fused(v00, i00, p00)
    o01 = eng.fused(v01, i01, p01)
    o11 = eng.fused(v11, i11, p11)
    return np.stack([o00, o01, o11], axis=1)


def max_eigenvalue_2x2(c00, c01, c11):
    mid = 0.5 * (c00 + c11)
    return mid + np.sqrt(np.maximum(0.25 * (c00 - c11) ** 2 + c01 * c01, 0.0))


def footprint_radius(c00, c01, c11):
    """Integer pixel radius covering the blurred footprint."""
    return np.ceil(RADIUS_SIGMA * np.sqrt(max_eigenvalue_2x2(c00, c01, c11)))


def project(eng, positions, cov6, colors, opacities, cam: Camera) -> ProjectedSplats:
    """Project posed Gaussians into pixel space with the local affine model."""
    n = len(positions)
    A = np.broadcast_to(cam.R, (n, 3, 3))
    b = np.broadcast_to(cam.t, (n, 3))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        cam_pts = apply_affine(eng, A, b, positions)
        cov_cam = rotate_covariance(eng, cov6, A)

        xc, yc, zc = cam_pts[:, 0], cam_pts[:, 1], cam_pts[:, 2]
        depths = np.asarray(eng.value(zc), dtype=np.float64)
        safe = depths > cam.near
        rz = eng.powc(zc, -1.0)
        u = eng.axpb(eng.mul(xc, rz), cam.fx, cam.cx)
        v = eng.axpb(eng.mul(yc, rz), cam.fy, cam.cy)

        ja = eng.axpb(rz, cam.fx)
        jc = eng.axpb(rz, cam.fy)
        rz2 = eng.square(rz)
        jb = eng.axpb(eng.mul(xc, rz2), -cam.fx)
        jd = eng.axpb(eng.mul(yc, rz2), -cam.fy)
        cov2 = _cov2d_entries(eng, ja, jb, jc, jd, cov_cam)
        c00 = eng.axpb(cov2[:, 0], 1.0, COV_BLUR)
        c01 = cov2[:, 1]
        c11 = eng.axpb(cov2[:, 2], 1.0, COV_BLUR)

        c00v, c01v, c11v = eng.value(c00), eng.value(c01), eng.value(c11)
        radii = np.where(safe, footprint_radius(c00v, c01v, c11v), 0.0)

        det = eng.fused(
            c00v * c11v - c01v * c01v,
            np.stack([c00, c01, c11], 1) if eng.recording else None,
            np.stack([c11v, -2 * c01v, c00v], 1) if eng.recording else None,
        )
        rdet = eng.powc(det, -1.0)
        conic = np.stack([eng.mul(c11, rdet), eng.axpb(eng.mul(c01, rdet), -1.0), eng.mul(c00, rdet)], axis=1)

        uv_vals = np.stack([eng.value(u), eng.value(v)], axis=1)
    keep = (
        safe
        & (depths < cam.far)
        & (uv_vals[:, 0] + radii >= 0) & (uv_vals[:, 0] - radii <= cam.width)
        & (uv_vals[:, 1] + radii >= 0) & (uv_vals[:, 1] - radii <= cam.height)
    )
    return ProjectedSplats(u, v, conic, colors, opacities, depths, radii, keep)


def project_gaussian(mean, cov, color, opacity, cam: Camera) -> Splat2D | None:
    """Single-Gaussian convenience projection; returns None when culled."""
    from .nn import NUMERIC

    cov = np.asarray(cov, dtype=np.float64)
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise ValueError("covariance must be symmetric positive definite")
    cov6 = np.array([[cov[0, 0], cov[0, 1], cov[0, 2], cov[1, 1], cov[1, 2], cov[2, 2]]])
    pr = project(NUMERIC, np.asarray(mean, dtype=np.float64).reshape(1, 3), cov6,
                 np.asarray(color, dtype=np.float64).reshape(1, 3),
                 np.asarray([opacity], dtype=np.float64), cam)
    if not pr.keep[0]:
        return None
    conic = pr.conic[0]
    det = conic[0] * conic[2] - conic[1] ** 2
    cov2d = np.array([[conic[2], -conic[1]], [-conic[1], conic[0]]]) / det
    return Splat2D(np.array([pr.u[0], pr.v[0]]), cov2d, pr.colors[0].copy(), float(pr.opacities[0]), float(pr.depths[0]))


# ----------------------------------------------------------------- compositing


def splat_order(depths: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Front-to-back ordering of surviving splats, stable on input index."""
    idx = np.flatnonzero(keep)
    return idx[np.argsort(depths[idx], kind="stable")]


def _bboxes(cu, cv, radii, W, H):
    x0 = np.maximum(np.floor(cu - radii), 0.0).astype(np.int64)
    x1 = np.minimum(np.ceil(cu + radii), W - 1.0).astype(np.int64)
    y0 = np.maximum(np.floor(cv - radii), 0.0).astype(np.int64)
    y1 = np.minimum(np.ceil(cv + radii), H - 1.0).astype(np.int64)
    return x0, x1, y0, y1


def _t_update(eng, T, a):
    Tv = eng.value(T)
    av = eng.value(a)
    vals = Tv * (1.0 - av)
    if not eng.recording:
        return vals
    idx = np.stack([T, a], axis=1)
    partials = np.stack([1.0 - av, -Tv], axis=1)
    return eng.fused(vals, idx, partials)


def _composite_runs(eng, pix, rank_a, rank_col, starts, run_len, image, alpha, zero, one):
    """Depth-ordered per-pixel accumulation over CSR runs (vectorised).

    ``pix``: flat pixel id per run; ``rank_a``/``rank_col``: per-pair alpha
    and colour handles sorted by (pixel, depth rank).  Updates ``image`` and
    ``alpha`` rows at the run pixels.
    """
    n_runs = len(starts)
    if not n_runs:
        return
    if eng.recording:
        T = np.full(n_runs, one, dtype=np.int64)
        C = np.full((n_runs, 3), zero, dtype=np.int64)
    else:
        T = np.ones(n_runs)
        C = np.zeros((n_runs, 3))
    alive = np.arange(n_runs)
    max_len = int(run_len.max())
    for r in range(max_len):
        has = run_len[alive] > r
        alive = alive[has]
        if not len(alive):
            break
        Tv = np.atleast_1d(eng.value(T[alive]))
        ok = Tv >= T_MIN
        alive = alive[ok]
        if not len(alive):
            break
        pair = starts[alive] + r
        a = rank_a[pair]
        w = eng.mul(a, T[alive])
        for c in range(3):
            C[alive, c] = eng.fma(C[alive, c], w, rank_col[pair, c])
        T[alive] = _t_update(eng, T[alive], a)
    image[pix] = C
    alpha[pix] = eng.axpb(T, -1.0, 1.0)


def composite_splats(eng, pr: ProjectedSplats, cam: Camera, tiled: bool):
    """Composite projected splats into an (H, W, 3) image and (H, W) alpha."""
    W, H = cam.width, cam.height
    if eng.recording:
        zero = int(eng.constant([0.0])[0])
        one = int(eng.constant([1.0])[0])
        image = np.full((H * W, 3), zero, dtype=np.int64)
        alpha = np.full(H * W, zero, dtype=np.int64)
    else:
        zero, one = 0.0, 1.0
        image = np.zeros((H * W, 3))
        alpha = np.zeros(H * W)

    order = splat_order(pr.depths, pr.keep)
    if not len(order):
        return image.reshape(H, W, 3), alpha.reshape(H, W)

    cu = np.asarray(eng.value(pr.u), dtype=np.float64)[order]
    cv = np.asarray(eng.value(pr.v), dtype=np.float64)[order]
    x0, x1, y0, y1 = _bboxes(cu, cv, pr.radii[order], W, H)
    widths = x1 - x0 + 1
    heights = y1 - y0 + 1
    counts = np.maximum(widths, 0) * np.maximum(heights, 0)
    valid = counts > 0
    total = int(counts[valid].sum())
    if total == 0:
        return image.reshape(H, W, 3), alpha.reshape(H, W)

    ordv = np.flatnonzero(valid)
    cnt = counts[ordv]
    rep = np.repeat(ordv, cnt)                       # rank within `order`
    offs = np.repeat(np.cumsum(cnt) - cnt, cnt)
    within = np.arange(total) - offs
    px = x0[rep] + within % widths[rep]
    py = y0[rep] + within // widths[rep]
    pix = py * W + px

    # footprint weight and effective alpha per pair
    conic_o = pr.conic[order]
    uo, vo = pr.u[order], pr.v[order]
    opo = pr.opacities[order]
    dx = (px + 0.5) - cu[rep]
    dy = (py + 0.5) - cv[rep]
    Av, Bv, Cv = (eng.value(conic_o[:, i])[rep] for i in range(3))
    qv = (Av * dx) * dx + ((2.0 * Bv) * dx) * dy + (Cv * dy) * dy
    if eng.recording:
        qidx = np.stack([conic_o[rep, 0], conic_o[rep, 1], conic_o[rep, 2], uo[rep], vo[rep]], 1)
        qp = np.stack([dx * dx, (2.0 * dx) * dy, dy * dy,
                       -(2.0 * Av * dx + 2.0 * Bv * dy), -(2.0 * Bv * dx + 2.0 * Cv * dy)], 1)
        q = eng.fused(qv, qidx, qp)
    else:
        q = qv
    g = eng.exp(eng.axpb(q, -0.5))
    a = eng.minc(eng.mul(opo[rep], g), ALPHA_CLAMP)

    av = np.asarray(eng.value(a), dtype=np.float64)
    strong = av >= ALPHA_MIN
    pix, rep, a = pix[strong], rep[strong], a[strong]
    if not len(pix):
        return image.reshape(H, W, 3), alpha.reshape(H, W)
    cols = pr.colors[order][rep]

    srt = np.lexsort((rep, pix))
    pix_s, a_s, col_s = pix[srt], a[srt], cols[srt]

    if tiled:
        tile_id = (pix_s // W // TILE) * ((W + TILE - 1) // TILE) + (pix_s % W) // TILE
        t_order = np.argsort(tile_id, kind="stable")
        pix_s, a_s, col_s = pix_s[t_order], a_s[t_order], col_s[t_order]
        bounds = np.flatnonzero(np.r_[True, tile_id[t_order][1:] != tile_id[t_order][:-1], True])
        groups = [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]
    else:
        groups = [(0, len(pix_s))]

    for lo, hi in groups:
        p = pix_s[lo:hi]
        starts = np.flatnonzero(np.r_[True, p[1:] != p[:-1]])
        run_len = np.diff(np.r_[starts, len(p)])
        _composite_runs(eng, p[starts], a_s[lo:hi], col_s[lo:hi], starts, run_len,
                        image, alpha, zero, one)
    return image.reshape(H, W, 3), alpha.reshape(H, W)


def composite(splats: list[Splat2D], cam: Camera):
    """Tiled fast-path compositing of a splat list (no gradients)."""
    from .nn import NUMERIC

    pr = _splats_to_batch(splats, cam)
    return composite_splats(NUMERIC, pr, cam, tiled=True)


def _splats_to_batch(splats: list[Splat2D], cam: Camera) -> ProjectedSplats:
    n = len(splats)
    u = np.array([s.center[0] for s in splats])
    v = np.array([s.center[1] for s in splats])
    colors = np.array([s.color for s in splats]).reshape(n, 3)
    opac = np.array([s.opacity for s in splats])
    depths = np.array([s.depth for s in splats])
    conic = np.zeros((n, 3))
    radii = np.zeros(n)
    for i, s in enumerate(splats):
        c = np.asarray(s.cov2d, dtype=np.float64)
        det = c[0, 0] * c[1, 1] - c[0, 1] ** 2
        conic[i] = (c[1, 1] / det, -c[0, 1] / det, c[0, 0] / det)
        radii[i] = footprint_radius(c[0, 0], c[0, 1], c[1, 1])
    keep = depths > cam.near
    return ProjectedSplats(u, v, conic, colors, opac, depths, radii, keep)


def composite_reference(splats: list[Splat2D], cam: Camera):
    """Per-pixel brute-force compositing; the correctness oracle."""
    W, H = cam.width, cam.height
    image = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    pr = _splats_to_batch(splats, cam)
    order = splat_order(pr.depths, pr.keep)
    if not len(order):
        return image, alpha
    x0, x1, y0, y1 = _bboxes(pr.u[order], pr.v[order], pr.radii[order], W, H)
    for py in range(H):
        for px in range(W):
            T = 1.0
            C = np.zeros(3)
            for k, s in enumerate(order):
                if not (x0[k] <= px <= x1[k] and y0[k] <= py <= y1[k]):
                    continue
                if T < T_MIN:
                    break
                dx = (px + 0.5) - pr.u[s]
                dy = (py + 0.5) - pr.v[s]
                A, B, Cc = pr.conic[s]
                q = (A * dx) * dx + ((2.0 * B) * dx) * dy + (Cc * dy) * dy
                g = np.exp(q * -0.5)
                a = min(pr.opacities[s] * g, ALPHA_CLAMP)
                if a < ALPHA_MIN:
                    continue
                w = a * T
                C = C + w * pr.colors[s]
                T = T * (1.0 - a)
            image[py, px] = C
            alpha[py, px] = 1.0 - T
    return image, alpha


# ---------------------------------------------------------------- full frames


def render_frame(eng, avatar: AvatarModel, pose: Pose, t: float, cam: Camera,
                 handles=None):
    """Render one posed frame; differentiable when ``eng`` is a tape.

    Returns (image, alpha, FrameGaussians); image is (H, W, 3) of engine
    handles (ids on a tape, floats otherwise).
    """
    fg = build_frame_gaussians(eng, avatar, pose, t, handles)
    pr = project(eng, fg.positions, fg.cov6, fg.colors, fg.opacities, cam)
    image, alpha = composite_splats(eng, pr, cam, tiled=not eng.recording)
    return image, alpha, fg


def render_frame_numeric(avatar: AvatarModel, pose: Pose, t: float, cam: Camera):
    from .nn import NUMERIC

    image, alpha, _ = render_frame(NUMERIC, avatar, pose, t, cam)
    return image, alpha


def save_camera_list(cams: list[Camera], path) -> None:
    Path(path).write_text(json.dumps([c.to_json() for c in cams]))


def load_camera_list(path) -> list[Camera]:
    return [Camera.from_json(d) for d in json.loads(Path(path).read_text())]
