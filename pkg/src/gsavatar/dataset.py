"""Synthetic sequence generation, dataset layout, and image file IO.

Dataset directory layout::

    frames/NNNN.ppm   8-bit binary RGB renders
    masks/NNNN.pgm    8-bit binary foreground masks
    cameras.json      per-frame pinhole cameras
    poses.json        per-frame joint quaternions + root translation + t
    body.json         the articulated body (with companion scan hands)
    gt_surface.npz    ground-truth surface point set used to render frames
    meta.json         sizes, splits, config echo

The ground truth is rendered with this package's own rasteriser from a
dense textured surface animated by smooth sinusoidal joint curves, so the
generator doubles as the oracle for everything downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body import BodyModel, Pose, lbs, lbs_rotation, upsample_surface
from .config import CameraConfig, DatasetConfig, MotionConfig, config_to_dict
from .geometry import axis_angle_quat, look_at, quat_multiply
from .nn import NUMERIC
from .renderer import Camera, ProjectedSplats, composite_splats, project
from .synthetic import hand_bump_field, make_synthetic_body

LIGHT_DIR = np.array([0.35, 0.75, 0.56])
MASK_ALPHA = 0.5


# ----------------------------------------------------------------- image IO


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit binary PPM (P6) from float RGB in [0, 1]."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        raw = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return raw.reshape(h, w, 3).astype(np.float64) / maxval


def write_pgm(path, mask: np.ndarray) -> None:
    """8-bit binary PGM (P5); truthy pixels become 255."""
    m = np.asarray(mask)
    h, w = m.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write((m.astype(np.uint8) * 255).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        f.readline()
        raw = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return raw.reshape(h, w) >= 128


def write_png(path, image: np.ndarray) -> None:
    """Optional PNG export; requires Pillow."""
    try:
        from PIL import Image
    except ImportError as e:  # pragma: no cover
        raise RuntimeError("PNG export requires Pillow (pip install gsavatar[png])") from e
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(str(path))


# -------------------------------------------------------------------- motion

# joint-name -> (axis, amplitude scale, frequency scale, phase)
_BODY_CURVES = {
    "l_shoulder": ((0, 0, 1), 0.55, 1.0, 0.0),
    "r_shoulder": ((0, 0, 1), -0.55, 1.0, np.pi / 3),
    "l_elbow": ((0, 1, 0), 0.7, 1.0, np.pi / 4),
    "r_elbow": ((0, 1, 0), -0.7, 1.0, np.pi / 2),
    "l_hip": ((1, 0, 0), 0.35, 1.0, 0.0),
    "r_hip": ((1, 0, 0), -0.35, 1.0, 0.0),
    "l_knee": ((1, 0, 0), 0.5, 1.0, np.pi / 2),
    "r_knee": ((1, 0, 0), -0.5, 1.0, np.pi / 2),
    "spine": ((0, 1, 0), 0.18, 1.0, 0.0),
    "neck": ((0, 1, 0), 0.22, 1.0, np.pi / 5),
    "head": ((1, 0, 0), 0.15, 2.0, 0.0),
    "jaw": ((1, 0, 0), 0.25, 3.0, 0.0),
}


def joint_angle_curves(model: BodyModel, motion: MotionConfig, n_frames: int):
    """Per-joint (axis, amplitude, frequency, phase); amplitude in radians."""
    curves = {}
    if motion.only_joints is not None:
        for name, amp in motion.only_joints.items():
            j = model.joint_names.index(name)
            curves[j] = (np.array([0.0, 0.0, 1.0]), amp, motion.frequency, 0.0)
        return curves
    for name, (axis, scale, fscale, phase) in _BODY_CURVES.items():
        if name in model.joint_names:
            j = model.joint_names.index(name)
            curves[j] = (np.asarray(axis, dtype=np.float64), motion.amplitude * scale,
                         motion.frequency * fscale, phase)
    for j, name in enumerate(model.joint_names):
        if "_f" in name:  # finger joints curl about z, mirrored per side
            sign = -1.0 if name.startswith("l_") else 1.0
            part = 1.0 if "mcp" in name else (0.8 if "pip" in name else 0.6)
            phase = 0.35 * (int(name.split("_f")[1][0]))
            curves[j] = (np.array([0.0, 0.0, sign]), motion.hand_amplitude * part,
                         motion.hand_frequency, phase)
    return curves


def joint_angles_at(curves: dict, n_joints: int, k: int, n_frames: int) -> np.ndarray:
    """Angle of every joint at frame k: a * sin(2 pi f k / n + phase)."""
    out = np.zeros(n_joints)
    for j, (_, amp, freq, phase) in curves.items():
        out[j] = amp * np.sin(2.0 * np.pi * freq * k / n_frames + phase)
    return out


def pose_at_frame(model: BodyModel, motion: MotionConfig, k: int, n_frames: int,
                  jitter_rng: np.random.Generator | None = None) -> Pose:
    curves = joint_angle_curves(model, motion, n_frames)
    angles = joint_angles_at(curves, model.n_joints, k, n_frames)
    quats = np.zeros((model.n_joints, 4))
    quats[:, 0] = 1.0
    for j, (axis, _, _, _) in curves.items():
        quats[j] = axis_angle_quat(axis, angles[j])
    if jitter_rng is not None and motion.pose_jitter > 0:
        for j in curves:
            naxis = jitter_rng.standard_normal(3)
            naxis /= np.linalg.norm(naxis)
            quats[j] = quat_multiply(quats[j], axis_angle_quat(naxis, jitter_rng.normal(0, motion.pose_jitter)))
    t = k / (n_frames - 1) if n_frames > 1 else 0.0
    root = np.array([motion.root_sway * np.sin(2 * np.pi * k / n_frames), 0.0, 0.0])
    return Pose(quats, root, t)


def camera_at_frame(cam_cfg: CameraConfig, width: int, height: int, k: int, n_frames: int) -> Camera:
    frac = k / (n_frames - 1) if n_frames > 1 else 0.5
    yaw = np.deg2rad(cam_cfg.orbit_degrees) * (frac - 0.5)
    target = np.array([0.0, cam_cfg.look_at_height, 0.0])
    eye = target + np.array([
        cam_cfg.distance * np.sin(yaw),
        cam_cfg.height - cam_cfg.look_at_height,
        cam_cfg.distance * np.cos(yaw),
    ])
    R, t = look_at(eye, target)
    f = (height / 2.0) / np.tan(np.deg2rad(cam_cfg.fov_degrees) / 2.0)
    return Camera(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, R=R, t=t,
                  width=width, height=height)


# ------------------------------------------------------------- ground truth


_BULGE_JOINTS = ("l_elbow", "r_elbow", "l_knee", "r_knee", "l_shoulder", "r_shoulder")


class GroundTruthSurface:
    """Dense textured surface whose posed renders form the dataset."""

    def __init__(self, model: BodyModel, n_points: int, seed: int, motion: MotionConfig,
                 n_frames: int):
        self.model = model
        self.motion = motion
        self.n_frames = n_frames
        self.samples = upsample_surface(model, n_points, seed=seed)
        tri = model.faces[self.samples.tri_index]
        self.albedo = np.einsum("nk,nkd->nd", self.samples.barycentric, model.vertex_colors[tri])
        area = mesh_area(model)
        radius = 0.62 * float(np.sqrt(area / n_points))
        self.cov6 = np.zeros((n_points, 6))
        self.cov6[:, [0, 3, 5]] = radius**2
        self.opacity = np.full(n_points, 0.95)
        self.curves = joint_angle_curves(model, motion, n_frames)
        bulge = np.zeros(n_points)
        names = model.joint_names
        for j, name in enumerate(names):
            if name in _BULGE_JOINTS and j in self.curves:
                sel = self.samples.dominant_joint == j
                bulge[sel] = 1.0
        self.bulge_mask = bulge
        # per-point hand bump (barycentric over the hand sub-mesh field)
        self.hand_bump = np.zeros((n_points, 3))
        for hid, side in enumerate(("left", "right")):
            field = np.zeros((model.n_vertices, 3))
            field[model.hand_vertex_map[side]] = hand_bump_field(model, side, model_bump_amplitude(model, side))
            sel = self.samples.hand_mask == hid
            if sel.any():
                self.hand_bump[sel] = np.einsum("nk,nkd->nd", self.samples.barycentric[sel], field[tri[sel]])
        self.finger_joints = [j for j, n in enumerate(names) if "_f" in n and j in self.curves]

    def canonical_points(self, k: int) -> np.ndarray:
        """Rest-space points with pose-tracked bulge and hand-bump offsets."""
        angles = joint_angles_at(self.curves, self.model.n_joints, k, self.n_frames)
        pts = self.samples.points.copy()
        dom = self.samples.dominant_joint
        amp = np.array([self.curves[j][1] if j in self.curves else 0.0 for j in range(self.model.n_joints)])
        mod = np.where(amp[dom] != 0, angles[dom] / np.where(amp[dom] == 0, 1.0, amp[dom]), 0.0)
        pts += (self.motion.bulge_amplitude * self.bulge_mask * mod)[:, None] * self.samples.normals
        flex = self.flexion(k)
        pts += self.hand_bump * (1.0 + self.motion.bump_pose_gain * flex)
        return pts

    def flexion(self, k: int) -> float:
        """Normalised mean |finger angle| in [0, 1]."""
        if not self.finger_joints:
            return 0.0
        angles = joint_angles_at(self.curves, self.model.n_joints, k, self.n_frames)
        amps = np.array([self.curves[j][1] for j in self.finger_joints])
        return float(np.mean(np.abs(angles[self.finger_joints]) / np.abs(amps)))

    def frame_splats(self, pose: Pose, k: int):
        pts = self.canonical_points(k)
        posed = lbs(self.model, pts, self.samples.skin_weights, pose)
        rot = lbs_rotation(self.model, self.samples.skin_weights, pose)
        n_world = np.einsum("nab,nb->na", rot, self.samples.normals)
        lam = np.maximum((n_world * LIGHT_DIR / np.linalg.norm(LIGHT_DIR)).sum(axis=1), 0.0)
        shade = (1.0 - self.motion.shading) + self.motion.shading * lam
        tint = 1.0 + self.motion.color_drift * np.sin(
            2.0 * np.pi * self.motion.color_frequency * k / self.n_frames + 0.4)
        colors = np.clip(self.albedo * (shade * tint)[:, None], 0.0, 1.0)
        # isotropic footprints: skip the rotation of the covariance
        return posed, self.cov6, colors, self.opacity


def model_bump_amplitude(model: BodyModel, side: str) -> float:
    """Amplitude implied by the stored companion scan (max-norm of the residual)."""
    scan = model.scan_hand_vertices.get(side)
    if scan is None:
        return 0.0
    base = model.template_vertices[model.hand_vertex_map[side]]
    return float(np.linalg.norm(scan - base, axis=1).max())


def mesh_area(model: BodyModel) -> float:
    V, F = model.template_vertices, model.faces
    return float(0.5 * np.linalg.norm(np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]]), axis=1).sum())


# ------------------------------------------------------------------ sequence


@dataclass
class FrameSample:
    index: int
    image: np.ndarray   # (H, W, 3) float [0, 1]
    mask: np.ndarray    # (H, W) bool
    camera: Camera
    pose: Pose

    @property
    def t(self) -> float:
        return self.pose.timestamp


def _splits(ds: DatasetConfig) -> dict[str, list[int]]:
    test = [k for k in range(ds.n_frames) if k % ds.test_every == ds.test_offset % ds.test_every]
    rest = [k for k in range(ds.n_frames) if k not in test]
    val = rest[1::max(2, len(rest) // max(ds.val_count, 1))][: ds.val_count] if ds.val_count else []
    train = [k for k in rest if k not in val]
    return {"train": train, "val": val, "test": test}


def gen_synthetic_sequence(ds_cfg: DatasetConfig, seed: int, out_dir) -> Path:
    """Build body, animate, render ground truth, and write the dataset."""
    ds_cfg.validate()
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    seeds = np.random.SeedSequence(seed).spawn(3)
    body_cfg = ds_cfg.body
    body_cfg.texture_seed = int(seeds[0].generate_state(1)[0] % (2**31))
    model = make_synthetic_body(body_cfg)
    model.save_json(out / "body.json")

    gt = GroundTruthSurface(model, ds_cfg.gt_points, int(seeds[1].generate_state(1)[0] % (2**31)),
                            ds_cfg.motion, ds_cfg.n_frames)
    splits = _splits(ds_cfg)
    jitter_rng = np.random.default_rng(seeds[2])

    poses, cams = [], []
    for k in range(ds_cfg.n_frames):
        jr = jitter_rng if (ds_cfg.motion.pose_jitter > 0 and k in splits["train"]) else None
        pose = pose_at_frame(model, ds_cfg.motion, k, ds_cfg.n_frames, jitter_rng=jr)
        cam = camera_at_frame(ds_cfg.camera, ds_cfg.width, ds_cfg.height, k, ds_cfg.n_frames)
        poses.append(pose)
        cams.append(cam)
        posed, cov6, colors, opacity = gt.frame_splats(pose, k)
        pr = project(NUMERIC, posed, cov6, colors, opacity, cam)
        image, alpha = composite_splats(NUMERIC, pr, cam, tiled=True)
        write_ppm(out / "frames" / f"{k:04d}.ppm", image)
        write_pgm(out / "masks" / f"{k:04d}.pgm", alpha > MASK_ALPHA)

    save_poses(out / "poses.json", poses)
    Path(out / "cameras.json").write_text(json.dumps([c.to_json() for c in cams]))
    np.savez(out / "gt_surface.npz",
             points=gt.samples.points, albedo=gt.albedo, normals=gt.samples.normals,
             dominant_joint=gt.samples.dominant_joint, hand_mask=gt.samples.hand_mask,
             bulge_mask=gt.bulge_mask, cov6=gt.cov6, opacity=gt.opacity)
    meta = {
        "format": "gsavatar-dataset",
        "version": 1,
        "n_frames": ds_cfg.n_frames,
        "width": ds_cfg.width,
        "height": ds_cfg.height,
        "splits": splits,
        "body": "body.json",
        "seed": seed,
        "dataset_config": config_to_dict_ds(ds_cfg),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1))
    return out


def config_to_dict_ds(ds: DatasetConfig) -> dict:
    import dataclasses

    return dataclasses.asdict(ds)


def save_poses(path, poses: list[Pose]) -> None:
    doc = [
        {
            "rotations": p.joint_rotations.tolist(),
            "root_translation": p.root_translation.tolist(),
            "t": p.timestamp,
        }
        for p in poses
    ]
    Path(path).write_text(json.dumps(doc))


def load_poses(path) -> list[Pose]:
    doc = json.loads(Path(path).read_text())
    return [Pose(np.asarray(d["rotations"]), np.asarray(d["root_translation"]), d["t"]) for d in doc]


class Dataset:
    """Loaded dataset directory: frames, splits, and the body model."""

    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / "meta.json").exists():
            raise FileNotFoundError(f"{self.root}/meta.json not found")
        self.meta = json.loads((self.root / "meta.json").read_text())
        if self.meta.get("format") != "gsavatar-dataset":
            raise ValueError(f"{self.root}: not a dataset directory")
        self.body = BodyModel.load_json(self.root / self.meta["body"])
        self.poses = load_poses(self.root / "poses.json")
        cams = json.loads((self.root / "cameras.json").read_text())
        self.cameras = [Camera.from_json(c) for c in cams]
        self.splits = {k: list(v) for k, v in self.meta["splits"].items()}

    def __len__(self) -> int:
        return self.meta["n_frames"]

    def frame(self, k: int) -> FrameSample:
        image = read_ppm(self.root / "frames" / f"{k:04d}.ppm")
        mask = read_pgm(self.root / "masks" / f"{k:04d}.pgm")
        return FrameSample(k, image, mask, self.cameras[k], self.poses[k])

    def frames(self, split: str) -> list[FrameSample]:
        return [self.frame(k) for k in self.splits[split]]
