"""Pose datasets: line-JSON ingestion, synthetic two-domain generation, pairing."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import skeleton as sk
from .errors import BadConfig, EmptyDataset, EmptyFile, LiftAdaptError, ParseError, SchemaViolation
from .geometry import CameraIntrinsics, project_pose
from .seeding import stream

CAMERA_FIELDS = ("fx", "fy", "cx", "cy", "width", "height")
RECORD_FIELDS = {"id", "joints_2d", "joints_3d", "camera"}
ROOT_TOL_MM = 1e-6


@dataclass(frozen=True, eq=False)
class PoseRecord:
    id: str
    camera: CameraIntrinsics
    joints_2d: Optional[np.ndarray] = None
    joints_3d: Optional[np.ndarray] = None

    def to_json(self) -> str:
        rec = {"id": self.id, "camera": self.camera.to_dict()}
        if self.joints_2d is not None:
            rec["joints_2d"] = np.asarray(self.joints_2d, float).tolist()
        if self.joints_3d is not None:
            rec["joints_3d"] = np.asarray(self.joints_3d, float).tolist()
        return json.dumps(rec, separators=(",", ":"), allow_nan=False)


@dataclass(eq=False)
class Dataset:
    records: list
    skeleton: sk.SkeletonDef
    domain_tag: str = "source"
    # generator-only side information, never serialised
    roots: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.records:
            raise EmptyDataset("dataset has no records")
        if self.domain_tag not in ("source", "target"):
            raise SchemaViolation(f"domain_tag must be 'source' or 'target', got {self.domain_tag!r}")

    def __len__(self):
        return len(self.records)

    @property
    def has_3d(self) -> bool:
        return all(r.joints_3d is not None for r in self.records)

    @property
    def has_2d(self) -> bool:
        return all(r.joints_2d is not None for r in self.records)

    @property
    def any_3d(self) -> bool:
        return any(r.joints_3d is not None for r in self.records)

    def joints_3d(self) -> np.ndarray:
        return np.stack([r.joints_3d for r in self.records])

    def joints_2d(self) -> np.ndarray:
        return np.stack([r.joints_2d for r in self.records])

    def cameras(self) -> CameraIntrinsics:
        return CameraIntrinsics.stack([r.camera for r in self.records])

    def ids(self) -> list:
        return [r.id for r in self.records]


def _check_joints(value, n_joints, dim, line_no, name):
    if not isinstance(value, list):
        raise SchemaViolation("expected a list of joints", line_no, name)
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise SchemaViolation("joints must be numeric", line_no, name) from None
    if arr.shape != (n_joints, dim):
        raise SchemaViolation(f"expected shape ({n_joints}, {dim}), got {arr.shape}", line_no, name)
    if not np.all(np.isfinite(arr)):
        raise SchemaViolation("non-finite coordinate", line_no, name)
    return arr


def _parse_record(rec, skel: sk.SkeletonDef, line_no: int) -> PoseRecord:
    if not isinstance(rec, dict):
        raise SchemaViolation("record must be a JSON object", line_no)
    extra = set(rec) - RECORD_FIELDS
    if extra:
        raise SchemaViolation(f"unknown fields {sorted(extra)}", line_no, sorted(extra)[0])
    if not isinstance(rec.get("id"), str):
        raise SchemaViolation("id must be a string", line_no, "id")
    cam = rec.get("camera")
    if not isinstance(cam, dict) or set(cam) != set(CAMERA_FIELDS):
        raise SchemaViolation(f"camera must have exactly {list(CAMERA_FIELDS)}", line_no, "camera")
    vals = [cam[k] for k in CAMERA_FIELDS]
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
               for v in vals):
        raise SchemaViolation("camera fields must be finite numbers", line_no, "camera")
    try:
        camera = CameraIntrinsics(*(float(v) for v in vals))
    except LiftAdaptError as e:
        raise SchemaViolation(str(e), line_no, "camera") from None

    j2 = j3 = None
    if "joints_2d" in rec:
        j2 = _check_joints(rec["joints_2d"], skel.joint_count, 2, line_no, "joints_2d")
    if "joints_3d" in rec:
        j3 = _check_joints(rec["joints_3d"], skel.joint_count, 3, line_no, "joints_3d")
        if np.abs(j3[skel.root_index]).max() > ROOT_TOL_MM:
            raise SchemaViolation("3D pose is not root-relative", line_no, "joints_3d")
    if j2 is None and j3 is None:
        raise SchemaViolation("record has neither joints_2d nor joints_3d", line_no)
    return PoseRecord(rec["id"], camera, j2, j3)


def load_dataset(path, skeleton: Optional[sk.SkeletonDef] = None,
                 domain_tag: Optional[str] = None) -> Dataset:
    """Read and validate a line-JSON pose file; any bad line aborts the load."""
    skel = skeleton or sk.default_skeleton()
    text = Path(path).read_text(encoding="utf-8")
    records = []
    seen = set()
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            raise ParseError("blank line", line_no)
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(e.msg, line_no) from None
        record = _parse_record(rec, skel, line_no)
        if record.id in seen:
            raise SchemaViolation(f"duplicate id {record.id!r}", line_no, "id")
        seen.add(record.id)
        records.append(record)
    if not records:
        raise EmptyFile("dataset file is empty")
    if domain_tag is None:
        domain_tag = "source" if all(r.joints_3d is not None for r in records) else "target"
    return Dataset(records, skel, domain_tag)


def save_dataset(ds: Dataset, path):
    text = "".join(r.to_json() + "\n" for r in ds.records)
    Path(path).write_text(text, encoding="utf-8")


def split_labels(ds: Dataset) -> tuple[Dataset, Dataset]:
    """Split into a 2D-only target set and its 3D ground-truth sidecar."""
    public = [PoseRecord(r.id, r.camera, r.joints_2d, None) for r in ds.records]
    gt = [PoseRecord(r.id, r.camera, None, r.joints_3d) for r in ds.records]
    return Dataset(public, ds.skeleton, "target"), Dataset(gt, ds.skeleton, "target")


def sidecar_path(path) -> Path:
    path = Path(path)
    name = path.name[:-len(".jsonl")] if path.name.endswith(".jsonl") else path.name
    return path.with_name(name + ".gt.jsonl")


# --- synthetic two-domain data -------------------------------------------------

# (mm) pelvis->hip, thigh, shin, pelvis->spine, spine->thorax, thorax->head,
# thorax->shoulder, upper arm, forearm
BASE_LENGTHS = {
    "hip": 130.0, "thigh": 450.0, "shin": 440.0, "spine": 230.0, "thorax": 250.0,
    "head": 200.0, "shoulder": 150.0, "upper_arm": 280.0, "forearm": 250.0,
}


@dataclass(frozen=True)
class SynthConfig:
    """Procedural pose family, camera and placement for one domain.

    Angle ranges are in degrees, ``(lo, hi)``; each record draws uniformly.
    Arm/leg polar angles are measured from straight down.
    """
    n: int = 1000
    camera: CameraIntrinsics = CameraIntrinsics(1100.0, 1100.0, 500.0, 500.0, 1000.0, 1000.0)
    depth_range: tuple = (4000.0, 6000.0)
    root_spread: float = 0.3  # root pixel offset from the principal point, fraction of half-size
    body_scale: tuple = (0.9, 1.1)
    bone_jitter: float = 0.03
    arm_polar: tuple = (0.0, 60.0)
    arm_azimuth: tuple = (-30.0, 60.0)
    elbow_bend: tuple = (0.0, 60.0)
    hip_flexion: tuple = (-15.0, 30.0)
    knee_bend: tuple = (0.0, 40.0)
    lean: tuple = (-10.0, 15.0)
    yaw: tuple = (-45.0, 45.0)
    seed: int = 0

    def __post_init__(self):
        if self.n <= 0:
            raise BadConfig("record count must be positive")
        if not 0 < self.depth_range[0] <= self.depth_range[1]:
            raise BadConfig(f"bad depth range {self.depth_range}")
        if self.depth_range[0] < 1500.0:
            raise BadConfig("subjects closer than 1.5 m can cross the camera plane")
        if not 0 < self.body_scale[0] <= self.body_scale[1]:
            raise BadConfig(f"bad body scale range {self.body_scale}")
        for name in ("arm_polar", "arm_azimuth", "elbow_bend", "hip_flexion", "knee_bend",
                     "lean", "yaw"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise BadConfig(f"{name}: lower bound exceeds upper bound")
        if not 0 <= self.root_spread < 1:
            raise BadConfig("root_spread must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["camera"] = self.camera.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "camera" in d and isinstance(d["camera"], dict):
            d["camera"] = CameraIntrinsics(**d["camera"])
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        try:
            return cls(**d)
        except TypeError as e:
            raise BadConfig(str(e)) from None


SOURCE_DEFAULT = SynthConfig(n=2000, seed=1)
TARGET_DEFAULT = SynthConfig(
    n=1000,
    camera=CameraIntrinsics(1500.0, 1500.0, 700.0, 600.0, 1280.0, 1280.0),
    depth_range=(2500.0, 3500.0),
    arm_polar=(20.0, 130.0),
    arm_azimuth=(-10.0, 90.0),
    elbow_bend=(10.0, 100.0),
    hip_flexion=(0.0, 70.0),
    knee_bend=(10.0, 90.0),
    lean=(0.0, 35.0),
    yaw=(-70.0, 70.0),
    seed=2,
)


def _u(rng, rng_range, size):
    lo, hi = rng_range
    return rng.uniform(lo, hi, size)


def _body_poses(cfg: SynthConfig, skel: sk.SkeletonDef, rng: np.random.Generator) -> np.ndarray:
    """Root-relative poses for the default 16-joint skeleton, camera frame (y down)."""
    n = cfg.n
    rad = np.deg2rad
    scale = _u(rng, cfg.body_scale, n)
    jitter = 1.0 + cfg.bone_jitter * rng.standard_normal((n, len(BASE_LENGTHS)))
    L = {k: BASE_LENGTHS[k] * scale * jitter[:, i] for i, k in enumerate(BASE_LENGTHS)}

    # body frame: x to the subject's left, y up, z towards the camera
    def unit(x, y, z):
        v = np.stack([x, y, z], axis=-1)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    lean = rad(_u(rng, cfg.lean, n))
    side_lean = rad(rng.uniform(-5, 5, n))
    up = unit(np.sin(side_lean), np.cos(lean) * np.cos(side_lean), np.sin(lean))
    nod = rad(rng.uniform(-10, 20, n))
    head_dir = unit(np.sin(side_lean), np.cos(lean + nod), np.sin(lean + nod))

    P = np.zeros((n, 16, 3))

    def leg(side, hip_j, knee_j, ankle_j):
        hip_dir = unit(side * np.ones(n), rng.uniform(-0.1, 0.1, n), rng.uniform(-0.1, 0.1, n))
        P[:, hip_j] = hip_dir * L["hip"][:, None]
        flex = rad(_u(rng, cfg.hip_flexion, n))
        abd = rad(rng.uniform(-5, 15, n))
        thigh = unit(side * np.sin(abd), -np.cos(flex) * np.cos(abd), np.sin(flex))
        P[:, knee_j] = P[:, hip_j] + thigh * L["thigh"][:, None]
        shin_a = flex - rad(_u(rng, cfg.knee_bend, n))
        shin = unit(side * np.sin(abd), -np.cos(shin_a), np.sin(shin_a))
        P[:, ankle_j] = P[:, knee_j] + shin * L["shin"][:, None]

    def arm(side, sh_j, el_j, wr_j):
        sh_dir = unit(side * np.ones(n), rng.uniform(-0.3, 0.0, n), rng.uniform(-0.1, 0.1, n))
        P[:, sh_j] = P[:, 8] + sh_dir * L["shoulder"][:, None]
        pol = rad(_u(rng, cfg.arm_polar, n))
        az = rad(_u(rng, cfg.arm_azimuth, n))
        upper = unit(side * np.sin(pol) * np.cos(az), -np.cos(pol), np.sin(pol) * np.sin(az))
        P[:, el_j] = P[:, sh_j] + upper * L["upper_arm"][:, None]
        pol2 = pol + rad(_u(rng, cfg.elbow_bend, n))
        az2 = az + rad(rng.uniform(0, 40, n))
        fore = unit(side * np.sin(pol2) * np.cos(az2), -np.cos(pol2), np.sin(pol2) * np.sin(az2))
        P[:, wr_j] = P[:, el_j] + fore * L["forearm"][:, None]

    leg(-1.0, 1, 2, 3)
    leg(1.0, 4, 5, 6)
    P[:, 7] = up * L["spine"][:, None]
    P[:, 8] = P[:, 7] + up * L["thorax"][:, None]
    P[:, 9] = P[:, 8] + head_dir * L["head"][:, None]
    arm(1.0, 10, 11, 12)
    arm(-1.0, 13, 14, 15)

    # global yaw about the vertical, small pitch, then body -> camera frame
    yaw = rad(_u(rng, cfg.yaw, n))
    pitch = rad(rng.uniform(-5, 5, n))
    R = sk.rodrigues(yaw[:, None] * np.array([0.0, 1.0, 0.0]))
    R = sk.rodrigues(pitch[:, None] * np.array([1.0, 0.0, 0.0])) @ R
    P = P @ np.swapaxes(R, -1, -2)
    # camera: y down, z away from the camera
    P = P * np.array([1.0, -1.0, -1.0])
    return P


def synth_generate(cfg: SynthConfig, rng: Optional[np.random.Generator] = None,
                   skeleton: Optional[sk.SkeletonDef] = None, id_prefix: str = "rec") -> Dataset:
    """Labelled synthetic dataset: 3D poses placed at random roots and projected.

    Always returns both 2D and 3D; use ``split_labels`` to derive a target
    set and its ground-truth sidecar. Sampled roots are kept in ``.roots``.
    """
    skel = skeleton or sk.default_skeleton()
    if skel.joint_count != 16 or skel.to_dict() != sk.default_skeleton().to_dict():
        raise BadConfig("synthetic generation is defined for the default 16-joint skeleton")
    if rng is None:
        rng = stream(cfg.seed, "synth")
    poses = _body_poses(cfg, skel, rng)
    poses -= poses[:, skel.root_index:skel.root_index + 1]

    cam = cfg.camera
    z = _u(rng, cfg.depth_range, cfg.n)
    u = cam.cx + cfg.root_spread * rng.uniform(-1, 1, cfg.n) * min(cam.cx, cam.width - cam.cx)
    v = cam.cy + cfg.root_spread * rng.uniform(-1, 1, cfg.n) * min(cam.cy, cam.height - cam.cy)
    roots = np.stack([z * (u - cam.cx) / cam.fx, z * (v - cam.cy) / cam.fy, z], axis=-1)
    pose2d = project_pose(poses, roots, cam)

    width = len(str(cfg.n - 1))
    records = [PoseRecord(f"{id_prefix}{i:0{width}d}", cam, pose2d[i], poses[i])
               for i in range(cfg.n)]
    return Dataset(records, skel, "source", roots=roots)


# --- GPA pairing -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PairingPlan:
    targets: np.ndarray  # target index for every source index
    epoch: int
    seed: int


def pairing_sampler(src, tar, epoch: int, seed: int, replace: bool = False) -> PairingPlan:
    """Assign a target record to every source record for one epoch.

    Without replacement every target index is used floor or ceil of
    ``N_src / N_tar`` times; the assignment is reshuffled every epoch.
    """
    n_s, n_t = len(src), len(tar)
    if n_s == 0 or n_t == 0:
        raise EmptyDataset("pairing needs nonempty source and target datasets")
    rng = stream(seed, "pairing", epoch)
    if replace:
        targets = rng.integers(0, n_t, n_s)
    else:
        perm = rng.permutation(n_t)
        targets = rng.permutation(perm[np.arange(n_s) % n_t])
    return PairingPlan(targets, epoch, seed)


def with_records(ds: Dataset, records) -> Dataset:
    return replace(ds, records=list(records), roots=None)
