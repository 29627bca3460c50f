"""Skeleton topology, bone-vector representation and local pose transforms.

Bone ``k`` connects ``skel.bone_parent[k]`` to ``skel.bone_child[k]``; bones are
listed in ascending child-joint order, which is also the order used for
per-bone arrays (directions, lengths, part labels, KCS rows).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    BadRange,
    DegenerateDirection,
    NonPositiveRatio,
    SkeletonError,
    ZeroBone,
)

PARTS = ("torso", "left_arm", "right_arm", "left_leg", "right_leg")
ZERO_BONE_MM = 1e-9
# image y points down, so "up" is -Y in camera coordinates
VERTICAL_AXIS = np.array([0.0, -1.0, 0.0])


@dataclass(frozen=True, eq=False)
class SkeletonDef:
    names: tuple
    parent: tuple
    root_index: int
    part_assignment: tuple
    _topo: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "parent", tuple(None if p is None or p < 0 else int(p)
                                                 for p in self.parent))
        object.__setattr__(self, "part_assignment", tuple(self.part_assignment))
        J = len(self.parent)
        if J < 2:
            raise SkeletonError("skeleton needs at least two joints")
        if len(self.names) != J:
            raise SkeletonError(f"{len(self.names)} names for {J} joints")
        if not 0 <= self.root_index < J:
            raise SkeletonError(f"root_index {self.root_index} out of range")
        roots = [j for j, p in enumerate(self.parent) if p is None]
        if roots != [self.root_index]:
            raise SkeletonError(f"exactly the root must lack a parent, found {roots}")
        for j, p in enumerate(self.parent):
            if p is not None and not 0 <= p < J:
                raise SkeletonError(f"joint {j} has invalid parent {p}")
        if len(self.part_assignment) != J - 1:
            raise SkeletonError(f"{len(self.part_assignment)} part labels for {J - 1} bones")
        bad = sorted(set(self.part_assignment) - set(PARTS))
        if bad:
            raise SkeletonError(f"unknown part labels {bad}")

        # topological order of bones; also proves the parent links form a tree
        children = {j: [] for j in range(J)}
        for j, p in enumerate(self.parent):
            if p is not None:
                children[p].append(j)
        bone_of = {c: k for k, c in enumerate(self.bone_child)}
        order, stack = [], [self.root_index]
        while stack:
            j = stack.pop()
            for c in children[j]:
                order.append(bone_of[c])
                stack.append(c)
        if len(order) != J - 1:
            raise SkeletonError("parent links do not form a tree rooted at root_index")
        object.__setattr__(self, "_topo", tuple(order))

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    @property
    def bone_count(self) -> int:
        return len(self.parent) - 1

    @cached_property
    def bone_child(self) -> np.ndarray:
        return np.array([j for j in range(self.joint_count) if j != self.root_index])

    @cached_property
    def bone_parent(self) -> np.ndarray:
        return np.array([self.parent[c] for c in self.bone_child])

    @property
    def topo_order(self) -> tuple:
        return self._topo

    @cached_property
    def part_bones(self) -> dict:
        """Bone indices per part, in the fixed ``PARTS`` order."""
        return {p: np.array([k for k, lab in enumerate(self.part_assignment) if lab == p], dtype=int)
                for p in PARTS}

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "parent": list(self.parent),
            "root_index": self.root_index,
            "part_assignment": list(self.part_assignment),
        }


def load_skeleton(path) -> SkeletonDef:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(lines) != 1:
        raise SkeletonError(f"skeleton file must hold exactly one JSON line, found {len(lines)}")
    try:
        rec = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise SkeletonError(f"invalid JSON in skeleton file: {e}") from e
    missing = {"names", "parent", "root_index", "part_assignment"} - set(rec)
    if missing:
        raise SkeletonError(f"skeleton file missing fields {sorted(missing)}")
    return SkeletonDef(rec["names"], rec["parent"], int(rec["root_index"]), rec["part_assignment"])


def default_skeleton() -> SkeletonDef:
    """16-joint skeleton with pelvis root (Human3.6M joint family)."""
    with resources.as_file(resources.files("liftadapt") / "resources" / "h36m16.jsonl") as p:
        return load_skeleton(p)


class BoneRepr(NamedTuple):
    directions: np.ndarray  # (..., K, 3) unit vectors
    lengths: np.ndarray  # (..., K) mm

    @property
    def vectors(self) -> np.ndarray:
        return self.directions * self.lengths[..., None]


def bone_vectors(pose, skel: SkeletonDef) -> np.ndarray:
    pose = np.asarray(pose, dtype=float)
    return pose[..., skel.bone_child, :] - pose[..., skel.bone_parent, :]


def to_bones(pose, skel: SkeletonDef) -> BoneRepr:
    b = bone_vectors(pose, skel)
    lengths = np.linalg.norm(b, axis=-1)
    if np.any(lengths < ZERO_BONE_MM):
        raise ZeroBone("a child joint coincides with its parent")
    return BoneRepr(b / lengths[..., None], lengths)


def from_bones(bones: BoneRepr, skel: SkeletonDef) -> np.ndarray:
    """Forward kinematics: root at the origin, children placed in topological order."""
    return _chain(bones.vectors, skel)


def _chain(vectors, skel: SkeletonDef) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=float)
    pose = np.zeros(vectors.shape[:-2] + (skel.joint_count, 3))
    for k in skel.topo_order:
        pose[..., skel.bone_child[k], :] = pose[..., skel.bone_parent[k], :] + vectors[..., k, :]
    return pose


def chain_backward(g_pose, skel: SkeletonDef) -> np.ndarray:
    """Gradient of a loss w.r.t. bone vectors, given its gradient w.r.t. ``_chain`` output."""
    acc = np.array(g_pose, dtype=float, copy=True)
    g_vec = np.zeros(acc.shape[:-2] + (skel.bone_count, 3))
    for k in reversed(skel.topo_order):
        c, p = skel.bone_child[k], skel.bone_parent[k]
        g_vec[..., k, :] = acc[..., c, :]
        acc[..., p, :] += acc[..., c, :]
    return g_vec


def apply_bone_angle(bones: BoneRepr, deltas) -> BoneRepr:
    u = bones.directions + np.asarray(deltas, dtype=float)
    n = np.linalg.norm(u, axis=-1)
    if np.any(n < 1e-9):
        raise DegenerateDirection("perturbation cancels a bone direction")
    return BoneRepr(u / n[..., None], bones.lengths)


def apply_bone_length(bones: BoneRepr, ratios) -> BoneRepr:
    ratios = np.asarray(ratios, dtype=float)
    if np.any(ratios <= 0):
        raise NonPositiveRatio("bone length ratios must be positive")
    return BoneRepr(bones.directions, bones.lengths * ratios)


def _skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    z = np.zeros(v.shape[:-1])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], axis=-1),
        np.stack([v[..., 2], z, -v[..., 0]], axis=-1),
        np.stack([-v[..., 1], v[..., 0], z], axis=-1),
    ], axis=-2)


_SMALL_ANGLE = 1e-3


def _rodrigues_coeffs(theta):
    """``a = sin t / t``, ``b = (1 - cos t) / t^2`` and ``a'/t``, ``b'/t``."""
    theta = np.asarray(theta, dtype=float)
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    s, c = np.sin(t), np.cos(t)
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, s / t)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - c) / t ** 2)
    da = np.where(small, -1 / 3 + t2 / 30, (t * c - s) / t ** 3)
    db = np.where(small, -1 / 12 + t2 / 180, (t * s - 2 * (1 - c)) / t ** 4)
    return a, b, da, db


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrices ``(..., 3, 3)`` from axis-angle vectors ``(..., 3)``."""
    v = np.asarray(axis_angle, dtype=float)
    a, b, _, _ = _rodrigues_coeffs(np.linalg.norm(v, axis=-1))
    K = _skew(v)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rodrigues_backward(axis_angle, g_rot) -> np.ndarray:
    """Gradient w.r.t. the axis-angle vector given the gradient w.r.t. ``rodrigues``."""
    v = np.asarray(axis_angle, dtype=float)
    a, b, da, db = _rodrigues_coeffs(np.linalg.norm(v, axis=-1))
    K = _skew(v)
    K2 = K @ K
    g = np.empty(v.shape)
    for i in range(3):
        E = _skew(np.eye(3)[i])
        dR = (a[..., None, None] * E
              + b[..., None, None] * (E @ K + K @ E)
              + (v[..., i] * da)[..., None, None] * K
              + (v[..., i] * db)[..., None, None] * K2)
        g[..., i] = np.sum(g_rot * dR, axis=(-2, -1))
    return g


def apply_rotation(pose, axis_angle) -> np.ndarray:
    pose = np.asarray(pose, dtype=float)
    R = rodrigues(axis_angle)
    return pose @ np.swapaxes(R, -1, -2)


def kcs(pose, skel: SkeletonDef) -> np.ndarray:
    """Gram matrix of the un-normalised bone vectors, ``(..., K, K)`` in mm^2."""
    b = bone_vectors(pose, skel)
    return b @ np.swapaxes(b, -1, -2)


def random_rotation_vertical(pose, rng: np.random.Generator) -> np.ndarray:
    pose = np.asarray(pose, dtype=float)
    angle = rng.uniform(0.0, 2 * np.pi, size=pose.shape[:-2])
    return apply_rotation(pose, angle[..., None] * VERTICAL_AXIS)


def random_bone_length(pose, skel: SkeletonDef, rng: np.random.Generator,
                       lo: float = 0.8, hi: float = 1.2) -> np.ndarray:
    if not 0 < lo <= hi:
        raise BadRange(f"need 0 < lo <= hi, got lo={lo}, hi={hi}")
    bones = to_bones(pose, skel)
    ratios = rng.uniform(lo, hi, size=bones.lengths.shape)
    return from_bones(apply_bone_length(bones, ratios), skel)
