"""Adversarial local pose augmentation.

The generator maps a source pose (as bone directions and log-lengths) plus a
noise vector to bounded bone-angle, bone-length and rotation parameters
through three chained residual MLP heads. The anchor critic scores a pose
from the intra-part blocks of its KCS matrix. Both are trained with WGAN
losses; gradients flow from the critic through the augmentation back into
the generator heads.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import skeleton as sk
from .errors import DimMismatch, EmptyBatch
from .nn import Mlp, NetworkSpec, ParamStore

# KCS entries are divided by this before entering the critic (mm^2)
KCS_SCALE = 1e4


@dataclass(frozen=True)
class AugBounds:
    ba_max: float = 0.3
    bl_max: float = 0.3
    rot_max: float = np.pi


class AugParams(NamedTuple):
    ba_deltas: np.ndarray  # (..., K, 3)
    bl_ratios: np.ndarray  # (..., K)
    rot_axis_angle: np.ndarray  # (..., 3)


def identity_params(skel: sk.SkeletonDef, batch_shape=()) -> AugParams:
    K = skel.bone_count
    return AugParams(np.zeros(batch_shape + (K, 3)), np.ones(batch_shape + (K,)),
                     np.zeros(batch_shape + (3,)))


def radial_squash(r, scale):
    """``scale * tanh(|r|) * r / |r|``: bounds the vector norm below ``scale``."""
    n = np.linalg.norm(r, axis=-1, keepdims=True)
    small = n < 1e-3
    safe = np.where(small, 1.0, n)
    n2 = n * n
    ratio = np.where(small, 1 - n2 / 3 + 2 * n2 * n2 / 15, np.tanh(safe) / safe)
    return scale * ratio * r


def radial_squash_backward(r, scale, g_y):
    n = np.linalg.norm(r, axis=-1, keepdims=True)
    small = n < 1e-3
    safe = np.where(small, 1.0, n)
    n2 = n * n
    th = np.tanh(safe)
    ratio = np.where(small, 1 - n2 / 3 + 2 * n2 * n2 / 15, th / safe)
    # d(ratio)/dn divided by n
    dratio = np.where(small, -2 / 3 + 8 * n2 / 15, (safe * (1 - th * th) - th) / safe ** 3)
    return scale * (ratio * g_y + dratio * np.sum(r * g_y, axis=-1, keepdims=True) * r)


def apply_augmentation(source, p: AugParams, skel: sk.SkeletonDef) -> np.ndarray:
    """Bone angle, then bone length, then global rotation; output stays root-relative."""
    bones = sk.apply_bone_angle(sk.to_bones(source, skel), p.ba_deltas)
    pose = sk.from_bones(sk.apply_bone_length(bones, p.bl_ratios), skel)
    return sk.apply_rotation(pose, p.rot_axis_angle)


class GenTape(NamedTuple):
    noise: np.ndarray
    dirs: np.ndarray
    lengths: np.ndarray
    r_ba: np.ndarray
    u: np.ndarray
    u_norm: np.ndarray
    dirs2: np.ndarray
    r_bl: np.ndarray
    tanh_bl: np.ndarray
    lengths2: np.ndarray
    r_rot: np.ndarray
    axis_angle: np.ndarray
    rot: np.ndarray
    pose: np.ndarray
    tapes: tuple


class Generator:
    """Three chained heads: bone angle, bone length, rotation.

    Each head sees the bone representation produced by the previous stage
    (directions and log-lengths) concatenated with the shared noise vector.
    """

    HEADS = ("ba", "bl", "rot")

    def __init__(self, skel: sk.SkeletonDef, rng: np.random.Generator, hidden_dim: int = 256,
                 noise_dim: int = 32, bounds: AugBounds = AugBounds(), slope: float = 0.2,
                 head_weights=(1.0, 1.0, 1.0)):
        self.skel = skel
        self.noise_dim = noise_dim
        self.bounds = bounds
        self.head_weights = tuple(float(w) for w in head_weights)
        K = skel.bone_count
        cond = 4 * K + noise_dim
        self.specs = {
            "ba": NetworkSpec(cond, 3 * K, hidden_dim, 1, 1, slope),
            "bl": NetworkSpec(cond, K, hidden_dim, 1, 1, slope),
            "rot": NetworkSpec(cond, 3, hidden_dim, 1, 1, slope),
        }
        shapes = []
        for h in self.HEADS:
            shapes += self.specs[h].param_shapes(f"{h}.")
        self.store = ParamStore(shapes)
        self.heads = {h: Mlp(self.specs[h], self.store, f"{h}.") for h in self.HEADS}
        for h in self.HEADS:
            self.heads[h].init(rng, zero_head=True)

    def _condition(self, dirs, lengths, noise):
        B = dirs.shape[0]
        return np.concatenate([dirs.reshape(B, -1), np.log(lengths), noise], axis=1)

    def forward(self, source, noise) -> tuple[np.ndarray, AugParams, GenTape]:
        source = np.asarray(source, dtype=float)
        noise = np.asarray(noise, dtype=float)
        if source.ndim != 3:
            raise DimMismatch("generator expects a batch of poses (B, J, 3)")
        B, K = source.shape[0], self.skel.bone_count
        if noise.shape != (B, self.noise_dim):
            raise DimMismatch(f"noise must have shape ({B}, {self.noise_dim}), got {noise.shape}")
        b = self.bounds
        bones = sk.to_bones(source, self.skel)
        dirs, lengths = bones.directions, bones.lengths

        r_ba, t_ba = self.heads["ba"].forward(self._condition(dirs, lengths, noise))
        r_ba = r_ba.reshape(B, K, 3)
        delta = radial_squash(r_ba, b.ba_max)
        u = dirs + delta
        u_norm = np.linalg.norm(u, axis=-1, keepdims=True)
        dirs2 = u / u_norm

        r_bl, t_bl = self.heads["bl"].forward(self._condition(dirs2, lengths, noise))
        tanh_bl = np.tanh(r_bl)
        ratios = 1.0 + b.bl_max * tanh_bl
        lengths2 = lengths * ratios

        r_rot, t_rot = self.heads["rot"].forward(self._condition(dirs2, lengths2, noise))
        aa = radial_squash(r_rot, b.rot_max)
        rot = sk.rodrigues(aa)

        pose = sk._chain(dirs2 * lengths2[..., None], self.skel)
        out = pose @ np.swapaxes(rot, -1, -2)
        params = AugParams(delta, ratios, aa)
        tape = GenTape(noise, dirs, lengths, r_ba, u, u_norm, dirs2, r_bl, tanh_bl, lengths2,
                       r_rot, aa, rot, pose, (t_ba, t_bl, t_rot))
        return out, params, tape

    def __call__(self, source, noise) -> np.ndarray:
        return self.forward(source, noise)[0]

    def backward(self, tape: GenTape, g_out):
        """Accumulate generator gradients from ``dL/d(augmented pose)``.

        Head weights scale each head's own parameter gradients; the gradient
        passed on to earlier heads is unweighted.
        """
        g_out = np.asarray(g_out, dtype=float)
        B, K = g_out.shape[0], self.skel.bone_count
        b = self.bounds
        t_ba, t_bl, t_rot = tape.tapes
        before = self.store.grads.copy()

        # out = pose R^T
        g_pose = g_out @ tape.rot
        g_rot = np.swapaxes(g_out, -1, -2) @ tape.pose
        g_aa = sk.rodrigues_backward(tape.axis_angle, g_rot)
        g_r_rot = radial_squash_backward(tape.r_rot, b.rot_max, g_aa)
        g_x3 = self.heads["rot"].backward(t_rot, g_r_rot)

        g_vec = sk.chain_backward(g_pose, self.skel)
        g_dirs2 = g_vec * tape.lengths2[..., None] + g_x3[:, :3 * K].reshape(B, K, 3)
        g_len2 = np.sum(g_vec * tape.dirs2, axis=-1) + g_x3[:, 3 * K:4 * K] / tape.lengths2

        g_r_bl = g_len2 * tape.lengths * b.bl_max * (1.0 - tape.tanh_bl ** 2)
        g_x2 = self.heads["bl"].backward(t_bl, g_r_bl)
        g_dirs2 = g_dirs2 + g_x2[:, :3 * K].reshape(B, K, 3)

        d2 = tape.dirs2
        g_u = (g_dirs2 - d2 * np.sum(d2 * g_dirs2, axis=-1, keepdims=True)) / tape.u_norm
        g_r_ba = radial_squash_backward(tape.r_ba, b.ba_max, g_u)
        self.heads["ba"].backward(t_ba, g_r_ba.reshape(B, 3 * K))

        if self.head_weights != (1.0, 1.0, 1.0):
            for head, w in zip(self.HEADS, self.head_weights):
                sl = self._slice(head)
                self.store.grads[sl] = before[sl] + w * (self.store.grads[sl] - before[sl])

    def _slice(self, head: str) -> slice:
        offs = [(off, int(np.prod(shape))) for name, (off, shape) in self.store.layout.items()
                if name.startswith(head + ".")]
        return slice(min(o for o, _ in offs), max(o + n for o, n in offs))


def generate_aug_params(gen: Generator, source, noise, skel: sk.SkeletonDef = None) -> AugParams:
    source = np.asarray(source, dtype=float)
    noise = np.asarray(noise, dtype=float)
    single = source.ndim == 2
    if single:
        source, noise = source[None], noise[None]
    _, params, _ = gen.forward(source, noise)
    if single:
        params = AugParams(*(a[0] for a in params))
    return params


class CriticTape(NamedTuple):
    bones: np.ndarray
    part_tapes: tuple
    fusion_tape: object


class AnchorDiscriminator:
    """WGAN critic on per-part KCS blocks fused by a linear head."""

    def __init__(self, skel: sk.SkeletonDef, rng: np.random.Generator, hidden_dim: int = 256,
                 part_features: int = 8, slope: float = 0.2, kcs_scale: float = KCS_SCALE):
        self.skel = skel
        self.kcs_scale = kcs_scale
        self.parts = [(name, idx) for name, idx in skel.part_bones.items() if idx.size]
        self.specs = {}
        shapes = []
        for name, idx in self.parts:
            spec = NetworkSpec(idx.size ** 2, part_features, hidden_dim, 1, 2, slope)
            self.specs[name] = spec
            shapes += spec.param_shapes(f"{name}.")
        self.fusion_spec = NetworkSpec(part_features * len(self.parts), 1, block_count=0)
        shapes += self.fusion_spec.param_shapes("fusion.")
        self.store = ParamStore(shapes)
        self.nets = {name: Mlp(self.specs[name], self.store, f"{name}.") for name, _ in self.parts}
        self.fusion = Mlp(self.fusion_spec, self.store, "fusion.")
        for net in self.nets.values():
            net.init(rng)
        self.fusion.init(rng)

    def forward(self, poses) -> tuple[np.ndarray, CriticTape]:
        poses = np.asarray(poses, dtype=float)
        if poses.ndim != 3 or poses.shape[1:] != (self.skel.joint_count, 3):
            raise DimMismatch(f"critic expects (B, {self.skel.joint_count}, 3), got {poses.shape}")
        B = poses.shape[0]
        bones = sk.bone_vectors(poses, self.skel)
        feats, tapes = [], []
        for name, idx in self.parts:
            bp = bones[:, idx, :]
            block = (bp @ np.swapaxes(bp, -1, -2)) / self.kcs_scale
            f, t = self.nets[name].forward(block.reshape(B, -1))
            feats.append(f)
            tapes.append(t)
        val, ft = self.fusion.forward(np.concatenate(feats, axis=1))
        return val[:, 0], CriticTape(bones, tuple(tapes), ft)

    def __call__(self, poses) -> np.ndarray:
        return self.forward(poses)[0]

    def backward(self, tape: CriticTape, g_values, accumulate: bool = True) -> np.ndarray:
        """Return ``dL/d(poses)``; parameter gradients only when ``accumulate``."""
        g_values = np.asarray(g_values, dtype=float)
        B = g_values.shape[0]
        g_feat = self.fusion.backward(tape.fusion_tape, g_values[:, None], accumulate)
        nf = self.fusion_spec.input_dim // len(self.parts)
        g_bones = np.zeros_like(tape.bones)
        for i, ((name, idx), t) in enumerate(zip(self.parts, tape.part_tapes)):
            m = idx.size
            g_block = self.nets[name].backward(t, g_feat[:, i * nf:(i + 1) * nf], accumulate)
            g_block = g_block.reshape(B, m, m) / self.kcs_scale
            bp = tape.bones[:, idx, :]
            g_bones[:, idx, :] += (g_block + np.swapaxes(g_block, -1, -2)) @ bp
        J = self.skel.joint_count
        g_pose = np.zeros((B, J, 3))
        np.add.at(g_pose, (slice(None), self.skel.bone_child), g_bones)
        np.add.at(g_pose, (slice(None), self.skel.bone_parent), -g_bones)
        return g_pose


def discriminate(d: AnchorDiscriminator, pose, skel: sk.SkeletonDef = None):
    pose = np.asarray(pose, dtype=float)
    if pose.ndim == 2:
        return float(d(pose[None])[0])
    return d(pose)


def d_loss(d, real_batch, fake_batch) -> float:
    """``mean critic(fake) - mean critic(real)``; accumulates critic gradients."""
    real_batch = np.asarray(real_batch, dtype=float)
    fake_batch = np.asarray(fake_batch, dtype=float)
    if len(real_batch) == 0 or len(fake_batch) == 0:
        raise EmptyBatch("critic loss needs nonempty real and fake batches")
    v_real, t_real = d.forward(real_batch)
    v_fake, t_fake = d.forward(fake_batch)
    d.backward(t_fake, np.full(len(fake_batch), 1.0 / len(fake_batch)))
    d.backward(t_real, np.full(len(real_batch), -1.0 / len(real_batch)))
    return float(v_fake.mean() - v_real.mean())


def g_loss(d, fake_batch) -> tuple[float, np.ndarray]:
    """``-mean critic(fake)`` and its gradient w.r.t. the fake poses.

    The critic is treated as frozen: no critic parameter gradients accumulate.
    """
    fake_batch = np.asarray(fake_batch, dtype=float)
    if len(fake_batch) == 0:
        raise EmptyBatch("generator loss needs a nonempty batch")
    v, t = d.forward(fake_batch)
    g = d.backward(t, np.full(len(fake_batch), -1.0 / len(fake_batch)), accumulate=False)
    return float(-v.mean()), g
