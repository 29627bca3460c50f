"""Pretraining and the adversarial adaptation loop.

Each adaptation iteration samples a source batch, augments it with the
frozen generator, updates either the critic (weight-clipped WGAN) or, every
``generator_interval``-th iteration, the generator. After the warmup epochs
the augmented poses are placed in the paired target camera by global
position alignment, projected, and mixed with original source pairs to
fine-tune the lifting network.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from . import skeleton as sk
from .augment import AnchorDiscriminator, AugBounds, Generator, d_loss, g_loss
from .data import Dataset, PoseRecord, pairing_sampler
from .errors import BadConfig, LabelLeak, MissingLabels, NanDetected
from .geometry import CameraIntrinsics, gpa_solve, normalize_screen, project_pose
from .metrics import mpjpe
from .nn import (Mlp, NetworkSpec, ParamStore, RmsProp, clip_weights, load_checkpoint,
                 mse_loss, save_checkpoint)
from .seeding import stream

log = logging.getLogger(__name__)

MODES = ("full", "gpa-only", "lpa-only", "none")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    iters_per_epoch: int = 200
    warmup_epochs: int = 5
    generator_interval: int = 6
    batch_size: int = 64
    mix_ratio: float = 1.0  # augmented : original
    lr_lifter: float = 1e-4
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-4
    lr_pretrain: float = 1e-3
    pretrain_iters: Optional[int] = None  # None: one pass over the source per epoch
    clip: float = 0.01
    seed: int = 0
    ba_max: float = 0.3
    bl_max: float = 0.3
    rot_max: float = math.pi
    hidden_dim: int = 256
    noise_dim: int = 32
    head_weights: tuple = (1.0, 1.0, 1.0)
    mode: str = "full"
    lifter_update: str = "iteration"  # or "epoch"
    pairing: str = "permutation"  # or "replacement"
    canonical_depth: float = 5000.0  # root depth (mm) used when GPA is disabled

    def __post_init__(self):
        if self.epochs < 0 or self.iters_per_epoch <= 0:
            raise BadConfig("epochs must be >= 0 and iters_per_epoch > 0")
        if self.warmup_epochs < 0:
            raise BadConfig("warmup_epochs must be >= 0")
        if self.generator_interval < 2:
            raise BadConfig("generator_interval must be >= 2")
        if self.batch_size < 2:
            raise BadConfig("batch_size must be >= 2")
        if not self.mix_ratio > 0:
            raise BadConfig("mix_ratio must be positive")
        if min(self.lr_lifter, self.lr_generator, self.lr_discriminator, self.lr_pretrain) <= 0:
            raise BadConfig("learning rates must be positive")
        if not self.clip > 0:
            raise BadConfig("clip must be positive")
        if self.mode not in MODES:
            raise BadConfig(f"mode must be one of {MODES}")
        if self.lifter_update not in ("iteration", "epoch"):
            raise BadConfig("lifter_update must be 'iteration' or 'epoch'")
        if self.pairing not in ("permutation", "replacement"):
            raise BadConfig("pairing must be 'permutation' or 'replacement'")
        if not (0 < self.ba_max and 0 < self.bl_max < 1 and 0 < self.rot_max <= math.pi):
            raise BadConfig("bounds need ba_max > 0, 0 < bl_max < 1, 0 < rot_max <= pi")
        if len(self.head_weights) != 3:
            raise BadConfig("head_weights needs three entries")
        if self.pretrain_iters is not None and self.pretrain_iters <= 0:
            raise BadConfig("pretrain_iters must be positive")
        if self.canonical_depth <= 0:
            raise BadConfig("canonical_depth must be positive")

    @property
    def use_gpa(self) -> bool:
        return self.mode in ("full", "gpa-only")

    @property
    def use_lpa(self) -> bool:
        return self.mode in ("full", "lpa-only")

    def aug_count(self) -> int:
        """Augmented samples per lifting batch; the rest are original pairs."""
        r = self.mix_ratio
        return min(self.batch_size, math.ceil(self.batch_size * r / (1.0 + r) - 1e-12))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_weights"] = list(self.head_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise BadConfig(f"unknown TrainConfig fields {sorted(unknown)}")
        d = dict(d)
        if "head_weights" in d:
            d["head_weights"] = tuple(float(w) for w in d["head_weights"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class Lifter:
    """2D-to-3D lifting network: normalised screen joints in, root-relative mm out.

    The network regresses metres; ``output_scale`` converts to millimetres.
    """

    def __init__(self, skel: sk.SkeletonDef, rng: Optional[np.random.Generator] = None,
                 hidden_dim: int = 256, block_count: int = 2, slope: float = 0.2,
                 output_scale: float = 1000.0):
        self.skel = skel
        J = skel.joint_count
        self.spec = NetworkSpec(2 * J, 3 * J, hidden_dim, block_count, 2, slope)
        self.output_scale = float(output_scale)
        self.store = ParamStore(self.spec.param_shapes())
        self.net = Mlp(self.spec, self.store)
        if rng is not None:
            self.net.init(rng)
        self.seed: Optional[int] = None
        self.steps = 0
        self.pretrain_epochs = 0

    def forward(self, pose2d_norm):
        x = np.asarray(pose2d_norm, dtype=float)
        B = x.shape[0]
        out, tape = self.net.forward(x.reshape(B, -1))
        return out.reshape(B, -1, 3) * self.output_scale, tape

    def predict(self, pose2d_norm) -> np.ndarray:
        return self.forward(pose2d_norm)[0]

    def backward(self, tape, g_pred):
        g = np.asarray(g_pred, dtype=float)
        self.net.backward(tape, g.reshape(g.shape[0], -1) * self.output_scale)

    def copy(self) -> "Lifter":
        new = Lifter(self.skel, None, self.spec.hidden_dim, self.spec.block_count,
                     self.spec.slope, self.output_scale)
        new.store.values[:] = self.store.values
        new.seed, new.steps, new.pretrain_epochs = self.seed, self.steps, self.pretrain_epochs
        return new

    def manifest(self) -> dict:
        return {"kind": "lifter", "spec": self.spec.to_dict(), "output_scale": self.output_scale,
                "skeleton": self.skel.to_dict(), "seed": self.seed, "steps": self.steps,
                "pretrain_epochs": self.pretrain_epochs}

    def save(self, path):
        save_checkpoint(path, self.store.named_arrays("lifter."), self.manifest())

    @classmethod
    def load(cls, path) -> "Lifter":
        arrays, man = load_checkpoint(path)
        if man.get("kind") != "lifter":
            raise BadConfig(f"{path} is not a lifter checkpoint")
        s = man["spec"]
        skel = sk.SkeletonDef(**man["skeleton"])
        lifter = cls(skel, None, s["hidden_dim"], s["block_count"], s["slope"], man["output_scale"])
        lifter.store.load_arrays(arrays, "lifter.")
        lifter.seed, lifter.steps = man["seed"], man["steps"]
        lifter.pretrain_epochs = man["pretrain_epochs"]
        return lifter


def save_optimizer(path, opt: RmsProp):
    save_checkpoint(path, {"opt.second_moment": opt.second_moment},
                    {"kind": "rmsprop", "lr": opt.lr, "rho": opt.rho, "eps": opt.eps})


def load_optimizer(path) -> RmsProp:
    arrays, man = load_checkpoint(path)
    opt = RmsProp(arrays["opt.second_moment"].size, man["lr"], man["rho"], man["eps"])
    opt.second_moment[:] = arrays["opt.second_moment"]
    return opt


def _dump_and_raise(dump_dir, message, state):
    path = None
    if dump_dir is not None:
        path = Path(dump_dir) / "nan_dump.json"
        path.write_text(json.dumps(state, indent=2, sort_keys=True, default=str) + "\n")
    raise NanDetected(message, path)


def _finite_or_dump(loss, dump_dir, state):
    if not math.isfinite(loss):
        _dump_and_raise(dump_dir, f"non-finite loss in {state.get('stage')}", state)


def _batch_indices(seed: int, epoch: int, iteration: int, n: int, batch: int) -> np.ndarray:
    order = stream(seed, "batches", epoch).permutation(n)
    return order[(iteration * batch + np.arange(batch)) % n]


def lifter_step(lifter: Lifter, opt: RmsProp, x2d, y3d) -> float:
    pred, tape = lifter.forward(x2d)
    loss, g = mse_loss(pred, y3d)
    if math.isfinite(loss):
        lifter.backward(tape, g)
        opt.step(lifter.store)
        lifter.steps += 1
    return loss


def source_arrays(source: Dataset):
    if not (source.has_3d and source.has_2d):
        raise MissingLabels("source dataset needs joints_2d and joints_3d on every record")
    return normalize_screen(source.joints_2d(), source.cameras()), source.joints_3d()


def pretrain(lifter: Lifter, source: Dataset, cfg: TrainConfig, start_epoch: int = 0,
             optimizer: Optional[RmsProp] = None, on_step=None):
    """Supervised MSE training on source pairs for epochs ``start_epoch .. cfg.epochs - 1``.

    Returns ``(lifter, optimizer, losses)`` with one ``(epoch, iteration, loss)`` per step.
    """
    x_all, y_all = source_arrays(source)
    n = len(source)
    iters = cfg.pretrain_iters or math.ceil(n / cfg.batch_size)
    opt = optimizer or RmsProp(len(lifter.store), cfg.lr_pretrain)
    losses = []
    for epoch in range(start_epoch, cfg.epochs):
        for it in range(iters):
            idx = _batch_indices(cfg.seed, epoch, it, n, cfg.batch_size)
            loss = lifter_step(lifter, opt, x_all[idx], y_all[idx])
            _finite_or_dump(loss, None, {"stage": "pretrain", "epoch": epoch, "iteration": it})
            losses.append((epoch, it, loss))
            if on_step is not None:
                on_step(epoch, it, loss)
        lifter.pretrain_epochs = epoch + 1
        lifter.seed = cfg.seed
    return lifter, opt, losses


class TrainingPair(NamedTuple):
    pose2d: np.ndarray  # normalised screen coordinates
    pose3d: np.ndarray  # root-relative mm
    pose2d_px: np.ndarray
    root: np.ndarray


def place_and_project(pose3d, target2d, target_cam: CameraIntrinsics, skel: sk.SkeletonDef,
                      use_gpa: bool = True, canonical_depth: float = 5000.0) -> TrainingPair:
    """Give root-relative poses a global root and project them into the target camera."""
    pose3d = np.asarray(pose3d, dtype=float)
    if use_gpa:
        root = gpa_solve(target2d, pose3d, target_cam, skel.root_index)
    else:
        root = np.zeros(pose3d.shape[:-2] + (3,))
        root[..., 2] = canonical_depth
    px = project_pose(pose3d, root, target_cam)
    return TrainingPair(normalize_screen(px, target_cam), pose3d, px, root)


def build_training_pair(source_rec: PoseRecord, target_rec: PoseRecord, skel: sk.SkeletonDef,
                        gen: Optional[Generator] = None,
                        rng: Optional[np.random.Generator] = None,
                        use_gpa: bool = True, canonical_depth: float = 5000.0) -> TrainingPair:
    """Augment one source pose, align it to one target 2D pose and project it."""
    if target_rec.joints_2d is None:
        raise MissingLabels(f"target record {target_rec.id} has no joints_2d")
    if source_rec.joints_3d is None:
        raise MissingLabels(f"source record {source_rec.id} has no joints_3d")
    pose = np.asarray(source_rec.joints_3d, dtype=float)
    if gen is not None:
        rng = rng if rng is not None else np.random.default_rng()
        pose = gen(pose[None], rng.standard_normal((1, gen.noise_dim)))[0]
    return place_and_project(pose, target_rec.joints_2d, target_rec.camera, skel,
                             use_gpa, canonical_depth)


@dataclass
class AdaptReport:
    seed: int
    config_hash: str
    mode: str
    epochs: list = field(default_factory=list)
    wall_clock: float = 0.0

    def to_jsonl(self) -> str:
        head = {"seed": self.seed, "config_hash": self.config_hash, "mode": self.mode}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(e, sort_keys=True) for e in self.epochs]
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_jsonl())


class AdaptResult(NamedTuple):
    lifter: Lifter
    report: AdaptReport
    generator: Generator
    discriminator: AnchorDiscriminator


def _mean_or_none(xs):
    return float(np.mean(xs)) if xs else None


def evaluate_lifter(lifter: Lifter, target: Dataset, gt: Dataset) -> float:
    pred = lifter.predict(normalize_screen(target.joints_2d(), target.cameras()))
    return float(np.mean(mpjpe(pred, gt.joints_3d())))


def build_networks(skel: sk.SkeletonDef, cfg: TrainConfig):
    bounds = AugBounds(cfg.ba_max, cfg.bl_max, cfg.rot_max)
    gen = Generator(skel, stream(cfg.seed, "init-generator"), cfg.hidden_dim, cfg.noise_dim,
                    bounds, head_weights=cfg.head_weights)
    disc = AnchorDiscriminator(skel, stream(cfg.seed, "init-discriminator"), cfg.hidden_dim)
    clip_weights(disc.store, cfg.clip)
    return gen, disc


def adapt(lifter: Lifter, source: Dataset, target: Dataset, cfg: TrainConfig,
          eval_gt: Optional[Dataset] = None, dump_dir=None,
          gen: Optional[Generator] = None, disc: Optional[AnchorDiscriminator] = None,
          on_critic_step=None) -> AdaptResult:
    """Run the adaptation loop; the lifter is updated in place and returned."""
    t0 = time.perf_counter()
    skel = source.skeleton
    s2n, s3 = source_arrays(source)
    if target.any_3d:
        raise LabelLeak("target dataset must not carry joints_3d during adaptation")
    if not target.has_2d:
        raise MissingLabels("target dataset needs joints_2d on every record")
    t2 = target.joints_2d()
    t_cams = target.cameras()
    n_src = len(source)
    B = cfg.batch_size
    n_aug = cfg.aug_count()
    if cfg.epochs and cfg.warmup_epochs >= cfg.epochs:
        log.warning("warmup_epochs (%d) >= epochs (%d): the lifter will not be updated",
                    cfg.warmup_epochs, cfg.epochs)

    if gen is None or disc is None:
        g0, d0 = build_networks(skel, cfg)
        gen, disc = gen or g0, disc or d0
    opt_g = RmsProp(len(gen.store), cfg.lr_generator)
    opt_d = RmsProp(len(disc.store), cfg.lr_discriminator)
    opt_p = RmsProp(len(lifter.store), cfg.lr_lifter)
    report = AdaptReport(cfg.seed, cfg.digest(), cfg.mode)
    steps_before = lifter.steps

    def cam_at(idx):
        return CameraIntrinsics(*(np.asarray(getattr(t_cams, f))[idx]
                                  for f in ("fx", "fy", "cx", "cy", "width", "height")))

    def lifting_batch(idx, aug3d, plan):
        tar = plan.targets[idx[:n_aug]]
        if cfg.mode == "none":
            x_aug = s2n[idx[:n_aug]]
        else:
            x_aug = place_and_project(aug3d[:n_aug], t2[tar], cam_at(tar), skel, cfg.use_gpa,
                                      cfg.canonical_depth).pose2d
        x = np.concatenate([x_aug, s2n[idx[n_aug:]]])
        y = np.concatenate([aug3d[:n_aug], s3[idx[n_aug:]]])
        return x, y

    for epoch in range(cfg.epochs):
        plan = pairing_sampler(source, target, epoch, cfg.seed, cfg.pairing == "replacement")
        train_lifter = epoch >= cfg.warmup_epochs
        d_losses, g_losses, p_losses = [], [], []
        last = None
        for it in range(cfg.iters_per_epoch):
            idx = _batch_indices(cfg.seed, epoch, it, n_src, B)
            src3d = s3[idx]
            state = {"epoch": epoch, "iteration": it}
            if cfg.use_lpa:
                noise = stream(cfg.seed, "noise", epoch, it).standard_normal((B, cfg.noise_dim))
                aug3d = gen(src3d, noise)
                if it % cfg.generator_interval == cfg.generator_interval - 1:
                    noise_g = stream(cfg.seed, "noise-g", epoch, it).standard_normal((B, cfg.noise_dim))
                    fake, _, tape = gen.forward(src3d, noise_g)
                    lg, g_fake = g_loss(disc, fake)
                    _finite_or_dump(lg, dump_dir, {**state, "stage": "generator", "loss": lg})
                    gen.backward(tape, g_fake)
                    opt_g.step(gen.store)
                    g_losses.append(lg)
                else:
                    real = s3[stream(cfg.seed, "real", epoch, it).integers(0, n_src, B)]
                    ld = d_loss(disc, real, aug3d)
                    _finite_or_dump(ld, dump_dir, {**state, "stage": "discriminator", "loss": ld})
                    opt_d.step(disc.store)
                    clip_weights(disc.store, cfg.clip)
                    d_losses.append(ld)
                    if on_critic_step is not None:
                        on_critic_step(disc)
            else:
                aug3d = src3d
            if train_lifter:
                if cfg.lifter_update == "iteration":
                    lp = lifter_step(lifter, opt_p, *lifting_batch(idx, aug3d, plan))
                    _finite_or_dump(lp, dump_dir, {**state, "stage": "lifter", "loss": lp})
                    p_losses.append(lp)
                else:
                    last = (idx, aug3d)
        if train_lifter and last is not None:
            lp = lifter_step(lifter, opt_p, *lifting_batch(last[0], last[1], plan))
            _finite_or_dump(lp, dump_dir, {"epoch": epoch, "stage": "lifter", "loss": lp})
            p_losses.append(lp)

        for name, store in (("generator", gen.store), ("discriminator", disc.store),
                            ("lifter", lifter.store)):
            if not np.all(np.isfinite(store.values)):
                _dump_and_raise(dump_dir, f"non-finite {name} parameters",
                                {"epoch": epoch, "stage": name})
        entry = {"epoch": epoch, "d_loss": _mean_or_none(d_losses),
                 "g_loss": _mean_or_none(g_losses), "p_loss": _mean_or_none(p_losses),
                 "lifter_updates": len(p_losses),
                 "disc_max_abs": float(np.abs(disc.store.values).max())}
        if eval_gt is not None:
            entry["target_mpjpe"] = evaluate_lifter(lifter, target, eval_gt)
        report.epochs.append(entry)
        log.info("epoch %d: %s", epoch, entry)

    if lifter.steps != steps_before:
        lifter.seed = cfg.seed
    report.wall_clock = time.perf_counter() - t0
    return AdaptResult(lifter, report, gen, disc)
