import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liftadapt import skeleton as sk
from liftadapt.errors import (BadRange, DegenerateDirection, NonPositiveRatio, SkeletonError,
                              ZeroBone)
from oracles import fd_grad, max_rel_err

SKEL = sk.default_skeleton()
CHAIN = sk.SkeletonDef(("a", "b", "c"), (None, 0, 1), 0, ("torso", "torso"))


def random_pose(rng, skel=SKEL):
    pose = rng.normal(0, 200, (skel.joint_count, 3))
    return pose - pose[skel.root_index]


poses = st.integers(0, 2**32 - 1).map(lambda s: random_pose(np.random.default_rng(s)))


def test_default_skeleton_layout():
    assert SKEL.joint_count == 16 and SKEL.bone_count == 15
    assert {p: len(v) for p, v in SKEL.part_bones.items()} == {p: 3 for p in sk.PARTS}
    assert SKEL.names[SKEL.root_index] == "pelvis"


@pytest.mark.parametrize("kwargs", [
    dict(names=("a", "b"), parent=(None, None), root_index=0, part_assignment=("torso",)),
    dict(names=("a", "b", "c"), parent=(None, 2, 1), root_index=0, part_assignment=("torso",) * 2),
    dict(names=("a", "b"), parent=(None, 0), root_index=0, part_assignment=("tail",)),
    dict(names=("a", "b"), parent=(None, 0), root_index=0, part_assignment=()),
    dict(names=("a", "b"), parent=(None, 5), root_index=0, part_assignment=("torso",)),
])
def test_skeleton_validation(kwargs):
    with pytest.raises(SkeletonError):
        sk.SkeletonDef(**kwargs)


def test_load_skeleton_roundtrip(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text(json.dumps(SKEL.to_dict()) + "\n")
    assert sk.load_skeleton(p).to_dict() == SKEL.to_dict()
    p.write_text("{}\n{}\n")
    with pytest.raises(SkeletonError):
        sk.load_skeleton(p)


def test_to_bones_examples():
    b = sk.to_bones(np.array([[0, 0, 0], [0, 0, 100], [300, 400, 100]], float), CHAIN)
    np.testing.assert_allclose(b.directions, [[0, 0, 1], [0.6, 0.8, 0]])
    np.testing.assert_allclose(b.lengths, [100, 500])
    with pytest.raises(ZeroBone):
        sk.to_bones(np.array([[0, 0, 0], [0, 0, 0], [1, 0, 0]], float), CHAIN)


def test_from_bones_chain():
    bones = sk.BoneRepr(np.array([[0, 0, 1.0], [0, 1.0, 0]]), np.array([100.0, 50.0]))
    np.testing.assert_allclose(sk.from_bones(bones, CHAIN)[-1], [0, 50, 100])


@settings(max_examples=50, deadline=None)
@given(pose=poses)
def test_roundtrip_and_homogeneity(pose):
    b = sk.to_bones(pose, SKEL)
    np.testing.assert_allclose(np.linalg.norm(b.directions, axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(sk.from_bones(b, SKEL), pose, atol=1e-9)
    doubled = sk.from_bones(sk.apply_bone_length(b, np.full(15, 2.0)), SKEL)
    np.testing.assert_allclose(doubled, 2 * pose, atol=1e-9)


def test_bone_angle_examples():
    b = sk.BoneRepr(np.array([[0, 0, 1.0], [1.0, 0, 0]]), np.array([10.0, 20.0]))
    out = sk.apply_bone_angle(b, [[0, 0, 1.0], [0, 1.0, 0]])
    np.testing.assert_allclose(out.directions, [[0, 0, 1], [2 ** -0.5, 2 ** -0.5, 0]])
    np.testing.assert_array_equal(out.lengths, b.lengths)
    same = sk.apply_bone_angle(b, np.zeros((2, 3)))
    np.testing.assert_allclose(same.directions, b.directions)
    with pytest.raises(DegenerateDirection):
        sk.apply_bone_angle(b, [[0, 0, -1.0], [0, 0, 0]])


def test_bone_length_leaf_locality():
    pose = random_pose(np.random.default_rng(0))
    b = sk.to_bones(pose, SKEL)
    leaf = int(np.nonzero(SKEL.bone_child == 15)[0][0])  # right wrist has no children
    ratios = np.ones(15)
    ratios[leaf] = 2.0
    out = sk.from_bones(sk.apply_bone_length(b, ratios), SKEL)
    moved = np.nonzero(np.linalg.norm(out - pose, axis=-1) > 1e-9)[0]
    assert moved.tolist() == [15]
    np.testing.assert_allclose(out[15] - pose[15], b.vectors[leaf], atol=1e-9)
    with pytest.raises(NonPositiveRatio):
        sk.apply_bone_length(b, np.zeros(15))


def test_rotation_examples():
    p = np.array([[100.0, 0, 200.0], [100.0, 0, 0]])
    np.testing.assert_allclose(sk.apply_rotation(p, [0, 0, 0]), p)
    np.testing.assert_allclose(sk.apply_rotation(p[:1], [0, np.pi, 0]), [[-100, 0, -200]], atol=1e-9)
    np.testing.assert_allclose(sk.apply_rotation(p[1:], [0, np.pi / 2, 0]), [[0, 0, -100]], atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(pose=poses, aa=st.lists(st.floats(-4, 4), min_size=3, max_size=3))
def test_rotation_preserves_structure(pose, aa):
    R = sk.rodrigues(aa)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    rot = sk.apply_rotation(pose, aa)
    np.testing.assert_allclose(rot[0], 0, atol=1e-12)
    np.testing.assert_allclose(sk.to_bones(rot, SKEL).lengths, sk.to_bones(pose, SKEL).lengths)
    np.testing.assert_allclose(sk.kcs(rot, SKEL), sk.kcs(pose, SKEL), atol=1e-9 * 4e4)


def test_rotation_matches_scipy():
    from scipy.spatial.transform import Rotation
    rng = np.random.default_rng(1)
    for aa in [*rng.normal(size=(20, 3)), [1e-5, 0, 0], [0, 0, 0], [0, 1e-4, 2e-4]]:
        np.testing.assert_allclose(sk.rodrigues(aa), Rotation.from_rotvec(aa).as_matrix(),
                                   atol=1e-14)


@pytest.mark.parametrize("scale", [1e-7, 5e-4, 2e-3, 0.5, 3.0])
def test_rodrigues_backward_fd(scale):
    rng = np.random.default_rng(2)
    v = rng.normal(size=3)
    v *= scale / np.linalg.norm(v)
    G = rng.normal(size=(3, 3))
    analytic = sk.rodrigues_backward(v, G)
    numeric = fd_grad(lambda: float(np.sum(G * sk.rodrigues(v))), v, h=1e-7)
    assert max_rel_err(analytic, numeric) < 1e-5


def test_chain_backward_fd():
    rng = np.random.default_rng(3)
    vecs = rng.normal(size=(15, 3))
    G = rng.normal(size=(16, 3))
    flat = vecs.reshape(-1)
    numeric = fd_grad(lambda: float(np.sum(G * sk._chain(flat.reshape(15, 3), SKEL))), flat)
    assert max_rel_err(sk.chain_backward(G, SKEL).reshape(-1), numeric) < 1e-7


def test_kcs_examples():
    pose = np.array([[0, 0, 0], [100.0, 0, 0], [100.0, 50, 0]])
    np.testing.assert_allclose(sk.kcs(pose, CHAIN), [[10000, 0], [0, 2500]])


@settings(max_examples=30, deadline=None)
@given(pose=poses, r=st.floats(0.2, 3))
def test_kcs_properties(pose, r):
    K = sk.kcs(pose, SKEL)
    np.testing.assert_allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() > -1e-6 * np.abs(K).max()
    np.testing.assert_allclose(np.diag(K), sk.to_bones(pose, SKEL).lengths ** 2)
    scaled = sk.from_bones(sk.apply_bone_length(sk.to_bones(pose, SKEL), np.full(15, r)), SKEL)
    np.testing.assert_allclose(sk.kcs(scaled, SKEL), r * r * K, rtol=1e-9, atol=1e-6)


def test_random_rotation_vertical():
    pose = random_pose(np.random.default_rng(4))
    a = sk.random_rotation_vertical(pose, np.random.default_rng(9))
    b = sk.random_rotation_vertical(pose, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a[:, 1], pose[:, 1], atol=1e-9)
    np.testing.assert_allclose(sk.to_bones(a, SKEL).lengths, sk.to_bones(pose, SKEL).lengths)


def test_random_bone_length():
    pose = random_pose(np.random.default_rng(5))
    rng = np.random.default_rng
    np.testing.assert_allclose(sk.random_bone_length(pose, SKEL, rng(0), 1, 1), pose, atol=1e-9)
    np.testing.assert_allclose(sk.random_bone_length(pose, SKEL, rng(0), 2, 2), 2 * pose, atol=1e-9)
    np.testing.assert_array_equal(sk.random_bone_length(pose, SKEL, rng(3)),
                                  sk.random_bone_length(pose, SKEL, rng(3)))
    ratio = sk.to_bones(sk.random_bone_length(pose, SKEL, rng(1)), SKEL).lengths / \
        sk.to_bones(pose, SKEL).lengths
    assert np.all((ratio >= 0.8 - 1e-12) & (ratio <= 1.2 + 1e-12))
    with pytest.raises(BadRange):
        sk.random_bone_length(pose, SKEL, rng(0), 1.2, 0.8)
