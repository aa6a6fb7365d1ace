import numpy as np
import pytest

import rigkit.losses as lo
from rigkit.deform import lbs_linear
from rigkit.geom import (RigidTransform, apply_pose_to_skeleton,
                         axis_angle_quat, point_segment_distance, quat_to_mat)
from rigkit.synthdata import (ExtraBoneSpec, SynthConfig, attach_extra_bones,
                              default_accessory_specs, default_pose_limits,
                              generate_character, interpolate_weights,
                              make_training_pair, sample_pose)


def test_generator_deterministic():
    a = generate_character(SynthConfig(), seed=11)
    b = generate_character(SynthConfig(), seed=11)
    assert np.array_equal(a.character.mesh.vertices, b.character.mesh.vertices)
    assert np.array_equal(a.character.weights.w, b.character.weights.w)
    assert np.array_equal(a.character.skeleton.joints, b.character.skeleton.joints)
    c = generate_character(SynthConfig(), seed=12)
    assert not np.array_equal(a.character.skeleton.joints,
                              c.character.skeleton.joints)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_seg=3)
    with pytest.raises(ValueError):
        SynthConfig(torso_range=(0.0, 1.0))


def test_gt_priors_vanish():
    for seed in range(4):
        ch = generate_character(SynthConfig(), seed=seed)
        j = ch.character.skeleton.joints
        t = ch.tree
        assert lo.prior_connectivity(j, t) < 1e-6
        assert lo.prior_symmetry(j, t) < 1e-6
        assert lo.prior_parallelism(j, t) < 1e-6


def test_weights_simplex_and_midpoint_dominance():
    ch = generate_character(SynthConfig(), seed=5)
    w = ch.character.weights
    assert w.column_error() < 1e-9
    assert w.w.min() >= 0
    # a surface vertex at the middle of the shin, far from other bones,
    # must be dominated by the shin (falloff closed form)
    tree = ch.tree
    j = ch.character.skeleton.joints
    shin = tree.index("shin_l")
    mid = 0.5 * (j[shin, :3] + j[shin, 3:])
    verts = ch.character.mesh.vertices
    vi = int(np.argmin(np.linalg.norm(verts - mid, axis=1)))
    assert w.w[shin, vi] > 0.99


def test_fingers_variant():
    ch = generate_character(SynthConfig(with_fingers=True), seed=1)
    assert ch.tree.bone_count == 52
    assert ch.character.weights.column_error() < 1e-9


def test_sample_pose_identity_and_units():
    ch = generate_character(SynthConfig(), seed=2)
    sk = ch.character.skeleton
    pose = sample_pose(sk, {}, seed=0)
    assert np.abs(pose.dq - np.concatenate(
        [[1], np.zeros(7)])).max() < 1e-12
    limits = default_pose_limits(ch.tree)
    pose = sample_pose(sk, limits, seed=3)
    assert pose.unit_error() < 1e-6


def test_sample_pose_single_bone_fk():
    """Rotating only the left forearm turns its child joints about the
    forearm head; everything outside that subtree stays fixed."""
    ch = generate_character(SynthConfig(), seed=2)
    sk = ch.character.skeleton
    tree = ch.tree
    fi = tree.index("forearm_l")
    angle = np.pi / 2
    limits = {"forearm_l": (np.array([0.0, 0, 1]), angle)}
    rng_angle = np.random.default_rng(7)
    pose = sample_pose(sk, limits, seed=7)
    posed = apply_pose_to_skeleton(sk, pose, frame_tag="input")
    moved = np.abs(posed.joints - sk.joints).max(axis=1) > 1e-12
    expected_moved = {fi, tree.index("hand_l")}
    assert set(np.flatnonzero(moved)) == expected_moved
    # hand-computed FK: the drawn angle rotates points about the forearm head
    drawn = np.random.default_rng(7).uniform(-angle, angle)
    rot = quat_to_mat(axis_angle_quat(np.array([0.0, 0, 1]), drawn))
    pivot = sk.joints[fi, :3]
    expect_tail = rot @ (sk.joints[fi, 3:] - pivot) + pivot
    assert np.abs(posed.joints[fi, 3:] - expect_tail).max() < 1e-9


def test_training_pair_identity_pose():
    ch = generate_character(SynthConfig(), seed=3)
    from rigkit.geom import PoseSet
    pose = PoseSet.identity(ch.tree.bone_count)
    pair = make_training_pair(ch, pose, n=256, seed=1)
    assert pair.gt_pose_to_rest.unit_error() < 1e-9
    ident = pair.gt_pose_to_rest.dq
    assert np.abs(ident - np.concatenate([[1], np.zeros(7)])).max() < 1e-12
    assert np.abs(pair.posed_mesh.vertices
                  - ch.character.mesh.vertices).max() < 1e-12


def test_training_pair_lbs_consistency():
    """The posed mesh is the low-rank product of GT weights and the sampled
    pose, exactly."""
    ch = generate_character(SynthConfig(), seed=3)
    limits = default_pose_limits(ch.tree)
    pose = sample_pose(ch.character.skeleton, limits, seed=4)
    pair = make_training_pair(ch, pose, n=128, seed=2)
    redo = lbs_linear(ch.character.mesh.vertices, ch.character.weights, pose)
    assert np.array_equal(pair.posed_mesh.vertices, redo)


def test_training_pair_rotation_equivariance():
    ch = generate_character(SynthConfig(), seed=3)
    limits = default_pose_limits(ch.tree)
    pose = sample_pose(ch.character.skeleton, limits, seed=4)
    base = make_training_pair(ch, pose, n=64, seed=2)
    rot = RigidTransform(quat_to_mat(axis_angle_quat(
        np.array([0.0, 1, 0]), 0.8)), np.zeros(3))
    spun = make_training_pair(ch, pose, n=64, seed=2, global_rot=rot)
    assert np.abs(spun.gt_joints[:, :3]
                  - rot.apply(base.gt_joints[:, :3])).max() < 1e-9
    assert np.abs(spun.posed_mesh.vertices
                  - rot.apply(base.posed_mesh.vertices)).max() < 1e-9


def test_training_pair_to_rest_round_trip():
    ch = generate_character(SynthConfig(), seed=3)
    limits = default_pose_limits(ch.tree, scale=0.01)
    pose = sample_pose(ch.character.skeleton, limits, seed=4)
    pair = make_training_pair(ch, pose, n=64, seed=2)
    from rigkit.deform import to_rest
    rest = to_rest(pair.posed_mesh.vertices, ch.character.weights,
                   pair.gt_pose_to_rest)
    assert np.abs(rest - ch.character.mesh.vertices).max() < 1e-5


def test_interpolated_weights_simplex():
    ch = generate_character(SynthConfig(), seed=6)
    limits = default_pose_limits(ch.tree)
    pose = sample_pose(ch.character.skeleton, limits, seed=1)
    pair = make_training_pair(ch, pose, n=512, seed=3)
    gw = pair.gt_weights_points
    assert gw.shape == (ch.tree.bone_count, 512)
    assert np.abs(gw.sum(axis=0) - 1).max() < 1e-9
    assert gw.min() >= 0


def test_pose_respects_limits():
    ch = generate_character(SynthConfig(), seed=2)
    sk = ch.character.skeleton
    limits = default_pose_limits(ch.tree)
    pose = sample_pose(sk, limits, seed=9)
    posed = apply_pose_to_skeleton(sk, pose, frame_tag="input")
    # bones without limits stay put relative to their parents: the root has
    # no limit entry, so its own transform is the identity
    root = ch.tree.root
    assert np.abs(posed.joints[root] - sk.joints[root]).max() < 1e-9


# -- extra bones ------------------------------------------------------------------

def test_attach_tail_counts():
    ch = generate_character(SynthConfig(), seed=7)
    tail = [ExtraBoneSpec(prefix="tail", attach="hips", count=3,
                          direction=(0, -0.25, -1.0), seg_len=0.09,
                          radius=0.022, offset=(0, 0, -0.05))]
    ext = attach_extra_bones(ch, tail)
    assert ext.tree.bone_count == 25
    assert ext.character.weights.column_error() < 1e-9
    assert ext.character.weights.point_count == ext.character.mesh.vertex_count
    names = ext.tree.names
    assert names[-3:] == ("tail_1", "tail_2", "tail_3")
    assert ext.tree.parent[ext.tree.index("tail_1")] == ch.tree.index("hips")


def test_attach_accessories_full_set():
    ch = generate_character(SynthConfig(), seed=7)
    ext = attach_extra_bones(ch, default_accessory_specs())
    assert ext.tree.bone_count == 22 + 3 + 2 + 2
    j = ext.character.skeleton.joints
    assert lo.prior_connectivity(j, ext.tree) < 1e-6
    assert lo.prior_symmetry(j, ext.tree) < 1e-6
    assert lo.prior_parallelism(j, ext.tree) < 1e-6


def test_attach_preserves_far_weights():
    ch = generate_character(SynthConfig(), seed=7)
    ext = attach_extra_bones(ch, default_accessory_specs())
    v_old = ch.character.mesh.vertex_count
    w_old = ch.character.weights.w
    w_new = ext.character.weights.w[:22, :v_old]
    # vertices far from every accessory keep their original weights
    acc_joints = ext.character.skeleton.joints[22:]
    d = point_segment_distance(ch.character.mesh.vertices,
                               acc_joints[:, :3], acc_joints[:, 3:]).min(axis=1)
    far = d > 0.15
    assert far.sum() > v_old // 2
    assert np.abs(w_new[:, far] - w_old[:, far]).max() < 1e-9


def test_attach_invalid_bone():
    ch = generate_character(SynthConfig(), seed=7)
    with pytest.raises(ValueError):
        attach_extra_bones(ch, [ExtraBoneSpec(prefix="x", attach="nope",
                                              count=1, direction=(0, 1, 0))])
