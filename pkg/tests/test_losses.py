import numpy as np
import pytest

import rigkit.losses as lo
from rigkit.geom import dq_normalize
from rigkit.skeleton import KinematicTree
from rigkit.synthdata import SynthConfig, generate_character

from conftest import check_grad, random_unit_dqs


def margin_inputs(rng, shape, margin=0.05):
    """Random pred/gt pairs whose differences stay away from the L1 kink."""
    gt = rng.standard_normal(shape)
    diff = rng.standard_normal(shape)
    diff += np.sign(diff) * margin
    return gt + diff, gt


# -- supervision L1 ----------------------------------------------------------

def test_l1_weights_zero_and_masked(rng):
    w = rng.random((4, 6))
    assert lo.l1_weights(w, w) == 0.0
    other = rng.random((4, 6))
    assert lo.l1_weights(w, other, bone_mask=np.zeros(4, dtype=bool)) == 0.0
    with pytest.raises(ValueError):
        lo.l1_weights(w, rng.random((4, 7)))


def test_l1_weights_hand_case():
    pred = np.array([[0.2, 0.4], [0.8, 0.6]])
    gt = np.array([[0.1, 0.7], [0.9, 0.3]])
    # by-hand mean |diff| over 4 entries: (0.1+0.3+0.1+0.3)/4
    assert lo.l1_weights(pred, gt) == pytest.approx(0.2)


def test_l1_weights_gradient(rng):
    pred, gt = margin_inputs(rng, (5, 7))
    val, grad = lo.l1_weights_grad(pred, gt)
    check_grad(lambda: lo.l1_weights(pred, gt), pred, grad, rng)


def test_l1_joints_offset(rng):
    gt = rng.standard_normal((6, 6))
    assert lo.l1_joints(gt, gt) == 0.0
    assert lo.l1_joints(gt + 0.25, gt) == pytest.approx(0.25)
    mask = np.array([1, 1, 0, 1, 0, 1], dtype=bool)
    pred, gt2 = margin_inputs(rng, (6, 6))
    manual = np.abs((pred - gt2)[mask]).mean()
    assert lo.l1_joints(pred, gt2, mask) == pytest.approx(manual)


def test_l1_joints_gradient(rng):
    pred, gt = margin_inputs(rng, (4, 6))
    _, grad = lo.l1_joints_grad(pred, gt)
    check_grad(lambda: lo.l1_joints(pred, gt), pred, grad, rng)


# -- pose proxy --------------------------------------------------------------

def test_pose_proxy_zero_and_sign(rng):
    k = 5
    gt_j = rng.standard_normal((k, 6))
    pose = random_unit_dqs(rng, k)
    assert lo.pose_loss_via_proxy(pose, pose, gt_j) == pytest.approx(0.0)
    other = random_unit_dqs(rng, k)
    a = lo.pose_loss_via_proxy(other, pose, gt_j)
    b = lo.pose_loss_via_proxy(-other, pose, gt_j)
    assert a == pytest.approx(b)   # q and -q encode the same rigid map
    assert a > 0


def test_pose_proxy_translation_offset(rng):
    k = 3
    gt_j = rng.standard_normal((k, 6))
    pose = random_unit_dqs(rng, k)
    t = np.array([0.2, -0.1, 0.4])
    shift = np.concatenate([[1, 0, 0, 0], [0], t / 2])
    from rigkit.geom import dq_mul
    shifted = dq_mul(np.broadcast_to(shift, (k, 8)), pose)
    val = lo.pose_loss_via_proxy(shifted, pose, gt_j)
    # every transformed coordinate moves by t -> mean |t| over the 6 columns
    assert val == pytest.approx(np.abs(t).mean())


def test_pose_proxy_gradient(rng):
    k = 4
    gt_j = rng.standard_normal((k, 6))
    pose = random_unit_dqs(rng, k)
    pred = random_unit_dqs(rng, k)
    val, grad = lo.pose_loss_via_proxy_grad(pred, pose, gt_j)

    def f():
        return lo.pose_loss_via_proxy(pred, pose, gt_j)

    # small eps: the loss validates unit-ness with a 1e-3 tolerance
    check_grad(f, pred, grad, rng, eps=2e-4)


def test_pose_proxy_non_unit_raises(rng):
    k = 3
    gt_j = rng.standard_normal((k, 6))
    bad = random_unit_dqs(rng, k) * 2
    with pytest.raises(ValueError):
        lo.pose_loss_via_proxy(bad, random_unit_dqs(rng, k), gt_j)


# -- body priors -------------------------------------------------------------

def tree_with_pairs():
    return KinematicTree(
        parent=np.array([-1, 0, 1, 0, 3]),
        names=("root", "l1", "l2", "r1", "r2"),
        symmetry_pairs=((1, 3), (2, 4)),
        limb_chains=((1, 2), (3, 4)),
        connectivity_pairs=((2, 1), (4, 3)),
    )


def test_prior_connectivity_oracle(rng):
    ch = generate_character(SynthConfig(), seed=0)
    sk = ch.character.skeleton
    assert lo.prior_connectivity(sk.joints, sk.tree) < 1e-6
    # detach one child head by (0.1, 0, 0): mean rises by 0.1 / P
    tree = sk.tree
    child = tree.connectivity_pairs[0][0]
    j = sk.joints.copy()
    j[child, 0] += 0.1
    p = len(tree.connectivity_pairs)
    assert lo.prior_connectivity(j, tree) == pytest.approx(0.1 / p)
    # brute-force pair enumeration on random joints
    j = rng.standard_normal(sk.joints.shape)
    brute = np.mean([np.abs(j[c, :3] - j[q, 3:]).sum()
                     for c, q in tree.connectivity_pairs])
    assert lo.prior_connectivity(j, tree) == pytest.approx(brute)


def test_prior_symmetry_cases(rng):
    tree = tree_with_pairs()
    j = np.zeros((5, 6))
    j[1] = [0.3, -0.1, 0.2, 0.4, -0.2, 0.3]
    j[3] = j[1] * lo._MIRROR
    j[2] = [0.5, 0.1, -0.3, 0.6, 0.2, -0.4]
    j[4] = j[2] * lo._MIRROR
    assert lo.prior_symmetry(j, tree) == pytest.approx(0.0)
    # global z-translation leaves the mirror plane untouched
    j2 = j.copy()
    j2[:, 2] += 0.7
    j2[:, 5] += 0.7
    assert lo.prior_symmetry(j2, tree) == pytest.approx(0.0)
    # move one left joint in x by delta: mean rises by delta / (P * 6)
    delta = 0.12
    j3 = j.copy()
    j3[1, 0] += delta
    assert lo.prior_symmetry(j3, tree) == pytest.approx(delta / (2 * 6))


def test_prior_parallelism_cases():
    tree = tree_with_pairs()
    j = np.zeros((5, 6))
    j[1] = [0, 0, 0, 1, 0, 0]
    j[2] = [1, 0, 0, 2, 0, 0]       # same +x direction
    j[3] = [0, 0, 0, 0, 1, 0]
    j[4] = [0, 1, 0, 0, 2, 0]
    assert lo.prior_parallelism(j, tree) == pytest.approx(0.0)
    # 90 degree elbow in one of two chains: (1 - cos 90) / 2 terms
    j[2] = [1, 0, 0, 1, 1, 0]
    assert lo.prior_parallelism(j, tree) == pytest.approx(0.5)


def test_prior_parallelism_zero_length_warns():
    tree = tree_with_pairs()
    j = np.zeros((5, 6))
    j[1] = [0, 0, 0, 1, 0, 0]
    j[2] = [1, 0, 0, 1, 0, 0]       # zero-length bone
    j[3] = [0, 0, 0, 0, 1, 0]
    j[4] = [0, 1, 0, 0, 2, 0]
    with pytest.warns(UserWarning):
        val = lo.prior_parallelism(j, tree)
    assert val == pytest.approx(0.0)


def test_prior_parallelism_oracle(rng):
    ch = generate_character(SynthConfig(), seed=1)
    tree = ch.tree
    assert lo.prior_parallelism(ch.character.skeleton.joints, tree) < 1e-6
    j = rng.standard_normal((tree.bone_count, 6))
    # brute-force cosine oracle
    vals = []
    for chain in tree.limb_chains:
        for a, b in zip(chain[:-1], chain[1:]):
            va = j[a, 3:] - j[a, :3]
            vb = j[b, 3:] - j[b, :3]
            vals.append(1 - va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))
    assert lo.prior_parallelism(j, tree) == pytest.approx(np.mean(vals))


def test_prior_gradients(rng):
    ch = generate_character(SynthConfig(), seed=1)
    tree = ch.tree
    j = rng.standard_normal((tree.bone_count, 6))
    for fn, fng in ((lo.prior_connectivity, lo.prior_connectivity_grad),
                    (lo.prior_symmetry, lo.prior_symmetry_grad),
                    (lo.prior_parallelism, lo.prior_parallelism_grad)):
        _, grad = fng(j, tree)
        check_grad(lambda: fn(j, tree), j, grad, rng, samples=12)


def test_priors_positive_after_perturbation(rng):
    ch = generate_character(SynthConfig(), seed=2)
    sk = ch.character.skeleton
    tree = ch.tree
    for _ in range(5):
        j = sk.joints.copy()
        bone = int(rng.integers(tree.bone_count))
        col = int(rng.integers(6))
        j[bone, col] += 0.02 * (1 if rng.random() < 0.5 else -1)
        total = (lo.prior_connectivity(j, tree) + lo.prior_symmetry(j, tree)
                 + lo.prior_parallelism(j, tree))
        assert total > 0


# -- aggregation ----------------------------------------------------------------

def test_total_loss():
    lam = lo.LossWeights()
    rep = lo.total_loss(weights_l1=0.5, joints_l1=0.2, pose_l1=0.1,
                        prior_connect=1.0, prior_symmetry=2.0,
                        prior_parallel=3.0, lambdas=lam)
    assert rep.total == pytest.approx(0.5 + 0.2 + 0.1 + 0.1 * 6.0)
    zero = lo.total_loss(weights_l1=9.0, lambdas=lo.LossWeights(
        weights=0, joints=0, pose=0, connectivity=0, symmetry=0, parallelism=0))
    assert zero.total == 0.0
    unit = lo.total_loss(weights_l1=1, joints_l1=2, pose_l1=3, prior_connect=4,
                         prior_symmetry=5, prior_parallel=6,
                         lambdas=lo.LossWeights(1, 1, 1, 1, 1, 1))
    assert unit.total == pytest.approx(21.0)
    with pytest.raises(ValueError):
        lo.total_loss(lambdas=lo.LossWeights(weights=-1))


def test_loss_report_json():
    rep = lo.LossReport(weights_l1=0.5, joints_l1=0.25)
    doc = rep.to_json()
    assert '"total"' in doc and '"weights_l1"' in doc
