"""Supervision losses (L1 on weights / joints / poses via a joint proxy) and
the three body-prior penalties, each with a closed-form gradient.

Pose supervision is indirect: ground-truth joints are transformed by the
predicted and ground-truth dual quaternions and the transformed joint sets
are compared, which makes the loss invariant to per-bone DQ sign flips.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .deform import BlendWeights
from .geom import PoseSet
from .skeleton import KinematicTree

_ZERO_BONE = 1e-9


@dataclass
class LossWeights:
    weights: float = 1.0
    joints: float = 1.0
    pose: float = 1.0
    connectivity: float = 0.1
    symmetry: float = 0.1
    parallelism: float = 0.1


@dataclass
class LossReport:
    weights_l1: float = 0.0
    joints_l1: float = 0.0
    pose_l1: float = 0.0
    prior_connect: float = 0.0
    prior_symmetry: float = 0.0
    prior_parallel: float = 0.0
    lambdas: LossWeights = field(default_factory=LossWeights)

    @property
    def total(self) -> float:
        lam = self.lambdas
        return (lam.weights * self.weights_l1 + lam.joints * self.joints_l1
                + lam.pose * self.pose_l1 + lam.connectivity * self.prior_connect
                + lam.symmetry * self.prior_symmetry
                + lam.parallelism * self.prior_parallel)

    def to_json(self) -> str:
        d = {k: float(getattr(self, k)) for k in
             ("weights_l1", "joints_l1", "pose_l1", "prior_connect",
              "prior_symmetry", "prior_parallel")}
        d["total"] = float(self.total)
        return json.dumps(d, sort_keys=True)


def _as_weights(x) -> np.ndarray:
    return x.w if isinstance(x, BlendWeights) else np.asarray(x, dtype=np.float64)


def _as_pose(x) -> np.ndarray:
    return x.dq if isinstance(x, PoseSet) else np.asarray(x, dtype=np.float64)


def _row_mask(k: int, bone_mask) -> np.ndarray:
    if bone_mask is None:
        return np.ones(k, dtype=bool)
    m = np.asarray(bone_mask, dtype=bool)
    if m.shape != (k,):
        raise ValueError("bone mask must be (K,)")
    return m


# ---------------------------------------------------------------------------
# Masked L1 supervision
# ---------------------------------------------------------------------------

def _masked_l1(pred: np.ndarray, gt: np.ndarray, rows: np.ndarray):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    count = int(rows.sum()) * pred.shape[1]
    if count == 0:
        return 0.0, np.zeros_like(pred)
    diff = (pred - gt) * rows[:, None]
    loss = float(np.abs(diff).sum() / count)
    grad = np.sign(diff) / count
    return loss, grad


def l1_weights(pred, gt, bone_mask=None) -> float:
    return l1_weights_grad(pred, gt, bone_mask)[0]


def l1_weights_grad(pred, gt, bone_mask=None):
    p, g = _as_weights(pred), _as_weights(gt)
    return _masked_l1(p, g, _row_mask(p.shape[0], bone_mask))


def l1_joints(pred: np.ndarray, gt: np.ndarray, bone_mask=None) -> float:
    return l1_joints_grad(pred, gt, bone_mask)[0]


def l1_joints_grad(pred: np.ndarray, gt: np.ndarray, bone_mask=None):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    return _masked_l1(p, g, _row_mask(p.shape[0], bone_mask))


# ---------------------------------------------------------------------------
# Differentiable per-bone DQ application (unit-form, used by the pose proxy
# and the rest-frame priors)
# ---------------------------------------------------------------------------

def transform_joints(pose, joints: np.ndarray) -> np.ndarray:
    """Apply bone k's dual quaternion to bone k's head and tail."""
    return _transform_joints_fwd(_as_pose(pose), np.asarray(joints, dtype=np.float64))


def _apply_rows(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Rotate+translate points p (K, 3) by unit DQs q (K, 8), closed form."""
    w, u = q[:, :1], q[:, 1:4]
    d0, dv = q[:, 4:5], q[:, 5:8]
    uxp = np.cross(u, p)
    rot = (w * w - np.sum(u * u, axis=1, keepdims=True)) * p \
        + 2.0 * np.sum(u * p, axis=1, keepdims=True) * u + 2.0 * w * uxp
    trans = 2.0 * (-d0 * u + w * dv - np.cross(dv, u))
    return rot + trans


def _apply_rows_backward(dq_out: np.ndarray, q: np.ndarray, p: np.ndarray):
    """Gradient of _apply_rows w.r.t. the 8 DQ entries (points held fixed)."""
    w, u = q[:, :1], q[:, 1:4]
    d0, dv = q[:, 4:5], q[:, 5:8]
    g = dq_out                                    # (K, 3) upstream gradient
    gw = np.sum(g * (2.0 * w * p + 2.0 * np.cross(u, p) + 2.0 * dv), axis=1)
    # rotation term: d/du_j = -2 u_j p + 2 p_j u + 2 (u.p) e_j + 2 w (e_j x p)
    up = np.sum(u * p, axis=1, keepdims=True)
    gu = (-2.0 * np.sum(g * p, axis=1, keepdims=True) * u
          + 2.0 * np.sum(g * u, axis=1, keepdims=True) * p
          + 2.0 * up * g
          + 2.0 * w * np.cross(p, g)              # g . (e_j x p) = (p x g)_j
          - 2.0 * d0 * g
          + 2.0 * np.cross(dv, g))                # g . (-dv x e_j) = (dv x g)_j
    gd0 = -2.0 * np.sum(g * u, axis=1)
    gdv = 2.0 * w * g + 2.0 * np.cross(g, u)      # g . (u x e_j) = (g x u)_j
    return np.concatenate([gw[:, None], gu, gd0[:, None], gdv], axis=1)


def _transform_joints_fwd(dq: np.ndarray, joints: np.ndarray) -> np.ndarray:
    heads = _apply_rows(dq, joints[:, :3])
    tails = _apply_rows(dq, joints[:, 3:])
    return np.concatenate([heads, tails], axis=1)


def _transform_joints_backward(dout: np.ndarray, dq: np.ndarray,
                               joints: np.ndarray) -> np.ndarray:
    return (_apply_rows_backward(dout[:, :3], dq, joints[:, :3])
            + _apply_rows_backward(dout[:, 3:], dq, joints[:, 3:]))


def _check_unit(dq: np.ndarray, tol: float = 1e-3) -> None:
    n = np.abs(np.linalg.norm(dq[:, :4], axis=1) - 1.0)
    pl = np.abs(np.sum(dq[:, :4] * dq[:, 4:], axis=1))
    if n.max(initial=0.0) > tol or pl.max(initial=0.0) > tol:
        raise ValueError("pose contains non-unit dual quaternions")


def pose_loss_via_proxy(pred_pose, gt_pose, gt_joints: np.ndarray,
                        bone_mask=None) -> float:
    return pose_loss_via_proxy_grad(pred_pose, gt_pose, gt_joints, bone_mask)[0]


def pose_loss_via_proxy_grad(pred_pose, gt_pose, gt_joints: np.ndarray,
                             bone_mask=None):
    """L1 between GT joints moved by the predicted vs the GT poses.

    Returns (loss, gradient w.r.t. the predicted (K, 8) pose entries).
    """
    pq, gq = _as_pose(pred_pose), _as_pose(gt_pose)
    _check_unit(pq)
    _check_unit(gq)
    gj = np.asarray(gt_joints, dtype=np.float64)
    rows = _row_mask(pq.shape[0], bone_mask)
    count = int(rows.sum()) * 6
    if count == 0:
        return 0.0, np.zeros_like(pq)
    a = _transform_joints_fwd(pq, gj)
    b = _transform_joints_fwd(gq, gj)
    diff = (a - b) * rows[:, None]
    loss = float(np.abs(diff).sum() / count)
    da = np.sign(diff) / count
    return loss, _transform_joints_backward(da, pq, gj)


# ---------------------------------------------------------------------------
# Body priors
# ---------------------------------------------------------------------------

def prior_connectivity(joints: np.ndarray, tree: KinematicTree) -> float:
    return prior_connectivity_grad(joints, tree)[0]


def prior_connectivity_grad(joints: np.ndarray, tree: KinematicTree):
    """Mean L1 gap between child heads and parent tails over the tree's
    connectivity pairs."""
    j = np.asarray(joints, dtype=np.float64)
    pairs = tree.connectivity_pairs
    grad = np.zeros_like(j)
    if not pairs:
        return 0.0, grad
    total = 0.0
    for c, p in pairs:
        diff = j[c, :3] - j[p, 3:]
        total += np.abs(diff).sum()
        s = np.sign(diff) / len(pairs)
        grad[c, :3] += s
        grad[p, 3:] -= s
    return float(total / len(pairs)), grad


_MIRROR = np.array([-1.0, 1.0, 1.0, -1.0, 1.0, 1.0])


def prior_symmetry(joints: np.ndarray, tree: KinematicTree) -> float:
    return prior_symmetry_grad(joints, tree)[0]


def prior_symmetry_grad(joints: np.ndarray, tree: KinematicTree):
    """Mean per-coordinate L1 between left joints and x-mirrored right joints.

    Assumes the canonical/rest convention where the mirror plane is x = 0.
    """
    j = np.asarray(joints, dtype=np.float64)
    pairs = tree.symmetry_pairs
    grad = np.zeros_like(j)
    if not pairs:
        return 0.0, grad
    count = len(pairs) * 6
    total = 0.0
    for l, r in pairs:
        diff = j[l] - j[r] * _MIRROR
        total += np.abs(diff).sum()
        s = np.sign(diff) / count
        grad[l] += s
        grad[r] -= s * _MIRROR
    return float(total / count), grad


def prior_parallelism(joints: np.ndarray, tree: KinematicTree) -> float:
    return prior_parallelism_grad(joints, tree)[0]


def prior_parallelism_grad(joints: np.ndarray, tree: KinematicTree):
    """Mean (1 - cosine) between consecutive bone directions in each limb
    chain; zero-length bones are skipped with a debug warning."""
    j = np.asarray(joints, dtype=np.float64)
    grad = np.zeros_like(j)
    terms = []
    for chain in tree.limb_chains:
        for a, b in zip(chain[:-1], chain[1:]):
            va = j[a, 3:] - j[a, :3]
            vb = j[b, 3:] - j[b, :3]
            na, nb = np.linalg.norm(va), np.linalg.norm(vb)
            if na < _ZERO_BONE or nb < _ZERO_BONE:
                warnings.warn(f"zero-length bone in limb chain ({a}, {b}); "
                              "skipping its parallelism term")
                continue
            cos = float(va @ vb / (na * nb))
            dcos_va = vb / (na * nb) - cos * va / (na * na)
            dcos_vb = va / (na * nb) - cos * vb / (nb * nb)
            terms.append((1.0 - cos, a, b, dcos_va, dcos_vb))
    if not terms:
        return 0.0, grad
    inv = 1.0 / len(terms)
    total = 0.0
    for val, a, b, dva, dvb in terms:
        total += val
        grad[a, 3:] -= dva * inv
        grad[a, :3] += dva * inv
        grad[b, 3:] -= dvb * inv
        grad[b, :3] += dvb * inv
    return float(total * inv), grad


def total_loss(weights_l1: float = 0.0, joints_l1: float = 0.0,
               pose_l1: float = 0.0, prior_connect: float = 0.0,
               prior_symmetry: float = 0.0, prior_parallel: float = 0.0,
               lambdas: LossWeights | None = None) -> LossReport:
    lam = lambdas or LossWeights()
    for name in ("weights", "joints", "pose", "connectivity", "symmetry",
                 "parallelism"):
        if getattr(lam, name) < 0:
            raise ValueError("loss weights must be non-negative")
    return LossReport(weights_l1=weights_l1, joints_l1=joints_l1,
                      pose_l1=pose_l1, prior_connect=prior_connect,
                      prior_symmetry=prior_symmetry, prior_parallel=prior_parallel,
                      lambdas=lam)
