"""Skeleton and weight quality metrics: joint-matching IoU/precision/recall,
Chamfer distances between joints and bone segments, and percentage errors of
the predicted animation assets.

Joints are bone head points throughout; segments run head -> tail. All
distances are reported in normalized model-space units (fractions of the
unit bounding-box edge).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .deform import BlendWeights
from .geom import point_segment_distance
from .losses import transform_joints
from .skeleton import Skeleton


@dataclass
class EvalReport:
    iou: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    cd_j2j: float = 0.0
    cd_j2b: float = 0.0
    cd_b2b: float = 0.0
    weights_err: float = 0.0
    joints_err: float = 0.0
    poses_err: float = 0.0

    def to_json(self) -> str:
        return json.dumps({k: float(getattr(self, k)) for k in (
            "iou", "precision", "recall", "cd_j2j", "cd_j2b", "cd_b2b",
            "weights_err", "joints_err", "poses_err")}, sort_keys=True)

    def table(self) -> str:
        """Aligned text table mirroring the usual two result-table layouts."""
        head1 = ["IoU", "Precision", "Recall", "CD-J2J", "CD-J2B", "CD-B2B"]
        row1 = [self.iou, self.precision, self.recall,
                self.cd_j2j, self.cd_j2b, self.cd_b2b]
        head2 = ["Weights Err", "Joints Err", "Poses Err"]
        row2 = [self.weights_err, self.joints_err, self.poses_err]
        fmt = lambda hs, vs: ("  ".join(f"{h:>11}" for h in hs) + "\n"
                              + "  ".join(f"{v:>11.4f}" for v in vs))
        return fmt(head1, row1) + "\n" + fmt(head2, row2)


def _heads(skel) -> np.ndarray:
    return skel.heads if isinstance(skel, Skeleton) else np.asarray(skel)[:, :3]


def _joints6(skel) -> np.ndarray:
    return skel.joints if isinstance(skel, Skeleton) else np.asarray(skel)


def bone_matching(pred, gt, tau: float = 0.05):
    """Greedy one-to-one matching of predicted joint heads to GT heads within
    radius tau; returns (iou, precision, recall)."""
    p = _heads(pred)
    g = _heads(gt)
    d = np.linalg.norm(p[:, None, :] - g[None, :, :], axis=-1)
    pairs = np.argwhere(d <= tau)
    order = np.argsort(d[pairs[:, 0], pairs[:, 1]], kind="stable")
    used_p = np.zeros(p.shape[0], dtype=bool)
    used_g = np.zeros(g.shape[0], dtype=bool)
    matched = 0
    for pi, gi in pairs[order]:
        if not used_p[pi] and not used_g[gi]:
            used_p[pi] = used_g[gi] = True
            matched += 1
    precision = matched / max(p.shape[0], 1)
    recall = matched / max(g.shape[0], 1)
    iou = matched / max(p.shape[0] + g.shape[0] - matched, 1)
    return iou, precision, recall


def cd_j2j(pred, gt) -> float:
    """Symmetric Chamfer distance between the two joint-head sets."""
    p = _heads(pred)
    g = _heads(gt)
    d = np.linalg.norm(p[:, None, :] - g[None, :, :], axis=-1)
    return 0.5 * float(d.min(axis=1).mean() + d.min(axis=0).mean())


def cd_j2b(pred, gt) -> float:
    """Symmetric Chamfer between one skeleton's joints and the other's bone
    segments (exact point-to-segment distances)."""
    pj, gj = _joints6(pred), _joints6(gt)
    d_pg = point_segment_distance(pj[:, :3], gj[:, :3], gj[:, 3:])
    d_gp = point_segment_distance(gj[:, :3], pj[:, :3], pj[:, 3:])
    return 0.5 * float(d_pg.min(axis=1).mean() + d_gp.min(axis=1).mean())


def _segment_samples(joints: np.ndarray, s: int) -> np.ndarray:
    t = (np.arange(s) + 0.5) / s
    return (joints[:, None, :3] * (1.0 - t[None, :, None])
            + joints[:, None, 3:] * t[None, :, None]).reshape(-1, 3)


def cd_b2b(pred, gt, samples_per_segment: int = 32) -> float:
    """Chamfer between bone segments: uniform samples along each segment,
    measured to the closest point on any opposing segment, symmetrized."""
    pj, gj = _joints6(pred), _joints6(gt)
    ps = _segment_samples(pj, samples_per_segment)
    gs = _segment_samples(gj, samples_per_segment)
    d_pg = point_segment_distance(ps, gj[:, :3], gj[:, 3:]).min(axis=1)
    d_gp = point_segment_distance(gs, pj[:, :3], pj[:, 3:]).min(axis=1)
    return 0.5 * float(d_pg.mean() + d_gp.mean())


def percentage_errors(pred_weights, gt_weights, pred_joints, gt_joints,
                      pred_pose, gt_pose, bbox_diag: float):
    """(weights_err, joints_err, poses_err), all in percent.

    weights_err: mean total-variation distance between weight columns x 100.
    joints_err:  mean head/tail position error over bbox diagonal x 100.
    poses_err:   mean displacement of GT joints transformed by the predicted
                 vs the GT pose, over bbox diagonal x 100.
    """
    pw = pred_weights.w if isinstance(pred_weights, BlendWeights) else np.asarray(pred_weights)
    gw = gt_weights.w if isinstance(gt_weights, BlendWeights) else np.asarray(gt_weights)
    if pw.shape != gw.shape:
        raise ValueError("weight shapes disagree")
    weights_err = float(np.abs(pw - gw).sum(axis=0).mean() * 100.0 / 2.0)

    pj = _joints6(pred_joints).reshape(-1, 3)
    gj = _joints6(gt_joints).reshape(-1, 3)
    joints_err = float(np.linalg.norm(pj - gj, axis=1).mean()
                       / bbox_diag * 100.0)

    gt_j6 = _joints6(gt_joints)
    a = transform_joints(pred_pose, gt_j6).reshape(-1, 3)
    b = transform_joints(gt_pose, gt_j6).reshape(-1, 3)
    poses_err = float(np.linalg.norm(a - b, axis=1).mean() / bbox_diag * 100.0)
    return weights_err, joints_err, poses_err
