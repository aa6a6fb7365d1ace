"""Linear blend skinning engine: per-bone rigid transforms applied to
particles through convex blend weights, pose-to-rest mapping, and animation
playback.

Two blend modes are shipped: plain linear blending of the per-bone affine
maps (the default) and dual-quaternion blending, which moves every vertex by
an exactly rigid screw motion.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateBlendError
from .geom import PoseSet, dq_apply_point, rigid_from_dq
from .sampling import TriangleMesh
from .skeleton import KinematicTree, Skeleton


@dataclass
class BlendWeights:
    """Per-point distribution over bones, shape (K, N); columns sum to 1."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("weights must be (K, N)")
        self.w = w

    @property
    def bone_count(self) -> int:
        return int(self.w.shape[0])

    @property
    def point_count(self) -> int:
        return int(self.w.shape[1])

    def column_error(self) -> float:
        """Worst deviation of a column sum from 1 (ignoring negativity)."""
        return float(np.max(np.abs(self.w.sum(axis=0) - 1.0), initial=0.0))

    def mask_bones(self, present: np.ndarray) -> "BlendWeights":
        """Zero the rows of missing bones and renormalize every column."""
        present = np.asarray(present, dtype=bool)
        if present.shape != (self.bone_count,):
            raise ValueError("presence mask must be (K,)")
        w = self.w * present[:, None]
        sums = w.sum(axis=0, keepdims=True)
        if np.any(sums <= 0):
            raise DegenerateBlendError("a point lost all its bone weight")
        return BlendWeights(w=w / sums)

    def top_k(self, k: int) -> "BlendWeights":
        """Keep the k strongest bones per column, renormalized."""
        if k >= self.bone_count:
            return BlendWeights(self.w.copy())
        cut = np.partition(self.w, -k, axis=0)[-k]
        w = np.where(self.w >= cut, self.w, 0.0)
        return BlendWeights(w=w / w.sum(axis=0, keepdims=True))


@dataclass
class MotionFrame:
    """Per-bone rest->posed transforms at one timestamp."""

    poses: PoseSet
    timestamp: float = 0.0


@dataclass
class RiggedCharacter:
    """Everything needed to animate one character: mesh, rest skeleton, and
    per-vertex blend weights over the skeleton's bones."""

    mesh: TriangleMesh
    skeleton: Skeleton
    weights: BlendWeights
    tree: KinematicTree

    def __post_init__(self):
        if self.weights.point_count != self.mesh.vertex_count:
            raise ValueError("weights column count must equal the vertex count")
        if self.weights.bone_count != self.tree.bone_count:
            raise ValueError("weights row count must equal the bone count")


def _pose_matrices(poses: PoseSet):
    k = poses.bone_count
    rot = np.empty((k, 3, 3))
    trans = np.empty((k, 3))
    for i in range(k):
        t = rigid_from_dq(poses.dq[i])
        rot[i], trans[i] = t.rotation, t.translation
    return rot, trans


def lbs_linear(vertices: np.ndarray, weights: BlendWeights,
               poses: PoseSet) -> np.ndarray:
    """v' = sum_k W[k, v] * (R_k v + t_k)."""
    v = np.asarray(vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 3:
        raise ValueError("vertices must be (V, 3)")
    if weights.point_count != v.shape[0] or weights.bone_count != poses.bone_count:
        raise ValueError("weights/poses/vertices dimensions disagree")
    rot, trans = _pose_matrices(poses)
    per_bone = np.einsum("kij,vj->kvi", rot, v) + trans[:, None, :]
    return np.einsum("kv,kvi->vi", weights.w, per_bone)


def lbs_dq(vertices: np.ndarray, weights: BlendWeights,
           poses: PoseSet) -> np.ndarray:
    """Dual-quaternion blending: per vertex, weight-average the bone DQs
    (signs aligned to the strongest bone), renormalize, then apply."""
    v = np.asarray(vertices, dtype=np.float64)
    if weights.point_count != v.shape[0] or weights.bone_count != poses.bone_count:
        raise ValueError("weights/poses/vertices dimensions disagree")
    dq = poses.dq                                   # (K, 8)
    w = weights.w                                   # (K, V)
    ref = np.argmax(w, axis=0)                      # strongest bone per vertex
    sign = np.sign(dq[:, :4] @ dq[ref][:, :4].T)    # (K, V) real-part dots
    sign[sign == 0] = 1.0
    blended = np.einsum("kv,kc->vc", w * sign, dq)  # (V, 8)
    norms = np.linalg.norm(blended[:, :4], axis=1)
    if np.any(norms < 1e-6):
        raise DegenerateBlendError("antipodal dual-quaternion blend collapsed")
    blended /= norms[:, None]
    return dq_apply_point(blended, v)


def to_rest(vertices: np.ndarray, weights: BlendWeights, pose_to_rest: PoseSet,
            mode: str = "linear") -> np.ndarray:
    """Map posed vertices to the rest pose through the pose-to-rest transforms."""
    if mode == "linear":
        return lbs_linear(vertices, weights, pose_to_rest)
    if mode == "dq":
        return lbs_dq(vertices, weights, pose_to_rest)
    raise ValueError(f"unknown blend mode {mode!r}")


def animate(character: RiggedCharacter, frames: list[MotionFrame],
            mode: str = "linear") -> list[np.ndarray]:
    """Per-frame skinning of the character's rest mesh."""
    out = []
    for frame in frames:
        if frame.poses.bone_count != character.tree.bone_count:
            raise ValueError("frame bone count does not match the character")
        out.append(to_rest(character.mesh.vertices, character.weights,
                           frame.poses, mode=mode))
    return out


def blended_affines(weights: BlendWeights, poses: PoseSet) -> np.ndarray:
    """Per-point blended 3x4 affine maps, flattened to (N, 12).

    This is the dense spatial-weight x temporal-basis product realized
    explicitly; lbs_linear(v) equals applying row v's affine to vertex v.
    """
    rot, trans = _pose_matrices(poses)
    basis = np.concatenate([rot.reshape(-1, 9), trans], axis=1)  # (K, 12)
    return weights.w.T @ basis
