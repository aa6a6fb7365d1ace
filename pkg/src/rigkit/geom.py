"""Rigid-transform algebra: dual quaternions, matrices, shape normalization,
and the canonical hip-plane alignment.

Quaternions are stored (w, x, y, z). A dual quaternion is the pair
(real, dual), serialized as 8 floats, real part first. Unit dual quaternions
satisfy |real| = 1 and dot(real, dual) = 0 (Plucker condition).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError
from .skeleton import FRAME_REST, Skeleton

_EPS = 1e-12


# ---------------------------------------------------------------------------
# Quaternion primitives (vectorized over leading axes)
# ---------------------------------------------------------------------------

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes. Shapes (..., 4)."""
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion; shape (..., 4) -> (..., 3, 3)."""
    w, x, y, z = (q[..., i] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        np.stack([1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)], axis=-1),
        np.stack([2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)], axis=-1),
        np.stack([2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def mat_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion of a rotation matrix (Shepperd's branch method), w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    q /= np.linalg.norm(q)
    return _canonical_quat_sign(q)


def _canonical_quat_sign(q: np.ndarray) -> np.ndarray:
    """Fix q vs -q: w >= 0, falling back to first nonzero component positive."""
    for c in q:
        if abs(c) > 1e-12:
            return q if c > 0 else -q
    return q


def axis_angle_quat(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < _EPS:
        raise ValueError("zero rotation axis")
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


# ---------------------------------------------------------------------------
# Rigid transforms
# ---------------------------------------------------------------------------

@dataclass
class RigidTransform:
    """rotation (3, 3) orthonormal with det +1, translation (3,)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be (3,3), translation (3,)")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        self.rotation, self.translation = r, t

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self o other)(p) = self(other(p))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


# ---------------------------------------------------------------------------
# Dual quaternions
# ---------------------------------------------------------------------------

@dataclass
class DualQuat:
    real: np.ndarray
    dual: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.real, dtype=np.float64)
        d = np.asarray(self.dual, dtype=np.float64)
        if r.shape != (4,) or d.shape != (4,):
            raise ValueError("real and dual parts must be 4-vectors")
        self.real, self.dual = r, d

    @classmethod
    def identity(cls) -> "DualQuat":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(4))

    @classmethod
    def from_array(cls, a: np.ndarray) -> "DualQuat":
        a = np.asarray(a, dtype=np.float64).reshape(8)
        return cls(a[:4], a[4:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.real, self.dual])


def dq_mul(a, b):
    """Dual quaternion product on (..., 8) arrays or DualQuat pairs."""
    if isinstance(a, DualQuat):
        return DualQuat.from_array(dq_mul(a.as_array(), b.as_array()))
    ar, ad = a[..., :4], a[..., 4:]
    br, bd = b[..., :4], b[..., 4:]
    real = quat_mul(ar, br)
    dual = quat_mul(ar, bd) + quat_mul(ad, br)
    return np.concatenate([real, dual], axis=-1)


def dq_normalize(a: np.ndarray) -> np.ndarray:
    """Project (..., 8) onto unit + Plucker dual quaternions."""
    a = np.asarray(a, dtype=np.float64)
    n = np.linalg.norm(a[..., :4], axis=-1, keepdims=True)
    if np.any(n < 1e-8):
        raise ValueError("dual quaternion has (near-)zero real part")
    out = a / n
    r, d = out[..., :4], out[..., 4:]
    d -= np.sum(r * d, axis=-1, keepdims=True) * r
    return out


def dq_canonical_sign(a: np.ndarray) -> np.ndarray:
    """Resolve the q vs -q ambiguity: real.w >= 0, tie-broken by the first
    nonzero real component. Needed for stable L1 losses on pose arrays."""
    a = np.asarray(a, dtype=np.float64).copy()
    flat = a.reshape(-1, 8)
    for row in flat:
        for c in row[:4]:
            if abs(c) > 1e-12:
                if c < 0:
                    row *= -1.0
                break
    return flat.reshape(a.shape)


def dq_from_rigid(t: RigidTransform) -> DualQuat:
    """Unit dual quaternion of a rigid transform, real.w >= 0 convention."""
    r = mat_to_quat(t.rotation)
    tq = np.concatenate([[0.0], t.translation])
    d = 0.5 * quat_mul(tq, r)
    return DualQuat(r, d)


def rigid_from_dq(q) -> RigidTransform:
    """Rigid transform of a dual quaternion (real part normalized internally)."""
    a = q.as_array() if isinstance(q, DualQuat) else np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(a[:4])
    if n < 1e-8:
        raise ValueError("dual quaternion has (near-)zero real part")
    r, d = a[:4] / n, a[4:] / n
    rot = quat_to_mat(r)
    t = 2.0 * quat_mul(d, quat_conj(r))[1:]
    return RigidTransform(rot, t)


def _dq_full_conj(a: np.ndarray) -> np.ndarray:
    """Combined quaternion+dual conjugate used by the point sandwich."""
    out = np.empty_like(a)
    out[..., :4] = quat_conj(a[..., :4])
    out[..., 4:] = -quat_conj(a[..., 4:])
    return out


def dq_apply_point(q, p: np.ndarray) -> np.ndarray:
    """Transform point(s) by a unit dual quaternion via the DQ sandwich.

    Accepts a DualQuat or (8,) array with p of shape (3,) or (N, 3), or a
    (K, 8) pose array with p of shape (K, 3) (bone-wise application).
    """
    a = q.as_array() if isinstance(q, DualQuat) else np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    if a.ndim == 1:
        dq = np.broadcast_to(a, (pts.shape[0], 8))
    else:
        dq = a.reshape(-1, 8)
        if dq.shape[0] != pts.shape[0]:
            raise ValueError("pose count does not match point count")
    phat = np.zeros((pts.shape[0], 8))
    phat[:, 0] = 1.0
    phat[:, 5:] = pts
    out = dq_mul(dq_mul(dq, phat), _dq_full_conj(dq))[:, 5:]
    return out[0] if single else out.reshape(p.shape)


def point_segment_distance(points: np.ndarray, seg_a: np.ndarray,
                           seg_b: np.ndarray) -> np.ndarray:
    """Exact distances from N points to K segments, shape (N, K).

    Zero-length segments degrade to point distances.
    """
    p = np.asarray(points, dtype=np.float64)[:, None, :]     # (N, 1, 3)
    a = np.asarray(seg_a, dtype=np.float64)[None, :, :]      # (1, K, 3)
    b = np.asarray(seg_b, dtype=np.float64)[None, :, :]
    ab = b - a
    denom = np.sum(ab * ab, axis=-1)
    t = np.sum((p - a) * ab, axis=-1) / np.maximum(denom, _EPS)
    t = np.clip(t, 0.0, 1.0)
    t = np.where(denom <= _EPS, 0.0, t)
    closest = a + t[..., None] * ab
    return np.linalg.norm(p - closest, axis=-1)


# ---------------------------------------------------------------------------
# Shape normalization and canonical frame
# ---------------------------------------------------------------------------

@dataclass
class NormalizationRecord:
    """Invertible record of the re-centering/re-scaling applied to a shape."""

    center: np.ndarray
    scale: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.center


def normalize_shape(points: np.ndarray):
    """Center at the bounding-box center and scale the longest box edge to 1."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError("points must be (N, 3) with N >= 1")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain non-finite values")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent < _EPS:
        raise DegenerateInputError("all points coincide; cannot normalize")
    rec = NormalizationRecord(center=0.5 * (lo + hi), scale=extent)
    return rec.apply(pts), rec


@dataclass
class CanonicalFrame:
    """Rigid map from the input frame to the canonical hip-plane frame."""

    transform: RigidTransform

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.transform.apply(points)

    def invert(self, points: np.ndarray) -> np.ndarray:
        return self.transform.inverse().apply(points)


def canonicalize(skeleton: Skeleton, points: np.ndarray,
                 left_thigh: int | None = None, right_thigh: int | None = None):
    """Rigidly align so the hip sits at the origin, the hip-plane normal along
    +z, and the right-to-left thigh direction along +x.

    The datum plane passes through the heads of the root (hip) and the two
    thigh bones; those three points must be non-collinear.
    """
    tree = skeleton.tree
    lt = tree.index("thigh_l") if left_thigh is None else left_thigh
    rt = tree.index("thigh_r") if right_thigh is None else right_thigh
    hip = skeleton.heads[tree.root]
    lpos = skeleton.heads[lt]
    rpos = skeleton.heads[rt]

    v1 = lpos - rpos
    v2 = hip - rpos
    n = np.cross(v1, v2)
    nn = np.linalg.norm(n)
    if nn < 1e-9 * max(np.linalg.norm(v1) * np.linalg.norm(v2), _EPS):
        raise DegenerateInputError("hip/thigh datum joints are collinear")
    n = n / nn
    x = v1 / np.linalg.norm(v1)  # v1 is orthogonal to n by construction
    y = np.cross(n, x)
    rot = np.stack([x, y, n], axis=0)
    frame = CanonicalFrame(RigidTransform(rot, -rot @ hip))

    new_joints = np.concatenate([
        frame.apply(skeleton.heads), frame.apply(skeleton.tails)], axis=1)
    new_skel = skeleton.copy(joints=new_joints, frame_tag="canonical")
    return frame, new_skel, frame.apply(points)


def apply_pose_to_skeleton(skeleton: Skeleton, poses, frame_tag: str = FRAME_REST) -> Skeleton:
    """Map each bone's head and tail through that bone's unit dual quaternion."""
    dq = poses.dq if hasattr(poses, "dq") else np.asarray(poses, dtype=np.float64)
    if dq.shape != (skeleton.tree.bone_count, 8):
        raise ValueError(f"pose array shape {dq.shape} does not match "
                         f"K={skeleton.tree.bone_count}")
    heads = dq_apply_point(dq, skeleton.heads)
    tails = dq_apply_point(dq, skeleton.tails)
    return skeleton.copy(joints=np.concatenate([heads, tails], axis=1),
                         frame_tag=frame_tag)


@dataclass
class PoseSet:
    """Per-bone rigid transforms stored as unit dual quaternions, shape (K, 8)."""

    dq: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.dq, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != 8:
            raise ValueError("pose array must be (K, 8)")
        if not np.all(np.isfinite(a)):
            raise ValueError("pose array contains non-finite values")
        self.dq = a

    @classmethod
    def identity(cls, k: int) -> "PoseSet":
        a = np.zeros((k, 8))
        a[:, 0] = 1.0
        return cls(a)

    @property
    def bone_count(self) -> int:
        return int(self.dq.shape[0])

    def unit_error(self) -> float:
        """Worst deviation from the unit + Plucker conditions."""
        n = np.abs(np.linalg.norm(self.dq[:, :4], axis=1) - 1.0)
        p = np.abs(np.sum(self.dq[:, :4] * self.dq[:, 4:], axis=1))
        return float(max(n.max(initial=0.0), p.max(initial=0.0)))

    def inverse(self) -> "PoseSet":
        """Per-bone inverse (unit DQs assumed): conjugate of both parts."""
        out = self.dq.copy()
        out[:, 1:4] *= -1.0
        out[:, 5:8] *= -1.0
        return PoseSet(out)

    def compose(self, other: "PoseSet") -> "PoseSet":
        """Bone-wise self after other."""
        return PoseSet(dq_mul(self.dq, other.dq))
