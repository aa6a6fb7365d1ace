"""Procedural rigged-character oracle: capsule-per-bone bipeds with exact
ground-truth weights, plus pose sampling and training-pair assembly.

Every generated character is self-consistent by construction: skinning its
rest mesh with the ground-truth weights and a sampled pose reproduces the
posed mesh exactly, so the whole learning task has an exact oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .deform import BlendWeights, RiggedCharacter, lbs_linear
from .geom import (PoseSet, RigidTransform, apply_pose_to_skeleton,
                   axis_angle_quat, dq_from_rigid, dq_mul,
                   point_segment_distance, quat_to_mat)
from .sampling import (SampledShape, TriangleMesh, compute_vertex_normals,
                       sample_surface)
from .skeleton import (ROOT, FRAME_INPUT, FRAME_REST, KinematicTree, Skeleton,
                       standard_humanoid)

_FALLOFF_EXP = 4
_SUPPORT_MULT = 2.0


@dataclass
class SynthConfig:
    with_fingers: bool = False
    n_seg: int = 10          # capsule circumference segments (>= 4)
    n_cap: int = 2           # rings per hemispherical cap
    n_side: int = 2          # side subdivisions along the capsule axis
    torso_range: tuple = (0.85, 1.2)
    arm_range: tuple = (0.8, 1.25)
    leg_range: tuple = (0.8, 1.25)
    width_range: tuple = (0.85, 1.2)
    radius_range: tuple = (0.85, 1.25)
    head_range: tuple = (0.85, 1.3)
    pose_scale: float = 1.0

    def __post_init__(self):
        if self.n_seg < 4:
            raise ValueError("capsule resolution must be >= 4 segments")
        for r in (self.torso_range, self.arm_range, self.leg_range,
                  self.width_range, self.radius_range, self.head_range):
            if not (0 < r[0] <= r[1]):
                raise ValueError("proportion ranges must be positive")


@dataclass
class SynthCharacter:
    character: RiggedCharacter
    seed: int
    capsule_radii: np.ndarray     # (K,) per-bone capsule radius
    config: SynthConfig

    @property
    def tree(self) -> KinematicTree:
        return self.character.tree


@dataclass
class ExtraBoneSpec:
    prefix: str                   # e.g. "tail" -> bones tail_1, tail_2, ...
    attach: str                   # existing bone name
    count: int
    direction: tuple              # unit-ish direction of the chain
    seg_len: float = 0.05
    radius: float = 0.02
    offset: tuple = (0.0, 0.0, 0.0)  # chain start relative to the attach head
    mirror_of: Optional[str] = None  # prefix of the symmetric twin chain


# ---------------------------------------------------------------------------
# Capsule meshing
# ---------------------------------------------------------------------------

def _axis_frame(direction: np.ndarray) -> np.ndarray:
    z = direction / np.linalg.norm(direction)
    ref = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(ref, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])    # rows


def capsule_mesh(p0: np.ndarray, p1: np.ndarray, radius: float,
                 n_seg: int = 10, n_cap: int = 2, n_side: int = 2):
    """Closed capsule around segment p0-p1; returns (vertices, faces, normals)."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    length = float(np.linalg.norm(p1 - p0))
    if length < 1e-12:
        p1 = p0 + np.array([0.0, 1e-6, 0.0])
        length = 1e-6
    fx, fy, fz = _axis_frame(p1 - p0)
    theta = 2.0 * np.pi * np.arange(n_seg) / n_seg
    circle = np.outer(np.cos(theta), fx) + np.outer(np.sin(theta), fy)  # (S, 3)

    rings = []    # (center (3,), ring_radius, normal axial component, radial scale)
    for i in range(1, n_cap + 1):
        phi = -0.5 * np.pi + 0.5 * np.pi * i / n_cap
        rings.append((p0 + radius * np.sin(phi) * fz, radius * np.cos(phi),
                      np.sin(phi), np.cos(phi)))
    for j in range(1, n_side):
        rings.append((p0 + (length * j / n_side) * fz, radius, 0.0, 1.0))
    for i in range(n_cap + 1):
        phi = 0.5 * np.pi * i / n_cap
        rings.append((p1 + radius * np.sin(phi) * fz, radius * np.cos(phi),
                      np.sin(phi), np.cos(phi)))

    verts = [p0 - radius * fz]
    normals = [-fz]
    for center, r, axial, radial in rings[:-1]:
        verts.extend(center + r * circle)
        normals.extend(radial * circle + axial * fz)
    verts.append(p1 + radius * fz)
    normals.append(fz)
    verts = np.asarray(verts)
    normals = np.asarray(normals)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)

    faces = []
    n_rings = len(rings) - 1    # last ring is the degenerate top pole
    ring_start = lambda r: 1 + r * n_seg
    for s in range(n_seg):     # bottom fan
        faces.append((0, ring_start(0) + (s + 1) % n_seg, ring_start(0) + s))
    for r in range(n_rings - 1):
        a, b = ring_start(r), ring_start(r + 1)
        for s in range(n_seg):
            s1 = (s + 1) % n_seg
            faces.append((a + s, a + s1, b + s1))
            faces.append((a + s, b + s1, b + s))
    top = verts.shape[0] - 1
    a = ring_start(n_rings - 1)
    for s in range(n_seg):     # top fan
        faces.append((a + s, a + (s + 1) % n_seg, top))
    return verts, np.asarray(faces, dtype=np.int64), normals


# ---------------------------------------------------------------------------
# Rest skeleton template with randomized proportions
# ---------------------------------------------------------------------------

_RADII = {
    "hips": 0.055, "spine_1": 0.052, "spine_2": 0.05, "spine_3": 0.05,
    "neck": 0.02, "head": 0.062,
    "shoulder": 0.02, "arm": 0.022, "forearm": 0.019, "hand": 0.012,
    "thigh": 0.035, "shin": 0.027, "foot": 0.017, "toe": 0.012,
    "finger": 0.0045,
}


def _rest_template(tree: KinematicTree, f: dict) -> tuple[np.ndarray, np.ndarray]:
    """Joints (K, 6) and capsule radii (K,) for the randomized biped."""
    t, a, l = f["torso"], f["arm"], f["leg"]
    w, r, h = f["width"], f["radius"], f["head"]
    pos: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def seg(name, head, direction, length):
        head = np.asarray(head, dtype=np.float64)
        tail = head + np.asarray(direction, dtype=np.float64) * length
        pos[name] = (head, tail)
        return tail

    up = (0.0, 1.0, 0.0)
    tail = seg("hips", (0, 0, 0), up, 0.06 * t)
    for s in (1, 2, 3):
        tail = seg(f"spine_{s}", tail, up, 0.075 * t)
    chest = tail
    tail = seg("neck", chest, up, 0.05 * t)
    seg("head", tail, up, 0.14 * h)

    for side, sx in (("l", 1.0), ("r", -1.0)):
        x = (sx, 0.0, 0.0)
        sh_head = chest + np.array([sx * 0.02 * w, -0.015 * t, 0.0])
        tail = seg(f"shoulder_{side}", sh_head, x, 0.065 * w)
        tail = seg(f"arm_{side}", tail, x, 0.14 * a)
        tail = seg(f"forearm_{side}", tail, x, 0.12 * a)
        hand_tail = seg(f"hand_{side}", tail, x, 0.055 * a)
        if any(n.startswith("thumb") for n in tree.names):
            for fi, fname in enumerate(("thumb", "index", "middle", "ring", "pinky")):
                z = (fi - 2) * 0.011 * w
                start = hand_tail + np.array([sx * 0.002, 0.0, z])
                ftail = start
                for sidx, flen in enumerate((0.018, 0.015, 0.012)):
                    ftail = seg(f"{fname}_{sidx+1}_{side}", ftail, x, flen * a)
        th_head = np.array([sx * 0.055 * w, -0.02 * t, 0.0])
        tail = seg(f"thigh_{side}", th_head, (0, -1, 0), 0.22 * l)
        tail = seg(f"shin_{side}", tail, (0, -1, 0), 0.21 * l)
        tail = seg(f"foot_{side}", tail, (0, 0, 1), 0.065 * l)
        seg(f"toe_{side}", tail, (0, 0, 1), 0.045 * l)

    joints = np.zeros((tree.bone_count, 6))
    radii = np.zeros(tree.bone_count)
    for i, name in enumerate(tree.names):
        head, tail = pos[name]
        joints[i, :3], joints[i, 3:] = head, tail
        stem = name[:-2] if name[-2:] in ("_l", "_r") else name
        if stem not in _RADII:
            stem = "finger"
        scale = h if stem == "head" else r
        radii[i] = _RADII[stem] * scale * (w if stem in
                                           ("hips", "spine_1", "spine_2", "spine_3")
                                           else 1.0)
    return joints, radii


def _falloff_weights(vertices: np.ndarray, joints: np.ndarray,
                     radii: np.ndarray) -> np.ndarray:
    """Smooth inverse-distance weights over the two nearest bone segments,
    inside a support radius of twice each bone's capsule radius."""
    d = point_segment_distance(vertices, joints[:, :3], joints[:, 3:])  # (V, K)
    v, k = d.shape
    order = np.argsort(d, axis=1)[:, :2]
    w = np.zeros((v, k))
    rows = np.arange(v)
    for c in range(2):
        idx = order[:, c]
        dist = d[rows, idx]
        support = _SUPPORT_MULT * radii[idx]
        val = np.where(dist <= support, 1.0 / (dist + 1e-6) ** _FALLOFF_EXP, 0.0)
        w[rows, idx] = np.maximum(w[rows, idx], val)
    dead = w.sum(axis=1) <= 0.0
    if np.any(dead):
        w[dead, order[dead, 0]] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return w.T    # (K, V)


def generate_character(config: SynthConfig, seed: int) -> SynthCharacter:
    """Deterministic capsule biped with exact blend weights."""
    rng = np.random.default_rng(seed)
    f = {
        "torso": rng.uniform(*config.torso_range),
        "arm": rng.uniform(*config.arm_range),
        "leg": rng.uniform(*config.leg_range),
        "width": rng.uniform(*config.width_range),
        "radius": rng.uniform(*config.radius_range),
        "head": rng.uniform(*config.head_range),
    }
    tree = standard_humanoid(with_fingers=config.with_fingers)
    joints, radii = _rest_template(tree, f)
    mesh = _capsules_for(joints, radii, config)
    weights = BlendWeights(w=_falloff_weights(mesh.vertices, joints, radii))
    skel = Skeleton(tree=tree, joints=joints, frame_tag=FRAME_REST)
    rigged = RiggedCharacter(mesh=mesh, skeleton=skel, weights=weights, tree=tree)
    return SynthCharacter(character=rigged, seed=seed, capsule_radii=radii,
                          config=config)


def _capsules_for(joints: np.ndarray, radii: np.ndarray,
                  config: SynthConfig) -> TriangleMesh:
    verts, faces, normals = [], [], []
    offset = 0
    for i in range(joints.shape[0]):
        v, fcs, nrm = capsule_mesh(joints[i, :3], joints[i, 3:], radii[i],
                                   config.n_seg, config.n_cap, config.n_side)
        verts.append(v)
        normals.append(nrm)
        faces.append(fcs + offset)
        offset += v.shape[0]
    return TriangleMesh(vertices=np.concatenate(verts),
                        faces=np.concatenate(faces),
                        vertex_normals=np.concatenate(normals))


# ---------------------------------------------------------------------------
# Pose sampling (forward kinematics over the tree)
# ---------------------------------------------------------------------------

_DEFAULT_LIMITS = {
    "spine_1": ((1, 0, 0), 0.15), "spine_2": ((1, 0, 0), 0.15),
    "spine_3": ((1, 0, 0), 0.15), "neck": ((1, 0, 0), 0.2),
    "head": ((1, 0, 0), 0.2),
    "arm": ((0, 0, 1), 0.6), "forearm": ((0, 1, 0), 0.9),
    "hand": ((0, 1, 0), 0.3),
    "thigh": ((1, 0, 0), 0.6), "shin": ((1, 0, 0), 0.9),
    "foot": ((1, 0, 0), 0.3),
    "finger": ((0, 0, 1), 0.5),
    "tail": ((1, 0, 0), 0.4), "ear": ((0, 0, 1), 0.3),
}


def default_pose_limits(tree: KinematicTree, scale: float = 1.0) -> dict:
    """Per-bone (axis, max_angle) map for the standard template names."""
    limits = {}
    for name in tree.names:
        stem = name[:-2] if name[-2:] in ("_l", "_r") else name
        if stem.split("_")[0] in ("thumb", "index", "middle", "ring", "pinky"):
            stem = "finger"
        elif stem.split("_")[0] in ("tail", "ear"):
            stem = stem.split("_")[0]
        if stem in _DEFAULT_LIMITS:
            axis, mx = _DEFAULT_LIMITS[stem]
            limits[name] = (np.asarray(axis, dtype=np.float64), mx * scale)
    return limits


def sample_pose(skeleton: Skeleton, limits: dict, seed: int,
                profile: str = "uniform") -> PoseSet:
    """Random per-bone rotations within limits, composed by forward
    kinematics along the tree into global rest->posed dual quaternions.
    Zero angles (or an empty limits map) give the identity pose.

    profile "uniform" draws angles uniformly across the limit range;
    "gaussian" concentrates near the rest pose (sigma = 0.45 x limit,
    clamped), which better resembles motion-capture frame statistics.
    """
    rng = np.random.default_rng(seed)
    tree = skeleton.tree
    k = tree.bone_count
    angles = np.zeros(k)
    axes = np.tile(np.array([0.0, 0.0, 1.0]), (k, 1))
    for i, name in enumerate(tree.names):
        if name in limits:
            axis, mx = limits[name]
            axes[i] = axis
            if profile == "uniform":
                angles[i] = rng.uniform(-mx, mx)
            elif profile == "gaussian":
                angles[i] = np.clip(rng.normal(0.0, 0.45 * mx), -mx, mx)
            else:
                raise ValueError(f"unknown pose profile {profile!r}")
    return fk_global_pose(tree, axes, angles, skeleton.heads)


def fk_global_pose(tree: KinematicTree, axes: np.ndarray, angles: np.ndarray,
                   rest_heads: np.ndarray) -> PoseSet:
    """Compose per-bone local rotations (about each bone's rest head) into
    global dual quaternions, parents before children."""
    g = np.zeros((tree.bone_count, 8))
    order = np.argsort(tree.depth, kind="stable")
    for i in order:
        if abs(angles[i]) < 1e-15:
            local = np.array([1.0, 0, 0, 0, 0, 0, 0, 0])
        else:
            rot = quat_to_mat(axis_angle_quat(axes[i], angles[i]))
            t = rest_heads[i] - rot @ rest_heads[i]
            local = dq_from_rigid(RigidTransform(rot, t)).as_array()
        p = int(tree.parent[i])
        g[i] = local if p == ROOT else dq_mul(g[p], local)
    return PoseSet(dq=g)


# ---------------------------------------------------------------------------
# Training pairs
# ---------------------------------------------------------------------------

@dataclass
class TrainingPair:
    shape: SampledShape               # uniform posed surface sample
    posed_mesh: TriangleMesh
    gt_weights_points: np.ndarray     # (K, n) weights at shape's points
    gt_joints: np.ndarray             # (K, 6) posed joints (input frame)
    gt_pose_to_rest: PoseSet
    character: SynthCharacter

    def rest_joints(self) -> np.ndarray:
        return self.character.character.skeleton.joints


def make_training_pair(character: SynthCharacter, pose: PoseSet, n: int,
                       seed: int,
                       global_rot: Optional[RigidTransform] = None) -> TrainingPair:
    """Pose the character, sample its surface, and return the supervision
    triple (blend weights, posed joints, pose-to-rest transforms)."""
    rigged = character.character
    total = pose
    if global_rot is not None:
        gdq = dq_from_rigid(global_rot).as_array()
        total = PoseSet(dq=dq_mul(np.tile(gdq, (pose.bone_count, 1)), pose.dq))

    posed_verts = lbs_linear(rigged.mesh.vertices, rigged.weights, total)
    posed_mesh = TriangleMesh(vertices=posed_verts, faces=rigged.mesh.faces)
    posed_mesh.vertex_normals = compute_vertex_normals(posed_mesh)

    posed_skel = apply_pose_to_skeleton(rigged.skeleton, total,
                                        frame_tag=FRAME_INPUT)
    shape = sample_surface(posed_mesh, n, seed)
    gt_w = interpolate_weights(rigged.weights, posed_mesh, shape)
    return TrainingPair(shape=shape, posed_mesh=posed_mesh,
                        gt_weights_points=gt_w, gt_joints=posed_skel.joints,
                        gt_pose_to_rest=total.inverse(), character=character)


def interpolate_weights(weights: BlendWeights, mesh: TriangleMesh,
                        shape: SampledShape) -> np.ndarray:
    """GT weights at sampled points via barycentric blending of the sample's
    source-face vertex weights (stays convex and sums to one)."""
    if shape.face_index is None or shape.bary is None:
        raise ValueError("shape lacks face/barycentric provenance")
    tri = mesh.faces[shape.face_index]            # (n, 3)
    cols = weights.w[:, tri]                      # (K, n, 3)
    return np.einsum("knc,nc->kn", cols, shape.bary)


# ---------------------------------------------------------------------------
# Extra-bone accessories
# ---------------------------------------------------------------------------

def default_accessory_specs() -> list[ExtraBoneSpec]:
    """A 3-bone tail plus two 2-bone ears, the fine-tuning accessory set."""
    return [
        ExtraBoneSpec(prefix="tail", attach="hips", count=3,
                      direction=(0.0, -0.25, -1.0), seg_len=0.09, radius=0.022,
                      offset=(0.0, 0.0, -0.05)),
        ExtraBoneSpec(prefix="ear_l", attach="head", count=2,
                      direction=(0.25, 1.0, 0.0), seg_len=0.07, radius=0.018,
                      offset=(0.035, 0.1, 0.0), mirror_of="ear_r"),
        ExtraBoneSpec(prefix="ear_r", attach="head", count=2,
                      direction=(-0.25, 1.0, 0.0), seg_len=0.07, radius=0.018,
                      offset=(-0.035, 0.1, 0.0), mirror_of="ear_l"),
    ]


def attach_extra_bones(character: SynthCharacter,
                       specs: list[ExtraBoneSpec]) -> SynthCharacter:
    """Append accessory capsule chains (ears, tails) with weights and an
    extended kinematic tree; the base bones keep their indices."""
    base = character.character
    tree = base.tree
    joints = base.skeleton.joints
    names = list(tree.names)
    parents = list(int(p) for p in tree.parent)
    radii = list(character.capsule_radii)
    new_joints = [joints]
    chains: list[list[int]] = []
    chain_index: dict[str, list[int]] = {}

    for spec in specs:
        try:
            attach_idx = tree.index(spec.attach)
        except KeyError as e:
            raise ValueError(str(e)) from e
        direction = np.asarray(spec.direction, dtype=np.float64)
        direction = direction / np.linalg.norm(direction)
        start = joints[attach_idx, :3] + np.asarray(spec.offset, dtype=np.float64)
        parent = attach_idx
        chain = []
        seg_joints = np.zeros((spec.count, 6))
        for i in range(spec.count):
            head = start + direction * (spec.seg_len * i)
            seg_joints[i, :3] = head
            seg_joints[i, 3:] = head + direction * spec.seg_len
            names.append(f"{spec.prefix}_{i + 1}")
            parents.append(parent)
            radii.append(spec.radius)
            parent = len(names) - 1
            chain.append(parent)
        new_joints.append(seg_joints)
        chains.append(chain)
        chain_index[spec.prefix] = chain

    symmetry = list(tree.symmetry_pairs)
    for spec in specs:
        if spec.mirror_of and spec.mirror_of in chain_index \
                and spec.prefix.endswith("_l"):
            for a, b in zip(chain_index[spec.prefix], chain_index[spec.mirror_of]):
                symmetry.append((a, b))

    connectivity = list(tree.connectivity_pairs)
    for chain in chains:
        for a, b in zip(chain[1:], chain[:-1]):
            connectivity.append((a, b))

    new_tree = KinematicTree(
        parent=np.asarray(parents, dtype=np.int64),
        names=tuple(names),
        symmetry_pairs=tuple(symmetry),
        limb_chains=tree.limb_chains + tuple(tuple(c) for c in chains),
        connectivity_pairs=tuple(connectivity),
    )
    all_joints = np.concatenate(new_joints)
    all_radii = np.asarray(radii)
    mesh = _capsules_for(all_joints, all_radii, character.config)
    weights = BlendWeights(w=_falloff_weights(mesh.vertices, all_joints, all_radii))
    skel = Skeleton(tree=new_tree, joints=all_joints, frame_tag=FRAME_REST)
    rigged = RiggedCharacter(mesh=mesh, skeleton=skel, weights=weights,
                             tree=new_tree)
    return SynthCharacter(character=rigged, seed=character.seed,
                          capsule_radii=all_radii, config=character.config)


def make_corpus(config: SynthConfig, count: int, seed0: int) -> list[SynthCharacter]:
    return [generate_character(config, seed0 + i) for i in range(count)]


def corpus_manifest(config: SynthConfig, count: int, seed0: int) -> dict:
    from dataclasses import asdict
    return {"config": asdict(config), "count": count, "seed0": seed0,
            "seeds": list(range(seed0, seed0 + count))}
