"""Kinematic tree topology: ancestry, attention masks, level scheduling.

Bone indices follow construction order, which is always topological here
(parents come before children). The root is marked with parent index -1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ROOT = -1

FRAME_INPUT = "input"
FRAME_CANONICAL = "canonical"
FRAME_REST = "rest"


@dataclass(frozen=True)
class KinematicTree:
    """Immutable bone hierarchy plus the topology-driven prior metadata.

    parent            : (K,) int array, -1 for the single root
    names             : K bone names
    symmetry_pairs    : (left_index, right_index) pairs mirrored about x=0
    limb_chains       : index lists whose bones are parallel in the rest pose
    connectivity_pairs: (child, parent) pairs whose head must meet the parent tail
    """

    parent: np.ndarray
    names: tuple[str, ...]
    symmetry_pairs: tuple[tuple[int, int], ...] = ()
    limb_chains: tuple[tuple[int, ...], ...] = ()
    connectivity_pairs: tuple[tuple[int, int], ...] = ()
    depth: np.ndarray = field(init=False, repr=False)
    children: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "symmetry_pairs",
                           tuple((int(a), int(b)) for a, b in self.symmetry_pairs))
        object.__setattr__(self, "limb_chains",
                           tuple(tuple(int(i) for i in c) for c in self.limb_chains))
        object.__setattr__(self, "connectivity_pairs",
                           tuple((int(a), int(b)) for a, b in self.connectivity_pairs))
        k = parent.shape[0]
        if parent.ndim != 1 or k == 0:
            raise ValueError("parent must be a non-empty 1-D index array")
        if len(self.names) != k:
            raise ValueError(f"{len(self.names)} names for {k} bones")
        roots = np.flatnonzero(parent == ROOT)
        if roots.size != 1:
            raise ValueError(f"expected exactly one root, found {roots.size}")
        if np.any(parent >= k) or np.any(parent < ROOT):
            raise ValueError("parent index out of range")
        if np.any(parent == np.arange(k)):
            raise ValueError("bone cannot be its own parent")

        depth = np.full(k, -1, dtype=np.int64)
        for i in range(k):
            # walk toward the root, bounded by K steps to expose cycles
            j, steps, chain = i, 0, []
            while depth[j] < 0 and parent[j] != ROOT:
                chain.append(j)
                j = int(parent[j])
                steps += 1
                if steps > k:
                    raise ValueError("cycle detected in parent pointers")
            if parent[j] == ROOT:
                depth[j] = 0
            d = int(depth[j])
            for b in reversed(chain):
                d += 1
                depth[b] = d
        object.__setattr__(self, "depth", depth)

        kids: list[list[int]] = [[] for _ in range(k)]
        for i in range(k):
            if parent[i] != ROOT:
                kids[int(parent[i])].append(i)
        object.__setattr__(self, "children", tuple(tuple(c) for c in kids))

        for a, b in self.symmetry_pairs:
            if not (0 <= a < k and 0 <= b < k):
                raise ValueError("symmetry pair index out of range")
        for chain in self.limb_chains:
            if any(not (0 <= i < k) for i in chain):
                raise ValueError("limb chain index out of range")
        for c, p in self.connectivity_pairs:
            if not (0 <= c < k and 0 <= p < k):
                raise ValueError("connectivity pair index out of range")

    @property
    def bone_count(self) -> int:
        return int(self.parent.shape[0])

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parent == ROOT)[0])

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no bone named {name!r}") from None


@dataclass(frozen=True)
class AncestralMask:
    """Boolean K x K attention mask: row i may attend to column j."""

    mask: np.ndarray
    include_self: bool

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("mask must be square")
        object.__setattr__(self, "mask", m)


def anc(tree: KinematicTree, i: int) -> list[int]:
    """Ancestors of bone i ordered nearest-first (direct parent, ..., root)."""
    if not (0 <= i < tree.bone_count):
        raise ValueError(f"bone index {i} out of range for K={tree.bone_count}")
    out = []
    j = int(tree.parent[i])
    while j != ROOT:
        out.append(j)
        j = int(tree.parent[j])
    return out


def ancestral_mask(tree: KinematicTree, include_self: bool) -> AncestralMask:
    """Mask allowing each bone to see its strict ancestors (and itself when asked).

    Attention over bone tokens uses include_self=True so every token keeps
    self-visibility; descendants stay masked out as future information.
    """
    k = tree.bone_count
    m = np.zeros((k, k), dtype=bool)
    for i in range(k):
        for j in anc(tree, i):
            m[i, j] = True
    if include_self:
        m |= np.eye(k, dtype=bool)
    return AncestralMask(mask=m, include_self=include_self)


def level_schedule(tree: KinematicTree) -> list[list[int]]:
    """Partition bone indices by tree depth; level 0 holds the root."""
    levels: list[list[int]] = [[] for _ in range(int(tree.depth.max()) + 1)]
    for i in range(tree.bone_count):
        levels[int(tree.depth[i])].append(i)
    return levels


@dataclass
class Skeleton:
    """Per-bone head/tail joint positions in a named frame.

    joints is (K, 6): columns 0:3 head xyz, 3:6 tail xyz, in normalized
    model-space units.
    """

    tree: KinematicTree
    joints: np.ndarray
    frame_tag: str = FRAME_INPUT

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=np.float64)
        if j.shape != (self.tree.bone_count, 6):
            raise ValueError(f"joints shape {j.shape} != ({self.tree.bone_count}, 6)")
        if not np.all(np.isfinite(j)):
            raise ValueError("joints contain non-finite values")
        if self.frame_tag not in (FRAME_INPUT, FRAME_CANONICAL, FRAME_REST):
            raise ValueError(f"unknown frame tag {self.frame_tag!r}")
        self.joints = j

    @property
    def heads(self) -> np.ndarray:
        return self.joints[:, :3]

    @property
    def tails(self) -> np.ndarray:
        return self.joints[:, 3:]

    def connectivity_gap(self) -> float:
        """Largest |head_child - tail_parent| over the tree's connectivity pairs."""
        worst = 0.0
        for c, p in self.tree.connectivity_pairs:
            gap = float(np.linalg.norm(self.joints[c, :3] - self.joints[p, 3:]))
            worst = max(worst, gap)
        return worst

    def copy(self, joints: Optional[np.ndarray] = None,
             frame_tag: Optional[str] = None) -> "Skeleton":
        return Skeleton(
            tree=self.tree,
            joints=self.joints.copy() if joints is None else joints,
            frame_tag=self.frame_tag if frame_tag is None else frame_tag,
        )


def tree_to_dict(tree: KinematicTree) -> dict:
    return {
        "parent": [int(p) for p in tree.parent],
        "names": list(tree.names),
        "symmetry_pairs": [list(p) for p in tree.symmetry_pairs],
        "limb_chains": [list(c) for c in tree.limb_chains],
        "connectivity_pairs": [list(p) for p in tree.connectivity_pairs],
    }


def tree_from_dict(d: dict) -> KinematicTree:
    return KinematicTree(
        parent=np.asarray(d["parent"], dtype=np.int64),
        names=tuple(d["names"]),
        symmetry_pairs=tuple((a, b) for a, b in d.get("symmetry_pairs", [])),
        limb_chains=tuple(tuple(c) for c in d.get("limb_chains", [])),
        connectivity_pairs=tuple((a, b) for a, b in d.get("connectivity_pairs", [])),
    )


# ---------------------------------------------------------------------------
# Standard bipedal template
# ---------------------------------------------------------------------------

_CORE = [
    # name, parent name
    ("hips", None),
    ("spine_1", "hips"),
    ("spine_2", "spine_1"),
    ("spine_3", "spine_2"),
    ("neck", "spine_3"),
    ("head", "neck"),
]

_SIDED = [
    # suffixed with _l / _r; parent may itself be sided
    ("shoulder", "spine_3"),
    ("arm", "shoulder"),
    ("forearm", "arm"),
    ("hand", "forearm"),
    ("thigh", "hips"),
    ("shin", "thigh"),
    ("foot", "shin"),
    ("toe", "foot"),
]

_FINGERS = ["thumb", "index", "middle", "ring", "pinky"]

# child head detaches from the parent tail at these junctions (clavicle and
# hip offsets, finger bases fanning out of the palm)
_DETACHED = {"shoulder", "thigh"} | {f"{f}_1" for f in _FINGERS}

# every bone sits in some chain so the parallelism prior sees any joint move
_PARALLEL_CHAINS = [
    ["hips", "spine_1", "spine_2", "spine_3", "neck", "head"],
    ["shoulder", "arm", "forearm", "hand"],
    ["thigh", "shin"],
    ["foot", "toe"],
]


def standard_humanoid(with_fingers: bool) -> KinematicTree:
    """22-bone biped template, or the 52-bone variant with 3-bone fingers.

    Stands in for a production humanoid skeleton; symmetry pairs, limb
    chains and connectivity pairs are populated from the topology.
    """
    names: list[str] = []
    parents: list[str | None] = []
    for name, par in _CORE:
        names.append(name)
        parents.append(par)
    for side in ("l", "r"):
        for name, par in _SIDED:
            par_sided = par if par in dict(_CORE) else f"{par}_{side}"
            names.append(f"{name}_{side}")
            parents.append(par_sided)
        if with_fingers:
            for f in _FINGERS:
                chain_parent = f"hand_{side}"
                for seg in (1, 2, 3):
                    names.append(f"{f}_{seg}_{side}")
                    parents.append(chain_parent)
                    chain_parent = f"{f}_{seg}_{side}"

    idx = {n: i for i, n in enumerate(names)}
    parent = np.array([ROOT if p is None else idx[p] for p in parents], dtype=np.int64)

    symmetry = []
    for n in names:
        if n.endswith("_l"):
            symmetry.append((idx[n], idx[n[:-2] + "_r"]))

    sided_chains = []
    for side in ("l", "r"):
        for c in _PARALLEL_CHAINS:
            if c[0] not in idx:  # sided chain template
                sided_chains.append([f"{n}_{side}" for n in c])
        if with_fingers:
            for f in _FINGERS:
                sided_chains.append([f"{f}_{s}_{side}" for s in (1, 2, 3)])
    limb_chains = tuple(tuple(idx[n] for n in c)
                        for c in ([c for c in _PARALLEL_CHAINS if c[0] in idx] + sided_chains))

    connectivity = []
    for i, n in enumerate(names):
        if parent[i] == ROOT:
            continue
        stem = n[:-2] if n[-2:] in ("_l", "_r") else n
        if stem in _DETACHED:
            continue
        connectivity.append((i, int(parent[i])))

    return KinematicTree(
        parent=parent,
        names=tuple(names),
        symmetry_pairs=tuple(symmetry),
        limb_chains=limb_chains,
        connectivity_pairs=tuple(connectivity),
    )
