"""Surface point sampling, farthest point sampling, and their hierarchical
(hand-aware) variants, plus minimal OBJ mesh I/O.

All sampling is deterministic under a fixed seed: reruns are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DegenerateInputError, InputError

STRATUM_BODY = 0
STRATUM_HAND_LEFT = 1
STRATUM_HAND_RIGHT = 2
STRATA = (STRATUM_BODY, STRATUM_HAND_LEFT, STRATUM_HAND_RIGHT)

_MIN_FACE_AREA = 1e-12


@dataclass
class TriangleMesh:
    vertices: np.ndarray                      # (V, 3)
    faces: np.ndarray                         # (F, 3) vertex indices
    vertex_normals: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise ValueError("face index out of range")
        self.vertices, self.faces = v, f
        if self.vertex_normals is not None:
            n = np.asarray(self.vertex_normals, dtype=np.float64)
            if n.shape != v.shape:
                raise ValueError("vertex_normals must match vertices")
            self.vertex_normals = n

    @property
    def vertex_count(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def face_count(self) -> int:
        return int(self.faces.shape[0])

    def face_corners(self):
        v = self.vertices
        return v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]

    def face_cross(self) -> np.ndarray:
        a, b, c = self.face_corners()
        return np.cross(b - a, c - a)

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        cr = self.face_cross()
        n = np.linalg.norm(cr, axis=1, keepdims=True)
        return cr / np.maximum(n, _MIN_FACE_AREA)

    def with_vertices(self, vertices: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(vertices=vertices, faces=self.faces,
                            vertex_normals=self.vertex_normals)


@dataclass
class SampledShape:
    """Point sample of a character surface in normalized space.

    stratum labels each point body / left hand / right hand; face_index and
    bary record where on the source mesh each point came from so per-point
    attributes (e.g. blend weights) can be interpolated exactly.
    """

    positions: np.ndarray                     # (N, 3)
    normals: Optional[np.ndarray] = None      # (N, 3) unit
    stratum: Optional[np.ndarray] = None      # (N,) labels from STRATA
    source_vertex: Optional[np.ndarray] = None  # (N,) nearest source vertex
    face_index: Optional[np.ndarray] = None   # (N,)
    bary: Optional[np.ndarray] = None         # (N, 3)

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError("positions must be (N, 3)")
        self.positions = p
        if self.stratum is None:
            self.stratum = np.zeros(p.shape[0], dtype=np.int8)
        else:
            self.stratum = np.asarray(self.stratum, dtype=np.int8)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])

    def stratum_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.stratum == label)


def compute_vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted per-vertex normals from face geometry."""
    acc = np.zeros_like(mesh.vertices)
    cr = mesh.face_cross()
    for axis in range(3):
        np.add.at(acc[:, axis], mesh.faces[:, 0], cr[:, axis])
        np.add.at(acc[:, axis], mesh.faces[:, 1], cr[:, axis])
        np.add.at(acc[:, axis], mesh.faces[:, 2], cr[:, axis])
    ln = np.linalg.norm(acc, axis=1, keepdims=True)
    return acc / np.maximum(ln, 1e-30)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _sample_on_faces(mesh: TriangleMesh, face_ids: np.ndarray, n: int,
                     rng: np.random.Generator) -> SampledShape:
    areas = mesh.face_areas()[face_ids]
    keep = areas > _MIN_FACE_AREA
    face_ids, areas = face_ids[keep], areas[keep]
    if face_ids.size == 0:
        raise DegenerateInputError("no non-degenerate faces to sample")
    probs = areas / areas.sum()
    chosen = face_ids[rng.choice(face_ids.size, size=n, p=probs)]
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    bary = np.stack([1.0 - u - v, u, v], axis=1)

    tri = mesh.faces[chosen]                      # (n, 3)
    corners = mesh.vertices[tri]                  # (n, 3, 3)
    pos = np.einsum("nc,ncj->nj", bary, corners)

    if mesh.vertex_normals is not None:
        nrm = np.einsum("nc,ncj->nj", bary, mesh.vertex_normals[tri])
        ln = np.linalg.norm(nrm, axis=1, keepdims=True)
        bad = ln[:, 0] < 1e-9
        if np.any(bad):
            nrm[bad] = mesh.face_normals()[chosen[bad]]
            ln = np.linalg.norm(nrm, axis=1, keepdims=True)
        nrm = nrm / np.maximum(ln, 1e-30)
    else:
        nrm = mesh.face_normals()[chosen]

    src = tri[np.arange(n), np.argmax(bary, axis=1)]
    return SampledShape(positions=pos, normals=nrm,
                        stratum=np.zeros(n, dtype=np.int8),
                        source_vertex=src, face_index=chosen, bary=bary)


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> SampledShape:
    """Area-weighted uniform surface sampling; all points labeled body."""
    if n < 1:
        raise ValueError("sample count must be >= 1")
    rng = np.random.default_rng(seed)
    return _sample_on_faces(mesh, np.arange(mesh.face_count), n, rng)


def fps(points: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min farthest point sampling; ties break to the lowest index."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not (1 <= m <= n):
        raise ValueError(f"cannot pick {m} points from {n}")
    if not (0 <= start < n):
        raise ValueError("start index out of range")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    # squared distances select the same max-min points and skip the sqrt
    diff = pts - pts[start]
    d = np.einsum("ij,ij->i", diff, diff)
    for i in range(1, m):
        nxt = int(np.argmax(d))  # argmax returns the first (lowest) max index
        chosen[i] = nxt
        diff = pts - pts[nxt]
        np.minimum(d, np.einsum("ij,ij->i", diff, diff), out=d)
    return chosen


def hierarchical_sample(mesh: TriangleMesh, hand_centers: np.ndarray,
                        hand_radius: float, n: int, hand_fraction: float,
                        seed: int) -> SampledShape:
    """Stratified sampling: a body share over the whole surface plus a hand
    share concentrated within hand_radius of each hand center.

    A hand stratum with no surface in range falls back to uniform body points.
    """
    if not (0.0 <= hand_fraction < 1.0):
        raise ValueError("hand_fraction must be in [0, 1)")
    centers = np.asarray(hand_centers, dtype=np.float64).reshape(2, 3)
    n_body = int(np.floor(n * (1.0 - hand_fraction)))
    n_hand = n - n_body
    budgets = [n_body, n_hand // 2, n_hand - n_hand // 2]

    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]

    parts = []
    for label, (center, budget, rng) in zip(
            (STRATUM_HAND_LEFT, STRATUM_HAND_RIGHT),
            [(centers[0], budgets[1], rngs[1]), (centers[1], budgets[2], rngs[2])]):
        if budget == 0:
            continue
        near = np.flatnonzero(np.linalg.norm(centroids - center, axis=1) <= hand_radius)
        ok = near.size > 0 and np.any(mesh.face_areas()[near] > _MIN_FACE_AREA)
        if ok:
            part = _sample_on_faces(mesh, near, budget, rng)
            part.stratum[:] = label
        else:
            # no surface within reach of this hand: plain uniform body points
            part = _sample_on_faces(mesh, np.arange(mesh.face_count), budget, rng)
        parts.append(part)
    if n_body > 0:
        parts.insert(0, _sample_on_faces(mesh, np.arange(mesh.face_count),
                                         n_body, rngs[0]))

    return SampledShape(
        positions=np.concatenate([p.positions for p in parts]),
        normals=np.concatenate([p.normals for p in parts]),
        stratum=np.concatenate([p.stratum for p in parts]),
        source_vertex=np.concatenate([p.source_vertex for p in parts]),
        face_index=np.concatenate([p.face_index for p in parts]),
        bary=np.concatenate([p.bary for p in parts]),
    )


def hierarchical_fps(shape: SampledShape, m: int, fractions) -> np.ndarray:
    """Per-stratum FPS keeping the configured budget split.

    fractions maps stratum label -> fraction (must sum to 1). Budgets that
    exceed a stratum's size are clamped, the remainder reassigned to body.
    """
    frac = {int(k): float(v) for k, v in dict(fractions).items()}
    if abs(sum(frac.values()) - 1.0) > 1e-6:
        raise ValueError("stratum fractions must sum to 1")
    sizes = {s: shape.stratum_indices(s).size for s in STRATA}
    budgets = {s: int(round(m * frac.get(s, 0.0))) for s in STRATA}
    budgets[STRATUM_BODY] += m - sum(budgets.values())  # rounding remainder
    for s in (STRATUM_HAND_LEFT, STRATUM_HAND_RIGHT):
        over = budgets[s] - sizes[s]
        if over > 0:
            budgets[s] -= over
            budgets[STRATUM_BODY] += over
    if budgets[STRATUM_BODY] > sizes[STRATUM_BODY]:
        raise ValueError("body stratum too small for the requested budget")

    out = []
    for s in STRATA:
        if budgets[s] == 0:
            continue
        idx = shape.stratum_indices(s)
        local = fps(shape.positions[idx], budgets[s], start=0)
        out.append(idx[local])
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# OBJ I/O (v / vn / f records; polygons fan-triangulated)
# ---------------------------------------------------------------------------

def read_obj(path) -> TriangleMesh:
    verts: list[list[float]] = []
    norms: list[list[float]] = []
    tris: list[tuple] = []
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise InputError(f"cannot read mesh file {path}: {e}") from e

    for line_no, raw in enumerate(text.splitlines(), 1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif tag == "vn":
            norms.append([float(x) for x in parts[1:4]])
        elif tag == "f":
            refs = []
            for tok in parts[1:]:
                fields = tok.split("/")
                vi = int(fields[0])
                ni = int(fields[2]) if len(fields) >= 3 and fields[2] else 0
                refs.append((vi, ni))
            if len(refs) < 3:
                raise InputError(f"{path}:{line_no}: face with <3 vertices")
            for a in range(1, len(refs) - 1):
                tris.append((refs[0], refs[a], refs[a + 1]))

    if not verts or not tris:
        raise InputError(f"{path}: no usable geometry")
    v = np.array(verts, dtype=np.float64)

    def resolve(i, count):
        j = i - 1 if i > 0 else count + i
        if not (0 <= j < count):
            raise InputError(f"{path}: face index {i} out of range")
        return j

    faces = np.array([[resolve(r[0], len(verts)) for r in tri] for tri in tris],
                     dtype=np.int64)

    vertex_normals = None
    if norms and all(r[1] != 0 for tri in tris for r in tri):
        acc = np.zeros_like(v)
        nrm = np.array(norms, dtype=np.float64)
        for tri in tris:
            for vi, ni in tri:
                acc[resolve(vi, len(verts))] += nrm[resolve(ni, len(norms))]
        ln = np.linalg.norm(acc, axis=1, keepdims=True)
        good = ln[:, 0] > 1e-9
        if np.all(good):
            vertex_normals = acc / ln

    return TriangleMesh(vertices=v, faces=faces, vertex_normals=vertex_normals)


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    if mesh.vertex_normals is not None:
        lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertex_normals]
        lines += [f"f {a+1}//{a+1} {b+1}//{b+1} {c+1}//{c+1}"
                  for a, b, c in mesh.faces]
    else:
        lines += [f"f {a+1} {b+1} {c+1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")
