import numpy as np
import pytest

from rigkit.errors import DegenerateInputError, InputError
from rigkit.sampling import (STRATUM_BODY, STRATUM_HAND_LEFT,
                             STRATUM_HAND_RIGHT, SampledShape, TriangleMesh,
                             compute_vertex_normals, fps, hierarchical_fps,
                             hierarchical_sample, read_obj, sample_surface,
                             write_obj)
from rigkit.synthdata import SynthConfig, generate_character


def single_triangle():
    return TriangleMesh(vertices=np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
                        faces=np.array([[0, 1, 2]]))


def test_single_triangle_barycentric():
    shape = sample_surface(single_triangle(), 1000, seed=0)
    p = shape.positions
    assert np.all(p[:, 2] == 0)
    assert np.all(p[:, 0] >= -1e-12) and np.all(p[:, 1] >= -1e-12)
    assert np.all(p[:, 0] + p[:, 1] <= 1 + 1e-12)
    assert np.allclose(shape.bary.sum(axis=1), 1)


def test_area_weighting_binomial():
    # two triangles with area ratio 3:1
    mesh = TriangleMesh(
        vertices=np.array([[0.0, 0, 0], [3, 0, 0], [0, 2, 0],
                           [10, 0, 0], [11, 0, 0], [10, 2, 0]]),
        faces=np.array([[0, 1, 2], [3, 4, 5]]))
    n = 8000
    shape = sample_surface(mesh, n, seed=1)
    big = (shape.face_index == 0).sum()
    p = 0.75
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(big - n * p) < 4 * sigma


def test_sampling_deterministic():
    mesh = generate_character(SynthConfig(), seed=0).character.mesh
    a = sample_surface(mesh, 500, seed=9)
    b = sample_surface(mesh, 500, seed=9)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.normals, b.normals)
    assert np.array_equal(a.face_index, b.face_index)


def test_sampling_normals_unit():
    mesh = generate_character(SynthConfig(), seed=0).character.mesh
    shape = sample_surface(mesh, 400, seed=2)
    assert np.abs(np.linalg.norm(shape.normals, axis=1) - 1).max() < 1e-4


def test_sampling_degenerate_mesh():
    mesh = TriangleMesh(vertices=np.zeros((3, 3)), faces=np.array([[0, 1, 2]]))
    with pytest.raises(DegenerateInputError):
        sample_surface(mesh, 10, seed=0)


# -- farthest point sampling --------------------------------------------------

def test_fps_square_corners():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    sel = fps(pts, 2, start=0)
    # oracle: exhaustive max-min choice from (0,0)
    dists = np.linalg.norm(pts - pts[0], axis=1)
    assert sel[1] == np.argmax(dists) == 3


def test_fps_full_set_permutation(rng):
    pts = rng.standard_normal((17, 3))
    sel = fps(pts, 17, start=4)
    assert sorted(sel.tolist()) == list(range(17))


def test_fps_no_duplicates_and_errors(rng):
    pts = rng.standard_normal((40, 3))
    sel = fps(pts, 15, start=0)
    assert len(set(sel.tolist())) == 15
    with pytest.raises(ValueError):
        fps(pts, 41)
    with pytest.raises(ValueError):
        fps(pts, 5, start=40)


def test_fps_beats_random_subsets(rng):
    # max-min spread of FPS should beat random subsets almost always
    wins = 0
    for trial in range(100):
        pts = rng.standard_normal((200, 3))
        sel = fps(pts, 10, start=0)
        def min_pair(idx):
            sub = pts[idx]
            d = np.linalg.norm(sub[:, None] - sub[None], axis=-1)
            return d[np.triu_indices(len(idx), 1)].min()
        fps_spread = min_pair(sel)
        rand_spread = min_pair(rng.choice(200, size=10, replace=False))
        wins += fps_spread >= rand_spread
    assert wins >= 95


# -- hierarchical sampling ----------------------------------------------------

def test_hierarchical_zero_fraction_matches_uniform():
    mesh = generate_character(SynthConfig(), seed=1).character.mesh
    a = hierarchical_sample(mesh, np.zeros((2, 3)), 0.1, 300, 0.0, seed=3)
    assert a.count == 300
    assert np.all(a.stratum == STRATUM_BODY)


def test_hierarchical_hand_density():
    ch = generate_character(SynthConfig(), seed=1)
    sk = ch.character.skeleton
    tree = ch.tree
    li, ri = tree.index("hand_l"), tree.index("hand_r")
    centers = np.stack([0.5 * (sk.joints[li, :3] + sk.joints[li, 3:]),
                        0.5 * (sk.joints[ri, :3] + sk.joints[ri, 3:])])
    radius = 1.5 * np.linalg.norm(sk.joints[li, 3:] - sk.joints[li, :3])
    shape = hierarchical_sample(ch.character.mesh, centers, radius, 2000, 0.5,
                                seed=5)
    near = (np.linalg.norm(shape.positions - centers[0], axis=1) <= radius) \
        | (np.linalg.norm(shape.positions - centers[1], axis=1) <= radius)
    assert near.mean() >= 0.45
    # stratum budgets exact
    assert (shape.stratum == STRATUM_BODY).sum() == 1000
    assert (shape.stratum == STRATUM_HAND_LEFT).sum() == 500
    assert (shape.stratum == STRATUM_HAND_RIGHT).sum() == 500


def test_hierarchical_fallback_off_surface():
    mesh = generate_character(SynthConfig(), seed=1).character.mesh
    far = np.array([[50.0, 50, 50], [-50, -50, -50]])
    shape = hierarchical_sample(mesh, far, 0.05, 400, 0.5, seed=7)
    assert shape.count == 400
    assert np.all(shape.stratum == STRATUM_BODY)


# -- hierarchical FPS ---------------------------------------------------------

def test_hierarchical_fps_single_stratum(rng):
    pts = rng.standard_normal((100, 3))
    shape = SampledShape(positions=pts)
    sel = hierarchical_fps(shape, 16, {STRATUM_BODY: 1.0})
    assert np.array_equal(sel, fps(pts, 16, start=0))


def test_hierarchical_fps_budgets(rng):
    pts = rng.standard_normal((128, 3))
    stratum = np.zeros(128, dtype=np.int8)
    stratum[64:96] = STRATUM_HAND_LEFT
    stratum[96:] = STRATUM_HAND_RIGHT
    shape = SampledShape(positions=pts, stratum=stratum)
    sel = hierarchical_fps(shape, 64, {STRATUM_BODY: 0.5,
                                       STRATUM_HAND_LEFT: 0.25,
                                       STRATUM_HAND_RIGHT: 0.25})
    labels = stratum[sel]
    assert (labels == STRATUM_BODY).sum() == 32
    assert (labels == STRATUM_HAND_LEFT).sum() == 16
    assert (labels == STRATUM_HAND_RIGHT).sum() == 16
    assert len(set(sel.tolist())) == 64


def test_hierarchical_fps_tiny_stratum_keeps_budget(rng):
    # hands hold <1% of the points yet keep their full budget
    pts = rng.standard_normal((2000, 3))
    stratum = np.zeros(2000, dtype=np.int8)
    stratum[:8] = STRATUM_HAND_LEFT
    stratum[8:16] = STRATUM_HAND_RIGHT
    shape = SampledShape(positions=pts, stratum=stratum)
    sel = hierarchical_fps(shape, 32, {STRATUM_BODY: 0.5,
                                       STRATUM_HAND_LEFT: 0.25,
                                       STRATUM_HAND_RIGHT: 0.25})
    labels = stratum[sel]
    assert (labels == STRATUM_HAND_LEFT).sum() == 8
    assert (labels == STRATUM_HAND_RIGHT).sum() == 8
    assert (labels == STRATUM_BODY).sum() == 16


def test_hierarchical_fps_clamp_reassigns(rng):
    pts = rng.standard_normal((64, 3))
    stratum = np.zeros(64, dtype=np.int8)
    stratum[:4] = STRATUM_HAND_LEFT
    shape = SampledShape(positions=pts, stratum=stratum)
    sel = hierarchical_fps(shape, 32, {STRATUM_BODY: 0.5,
                                       STRATUM_HAND_LEFT: 0.5})
    assert sel.shape[0] == 32
    assert (stratum[sel] == STRATUM_HAND_LEFT).sum() == 4


# -- OBJ I/O -------------------------------------------------------------------

def test_obj_round_trip(tmp_path):
    mesh = generate_character(SynthConfig(), seed=0).character.mesh
    path = tmp_path / "char.obj"
    write_obj(path, mesh)
    back = read_obj(path)
    assert back.vertex_count == mesh.vertex_count
    assert np.array_equal(back.faces, mesh.faces)
    assert np.abs(back.vertices - mesh.vertices).max() < 1e-6
    assert back.vertex_normals is not None


def test_obj_fan_triangulation(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    mesh = read_obj(path)
    assert mesh.face_count == 2
    assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_errors(tmp_path):
    with pytest.raises(InputError):
        read_obj(tmp_path / "missing.obj")
    bad = tmp_path / "bad.obj"
    bad.write_text("v 0 0 0\n")
    with pytest.raises(InputError):
        read_obj(bad)
    oob = tmp_path / "oob.obj"
    oob.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    with pytest.raises(InputError):
        read_obj(oob)


def test_compute_vertex_normals_sphere_like():
    mesh = generate_character(SynthConfig(), seed=0).character.mesh
    nrm = compute_vertex_normals(mesh)
    assert np.abs(np.linalg.norm(nrm, axis=1) - 1).max() < 1e-9
    # capsule normals stored at build time should roughly agree
    dots = np.sum(nrm * mesh.vertex_normals, axis=1)
    assert np.median(dots) > 0.9
