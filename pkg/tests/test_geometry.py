import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import blob_mesh, random_rotation
from oracles import brute_force_similarity, gpa_oracle, strict_interior_count
from tbgan.errors import (AlignmentDegenerateError, InputError, NormalizationDegenerateError,
                          UnwrapFoldError)
from tbgan.geometry import (Mesh, SimilarityTransform, compute_vertex_normals,
                            cylindrical_unwrap, gpa_align, icosphere, normalize_corpus_scale,
                            read_obj, similarity_align_pair, uv_signed_areas, write_obj)
from tbgan.synthetic import generate_corpus


# --- similarity alignment -----------------------------------------------------

def test_align_identity(rng):
    m = blob_mesh(rng)
    t, aligned = similarity_align_pair(m, m)
    assert t.scale == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t.translation, 0.0, atol=1e-12)
    assert np.abs(aligned.vertices - m.vertices).max() < 1e-12


def test_align_recovers_rotation_and_scale(rng):
    ref = blob_mesh(rng)
    ry = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
    src = ref.with_vertices(2.0 * ref.vertices @ ry.T)
    t, aligned = similarity_align_pair(src, ref)
    assert t.scale == pytest.approx(0.5, rel=1e-12)
    np.testing.assert_allclose(t.rotation, ry.T, atol=1e-12)
    assert ((aligned.vertices - ref.vertices) ** 2).sum() < 1e-9
    assert t.is_valid()


def test_align_matches_nonlinear_least_squares(rng):
    ref = blob_mesh(rng)
    truth = SimilarityTransform(1.3, random_rotation(rng), rng.standard_normal(3))
    noisy = truth.apply(ref.vertices) + 1e-3 * rng.standard_normal(ref.vertices.shape)
    src = ref.with_vertices(noisy)
    _, aligned = similarity_align_pair(src, ref)
    ours = ((aligned.vertices - ref.vertices) ** 2).sum()
    oracle = brute_force_similarity(src.vertices, ref.vertices)
    assert abs(ours - oracle) < 1e-6
    assert ours <= oracle + 1e-12


def test_align_handles_reflection_candidates(rng):
    ref = blob_mesh(rng)
    mirrored = ref.with_vertices(ref.vertices * np.array([-1.0, 1.0, 1.0]))
    t, _ = similarity_align_pair(mirrored, ref)
    assert np.linalg.det(t.rotation) == pytest.approx(1.0, abs=1e-9)


def test_align_degenerate_source():
    pts = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    faces = np.array([[0, 1, 2]])
    with pytest.raises(AlignmentDegenerateError):
        similarity_align_pair(Mesh(np.zeros((5, 3)), faces), Mesh(pts, faces))
    with pytest.raises(AlignmentDegenerateError):
        similarity_align_pair(Mesh(pts, faces), Mesh(pts + 1.0, faces))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.05, 20.0))
def test_align_exact_for_similarity_images(seed, scale):
    rng = np.random.default_rng(seed)
    ref = blob_mesh(rng, 30)
    truth = SimilarityTransform(scale, random_rotation(rng), 10 * rng.standard_normal(3))
    src = ref.with_vertices(truth.apply(ref.vertices))
    t, aligned = similarity_align_pair(src, ref)
    assert ((aligned.vertices - ref.vertices) ** 2).sum() < 1e-9
    assert t.is_valid()
    recovered = t.compose(truth)
    assert recovered.scale == pytest.approx(1.0, rel=1e-9)


def test_transform_inverse(rng):
    t = SimilarityTransform(2.5, random_rotation(rng), rng.standard_normal(3))
    p = rng.standard_normal((10, 3))
    np.testing.assert_allclose(t.inverse().apply(t.apply(p)), p, atol=1e-12)


# --- GPA ----------------------------------------------------------------------

def test_gpa_identical_meshes(rng):
    m = blob_mesh(rng)
    res = gpa_align([m, m, m])
    assert len(res.residuals) == 1
    assert res.residuals[0] == pytest.approx(0.0, abs=1e-20)
    for t in res.transforms:
        assert t.scale == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(t.translation, 0.0, atol=1e-12)


def test_gpa_similarity_copies_coincide(rng):
    m = blob_mesh(rng)
    copies = [m.with_vertices(SimilarityTransform(
        rng.uniform(0.5, 3), random_rotation(rng), rng.standard_normal(3)).apply(m.vertices))
        for _ in range(3)]
    res = gpa_align(copies)
    for a in res.aligned[1:]:
        assert np.linalg.norm(a.vertices - res.aligned[0].vertices, axis=1).max() < 1e-6


def test_gpa_matches_long_run_oracle(rng):
    base = rng.standard_normal((40, 3))
    meshes = []
    for _ in range(5):
        pts = base + 0.05 * rng.standard_normal(base.shape)
        t = SimilarityTransform(rng.uniform(0.8, 1.2), random_rotation(rng), rng.standard_normal(3))
        meshes.append(Mesh(t.apply(pts), np.array([[0, 1, 2]])))
    res = gpa_align(meshes, max_iters=1000, tol=1e-14)
    oracle = gpa_oracle([m.vertices for m in meshes])
    assert abs(res.residuals[-1] - oracle) < 1e-6


def gpa_residuals_monotone(seed):
    rng = np.random.default_rng(seed)
    n_meshes = int(rng.integers(2, 7))
    base = rng.standard_normal((int(rng.integers(4, 30)), 3))
    noise = rng.uniform(0.01, 0.5)
    meshes = []
    for _ in range(n_meshes):
        t = SimilarityTransform(rng.uniform(0.3, 3), random_rotation(rng), rng.standard_normal(3))
        meshes.append(Mesh(t.apply(base + noise * rng.standard_normal(base.shape)),
                           np.array([[0, 1, 2]])))
    r = np.array(gpa_align(meshes).residuals)
    return bool(np.all(np.diff(r) <= 1e-12 * max(1.0, r[0])))


def test_gpa_residual_monotone_many_corpora():
    assert all(gpa_residuals_monotone(seed) for seed in range(100))


def test_gpa_input_errors(rng):
    m = blob_mesh(rng)
    with pytest.raises(InputError):
        gpa_align([])
    with pytest.raises(InputError):
        gpa_align([m])
    other = Mesh(m.vertices, m.faces, "another")
    with pytest.raises(InputError):
        gpa_align([m, other])


# --- normalization ------------------------------------------------------------

def test_normalize_examples(rng):
    m = blob_mesh(rng)
    m100 = m.with_vertices(100 * m.vertices / np.abs(m.vertices).max())
    (out,), f = normalize_corpus_scale([m100])
    assert f == pytest.approx(0.01)
    assert np.abs(out.vertices).max() == 1.0

    (same,), f = normalize_corpus_scale([out])
    assert f == 1.0
    assert np.array_equal(same.vertices, out.vertices)

    a = m.with_vertices(2 * m.vertices / np.abs(m.vertices).max())
    b = m.with_vertices(4 * m.vertices / np.abs(m.vertices).max())
    (a2, b2), f = normalize_corpus_scale([a, b])
    assert f == 0.25
    assert np.abs(a2.vertices).max() == pytest.approx(0.5)
    assert np.abs(b2.vertices).max() == 1.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), mag=st.floats(1e-3, 1e4))
def test_normalize_idempotent_and_exact(seed, mag):
    rng = np.random.default_rng(seed)
    meshes = [blob_mesh(rng, 10).with_vertices(mag * rng.standard_normal((10, 3)))
              for _ in range(3)]
    once, _ = normalize_corpus_scale(meshes)
    assert max(np.abs(m.vertices).max() for m in once) == 1.0
    twice, f2 = normalize_corpus_scale(once)
    assert f2 == 1.0
    for a, b in zip(once, twice):
        assert np.array_equal(a.vertices, b.vertices)


def test_normalize_degenerate():
    m = Mesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(NormalizationDegenerateError):
        normalize_corpus_scale([m])


# --- normals ------------------------------------------------------------------

def test_plane_normals_exact(plane_mesh):
    n = compute_vertex_normals(plane_mesh)
    assert np.array_equal(n, np.tile([0.0, 0.0, 1.0], (plane_mesh.n_vertices, 1)))


def test_reversed_winding_negates(face_template):
    template, _, _ = face_template
    flipped = Mesh(template.vertices, template.faces[:, ::-1], template.topology_id)
    np.testing.assert_allclose(compute_vertex_normals(flipped),
                               -compute_vertex_normals(template), atol=1e-15)


def test_icosphere_normals_within_two_degrees():
    sphere = icosphere(3)
    assert len(sphere.faces) == 1280
    n = compute_vertex_normals(sphere)
    analytic = sphere.vertices / np.linalg.norm(sphere.vertices, axis=1, keepdims=True)
    angle = np.degrees(np.arccos(np.clip((n * analytic).sum(1), -1, 1)))
    assert angle.max() < 2.0


def test_normals_unit_and_fallback(rng):
    m = blob_mesh(rng)
    verts = np.vstack([m.vertices, [[5.0, 5.0, 5.0]]])   # isolated vertex
    n, bad = compute_vertex_normals(Mesh(verts, m.faces), return_fallback_count=True)
    assert bad == 1
    np.testing.assert_array_equal(n[-1], [0.0, 0.0, 1.0])
    assert np.abs(np.linalg.norm(n, axis=1) - 1).max() < 1e-6


# --- unwrap -------------------------------------------------------------------

def test_unwrap_front_centre():
    # Centroid (0, 0.125, 0.75); the first vertex is straight ahead of it.
    v = np.array([[0.0, 0.0, 1.0], [-1.0, -1.0, 1.0], [1.0, 1.0, 1.0], [0.0, 0.5, 0.0]])
    layout = cylindrical_unwrap(Mesh(v, np.array([[1, 0, 2]])))
    assert layout.uv[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_unwrap_radius_invariance():
    # Point-symmetric about the origin, so the centroid is exactly zero.
    half = np.array([[0.3, 0.2, 1.0], [0.6, 0.2, 2.0], [1.0, 1.0, 0.5]])
    v = np.vstack([half, -half])
    layout = cylindrical_unwrap(Mesh(v, np.array([[0, 1, 2]])))
    np.testing.assert_allclose(layout.uv[0], layout.uv[1], atol=1e-15)


def test_unwrap_template_inside_unit_square_and_no_folds(face_template):
    template, layout, _ = face_template
    assert layout.uv.min() >= 0.0 and layout.uv.max() <= 1.0
    assert np.all(uv_signed_areas(layout, template.faces) > 0)
    count = strict_interior_count(layout.uv, template.faces, 256)
    assert count.max() <= 1


def test_unwrap_all_synthetic_templates_inside(small_grid):
    for seed in range(5):
        meshes, *_ = generate_corpus(3, 2, seed, small_grid)
        res = gpa_align(meshes)
        layout = cylindrical_unwrap(res.consensus)
        assert 0.0 <= layout.uv.min() and layout.uv.max() <= 1.0


def test_unwrap_seam_crossing_raises():
    sphere = icosphere(2)
    with pytest.raises(UnwrapFoldError):
        cylindrical_unwrap(sphere)


# --- OBJ ----------------------------------------------------------------------

def test_obj_round_trip(tmp_path, face_template):
    template, layout, colors = face_template
    normals = compute_vertex_normals(template)
    path = tmp_path / "m.obj"
    write_obj(path, template, layout, normals, colors)
    back, col = read_obj(path, template.topology_id, return_colors=True)
    assert np.array_equal(back.faces, template.faces)
    np.testing.assert_allclose(back.vertices, template.vertices, rtol=1e-7)
    np.testing.assert_allclose(col, colors, rtol=1e-7, atol=1e-8)
    text = path.read_text().splitlines()
    assert any(line.startswith("vt ") for line in text)
    face_line = next(line for line in text if line.startswith("f "))
    assert face_line.count("/") == 6


def test_obj_rejects_polygons(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(InputError):
        read_obj(p)


def test_obj_eight_significant_digits(tmp_path):
    m = Mesh(np.array([[math.pi, 1e-10, 123456789.123], [0, 1, 0], [1, 0, 0]]),
             np.array([[0, 1, 2]]))
    p = tmp_path / "d.obj"
    write_obj(p, m)
    assert p.read_text().splitlines()[0] == "v 3.1415927 1e-10 1.2345679e+08"
