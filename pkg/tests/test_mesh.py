import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbfpdm.errors import MeshError
from rbfpdm.mesh import (TriangleMesh, closest_point_on_triangles, icosphere, load_mesh, save_mesh,
                         unit_cube, winding_number)


def brute_closest(points, mesh):
    """Closest point by scanning every triangle with a dense barycentric search + exact edges."""
    tri = mesh.vertices[mesh.faces]
    best = np.full(len(points), np.inf)
    for k, p in enumerate(points):
        # exact per-triangle projection computed independently via a small QP on the simplex
        a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
        d = np.full(len(tri), np.inf)
        # interior: solve least squares for barycentrics
        e0, e1 = b - a, c - a
        m = np.stack([e0, e1], axis=2)
        rhs = p - a
        uv = np.linalg.solve(np.einsum("fki,fkj->fij", m, m), np.einsum("fki,fk->fi", m, rhs)[..., None])[..., 0]
        inside = (uv[:, 0] >= 0) & (uv[:, 1] >= 0) & (uv.sum(1) <= 1)
        q = a + uv[:, :1] * e0 + uv[:, 1:] * e1
        d[inside] = np.linalg.norm(p - q[inside], axis=1)
        for s, t in ((a, b), (b, c), (c, a)):
            seg = t - s
            w = np.clip(np.einsum("fi,fi->f", p - s, seg) / np.einsum("fi,fi->f", seg, seg), 0, 1)
            d = np.minimum(d, np.linalg.norm(p - (s + w[:, None] * seg), axis=1))
        best[k] = d.min()
    return best


def test_unit_cube_is_valid():
    m = unit_cube()
    assert m.n_vertices == 8 and m.n_faces == 12
    assert np.isclose(m.volume, 1.0)
    assert np.allclose(np.linalg.norm(m.normals, axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("n", [0, 1, 2, 3])
def test_icosphere_counts(n):
    m = icosphere(n)
    assert m.n_vertices == 10 * 4 ** n + 2
    assert m.n_faces == 20 * 4 ** n


def test_obj_round_trip(tmp_path):
    m = icosphere(2, radius=3.0, center=(1, 2, 3))
    save_mesh(m, tmp_path / "s.obj")
    back = load_mesh(tmp_path / "s.obj")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.faces, m.faces)


def test_ply_round_trip(tmp_path):
    m = unit_cube()
    save_mesh(m, tmp_path / "c.ply")
    back = load_mesh(tmp_path / "c.ply")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.faces, m.faces)


def test_cube_obj_file(tmp_path):
    text = "\n".join(["v 0 0 0", "v 1 0 0", "v 1 1 0", "v 0 1 0", "v 0 0 1", "v 1 0 1", "v 1 1 1",
                      "v 0 1 1", "f 1 3 2", "f 1 4 3", "f 5 6 7", "f 5 7 8", "f 1 2 6", "f 1 6 5",
                      "f 3 4 8", "f 3 8 7", "f 2 3 7", "f 2 7 6", "f 1 5 8", "f 1 8 4"])
    (tmp_path / "cube.obj").write_text(text + "\n")
    m = load_mesh(tmp_path / "cube.obj")
    assert m.n_vertices == 8 and m.volume > 0


def test_deleted_face_reports_open_boundary():
    m = icosphere(1)
    with pytest.raises(MeshError, match="open boundary"):
        TriangleMesh.from_arrays(m.vertices, m.faces[1:])


def test_non_manifold_edge_rejected():
    m = unit_cube()
    extra = np.vstack([m.faces, [[0, 1, 2]], [[0, 2, 1]]])
    with pytest.raises(MeshError, match="non-manifold"):
        TriangleMesh.from_arrays(m.vertices, extra)


def test_inconsistent_winding_rejected():
    m = unit_cube()
    f = m.faces.copy()
    f[0] = f[0][[0, 2, 1]]
    with pytest.raises(MeshError):
        TriangleMesh.from_arrays(m.vertices, f)


def test_degenerate_face_rejected():
    v = unit_cube().vertices.copy()
    v[2] = v[1]
    with pytest.raises(MeshError):
        TriangleMesh.from_arrays(v, unit_cube().faces)


def test_inward_winding_is_flipped():
    m = icosphere(1)
    flipped = TriangleMesh.from_arrays(m.vertices, m.faces[:, [0, 2, 1]])
    assert flipped.volume > 0


def test_unsupported_and_missing_files(tmp_path):
    with pytest.raises(MeshError, match="not found"):
        load_mesh(tmp_path / "nope.obj")
    (tmp_path / "x.stl").write_text("solid")
    with pytest.raises(MeshError, match="unsupported"):
        load_mesh(tmp_path / "x.stl")
    (tmp_path / "bad.obj").write_text("v 0 0\nf 1 2 3\n")
    with pytest.raises(MeshError):
        load_mesh(tmp_path / "bad.obj")


def test_closest_points_match_brute_force(rng):
    m = icosphere(1, radius=2.0)
    pts = rng.normal(size=(60, 3)) * 2.0
    d, q, f, _ = m.proximity.closest_points(pts)
    assert np.allclose(d, brute_closest(pts, m), atol=1e-10)
    assert np.allclose(np.linalg.norm(pts - q, axis=1), d, atol=1e-10)


def test_closest_point_regions():
    a, b, c = np.zeros((1, 3)), np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]])
    q, region = closest_point_on_triangles(np.array([[0.2, 0.2, 1.0]]), a, b, c)
    assert np.allclose(q, [[0.2, 0.2, 0.0]])
    q, _ = closest_point_on_triangles(np.array([[-1.0, -1.0, 0.0]]), a, b, c)
    assert np.allclose(q, a)


def test_signed_distance_sign_matches_winding_number(rng):
    m = icosphere(2)
    pts = rng.uniform(-1.3, 1.3, size=(200, 3))
    sd = m.proximity.signed_distance(pts)
    keep = np.abs(sd) > 1e-3
    w = winding_number(m, pts[keep])
    assert np.array_equal(sd[keep] < 0, w > 0.5)


def test_winding_number_values():
    m = unit_cube()
    assert np.allclose(winding_number(m, [[0.5, 0.5, 0.5], [2, 2, 2]]), [1.0, 0.0], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_sphere_signed_distance_property(x, y, z):
    m = icosphere(3)
    p = np.array([[x, y, z]])
    r = np.linalg.norm(p)
    # polyhedral sphere lies inside the true sphere, within its chord sag
    sag = 1 - np.cos(0.2)
    assert abs(m.proximity.signed_distance(p)[0] - (r - 1)) <= sag + 1e-9
