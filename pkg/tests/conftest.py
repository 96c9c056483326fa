import numpy as np
import pytest

from avatarsdf.body import BodyParams, generate_test_body
from avatarsdf.capsules import BodySpec
from avatarsdf import mesh as meshmod


@pytest.fixture(scope="session")
def body():
    return generate_test_body()


@pytest.fixture(scope="session")
def mini_body():
    # coarse variant for tests where geometry fidelity is irrelevant
    return generate_test_body(BodySpec(resolution=16))


@pytest.fixture(scope="session")
def rest_params(body):
    return BodyParams.rest(body.n_joints, body.n_shapes)


def make_icosphere(subdivisions: int):
    """Subdivided icosahedron on the unit sphere (test oracle geometry)."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        vlist = list(verts)
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                vlist.append(m / np.linalg.norm(m))
                cache[key] = len(vlist) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(vlist)
        verts /= np.linalg.norm(verts, axis=1, keepdims=True)
        faces = np.array(new_faces)
    return verts, faces


@pytest.fixture(scope="session")
def icosphere4():
    verts, faces = make_icosphere(4)
    return meshmod.TriMesh(verts, faces)


@pytest.fixture(scope="session")
def icosphere4_index(icosphere4):
    return meshmod.build_index(icosphere4)


def ray_parity_inside(mesh, points, direction=(0.12345, 0.54321, 0.83211)):
    """Crossing-parity inside test, independent of pseudo-normal signs."""
    d = np.asarray(direction, dtype=np.float64)
    d /= np.linalg.norm(d)
    v = mesh.vertices
    tri = mesh.triangles
    a, b, c = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    inside = np.zeros(len(points), dtype=bool)
    for i, p in enumerate(np.atleast_2d(points)):
        # Moller-Trumbore against every triangle
        e1 = b - a
        e2 = c - a
        h = np.cross(np.broadcast_to(d, e2.shape), e2)
        det = np.einsum("ij,ij->i", e1, h)
        ok = np.abs(det) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = p - a
        u = np.einsum("ij,ij->i", s, h) * inv
        q = np.cross(s, e1)
        w = (q @ d) * inv
        tpar = np.einsum("ij,ij->i", e2, q) * inv
        hits = ok & (u >= 0) & (u <= 1) & (w >= 0) & (u + w <= 1) & (tpar > 1e-10)
        inside[i] = (hits.sum() % 2) == 1
    return inside
