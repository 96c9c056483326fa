"""Triangle-mesh spatial queries.

Provides the mesh container with angle-weighted pseudo-normals, a BVH for
exact closest-point/signed-distance queries, a KD-tree for vertex KNN, and
isosurface extraction.  Signs come from pseudo-normals (robust at edges and
vertices); ray-parity is only used by tests as an independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange
from scipy.spatial import cKDTree

from .errors import ParameterError

# region codes returned by the point-triangle kernel
REGION_FACE = 0
REGION_VERTS = (1, 2, 3)          # closest to vertex A / B / C
REGION_EDGES = (4, 5, 6)          # closest to edge AB / AC / BC
_EDGE_CORNERS = {4: (0, 1), 5: (0, 2), 6: (1, 2)}


@njit(cache=True)
def _closest_on_triangle(a, b, c, p):
    """Closest point on triangle (a,b,c) to p, with Voronoi region code.

    Region decomposition after Ericson, "Real-Time Collision Detection":
    the seven cases (3 vertices, 3 edges, face interior) are resolved
    exactly, no iterative projection.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab[0] * ap[0] + ab[1] * ap[1] + ab[2] * ap[2]
    d2 = ac[0] * ap[0] + ac[1] * ap[1] + ac[2] * ap[2]
    if d1 <= 0.0 and d2 <= 0.0:
        return a.copy(), 1

    bp = p - b
    d3 = ab[0] * bp[0] + ab[1] * bp[1] + ab[2] * bp[2]
    d4 = ac[0] * bp[0] + ac[1] * bp[1] + ac[2] * bp[2]
    if d3 >= 0.0 and d4 <= d3:
        return b.copy(), 2

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a + v * ab, 4

    cp = p - c
    d5 = ab[0] * cp[0] + ab[1] * cp[1] + ab[2] * cp[2]
    d6 = ac[0] * cp[0] + ac[1] * cp[1] + ac[2] * cp[2]
    if d6 >= 0.0 and d5 <= d6:
        return c.copy(), 3

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a + w * ac, 5

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b), 6

    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + v * ab + w * ac, 0


@njit(cache=True)
def _bbox_d2(bmin, bmax, p):
    d2 = 0.0
    for k in range(3):
        if p[k] < bmin[k]:
            d2 += (bmin[k] - p[k]) ** 2
        elif p[k] > bmax[k]:
            d2 += (p[k] - bmax[k]) ** 2
    return d2


@njit(cache=True, parallel=True)
def _bvh_query(tri_a, tri_b, tri_c, node_min, node_max, node_left,
               node_right, node_start, node_count, tri_order, queries,
               out_tri, out_point, out_region, out_d2):
    for qi in prange(queries.shape[0]):
        p = queries[qi]
        best_d2 = np.inf
        best_tri = -1
        best_region = 0
        best_point = np.zeros(3)
        stack = np.empty(128, dtype=np.int64)
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _bbox_d2(node_min[node], node_max[node], p) > best_d2:
                continue
            if node_count[node] > 0:
                start = node_start[node]
                for i in range(node_count[node]):
                    t = tri_order[start + i]
                    q, region = _closest_on_triangle(tri_a[t], tri_b[t], tri_c[t], p)
                    d2 = (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2
                    if d2 < best_d2 or (d2 == best_d2 and t < best_tri):
                        best_d2 = d2
                        best_tri = t
                        best_region = region
                        best_point = q
            else:
                left = node_left[node]
                right = node_right[node]
                dl = _bbox_d2(node_min[left], node_max[left], p)
                dr = _bbox_d2(node_min[right], node_max[right], p)
                # push farther child first so the nearer one is popped next
                if dl <= dr:
                    if dr <= best_d2:
                        stack[sp] = right
                        sp += 1
                    if dl <= best_d2:
                        stack[sp] = left
                        sp += 1
                else:
                    if dl <= best_d2:
                        stack[sp] = left
                        sp += 1
                    if dr <= best_d2:
                        stack[sp] = right
                        sp += 1
        out_tri[qi] = best_tri
        out_point[qi] = best_point
        out_region[qi] = best_region
        out_d2[qi] = best_d2


@njit(cache=True, parallel=True)
def _two_best_query(tri_a, tri_b, tri_c, queries, out_d1, out_d2):
    # distances to the closest and second-closest distinct triangles
    for qi in prange(queries.shape[0]):
        p = queries[qi]
        best = np.inf
        second = np.inf
        for t in range(tri_a.shape[0]):
            q, _ = _closest_on_triangle(tri_a[t], tri_b[t], tri_c[t], p)
            d2 = (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2
            if d2 < best:
                second = best
                best = d2
            elif d2 < second:
                second = d2
        out_d1[qi] = np.sqrt(best)
        out_d2[qi] = np.sqrt(second)


def closest_two_triangle_distances(index: SpatialIndex, points: np.ndarray):
    """(d1, d2): distance to the nearest triangle and to the runner-up.

    Used to detect proximity to the medial axis (d2 - d1 small away from
    shared edges); brute force over triangles, exact.
    """
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    d1 = np.empty(len(points))
    d2 = np.empty(len(points))
    _two_best_query(index._tri_a, index._tri_b, index._tri_c, points, d1, d2)
    return d1, d2


@njit(cache=True, parallel=True)
def _brute_query(tri_a, tri_b, tri_c, queries, out_tri, out_point,
                 out_region, out_d2):
    for qi in prange(queries.shape[0]):
        p = queries[qi]
        best_d2 = np.inf
        best_tri = -1
        best_region = 0
        best_point = np.zeros(3)
        for t in range(tri_a.shape[0]):
            q, region = _closest_on_triangle(tri_a[t], tri_b[t], tri_c[t], p)
            d2 = (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2
            if d2 < best_d2 or (d2 == best_d2 and t < best_tri):
                best_d2 = d2
                best_tri = t
                best_region = region
                best_point = q
        out_tri[qi] = best_tri
        out_point[qi] = best_point
        out_region[qi] = best_region
        out_d2[qi] = best_d2


class TriMesh:
    """Indexed triangle mesh with unit normals and pseudo-normals.

    Construction welds exactly duplicated vertices and, with ``clean=True``,
    drops zero-area triangles so downstream normal computations stay finite.
    Instances are immutable after construction and safe to share across
    threads.
    """

    def __init__(self, vertices, triangles, clean: bool = True):
        vertices = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64).reshape(-1, 3))
        triangles = np.ascontiguousarray(np.asarray(triangles, dtype=np.int64).reshape(-1, 3))
        if not np.all(np.isfinite(vertices)):
            raise ParameterError("mesh vertices must be finite")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ParameterError("triangle index out of range")
        if clean and len(vertices):
            vertices, triangles = _weld(vertices, triangles)
        self.vertices = vertices
        self.triangles = triangles
        self._compute_normals()
        self.vertices.setflags(write=False)
        self.triangles.setflags(write=False)

    def _compute_normals(self):
        v, t = self.vertices, self.triangles
        if len(t) == 0:
            self.face_normals = np.zeros((0, 3))
            self.face_areas = np.zeros(0)
            self.vertex_normals = np.zeros((len(v), 3))
            self.edges = np.zeros((0, 2), dtype=np.int64)
            self.edge_normals = np.zeros((0, 3))
            self._edge_keys = np.zeros(0, dtype=np.int64)
            return
        e1 = v[t[:, 1]] - v[t[:, 0]]
        e2 = v[t[:, 2]] - v[t[:, 0]]
        n = np.cross(e1, e2)
        norm = np.linalg.norm(n, axis=1)
        self.face_areas = 0.5 * norm
        safe = np.maximum(norm, 1e-300)
        self.face_normals = n / safe[:, None]

        # angle-weighted vertex normals
        vn = np.zeros_like(v)
        for c in range(3):
            a = v[t[:, c]]
            b = v[t[:, (c + 1) % 3]] - a
            d = v[t[:, (c + 2) % 3]] - a
            nb = np.linalg.norm(b, axis=1)
            nd = np.linalg.norm(d, axis=1)
            cosang = np.einsum("ij,ij->i", b, d) / np.maximum(nb * nd, 1e-300)
            ang = np.arccos(np.clip(cosang, -1.0, 1.0))
            np.add.at(vn, t[:, c], ang[:, None] * self.face_normals)
        self.vertex_normals = vn / np.maximum(np.linalg.norm(vn, axis=1), 1e-300)[:, None]

        # per-edge pseudo-normals: sum of incident face normals
        pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        pairs = np.sort(pairs, axis=1)
        keys = pairs[:, 0] * len(v) + pairs[:, 1]
        order = np.argsort(keys, kind="stable")
        ukeys, inverse = np.unique(keys, return_inverse=True)
        en = np.zeros((len(ukeys), 3))
        np.add.at(en, inverse, np.tile(self.face_normals, (3, 1)))
        self.edges = np.stack([ukeys // len(v), ukeys % len(v)], axis=1)
        self.edge_normals = en / np.maximum(np.linalg.norm(en, axis=1), 1e-300)[:, None]
        self._edge_keys = ukeys
        self._edge_face_count = np.bincount(inverse, minlength=len(ukeys))
        del order

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def is_watertight(self) -> bool:
        """True when every edge is shared by exactly two triangles."""
        if len(self.triangles) == 0:
            return False
        return bool(np.all(self._edge_face_count == 2))

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges) + self.n_triangles

    def bounds(self):
        if self.n_vertices == 0:
            raise ParameterError("empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def edge_normal_lookup(self, vi: np.ndarray, vj: np.ndarray) -> np.ndarray:
        """Pseudo-normals for the edges (vi, vj); vertex order irrelevant."""
        lo = np.minimum(vi, vj)
        hi = np.maximum(vi, vj)
        keys = lo * len(self.vertices) + hi
        pos = np.searchsorted(self._edge_keys, keys)
        return self.edge_normals[pos]


def _weld(vertices, triangles):
    uniq, index, inverse = np.unique(vertices, axis=0, return_index=True, return_inverse=True)
    # keep first-occurrence order so indices stay stable
    order = np.argsort(index, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    vertices = uniq[order]
    triangles = rank[inverse.reshape(-1)][triangles]
    # drop combinatorially degenerate and zero-area faces
    ok = (triangles[:, 0] != triangles[:, 1]) & (triangles[:, 1] != triangles[:, 2]) \
        & (triangles[:, 0] != triangles[:, 2])
    triangles = triangles[ok]
    if len(triangles):
        e1 = vertices[triangles[:, 1]] - vertices[triangles[:, 0]]
        e2 = vertices[triangles[:, 2]] - vertices[triangles[:, 0]]
        area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
        triangles = triangles[area2 > 1e-14]
    return np.ascontiguousarray(vertices), np.ascontiguousarray(triangles)


@dataclass(frozen=True)
class ClosestPointResult:
    """Globally nearest surface point for one query."""
    point: np.ndarray
    triangle: int
    barycentric: np.ndarray
    distance: float
    region: str  # 'face' | 'edge' | 'vertex'


@dataclass
class SpatialIndex:
    """BVH over triangles plus a KD-tree over vertices.

    Queries through the index return exactly what a brute-force scan over
    all triangles returns (ties broken toward the lowest triangle id).
    Immutable after build; all queries are re-entrant.
    """
    mesh: TriMesh
    _tri_a: np.ndarray = field(repr=False, default=None)
    _tri_b: np.ndarray = field(repr=False, default=None)
    _tri_c: np.ndarray = field(repr=False, default=None)
    _node_min: np.ndarray = field(repr=False, default=None)
    _node_max: np.ndarray = field(repr=False, default=None)
    _node_left: np.ndarray = field(repr=False, default=None)
    _node_right: np.ndarray = field(repr=False, default=None)
    _node_start: np.ndarray = field(repr=False, default=None)
    _node_count: np.ndarray = field(repr=False, default=None)
    _tri_order: np.ndarray = field(repr=False, default=None)
    kdtree: cKDTree = field(repr=False, default=None)


def build_index(mesh: TriMesh, leaf_size: int = 4) -> SpatialIndex:
    """Build the BVH + KD-tree index for a non-empty mesh."""
    if mesh.n_triangles == 0 or mesh.n_vertices == 0:
        raise ParameterError("cannot build a spatial index over an empty mesh")
    v, t = mesh.vertices, mesh.triangles
    tri_a = np.ascontiguousarray(v[t[:, 0]])
    tri_b = np.ascontiguousarray(v[t[:, 1]])
    tri_c = np.ascontiguousarray(v[t[:, 2]])
    lo = np.minimum(np.minimum(tri_a, tri_b), tri_c)
    hi = np.maximum(np.maximum(tri_a, tri_b), tri_c)
    centroids = (tri_a + tri_b + tri_c) / 3.0

    node_min, node_max, node_left, node_right = [], [], [], []
    node_start, node_count = [], []
    order = np.arange(len(t))

    def add_node():
        node_min.append(None)
        node_max.append(None)
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(0)
        node_count.append(0)
        return len(node_min) - 1

    def build(idx, start, count):
        sel = order[start:start + count]
        node_min[idx] = lo[sel].min(axis=0)
        node_max[idx] = hi[sel].max(axis=0)
        if count <= leaf_size:
            node_start[idx] = start
            node_count[idx] = count
            return
        cen = centroids[sel]
        axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
        local = np.argsort(cen[:, axis], kind="stable")
        order[start:start + count] = sel[local]
        half = count // 2
        li = add_node()
        ri = add_node()
        node_left[idx] = li
        node_right[idx] = ri
        build(li, start, half)
        build(ri, start + half, count - half)

    root = add_node()
    build(root, 0, len(t))

    return SpatialIndex(
        mesh=mesh,
        _tri_a=tri_a, _tri_b=tri_b, _tri_c=tri_c,
        _node_min=np.ascontiguousarray(np.array(node_min)),
        _node_max=np.ascontiguousarray(np.array(node_max)),
        _node_left=np.array(node_left, dtype=np.int64),
        _node_right=np.array(node_right, dtype=np.int64),
        _node_start=np.array(node_start, dtype=np.int64),
        _node_count=np.array(node_count, dtype=np.int64),
        _tri_order=np.ascontiguousarray(order),
        kdtree=cKDTree(v),
    )


def _morton_order(points: np.ndarray) -> np.ndarray:
    """Sort key along a Z-order curve; coherent queries traverse the same
    BVH subtrees, which roughly halves query time on large batches."""
    lo = points.min(axis=0)
    span = np.maximum(points.max(axis=0) - lo, 1e-12)
    q = ((points - lo) / span * 1023).astype(np.uint64)
    code = np.zeros(len(points), dtype=np.uint64)
    for bit in range(10):
        for axis in range(3):
            code |= ((q[:, axis] >> np.uint64(bit)) & np.uint64(1)) \
                << np.uint64(3 * bit + axis)
    return np.argsort(code, kind="stable")


def _query_raw(index: SpatialIndex, points: np.ndarray, brute: bool = False):
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    if not np.all(np.isfinite(points)):
        raise ParameterError("query points must be finite")
    n = len(points)
    out_tri = np.empty(n, dtype=np.int64)
    out_point = np.empty((n, 3))
    out_region = np.empty(n, dtype=np.int64)
    out_d2 = np.empty(n)
    if brute:
        _brute_query(index._tri_a, index._tri_b, index._tri_c, points,
                     out_tri, out_point, out_region, out_d2)
    else:
        order = _morton_order(points) if n > 512 else None
        q = np.ascontiguousarray(points[order]) if order is not None else points
        _bvh_query(index._tri_a, index._tri_b, index._tri_c,
                   index._node_min, index._node_max, index._node_left,
                   index._node_right, index._node_start, index._node_count,
                   index._tri_order, q, out_tri, out_point, out_region, out_d2)
        if order is not None:
            inv = np.empty_like(order)
            inv[order] = np.arange(n)
            out_tri = out_tri[inv]
            out_point = out_point[inv]
            out_region = out_region[inv]
            out_d2 = out_d2[inv]
    return out_tri, out_point, out_region, np.sqrt(np.maximum(out_d2, 0.0))


def closest_points(index: SpatialIndex, points: np.ndarray, brute: bool = False):
    """Batch closest-point query: (triangle ids, surface points, region codes, distances)."""
    return _query_raw(index, points, brute=brute)


def _barycentric(index, tri, q):
    a = index._tri_a[tri]
    b = index._tri_b[tri]
    c = index._tri_c[tri]
    ab, ac, aq = b - a, c - a, q - a
    d00 = ab @ ab
    d01 = ab @ ac
    d11 = ac @ ac
    d20 = aq @ ab
    d21 = aq @ ac
    den = d00 * d11 - d01 * d01
    if den <= 0:
        return np.array([1.0, 0.0, 0.0])
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    bc = np.array([1.0 - v - w, v, w])
    return np.clip(bc, 0.0, 1.0) / max(np.clip(bc, 0.0, 1.0).sum(), 1e-300)


def closest_point(index: SpatialIndex, point) -> ClosestPointResult:
    """Globally nearest surface point; ties resolved to the lowest triangle id."""
    tri, q, region, dist = _query_raw(index, np.asarray(point, dtype=np.float64))
    region = int(region[0])
    tag = "face" if region == REGION_FACE else ("vertex" if region in REGION_VERTS else "edge")
    return ClosestPointResult(
        point=q[0],
        triangle=int(tri[0]),
        barycentric=_barycentric(index, int(tri[0]), q[0]),
        distance=float(dist[0]),
        region=tag,
    )


def _region_normals(index: SpatialIndex, tri, region):
    """Pseudo-normal for each (triangle, region) pair of a query result."""
    mesh = index.mesh
    normals = mesh.face_normals[tri].copy()
    for code, corner in zip(REGION_VERTS, range(3)):
        m = region == code
        if np.any(m):
            normals[m] = mesh.vertex_normals[mesh.triangles[tri[m], corner]]
    for code, (ci, cj) in _EDGE_CORNERS.items():
        m = region == code
        if np.any(m):
            vi = mesh.triangles[tri[m], ci]
            vj = mesh.triangles[tri[m], cj]
            normals[m] = mesh.edge_normal_lookup(vi, vj)
    return normals


def signed_distances(index: SpatialIndex, points: np.ndarray, brute: bool = False) -> np.ndarray:
    """Signed distance to the mesh surface, negative inside.

    |result| equals the unsigned closest distance exactly; the sign is the
    sign of (query - foot point) . pseudo-normal of the closest region.
    Valid signs require a watertight mesh.
    """
    tri, q, region, dist = _query_raw(index, points, brute=brute)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    normals = _region_normals(index, tri, region)
    side = np.einsum("ij,ij->i", points - q, normals)
    return np.where(side < 0.0, -dist, dist)


def signed_distance(index: SpatialIndex, point) -> float:
    return float(signed_distances(index, np.asarray(point, dtype=np.float64))[0])


def signed_distance_with_gradient(index: SpatialIndex, points: np.ndarray):
    """Signed distances plus their analytic gradients.

    The gradient of a distance field is the unit vector from the foot point
    to the query, flipped inside; on the surface itself (distance ~ 0) the
    region pseudo-normal is substituted.
    """
    tri, q, region, dist = _query_raw(index, points)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    normals = _region_normals(index, tri, region)
    side = np.einsum("ij,ij->i", points - q, normals)
    sd = np.where(side < 0.0, -dist, dist)
    grad = np.zeros_like(points)
    far = dist > 1e-12
    grad[far] = (points[far] - q[far]) / dist[far, None] * np.sign(sd[far])[:, None]
    grad[~far] = normals[~far]
    return sd, grad


def knn_vertices(index: SpatialIndex, point, k: int):
    """k nearest mesh vertices: (ids, distances) ascending, ties by id."""
    nv = index.mesh.n_vertices
    if not (1 <= k <= nv):
        raise ParameterError(f"k must be in [1, {nv}], got {k}")
    point = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(point)):
        raise ParameterError("query point must be finite")
    kq = min(k + 8, nv)  # slack so exact-distance ties at the cut resolve by id
    dist, ids = index.kdtree.query(point, k=kq)
    dist = np.atleast_1d(dist)
    ids = np.atleast_1d(ids)
    order = np.lexsort((ids, dist))
    return ids[order][:k].astype(np.int64), dist[order][:k]


def knn_vertices_batch(index: SpatialIndex, points: np.ndarray, k: int):
    """Vectorized nearest-vertex query (no tie slack; used on random data)."""
    nv = index.mesh.n_vertices
    if not (1 <= k <= nv):
        raise ParameterError(f"k must be in [1, {nv}], got {k}")
    dist, ids = index.kdtree.query(np.asarray(points, dtype=np.float64), k=k)
    if k == 1:
        return ids.reshape(-1, 1).astype(np.int64), np.asarray(dist).reshape(-1, 1)
    return ids.astype(np.int64), dist


def marching_cubes(fn, resolution, bounds, iso: float = 0.0) -> TriMesh:
    """Extract the iso-surface of a scalar field callable over a box.

    Args:
        fn: callable mapping an (n, 3) array of points to (n,) field values.
        resolution: node count per axis (int, or per-axis 3-sequence); >= 2.
        bounds: (min, max) corners of the sampling box.
        iso: level to extract.

    Returns a welded TriMesh; an empty mesh when the field does not cross
    the level inside the box.
    """
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,)).copy()
    if np.any(res < 2):
        raise ParameterError("marching cubes needs at least 2 nodes per axis")
    bmin = np.asarray(bounds[0], dtype=np.float64).reshape(3)
    bmax = np.asarray(bounds[1], dtype=np.float64).reshape(3)
    if np.any(bmax <= bmin):
        raise ParameterError("bounds must have positive extent")
    axes = [np.linspace(bmin[i], bmax[i], res[i]) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    values = np.asarray(fn(grid), dtype=np.float64).reshape(tuple(res))
    if not np.all(np.isfinite(values)):
        raise ParameterError("field is not finite on the sampling grid")
    if values.min() > iso or values.max() < iso:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    from skimage import measure

    spacing = (bmax - bmin) / (res - 1)
    verts, faces, _, _ = measure.marching_cubes(values, level=iso, spacing=tuple(spacing))
    return TriMesh(verts + bmin, faces.astype(np.int64))


def save_obj(mesh: TriMesh, path) -> None:
    """Write an ASCII OBJ (positions, faces, vertex normals; 9 significant digits)."""
    with open(path, "w", encoding="ascii") as f:
        f.write("# avatarsdf mesh\n")
        for v in mesh.vertices:
            f.write("v %.9g %.9g %.9g\n" % (v[0], v[1], v[2]))
        for n in mesh.vertex_normals:
            f.write("vn %.9g %.9g %.9g\n" % (n[0], n[1], n[2]))
        for t in mesh.triangles:
            f.write("f %d %d %d\n" % (t[0] + 1, t[1] + 1, t[2] + 1))


def load_obj(path) -> TriMesh:
    """Read positions and triangular faces from an OBJ file."""
    from .errors import MalformedFileError

    verts, faces = [], []
    with open(path, "r", encoding="ascii") as f:
        for line_no, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    if len(parts) < 4:
                        raise MalformedFileError(f"{path}:{line_no}: vertex needs 3 coordinates")
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) != 3:
                        raise MalformedFileError(f"{path}:{line_no}: only triangles supported")
                    faces.append([i - 1 for i in idx])
            except MalformedFileError:
                raise
            except (ValueError, IndexError) as exc:
                raise MalformedFileError(f"{path}:{line_no}: {exc}") from exc
    if not verts:
        raise MalformedFileError(f"{path}: no vertices found")
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64), clean=False)
