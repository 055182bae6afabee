"""Triangle-mesh container, per-triangle local frames, surface sampling, UV
mapping, and a BVH for visibility and closest-point queries.

All types are immutable after construction and safe to read from many
threads; BVH queries are read-only and reentrant.
"""

from dataclasses import dataclass, field

import numpy as np
from numba import njit

__all__ = [
    "Mesh",
    "TriangleFrame",
    "Bvh",
    "compute_frame",
    "compute_frames",
    "sample_surface",
    "uv_of",
    "occluded",
    "closest_point",
    "read_obj",
    "write_obj",
    "read_face_flags",
    "write_face_flags",
]

DEGENERATE_AREA = 1e-12  # m^2; slivers below this make frames ill-conditioned
RAY_EPS = 1e-4  # m; self-intersection offset for occlusion rays


@dataclass(frozen=True)
class Mesh:
    """Indexed triangle mesh with per-corner UVs.

    vertices: (V,3) float64 positions in meters.
    faces: (F,3) int vertex indices.
    uvs: (F,3,2) per-corner UV coordinates in [0,1]^2 (per corner, not per
        vertex, so UV islands are exact across seams).
    face_flags: (F,) bool garment membership.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray = None
    face_flags: np.ndarray = None

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("faces must be (F,3)")
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must be (V,3)")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if f.size and ((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])).any():
            raise ValueError("face with repeated vertex")
        if not np.isfinite(v).all():
            raise ValueError("non-finite vertex")
        if self.uvs is not None:
            uv = np.ascontiguousarray(np.asarray(self.uvs, dtype=np.float64))
            if uv.shape != (len(f), 3, 2):
                raise ValueError("uvs must be (F,3,2)")
            if not np.isfinite(uv).all():
                raise ValueError("non-finite uv")
            object.__setattr__(self, "uvs", uv)
        if self.face_flags is not None:
            flags = np.ascontiguousarray(np.asarray(self.face_flags, dtype=bool))
            if flags.shape != (len(f),):
                raise ValueError("face_flags must be (F,)")
            object.__setattr__(self, "face_flags", flags)
        if f.size:
            areas = self.face_areas()
            if (areas <= DEGENERATE_AREA).any():
                bad = int(np.argmax(areas <= DEGENERATE_AREA))
                raise ValueError(f"degenerate triangle (face {bad}, area {areas[bad]:.3e})")

    @property
    def num_faces(self):
        return len(self.faces)

    def corners(self, vertices=None):
        """(F,3,3) corner positions, optionally from deformed vertices."""
        v = self.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
        return v[self.faces]

    def face_areas(self, vertices=None):
        c = self.corners(vertices)
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return 0.5 * np.linalg.norm(n, axis=1)

    def face_normals(self, vertices=None):
        c = self.corners(vertices)
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def vertex_normals(self, vertices=None):
        """Area-weighted smooth vertex normals."""
        v = self.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
        c = v[self.faces]
        fn = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])  # area-weighted
        vn = np.zeros_like(v)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        norms = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.maximum(norms, 1e-300)

    def submesh(self, face_mask):
        """Mesh restricted to flagged faces; vertices compacted."""
        face_mask = np.asarray(face_mask, dtype=bool)
        faces = self.faces[face_mask]
        used = np.unique(faces)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        flags = self.face_flags[face_mask] if self.face_flags is not None else None
        return Mesh(
            vertices=self.vertices[used],
            faces=remap[faces],
            uvs=self.uvs[face_mask] if self.uvs is not None else None,
            face_flags=flags,
        )


@dataclass(frozen=True)
class TriangleFrame:
    """Local frame of a triangle: origin tau (centroid), rotation R with
    columns [edge_dir, normal, edge_dir x normal], and scale k = (B+H)/2."""

    origin: np.ndarray
    rotation: np.ndarray
    scale: float


def compute_frames(mesh, vertices=None):
    """Frames for all faces at once: (F,3) origins, (F,3,3) rotations, (F,) k.

    Column convention: R = [e_hat, n_hat, e_hat x n_hat] where e_hat is the
    normalized v0->v1 edge of the stored winding (deterministic, so assets
    are reproducible). det(R) = +1.
    """
    c = mesh.corners(vertices)
    e = c[:, 1] - c[:, 0]
    blen = np.linalg.norm(e, axis=1)
    cross = np.cross(e, c[:, 2] - c[:, 0])
    area2 = np.linalg.norm(cross, axis=1)  # 2 * area
    if (area2 <= 2.0 * DEGENERATE_AREA).any() or (blen <= 0).any():
        raise ValueError("degenerate triangle")
    e_hat = e / blen[:, None]
    n_hat = cross / area2[:, None]
    b_hat = np.cross(e_hat, n_hat)
    rot = np.stack([e_hat, n_hat, b_hat], axis=2)  # columns
    tau = c.mean(axis=1)
    height = area2 / blen  # H = 2*area / B
    k = 0.5 * (blen + height)
    return tau, rot, k


def compute_frame(mesh, face):
    """TriangleFrame of one face. Raises on degenerate faces."""
    if face < 0 or face >= mesh.num_faces:
        raise IndexError("face index out of range")
    sub = Mesh(vertices=mesh.vertices, faces=mesh.faces[face:face + 1])
    tau, rot, k = compute_frames(sub)
    return TriangleFrame(origin=tau[0], rotation=rot[0], scale=float(k[0]))


def sample_surface(mesh, n, seed):
    """Area-weighted surface samples: (faces (n,), barycentrics (n,3)).

    Faces are drawn proportional to area; points within a face use the
    square-root construction (triangle point picking), so the surface
    density is uniform. Deterministic for a fixed seed.
    """
    if n < 1:
        raise ValueError("need n >= 1 samples")
    if mesh.num_faces == 0:
        raise ValueError("empty mesh")
    rng = np.random.Generator(np.random.Philox(seed))
    areas = mesh.face_areas()
    faces = rng.choice(mesh.num_faces, size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    return faces.astype(np.int64), bary


def uv_of(mesh, face, bary):
    """Barycentric interpolation of a face's corner UVs.

    face/bary may be scalars or arrays ((n,), (n,3)).
    """
    if mesh.uvs is None:
        raise ValueError("mesh has no UVs")
    face = np.asarray(face, dtype=np.int64)
    bary = np.asarray(bary, dtype=np.float64)
    if (bary < -1e-9).any() or (np.abs(bary.sum(axis=-1) - 1.0) > 1e-9).any():
        raise ValueError("barycentrics must be >= 0 and sum to 1")
    corners = mesh.uvs[face]  # (...,3,2)
    return (corners * bary[..., None]).sum(axis=-2)


# ---------------------------------------------------------------------------
# BVH: median split over centroids, leaf size <= 4.
# Nodes are flat arrays so the numba query kernels can traverse them.
# ---------------------------------------------------------------------------


@dataclass
class Bvh:
    """Bounding-volume hierarchy over a triangle soup.

    Stores its own copy of the triangle corner data, so queries are
    self-contained. node_* arrays describe an implicit binary tree; leaves
    reference ranges of the primitive permutation `prim_order`.
    """

    tri: np.ndarray            # (F,3,3) corner positions
    node_min: np.ndarray       # (N,3)
    node_max: np.ndarray       # (N,3)
    node_left: np.ndarray      # (N,) child index or -1 for leaf
    node_right: np.ndarray     # (N,)
    node_start: np.ndarray     # (N,) leaf primitive range start
    node_count: np.ndarray     # (N,) leaf primitive count
    prim_order: np.ndarray     # (F,) permutation of face indices
    face_normals: np.ndarray = field(default=None)

    @classmethod
    def build(cls, mesh, vertices=None, leaf_size=4):
        tri = np.ascontiguousarray(mesh.corners(vertices))
        if len(tri) == 0:
            raise ValueError("cannot build BVH over empty mesh")
        cent = tri.mean(axis=1)
        order = np.arange(len(tri), dtype=np.int64)

        mins, maxs, lefts, rights, starts, counts = [], [], [], [], [], []

        def emit(lo, hi):
            idx = len(mins)
            sel = order[lo:hi]
            mins.append(tri[sel].reshape(-1, 3).min(axis=0))
            maxs.append(tri[sel].reshape(-1, 3).max(axis=0))
            lefts.append(-1)
            rights.append(-1)
            starts.append(lo)
            counts.append(hi - lo)
            if hi - lo > leaf_size:
                c = cent[sel]
                axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
                local = np.argsort(c[:, axis], kind="stable")
                order[lo:hi] = sel[local]
                mid = lo + (hi - lo) // 2
                counts[idx] = 0
                lefts[idx] = emit(lo, mid)
                rights[idx] = emit(mid, hi)
            return idx

        import sys
        old = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old, 10000))
        try:
            emit(0, len(tri))
        finally:
            sys.setrecursionlimit(old)

        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return cls(
            tri=tri,
            node_min=np.array(mins), node_max=np.array(maxs),
            node_left=np.array(lefts, dtype=np.int64),
            node_right=np.array(rights, dtype=np.int64),
            node_start=np.array(starts, dtype=np.int64),
            node_count=np.array(counts, dtype=np.int64),
            prim_order=order,
            face_normals=np.ascontiguousarray(n),
        )

    def _args(self):
        return (self.tri, self.node_min, self.node_max, self.node_left,
                self.node_right, self.node_start, self.node_count, self.prim_order)


def occluded(bvh, origin, direction, max_t=np.inf):
    """True iff any triangle intersects the ray within t in (RAY_EPS, max_t)."""
    o = np.ascontiguousarray(origin, dtype=np.float64)
    d = np.ascontiguousarray(direction, dtype=np.float64)
    return bool(_occluded_one(*bvh._args(), o, d, float(max_t)))


def occluded_batch(bvh, origins, directions, max_ts=None):
    """Vectorized occlusion test; returns (n,) bool."""
    o = np.ascontiguousarray(origins, dtype=np.float64)
    d = np.ascontiguousarray(directions, dtype=np.float64)
    if max_ts is None:
        max_ts = np.full(len(o), np.inf)
    t = np.ascontiguousarray(max_ts, dtype=np.float64)
    return _occluded_many(*bvh._args(), o, d, t)


def closest_point(bvh, p):
    """Globally nearest surface point: (point (3,), face index, distance)."""
    q = np.ascontiguousarray(p, dtype=np.float64)
    out = np.empty(3)
    face, dist = _closest_one(*bvh._args(), q, out)
    return out, int(face), float(dist)


def closest_point_batch(bvh, points):
    """Vectorized closest-point query: (points (n,3), faces (n,), dists (n,))."""
    q = np.ascontiguousarray(points, dtype=np.float64)
    return _closest_many(*bvh._args(), q)


@njit(cache=True, fastmath=False)
def _ray_tri(o, d, v0, v1, v2):
    """Moller-Trumbore; returns hit t or -1."""
    e1x = v1[0] - v0[0]; e1y = v1[1] - v0[1]; e1z = v1[2] - v0[2]
    e2x = v2[0] - v0[0]; e2y = v2[1] - v0[1]; e2z = v2[2] - v0[2]
    px = d[1] * e2z - d[2] * e2y
    py = d[2] * e2x - d[0] * e2z
    pz = d[0] * e2y - d[1] * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-14:
        return -1.0
    inv = 1.0 / det
    tx = o[0] - v0[0]; ty = o[1] - v0[1]; tz = o[2] - v0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0
    return (e2x * qx + e2y * qy + e2z * qz) * inv


@njit(cache=True, fastmath=False)
def _slab_hit(o, inv_d, bmin, bmax, max_t):
    t0 = RAY_EPS
    t1 = max_t
    for a in range(3):
        lo = (bmin[a] - o[a]) * inv_d[a]
        hi = (bmax[a] - o[a]) * inv_d[a]
        if lo > hi:
            lo, hi = hi, lo
        if lo > t0:
            t0 = lo
        if hi < t1:
            t1 = hi
        if t0 > t1:
            return False
    return True


@njit(cache=True, fastmath=False)
def _occluded_one(tri, nmin, nmax, nleft, nright, nstart, ncount, order,
                  o, d, max_t):
    inv = np.empty(3)
    for a in range(3):
        inv[a] = 1.0 / d[a] if d[a] != 0.0 else (1e300 if d[a] >= 0 else -1e300)
    stack = np.empty(128, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if not _slab_hit(o, inv, nmin[node], nmax[node], max_t):
            continue
        if nleft[node] < 0:
            for i in range(nstart[node], nstart[node] + ncount[node]):
                f = order[i]
                t = _ray_tri(o, d, tri[f, 0], tri[f, 1], tri[f, 2])
                if RAY_EPS < t < max_t:
                    return True
        else:
            stack[top] = nleft[node]; top += 1
            stack[top] = nright[node]; top += 1
    return False


@njit(cache=True, fastmath=False)
def _occluded_many(tri, nmin, nmax, nleft, nright, nstart, ncount, order,
                   os, ds, ts):
    n = os.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        out[i] = _occluded_one(tri, nmin, nmax, nleft, nright, nstart, ncount,
                               order, os[i], ds[i], ts[i])
    return out


@njit(cache=True, fastmath=False)
def _closest_on_tri(v0, v1, v2, p, out):
    """Closest point on a triangle (Ericson, Real-Time Collision Detection)."""
    abx = v1[0] - v0[0]; aby = v1[1] - v0[1]; abz = v1[2] - v0[2]
    acx = v2[0] - v0[0]; acy = v2[1] - v0[1]; acz = v2[2] - v0[2]
    apx = p[0] - v0[0]; apy = p[1] - v0[1]; apz = p[2] - v0[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        out[0] = v0[0]; out[1] = v0[1]; out[2] = v0[2]
        return
    bpx = p[0] - v1[0]; bpy = p[1] - v1[1]; bpz = p[2] - v1[2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        out[0] = v1[0]; out[1] = v1[1]; out[2] = v1[2]
        return
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        out[0] = v0[0] + t * abx; out[1] = v0[1] + t * aby; out[2] = v0[2] + t * abz
        return
    cpx = p[0] - v2[0]; cpy = p[1] - v2[1]; cpz = p[2] - v2[2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        out[0] = v2[0]; out[1] = v2[1]; out[2] = v2[2]
        return
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        out[0] = v0[0] + t * acx; out[1] = v0[1] + t * acy; out[2] = v0[2] + t * acz
        return
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out[0] = v1[0] + t * (v2[0] - v1[0])
        out[1] = v1[1] + t * (v2[1] - v1[1])
        out[2] = v1[2] + t * (v2[2] - v1[2])
        return
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    out[0] = v0[0] + abx * v + acx * w
    out[1] = v0[1] + aby * v + acy * w
    out[2] = v0[2] + abz * v + acz * w


@njit(cache=True, fastmath=False)
def _box_dist2(p, bmin, bmax):
    d2 = 0.0
    for a in range(3):
        if p[a] < bmin[a]:
            d = bmin[a] - p[a]
            d2 += d * d
        elif p[a] > bmax[a]:
            d = p[a] - bmax[a]
            d2 += d * d
    return d2


@njit(cache=True, fastmath=False)
def _closest_one(tri, nmin, nmax, nleft, nright, nstart, ncount, order, p, out):
    best = 1e300
    best_face = -1
    tmp = np.empty(3)
    stack = np.empty(128, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if _box_dist2(p, nmin[node], nmax[node]) >= best:
            continue
        if nleft[node] < 0:
            for i in range(nstart[node], nstart[node] + ncount[node]):
                f = order[i]
                _closest_on_tri(tri[f, 0], tri[f, 1], tri[f, 2], p, tmp)
                dx = tmp[0] - p[0]; dy = tmp[1] - p[1]; dz = tmp[2] - p[2]
                d2 = dx * dx + dy * dy + dz * dz
                if d2 < best or (d2 == best and (best_face < 0 or f < best_face)):
                    best = d2
                    best_face = f
                    out[0] = tmp[0]; out[1] = tmp[1]; out[2] = tmp[2]
        else:
            # visit the nearer child first for tighter pruning
            dl = _box_dist2(p, nmin[nleft[node]], nmax[nleft[node]])
            dr = _box_dist2(p, nmin[nright[node]], nmax[nright[node]])
            if dl <= dr:
                stack[top] = nright[node]; top += 1
                stack[top] = nleft[node]; top += 1
            else:
                stack[top] = nleft[node]; top += 1
                stack[top] = nright[node]; top += 1
    return best_face, np.sqrt(best)


@njit(cache=True, fastmath=False)
def _closest_many(tri, nmin, nmax, nleft, nright, nstart, ncount, order, ps):
    n = ps.shape[0]
    pts = np.empty((n, 3))
    faces = np.empty(n, dtype=np.int64)
    dists = np.empty(n)
    for i in range(n):
        f, d = _closest_one(tri, nmin, nmax, nleft, nright, nstart, ncount,
                            order, ps[i], pts[i])
        faces[i] = f
        dists[i] = d
    return pts, faces, dists


# ---------------------------------------------------------------------------
# OBJ reader/writer: positions, vt UVs, triangular faces only. Garment
# membership travels in a sidecar text file of face indices (one per line).
# ---------------------------------------------------------------------------


def read_obj(path):
    verts, uvs, faces, face_uvs = [], [], [], []
    with open(str(path)) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(parts[1]), float(parts[2])])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError("only triangular faces supported")
                vi, ti = [], []
                for token in parts[1:]:
                    fields = token.split("/")
                    vi.append(int(fields[0]) - 1)
                    if len(fields) > 1 and fields[1]:
                        ti.append(int(fields[1]) - 1)
                faces.append(vi)
                face_uvs.append(ti if len(ti) == 3 else None)
    verts = np.asarray(verts, dtype=np.float64)
    faces_arr = np.asarray(faces, dtype=np.int64)
    uv_arr = None
    if uvs and all(t is not None for t in face_uvs):
        uvtab = np.asarray(uvs, dtype=np.float64)
        uv_arr = uvtab[np.asarray(face_uvs, dtype=np.int64)]
    return Mesh(vertices=verts, faces=faces_arr, uvs=uv_arr)


def write_obj(path, mesh, vertices=None):
    v = mesh.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
    lines = []
    for p in v:
        lines.append(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}")
    if mesh.uvs is not None:
        for corner_uv in mesh.uvs.reshape(-1, 2):
            lines.append(f"vt {corner_uv[0]:.9g} {corner_uv[1]:.9g}")
        for i, face in enumerate(mesh.faces):
            t = 3 * i
            lines.append(f"f {face[0]+1}/{t+1} {face[1]+1}/{t+2} {face[2]+1}/{t+3}")
    else:
        for face in mesh.faces:
            lines.append(f"f {face[0]+1} {face[1]+1} {face[2]+1}")
    with open(str(path), "w") as f:
        f.write("\n".join(lines) + "\n")


def read_face_flags(path, num_faces):
    flags = np.zeros(num_faces, dtype=bool)
    with open(str(path)) as f:
        for line in f:
            line = line.strip()
            if line:
                flags[int(line)] = True
    return flags


def write_face_flags(path, face_flags):
    idx = np.flatnonzero(np.asarray(face_flags, dtype=bool))
    with open(str(path), "w") as f:
        f.write("\n".join(str(i) for i in idx) + ("\n" if len(idx) else ""))
