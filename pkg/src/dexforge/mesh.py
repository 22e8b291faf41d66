"""Triangle meshes and spatial queries.

Provides watertightness checking, exact closest-point queries (brute force or
BVH-accelerated, same results either way), signed distance via angle-weighted
pseudonormals, and area-uniform surface sampling. Part-labeled meshes add
per-part submeshes and per-part queries on top.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

# feature codes returned by the closest-point kernel
REG_A, REG_B, REG_C, REG_AB, REG_AC, REG_BC, REG_FACE = range(7)

# meshes with more faces than this get a BVH for closest-point queries
_BVH_THRESHOLD = 512


def _dot(u, v):
    return (u * v).sum(axis=-1)


def _normalize_rows(v, fallback=0.0):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n > 0, v / np.where(n == 0, 1.0, n), fallback)


def closest_point_triangles(p, a, b, c):
    """Closest point on triangle (a, b, c) to p, elementwise over (..., 3).

    Returns (points, region); region codes: 0/1/2 vertices a/b/c, 3 edge ab,
    4 edge ac, 5 edge bc, 6 face interior. Vectorization of the Voronoi-region
    walk from Ericson's Real-Time Collision Detection, sec. 5.1.5: candidate
    regions are applied in reverse priority so earlier checks win, matching
    the scalar algorithm's first-match-returns behavior.
    """
    p, a, b, c = np.broadcast_arrays(p, a, b, c)
    p = np.asarray(p, dtype=float)
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    bp = p - b
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    cp = p - c
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    def safe_div(num, den):
        return num / np.where(den == 0.0, 1.0, den)

    region = np.full(d1.shape, REG_FACE, dtype=np.int8)
    denom = safe_div(np.ones_like(d1), va + vb + vc)
    v = vb * denom
    w = vc * denom
    out = a + ab * v[..., None] + ac * w[..., None]

    t = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    cand = b + (c - b) * t[..., None]
    m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    out = np.where(m[..., None], cand, out)
    region[m] = REG_BC

    t = safe_div(d2, d2 - d6)
    cand = a + ac * t[..., None]
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out = np.where(m[..., None], cand, out)
    region[m] = REG_AC

    m = (d6 >= 0) & (d5 <= d6)
    out = np.where(m[..., None], c, out)
    region[m] = REG_C

    t = safe_div(d1, d1 - d3)
    cand = a + ab * t[..., None]
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out = np.where(m[..., None], cand, out)
    region[m] = REG_AB

    m = (d3 >= 0) & (d4 <= d3)
    out = np.where(m[..., None], b, out)
    region[m] = REG_B

    m = (d1 <= 0) & (d2 <= 0)
    out = np.where(m[..., None], a, out)
    region[m] = REG_A
    return out, region


def _box_lower_bound_sq(points, lo, hi):
    d = np.maximum(lo - points, 0.0) + np.maximum(points - hi, 0.0)
    return (d * d).sum(axis=-1)


class _BVH:
    """Median-split AABB tree over triangles with packet queries."""

    def __init__(self, tri_lo, tri_hi, leaf_size=8):
        n = len(tri_lo)
        centers = 0.5 * (tri_lo + tri_hi)
        lo_l, hi_l, left_l, right_l, start_l, count_l = [], [], [], [], [], []
        order = np.arange(n)

        def build(beg, end):
            node = len(lo_l)
            idx = order[beg:end]
            lo_l.append(tri_lo[idx].min(axis=0))
            hi_l.append(tri_hi[idx].max(axis=0))
            left_l.append(-1)
            right_l.append(-1)
            start_l.append(beg)
            count_l.append(end - beg)
            if end - beg > leaf_size:
                axis = int(np.argmax(np.ptp(centers[idx], axis=0)))
                # stable argsort keeps the split deterministic for ties
                local = np.argsort(centers[idx, axis], kind="stable")
                order[beg:end] = idx[local]
                mid = beg + (end - beg) // 2
                left_l[node] = build(beg, mid)
                right_l[node] = build(mid, end)
            return node

        build(0, n)
        self.lo = np.array(lo_l)
        self.hi = np.array(hi_l)
        self.left = np.array(left_l)
        self.right = np.array(right_l)
        self.start = np.array(start_l)
        self.count = np.array(count_l)
        self.order = order


@dataclass
class ClosestPointResult:
    point: np.ndarray
    distance: np.ndarray
    face_index: np.ndarray
    region: np.ndarray


class TriangleMesh:
    """Immutable triangle mesh (vertices in meters, faces as index triples)."""

    def __init__(self, vertices, faces):
        vertices = np.asarray(vertices, dtype=float)
        faces = np.asarray(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise ValueError("face index out of range")
        self.vertices = vertices
        self.faces = faces
        self.vertices.setflags(write=False)
        self.faces.setflags(write=False)

    @property
    def num_faces(self):
        return len(self.faces)

    @cached_property
    def _corners(self):
        v = self.vertices
        f = self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    @cached_property
    def _face_cross(self):
        a, b, c = self._corners
        return np.cross(b - a, c - a)

    @cached_property
    def face_areas(self):
        return 0.5 * np.linalg.norm(self._face_cross, axis=1)

    @cached_property
    def face_normals(self):
        return _normalize_rows(self._face_cross)

    @cached_property
    def area(self):
        return float(self.face_areas.sum())

    def aabb(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def diagonal(self):
        lo, hi = self.aabb()
        return float(np.linalg.norm(hi - lo))

    @cached_property
    def watertight(self):
        """True iff every edge is shared by exactly two opposed faces."""
        f = self.faces
        if len(f) == 0:
            return False
        if ((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])).any():
            return False
        d = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        ds = d[np.lexsort((d[:, 1], d[:, 0]))]
        if len(ds) > 1 and (ds[1:] == ds[:-1]).all(axis=1).any():
            return False
        r = d[:, ::-1]
        rs = r[np.lexsort((r[:, 1], r[:, 0]))]
        return bool((ds == rs).all())

    @cached_property
    def _vertex_pseudonormals(self):
        a, b, c = self._corners
        fn = self.face_normals
        vpn = np.zeros_like(self.vertices)
        for corner, u, v in ((0, b - a, c - a), (1, c - b, a - b), (2, a - c, b - c)):
            ang = np.arctan2(np.linalg.norm(np.cross(u, v), axis=1), _dot(u, v))
            np.add.at(vpn, self.faces[:, corner], ang[:, None] * fn)
        return _normalize_rows(vpn)

    @cached_property
    def _edge_data(self):
        # columns of face_edge_ids follow the kernel's edge codes: ab, ac, bc
        f = self.faces
        pairs = np.stack([f[:, [0, 1]], f[:, [0, 2]], f[:, [1, 2]]], axis=1)
        key = np.sort(pairs.reshape(-1, 2), axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        face_edge_ids = inv.reshape(len(f), 3)
        acc = np.zeros((len(uniq), 3))
        np.add.at(acc, inv, np.repeat(self.face_normals, 3, axis=0))
        return face_edge_ids, _normalize_rows(acc)

    def feature_normals(self, face_index, region):
        """Outward pseudonormal of the closest-point feature (Baerentzen)."""
        face_index = np.asarray(face_index)
        region = np.asarray(region)
        out = self.face_normals[face_index].copy()
        vpn = self._vertex_pseudonormals
        for code, corner in ((REG_A, 0), (REG_B, 1), (REG_C, 2)):
            m = region == code
            if m.any():
                out[m] = vpn[self.faces[face_index[m], corner]]
        face_edge_ids, epn = self._edge_data
        for code, col in ((REG_AB, 0), (REG_AC, 1), (REG_BC, 2)):
            m = region == code
            if m.any():
                out[m] = epn[face_edge_ids[face_index[m], col]]
        return out

    @cached_property
    def _bvh(self):
        a, b, c = self._corners
        stacked = np.stack([a, b, c], axis=1)
        return _BVH(stacked.min(axis=1), stacked.max(axis=1))

    def closest_points(self, queries, method="auto", seed_faces=None):
        """Exact closest points. `seed_faces` (one face index per query,
        e.g. last step's answers) primes the search with a valid upper
        bound; results are identical with or without it, it only prunes."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        if self.num_faces == 0:
            raise ValueError("empty mesh")
        if method == "auto":
            method = "bvh" if self.num_faces > _BVH_THRESHOLD else "brute"
        if method == "brute":
            pt, d2, fi, reg = self._closest_brute(queries, np.arange(self.num_faces))
        elif method == "bvh":
            pt, d2, fi, reg = self._closest_bvh(queries, seed_faces)
        else:
            raise ValueError(f"unknown method {method!r}")
        return ClosestPointResult(pt, np.sqrt(d2), fi, reg)

    def _closest_brute(self, queries, face_ids):
        a, b, c = self._corners
        a, b, c = a[face_ids], b[face_ids], c[face_ids]
        n = len(queries)
        best_d2 = np.full(n, np.inf)
        best_pt = np.zeros((n, 3))
        best_fi = np.zeros(n, dtype=np.int64)
        best_reg = np.zeros(n, dtype=np.int8)
        chunk = max(1, int(4_000_000) // max(len(face_ids), 1))
        for s in range(0, n, chunk):
            q = queries[s : s + chunk, None, :]
            cp, reg = closest_point_triangles(q, a[None], b[None], c[None])
            d2 = ((q - cp) ** 2).sum(axis=-1)
            j = np.argmin(d2, axis=1)
            r = np.arange(len(j))
            sl = slice(s, s + len(j))
            best_d2[sl] = d2[r, j]
            best_pt[sl] = cp[r, j]
            best_fi[sl] = face_ids[j]
            best_reg[sl] = reg[r, j]
        return best_pt, best_d2, best_fi, best_reg

    def _closest_bvh(self, queries, seed_faces=None):
        bvh = self._bvh
        a, b, c = self._corners
        n = len(queries)
        if seed_faces is None:
            best_d2 = np.full(n, np.inf)
            best_pt = np.zeros((n, 3))
            best_fi = np.zeros(n, dtype=np.int64)
            best_reg = np.zeros(n, dtype=np.int8)
        else:
            fi0 = np.asarray(seed_faces, dtype=np.int64)
            q = queries[:, None, :]
            cp, reg = closest_point_triangles(
                q, a[fi0][:, None], b[fi0][:, None], c[fi0][:, None]
            )
            best_pt = cp[:, 0]
            best_d2 = ((queries - best_pt) ** 2).sum(axis=-1)
            best_fi = fi0.copy()
            best_reg = reg[:, 0]

        def visit(node, ids):
            bound = _box_lower_bound_sq(queries[ids], bvh.lo[node], bvh.hi[node])
            # <= so exact ties with the current best are still examined and
            # the lowest tying face index can win, as in the brute-force scan
            ids = ids[bound <= best_d2[ids]]
            if ids.size == 0:
                return
            if bvh.left[node] < 0:
                s = bvh.start[node]
                tris = bvh.order[s : s + bvh.count[node]]
                q = queries[ids][:, None, :]
                cp, reg = closest_point_triangles(q, a[tris][None], b[tris][None], c[tris][None])
                d2 = ((q - cp) ** 2).sum(axis=-1)
                # among exactly tied distances keep the lowest face index, so
                # results are bit-identical to the brute-force argmin scan
                key_fi = np.broadcast_to(tris, d2.shape)
                order = np.lexsort((key_fi, d2), axis=1)
                j = order[:, 0]
                r = np.arange(len(j))
                d2j = d2[r, j]
                fij = tris[j]
                cur = best_d2[ids]
                better = (d2j < cur) | ((d2j == cur) & (fij < best_fi[ids]))
                upd = ids[better]
                best_d2[upd] = d2j[better]
                best_pt[upd] = cp[r, j][better]
                best_fi[upd] = fij[better]
                best_reg[upd] = reg[r, j][better]
            else:
                visit(bvh.left[node], ids)
                visit(bvh.right[node], ids)

        visit(0, np.arange(n))
        return best_pt, best_d2, best_fi, best_reg

    def signed_distance(self, queries, method="auto"):
        """Signed distances, negative inside. Requires a watertight mesh."""
        if not self.watertight:
            raise ValueError("signed distance requires a watertight mesh")
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        res = self.closest_points(queries, method=method)
        pn = self.feature_normals(res.face_index, res.region)
        sign = np.where(_dot(queries - res.point, pn) >= 0.0, 1.0, -1.0)
        return sign * res.distance

    def sample_surface(self, n, rng, face_ids=None):
        """n area-uniform samples: (points, outward normals, face indices)."""
        if n < 1:
            raise ValueError("n must be >= 1")
        if face_ids is None:
            face_ids = np.arange(self.num_faces)
        areas = self.face_areas[face_ids]
        total = areas.sum()
        if total <= 0.0:
            raise ValueError("zero surface area")
        local = rng.choice(len(face_ids), size=n, p=areas / total)
        fids = face_ids[local]
        u = rng.random((n, 2))
        su = np.sqrt(u[:, 0:1])
        b1 = su * (1.0 - u[:, 1:2])
        b2 = su * u[:, 1:2]
        v = self.vertices
        f = self.faces[fids]
        pts = (1.0 - su) * v[f[:, 0]] + b1 * v[f[:, 1]] + b2 * v[f[:, 2]]
        return pts, self.face_normals[fids], fids

    def transformed(self, rotation=None, translation=None):
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        if translation is not None:
            v = v + np.asarray(translation)
        return TriangleMesh(v, self.faces)

    def submesh(self, face_mask):
        f = self.faces[face_mask]
        used, inv = np.unique(f, return_inverse=True)
        return TriangleMesh(self.vertices[used], inv.reshape(-1, 3))


def merge_meshes(meshes):
    verts, faces = [], []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


def load_obj(path):
    """Minimal OBJ reader: v/f records, triangles only."""
    verts, faces = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0] not in ("v", "f"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{ln}: malformed vertex")
                verts.append([float(x) for x in parts[1:4]])
            else:
                idx = [tok.split("/")[0] for tok in parts[1:]]
                if len(idx) != 3:
                    raise ValueError(f"{path}:{ln}: only triangulated OBJ is supported")
                face = []
                for tok in idx:
                    i = int(tok)
                    face.append(i - 1 if i > 0 else len(verts) + i)
                faces.append(face)
    if not verts or not faces:
        raise ValueError(f"{path}: no geometry found")
    return TriangleMesh(np.array(verts), np.array(faces))


def save_obj(path, mesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


@dataclass
class SurfaceSample:
    point: np.ndarray
    normal: np.ndarray
    part: int


class PartLabeledMesh:
    """Watertight object mesh with a part id per face."""

    def __init__(self, mesh, face_part, part_names, object_name=None):
        face_part = np.asarray(face_part, dtype=np.int64)
        if len(face_part) != mesh.num_faces:
            raise ValueError(
                f"label count {len(face_part)} != face count {mesh.num_faces}"
            )
        missing = set(np.unique(face_part)) - set(part_names)
        if missing:
            raise ValueError(f"parts without names: {sorted(missing)}")
        self.mesh = mesh
        self.face_part = face_part
        self.face_part.setflags(write=False)
        self.part_names = dict(part_names)
        self.object_name = object_name
        self._part_meshes = {}
        self._part_faces = {}

    @cached_property
    def part_ids(self):
        return [int(p) for p in np.unique(self.face_part)]

    def part_faces(self, part):
        if part not in self._part_faces:
            ids = np.nonzero(self.face_part == part)[0]
            if len(ids) == 0:
                raise KeyError(f"unknown part id {part}")
            self._part_faces[part] = ids
        return self._part_faces[part]

    def part_mesh(self, part):
        if part not in self._part_meshes:
            mask = self.face_part == part
            if not mask.any():
                raise KeyError(f"unknown part id {part}")
            self._part_meshes[part] = self.mesh.submesh(mask)
        return self._part_meshes[part]

    def closest_on_parts(self, queries, parts=None):
        """Closest point restricted to the given parts (default: all).

        Returns (points, distances, outward normals, part ids).
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        if parts is None:
            res = self.mesh.closest_points(queries)
            nrm = self.mesh.feature_normals(res.face_index, res.region)
            return res.point, res.distance, nrm, self.face_part[res.face_index]
        if not parts:
            raise ValueError("empty part subset")
        best_d = np.full(len(queries), np.inf)
        best_pt = np.zeros((len(queries), 3))
        best_n = np.zeros((len(queries), 3))
        best_part = np.full(len(queries), -1, dtype=np.int64)
        for part in parts:
            sub = self.part_mesh(part)
            res = sub.closest_points(queries)
            better = res.distance < best_d
            if better.any():
                nrm = sub.feature_normals(res.face_index, res.region)
                best_d[better] = res.distance[better]
                best_pt[better] = res.point[better]
                best_n[better] = nrm[better]
                best_part[better] = part
        return best_pt, best_d, best_n, best_part

    def part_distances(self, queries):
        """Distance from each query to every part: (Q, P) array, part order
        follows part_ids."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        out = np.empty((len(queries), len(self.part_ids)))
        for k, part in enumerate(self.part_ids):
            out[:, k] = self.part_mesh(part).closest_points(queries).distance
        return out

    def signed_distance(self, queries):
        return self.mesh.signed_distance(queries)

    def sample_part(self, part, n, rng):
        pts, nrm, _ = self.mesh.sample_surface(n, rng, face_ids=self.part_faces(part))
        return pts, nrm

    def sample_off_part(self, part, n, rng):
        """Samples on every face not belonging to `part`."""
        ids = np.nonzero(self.face_part != part)[0]
        if len(ids) == 0:
            raise ValueError("no off-part surface")
        pts, nrm, _ = self.mesh.sample_surface(n, rng, face_ids=ids)
        return pts, nrm


def load_labels(path):
    with open(path) as fh:
        data = json.load(fh)
    if "face_part" not in data or "part_names" not in data:
        raise ValueError(f"{path}: expected keys 'face_part' and 'part_names'")
    names = {int(k): str(v) for k, v in data["part_names"].items()}
    return data["face_part"], names, data.get("object_name")


def load_mesh(path, labels_path):
    """Load an OBJ plus its part-label JSON into a PartLabeledMesh."""
    mesh = load_obj(path)
    face_part, names, object_name = load_labels(labels_path)
    if object_name is None:
        object_name = Path(path).stem
    return PartLabeledMesh(mesh, face_part, names, object_name=object_name)
