"""Procedural watertight solids for bundled objects, fixtures and demos.

All builders return index-welded, consistently oriented closed meshes and
assert both properties, so downstream signed-distance queries are safe.
"""

from __future__ import annotations

import numpy as np

from dexforge.mesh import PartLabeledMesh, TriangleMesh, merge_meshes


def mesh_volume(mesh):
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    return float((a * np.cross(b, c)).sum() / 6.0)


def weld(mesh, face_labels=None, decimals=9):
    """Merge vertices that coincide after rounding; faces are remapped."""
    key = np.round(mesh.vertices, decimals)
    uniq, index, inverse = np.unique(
        key, axis=0, return_index=True, return_inverse=True
    )
    out = TriangleMesh(mesh.vertices[index], inverse[mesh.faces])
    return (out, face_labels) if face_labels is not None else out


def _polygon_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def regular_polygon(radius, segments, phase=0.0):
    ang = phase + 2 * np.pi * np.arange(segments) / segments
    return np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])


def extrude_polygon(poly, z0, z1, caps=(True, True), fan_index=0):
    """Prism over a CCW simple polygon. Caps are triangle fans around
    poly[fan_index], so the polygon must be star-shaped from that vertex."""
    poly = np.asarray(poly, dtype=float)
    if _polygon_area(poly) <= 0:
        raise ValueError("polygon must be counter-clockwise")
    k = len(poly)
    bottom = np.column_stack([poly, np.full(k, float(z0))])
    top = np.column_stack([poly, np.full(k, float(z1))])
    verts = np.vstack([bottom, top])
    faces = []
    for i in range(k):
        j = (i + 1) % k
        faces.append([i, j, k + j])
        faces.append([i, k + j, k + i])
    f = fan_index
    order = [(f + 1 + t) % k for t in range(k - 1)]
    for a, b in zip(order[:-1], order[1:]):
        if caps[0]:
            faces.append([f, b, a])
        if caps[1]:
            faces.append([k + f, k + a, k + b])
    return TriangleMesh(verts, np.array(faces))


def ring_cap_down(outer, inner, z):
    """Downward-facing annular cap between two same-length CCW loops."""
    outer = np.asarray(outer, dtype=float)
    inner = np.asarray(inner, dtype=float)
    if len(outer) != len(inner):
        raise ValueError("loops must have equal length")
    k = len(outer)
    verts = np.vstack(
        [
            np.column_stack([outer, np.full(k, float(z))]),
            np.column_stack([inner, np.full(k, float(z))]),
        ]
    )
    faces = []
    for i in range(k):
        j = (i + 1) % k
        faces.append([i, k + i, k + j])
        faces.append([i, k + j, j])
    return TriangleMesh(verts, np.array(faces))


def box_mesh(half_extents, center=(0.0, 0.0, 0.0), rotation=None):
    hx, hy, hz = half_extents
    square = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    m = extrude_polygon(square, -hz, hz)
    if rotation is not None:
        m = m.transformed(rotation=rotation)
    return m.transformed(translation=np.asarray(center, dtype=float))


def revolve_profile(profile, segments):
    """Surface of revolution about +z from an (r, z) polyline.

    First and last profile points must sit on the axis (r = 0) so the result
    is closed. Returns (mesh, face_segment) where face_segment[i] is the index
    of the profile segment that produced face i.
    """
    profile = np.asarray(profile, dtype=float)
    if profile[0, 0] != 0.0 or profile[-1, 0] != 0.0:
        raise ValueError("profile must start and end on the axis")
    ang = 2 * np.pi * np.arange(segments) / segments
    cs, sn = np.cos(ang), np.sin(ang)

    verts = []
    ring_start = []
    for r, z in profile:
        ring_start.append(len(verts))
        if r == 0.0:
            verts.append([0.0, 0.0, z])
        else:
            verts.extend(np.column_stack([r * cs, r * sn, np.full(segments, z)]))
    verts = np.array(verts)

    faces, labels = [], []
    for i in range(len(profile) - 1):
        r0, r1 = profile[i, 0], profile[i + 1, 0]
        a0, a1 = ring_start[i], ring_start[i + 1]
        if r0 == 0.0 and r1 == 0.0:
            continue
        for s in range(segments):
            t = (s + 1) % segments
            if r0 == 0.0:
                faces.append([a0, a1 + s, a1 + t])
                labels.append(i)
            elif r1 == 0.0:
                faces.append([a0 + s, a1, a0 + t])
                labels.append(i)
            else:
                faces.append([a0 + s, a1 + s, a1 + t])
                faces.append([a0 + s, a1 + t, a0 + t])
                labels.extend((i, i))
    mesh = TriangleMesh(verts, np.array(faces))
    if mesh_volume(mesh) < 0:
        mesh = TriangleMesh(mesh.vertices, mesh.faces[:, ::-1])
    return mesh, np.array(labels)


def _checked(mesh):
    if not mesh.watertight:
        raise AssertionError("constructed mesh is not watertight")
    if mesh_volume(mesh) <= 0:
        raise AssertionError("constructed mesh is inside out")
    return mesh


# bottle: wide body, narrow neck, overhanging screw cap. The cap part
# includes the neck and the shoulder ring so grasps that hook the rim or
# brace a digit on the shoulder corner stay on-part. The assembly above
# the shoulder is wider than tall, which keeps its longest box axis
# horizontal and drives the lid classification; the shoulder corners sit
# inside the body's box (embedded, but not a shaft end poking in, since
# the horizontal end quartets are half exposed).
_BOTTLE_PROFILE = [
    (0.000, 0.000),
    (0.0355, 0.000),
    (0.0355, 0.133),
    (0.013, 0.133),
    (0.013, 0.162),
    (0.020, 0.162),
    (0.020, 0.154),
    (0.0265, 0.154),
    (0.0265, 0.1845),
    (0.000, 0.1845),
]
_BOTTLE_CAP_SEGMENTS = {3, 4, 5, 6, 7, 8}


def make_bottle(segments=24):
    mesh, seg = revolve_profile(_BOTTLE_PROFILE, segments)
    _checked(mesh)
    face_part = np.where(np.isin(seg, list(_BOTTLE_CAP_SEGMENTS)), 1, 0)
    return PartLabeledMesh(
        mesh, face_part, {0: "body", 1: "cap"}, object_name="bottle"
    )


# Mallet-style hammer: oval grip rising into a wider round head. The oval
# cross section gives the grip two near-parallel flanks, so digits closing
# from opposite sides meet opposing surface normals. The grip shell runs
# 2 cm up into the head so the merged surface stays closed and interior
# queries near the head's underside resolve to the annulus, not the
# embedded grip top.
_HAMMER_GRIP_HALF_WIDE = 0.026
_HAMMER_GRIP_HALF_NARROW = 0.017
_HAMMER_GRIP_TOP = 0.220
_HAMMER_HEAD_PROFILE = [
    (0.000, 0.200),
    (0.035, 0.200),
    (0.035, 0.300),
    (0.000, 0.300),
]


def make_hammer(segments=24):
    ang = 2 * np.pi * np.arange(segments) / segments
    oval = np.column_stack(
        [
            _HAMMER_GRIP_HALF_WIDE * np.cos(ang),
            _HAMMER_GRIP_HALF_NARROW * np.sin(ang),
        ]
    )
    grip = extrude_polygon(oval, 0.0, _HAMMER_GRIP_TOP)
    head, _ = revolve_profile(_HAMMER_HEAD_PROFILE, segments)
    _checked(grip)
    _checked(head)
    mesh = _checked(merge_meshes([head, grip]))
    labels = np.concatenate(
        [np.zeros(head.num_faces, dtype=int), np.ones(grip.num_faces, dtype=int)]
    )
    return PartLabeledMesh(
        mesh, labels, {0: "head", 1: "handle"}, object_name="hammer"
    )


def make_plate_on_post():
    # flat plate protruding over a slim post: the disk-like fixture
    ph = 0.015
    post_sq = np.array([[ph, ph], [-ph, ph], [-ph, -ph], [ph, -ph]])
    post = extrude_polygon(post_sq, 0.0, 0.08, caps=(True, False))
    sw = 0.05
    plate_sq = np.array([[sw, sw], [-sw, sw], [-sw, -sw], [sw, -sw]])
    plate_bottom = ring_cap_down(plate_sq, post_sq, 0.08)
    plate_walls_top = extrude_polygon(plate_sq, 0.08, 0.085, caps=(False, True))
    mesh = merge_meshes([post, plate_bottom, plate_walls_top])
    labels = np.concatenate(
        [
            np.zeros(post.num_faces, dtype=np.int64),
            np.ones(plate_bottom.num_faces + plate_walls_top.num_faces, dtype=np.int64),
        ]
    )
    mesh, labels = weld(mesh, labels)
    _checked(mesh)
    return PartLabeledMesh(
        mesh, labels, {0: "post", 1: "plate"}, object_name="lamp"
    )


def make_l_bracket():
    # thick L-prism: one empty corner quadrant, but too chunky to be a disk
    poly = np.array(
        [
            [0.0, 0.0],
            [0.10, 0.0],
            [0.10, 0.04],
            [0.04, 0.04],
            [0.04, 0.10],
            [0.0, 0.10],
        ]
    )
    mesh = _checked(extrude_polygon(poly, 0.0, 0.04, fan_index=3))
    return PartLabeledMesh(
        mesh,
        np.zeros(mesh.num_faces, dtype=np.int64),
        {0: "bracket"},
        object_name="bracket",
    )


def make_bar(half_extents=(0.015, 0.015, 0.08)):
    mesh = _checked(box_mesh(half_extents))
    return PartLabeledMesh(
        mesh,
        np.zeros(mesh.num_faces, dtype=np.int64),
        {0: "bar"},
        object_name="bar",
    )


def make_ball(radius=0.05, subdivisions=2):
    """Single-part icosphere, handy as a convex test object."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=float,
    )
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        verts = list(map(tuple, v))
        index = {t: i for i, t in enumerate(verts)}

        def midpoint(i, j):
            m = tuple((v[i] + v[j]) / 2.0)
            if m not in index:
                index[m] = len(verts)
                verts.append(m)
            return index[m]

        new_f = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_f += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v = np.array(verts)
        f = np.array(new_f, dtype=np.int64)
    v = radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    mesh = _checked(TriangleMesh(v, f))
    return PartLabeledMesh(
        mesh,
        np.zeros(mesh.num_faces, dtype=np.int64),
        {0: "ball"},
        object_name="ball",
    )
