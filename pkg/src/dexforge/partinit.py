"""Part categorization and palm pose initialization.

Each part gets an OBB, a category (lid-like, disk-like, L-shaped, or
shaft-like by default, evaluated in that order), and a principal
direction. Grasp points are rejection-sampled on the part surface with
the category's normal-alignment rule, and palm poses are placed retreated
from each grasp point with category-specific frame alignment plus jitter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from dexforge.hand import GraspPose, HandModel
from dexforge.mesh import SurfaceSample
from dexforge.obb import Obb, fit_obb
from dexforge.transforms import (
    axis_angle_to_matrix,
    frame_from_front_up,
    matrix_to_quat,
    orthogonal_unit,
)

OBB_SAMPLES = 2048
CORNER_MARGIN_FRACTION = 0.01
DISK_FLATNESS = 3.0
DISK_ADJACENCY_REACH = 0.02


class PartCategory(Enum):
    LID_LIKE = "lid_like"
    DISK_LIKE = "disk_like"
    L_SHAPED = "l_shaped"
    SHAFT_LIKE = "shaft_like"


@dataclass
class PartAnalysis:
    part: int
    obb: Obb
    category: PartCategory
    principal_direction: np.ndarray


@dataclass
class InitConfig:
    retreat: float = 0.08
    cone_half_angle: float = math.radians(20.0)
    jitter_angle: float = math.radians(15.0)
    jitter_translation: float = 0.01
    lid_rolls: int = 24
    multiplicity: int = 4


@dataclass
class InitPose:
    pose: GraspPose
    grasp_point: np.ndarray
    split: str


def _object_scale(all_obbs):
    """Largest distance between any two part-OBB corners; rigid-invariant."""
    corners = np.vstack([b.corners() for b in all_obbs.values()])
    d2 = np.sum((corners[:, None] - corners[None, :]) ** 2, axis=-1)
    return float(np.sqrt(d2.max()))


def _corners_inside(corners, other, margin):
    return other.contains(corners, margin=margin)


def triangles_intersect_box(verts_local, faces, center, half):
    """Per-face SAT overlap between triangles (in box-aligned coordinates)
    and an axis-aligned box; touching counts as intersecting."""
    v = verts_local[faces] - center  # (F, 3, 3)
    sep = np.zeros(len(faces), dtype=bool)
    # box face normals
    for k in range(3):
        sep |= v[:, :, k].min(axis=1) > half[k]
        sep |= v[:, :, k].max(axis=1) < -half[k]
    # triangle plane
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    r = np.abs(n) @ half
    d = np.einsum("fi,fi->f", n, v[:, 0])
    sep |= np.abs(d) > r
    # cross-product axes e_i x edge_j
    edges = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]], axis=1)
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        for j in range(3):
            a = np.cross(e, edges[:, j])  # (F, 3)
            r = np.abs(a) @ half
            p = np.einsum("fi,fvi->fv", a, v)
            sep |= (p.min(axis=1) > r) | (p.max(axis=1) < -r)
    return ~sep


def empty_corner_octants(obb: Obb, part_mesh):
    """Sign triples of the 8 half-extent corner octants holding no part
    triangle. The octants tile the OBB; 'corner section' of the category
    rules. Octants are inflated by a tiny rigid-invariant epsilon so
    boundary-hugging faces (walls exactly on an octant plane) never read
    as missing material under fitting noise."""
    verts_local = (part_mesh.vertices - obb.center) @ obb.axes
    eps = 1e-4 * float(np.linalg.norm(obb.half_extents))
    half = obb.half_extents / 2.0 + eps
    out = []
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            for sz in (-1.0, 1.0):
                s = np.array([sx, sy, sz])
                c = s * obb.half_extents / 2.0
                hit = triangles_intersect_box(verts_local, part_mesh.faces, c, half)
                if not hit.any():
                    out.append(s)
    return out


def classify_part(target, all_obbs, part_mesh) -> PartCategory:
    obb = all_obbs[target]
    others = {p: b for p, b in all_obbs.items() if p != target}
    margin = CORNER_MARGIN_FRACTION * _object_scale(all_obbs)
    corners = obb.corners()

    if others:
        embedded = any(
            _corners_inside(corners, b, margin).sum() >= 4 for b in others.values()
        )
        if embedded:
            # a shaft end poked into another part is not a lid
            end_plus = corners[np.where(np.sign(obb.to_local(corners)[:, 0]) > 0)[0]]
            end_minus = corners[np.where(np.sign(obb.to_local(corners)[:, 0]) < 0)[0]]
            shaft_end = any(
                _corners_inside(end, b, margin).all()
                for end in (end_plus, end_minus)
                for b in others.values()
            )
            if not shaft_end:
                return PartCategory.LID_LIKE

    flat = obb.half_extents[1] >= DISK_FLATNESS * obb.half_extents[2]
    protruding = not any(
        _corners_inside(corners, b, margin).any() for b in others.values()
    )
    if flat and protruding:
        return PartCategory.DISK_LIKE

    if empty_corner_octants(obb, part_mesh):
        return PartCategory.L_SHAPED
    return PartCategory.SHAFT_LIKE


def principal_direction(target, category, all_obbs, object_obb, part_mesh=None):
    """Unit principal direction per category rule. The L-shaped rule needs
    the part mesh to locate the missing corner section."""
    obb = all_obbs[target]
    others = {p: b for p, b in all_obbs.items() if p != target}

    if category is PartCategory.LID_LIKE:
        margin = CORNER_MARGIN_FRACTION * _object_scale(all_obbs)
        corners = obb.corners()
        counts = {p: int(_corners_inside(corners, b, margin).sum()) for p, b in others.items()}
        embed = min(counts, key=lambda p: (-counts[p], p))
        away = obb.center - others[embed].center
        best, best_dot = None, -np.inf
        for k in range(3):
            for s in (1.0, -1.0):
                d = float(np.dot(s * obb.axes[:, k], away))
                if d > best_dot:
                    best_dot, best = d, s * obb.axes[:, k]
        return best.copy()

    if category is PartCategory.DISK_LIKE:
        from dexforge.obb import ray_obb_entry

        axis = obb.axes[:, 2]
        best, best_t = None, np.inf
        for s in (1.0, -1.0):
            d = s * axis
            origin = obb.center + d * obb.half_extents[2]
            for b in others.values():
                t = ray_obb_entry(b, origin, d)
                if t is not None and t <= DISK_ADJACENCY_REACH and t < best_t:
                    best_t, best = t, d
        if best is None:
            raise ValueError("no adjacent part for disk")
        return best.copy()

    if category is PartCategory.L_SHAPED:
        if part_mesh is None:
            raise ValueError("L-shaped principal direction needs the part mesh")
        empties = empty_corner_octants(obb, part_mesh)
        if not empties:
            raise ValueError("no empty corner octant")
        # aim at the middle of the missing section: summing the empty corner
        # offsets cancels the prismatic axis of a paired column
        v = np.zeros(3)
        for s in empties:
            v += obb.axes @ (s * obb.half_extents)
        if np.linalg.norm(v) < 1e-12:
            v = obb.axes @ (empties[0] * obb.half_extents)
        return v / np.linalg.norm(v)

    axis = obb.axes[:, 0]
    toward = object_obb.center - obb.center
    return axis.copy() if np.dot(axis, toward) >= 0 else -axis


def sample_grasp_points(
    part_mesh,
    category,
    principal_dir,
    n,
    seed,
    part=None,
    cone_half_angle=math.radians(20.0),
):
    """Rejection-sample surface points with the category's alignment rule:
    lid-like keeps |normal.dir| > cos(cone), others |normal.dir| < sin(cone)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    aligned = category is PartCategory.LID_LIKE
    threshold = math.cos(cone_half_angle) if aligned else math.sin(cone_half_angle)
    out = []
    trials = 0
    limit = 100 * n
    chunk = max(64, 4 * n)
    while len(out) < n and trials < limit:
        take = min(chunk, limit - trials)
        pts, nrm, _ = part_mesh.sample_surface(take, rng)
        trials += take
        a = np.abs(nrm @ principal_dir)
        keep = a > threshold if aligned else a < threshold
        for i in np.where(keep)[0]:
            out.append(SurfaceSample(pts[i], nrm[i], part))
            if len(out) == n:
                break
    if len(out) < n:
        raise ValueError("insufficient aligned surface")
    return out


def _base_frame(category, principal_dir, sample, obb):
    if category is PartCategory.LID_LIKE:
        front = -principal_dir
        return frame_from_front_up(front, orthogonal_unit(front))
    front = -sample.normal
    if category is PartCategory.DISK_LIKE:
        up = principal_dir - np.dot(principal_dir, front) * front
        if np.linalg.norm(up) < 1e-8:
            up = orthogonal_unit(front)
        return frame_from_front_up(front, up)
    if category is PartCategory.L_SHAPED:
        up = obb.center - sample.point
        up = up - np.dot(up, front) * front
        if np.linalg.norm(up) < 1e-8:
            up = orthogonal_unit(front)
        return frame_from_front_up(front, up)
    # shaft: pin the purlicue (palm x) to the principal direction
    front = front / np.linalg.norm(front)
    purlicue = principal_dir - np.dot(principal_dir, front) * front
    nrm = np.linalg.norm(purlicue)
    purlicue = orthogonal_unit(front) if nrm < 1e-8 else purlicue / nrm
    up = np.cross(front, purlicue)
    return np.column_stack([purlicue, up, front])


def init_palm_poses(
    analysis: PartAnalysis,
    grasp_points,
    hand: HandModel,
    split,
    cfg: InitConfig,
    seed,
):
    """Returns len(grasp_points) x multiplicity InitPoses (multiplicity is
    cfg.lid_rolls for lid-like parts, cfg.multiplicity otherwise). Jitter
    preserves the palm-faces-grasp-point invariant exactly: rotations pivot
    about axes through the grasp point, translation noise runs along front."""
    if not grasp_points:
        raise ValueError("grasp_points must be non-empty")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    template = hand.wrap_template if split == "wrap" else hand.pinch_template
    category = analysis.category
    out = []
    for sample in grasp_points:
        g = sample.point
        R0 = _base_frame(category, analysis.principal_direction, sample, analysis.obb)
        front0 = R0[:, 2]
        pos0 = g - cfg.retreat * front0
        if category is PartCategory.LID_LIKE:
            for k in range(cfg.lid_rolls):
                phi = 2.0 * math.pi * k / cfg.lid_rolls
                W = axis_angle_to_matrix(phi * analysis.principal_direction)
                R = W @ R0
                pos = g + W @ (pos0 - g)
                out.append(
                    InitPose(GraspPose(pos, matrix_to_quat(R), template.copy()), g, split)
                )
        else:
            for _ in range(cfg.multiplicity):
                alpha = rng.uniform(-cfg.jitter_angle, cfg.jitter_angle)
                delta = rng.uniform(-cfg.jitter_translation, cfg.jitter_translation)
                W = axis_angle_to_matrix(alpha * R0[:, 1])
                R = W @ R0
                pos = g + W @ (pos0 - g) + delta * R[:, 2]
                out.append(
                    InitPose(GraspPose(pos, matrix_to_quat(R), template.copy()), g, split)
                )
    return out


def analyze_parts(labeled, obb_samples=OBB_SAMPLES):
    """Fit per-part OBBs (fixed internal sampling seed: deterministic for a
    given mesh), classify, and derive principal directions. Returns
    (analyses: part -> PartAnalysis, object_obb)."""
    all_obbs = {}
    clouds = []
    for part in labeled.part_ids:
        rng = np.random.default_rng(0)
        pts, _ = labeled.sample_part(part, obb_samples, rng)
        clouds.append(pts)
        all_obbs[part] = fit_obb(pts)
    object_obb = fit_obb(np.vstack(clouds))
    analyses = {}
    for part in labeled.part_ids:
        pm = labeled.part_mesh(part)
        category = classify_part(part, all_obbs, pm)
        direction = principal_direction(part, category, all_obbs, object_obb, pm)
        analyses[part] = PartAnalysis(part, all_obbs[part], category, direction)
    return analyses, object_obb
