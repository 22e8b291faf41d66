"""Grasp energies and their pose gradient.

Terms: differentiable force closure (plain and LP-rescaled), part-contact
barrier, candidate distance, front-normal direction, penetration,
self-penetration, joint limits. The total's gradient is taken with respect
to (T, rotation tangent, theta) under a frozen-correspondence convention:
per evaluation step, the LP branch and forces, nearest points, inward
normals, and signed-distance signs are held fixed (envelope-style), and
the remaining dependence on the pose is differentiated analytically.
The finite-difference tests perturb the pose against the same frozen
context, so the two sides are comparable by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from dexforge.hand import (
    FINGERTIP_TAGS,
    PALM_TAGS,
    collision_spheres_world,
    contact_candidates_world,
    forward_kinematics,
    joint_limit_energy,
)

TERM_NAMES = ("fc", "bar", "dis", "dir", "pen", "spen", "limit")

_DIST_FLOOR = 1e-9


@dataclass
class ContactSet:
    """Contact positions with inward object normals. Positions are
    expressed relative to the object OBB center; the pipeline additionally
    scales them by the OBB half-diagonal so force and torque rows of the
    grasp matrix are commensurate."""

    positions: np.ndarray  # (n, 3)
    inward_normals: np.ndarray  # (n, 3) unit

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.inward_normals = np.atleast_2d(np.asarray(self.inward_normals, dtype=float))
        if len(self.positions) < 1:
            raise ValueError("contact set needs n >= 1")
        if self.positions.shape != self.inward_normals.shape:
            raise ValueError("positions and normals must pair up")
        norms = np.linalg.norm(self.inward_normals, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ValueError("inward normals must be unit vectors")

    def __len__(self):
        return len(self.positions)


@dataclass
class EnergyWeights:
    w_fc: float = 1.0
    w_bar: float = 10.0
    w_dis: float = 100.0
    w_palm: float = 1.0
    w_dir: float = 0.1
    w_pen: float = 1000.0
    w_spen: float = 1000.0
    w_limit: float = 100.0
    d_thr: float = 0.01
    d_0: float = 0.01
    tau_fc: float = 0.1
    tau_f: float = 0.1

    def __post_init__(self):
        for name in ("w_fc", "w_bar", "w_dis", "w_palm", "w_dir", "w_pen", "w_spen", "w_limit"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.d_thr <= 0:
            raise ValueError("d_thr must be positive")
        if self.d_0 < 0:
            raise ValueError("d_0 must be nonnegative")


@dataclass
class EnergyBreakdown:
    total: float
    terms: dict
    contact_forces: np.ndarray | None = None
    wrench_norm: float | None = None
    stable: bool | None = None


def grasp_matrix(contacts: ContactSet) -> np.ndarray:
    """G = [I3 ... I3; [x1]x ... [xn]x], shape (6, 3n)."""
    n = len(contacts)
    G = np.zeros((6, 3 * n))
    for i, x in enumerate(contacts.positions):
        G[:3, 3 * i : 3 * i + 3] = np.eye(3)
        G[3:, 3 * i : 3 * i + 3] = np.array(
            [[0.0, -x[2], x[1]], [x[2], 0.0, -x[0]], [-x[1], x[0], 0.0]]
        )
    return G


def _wrench_columns(contacts: ContactSet) -> np.ndarray:
    """A with columns a_i = [c_i; x_i cross c_i]; then G(f*c) = A f."""
    c = contacts.inward_normals
    t = np.cross(contacts.positions, c)
    return np.vstack([c.T, t.T])


def dfc_energy(contacts: ContactSet) -> float:
    A = _wrench_columns(contacts)
    return float(np.linalg.norm(A.sum(axis=1)))


def optimal_contact_forces(contacts: ContactSet, iterations: int = 500):
    """min_f ||G(f*c)|| s.t. max f = 1, 0 <= f <= 1.

    The max-f constraint makes the set a union of n faces {f_k = 1}; each
    face is a box-constrained least squares solved by projected gradient
    (step 1/L, L = 2||A||^2), and the best face wins. All n subproblems
    run as rows of one matrix iterate.
    """
    A = _wrench_columns(contacts)
    n = A.shape[1]
    M = 2.0 * (A.T @ A)
    L = 2.0 * np.linalg.norm(A, ord=2) ** 2
    F = np.ones((n, n))
    diag = np.arange(n)
    for _ in range(iterations):
        F -= (F @ M) / L
        np.clip(F, 0.0, 1.0, out=F)
        F[diag, diag] = 1.0
    values = np.linalg.norm(F @ A.T, axis=1)
    k = int(np.argmin(values))
    return F[k].copy(), float(values[k])


def lp_dfc_energy(contacts: ContactSet, weights: EnergyWeights):
    """The rescaled force-closure switch: keep the optimal-force wrench
    norm when the pose is already stable, else fall back to ||Gc||."""
    f, P = optimal_contact_forces(contacts)
    plain = dfc_energy(contacts)
    stable = P < weights.tau_fc and float(f.min()) >= weights.tau_f
    value = P if stable else plain
    return value, f, P, stable


def _barrier_terms(d, d_thr):
    """b(d) = -(d - d_thr)^2 ln(d / d_thr) on (0, d_thr), 0 beyond; returns
    (b, b') elementwise with d already floored away from zero."""
    inside = d < d_thr
    b = np.zeros_like(d)
    db = np.zeros_like(d)
    if inside.any():
        di = d[inside]
        gap = di - d_thr
        log = np.log(di / d_thr)
        b[inside] = -(gap**2) * log
        db[inside] = -2.0 * gap * log - gap**2 / di
    return b, db


def part_barrier_energy(fingertips, off_part_points, d_thr) -> float:
    """Sum of truncated barrier terms over every (fingertip, off-part
    sample) pair; repels fingertips from surfaces outside the target part."""
    fingertips = np.atleast_2d(fingertips)
    off = np.atleast_2d(off_part_points)
    if len(off) == 0 or len(fingertips) == 0:
        return 0.0
    d = np.linalg.norm(fingertips[:, None, :] - off[None, :, :], axis=-1)
    if (d <= 0).any():
        warnings.warn("barrier distance clamped to 1e-9", RuntimeWarning, stacklevel=2)
    d = np.maximum(d, _DIST_FLOOR)
    b, _ = _barrier_terms(d, d_thr)
    return float(b.sum())


def distance_energy(fingertips, palm_points, labeled, w_palm, d_0) -> float:
    """Sum of candidate-to-object distances plus the palm standoff term
    w_palm * |d_palm - d_0| (whole-object distances)."""
    value = 0.0
    if len(fingertips):
        _, d, _, _ = labeled.closest_on_parts(np.atleast_2d(fingertips))
        value += float(d.sum())
    if len(palm_points):
        _, d, _, _ = labeled.closest_on_parts(np.atleast_2d(palm_points))
        value += float(w_palm * np.abs(d - d_0).sum())
    return value


def direction_energy(contact_normals, front_normals) -> float:
    c = np.atleast_2d(contact_normals)
    n = np.atleast_2d(front_normals)
    if c.shape != n.shape:
        raise ValueError("normal lists must pair up")
    return float(np.sum(1.0 - np.einsum("ij,ij->i", c, n)))


def penetration_energy(centers, radii, labeled) -> float:
    sd = labeled.signed_distance(np.atleast_2d(centers))
    return float(np.sum(np.maximum(0.0, np.asarray(radii) - sd) ** 2))


def self_penetration_energy(centers, radii, pair_i, pair_j) -> float:
    if len(pair_i) == 0:
        return 0.0
    d = np.linalg.norm(centers[pair_i] - centers[pair_j], axis=1)
    overlap = np.maximum(0.0, radii[pair_i] + radii[pair_j] - d)
    return float(np.sum(overlap**2))


# ---------------------------------------------------------------------------
# total energy: scene, frozen context, evaluation, analytic gradient


@dataclass
class Scene:
    """Static per-(object, target part) data shared by a whole batch."""

    labeled: object
    target_part: int
    object_obb: object
    off_points: np.ndarray  # (m, 3) samples outside the target part
    center: np.ndarray
    half_diagonal: float


def prepare_scene(labeled, target_part, object_obb, off_samples=512) -> Scene:
    if target_part not in labeled.part_ids:
        raise KeyError("unknown part id")
    others = [p for p in labeled.part_ids if p != target_part]
    if others:
        rng = np.random.default_rng(0)
        off, _ = labeled.sample_off_part(target_part, off_samples, rng)
    else:
        off = np.zeros((0, 3))
    return Scene(
        labeled=labeled,
        target_part=target_part,
        object_obb=object_obb,
        off_points=off,
        center=np.asarray(object_obb.center, dtype=float),
        half_diagonal=float(np.linalg.norm(object_obb.half_extents)),
    )


@dataclass
class GraspContext:
    """Correspondences frozen for one evaluation step."""

    split: str
    tip_mask: np.ndarray  # contacts = split candidates that are fingertips
    palm_mask: np.ndarray
    contact_inward: np.ndarray  # (k, 3) frozen c_i
    dis_closest: np.ndarray  # (m, 3) per split candidate, whole object
    pen_closest: np.ndarray  # (S, 3)
    pen_sign: np.ndarray  # (S,)
    fc_forces: np.ndarray  # (k,)
    fc_stable: bool
    fc_P: float
    fc_plain: float


def _split_points(hand, frames, split):
    cands = contact_candidates_world(hand, frames, split)
    tags = np.array(cands.tags)
    tip_mask = ~np.isin(tags, list(PALM_TAGS))
    return cands, tip_mask, ~tip_mask


def _bar_points(hand, frames):
    """All fingertip candidates (wrap superset): the x_n of the barrier."""
    cands = contact_candidates_world(hand, frames, "wrap")
    mask = np.array([t in FINGERTIP_TAGS for t in cands.tags])
    return cands.points[mask], cands.link_indices[mask]


def assemble_context(pose, hand, scene, weights, split) -> GraspContext:
    frames = forward_kinematics(hand, pose)
    cands, tip_mask, palm_mask = _split_points(hand, frames, split)

    part_pts, _, part_nrm, _ = scene.labeled.closest_on_parts(
        cands.points[tip_mask], [scene.target_part]
    )
    inward = -part_nrm

    obj_cp, _, _, _ = scene.labeled.closest_on_parts(cands.points)

    centers, radii, _ = collision_spheres_world(hand, frames)
    cp_res = scene.labeled.mesh.closest_points(centers)
    sd = scene.labeled.signed_distance(centers)
    sign = np.where(sd >= 0.0, 1.0, -1.0)

    x = (cands.points[tip_mask] - scene.center) / scene.half_diagonal
    contacts = ContactSet(x, inward)
    plain = dfc_energy(contacts)
    f, P = optimal_contact_forces(contacts)
    stable = P < weights.tau_fc and float(f.min()) >= weights.tau_f

    return GraspContext(
        split=split,
        tip_mask=tip_mask,
        palm_mask=palm_mask,
        contact_inward=inward,
        dis_closest=obj_cp,
        pen_closest=cp_res.point,
        pen_sign=sign,
        fc_forces=f,
        fc_stable=stable,
        fc_P=P,
        fc_plain=plain,
    )


def _fc_wrench(points, ctx, scene):
    """Net wrench of the frozen branch at the given contact points."""
    x = (points - scene.center) / scene.half_diagonal
    c = ctx.contact_inward
    scale = ctx.fc_forces if ctx.fc_stable else np.ones(len(c))
    force = (scale[:, None] * c).sum(axis=0)
    torque = np.cross(x, scale[:, None] * c).sum(axis=0)
    return force, torque, scale


def eval_with_context(pose, hand, scene, weights, split, ctx) -> EnergyBreakdown:
    """Energy at `pose` with ctx's correspondences held fixed. Called with
    the assembling pose it gives the step's energy; called with a nearby
    pose it is the function the finite-difference oracle probes."""
    frames = forward_kinematics(hand, pose)
    cands, tip_mask, palm_mask = _split_points(hand, frames, split)

    force, torque, _ = _fc_wrench(cands.points[tip_mask], ctx, scene)
    fc = float(np.sqrt(force @ force + torque @ torque))

    tips, _ = _bar_points(hand, frames)
    if len(scene.off_points):
        d = np.linalg.norm(tips[:, None, :] - scene.off_points[None, :, :], axis=-1)
        d = np.maximum(d, _DIST_FLOOR)
        b, _ = _barrier_terms(d, weights.d_thr)
        bar = float(b.sum())
    else:
        bar = 0.0

    gap = cands.points - ctx.dis_closest
    dist = np.linalg.norm(gap, axis=1)
    dis = float(dist[tip_mask].sum())
    dis += float(weights.w_palm * np.abs(dist[palm_mask] - weights.d_0).sum())

    dirv = direction_energy(ctx.contact_inward, cands.normals[tip_mask])

    centers, radii, _ = collision_spheres_world(hand, frames)
    sd = ctx.pen_sign * np.linalg.norm(centers - ctx.pen_closest, axis=1)
    pen = float(np.sum(np.maximum(0.0, radii - sd) ** 2))

    spen = self_penetration_energy(centers, radii, hand.self_pair_i, hand.self_pair_j)

    limit, _ = joint_limit_energy(pose.theta, hand.lower, hand.upper)

    terms = {
        "fc": fc,
        "bar": bar,
        "dis": dis,
        "dir": dirv,
        "pen": pen,
        "spen": spen,
        "limit": limit,
    }
    total = (
        weights.w_fc * fc
        + weights.w_bar * bar
        + weights.w_dis * dis
        + weights.w_dir * dirv
        + weights.w_pen * pen
        + weights.w_spen * spen
        + weights.w_limit * limit
    )
    return EnergyBreakdown(
        total=float(total),
        terms=terms,
        contact_forces=ctx.fc_forces,
        wrench_norm=ctx.fc_P,
        stable=ctx.fc_stable,
    )


class _GradAccumulator:
    """Chains world-point and world-direction gradients into
    (T, rotation tangent, theta). Rotation tangent is the right-multiplied
    axis-angle increment on the wrist rotation."""

    def __init__(self, hand, pose, frames):
        self.hand = hand
        self.R = pose.rotation_matrix
        self.T = pose.translation
        self.frames = frames
        self.g = np.zeros(6 + hand.dof)

    def add_points(self, q, g_q, links):
        if len(q) == 0:
            return
        self.g[:3] += g_q.sum(axis=0)
        qw = (q - self.T) @ self.R
        gw = g_q @ self.R
        self.g[3:6] += np.cross(qw, gw).sum(axis=0)
        arm = q[:, None, :] - self.frames.joint_origins[None, :, :]
        cr = np.cross(arm, g_q[:, None, :])  # (P, J, 3)
        contrib = np.einsum("pji,ji->pj", cr, self.frames.joint_axes)
        mask = self.hand.ancestor_mask[links]
        self.g[6:] += (contrib * mask).sum(axis=0)

    def add_directions(self, n, g_n, links):
        if len(n) == 0:
            return
        nw = n @ self.R
        gw = g_n @ self.R
        self.g[3:6] += np.cross(nw, gw).sum(axis=0)
        cr = np.cross(n, g_n)  # (P, 3)
        contrib = cr @ self.frames.joint_axes.T
        mask = self.hand.ancestor_mask[links]
        self.g[6:] += (contrib * mask).sum(axis=0)


def analytic_gradient(pose, hand, scene, weights, split, ctx) -> np.ndarray:
    frames = forward_kinematics(hand, pose)
    cands, tip_mask, palm_mask = _split_points(hand, frames, split)
    acc = _GradAccumulator(hand, pose, frames)

    # force closure
    if weights.w_fc > 0:
        points = cands.points[tip_mask]
        force, torque, scale = _fc_wrench(points, ctx, scene)
        norm = float(np.sqrt(force @ force + torque @ torque))
        if norm > 0:
            g_q = (
                weights.w_fc
                * scale[:, None]
                * np.cross(ctx.contact_inward, torque)
                / (norm * scene.half_diagonal)
            )
            acc.add_points(points, g_q, cands.link_indices[tip_mask])

    # barrier
    if weights.w_bar > 0 and len(scene.off_points):
        tips, tip_links = _bar_points(hand, frames)
        diff = tips[:, None, :] - scene.off_points[None, :, :]
        d = np.linalg.norm(diff, axis=-1)
        safe = np.maximum(d, _DIST_FLOOR)
        _, db = _barrier_terms(safe, weights.d_thr)
        coef = np.where(d > 0, db / safe, 0.0)
        g_tips = weights.w_bar * np.einsum("km,kmi->ki", coef, diff)
        acc.add_points(tips, g_tips, tip_links)

    # distance
    if weights.w_dis > 0:
        gap = cands.points - ctx.dis_closest
        dist = np.linalg.norm(gap, axis=1)
        unit = np.where(dist[:, None] > 0, gap / np.maximum(dist, 1e-300)[:, None], 0.0)
        coef = np.where(
            tip_mask, 1.0, weights.w_palm * np.sign(dist - weights.d_0)
        )
        g_q = weights.w_dis * coef[:, None] * unit
        acc.add_points(cands.points, g_q, cands.link_indices)

    # direction
    if weights.w_dir > 0:
        g_n = -weights.w_dir * ctx.contact_inward
        acc.add_directions(
            cands.normals[tip_mask], g_n, cands.link_indices[tip_mask]
        )

    # penetration
    centers, radii, sphere_links = collision_spheres_world(hand, frames)
    if weights.w_pen > 0:
        vec = centers - ctx.pen_closest
        dist = np.linalg.norm(vec, axis=1)
        sd = ctx.pen_sign * dist
        depth = np.maximum(0.0, radii - sd)
        active = (depth > 0) & (dist > 0)
        if active.any():
            g_c = (
                -2.0
                * weights.w_pen
                * (depth * ctx.pen_sign / np.maximum(dist, 1e-300))[:, None]
                * vec
            )
            acc.add_points(centers[active], g_c[active], sphere_links[active])

    # self-penetration
    if weights.w_spen > 0 and len(hand.self_pair_i):
        i, j = hand.self_pair_i, hand.self_pair_j
        vec = centers[i] - centers[j]
        d = np.linalg.norm(vec, axis=1)
        overlap = np.maximum(0.0, radii[i] + radii[j] - d)
        active = (overlap > 0) & (d > 0)
        if active.any():
            u = vec[active] / d[active][:, None]
            g = -2.0 * weights.w_spen * overlap[active][:, None] * u
            acc.add_points(centers[i[active]], g, sphere_links[i[active]])
            acc.add_points(centers[j[active]], -g, sphere_links[j[active]])

    # joint limits
    if weights.w_limit > 0:
        _, g_l = joint_limit_energy(pose.theta, hand.lower, hand.upper)
        acc.g[6:] += weights.w_limit * g_l

    return acc.g


def total_energy(pose, hand, scene, weights, split):
    """One frozen-correspondence evaluation: breakdown plus gradient of
    length 6 + dof."""
    ctx = assemble_context(pose, hand, scene, weights, split)
    breakdown = eval_with_context(pose, hand, scene, weights, split, ctx)
    grad = analytic_gradient(pose, hand, scene, weights, split, ctx)
    return breakdown, grad
