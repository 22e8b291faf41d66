"""Grasp validation, contact metrics and caption generation.

A grasp enters the dataset only if it passes four checks: bounded hand-object
penetration, bounded self-penetration, quasi-static gravity resistance along
all six axis directions, and contact alignment with the target part.  Dynamic
simulation is out of scope here; the gravity check is a wrench-feasibility
proxy over linearized friction cones solved by nonnegative least squares.
Records produced downstream label it ``quasi_static_proxy`` so the
substitution stays visible.

Part-touch and part-grasp accuracy (PTA / PGA) score fingertip placement
against the target part, and :func:`caption` renders the fixed sentence
template used for every valid grasp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from dexforge.hand import (
    FINGER_TAGS,
    FINGERTIP_TAGS,
    collision_spheres_world,
    contact_candidates_world,
    forward_kinematics,
)
from dexforge.obb import fit_obb

GRAVITY_AXES = (
    ("+x", np.array([1.0, 0.0, 0.0])),
    ("-x", np.array([-1.0, 0.0, 0.0])),
    ("+y", np.array([0.0, 1.0, 0.0])),
    ("-y", np.array([0.0, -1.0, 0.0])),
    ("+z", np.array([0.0, 0.0, 1.0])),
    ("-z", np.array([0.0, 0.0, -1.0])),
)

# 16-edge polyhedral friction cone; residual tolerance is relative to m*g
_CONE_EDGES = 16
_RESIDUAL_RTOL = 1e-6

CAPTION_TEMPLATE = "Grasp the {part} of the {object} object, with contacts on {fingers}"


@dataclass(frozen=True)
class ValidationParams:
    """Thresholds and physical constants for :func:`validate`.

    Parameters
    ----------
    mu : float
        Friction coefficient of the linearized cones.
    mass : float
        Object mass in kg for the gravity proxy.
    gravity : float
        Gravitational acceleration magnitude, m/s^2.
    contact_eps : float
        A link counts as contacting below this distance (m).
    pen_limit, spen_limit : float
        Maximum tolerated penetration depths (m).
    metric_radius : float
        Fingertip-to-part radius for PTA / PGA (m).
    force_cap_scale : float
        Per-contact normal force cap, in multiples of m*g.
    """

    mu: float = 0.5
    mass: float = 0.1
    gravity: float = 9.81
    contact_eps: float = 0.002
    pen_limit: float = 0.003
    spen_limit: float = 0.003
    metric_radius: float = 0.01
    force_cap_scale: float = 10.0

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.mass <= 0 or self.gravity <= 0:
            raise ValueError("mass and gravity must be positive")
        for name in ("contact_eps", "pen_limit", "spen_limit", "metric_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.force_cap_scale <= 0:
            raise ValueError("force_cap_scale must be positive")


@dataclass(frozen=True)
class ValidationFlags:
    """Outcome of the four validity checks plus their witnesses."""

    pen_ok: bool
    spen_ok: bool
    gravity_ok: bool
    part_ok: bool
    max_pen: float
    max_spen: float
    gravity_fail_axes: tuple

    @property
    def valid(self):
        return self.pen_ok and self.spen_ok and self.gravity_ok and self.part_ok


@dataclass(frozen=True)
class ContactReport:
    """Links within ``contact_eps`` of the object surface.

    ``contacting_links`` holds one ``(link name, finger, distance, nearest
    part id)`` tuple per contacting link, in link order; ``distance`` is
    clamped at zero for penetrating links.  ``contacting_fingers`` lists the
    distinct finger names in canonical order (thumb first, palm last).
    ``points`` and ``inward_normals`` give, per contacting link, the closest
    object surface point and the unit normal pointing into the object; the
    gravity check builds its friction cones there.
    """

    contacting_links: tuple
    contacting_fingers: tuple
    points: np.ndarray
    inward_normals: np.ndarray


def penetration_check(pose, hand, labeled, limit=0.003):
    """Deepest sphere-into-object penetration against ``limit``.

    Depth per collision sphere is max(0, r - sd(center)); requires a
    watertight mesh.  Returns (pass, max depth in m).
    """
    frames = forward_kinematics(hand, pose)
    centers, radii, _ = collision_spheres_world(hand, frames)
    sd = labeled.signed_distance(centers)
    depth = float(np.max(np.maximum(0.0, radii - sd), initial=0.0))
    return depth < limit, depth


def self_penetration_check(pose, hand, limit=0.003):
    """Deepest sphere-sphere overlap between non-adjacent links.

    Returns (pass, max depth in m).  Adjacent-link and same-link pairs are
    excluded by construction of the hand's pair list.
    """
    frames = forward_kinematics(hand, pose)
    centers, radii, _ = collision_spheres_world(hand, frames)
    i, j = hand.self_pair_i, hand.self_pair_j
    if len(i) == 0:
        return True, 0.0
    gap = np.linalg.norm(centers[i] - centers[j], axis=1)
    depth = float(np.max(np.maximum(0.0, radii[i] + radii[j] - gap), initial=0.0))
    return depth < limit, depth


def _link_geometry(pose, hand, labeled):
    """Per-link clearances used by contact detection and part alignment.

    Returns (clearance (L,), part clearance (L, P), best sphere index (L,),
    world sphere centers (S, 3)).  Clearance is min over the link's spheres
    of (distance - radius); the
    whole-object column uses signed distance so interior centers stay
    negative, the per-part columns use surface distance.
    """
    frames = forward_kinematics(hand, pose)
    centers, radii, owner = collision_spheres_world(hand, frames)
    sd = labeled.signed_distance(centers) - radii
    pd = labeled.part_distances(centers) - radii[:, None]
    n_links = len(hand.links)
    clear = np.full(n_links, np.inf)
    part_clear = np.full((n_links, pd.shape[1]), np.inf)
    best = np.full(n_links, -1, dtype=int)
    for l in range(n_links):
        idx = np.nonzero(owner == l)[0]
        if len(idx) == 0:
            continue
        k = idx[np.argmin(sd[idx])]
        clear[l] = sd[k]
        best[l] = k
        part_clear[l] = pd[idx].min(axis=0)
    return clear, part_clear, best, centers


def contact_report(pose, hand, labeled, contact_eps=0.002):
    """Detect contacting links and their surface correspondences.

    A link contacts the object when its closest sphere surface is within
    ``contact_eps`` of the mesh (penetration included).
    """
    clear, part_clear, best, centers = _link_geometry(pose, hand, labeled)
    touching = [l for l in range(len(hand.links)) if clear[l] < contact_eps]
    part_ids = labeled.part_ids
    links = []
    seen = set()
    for l in touching:
        nearest = part_ids[int(np.argmin(part_clear[l]))]
        finger = hand.links[l].finger
        links.append((hand.links[l].name, finger, max(0.0, float(clear[l])), nearest))
        if finger is not None:
            seen.add(finger)
    fingers = tuple(t for t in FINGER_TAGS if t in seen)
    if touching:
        cp, _, out_n, _ = labeled.closest_on_parts(centers[best[touching]])
        points, inward = cp, -out_n
    else:
        points = np.zeros((0, 3))
        inward = np.zeros((0, 3))
    return ContactReport(tuple(links), fingers, points, inward)


def _cone_generators(normals, mu):
    """Edge generators of the linearized friction cones, (C, E, 3).

    Generators are n + mu*t with unit tangents t, so each intensity equals
    its normal-force contribution (n . gen = 1).
    """
    n = np.asarray(normals, dtype=float)
    ref = np.where(np.abs(n[:, :1]) < 0.9, (1.0, 0.0, 0.0), (0.0, 1.0, 0.0))
    u = ref - (ref * n).sum(axis=1, keepdims=True) * n
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(n, u)
    ang = 2.0 * np.pi * np.arange(_CONE_EDGES) / _CONE_EDGES
    t = np.cos(ang)[None, :, None] * u[:, None, :] + np.sin(ang)[None, :, None] * v[:, None, :]
    return n[:, None, :] + mu * t


def gravity_resist_check(
    contacts, center, mass=0.1, mu=0.5, gravity=9.81, force_cap_scale=10.0
):
    """Quasi-static wrench feasibility against gravity along the six axes.

    For each axis direction the contact set must balance a force of m*g
    through ``center`` (zero torque about it) using nonnegative cone-edge
    intensities, with each contact's total normal force capped at
    ``force_cap_scale * m * g``.  Feasibility is decided by the residual of a
    nonnegative least-squares solve with slack variables for the caps.

    Returns (pass, failing axis labels).  Zero contacts fail every axis.
    """
    labels = tuple(name for name, _ in GRAVITY_AXES)
    n_contacts = len(contacts.points)
    if n_contacts == 0:
        return False, labels
    gen = _cone_generators(contacts.inward_normals, mu)
    arm = contacts.points - np.asarray(center, dtype=float).reshape(3)
    torque = np.cross(arm[:, None, :], gen)
    wrench = np.concatenate([gen, torque], axis=2).reshape(-1, 6).T  # (6, C*E)
    m_g = mass * gravity
    cap = force_cap_scale * m_g
    n_cols = n_contacts * _CONE_EDGES
    system = np.zeros((6 + n_contacts, n_cols + n_contacts))
    system[:6, :n_cols] = wrench
    for i in range(n_contacts):
        system[6 + i, i * _CONE_EDGES : (i + 1) * _CONE_EDGES] = 1.0
        system[6 + i, n_cols + i] = 1.0
    rhs = np.zeros(6 + n_contacts)
    rhs[6:] = cap
    fail = []
    for name, direction in GRAVITY_AXES:
        rhs[:3] = -m_g * direction
        _, residual = nnls(system, rhs)
        if residual >= _RESIDUAL_RTOL * m_g:
            fail.append(name)
    return not fail, tuple(fail)


def part_alignment_check(pose, hand, labeled, target_part, contact_eps=0.002):
    """Every contacting link must be nearest to the target part.

    Requires at least one contacting link; a free-floating hand fails.
    """
    part_ids = labeled.part_ids
    if target_part not in part_ids:
        raise KeyError(f"unknown part id {target_part}")
    col = part_ids.index(target_part)
    clear, part_clear, _, _ = _link_geometry(pose, hand, labeled)
    touching = np.nonzero(clear < contact_eps)[0]
    if len(touching) == 0:
        return False
    for l in touching:
        row = part_clear[l]
        others = np.delete(row, col)
        if len(others) and row[col] >= others.min():
            return False
    return True


def _fingers_on_part(pose, hand, labeled, target_part, radius):
    """Distinct fingers with a fingertip candidate within ``radius`` of the
    target part and strictly nearer to it than to any other part."""
    part_ids = labeled.part_ids
    if target_part not in part_ids:
        raise KeyError(f"unknown part id {target_part}")
    col = part_ids.index(target_part)
    frames = forward_kinematics(hand, pose)
    cands = contact_candidates_world(hand, frames, "wrap")
    mask = np.array([t in FINGERTIP_TAGS for t in cands.tags])
    points = cands.points[mask]
    tags = [t for t in cands.tags if t in FINGERTIP_TAGS]
    if len(points) == 0:
        return set()
    d = labeled.part_distances(points)
    near = d[:, col] < radius
    closer = np.ones(len(points), dtype=bool)
    for p in range(d.shape[1]):
        if p != col:
            closer &= d[:, col] < d[:, p]
    return {t for t, ok in zip(tags, near & closer) if ok}


def pta(pose, hand, labeled, target_part, radius=0.01):
    """Part-touch accuracy: at least one fingertip on the target part."""
    return len(_fingers_on_part(pose, hand, labeled, target_part, radius)) >= 1


def pga(pose, hand, labeled, target_part, radius=0.01):
    """Part-grasp accuracy: at least three fingertips on the target part."""
    return len(_fingers_on_part(pose, hand, labeled, target_part, radius)) >= 3


def caption(part_name, object_name, contacting_fingers):
    """Instantiate the caption template for a valid grasp.

    Fingers must be non-empty and are joined in the order given; callers
    pass them in canonical order (thumb first, palm last).
    """
    fingers = list(contacting_fingers)
    if not fingers:
        raise ValueError("caption requires at least one contacting finger")
    return CAPTION_TEMPLATE.format(
        part=part_name, object=object_name, fingers=", ".join(fingers)
    )


def validate(pose, hand, labeled, target_part, params=None, object_obb=None):
    """Run all four checks and caption the grasp if it is valid.

    Returns (flags, contact report, caption or None).  ``object_obb``
    supplies the gravity-wrench center; when omitted it is fitted to the
    mesh vertices.
    """
    if params is None:
        params = ValidationParams()
    pen_ok, max_pen = penetration_check(pose, hand, labeled, limit=params.pen_limit)
    spen_ok, max_spen = self_penetration_check(pose, hand, limit=params.spen_limit)
    report = contact_report(pose, hand, labeled, contact_eps=params.contact_eps)
    if object_obb is None:
        object_obb = fit_obb(labeled.mesh.vertices)
    gravity_ok, fail_axes = gravity_resist_check(
        report,
        object_obb.center,
        mass=params.mass,
        mu=params.mu,
        gravity=params.gravity,
        force_cap_scale=params.force_cap_scale,
    )
    part_ok = part_alignment_check(
        pose, hand, labeled, target_part, contact_eps=params.contact_eps
    )
    flags = ValidationFlags(
        pen_ok, spen_ok, gravity_ok, part_ok, max_pen, max_spen, fail_axes
    )
    text = None
    if flags.valid:
        text = caption(
            labeled.part_names[target_part],
            labeled.object_name or "object",
            report.contacting_fingers,
        )
    return flags, report, text
