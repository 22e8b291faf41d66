"""Articulated hand: description loading, forward kinematics, candidates.

A hand is a tree of links connected by revolute joints, loaded from a JSON
description (see docs/hand_description_format.md). Collision geometry is
spheres per link; grasp-relevant surface points are labeled contact
candidates with front normals and finger tags.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from dexforge.transforms import quat_normalize, quat_to_matrix, rpy_to_matrix

FINGER_TAGS = (
    "thumb",
    "forefinger",
    "middlefinger",
    "ringfinger",
    "littlefinger",
    "palm",
    "palm_pinch",
)
FINGERTIP_TAGS = FINGER_TAGS[:5]
# palm_pinch points sit deeper in front of the palm plate; the pinch split
# hovers on them so the curled thumb clears low obstacles beside the target.
PALM_TAGS = frozenset(("palm", "palm_pinch"))
WRAP_TAGS = frozenset(FINGER_TAGS) - frozenset(("palm_pinch",))
PINCH_TAGS = frozenset(("thumb", "forefinger", "middlefinger", "palm_pinch"))
SPLITS = ("wrap", "pinch")


@dataclass
class JointSpec:
    name: str
    parent_link: str
    child_link: str
    axis: np.ndarray
    origin_rotation: np.ndarray
    origin_translation: np.ndarray
    lower: float
    upper: float


@dataclass
class LinkSpec:
    name: str
    finger: str | None
    sphere_centers: np.ndarray  # (k, 3) link frame
    sphere_radii: np.ndarray  # (k,)
    candidate_points: np.ndarray  # (m, 3) link frame
    candidate_normals: np.ndarray  # (m, 3)
    candidate_tags: tuple


@dataclass
class GraspPose:
    """g = (T, R, theta): wrist translation, rotation quaternion (w,x,y,z),
    joint angles."""

    translation: np.ndarray
    rotation: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise ValueError("rotation quaternion not normalized")
        self.rotation = q / n
        self.theta = np.asarray(self.theta, dtype=float).ravel()

    @property
    def rotation_matrix(self):
        return quat_to_matrix(self.rotation)


@dataclass
class FkFrames:
    """World transforms per link plus world joint axes/origins (for
    jacobian-style derivative assembly downstream)."""

    rotations: np.ndarray  # (L, 3, 3)
    positions: np.ndarray  # (L, 3)
    joint_axes: np.ndarray  # (J, 3) world
    joint_origins: np.ndarray  # (J, 3) world


@dataclass
class CandidateSet:
    points: np.ndarray  # (m, 3) world
    normals: np.ndarray  # (m, 3) world, unit
    tags: tuple
    link_indices: np.ndarray  # (m,)

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        for k in range(len(self.points)):
            yield (self.points[k], self.normals[k], self.tags[k], int(self.link_indices[k]))


class HandModel:
    def __init__(self, name, links, joints, wrap_template, pinch_template):
        self.name = name
        self.links = links
        self.joints = joints
        self.dof = len(joints)
        self.wrap_template = np.asarray(wrap_template, dtype=float)
        self.pinch_template = np.asarray(pinch_template, dtype=float)
        self.wrap_candidate_tags = WRAP_TAGS
        self.pinch_candidate_tags = PINCH_TAGS
        self.link_index = {l.name: i for i, l in enumerate(links)}
        self._validate_tree()
        self.lower = np.array([j.lower for j in joints])
        self.upper = np.array([j.upper for j in joints])
        for label, tpl in (("wrap", self.wrap_template), ("pinch", self.pinch_template)):
            if tpl.shape != (self.dof,):
                raise ValueError(f"{label} template length {tpl.size} != dof {self.dof}")
            if ((tpl < self.lower - 1e-12) | (tpl > self.upper + 1e-12)).any():
                raise ValueError(f"{label} template outside joint limits")
        self._build_arrays()

    def _validate_tree(self):
        n = len(self.links)
        parent = [-1] * n
        self.joint_parent = np.zeros(self.dof, dtype=int)
        self.joint_child = np.zeros(self.dof, dtype=int)
        for j, js in enumerate(self.joints):
            for nm in (js.parent_link, js.child_link):
                if nm not in self.link_index:
                    raise ValueError(f"joint {js.name} references unknown link {nm}")
            p = self.link_index[js.parent_link]
            c = self.link_index[js.child_link]
            self.joint_parent[j] = p
            self.joint_child[j] = c
            if parent[c] != -1:
                raise ValueError("kinematic graph not a tree")
            parent[c] = j
        roots = [i for i in range(n) if parent[i] == -1]
        if len(roots) != 1:
            raise ValueError("kinematic graph not a tree")
        self.root = roots[0]
        self.parent_joint = parent  # joint index per link, -1 at root
        # child order sorted by depth so FK can run in one pass
        depth = [-1] * n
        depth[self.root] = 0
        order = [self.root]
        remaining = set(range(n)) - {self.root}
        while remaining:
            progressed = False
            for c in sorted(remaining):
                j = parent[c]
                p = self.joint_parent[j]
                if depth[p] >= 0:
                    depth[c] = depth[p] + 1
                    order.append(c)
                    remaining.discard(c)
                    progressed = True
            if not progressed:
                raise ValueError("kinematic graph not a tree")
        self.topo_order = order

    def _build_arrays(self):
        n = len(self.links)
        self.ancestor_mask = np.zeros((n, self.dof), dtype=bool)
        for l in range(n):
            j = self.parent_joint[l]
            while j != -1:
                self.ancestor_mask[l, j] = True
                j = self.parent_joint[self.joint_parent[j]]
        centers, radii, owner = [], [], []
        for i, link in enumerate(self.links):
            for k in range(len(link.sphere_radii)):
                centers.append(link.sphere_centers[k])
                radii.append(link.sphere_radii[k])
                owner.append(i)
        self.sphere_local = np.array(centers).reshape(-1, 3)
        self.sphere_radii = np.array(radii)
        self.sphere_link = np.array(owner, dtype=int)
        adjacent = set()
        for j in range(self.dof):
            a, b = int(self.joint_parent[j]), int(self.joint_child[j])
            adjacent.add((min(a, b), max(a, b)))
        pi, pj = [], []
        s = len(self.sphere_radii)
        for a in range(s):
            for b in range(a + 1, s):
                la, lb = int(self.sphere_link[a]), int(self.sphere_link[b])
                if la == lb or (min(la, lb), max(la, lb)) in adjacent:
                    continue
                pi.append(a)
                pj.append(b)
        self.self_pair_i = np.array(pi, dtype=int)
        self.self_pair_j = np.array(pj, dtype=int)

    @cached_property
    def _split_candidates(self):
        out = {}
        for split, tags in (("wrap", WRAP_TAGS), ("pinch", PINCH_TAGS)):
            pts, nrm, tg, li = [], [], [], []
            for i, link in enumerate(self.links):
                for k, tag in enumerate(link.candidate_tags):
                    if tag in tags:
                        pts.append(link.candidate_points[k])
                        nrm.append(link.candidate_normals[k])
                        tg.append(tag)
                        li.append(i)
            out[split] = (
                np.array(pts).reshape(-1, 3),
                np.array(nrm).reshape(-1, 3),
                tuple(tg),
                np.array(li, dtype=int),
            )
        return out

    def candidate_count(self, split):
        return len(self._split_candidates[split][2])


def _as_unit(v, what):
    v = np.asarray(v, dtype=float).reshape(3)
    if abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise ValueError(what)
    return v


def load_hand(description_file) -> HandModel:
    path = Path(description_file)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"malformed hand description: {e}") from e
    try:
        links = []
        for entry in raw["links"]:
            spheres = entry.get("collision_spheres", [])
            centers = np.array([s["center"] for s in spheres], dtype=float).reshape(-1, 3)
            radii = np.array([s["radius"] for s in spheres], dtype=float)
            if (radii <= 0).any():
                raise ValueError("non-positive sphere radius")
            cands = entry.get("contact_candidates", [])
            cpts = np.array([c["point"] for c in cands], dtype=float).reshape(-1, 3)
            cnrm = np.array(
                [_as_unit(c["front_normal"], "non-unit contact normal") for c in cands],
                dtype=float,
            ).reshape(-1, 3)
            tags = tuple(c["finger_tag"] for c in cands)
            for t in tags:
                if t not in FINGER_TAGS:
                    raise ValueError(f"unknown finger tag {t!r}")
            links.append(
                LinkSpec(
                    name=entry["name"],
                    finger=entry.get("finger"),
                    sphere_centers=centers,
                    sphere_radii=radii,
                    candidate_points=cpts,
                    candidate_normals=cnrm,
                    candidate_tags=tags,
                )
            )
        joints = []
        for entry in raw["joints"]:
            axis = _as_unit(entry["axis"], "non-unit joint axis")
            origin = entry.get("origin", {})
            rot = rpy_to_matrix(origin.get("rpy", (0.0, 0.0, 0.0)))
            trans = np.asarray(origin.get("xyz", (0.0, 0.0, 0.0)), dtype=float).reshape(3)
            lower = float(entry["lower"])
            upper = float(entry["upper"])
            if lower > upper:
                raise ValueError(f"joint {entry['name']} has lower > upper")
            joints.append(
                JointSpec(
                    name=entry["name"],
                    parent_link=entry["parent_link"],
                    child_link=entry["child_link"],
                    axis=axis,
                    origin_rotation=rot,
                    origin_translation=trans,
                    lower=lower,
                    upper=upper,
                )
            )
        return HandModel(
            name=raw.get("name", path.stem),
            links=links,
            joints=joints,
            wrap_template=raw["wrap_template"],
            pinch_template=raw["pinch_template"],
        )
    except KeyError as e:
        raise ValueError(f"malformed hand description: missing key {e}") from e


def forward_kinematics(hand: HandModel, pose: GraspPose) -> FkFrames:
    theta = np.asarray(pose.theta, dtype=float)
    if theta.shape != (hand.dof,):
        raise ValueError(f"theta length {theta.size} != dof {hand.dof}")
    L = len(hand.links)
    rotations = np.zeros((L, 3, 3))
    positions = np.zeros((L, 3))
    joint_axes = np.zeros((hand.dof, 3))
    joint_origins = np.zeros((hand.dof, 3))
    rotations[hand.root] = pose.rotation_matrix
    positions[hand.root] = pose.translation
    for l in hand.topo_order:
        j = hand.parent_joint[l]
        if j == -1:
            continue
        js = hand.joints[j]
        p = hand.joint_parent[j]
        Rj = rotations[p] @ js.origin_rotation
        pj = positions[p] + rotations[p] @ js.origin_translation
        c, s = np.cos(theta[j]), np.sin(theta[j])
        a = js.axis
        K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
        rot = np.eye(3) + s * K + (1.0 - c) * (K @ K)
        rotations[l] = Rj @ rot
        positions[l] = pj
        joint_axes[j] = Rj @ a
        joint_origins[j] = pj
    return FkFrames(rotations, positions, joint_axes, joint_origins)


def contact_candidates_world(hand: HandModel, frames: FkFrames, split: str) -> CandidateSet:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    local_pts, local_nrm, tags, link_idx = hand._split_candidates[split]
    R = frames.rotations[link_idx]
    points = frames.positions[link_idx] + np.einsum("kij,kj->ki", R, local_pts)
    normals = np.einsum("kij,kj->ki", R, local_nrm)
    return CandidateSet(points, normals, tags, link_idx)


def collision_spheres_world(hand: HandModel, frames: FkFrames):
    """World sphere centers and radii; third element maps sphere -> link."""
    R = frames.rotations[hand.sphere_link]
    centers = frames.positions[hand.sphere_link] + np.einsum(
        "kij,kj->ki", R, hand.sphere_local
    )
    return centers, hand.sphere_radii, hand.sphere_link


def joint_limit_energy(theta, lower, upper):
    """One-sided quadratic limit penalty and its gradient."""
    theta = np.asarray(theta, dtype=float)
    over = np.maximum(0.0, theta - upper)
    under = np.maximum(0.0, lower - theta)
    value = float(np.sum(over**2) + np.sum(under**2))
    grad = 2.0 * over - 2.0 * under
    return value, grad
