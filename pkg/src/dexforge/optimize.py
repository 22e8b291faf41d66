"""Projected gradient descent over grasp poses.

Each step re-freezes correspondences (nearest points, signed-distance
signs, contact forces and branch), takes one analytic gradient, clips it
per parameter group, and updates (T, R, theta): plain step on T, a
right-multiplied rotation retraction on R, and a step clamped to joint
limits on theta. The whole batch advances together through vectorized
kinematics, mesh queries, and force subproblems; elements are
mathematically independent, so reordering the batch only permutes the
outputs. A non-finite gradient removes the element from further updates
and marks it failed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from dexforge.energy import EnergyBreakdown, Scene, _barrier_terms, _DIST_FLOOR
from dexforge.hand import PALM_TAGS, GraspPose, HandModel

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    steps: int = 300
    step_translation: float = 1e-3
    step_rotation: float = 5e-3
    step_joints: float = 5e-3
    grad_clip: float = 1.0
    anneal_every: int = 100
    anneal_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if min(self.step_translation, self.step_rotation, self.step_joints) < 0:
            raise ValueError("step sizes must be nonnegative")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.anneal_every < 1:
            raise ValueError("anneal_every must be >= 1")


@dataclass
class ElementReport:
    """Per-pose record: breakdowns at entry and exit, the energy after
    every step (trace[i] is the energy after i steps, so the length is
    steps + 1; a failed element's trace repeats its last value), the
    first trace index on the rescaled-force branch (None if never), and
    failure bookkeeping."""

    initial: EnergyBreakdown
    final: EnergyBreakdown
    energy_trace: np.ndarray
    branch_switch_step: int | None
    steps_taken: int
    failed: bool = False
    failure_step: int | None = None


@dataclass
class OptimizationReport:
    elements: list = field(default_factory=list)

    @property
    def num_failed(self):
        return sum(1 for e in self.elements if e.failed)


# ---------------------------------------------------------------------------
# batched quaternion helpers (w, x, y, z)


def _quat_to_matrix_batch(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _quat_from_axis_angle_batch(v):
    ang = np.linalg.norm(v, axis=1)
    half = 0.5 * ang
    q = np.empty((len(v), 4))
    q[:, 0] = np.cos(half)
    # sin(x)/x, series for tiny angles
    small = ang < 1e-12
    k = np.empty(len(v))
    k[~small] = np.sin(half[~small]) / ang[~small]
    k[small] = 0.5
    q[:, 1:] = v * k[:, None]
    return q


def _quat_multiply_batch(a, b):
    w1, x1, y1, z1 = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    w2, x2, y2, z2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=1,
    )


# ---------------------------------------------------------------------------
# batched kinematics and energy (same math as dexforge.energy, one extra
# leading batch axis; parity with the scalar path is pinned by tests)


def _fk_batch(hand, R, T, theta):
    B = len(T)
    L = len(hand.links)
    rot = np.zeros((B, L, 3, 3))
    pos = np.zeros((B, L, 3))
    axes = np.zeros((B, hand.dof, 3))
    origins = np.zeros((B, hand.dof, 3))
    rot[:, hand.root] = R
    pos[:, hand.root] = T
    eye = np.eye(3)
    for l in hand.topo_order:
        j = hand.parent_joint[l]
        if j == -1:
            continue
        js = hand.joints[j]
        p = hand.joint_parent[j]
        Rp = rot[:, p]
        Rj = Rp @ js.origin_rotation
        pj = pos[:, p] + Rp @ js.origin_translation
        a = js.axis
        K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
        c = np.cos(theta[:, j])[:, None, None]
        s = np.sin(theta[:, j])[:, None, None]
        rot[:, l] = Rj @ (eye + s * K + (1.0 - c) * (K @ K))
        pos[:, l] = pj
        axes[:, j] = Rj @ a
        origins[:, j] = pj
    return rot, pos, axes, origins


class _BatchProblem:
    """Static per-(hand, scene, split) data plus scratch for one batch."""

    def __init__(self, hand: HandModel, scene: Scene, weights, split):
        self.hand = hand
        self.scene = scene
        self.weights = weights
        self.split = split
        pts, nrm, tags, links = hand._split_candidates[split]
        self.cand_local = pts
        self.cand_nrm_local = nrm
        self.cand_links = links
        tags = np.array(tags)
        self.tip_mask = ~np.isin(tags, list(PALM_TAGS))
        self.palm_mask = ~self.tip_mask
        wpts, _, wtags, wlinks = hand._split_candidates["wrap"]
        bar = np.array([t not in PALM_TAGS for t in wtags])
        self.bar_local = wpts[bar]
        self.bar_links = wlinks[bar]

    def world_points(self, rot, pos):
        def place(local, links):
            Rl = rot[:, links]
            return pos[:, links] + np.einsum("bkij,kj->bki", Rl, local)

        cand = place(self.cand_local, self.cand_links)
        cand_n = np.einsum(
            "bkij,kj->bki", rot[:, self.cand_links], self.cand_nrm_local
        )
        tips = place(self.bar_local, self.bar_links)
        spheres = place(self.hand.sphere_local, self.hand.sphere_link)
        return cand, cand_n, tips, spheres


class _BatchContext:
    """Frozen correspondences for one step of the whole batch."""

    __slots__ = (
        "inward",
        "dis_cp",
        "pen_cp",
        "pen_sign",
        "forces",
        "stable",
        "P",
        "plain",
    )


def _assemble_batch(prob: _BatchProblem, rot, pos, seeds=None):
    hand, scene, w = prob.hand, prob.scene, prob.weights
    cand, cand_n, tips, spheres = prob.world_points(rot, pos)
    B, m, _ = cand.shape
    S = spheres.shape[1]
    k = int(prob.tip_mask.sum())

    # each step re-queries from scratch; last step's faces only prime the
    # search with an upper bound, results are unchanged
    part_sub = scene.labeled.part_mesh(scene.target_part)
    contacts = cand[:, prob.tip_mask]
    rp = part_sub.closest_points(
        contacts.reshape(-1, 3),
        method="bvh",
        seed_faces=None if seeds is None else seeds.get("part"),
    )
    ctx = _BatchContext()
    ctx.inward = -part_sub.feature_normals(rp.face_index, rp.region).reshape(B, k, 3)

    flat = np.concatenate([cand.reshape(-1, 3), spheres.reshape(-1, 3)])
    rw = scene.labeled.mesh.closest_points(
        flat,
        method="bvh",
        seed_faces=None if seeds is None else seeds.get("whole"),
    )
    if seeds is not None:
        seeds["part"] = rp.face_index
        seeds["whole"] = rw.face_index
    ctx.dis_cp = rw.point[: B * m].reshape(B, m, 3)
    pen_cp = rw.point[B * m :].reshape(B, S, 3)
    pen_nrm = scene.labeled.mesh.feature_normals(
        rw.face_index[B * m :], rw.region[B * m :]
    ).reshape(B, S, 3)
    ctx.pen_cp = pen_cp
    ctx.pen_sign = np.where(
        np.einsum("bsi,bsi->bs", spheres - pen_cp, pen_nrm) >= 0.0, 1.0, -1.0
    )

    # force subproblems, all faces of all elements at once
    x = (contacts - scene.center) / scene.half_diagonal
    c = ctx.inward
    A = np.concatenate([c, np.cross(x, c)], axis=2).transpose(0, 2, 1)  # (B,6,k)
    ctx.plain = np.linalg.norm(A.sum(axis=2), axis=1)
    M = 2.0 * np.einsum("bij,bik->bjk", A, A)
    sv = np.linalg.svd(A, compute_uv=False)
    L = 2.0 * sv[:, 0] ** 2
    F = np.ones((B, k, k))
    diag = np.arange(k)
    for _ in range(500):
        F -= np.matmul(F, M) / L[:, None, None]
        np.clip(F, 0.0, 1.0, out=F)
        F[:, diag, diag] = 1.0
    vals = np.linalg.norm(np.matmul(F, A.transpose(0, 2, 1)), axis=2)
    best = vals.argmin(axis=1)
    rows = np.arange(B)
    ctx.forces = F[rows, best]
    ctx.P = vals[rows, best]
    ctx.stable = (ctx.P < w.tau_fc) & (ctx.forces.min(axis=1) >= w.tau_f)
    return ctx


def _eval_batch(prob: _BatchProblem, ctx, rot, pos, theta):
    hand, scene, w = prob.hand, prob.scene, prob.weights
    cand, cand_n, tips, spheres = prob.world_points(rot, pos)
    B = len(cand)

    x = (cand[:, prob.tip_mask] - scene.center) / scene.half_diagonal
    scale = np.where(ctx.stable[:, None], ctx.forces, 1.0)
    sc = scale[:, :, None] * ctx.inward
    force = sc.sum(axis=1)
    torque = np.cross(x, sc).sum(axis=1)
    fc = np.sqrt(np.einsum("bi,bi->b", force, force) + np.einsum("bi,bi->b", torque, torque))

    if len(scene.off_points):
        d = np.linalg.norm(
            tips[:, :, None, :] - scene.off_points[None, None, :, :], axis=-1
        )
        d = np.maximum(d, _DIST_FLOOR)
        b, _ = _barrier_terms(d, w.d_thr)
        bar = b.sum(axis=(1, 2))
    else:
        bar = np.zeros(B)

    gap = cand - ctx.dis_cp
    dist = np.linalg.norm(gap, axis=2)
    dis = dist[:, prob.tip_mask].sum(axis=1)
    dis = dis + w.w_palm * np.abs(dist[:, prob.palm_mask] - w.d_0).sum(axis=1)

    dirv = (1.0 - np.einsum("bki,bki->bk", ctx.inward, cand_n[:, prob.tip_mask])).sum(axis=1)

    sd = ctx.pen_sign * np.linalg.norm(spheres - ctx.pen_cp, axis=2)
    pen = (np.maximum(0.0, hand.sphere_radii - sd) ** 2).sum(axis=1)

    if len(hand.self_pair_i):
        dv = np.linalg.norm(
            spheres[:, hand.self_pair_i] - spheres[:, hand.self_pair_j], axis=2
        )
        rr = hand.sphere_radii[hand.self_pair_i] + hand.sphere_radii[hand.self_pair_j]
        spen = (np.maximum(0.0, rr - dv) ** 2).sum(axis=1)
    else:
        spen = np.zeros(B)

    over = np.maximum(0.0, theta - hand.upper)
    under = np.maximum(0.0, hand.lower - theta)
    limit = (over**2 + under**2).sum(axis=1)

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
        w.w_fc * fc
        + w.w_bar * bar
        + w.w_dis * dis
        + w.w_dir * dirv
        + w.w_pen * pen
        + w.w_spen * spen
        + w.w_limit * limit
    )
    return total, terms


def _grad_batch(prob: _BatchProblem, ctx, rot, pos, theta, R, T, frames_axes, frames_origins):
    hand, scene, w = prob.hand, prob.scene, prob.weights
    cand, cand_n, tips, spheres = prob.world_points(rot, pos)
    B = len(cand)
    g = np.zeros((B, 6 + hand.dof))

    def add_points(q, gq, links):
        """q, gq: (B, P, 3); links: (P,)."""
        g[:, :3] += gq.sum(axis=1)
        qw = np.einsum("bpi,bij->bpj", q - T[:, None, :], R)
        gw = np.einsum("bpi,bij->bpj", gq, R)
        g[:, 3:6] += np.cross(qw, gw).sum(axis=1)
        arm = q[:, :, None, :] - frames_origins[:, None, :, :]
        cr = np.cross(arm, gq[:, :, None, :])
        contrib = np.einsum("bpji,bji->bpj", cr, frames_axes)
        g[:, 6:] += (contrib * hand.ancestor_mask[links][None]).sum(axis=1)

    def add_directions(n, gn, links):
        nw = np.einsum("bpi,bij->bpj", n, R)
        gw = np.einsum("bpi,bij->bpj", gn, R)
        g[:, 3:6] += np.cross(nw, gw).sum(axis=1)
        cr = np.cross(n, gn)
        contrib = np.einsum("bpi,bji->bpj", cr, frames_axes)
        g[:, 6:] += (contrib * hand.ancestor_mask[links][None]).sum(axis=1)

    tip_links = prob.cand_links[prob.tip_mask]

    if w.w_fc > 0:
        points = cand[:, prob.tip_mask]
        x = (points - scene.center) / scene.half_diagonal
        scale = np.where(ctx.stable[:, None], ctx.forces, 1.0)
        sc = scale[:, :, None] * ctx.inward
        force = sc.sum(axis=1)
        torque = np.cross(x, sc).sum(axis=1)
        norm = np.sqrt(
            np.einsum("bi,bi->b", force, force) + np.einsum("bi,bi->b", torque, torque)
        )
        coef = np.where(norm > 0, w.w_fc / (norm * scene.half_diagonal), 0.0)
        gq = coef[:, None, None] * scale[:, :, None] * np.cross(
            ctx.inward, torque[:, None, :]
        )
        add_points(points, gq, tip_links)

    if w.w_bar > 0 and len(scene.off_points):
        diff = tips[:, :, None, :] - scene.off_points[None, None, :, :]
        d = np.linalg.norm(diff, axis=-1)
        safe = np.maximum(d, _DIST_FLOOR)
        _, db = _barrier_terms(safe, w.d_thr)
        coef = np.where(d > 0, db / safe, 0.0)
        gt = w.w_bar * np.einsum("bkm,bkmi->bki", coef, diff)
        add_points(tips, gt, prob.bar_links)

    if w.w_dis > 0:
        gap = cand - ctx.dis_cp
        dist = np.linalg.norm(gap, axis=2)
        unit = np.where(
            dist[:, :, None] > 0, gap / np.maximum(dist, 1e-300)[:, :, None], 0.0
        )
        coef = np.where(
            prob.tip_mask[None, :], 1.0, w.w_palm * np.sign(dist - w.d_0)
        )
        add_points(cand, w.w_dis * coef[:, :, None] * unit, prob.cand_links)

    if w.w_dir > 0:
        gn = np.broadcast_to(-w.w_dir * ctx.inward, ctx.inward.shape)
        add_directions(cand_n[:, prob.tip_mask], gn, tip_links)

    if w.w_pen > 0:
        vec = spheres - ctx.pen_cp
        dist = np.linalg.norm(vec, axis=2)
        sd = ctx.pen_sign * dist
        depth = np.maximum(0.0, hand.sphere_radii - sd)
        coef = np.where(
            (depth > 0) & (dist > 0),
            -2.0 * w.w_pen * depth * ctx.pen_sign / np.maximum(dist, 1e-300),
            0.0,
        )
        add_points(spheres, coef[:, :, None] * vec, hand.sphere_link)

    if w.w_spen > 0 and len(hand.self_pair_i):
        i, j = hand.self_pair_i, hand.self_pair_j
        vec = spheres[:, i] - spheres[:, j]
        dist = np.linalg.norm(vec, axis=2)
        rr = hand.sphere_radii[i] + hand.sphere_radii[j]
        overlap = np.maximum(0.0, rr - dist)
        coef = np.where(
            (overlap > 0) & (dist > 0),
            -2.0 * w.w_spen * overlap / np.maximum(dist, 1e-300),
            0.0,
        )
        gp = coef[:, :, None] * vec
        add_points(spheres[:, i], gp, hand.sphere_link[i])
        add_points(spheres[:, j], -gp, hand.sphere_link[j])

    if w.w_limit > 0:
        over = np.maximum(0.0, theta - hand.upper)
        under = np.maximum(0.0, hand.lower - theta)
        g[:, 6:] += w.w_limit * (2.0 * over - 2.0 * under)

    return g


def _clip_group(g, lo, hi, limit):
    n = np.linalg.norm(g[:, lo:hi], axis=1)
    s = np.where(n > limit, limit / np.maximum(n, 1e-300), 1.0)
    g[:, lo:hi] *= s[:, None]


def _breakdown(total, terms, ctx, b):
    return EnergyBreakdown(
        total=float(total[b]),
        terms={k: float(v[b]) for k, v in terms.items()},
        contact_forces=ctx.forces[b].copy(),
        wrench_norm=float(ctx.P[b]),
        stable=bool(ctx.stable[b]),
    )


def _nan_breakdown():
    nan = float("nan")
    return EnergyBreakdown(total=nan, terms={k: nan for k in
        ("fc", "bar", "dis", "dir", "pen", "spen", "limit")})


def optimize_batch(poses, hand, scene, weights, split, config=None):
    """Descend the grasp energy for a batch of poses.

    Returns (final poses, OptimizationReport) in input order. A pose that
    produces a non-finite state or gradient is frozen where it stood,
    marked failed, and excluded from further steps; its trace repeats the
    last finite value (NaN throughout if the input itself was bad).
    """
    if config is None:
        config = OptimizerConfig()
    poses = [getattr(p, "pose", p) for p in poses]
    B = len(poses)
    if B == 0:
        return [], OptimizationReport()

    prob = _BatchProblem(hand, scene, weights, split)
    quat = np.array([p.rotation for p in poses])
    T = np.array([p.translation for p in poses])
    theta = np.array([p.theta for p in poses])
    seeds = {}

    trace = np.full((B, config.steps + 1), np.nan)
    active = np.ones(B, dtype=bool)
    branch_switch = np.full(B, -1, dtype=int)
    failure_step = np.full(B, -1, dtype=int)
    steps_taken = np.zeros(B, dtype=int)
    initial = [None] * B
    final = [None] * B
    out_pose = [None] * B

    def fail(b, step, why):
        # freeze the element at its current pose and sanitize the batch
        # slot so downstream linear algebra never sees non-finite input
        log.warning("pose %d: %s at step %d, excluded from optimization", b, why, step)
        failure_step[b] = step
        active[b] = False
        if np.isfinite(T[b]).all() and np.isfinite(quat[b]).all() and np.isfinite(theta[b]).all():
            out_pose[b] = GraspPose(T[b].copy(), quat[b].copy(), theta[b].copy())
        else:
            out_pose[b] = poses[b]
        T[b] = 0.0
        quat[b] = (1.0, 0.0, 0.0, 0.0)
        theta[b] = np.clip(0.0, hand.lower, hand.upper)

    def refresh():
        R = _quat_to_matrix_batch(quat)
        rot, pos, axes, origins = _fk_batch(hand, R, T, theta)
        bad = ~(np.isfinite(pos).all(axis=(1, 2)) & np.isfinite(rot).all(axis=(1, 2, 3)))
        return R, rot, pos, axes, origins, bad

    R, rot, pos, axes, origins, bad = refresh()
    for b in np.nonzero(bad & active)[0]:
        fail(b, 0, "non-finite pose")
    if bad.any():
        R, rot, pos, axes, origins, _ = refresh()
    ctx = _assemble_batch(prob, rot, pos, seeds)
    total, terms = _eval_batch(prob, ctx, rot, pos, theta)
    trace[active, 0] = total[active]
    branch_switch[active & ctx.stable] = 0
    for b in range(B):
        initial[b] = _breakdown(total, terms, ctx, b) if failure_step[b] < 0 else _nan_breakdown()
        final[b] = initial[b]

    for step in range(config.steps):
        if not active.any():
            break
        g = _grad_batch(prob, ctx, rot, pos, theta, R, T, axes, origins)
        bad = ~np.isfinite(g).all(axis=1) & active
        for b in np.nonzero(bad)[0]:
            final[b] = _breakdown(total, terms, ctx, b)
            fail(b, step, "non-finite gradient")
        if not active.any():
            break

        _clip_group(g, 0, 3, config.grad_clip)
        _clip_group(g, 3, 6, config.grad_clip)
        _clip_group(g, 6, 6 + hand.dof, config.grad_clip)
        anneal = config.anneal_factor ** (step // config.anneal_every)

        upd = active
        T[upd] -= config.step_translation * anneal * g[upd, :3]
        dq = _quat_from_axis_angle_batch(-config.step_rotation * anneal * g[upd, 3:6])
        qn = _quat_multiply_batch(quat[upd], dq)
        nrm = np.linalg.norm(qn, axis=1, keepdims=True)
        # skip the division when already unit so a zero update is a no-op
        quat[upd] = np.where(np.abs(nrm - 1.0) > 1e-12, qn / nrm, qn)
        theta[upd] = np.clip(
            theta[upd] - config.step_joints * anneal * g[upd, 6:], hand.lower, hand.upper
        )
        steps_taken[upd] = step + 1

        R, rot, pos, axes, origins, bad = refresh()
        for b in np.nonzero(bad & active)[0]:
            fail(b, step + 1, "non-finite pose")
        if bad.any():
            R, rot, pos, axes, origins, _ = refresh()
        ctx = _assemble_batch(prob, rot, pos, seeds)
        total, terms = _eval_batch(prob, ctx, rot, pos, theta)
        trace[active, step + 1] = total[active]
        hit = active & ctx.stable & (branch_switch < 0)
        branch_switch[hit] = step + 1

    # forward-fill traces of elements that stopped early
    for b in range(B):
        row = trace[b]
        idx = np.nonzero(np.isfinite(row))[0]
        if len(idx) and idx[-1] < config.steps:
            row[idx[-1] + 1 :] = row[idx[-1]]

    report = OptimizationReport()
    out = []
    for b in range(B):
        if active[b]:
            final[b] = _breakdown(total, terms, ctx, b)
        if out_pose[b] is None:
            out_pose[b] = GraspPose(T[b].copy(), quat[b].copy(), theta[b].copy())
        out.append(out_pose[b])
        report.elements.append(
            ElementReport(
                initial=initial[b],
                final=final[b],
                energy_trace=trace[b].copy(),
                branch_switch_step=int(branch_switch[b]) if branch_switch[b] >= 0 else None,
                steps_taken=int(steps_taken[b]),
                failed=failure_step[b] >= 0,
                failure_step=int(failure_step[b]) if failure_step[b] >= 0 else None,
            )
        )
    return out, report


def energy_trace(init, hand, scene, weights, split=None, config=None):
    """Total energy after every step for a single element: a list of
    length steps + 1 whose first entry is the initial total. `init` may
    be a pose or an init carrying .pose and .split."""
    if split is None:
        split = getattr(init, "split", None)
        if split is None:
            raise ValueError("split not given and init carries none")
    pose = getattr(init, "pose", init)
    _, report = optimize_batch([pose], hand, scene, weights, split, config)
    return [float(v) for v in report.elements[0].energy_trace]
