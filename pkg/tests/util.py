"""Shared helpers for the test suite: random scene construction and
finite-difference gradient checking."""

import itertools

import numpy as np

from lotcast.scene import AgentAttr, Scene, Slot, VectorMap


def rand_attr(rng: np.random.Generator, category: str | None = None) -> AgentAttr:
    if category is None:
        category = "vehicle" if rng.random() < 0.7 else "pedestrian"
    if category == "vehicle":
        size = (float(rng.uniform(3.5, 5.0)), float(rng.uniform(1.6, 2.2)))
    else:
        size = (float(rng.uniform(0.4, 0.7)), float(rng.uniform(0.4, 0.7)))
    radius = 0.5 * float(np.hypot(*size))
    return AgentAttr(category=category, size=size, safety_radius=radius)


def rand_history(rng: np.random.Generator, t_past: int, spread: float) -> np.ndarray:
    """A kinematically plausible straight-ish history ending near a random point."""
    end = rng.uniform(-spread, spread, 2)
    heading = rng.uniform(-np.pi, np.pi)
    speed = rng.uniform(0.0, 4.0)
    vel = speed * np.array([np.cos(heading), np.sin(heading)])
    steps = np.arange(-(t_past - 1), 1)[:, None]
    dt = 0.4
    pos = end + steps * vel * dt + rng.normal(0, 0.05, (t_past, 2))
    out = np.zeros((t_past, 7))
    out[:, 0:2] = pos
    out[:, 2] = heading
    out[:, 3:5] = vel
    return out


def rand_map(rng: np.random.Generator, n_segments: int = 6) -> VectorMap:
    segs = []
    for _ in range(n_segments):
        a = rng.uniform(-25, 25, 2)
        b = a + rng.uniform(-6, 6, 2)
        if np.linalg.norm(b - a) < 0.5:
            b = a + np.array([1.0, 0.0])
        segs.append([a, b])
    polys = (np.array([[-25.0, -15.0], [25.0, -15.0]]),
             np.array([[-25.0, 15.0], [25.0, 15.0]]))
    slots = (Slot(center=(5.0, 8.0), heading=np.pi / 2, length=5.0, width=2.5),)
    return VectorMap(soft_polylines=polys,
                     hard_segments=np.array(segs, dtype=np.float64),
                     slots=slots)


def rand_scene(rng: np.random.Generator, n_agents: int = 4, t_past: int = 10,
               with_map: bool = True, spread: float = 12.0) -> Scene:
    attrs = [rand_attr(rng, "vehicle")]
    attrs += [rand_attr(rng) for _ in range(n_agents - 1)]
    histories = np.stack([rand_history(rng, t_past, spread) for _ in range(n_agents)])
    vmap = rand_map(rng) if with_map else None
    if vmap is None:
        return Scene(dt=0.4, attrs=tuple(attrs), histories=histories)
    return Scene(dt=0.4, attrs=tuple(attrs), histories=histories, map=vmap)


def rand_futures(rng: np.random.Generator, scene: Scene, t_f: int = 10,
                 wander: float = 0.6) -> np.ndarray:
    """Random futures continuing each agent's motion with noise."""
    last = scene.last_positions()
    vel = scene.histories[:, -1, 3:5]
    t = np.arange(1, t_f + 1)[None, :, None]
    base = last[:, None, :] + vel[:, None, :] * scene.dt * t
    return base + rng.normal(0, wander, (scene.n_agents, t_f, 2)).cumsum(axis=1) * 0.3


def composite_fd_safe(scene: Scene, Y: np.ndarray, token: np.ndarray,
                      weights, tol: float = 1e-3) -> bool:
    """True when no hinge, contact, or nearest-segment tie in any potential
    term is within ``tol`` of switching, so central differences are valid."""
    from lotcast import geom

    radii = scene.radii()
    N = Y.shape[0]
    # overlap hinges and coincidence
    for i in range(N):
        for j in range(i + 1, N):
            dist = np.linalg.norm(Y[i] - Y[j], axis=-1)
            if np.any(np.abs(dist - (radii[i] + radii[j])) < tol) or np.any(dist < tol):
                return False
    # obstacle hinges, contact boundaries, and nearest-segment ties
    segs = scene.map.hard_segments
    if segs.size:
        headings, src = geom.headings_from_positions(
            scene.last_positions(), scene.last_headings(), Y)
        sizes = scene.sizes()
        for i in range(N):
            corners = geom.footprint_corners(Y[i], headings[i],
                                             sizes[i, 0], sizes[i, 1])
            per_seg = np.stack([
                geom.footprint_segment_clearance(corners, segs[s:s + 1])[0]
                for s in range(len(segs))
            ], axis=-1)                                   # (T, S)
            dmin = per_seg.min(axis=-1)
            if np.any(dmin < tol) or np.any(np.abs(dmin - weights.m_obs) < tol):
                return False
            if per_seg.shape[-1] >= 2:
                two = np.sort(per_seg, axis=-1)[:, :2]
                near = two[:, 0] < weights.m_obs + tol
                if np.any(near & (two[:, 1] - two[:, 0] < tol)):
                    return False
        disp = np.diff(np.concatenate([scene.last_positions()[:, None, :], Y],
                                      axis=1), axis=1)
        if np.any(np.linalg.norm(disp, axis=-1) < max(tol, 1e-5)):
            return False
    # tube hinge
    d, _, _ = geom.point_segment_closest(Y[0], scene.last_positions()[0], token)
    if np.any(np.abs(d - weights.r_tube) < tol):
        return False
    # smoothness hinges
    v = np.diff(Y, axis=1) / scene.dt
    if np.any(np.abs(np.linalg.norm(v, axis=-1) - weights.v_max) < tol):
        return False
    if v.shape[1] >= 2:
        a = np.diff(v, axis=1) / scene.dt
        if np.any(np.abs(np.linalg.norm(a, axis=-1) - weights.a_max) < tol):
            return False
    return True


def fd_gradient(f, Y: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f over every coordinate of Y."""
    g = np.zeros_like(Y)
    flat = Y.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Y)
        flat[i] = orig - h
        fm = f(Y)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max |a-n| / max(1, |n|) over all coordinates."""
    scale = np.maximum(np.abs(numeric), 1.0)
    return float(np.max(np.abs(analytic - numeric) / scale))


# -- independent metric oracles (slow, loop/shapely based) -----------------------

def brute_ade_fde(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Displacement errors by explicit loops."""
    N, T, _ = pred.shape
    total, final = 0.0, 0.0
    for i in range(N):
        for t in range(T):
            d = float(np.hypot(pred[i, t, 0] - gt[i, t, 0], pred[i, t, 1] - gt[i, t, 1]))
            total += d
            if t == T - 1:
                final += d
    return total / (N * T), final / N


def brute_scene_miss(candidates: np.ndarray, gt: np.ndarray, threshold: float) -> bool:
    for cand in candidates:
        worst = 0.0
        for i in range(cand.shape[0]):
            worst = max(worst, float(np.linalg.norm(cand[i, -1] - gt[i, -1])))
        if worst <= threshold:
            return False
    return True


def brute_overlap(futures: np.ndarray, scene: Scene) -> bool:
    """Footprint-contact flag recomputed with shapely polygons."""
    from shapely.geometry import LineString, Polygon

    N, T, _ = futures.shape
    sizes = scene.sizes()
    cats = scene.categories()
    last_pos = scene.last_positions()
    last_head = scene.last_headings()

    polys: list[list[Polygon]] = []
    for i in range(N):
        heading = float(last_head[i])
        prev = last_pos[i]
        rows = []
        for t in range(T):
            d = futures[i, t] - prev
            if np.linalg.norm(d) >= 1e-6:
                heading = float(np.arctan2(d[1], d[0]))
            prev = futures[i, t]
            c, s = np.cos(heading), np.sin(heading)
            ax = np.array([c, s]) * sizes[i, 0] * 0.5
            ay = np.array([-s, c]) * sizes[i, 1] * 0.5
            p = futures[i, t]
            rows.append(Polygon([p + ax + ay, p - ax + ay, p - ax - ay, p + ax - ay]))
        polys.append(rows)

    for i in range(N):
        for j in range(i + 1, N):
            if cats[i] != "vehicle" and cats[j] != "vehicle":
                continue
            for t in range(T):
                if polys[i][t].intersects(polys[j][t]):
                    return True
    for i in range(N):
        if cats[i] != "vehicle":
            continue
        for seg in scene.map.hard_segments:
            line = LineString(seg)
            for t in range(T):
                if polys[i][t].intersects(line):
                    return True
    return False


def brute_ap(labels, ranking) -> float:
    """All-points average precision by direct accumulation."""
    ordered = [bool(labels[r]) for r in ranking]
    positives = sum(ordered)
    if positives == 0:
        return 0.0
    hits, total = 0, 0.0
    for rank, lab in enumerate(ordered, start=1):
        if lab:
            hits += 1
            total += hits / rank
    return total / positives


def brute_force_scenes(trajs, mode_scores, radii, valid, order, w_beam, k_scene):
    """Exhaustive joint-candidate enumeration; the oracle for the beam search.

    Scores every full mode assignment over the agents in ``order`` with the
    identical cost (negative mode scores plus weighted pairwise overlap) and
    returns the ``k_scene`` cheapest, ties broken by assignment tuple.
    """
    from lotcast.predictor import pair_overlap_costs

    N, M = mode_scores.shape
    overlap = pair_overlap_costs(trajs, radii)
    scored = []
    for assign in itertools.product(range(M), repeat=len(order)):
        cost = 0.0
        for pos, i in enumerate(order):
            cost += -float(mode_scores[i, assign[pos]])
            for prev_pos, j in enumerate(order[:pos]):
                cost += w_beam * float(overlap[i, j, assign[pos], assign[prev_pos]])
        scored.append((cost, assign))
    scored.sort(key=lambda e: (e[0], e[1]))
    choices = np.zeros((k_scene, N), dtype=np.int64)
    for k, (_, assign) in enumerate(scored[:k_scene]):
        for pos, i in enumerate(order):
            choices[k, i] = assign[pos]
    return choices, np.array([c for c, _ in scored[:k_scene]])
