"""Exact 2D geometry for parking scenes.

Point/segment/oriented-rectangle primitives, vectorized over leading batch
axes. Everything is float64 numpy; angles are radians in the principal range
(-pi, pi]. Rectangles are represented by their four corners in
counter-clockwise order as produced by ``footprint_corners``.
"""

from __future__ import annotations

import numpy as np

_TINY = 1e-12


def wrap_angle(theta: np.ndarray | float) -> np.ndarray | float:
    """Wrap to the principal range (-pi, pi]."""
    return -(np.mod(-np.asarray(theta, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi)


def rot_matrix(theta: np.ndarray | float) -> np.ndarray:
    """Rotation matrices, shape (..., 2, 2)."""
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], axis=-1),
                     np.stack([s, c], axis=-1)], axis=-2)


def point_segment_closest(p: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Closest point on segment a-b to p, broadcasting over leading axes.

    Returns (distance, closest_point, t) with t in [0, 1] the clamped
    parameter along the segment. A zero-length segment degenerates to the
    point a.
    """
    p = np.asarray(p, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=-1), _TINY)
    t = np.clip(((p - a) * ab).sum(axis=-1) / denom, 0.0, 1.0)
    q = a + t[..., None] * ab
    d = np.linalg.norm(p - q, axis=-1)
    return d, q, t


def point_segment_distance(p, seg) -> float:
    """Distance from a single point to a single segment ((2,2) array)."""
    seg = np.asarray(seg, dtype=np.float64)
    d, _, _ = point_segment_closest(np.asarray(p, dtype=np.float64), seg[0], seg[1])
    return float(d)


def points_to_segments(points: np.ndarray, segs: np.ndarray):
    """Distances from points (..., 2) to each of S segments (S, 2, 2).

    Returns (dist (..., S), closest (..., S, 2)).
    """
    points = np.asarray(points, dtype=np.float64)
    segs = np.asarray(segs, dtype=np.float64)
    d, q, _ = point_segment_closest(points[..., None, :], segs[:, 0], segs[:, 1])
    return d, q


def footprint_corners(pos: np.ndarray, heading: np.ndarray | float,
                      length: np.ndarray | float, width: np.ndarray | float) -> np.ndarray:
    """Corners (..., 4, 2) of an oriented rectangle, counter-clockwise.

    ``length`` extends along the heading axis, ``width`` across it.
    """
    pos = np.asarray(pos, dtype=np.float64)
    heading = np.asarray(heading, dtype=np.float64)
    hl = np.asarray(length, dtype=np.float64) * 0.5
    hw = np.asarray(width, dtype=np.float64) * 0.5
    c, s = np.cos(heading), np.sin(heading)
    ax = np.stack([c, s], axis=-1)      # heading axis
    ay = np.stack([-s, c], axis=-1)     # lateral axis
    hl = hl[..., None] if np.ndim(hl) else hl
    hw = hw[..., None] if np.ndim(hw) else hw
    p, q = hl * ax, hw * ay
    return np.stack([pos + p + q, pos - p + q, pos - p - q, pos + p - q], axis=-2)


def _orient(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Twice the signed area of triangle (a, b, p); broadcasts."""
    return ((b[..., 0] - a[..., 0]) * (p[..., 1] - a[..., 1])
            - (b[..., 1] - a[..., 1]) * (p[..., 0] - a[..., 0]))


def segments_cross(a0, a1, b0, b1) -> np.ndarray:
    """True where closed segments a0-a1 and b0-b1 share at least one point."""
    d1 = _orient(a0, a1, b0)
    d2 = _orient(a0, a1, b1)
    d3 = _orient(b0, b1, a0)
    d4 = _orient(b0, b1, a1)
    proper = ((d1 * d2) < 0) & ((d3 * d4) < 0)

    def on_seg(a, b, p, d):
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        inside = np.all((p >= lo) & (p <= hi), axis=-1)
        return (d == 0) & inside

    touch = (on_seg(a0, a1, b0, d1) | on_seg(a0, a1, b1, d2)
             | on_seg(b0, b1, a0, d3) | on_seg(b0, b1, a1, d4))
    return proper | touch


def point_in_quad(corners: np.ndarray, p: np.ndarray) -> np.ndarray:
    """True where p lies inside or on a convex quad (corners (..., 4, 2))."""
    nxt = np.roll(corners, -1, axis=-2)
    d = _orient(corners, nxt, p[..., None, :])  # (..., 4)
    return np.all(d >= 0, axis=-1) | np.all(d <= 0, axis=-1)


def footprint_segment_clearance(corners: np.ndarray, segs: np.ndarray):
    """Clearance between oriented rectangles (..., 4, 2) and S segments.

    Returns, per leading-axis rectangle:
      dmin   (...):    0 if any segment touches the rectangle, else the min
                       distance to the nearest segment
      q_rect (..., 2): the rectangle-side point attaining dmin
      q_seg  (..., 2): the segment-side point attaining dmin
      contact (...):   boolean touch flag

    At contact the returned points are meaningless (distance sits on the
    flat 0 plateau and carries no gradient).
    """
    corners = np.asarray(corners, dtype=np.float64)
    segs = np.asarray(segs, dtype=np.float64)
    lead = corners.shape[:-2]
    S = segs.shape[0]
    A, B = segs[:, 0], segs[:, 1]
    edges_b = np.roll(corners, -1, axis=-2)

    # candidate group 1 — rect corner vs segment: (..., 4, S)
    d_cs, q_cs, _ = point_segment_closest(corners[..., :, None, :], A, B)
    # candidate group 2 — segment endpoint vs rect edge: (..., 4, S, 2)
    d_se, q_se, _ = point_segment_closest(
        segs, corners[..., :, None, None, :], edges_b[..., :, None, None, :])

    # stack 12 candidates per (rect, segment): [4 corner->seg, 8 endpoint->edge]
    d_all = np.concatenate([
        np.moveaxis(d_cs, -2, -1),                              # (..., S, 4)
        np.moveaxis(d_se, -3, -2).reshape(lead + (S, 8)),
    ], axis=-1)
    qr_all = np.concatenate([
        np.broadcast_to(corners[..., None, :, :], lead + (S, 4, 2)),
        np.moveaxis(q_se, -4, -3).reshape(lead + (S, 8, 2)),
    ], axis=-2)
    qs_all = np.concatenate([
        np.moveaxis(q_cs, -3, -2),                              # (..., S, 4, 2)
        np.broadcast_to(np.tile(segs[:, None, :, :], (1, 4, 1, 1)).reshape(S, 8, 2),
                        lead + (S, 8, 2)),
    ], axis=-2)

    flat_d = d_all.reshape(lead + (S * 12,))
    idx = np.argmin(flat_d, axis=-1)
    dmin = np.take_along_axis(flat_d, idx[..., None], axis=-1)[..., 0]
    q_rect = np.take_along_axis(qr_all.reshape(lead + (S * 12, 2)),
                                idx[..., None, None], axis=-2)[..., 0, :]
    q_seg = np.take_along_axis(qs_all.reshape(lead + (S * 12, 2)),
                               idx[..., None, None], axis=-2)[..., 0, :]

    contact = footprint_touches_segments(corners, segs).any(axis=-1)
    dmin = np.where(contact, 0.0, dmin)
    return dmin, q_rect, q_seg, contact


def footprint_touches_segments(corners: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Per-segment contact flags (..., S): edge crossing or endpoint inside."""
    corners = np.asarray(corners, dtype=np.float64)
    segs = np.asarray(segs, dtype=np.float64)
    A, B = segs[:, 0], segs[:, 1]
    edges_b = np.roll(corners, -1, axis=-2)
    cross = segments_cross(corners[..., :, None, :], edges_b[..., :, None, :], A, B)
    inside0 = point_in_quad(corners[..., None, :, :], A)        # (..., S)
    inside1 = point_in_quad(corners[..., None, :, :], B)
    return cross.any(axis=-2) | inside0 | inside1


def rect_segment_distance(corners: np.ndarray, seg: np.ndarray) -> float:
    """Distance between one rectangle (4, 2 corners) and one segment (2, 2)."""
    d, _, _, _ = footprint_segment_clearance(
        np.asarray(corners, dtype=np.float64),
        np.asarray(seg, dtype=np.float64)[None, :, :])
    return float(d)


def rects_overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Separating-axis contact test for oriented rectangles; touching counts.

    a, b: (..., 4, 2) corner arrays (broadcastable leading axes).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)

    def axes(c):
        e = np.roll(c, -1, axis=-2) - c            # (..., 4, 2)
        e = e[..., :2, :]                          # two unique directions
        n = np.stack([-e[..., 1], e[..., 0]], axis=-1)
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), _TINY)

    ax = np.concatenate([axes(a), axes(b)], axis=-2)               # (..., 4, 2)
    pa = (a[..., None, :, :] * ax[..., :, None, :]).sum(-1)        # (..., 4, 4)
    pb = (b[..., None, :, :] * ax[..., :, None, :]).sum(-1)
    sep = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))    # (..., 4)
    return ~sep.any(axis=-1)


def headings_from_positions(p_last: np.ndarray, h_last: np.ndarray,
                            futures: np.ndarray, eps: float = 1e-6):
    """Headings along predicted futures, derived from consecutive displacements.

    futures: (..., T, 2); p_last/h_last: (..., 2)/(...) last observed pose.
    Steps whose incoming displacement is shorter than ``eps`` reuse the most
    recent defined heading (ultimately ``h_last``).

    Returns (headings (..., T), src (..., T)) where src[t] is the index of the
    displacement whose atan2 defines heading t, or -1 when it falls back to
    the observed heading (constant w.r.t. the futures).
    """
    futures = np.asarray(futures, dtype=np.float64)
    p_last = np.asarray(p_last, dtype=np.float64)
    h_last = np.asarray(h_last, dtype=np.float64)
    prev = np.concatenate([p_last[..., None, :], futures[..., :-1, :]], axis=-2)
    disp = futures - prev                                    # (..., T, 2)
    norm = np.linalg.norm(disp, axis=-1)
    valid = norm >= eps
    T = futures.shape[-2]
    t_idx = np.broadcast_to(np.arange(T), valid.shape)
    src = np.where(valid, t_idx, -1)
    src = np.maximum.accumulate(src, axis=-1)                # forward-fill
    raw = np.arctan2(disp[..., 1], disp[..., 0])
    flat_raw = raw.reshape(-1, T)
    flat_src = src.reshape(-1, T)
    flat_h = np.broadcast_to(h_last, norm.shape[:-1]).reshape(-1)
    gather = np.where(flat_src >= 0,
                      np.take_along_axis(flat_raw, np.maximum(flat_src, 0), axis=-1),
                      flat_h[:, None])
    return gather.reshape(norm.shape), src


def polyline_segments(polyline: np.ndarray) -> np.ndarray:
    """(V, 2) vertex list -> (V-1, 2, 2) consecutive segments."""
    polyline = np.asarray(polyline, dtype=np.float64)
    return np.stack([polyline[:-1], polyline[1:]], axis=1)
