"""Oriented rectangle geometry for rod-shaped cells.

Cells are approximated by oriented boxes (center, half-extents, angle).  The
two quantities the contact functions need are the separation distance
between two boxes and the fraction of one box's perimeter lying within a
given distance of another box.  Both are computed in closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "OrientedBox",
    "box_distance",
    "point_box_distance",
    "perimeter_fraction_within",
]


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    half_len: float
    half_wid: float
    angle: float = 0.0

    @property
    def axes(self):
        c, s = math.cos(self.angle), math.sin(self.angle)
        return (c, s), (-s, c)

    def corners(self):
        """Corners in counter-clockwise order."""
        (ux, uy), (vx, vy) = self.axes
        a, b = self.half_len, self.half_wid
        out = []
        for sa, sb in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
            out.append((self.cx + sa * a * ux + sb * b * vx,
                        self.cy + sa * a * uy + sb * b * vy))
        return out

    def edges(self):
        cs = self.corners()
        return [(cs[i], cs[(i + 1) % 4]) for i in range(4)]

    @property
    def perimeter(self):
        return 4.0 * (self.half_len + self.half_wid)

    def to_local(self, x, y):
        (ux, uy), (vx, vy) = self.axes
        dx, dy = x - self.cx, y - self.cy
        return dx * ux + dy * uy, dx * vx + dy * vy

    def translated(self, dx, dy):
        return OrientedBox(self.cx + dx, self.cy + dy, self.half_len, self.half_wid, self.angle)


def point_box_distance(box: OrientedBox, x: float, y: float) -> float:
    lx, ly = box.to_local(x, y)
    ex = max(abs(lx) - box.half_len, 0.0)
    ey = max(abs(ly) - box.half_wid, 0.0)
    return math.hypot(ex, ey)


def _overlap(a: OrientedBox, b: OrientedBox) -> bool:
    # separating axis test over the four box axes
    ca, cb = a.corners(), b.corners()
    for ax in (*a.axes, *b.axes):
        pa = [px * ax[0] + py * ax[1] for px, py in ca]
        pb = [px * ax[0] + py * ax[1] for px, py in cb]
        if max(pa) < min(pb) or max(pb) < min(pa):
            return False
    return True


def box_distance(a: OrientedBox, b: OrientedBox) -> float:
    """Minimum Euclidean distance between two oriented boxes (0 if they touch or overlap)."""
    if _overlap(a, b):
        return 0.0
    # for disjoint convex polygons the minimum is attained at a vertex of one of them
    d = min(point_box_distance(b, x, y) for x, y in a.corners())
    return min(d, min(point_box_distance(a, x, y) for x, y in b.corners()))


def _segment_length_within(box: OrientedBox, p0, p1, radius: float) -> float:
    """Length of segment p0-p1 lying within ``radius`` of ``box``.

    In the box frame the squared distance along the segment is piecewise
    quadratic, with breakpoints where a coordinate crosses a box face.
    """
    x0, y0 = box.to_local(*p0)
    x1, y1 = box.to_local(*p1)
    dx, dy = x1 - x0, y1 - y0
    seg_len = math.hypot(dx, dy)
    if seg_len == 0.0:
        return 0.0
    h = (box.half_len, box.half_wid)
    q0, dq = (x0, y0), (dx, dy)
    breaks = {0.0, 1.0}
    for k in range(2):
        if dq[k] != 0.0:
            for face in (h[k], -h[k]):
                s = (face - q0[k]) / dq[k]
                if 0.0 < s < 1.0:
                    breaks.add(s)
    breaks = sorted(breaks)
    r2 = radius * radius
    inside = 0.0
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        if hi - lo <= 0.0:
            continue
        mid = 0.5 * (lo + hi)
        # squared excess = sum over active coordinates of (a + b s)^2
        A = B = C = 0.0
        for k in range(2):
            qm = q0[k] + mid * dq[k]
            if qm > h[k]:
                a, b = q0[k] - h[k], dq[k]
            elif qm < -h[k]:
                a, b = -q0[k] - h[k], -dq[k]
            else:
                continue
            A += b * b
            B += 2.0 * a * b
            C += a * a
        C -= r2
        if A == 0.0:
            if B == 0.0:
                if C <= 0.0:
                    inside += hi - lo
                continue
            # linear case cannot occur for an active coordinate with b == 0, kept for safety
            root = -C / B
            s_lo, s_hi = (lo, min(hi, root)) if B > 0 else (max(lo, root), hi)
        else:
            disc = B * B - 4.0 * A * C
            if disc < 0.0:
                continue
            sq = math.sqrt(disc)
            s_lo = max(lo, (-B - sq) / (2.0 * A))
            s_hi = min(hi, (-B + sq) / (2.0 * A))
        if s_hi > s_lo:
            inside += s_hi - s_lo
    return inside * seg_len


def perimeter_fraction_within(recipient: OrientedBox, donor: OrientedBox, radius: float) -> float:
    """Fraction of the recipient's perimeter within ``radius`` of the donor box."""
    total = sum(_segment_length_within(donor, p0, p1, radius) for p0, p1 in recipient.edges())
    return min(max(total / recipient.perimeter, 0.0), 1.0)
