"""Road geometry: a procedurally generated route as an arc-length sampled
centreline with parallel lanes, plus Frenet-frame projection helpers.

Conventions: lane index 0 is the rightmost lane; lateral offset d is positive
to the LEFT of the centreline; headings are CCW radians from +x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError

POINT_SPACING = 2.0  # metres between centreline samples

SEGMENT_KINDS = (
    "straight",
    "curve",
    "ramp",
    "fork",
    "roundabout",
    "t_intersection",
    "intersection",
)


@dataclass
class Road:
    points: np.ndarray  # (N, 2) centreline samples
    headings: np.ndarray  # (N,) tangent heading at each sample
    arclength: np.ndarray  # (N,) cumulative arc length
    lane_count: int
    lane_width: float
    segment_kinds: list = field(default_factory=list)  # (kind, start_s, end_s)

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    @property
    def half_width(self) -> float:
        return 0.5 * self.lane_count * self.lane_width

    def lane_center_offset(self, lane: int) -> float:
        """Signed lateral offset of a lane centre from the road centreline."""
        return (lane - 0.5 * (self.lane_count - 1)) * self.lane_width

    def lane_open(self, lane: int) -> bool:
        return 0 <= lane < self.lane_count

    def to_cartesian(self, s: float, d: float):
        """(x, y, tangent heading) of the point at arc length s, offset d."""
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.arclength, s, side="right")) - 1
        i = min(max(i, 0), len(self.points) - 2)
        seg = self.arclength[i + 1] - self.arclength[i]
        t = 0.0 if seg <= 0 else (s - self.arclength[i]) / seg
        base = self.points[i] * (1 - t) + self.points[i + 1] * t
        h0, h1 = self.headings[i], self.headings[i + 1]
        h = h0 + t * _angdiff(h1, h0)
        # +d is to the left: normal = heading rotated +90 degrees
        nx, ny = -math.sin(h), math.cos(h)
        return float(base[0] + d * nx), float(base[1] + d * ny), float(h)

    def project(self, x: float, y: float, hint: int | None = None):
        """Project (x, y) to Frenet (s, d, tangent heading, index). A hint
        index restricts the search to a local window for speed; falls back to
        a global search when the local fit is poor."""
        p = np.array([x, y])
        n = len(self.points) - 1
        if hint is not None:
            lo, hi = max(0, hint - 8), min(n, hint + 24)
            best = self._project_range(p, lo, hi)
            if best is not None and best[4] <= 3.0 * self.half_width:
                return best[:4]
        best = self._project_range(p, 0, n)
        return best[:4]

    def _project_range(self, p: np.ndarray, lo: int, hi: int):
        a = self.points[lo:hi]
        b = self.points[lo + 1 : hi + 1]
        ab = b - a
        ap = p[None, :] - a
        denom = np.einsum("ij,ij->i", ab, ab)
        t = np.clip(np.einsum("ij,ij->i", ap, ab) / np.maximum(denom, 1e-12), 0.0, 1.0)
        proj = a + t[:, None] * ab
        d2 = np.einsum("ij,ij->i", p[None, :] - proj, p[None, :] - proj)
        k = int(np.argmin(d2))
        i = lo + k
        h = self.headings[i] + t[k] * _angdiff(self.headings[i + 1], self.headings[i])
        s = self.arclength[i] + t[k] * (self.arclength[i + 1] - self.arclength[i])
        rel = p - proj[k]
        # signed lateral: positive when left of the tangent
        d = float(-math.sin(h) * rel[0] + math.cos(h) * rel[1])
        return float(s), d, float(h), i, float(math.sqrt(d2[k]))

    def nearest_lane(self, d: float) -> int:
        lane = round(d / self.lane_width + 0.5 * (self.lane_count - 1))
        return int(min(max(lane, 0), self.lane_count - 1))


def _angdiff(a: float, b: float) -> float:
    d = math.fmod(a - b + math.pi, 2.0 * math.pi)
    if d <= 0.0:
        d += 2.0 * math.pi
    return d - math.pi


def _arc(entry_xy, entry_h, radius: float, angle: float):
    """Sample an arc of given signed sweep angle (positive = left turn).
    The circle centre sits 90 degrees to the turning side of the entry pose."""
    n = max(2, int(abs(angle) * radius / POINT_SPACING) + 1)
    sweep = np.linspace(0.0, angle, n + 1)[1:]
    side = 1.0 if angle >= 0 else -1.0
    cx = entry_xy[0] + side * radius * (-math.sin(entry_h))
    cy = entry_xy[1] + side * radius * math.cos(entry_h)
    a0 = entry_h - side * math.pi / 2.0
    pts = np.stack(
        [cx + radius * np.cos(a0 + sweep), cy + radius * np.sin(a0 + sweep)], axis=1
    )
    hs = entry_h + sweep
    return pts, hs


def _straight(entry_xy, entry_h, length: float):
    n = max(2, int(length / POINT_SPACING) + 1)
    ts = np.linspace(0.0, length, n + 1)[1:]
    pts = np.stack(
        [entry_xy[0] + ts * math.cos(entry_h), entry_xy[1] + ts * math.sin(entry_h)], axis=1
    )
    hs = np.full(len(ts), entry_h)
    return pts, hs


def _segment_recipe(kind: str, rng: np.random.Generator):
    """Piece list for one segment of the route. Every kind yields a drivable
    through-path; kinds differ in curvature pattern."""
    if kind == "straight":
        return [("straight", float(rng.uniform(40.0, 80.0)))]
    if kind == "curve":
        radius = float(rng.uniform(40.0, 90.0))
        angle = float(rng.uniform(math.radians(25), math.radians(80))) * (1 if rng.random() < 0.5 else -1)
        return [("arc", radius, angle)]
    if kind == "ramp":
        # gentle S: two opposing shallow arcs
        radius = float(rng.uniform(60.0, 120.0))
        angle = float(rng.uniform(math.radians(10), math.radians(25)))
        sign = 1 if rng.random() < 0.5 else -1
        return [("arc", radius, sign * angle), ("arc", radius, -sign * angle)]
    if kind == "fork":
        radius = float(rng.uniform(50.0, 90.0))
        angle = float(rng.uniform(math.radians(15), math.radians(40))) * (1 if rng.random() < 0.5 else -1)
        return [("straight", float(rng.uniform(15.0, 30.0))), ("arc", radius, angle)]
    if kind == "roundabout":
        r = float(rng.uniform(18.0, 28.0))
        entry_len = float(rng.uniform(10.0, 20.0))
        sweep = float(rng.uniform(math.radians(60), math.radians(120)))
        return [
            ("straight", entry_len),
            ("arc", r, -math.radians(25)),
            ("arc", r, sweep),
            ("arc", r, -math.radians(25)),
        ]
    if kind in ("t_intersection", "intersection"):
        # drive straight across; a turn variant picks a quarter arc
        if rng.random() < 0.5:
            return [("straight", float(rng.uniform(30.0, 50.0)))]
        radius = float(rng.uniform(20.0, 35.0))
        angle = math.radians(90) * (1 if rng.random() < 0.5 else -1)
        return [("arc", radius, angle)]
    raise ConfigError(f"unknown segment kind {kind!r}")


def build_road(
    rng: np.random.Generator,
    map_length: float,
    lane_count: int,
    lane_width: float,
    kind_weights: dict | None = None,
) -> Road:
    """Procedurally generate a route of at least map_length metres."""
    if lane_count < 1:
        raise ConfigError("lane_count must be >= 1")
    weights = dict.fromkeys(SEGMENT_KINDS, 1.0)
    weights["straight"] = 2.0
    if kind_weights:
        unknown = sorted(set(kind_weights) - set(SEGMENT_KINDS))
        if unknown:
            raise ConfigError(f"unknown segment kinds {unknown}")
        weights.update(kind_weights)
    kinds = [k for k in SEGMENT_KINDS if weights.get(k, 0.0) > 0.0]
    probs = np.array([weights[k] for k in kinds], dtype=np.float64)
    probs /= probs.sum()

    pts_list = [np.array([0.0, 0.0])]
    hs_list = [0.0]
    seg_spans = []
    total = 0.0

    def extend(pieces):
        nonlocal total
        for piece in pieces:
            if piece[0] == "arc":
                new_pts, new_hs = _arc(pts_list[-1], hs_list[-1], piece[1], piece[2])
            else:
                new_pts, new_hs = _straight(pts_list[-1], hs_list[-1], piece[1])
            prev = pts_list[-1]
            for q in new_pts:
                total += float(np.linalg.norm(q - prev))
                prev = q
            pts_list.extend(new_pts)
            hs_list.extend(new_hs)

    # lead-in straight so the spawn area is tame
    seg_spans.append(("straight", 0.0, None))
    extend([("straight", 30.0)])
    while total < map_length:
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        seg_spans.append((kind, total, None))
        extend(_segment_recipe(kind, rng))

    points = np.array(pts_list)
    headings = np.unwrap(np.array(hs_list))
    deltas = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arclength = np.concatenate([[0.0], np.cumsum(deltas)])
    spans = [
        (kind, s0, (seg_spans[i + 1][1] if i + 1 < len(seg_spans) else float(arclength[-1])))
        for i, (kind, s0, _) in enumerate(seg_spans)
    ]
    return Road(points, headings, arclength, lane_count, lane_width, spans)
