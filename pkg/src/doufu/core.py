"""Trajectory, road segment and route types plus parsing, validation and snapping.

All types are frozen dataclasses; operations return new objects.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from . import geo

DEFAULT_ZONE_K = 5
DEFAULT_ROAD_CLASSES = 5
DEFAULT_SNAP_RADIUS_M = 50.0

TRAJ_HEADER = ["traj_id", "user_id", "t", "lat", "lng"]
NETWORK_HEADER = ["seg_id", "start_node", "end_node", "polyline", "in_edges", "out_edges",
                  "length_m", "width_m", "lane_count", "point_count", "road_class", "zone"]


class TrajectoryError(Exception):
    pass


class ParseError(TrajectoryError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(TrajectoryError):
    def __init__(self, errors: Sequence[str] | str, field_name: str | None = None):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        self.field = field_name
        super().__init__("; ".join(self.errors))


class UnmatchedPointError(TrajectoryError):
    def __init__(self, index: int, radius_m: float):
        super().__init__(f"GPS point {index} has no road segment within {radius_m:g} m")
        self.index = index


@dataclass(frozen=True)
class GpsPoint:
    lat: float
    lng: float
    t: int

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or math.isnan(self.lat):
            raise ValidationError(f"lat out of range: {self.lat}", "lat")
        if not (-180.0 <= self.lng <= 180.0) or math.isnan(self.lng):
            raise ValidationError(f"lng out of range: {self.lng}", "lng")
        if self.t < 0:
            raise ValidationError(f"t must be non-negative: {self.t}", "t")


@dataclass(frozen=True)
class Trajectory:
    """A trip. Ordering/length invariants are checked by :func:`validate_trajectory`,
    not at construction, so that invalid input can be reported in full."""
    id: str
    user: str
    points: tuple[GpsPoint, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))

    def __len__(self):
        return len(self.points)

    @property
    def lats(self) -> np.ndarray:
        return np.array([p.lat for p in self.points], dtype=float)

    @property
    def lngs(self) -> np.ndarray:
        return np.array([p.lng for p in self.points], dtype=float)

    @property
    def times(self) -> np.ndarray:
        return np.array([p.t for p in self.points], dtype=np.int64)


@dataclass(frozen=True)
class TrajectorySet:
    user: str
    trajectories: tuple[Trajectory, ...]

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        for tr in self.trajectories:
            if tr.user != self.user:
                raise ValidationError(
                    f"trajectory {tr.id} has user {tr.user}, set user is {self.user}", "user")


@dataclass(frozen=True)
class FunctionalZoneVector:
    proportions: tuple[float, ...]

    def __post_init__(self):
        p = tuple(float(v) for v in self.proportions)
        object.__setattr__(self, "proportions", p)
        if any(v < 0.0 or v > 1.0 for v in p):
            raise ValidationError("zone proportions must lie in [0, 1]", "zone")
        if abs(sum(p) - 1.0) > 1e-9:
            raise ValidationError(f"zone proportions sum to {sum(p)}, expected 1", "zone")

    def as_array(self) -> np.ndarray:
        return np.array(self.proportions, dtype=float)


@dataclass(frozen=True)
class SegmentAttrs:
    length_m: float
    width_m: float
    lane_count: int
    point_count: int
    road_class: int
    zone: FunctionalZoneVector


@dataclass(frozen=True)
class RoadSegment:
    id: str
    polyline: tuple[tuple[float, float], ...]
    in_edges: frozenset[str]
    out_edges: frozenset[str]
    attrs: SegmentAttrs
    start_node: str = ""
    end_node: str = ""

    def __post_init__(self):
        object.__setattr__(self, "polyline", tuple((float(a), float(b)) for a, b in self.polyline))
        object.__setattr__(self, "in_edges", frozenset(self.in_edges))
        object.__setattr__(self, "out_edges", frozenset(self.out_edges))
        if len(self.polyline) < 2:
            raise ValidationError(f"segment {self.id}: polyline needs >= 2 points", "polyline")
        if not self.attrs.length_m > 0:
            raise ValidationError(f"segment {self.id}: length must be positive", "length_m")


@dataclass(frozen=True)
class Route:
    segments: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    def __len__(self):
        return len(self.segments)

    def is_connected(self, network: RoadNetwork) -> bool:
        return all(b in network.segments[a].out_edges
                   for a, b in zip(self.segments, self.segments[1:]))


@dataclass(frozen=True)
class RoadNetwork:
    segments: Mapping[str, RoadSegment]
    intersections: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    n_classes: int = DEFAULT_ROAD_CLASSES
    zone_k: int = DEFAULT_ZONE_K

    def __post_init__(self):
        segs = dict(self.segments)
        object.__setattr__(self, "segments", segs)
        if not self.intersections:
            nodes = {}
            for s in segs.values():
                nodes.setdefault(s.start_node or f"{s.id}:a", s.polyline[0])
                nodes.setdefault(s.end_node or f"{s.id}:b", s.polyline[-1])
            object.__setattr__(self, "intersections", nodes)
        else:
            object.__setattr__(self, "intersections", dict(self.intersections))
        for s in segs.values():
            for ref in s.in_edges | s.out_edges:
                if ref not in segs:
                    raise ValidationError(f"segment {s.id} references unknown segment {ref}")
            if not 0 <= s.attrs.road_class < self.n_classes:
                raise ValidationError(f"segment {s.id}: road_class {s.attrs.road_class} "
                                      f"outside [0, {self.n_classes})", "road_class")
            if len(s.attrs.zone.proportions) != self.zone_k:
                raise ValidationError(f"segment {s.id}: zone vector length "
                                      f"{len(s.attrs.zone.proportions)} != {self.zone_k}", "zone")

    def __len__(self):
        return len(self.segments)

    @cached_property
    def origin(self) -> tuple[float, float]:
        """Dataset-wide reference point (south-west corner of the intersections)."""
        pts = np.array(list(self.intersections.values()), dtype=float)
        return float(pts[:, 0].min()), float(pts[:, 1].min())

    @cached_property
    def _pieces(self):
        # every straight piece of every polyline in local meters, for vectorized snapping
        ids, ax, ay, bx, by = [], [], [], [], []
        order = list(self.segments)
        for k, sid in enumerate(order):
            poly = np.array(self.segments[sid].polyline)
            x, y = geo.to_local_m(poly[:, 0], poly[:, 1], self.origin)
            for i in range(len(poly) - 1):
                ids.append(k)
                ax.append(x[i]); ay.append(y[i]); bx.append(x[i + 1]); by.append(y[i + 1])
        return order, np.array(ids), np.array(ax), np.array(ay), np.array(bx), np.array(by)

    def distances_to_segments(self, lat: float, lng: float) -> np.ndarray:
        """Planar distance in meters from a point to every segment, in ``segments`` order."""
        order, ids, ax, ay, bx, by = self._pieces
        px, py = geo.to_local_m(lat, lng, self.origin)
        dx, dy = bx - ax, by - ay
        denom = dx * dx + dy * dy
        s = np.where(denom > 0, ((px - ax) * dx + (py - ay) * dy) / np.where(denom > 0, denom, 1.0), 0.0)
        s = np.clip(s, 0.0, 1.0)
        d = np.hypot(ax + s * dx - px, ay + s * dy - py)
        out = np.full(len(order), np.inf)
        np.minimum.at(out, ids, d)
        return out

    @cached_property
    def segment_bearings(self) -> np.ndarray:
        out = []
        for sid in self._pieces[0]:
            poly = self.segments[sid].polyline
            out.append(geo.bearing_rad(poly[0][0], poly[0][1], poly[-1][0], poly[-1][1]))
        return np.array(out, dtype=float)


# ---------------------------------------------------------------- trajectories I/O

def _records(source: TextIO | Iterable[str]):
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None:
        return
    if [h.strip() for h in header] != TRAJ_HEADER:
        raise ParseError(1, f"expected header {','.join(TRAJ_HEADER)}")
    for row in reader:
        yield reader.line_num, row


def parse_trajectories(source: TextIO | Iterable[str]) -> list[TrajectorySet]:
    """Read ``traj_id,user_id,t,lat,lng`` records and group them into per-user sets.

    Users and trajectories keep first-appearance order; points are sorted by time.
    """
    points: dict[str, list[GpsPoint]] = {}
    owner: dict[str, str] = {}
    users: dict[str, list[str]] = {}
    for line, row in _records(source):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 5:
            raise ParseError(line, f"expected 5 fields, got {len(row)}")
        tid, uid = row[0].strip(), row[1].strip()
        try:
            t = int(row[2])
            lat = float(row[3])
            lng = float(row[4])
        except ValueError as exc:
            raise ParseError(line, str(exc)) from None
        try:
            pt = GpsPoint(lat, lng, t)
        except ValidationError as exc:
            raise ValidationError([f"line {line}: {e}" for e in exc.errors], exc.field) from None
        if tid in owner and owner[tid] != uid:
            raise ParseError(line, f"trajectory {tid} appears with two users")
        if tid not in owner:
            owner[tid] = uid
            users.setdefault(uid, []).append(tid)
            points[tid] = []
        points[tid].append(pt)
    out = []
    for uid, tids in users.items():
        trajs = [Trajectory(tid, uid, sorted(points[tid], key=lambda p: p.t)) for tid in tids]
        out.append(TrajectorySet(uid, trajs))
    return out


def serialize_trajectories(sets: Sequence[TrajectorySet], sink: TextIO | None = None) -> str:
    buf = sink if sink is not None else io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJ_HEADER)
    for s in sets:
        for tr in s.trajectories:
            for p in tr.points:
                w.writerow([tr.id, tr.user, p.t, repr(p.lat), repr(p.lng)])
    return buf.getvalue() if sink is None else ""


def trajectory_errors(traj: Trajectory) -> list[str]:
    errs = []
    if len(traj.points) < 2:
        errs.append(f"too short: {len(traj.points)} point(s), need >= 2")
    for i in range(1, len(traj.points)):
        a, b = traj.points[i - 1].t, traj.points[i].t
        if b == a:
            errs.append(f"duplicate timestamp {b} at points {i - 1},{i}")
        elif b < a:
            errs.append(f"non-monotone timestamp at point {i}: {b} < {a}")
    return errs


def validate_trajectory(traj: Trajectory) -> Trajectory:
    """Return ``traj`` unchanged if it is valid, otherwise raise listing every violation."""
    errs = trajectory_errors(traj)
    if errs:
        raise ValidationError(errs)
    return traj


# ---------------------------------------------------------------- road network I/O

def _fmt(x: float) -> str:
    return repr(float(x))


def write_network(network: RoadNetwork, sink: TextIO) -> None:
    w = csv.writer(sink, lineterminator="\n")
    sink.write(f"# n_classes={network.n_classes} zone_k={network.zone_k}\n")
    w.writerow(NETWORK_HEADER)
    for s in network.segments.values():
        a = s.attrs
        w.writerow([
            s.id, s.start_node, s.end_node,
            ";".join(f"{_fmt(la)}:{_fmt(ln)}" for la, ln in s.polyline),
            ";".join(sorted(s.in_edges)), ";".join(sorted(s.out_edges)),
            _fmt(a.length_m), _fmt(a.width_m), a.lane_count, a.point_count, a.road_class,
            ":".join(_fmt(v) for v in a.zone.proportions),
        ])


def read_network(source: TextIO) -> RoadNetwork:
    meta = {"n_classes": DEFAULT_ROAD_CLASSES, "zone_k": DEFAULT_ZONE_K}
    lines = []
    for line in source:
        if line.startswith("#"):
            for tok in line[1:].split():
                k, _, v = tok.partition("=")
                if k in meta:
                    meta[k] = int(v)
            continue
        lines.append(line)
    reader = csv.reader(lines)
    header = next(reader, None)
    if header != NETWORK_HEADER:
        raise ParseError(1, "bad road network header")
    segs = {}
    nodes = {}
    for i, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(NETWORK_HEADER):
            raise ParseError(i, f"expected {len(NETWORK_HEADER)} fields, got {len(row)}")
        try:
            poly = tuple(tuple(float(v) for v in pair.split(":")) for pair in row[3].split(";"))
            zone = FunctionalZoneVector(tuple(float(v) for v in row[11].split(":")))
            attrs = SegmentAttrs(float(row[6]), float(row[7]), int(row[8]), int(row[9]),
                                 int(row[10]), zone)
        except ValueError as exc:
            raise ParseError(i, str(exc)) from None
        split = (lambda f: frozenset(x for x in f.split(";") if x))
        seg = RoadSegment(row[0], poly, split(row[4]), split(row[5]), attrs, row[1], row[2])
        segs[seg.id] = seg
        if seg.start_node:
            nodes.setdefault(seg.start_node, poly[0])
        if seg.end_node:
            nodes.setdefault(seg.end_node, poly[-1])
    return RoadNetwork(segs, nodes, meta["n_classes"], meta["zone_k"])


# ---------------------------------------------------------------- snapping

def _headings(lats, lngs):
    n = len(lats)
    out = np.full(n, np.nan)
    for i in range(n):
        a, b = max(i - 1, 0), min(i + 1, n - 1)
        if geo.haversine_m(lats[a], lngs[a], lats[b], lngs[b]) > 20.0:
            out[i] = geo.bearing_rad(lats[a], lngs[a], lats[b], lngs[b])
    return out


def snap_to_route(traj: Trajectory, network: RoadNetwork,
                  radius_m: float = DEFAULT_SNAP_RADIUS_M) -> Route:
    """Greedy nearest-segment matching with a two-hop continuity constraint.

    Candidates are scored by distance plus a heading-mismatch penalty, so the two
    directed twins of a street are told apart by the direction of travel.
    """
    if not network.segments:
        raise TrajectoryError("empty road network")
    validate_trajectory(traj)
    order = list(network.segments)
    index = {sid: k for k, sid in enumerate(order)}
    bearings = network.segment_bearings
    lats, lngs = traj.lats, traj.lngs
    heads = _headings(lats, lngs)

    dists = [network.distances_to_segments(lats[i], lngs[i]) for i in range(len(lats))]

    def scores(i):
        d = dists[i]
        s = d.copy()
        if not np.isnan(heads[i]):
            s += radius_m * (1.0 - np.cos(geo.wrap_angle(bearings - heads[i])))
        if i + 1 < len(dists):
            # look ahead one fix: settles which branch was taken at an intersection
            s += 0.5 * dists[i + 1]
        return d, s

    def two_hop(sid):
        out1 = network.segments[sid].out_edges
        reach = set(out1)
        for o in out1:
            reach |= network.segments[o].out_edges
        return reach

    assigned: list[str] = []
    cur = None
    n = len(lats)
    for i in range(n):
        d, s = scores(i)
        ok = d <= radius_m
        if not ok.any():
            raise UnmatchedPointError(i, radius_m)
        if cur is None:
            cand = np.flatnonzero(ok)
            cur = order[cand[np.argmin(s[cand])]]
            assigned.append(cur)
            continue
        if i == n - 1 and d[index[cur]] <= 0.5 * radius_m:
            # final fix at the end node: do not spill onto a continuation
            break
        s = s.copy()
        s[index[cur]] -= 0.2 * radius_m
        allowed = two_hop(cur) | {cur}
        cand = [k for k in np.flatnonzero(ok) if order[k] in allowed]
        if not cand:
            continue
        best = order[min(cand, key=lambda k: s[k])]
        if best != cur:
            if best not in network.segments[cur].out_edges:
                # two-hop jump: restore the skipped middle segment
                mids = [m for m in network.segments[cur].out_edges
                        if best in network.segments[m].out_edges]
                mid = min(mids, key=lambda m: d[index[m]])
                assigned.append(mid)
            assigned.append(best)
            cur = best
    route = Route(tuple(assigned))
    return route
