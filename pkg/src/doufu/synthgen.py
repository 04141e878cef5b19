"""Seeded grid road network and driver trajectory generator.

Drivers differ in cruising speed, jitter, how strongly their speed follows the road
class, route preference (shortest / fastest / habitual), destination land use,
home location and departure hours, so each modality carries some user signal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import networkx as nx
import numpy as np

from . import geo
from .core import (FunctionalZoneVector, GpsPoint, RoadNetwork, RoadSegment, Route,
                   SegmentAttrs, Trajectory, TrajectorySet, ValidationError)

# per road class: speed limit m/s, lanes
CLASS_SPEED = (20.0, 16.0, 13.0, 10.0, 8.0)
CLASS_LANES = (4, 3, 2, 2, 1)
LANE_WIDTH_M = 3.5
BASE_EPOCH = 1614556800  # 2021-03-01T00:00:00Z


@dataclass(frozen=True)
class NetworkSpec:
    grid_rows: int = 8
    grid_cols: int = 8
    cell_m: float = 400.0
    origin: tuple[float, float] = (39.90, 116.30)
    zone_seed: int = 7
    class_seed: int = 11
    zone_k: int = 5
    n_classes: int = 5

    def __post_init__(self):
        if self.grid_rows < 2 or self.grid_cols < 2:
            raise ValidationError("grid needs at least 2 rows and 2 columns", "grid")
        if not self.cell_m > 0:
            raise ValidationError("cell_m must be positive", "cell_m")
        if not 1 <= self.n_classes <= len(CLASS_SPEED):
            raise ValidationError(f"n_classes must be in [1, {len(CLASS_SPEED)}]", "n_classes")


@dataclass(frozen=True)
class RoutePref:
    weight_shortest: float
    weight_fastest: float
    weight_habit: float

    def __post_init__(self):
        w = (self.weight_shortest, self.weight_fastest, self.weight_habit)
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValidationError("route preference weights must be >= 0 and sum to 1", "route_pref")


@dataclass(frozen=True)
class DriverProfile:
    user: str
    speed_mean: float
    speed_std: float
    accel_jitter: float
    route_pref: RoutePref
    habit_zones: int
    departure_dist: tuple[float, ...]
    home_node: str | None = None
    home_prob: float = 0.5
    class_response: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "departure_dist", tuple(float(p) for p in self.departure_dist))
        if not self.speed_mean > 0:
            raise ValidationError("speed_mean must be positive", "speed_mean")
        if len(self.departure_dist) != 24 or min(self.departure_dist) < 0 \
                or abs(sum(self.departure_dist) - 1.0) > 1e-9:
            raise ValidationError("departure_dist must be 24 non-negative bins summing to 1",
                                  "departure_dist")


def _node(r, c):
    return f"{r}_{c}"


def generate_network(spec: NetworkSpec) -> RoadNetwork:
    """Grid of intersections with one directed segment per direction per grid edge."""
    R, C = spec.grid_rows, spec.grid_cols
    coords = {}
    for r in range(R):
        for c in range(C):
            lat, lng = geo.from_local_m(c * spec.cell_m, r * spec.cell_m, spec.origin)
            coords[_node(r, c)] = (float(lat), float(lng))

    crng = np.random.default_rng(spec.class_seed)
    probs = np.array([0.15, 0.2, 0.25, 0.25, 0.15][:spec.n_classes])
    probs = probs / probs.sum()
    row_class = crng.choice(spec.n_classes, size=R, p=probs)
    col_class = crng.choice(spec.n_classes, size=C, p=probs)

    # land use: a few district centres, each with a dominant category
    zrng = np.random.default_rng(spec.zone_seed)
    n_centres = max(spec.zone_k, (R * C) // 6)
    centres = zrng.uniform(0, 1, size=(n_centres, 2)) * [(C - 1) * spec.cell_m, (R - 1) * spec.cell_m]
    centre_cat = np.arange(n_centres) % spec.zone_k
    zrng.shuffle(centre_cat)
    scale = 1.5 * spec.cell_m
    node_zone = {}
    for r in range(R):
        for c in range(C):
            d2 = ((centres - [c * spec.cell_m, r * spec.cell_m]) ** 2).sum(axis=1)
            w = np.full(spec.zone_k, 0.05)
            np.add.at(w, centre_cat, np.exp(-d2 / (2 * scale ** 2)))
            node_zone[_node(r, c)] = w / w.sum()

    edges = []  # (u, v, class)
    for r in range(R):
        for c in range(C):
            if c + 1 < C:
                edges += [(_node(r, c), _node(r, c + 1), row_class[r]),
                          (_node(r, c + 1), _node(r, c), row_class[r])]
            if r + 1 < R:
                edges += [(_node(r, c), _node(r + 1, c), col_class[c]),
                          (_node(r + 1, c), _node(r, c), col_class[c])]
    sid = {(u, v): f"{u}>{v}" for u, v, _ in edges}
    starting = {}
    ending = {}
    for u, v, _ in edges:
        starting.setdefault(u, []).append(sid[u, v])
        ending.setdefault(v, []).append(sid[u, v])

    segs = {}
    for u, v, cls in edges:
        cls = int(cls)
        a, b = coords[u], coords[v]
        poly = [a, b] if cls < 2 else [a, ((a[0] + b[0]) / 2, (a[1] + b[1]) / 2), b]
        zone = (node_zone[u] + node_zone[v]) / 2
        zone = zone / zone.sum()
        attrs = SegmentAttrs(
            length_m=float(geo.haversine_m(a[0], a[1], b[0], b[1])),
            width_m=CLASS_LANES[cls] * LANE_WIDTH_M,
            lane_count=CLASS_LANES[cls],
            point_count=len(poly),
            road_class=cls,
            zone=FunctionalZoneVector(tuple(zone)),
        )
        me = sid[u, v]
        twin = sid[v, u]
        segs[me] = RoadSegment(
            me, poly,
            in_edges=frozenset(s for s in ending[u] if s != twin),
            out_edges=frozenset(s for s in starting[v] if s != twin),
            attrs=attrs, start_node=u, end_node=v)
    return RoadNetwork(segs, coords, spec.n_classes, spec.zone_k)


def make_profiles(n_users: int, network: RoadNetwork, seed: int = 0, home_prob: float = 0.5,
                  hour_spread: float = 1.0) -> list[DriverProfile]:
    """Draw ``n_users`` driver profiles with heterogeneous behaviour.

    ``hour_spread`` is the width (hours) of each departure peak; ``home_prob`` the
    chance a trip starts at the driver's home intersection.
    """
    rng = np.random.default_rng(seed)
    nodes = sorted(network.intersections)
    hours = np.arange(24)
    out = []
    for k in range(n_users):
        w = rng.dirichlet([0.6, 0.6, 0.6])
        w = w / w.sum()
        peaks = [rng.integers(6, 11), rng.integers(15, 21)]
        dep = np.full(24, 0.01)
        for h, m in zip(peaks, rng.dirichlet([2.0, 2.0])):
            d = np.minimum(np.abs(hours - h), 24 - np.abs(hours - h))
            dep += m * np.exp(-0.5 * (d / hour_spread) ** 2)
        dep = dep / dep.sum()
        out.append(DriverProfile(
            user=f"u{k:02d}",
            speed_mean=float(rng.uniform(8.0, 16.0)),
            speed_std=float(rng.uniform(0.5, 1.5)),
            accel_jitter=float(rng.uniform(0.2, 1.2)),
            route_pref=RoutePref(float(w[0]), float(w[1]), float(1.0 - w[0] - w[1])),
            habit_zones=int(rng.integers(network.zone_k)),
            departure_dist=tuple(dep),
            home_node=nodes[int(rng.integers(len(nodes)))],
            home_prob=home_prob,
            class_response=float(rng.uniform(0.0, 1.0)),
        ))
    return out


def _node_graph(network: RoadNetwork) -> nx.DiGraph:
    g = nx.DiGraph()
    for s in network.segments.values():
        g.add_edge(s.start_node, s.end_node, sid=s.id)
    return g


def _choose_route(g, network, profile, origin, dest, used, rng, mean_len, mean_time):
    pref = profile.route_pref
    noise = {}

    def cost(u, v, data):
        seg = network.segments[data["sid"]]
        length = seg.attrs.length_m
        t = length / CLASS_SPEED[seg.attrs.road_class]
        habit = 0.4 if seg.id in used else 1.0
        c = (pref.weight_shortest * length / mean_len
             + pref.weight_fastest * t / mean_time
             + pref.weight_habit * habit * length / mean_len)
        key = seg.id
        if key not in noise:
            noise[key] = math.exp(0.15 * rng.standard_normal())
        return c * noise[key]

    nodes = nx.dijkstra_path(g, origin, dest, weight=cost)
    return [g.edges[u, v]["sid"] for u, v in zip(nodes, nodes[1:])]


def _drive(network, segs, profile, t0, period, noise_m, rng):
    """Integrate speed along the route polyline at 1 s resolution, sample every ``period``."""
    pts = []
    cls = []
    for sid in segs:
        poly = network.segments[sid].polyline
        start = 0 if not pts else 1
        pts.extend(poly[start:])
        cls.extend([network.segments[sid].attrs.road_class] * (len(poly) - start))
    pts = np.array(pts)
    x, y = geo.to_local_m(pts[:, 0], pts[:, 1], network.origin)
    seglen = np.hypot(np.diff(x), np.diff(y))
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    total = cum[-1]
    piece_class = np.array(cls[1:])
    # turn points: polyline vertices where the heading changes
    head = np.arctan2(np.diff(y), np.diff(x))
    turns = cum[1:-1][np.abs(geo.wrap_angle(np.diff(head))) > 0.3]

    trip_speed = max(2.0, profile.speed_mean + profile.speed_std * rng.standard_normal())
    v = 0.5 * trip_speed
    s = 0.0
    t = 0
    samples = [(0, 0.0)]
    next_sample = period + int(rng.integers(-2, 3)) if period > 4 else period
    while s < total:
        k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(piece_class) - 1)
        mult = (CLASS_SPEED[piece_class[k]] / CLASS_SPEED[2]) ** profile.class_response
        target = trip_speed * mult
        if len(turns) and np.min(np.abs(turns - s)) < 40.0:
            target = min(target, 0.55 * trip_speed)
        v += 0.25 * (target - v) + profile.accel_jitter * rng.standard_normal()
        v = float(np.clip(v, 0.5, 30.0))
        s = min(total, s + v)
        t += 1
        if t >= next_sample and s < total:
            samples.append((t, s))
            next_sample = t + (period + int(rng.integers(-2, 3)) if period > 4 else period)
    if len(samples) > 1 and t - samples[-1][0] < 3:
        samples.pop()
    samples.append((t, total))

    out = []
    for ts, ss in samples:
        px = np.interp(ss, cum, x)
        py = np.interp(ss, cum, y)
        if noise_m > 0:
            px += noise_m * rng.standard_normal()
            py += noise_m * rng.standard_normal()
        lat, lng = geo.from_local_m(px, py, network.origin)
        out.append(GpsPoint(float(lat), float(lng), int(t0 + ts)))
    return out


def generate_dataset(network: RoadNetwork, profiles: Sequence[DriverProfile], per_user: int,
                     sample_period_s: float = 10.0, seed: int = 0, noise_m: float = 5.0,
                     min_hops: int = 4) -> tuple[list[TrajectorySet], dict[str, Route]]:
    """Generate ``per_user`` trajectories for every profile plus ground-truth routes.

    Each profile gets its own generator seeded with ``[seed, profile_index]``.
    """
    if per_user < 1:
        raise ValidationError("per_user must be >= 1", "per_user")
    if not sample_period_s > 0:
        raise ValidationError("sample_period_s must be positive", "sample_period_s")
    g = _node_graph(network)
    if not nx.is_strongly_connected(g):
        raise ValidationError("road network is not strongly connected")
    nodes = sorted(network.intersections)
    lens = np.array([s.attrs.length_m for s in network.segments.values()])
    times = np.array([s.attrs.length_m / CLASS_SPEED[s.attrs.road_class]
                      for s in network.segments.values()])
    mean_len, mean_time = float(lens.mean()), float(times.mean())
    zone_nodes = {}
    for n in nodes:
        zs = [network.segments[s].attrs.zone.as_array() for s in
              (sid for sid in network.segments if network.segments[sid].start_node == n)]
        zone_nodes.setdefault(int(np.argmax(np.mean(zs, axis=0))), []).append(n)
    hop = dict(nx.all_pairs_shortest_path_length(g))
    period = int(round(sample_period_s))

    sets = []
    routes = {}
    for pi, prof in enumerate(profiles):
        rng = np.random.default_rng([seed, pi])
        used: set[str] = set()
        trajs = []
        for k in range(per_user):
            for _ in range(200):
                if prof.home_node is not None and rng.random() < prof.home_prob:
                    o = prof.home_node
                else:
                    o = nodes[int(rng.integers(len(nodes)))]
                pool = zone_nodes.get(prof.habit_zones)
                if pool and rng.random() < 0.7:
                    d = pool[int(rng.integers(len(pool)))]
                else:
                    d = nodes[int(rng.integers(len(nodes)))]
                if hop[o].get(d, 0) >= min_hops:
                    break
            else:
                raise ValidationError(f"could not draw an origin/destination pair for {prof.user}")
            segs = _choose_route(g, network, prof, o, d, used, rng, mean_len, mean_time)
            used.update(segs)
            hour = int(rng.choice(24, p=np.array(prof.departure_dist)))
            t0 = BASE_EPOCH + k * 86400 + hour * 3600 + int(rng.integers(3600))
            pts = _drive(network, segs, prof, t0, period, noise_m, rng)
            tid = f"{prof.user}-{k:03d}"
            trajs.append(Trajectory(tid, prof.user, pts))
            routes[tid] = Route(tuple(segs))
        sets.append(TrajectorySet(prof.user, trajs))
    return sets, routes


def write_routes(routes: dict[str, Route], sink) -> None:
    for tid, r in routes.items():
        sink.write(f"{tid},{';'.join(r.segments)}\n")


def read_routes(source) -> dict[str, Route]:
    out = {}
    for line in source:
        line = line.strip()
        if not line:
            continue
        tid, _, segs = line.partition(",")
        out[tid] = Route(tuple(s for s in segs.split(";") if s))
    return out
