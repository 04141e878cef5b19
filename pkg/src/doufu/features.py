"""Split a (trajectory, route) pair into movement, route and global inputs."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from . import geo
from .core import RoadNetwork, Route, Trajectory, TrajectoryError

QUANTITIES = ("speed", "accel", "speed_diff", "accel_diff", "angle_speed")
STATS = ("mean", "min", "max", "std", "q25", "q50", "q75")
MOVEMENT_DIM = len(QUANTITIES) * len(STATS)
LOC_SCALE = 1e-4
DEFAULT_WINDOW = 8
DEFAULT_STRIDE = 4
DEFAULT_BUFFER_M = 200.0


class FeatureError(TrajectoryError):
    pass


def route_dim(zone_k: int, n_classes: int) -> int:
    # bbox centre 2, bbox edges 2, area, direction, origin 2, destination 2, in, out,
    # zone K, length, width, point count, lane count, one-hot C
    return 16 + zone_k + n_classes


def global_dim(zone_k: int) -> int:
    # kinematic mean/std 10, O/D 4, bbox edges 2 + area, direction, path length,
    # departure one-hot 24, duration, zone O/D/diff 3K, route means 6
    return 50 + 3 * zone_k


@dataclass(frozen=True)
class KinematicSeries:
    speed: np.ndarray
    accel: np.ndarray
    speed_diff: np.ndarray
    accel_diff: np.ndarray
    angle_speed: np.ndarray

    def __len__(self):
        return len(self.speed)

    def matrix(self) -> np.ndarray:
        return np.stack([getattr(self, q) for q in QUANTITIES], axis=1)

    def valid(self, name: str) -> np.ndarray:
        """Entries that are not boundary padding."""
        n = len(self)
        keep = {"speed": n - 1, "accel": n - 2, "speed_diff": n - 2,
                "accel_diff": n - 3, "angle_speed": n - 2}[name]
        return getattr(self, name)[:max(keep, 0)]


def kinematics(traj: Trajectory) -> KinematicSeries:
    """Per-point speed, acceleration, |speed change|, |acceleration change| and turn rate.

    Interval quantities are stored at the index of the interval's first point; the
    trailing entries that have no defining interval are zero.
    """
    lat, lng, t = traj.lats, traj.lngs, traj.times.astype(float)
    n = len(lat)
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise FeatureError("time deltas must be positive")
    dist = geo.haversine_m(lat[:-1], lng[:-1], lat[1:], lng[1:])
    v = dist / dt
    brg = geo.bearing_rad(lat[:-1], lng[:-1], lat[1:], lng[1:])
    for i in range(len(brg)):
        if dist[i] == 0.0:
            brg[i] = brg[i - 1] if i > 0 else 0.0
    mid_dt = (dt[:-1] + dt[1:]) / 2.0

    speed = np.zeros(n)
    speed[:n - 1] = v
    accel = np.zeros(n)
    speed_diff = np.zeros(n)
    angle = np.zeros(n)
    accel_diff = np.zeros(n)
    if n >= 3:
        dv = np.diff(v)
        accel[:n - 2] = dv / mid_dt
        speed_diff[:n - 2] = np.abs(dv)
        angle[:n - 2] = np.abs(geo.wrap_angle(np.diff(brg))) / mid_dt
    if n >= 4:
        accel_diff[:n - 3] = np.abs(np.diff(accel[:n - 2]))
    return KinematicSeries(speed, accel, speed_diff, accel_diff, angle)


def window_stats(block: np.ndarray) -> np.ndarray:
    """[w, q] block -> the 7 statistics per column, column-major in STATS order."""
    q25, q50, q75 = np.quantile(block, [0.25, 0.5, 0.75], axis=0)
    stats = np.stack([block.mean(axis=0), block.min(axis=0), block.max(axis=0),
                      block.std(axis=0), q25, q50, q75], axis=1)
    return stats.reshape(-1)


def movement_features(series: KinematicSeries, window: int = DEFAULT_WINDOW,
                      stride: int = DEFAULT_STRIDE) -> np.ndarray:
    """Sliding-window statistics, one 35-dim row per window."""
    if window < 2 or stride < 1:
        raise FeatureError("window must be >= 2 and stride >= 1")
    n = len(series)
    if n < window:
        raise FeatureError(f"series of length {n} is shorter than the window ({window})")
    m = series.matrix()
    count = (n - window) // stride + 1
    return np.stack([window_stats(m[k * stride:k * stride + window]) for k in range(count)])


def _local(network, lat, lng):
    x, y = geo.to_local_m(lat, lng, network.origin)
    return np.asarray(x), np.asarray(y)


def segment_vector(network: RoadNetwork, seg_id: str) -> np.ndarray:
    try:
        seg = network.segments[seg_id]
    except KeyError:
        raise FeatureError(f"unknown segment id {seg_id!r}") from None
    poly = np.array(seg.polyline)
    x, y = _local(network, poly[:, 0], poly[:, 1])
    w, h = x.max() - x.min(), y.max() - y.min()
    a = seg.attrs
    onehot = np.zeros(network.n_classes)
    onehot[a.road_class] = 1.0
    return np.concatenate([
        [(x.max() + x.min()) / 2 * LOC_SCALE, (y.max() + y.min()) / 2 * LOC_SCALE],
        [w, h, w * h],
        [geo.bearing_rad(poly[0, 0], poly[0, 1], poly[-1, 0], poly[-1, 1])],
        [x[0] * LOC_SCALE, y[0] * LOC_SCALE, x[-1] * LOC_SCALE, y[-1] * LOC_SCALE],
        [len(seg.in_edges), len(seg.out_edges)],
        a.zone.as_array(),
        [a.length_m, a.width_m, a.point_count, a.lane_count],
        onehot,
    ])


def route_features(route: Route, network: RoadNetwork) -> np.ndarray:
    return np.stack([segment_vector(network, s) for s in route.segments])


def buffer_zone(network: RoadNetwork, lat: float, lng: float,
                radius_m: float = DEFAULT_BUFFER_M) -> np.ndarray:
    """Mean zone vector of segments within ``radius_m``; nearest segment if none."""
    d = network.distances_to_segments(lat, lng)
    ids = list(network.segments)
    near = np.flatnonzero(d <= radius_m)
    if len(near) == 0:
        near = [int(np.argmin(d))]
    return np.mean([network.segments[ids[k]].attrs.zone.as_array() for k in near], axis=0)


def departure_hour(t: int) -> int:
    return int(t // 3600) % 24


def global_features(traj: Trajectory, route: Route, series: KinematicSeries,
                    network: RoadNetwork, buffer_m: float = DEFAULT_BUFFER_M) -> np.ndarray:
    lat, lng, t = traj.lats, traj.lngs, traj.times
    stats = []
    for q in QUANTITIES:
        v = series.valid(q)
        stats += [v.mean(), v.std()] if len(v) else [0.0, 0.0]
    x, y = _local(network, lat, lng)
    w, h = x.max() - x.min(), y.max() - y.min()
    dep = np.zeros(24)
    dep[departure_hour(int(t[0]))] = 1.0
    zo = buffer_zone(network, lat[0], lng[0], buffer_m)
    zd = buffer_zone(network, lat[-1], lng[-1], buffer_m)
    segs = [network.segments[s] for s in route.segments]
    seg_means = np.mean([[s.attrs.lane_count, s.attrs.length_m, s.attrs.width_m,
                          s.attrs.point_count, len(s.in_edges), len(s.out_edges)]
                         for s in segs], axis=0)
    return np.concatenate([
        stats,
        [x[0] * LOC_SCALE, y[0] * LOC_SCALE, x[-1] * LOC_SCALE, y[-1] * LOC_SCALE],
        [w, h, w * h],
        [geo.bearing_rad(lat[0], lng[0], lat[-1], lng[-1])],
        [float(np.sum(geo.haversine_m(lat[:-1], lng[:-1], lat[1:], lng[1:])))],
        dep,
        [float(t[-1] - t[0])],
        zo, zd, zd - zo,
        seg_means,
    ])


@dataclass(frozen=True)
class TrajFeatures:
    traj_id: str
    user: str
    movement: np.ndarray   # [L_m, 35]
    route: np.ndarray      # [L_r, D_r]
    global_: np.ndarray    # [D_g]
    segments: tuple[str, ...]


def featurize(traj: Trajectory, route: Route, network: RoadNetwork,
              window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE,
              buffer_m: float = DEFAULT_BUFFER_M) -> TrajFeatures:
    series = kinematics(traj)
    return TrajFeatures(traj.id, traj.user,
                        movement_features(series, window, stride),
                        route_features(route, network),
                        global_features(traj, route, series, network, buffer_m),
                        tuple(route.segments))


# ------------------------------------------------------------------ normalization

@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Normalizer":
        rows = np.asarray(rows, dtype=float)
        mu = rows.mean(axis=0)
        sd = rows.std(axis=0)
        sd = np.where(sd < 1e-12, 1.0, sd)
        return cls(mu, sd)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std


@dataclass(frozen=True)
class FeatureNormalizers:
    movement: Normalizer
    route: Normalizer
    global_: Normalizer

    @classmethod
    def fit(cls, feats: Sequence[TrajFeatures]) -> "FeatureNormalizers":
        return cls(Normalizer.fit(np.concatenate([f.movement for f in feats])),
                   Normalizer.fit(np.concatenate([f.route for f in feats])),
                   Normalizer.fit(np.stack([f.global_ for f in feats])))

    def apply(self, f: TrajFeatures) -> TrajFeatures:
        return TrajFeatures(f.traj_id, f.user, self.movement(f.movement), self.route(f.route),
                            self.global_(f.global_), f.segments)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"{k}.{s}": getattr(getattr(self, k), s)
                for k in ("movement", "route", "global_") for s in ("mean", "std")}

    @classmethod
    def from_arrays(cls, a) -> "FeatureNormalizers":
        return cls(*(Normalizer(np.asarray(a[f"{k}.mean"]), np.asarray(a[f"{k}.std"]))
                     for k in ("movement", "route", "global_")))


# ------------------------------------------------------------------ feature cache

CACHE_LAYOUT = ("record = n_windows:f32, route_len:f32, movement[n_windows*D_m]:f32, "
                "route[route_len*D_r]:f32, global[D_g]:f32; all little-endian, row-major")


def write_feature_cache(fh: BinaryIO, feats: Sequence[TrajFeatures], d_r: int, d_g: int) -> dict:
    """Write records to ``fh`` and return the manifest describing them."""
    records = []
    offset = 0
    for f in feats:
        if f.route.shape[1] != d_r or f.global_.shape != (d_g,):
            raise FeatureError(f"{f.traj_id}: feature dimensions disagree with the manifest")
        body = np.concatenate([[len(f.movement), len(f.route)], f.movement.ravel(),
                               f.route.ravel(), f.global_]).astype("<f4")
        fh.write(body.tobytes())
        records.append({"traj_id": f.traj_id, "user": f.user, "offset": offset,
                        "n_windows": len(f.movement), "route_len": len(f.route),
                        "segments": list(f.segments)})
        offset += body.nbytes
    return {"dims": {"D_m": MOVEMENT_DIM, "D_r": d_r, "D_g": d_g},
            "layout": CACHE_LAYOUT, "records": records}


def read_feature_cache(fh: BinaryIO, manifest: dict) -> list[TrajFeatures]:
    buf = fh.read()
    dm, dr, dg = (manifest["dims"][k] for k in ("D_m", "D_r", "D_g"))
    out = []
    for r in manifest["records"]:
        nw, nr = r["n_windows"], r["route_len"]
        n = 2 + nw * dm + nr * dr + dg
        a = np.frombuffer(buf, dtype="<f4", count=n, offset=r["offset"]).astype(np.float64)
        if int(a[0]) != nw or int(a[1]) != nr:
            raise FeatureError(f"{r['traj_id']}: record header disagrees with manifest")
        a = a[2:]
        mv = a[:nw * dm].reshape(nw, dm)
        rt = a[nw * dm:nw * dm + nr * dr].reshape(nr, dr)
        out.append(TrajFeatures(r["traj_id"], r["user"], mv, rt, a[nw * dm + nr * dr:],
                                tuple(r["segments"])))
    return out


def dump_manifest(manifest: dict) -> str:
    return json.dumps(manifest, indent=1, sort_keys=True)
