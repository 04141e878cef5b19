"""Small spherical-geometry helpers shared by the generator, snapping and features."""
import math

import numpy as np

EARTH_RADIUS_M = 6371008.8


def haversine_m(lat1, lng1, lat2, lng2):
    """Great-circle distance in meters. Works elementwise on arrays."""
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lng2) - np.asarray(lng1))
    a = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def bearing_rad(lat1, lng1, lat2, lng2):
    """Initial bearing in radians, north = 0, clockwise, in [0, 2*pi)."""
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dlmb = np.radians(np.asarray(lng2) - np.asarray(lng1))
    y = np.sin(dlmb) * np.cos(p2)
    x = np.cos(p1) * np.sin(p2) - np.sin(p1) * np.cos(p2) * np.cos(dlmb)
    return np.mod(np.arctan2(y, x), 2.0 * np.pi)


def wrap_angle(a):
    """Map angles to [-pi, pi)."""
    return np.mod(np.asarray(a) + np.pi, 2.0 * np.pi) - np.pi


def to_local_m(lat, lng, origin):
    """Equirectangular (east, north) offsets in meters from ``origin``."""
    lat0, lng0 = origin
    x = np.radians(np.asarray(lng) - lng0) * EARTH_RADIUS_M * math.cos(math.radians(lat0))
    y = np.radians(np.asarray(lat) - lat0) * EARTH_RADIUS_M
    return x, y


def from_local_m(x, y, origin):
    lat0, lng0 = origin
    lat = lat0 + np.degrees(np.asarray(y) / EARTH_RADIUS_M)
    lng = lng0 + np.degrees(np.asarray(x) / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    return lat, lng


def point_segment_distance_m(lat, lng, a, b):
    """Distance in meters from a point to the straight piece a-b (local planar approx.)."""
    origin = (lat, lng)
    ax, ay = to_local_m(a[0], a[1], origin)
    bx, by = to_local_m(b[0], b[1], origin)
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    if denom == 0.0:
        return float(math.hypot(ax, ay))
    s = min(1.0, max(0.0, -(ax * dx + ay * dy) / denom))
    return float(math.hypot(ax + s * dx, ay + s * dy))


def point_polyline_distance_m(lat, lng, polyline):
    return min(point_segment_distance_m(lat, lng, polyline[i], polyline[i + 1])
               for i in range(len(polyline) - 1))
