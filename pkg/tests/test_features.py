import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from doufu import geo
from doufu.core import GpsPoint, Route, Trajectory
from doufu.features import (MOVEMENT_DIM, FeatureError, FeatureNormalizers, KinematicSeries,
                            featurize, global_dim, global_features, kinematics, movement_features,
                            read_feature_cache, route_dim, route_features, segment_vector,
                            window_stats, write_feature_cache)
from doufu.synthgen import NetworkSpec, generate_dataset, generate_network, make_profiles


@pytest.fixture(scope="module")
def net():
    return generate_network(NetworkSpec(grid_rows=4, grid_cols=4))


@pytest.fixture(scope="module")
def sample(net):
    sets, routes = generate_dataset(net, make_profiles(2, net, 0), 3, seed=0, sample_period_s=5)
    return sets, routes


def traj(coords, dt=10):
    return Trajectory("t", "u", tuple(GpsPoint(a, b, i * dt) for i, (a, b) in enumerate(coords)))


def test_coincident_points_zero_speed():
    k = kinematics(traj([(39.9, 116.3), (39.9, 116.3)]))
    assert k.speed[0] == 0.0


def test_speed_oracle():
    k = kinematics(traj([(39.9, 116.3), (39.91, 116.3)]))
    # independent arc length: R * dphi
    assert k.speed[0] == pytest.approx(6371008.8 * math.radians(0.01) / 10, rel=1e-9)
    assert k.speed[0] == pytest.approx(111.19, abs=0.01)


def test_collinear_constant_motion():
    k = kinematics(traj([(39.9 + 0.001 * i, 116.3) for i in range(5)]))
    np.testing.assert_allclose(k.valid("accel"), 0.0, atol=1e-6)
    np.testing.assert_allclose(k.valid("angle_speed"), 0.0, atol=1e-9)


def test_turn_rate_and_signs():
    # north, then east: a quarter turn over one mid interval
    k = kinematics(traj([(39.9, 116.3), (39.901, 116.3), (39.901, 116.3013)]))
    assert k.angle_speed[0] == pytest.approx((math.pi / 2) / 10, rel=1e-3)
    slow = kinematics(traj([(39.9, 116.3), (39.902, 116.3), (39.903, 116.3)]))
    assert slow.accel[0] < 0 and slow.speed_diff[0] > 0


def test_window_count_and_constant_stats():
    n = 20
    series = KinematicSeries(np.full(n, 7.0), np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n))
    m = movement_features(series, 8, 4)
    assert m.shape == (4, MOVEMENT_DIM)
    speed_stats = m[:, :7]
    np.testing.assert_array_equal(speed_stats[:, [0, 1, 2, 4, 5, 6]], 7.0)
    np.testing.assert_array_equal(speed_stats[:, 3], 0.0)


def test_quantile_oracle():
    stats = window_stats(np.array([[1.0], [2.0], [3.0], [4.0], [5.0]]))
    assert list(stats[4:]) == [2.0, 3.0, 4.0]


def test_too_short_for_window():
    series = kinematics(traj([(39.9 + 0.001 * i, 116.3) for i in range(5)]))
    with pytest.raises(FeatureError):
        movement_features(series, 8, 4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=8, max_size=30))
def test_quantiles_monotone(values):
    n = len(values)
    a = np.asarray(values)
    m = movement_features(KinematicSeries(a, a, np.abs(a), np.abs(a), np.abs(a)), 8, 4)
    for q in range(5):
        block = m[:, q * 7:(q + 1) * 7]
        # min <= q25 <= q50 <= q75 <= max
        for lo, hi in ((1, 4), (4, 5), (5, 6), (6, 2)):
            assert np.all(block[:, lo] <= block[:, hi] + 1e-12)


def _shifted(t, dlat, dlng):
    return Trajectory(t.id, t.user, tuple(GpsPoint(p.lat + dlat, p.lng + dlng, p.t) for p in t.points))


def test_translation_invariance(sample):
    sets, _ = sample
    t = sets[0].trajectories[0]
    a = movement_features(kinematics(t))
    scale = np.abs(a).max()
    # a longitude shift is an isometry of the sphere
    b = movement_features(kinematics(_shifted(t, 0.0, 0.05)))
    assert np.abs(b - a).max() <= 1e-6 * scale
    # a latitude shift rescales east-west distances by cos(lat) ratios
    c = movement_features(kinematics(_shifted(t, 0.01, 0.0)))
    bound = abs(math.cos(math.radians(39.91)) / math.cos(math.radians(39.9)) - 1)
    assert np.abs(c - a).max() <= 2 * bound * scale


def test_dims_constant(net, sample):
    sets, routes = sample
    for t in sets[0].trajectories:
        f = featurize(t, routes[t.id], net)
        assert f.route.shape == (len(routes[t.id]), route_dim(net.zone_k, net.n_classes))
        assert f.global_.shape == (global_dim(net.zone_k),)
    assert route_dim(5, 5) == 26 and global_dim(5) == 65


def test_segment_vector_fields(net):
    sid = "0_0>0_1"                 # due east along the first row
    v = segment_vector(net, sid)
    seg = net.segments[sid]
    # initial great-circle bearing along a parallel sits a hair under pi/2
    assert v[5] == pytest.approx(math.pi / 2, abs=1e-4)
    onehot = v[-net.n_classes:]
    assert onehot.sum() == 1 and onehot[seg.attrs.road_class] == 1
    np.testing.assert_array_equal(v[12:12 + net.zone_k], seg.attrs.zone.as_array())
    assert v[10] == len(seg.in_edges) and v[11] == len(seg.out_edges)


def test_three_segment_route(net):
    segs = ("0_0>0_1", "0_1>0_2", "0_2>0_3")
    assert route_features(Route(segs), net).shape[0] == 3


def test_global_oracle(net, sample):
    sets, routes = sample
    t = sets[0].trajectories[1]
    r = routes[t.id]
    k = kinematics(t)
    g = global_features(t, r, k, net)
    lat, lng, times = t.lats, t.lngs, t.times
    # stats block: mean/std of unpadded quantities
    assert g[0] == pytest.approx(np.mean(k.valid("speed")))
    assert g[1] == pytest.approx(np.std(k.valid("speed")))
    hour = int(times[0] // 3600) % 24
    dep = g[10 + 4 + 3 + 1 + 1:10 + 4 + 3 + 1 + 1 + 24]
    assert dep.sum() == 1 and dep[hour] == 1
    path = sum(geo.haversine_m(lat[i], lng[i], lat[i + 1], lng[i + 1]) for i in range(len(lat) - 1))
    assert g[18] == pytest.approx(path)
    assert g[43] == times[-1] - times[0]
    zo, zd, diff = g[44:49], g[49:54], g[54:59]
    np.testing.assert_allclose(diff, zd - zo)
    lanes = np.mean([net.segments[s].attrs.lane_count for s in r.segments])
    assert g[59] == pytest.approx(lanes)


def test_departure_0830(net):
    base = 1614556800 + 8 * 3600 + 1800
    t = Trajectory("t", "u", tuple(GpsPoint(39.9 + 0.0005 * i, 116.3, base + 10 * i) for i in range(4)))
    k = kinematics(t)
    g = global_features(t, Route(("0_0>1_0",)), k, net)
    assert g[19 + 8] == 1.0


def test_same_od_zero_zone_difference(net):
    pts = [(39.9, 116.3), (39.901, 116.3), (39.9, 116.3)]
    t = traj(pts)
    g = global_features(t, Route(("0_0>1_0",)), kinematics(t), net)
    np.testing.assert_array_equal(g[54:59], 0.0)


def test_normalizer_and_cache_roundtrip(net, sample):
    sets, routes = sample
    feats = [featurize(t, routes[t.id], net) for s in sets for t in s.trajectories]
    norm = FeatureNormalizers.fit(feats)
    z = np.concatenate([norm.apply(f).movement for f in feats])
    np.testing.assert_allclose(z.mean(0), 0.0, atol=1e-9)
    buf = io.BytesIO()
    man = write_feature_cache(buf, feats, route_dim(5, 5), global_dim(5))
    back = read_feature_cache(io.BytesIO(buf.getvalue()), man)
    for a, b in zip(feats, back):
        assert a.traj_id == b.traj_id and a.segments == b.segments
        np.testing.assert_allclose(b.movement, a.movement.astype(np.float32))
        np.testing.assert_allclose(b.global_, a.global_.astype(np.float32))
