import math
import warnings

import numpy as np
import pytest
from matplotlib.path import Path as MplPath

from talkinghead import geometry as geo
from talkinghead import metrics
from talkinghead.errors import DegeneratePolygonWarning, LengthMismatch, TooShort

LIPS = list(range(48, 68))
OUTER = list(range(48, 60))


def loop_d_ll(p, g):
    total, count = 0.0, 0
    for t in range(len(p)):
        for i in LIPS:
            total += math.sqrt((p[t][i][0] - g[t][i][0]) ** 2 + (p[t][i][1] - g[t][i][1]) ** 2)
            count += 1
    return total / count


def loop_d_vl(p, g):
    total, count = 0.0, 0
    for t in range(1, len(p)):
        for i in LIPS:
            dx = (p[t][i][0] - p[t - 1][i][0]) - (g[t][i][0] - g[t - 1][i][0])
            dy = (p[t][i][1] - p[t - 1][i][1]) - (g[t][i][1] - g[t - 1][i][1])
            total += math.sqrt(dx * dx + dy * dy)
            count += 1
    return total / count


def loop_area(frame):
    s = 0.0
    for k in range(len(OUTER)):
        a, b = frame[OUTER[k]], frame[OUTER[(k + 1) % len(OUTER)]]
        s += a[0] * b[1] - b[0] * a[1]
    return abs(s) / 2


def loop_d_a(p, g):
    return sum(abs(loop_area(p[t]) - loop_area(g[t])) for t in range(len(p))) / len(p)


def random_seq(rng, t):
    base = geo.load_frontal_template()[:, :2]
    return base[None] + rng.normal(scale=0.02, size=(t, 68, 2))


def test_zero_for_identical():
    rng = np.random.default_rng(0)
    s = random_seq(rng, 5)
    assert metrics.d_ll(s, s) == 0
    assert metrics.d_vl(s, s) == 0
    assert metrics.d_a(s, s) == 0


def test_three_four_five_offset():
    rng = np.random.default_rng(1)
    g = random_seq(rng, 4)
    p = g + np.array([0.3, 0.4])
    assert metrics.d_ll(p, g) == pytest.approx(0.5)
    assert metrics.d_vl(p, g) == pytest.approx(0.0, abs=1e-12)


def test_metrics_match_loop_oracles():
    for seed in range(25):
        rng = np.random.default_rng(seed)
        t = int(rng.integers(2, 6))
        p, g = random_seq(rng, t), random_seq(rng, t)
        pl, gl = p.tolist(), g.tolist()
        assert metrics.d_ll(p, g) == pytest.approx(loop_d_ll(pl, gl), rel=1e-12)
        assert metrics.d_vl(p, g) == pytest.approx(loop_d_vl(pl, gl), rel=1e-12)
        assert metrics.d_a(p, g) == pytest.approx(loop_d_a(pl, gl), rel=1e-9, abs=1e-15)


def test_length_mismatch_and_short():
    rng = np.random.default_rng(2)
    with pytest.raises(LengthMismatch):
        metrics.d_ll(random_seq(rng, 3), random_seq(rng, 4))
    with pytest.raises(TooShort):
        metrics.d_vl(random_seq(rng, 1), random_seq(rng, 1))


def test_area_unit_square_and_collinear():
    assert metrics.polygon_area([[0, 0], [1, 0], [1, 1], [0, 1]]) == pytest.approx(1.0)
    assert metrics.polygon_area([[0, 0], [1, 1], [2, 2], [3, 3]]) == pytest.approx(0.0)


def test_area_matches_pixel_count():
    hexagon = np.array([[0.1, 0.0], [0.7, 0.05], [0.95, 0.45], [0.6, 0.9], [0.15, 0.8], [0.0, 0.35]])
    n = 1000
    centers = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(centers, centers)
    inside = MplPath(hexagon).contains_points(np.stack([gx.ravel(), gy.ravel()], axis=1))
    pixel_area = inside.sum() / n**2
    assert abs(metrics.polygon_area(hexagon) - pixel_area) / pixel_area < 0.02


def test_self_intersection_flagged():
    bowtie = [[0, 0], [1, 1], [1, 0], [0, 1]]
    with pytest.warns(DegeneratePolygonWarning):
        area = metrics.polygon_area(bowtie)
    assert area >= 0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        metrics.mouth_area(geo.load_frontal_template())


def test_area_rotation_invariance():
    rng = np.random.default_rng(3)
    g = np.concatenate([random_seq(rng, 3), np.zeros((3, 68, 1))], axis=-1)
    q = geo.quat_from_axis_angle([0, 0, 1], 0.7)
    p = np.stack([geo.apply_rotation(f, q) for f in g])
    assert metrics.d_a(p, g) == pytest.approx(0.0, abs=1e-12)


def test_d_ll_rigid_invariance():
    rng = np.random.default_rng(4)
    p, g = random_seq(rng, 3), random_seq(rng, 3)
    theta = 0.4
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shift = np.array([0.2, -0.1])
    assert metrics.d_ll(p @ rot.T + shift, g @ rot.T + shift) == pytest.approx(metrics.d_ll(p, g))


def test_report_has_units():
    rng = np.random.default_rng(5)
    s = random_seq(rng, 3)
    rep = metrics.report(s, s)
    assert set(rep) == {"d_ll", "d_vl", "d_a", "frames", "units"}
    assert "D-LL" in metrics.format_table(rep)
