import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from stochastics import (
    ShiftedPath,
    export_path_csv,
    generate_path,
    mean_ou,
    path_frame,
    path_from_spec,
    temperedness_report,
)
from utils import ConfigError, OffGridError, read_report


def test_path_is_anchored_at_zero():
    path = generate_path(7, -2.0, 3.0, 0.01)
    assert path.wiener_at(0.0) == 0.0
    assert path.ou_at(0.0) == path.initial_draw
    assert path.n_steps == 500
    assert np.allclose(np.diff(path.times), 0.01)


def test_same_seed_same_path():
    a = generate_path(3, -1.0, 1.0, 0.01)
    b = generate_path(3, -1.0, 1.0, 0.01)
    c = generate_path(4, -1.0, 1.0, 0.01)
    assert np.array_equal(a.ou, b.ou) and np.array_equal(a.wiener, b.wiener)
    assert not np.array_equal(a.ou, c.ou)


def test_wider_window_extends_the_same_path():
    small = generate_path(11, -5.0, 5.0, 0.01)
    large = generate_path(11, -10.0, 10.0, 0.01)
    for t in (-5.0, -2.5, 0.0, 1.3, 5.0):
        assert small.ou_at(t) == large.ou_at(t)
        assert small.wiener_at(t) == large.wiener_at(t)


def test_off_grid_query_raises():
    path = generate_path(0, 0.0, 1.0, 0.01)
    with pytest.raises(OffGridError):
        path.ou_at(0.005)
    with pytest.raises(OffGridError):
        path.ou_at(1.5)


@pytest.mark.parametrize('args', [
    (0, 0.0, 1.0, 0.03),
    (0, 1.0, 1.0, 0.01),
    (0, 0.0, 1.0, -0.01),
    (0, -1.005, 0.995, 0.01),
])
def test_bad_path_arguments(args):
    with pytest.raises(ConfigError):
        generate_path(*args)


def test_bad_mode():
    with pytest.raises(ConfigError):
        generate_path(0, 0.0, 1.0, 0.01, mode='brownian')


def test_frozen_and_zero_start_modes():
    frozen = generate_path(0, 0.0, 2.0, 0.01, mode='frozen', y_start=1.5)
    assert frozen.wiener_at(2.0) == 0.0
    assert frozen.ou_at(1.0) == pytest.approx(1.5 * math.exp(-1.0), rel=1e-12)
    zero = generate_path(5, -1.0, 1.0, 0.01, mode='zero_start')
    stationary = generate_path(5, -1.0, 1.0, 0.01)
    assert zero.ou_at(0.0) == 0.0
    # future increments do not depend on y(0)
    anchor = zero.anchor_index
    assert np.array_equal(zero.increments[anchor:], stationary.increments[anchor:])


@pytest.mark.parametrize('t_start, t_end', [(0.0, 10.0), (-10.0, 0.0)])
def test_integrated_ou_equation(t_start, t_end):
    # y(t1) - y(t0) = -int y + W(t1) - W(t0), up to the trapezoid error
    path = generate_path(21, t_start, t_end, 0.001)
    times, y = path.window(t_start, t_end)
    lhs = y[-1] - y[0]
    rhs = -trapezoid(y, dx=path.dt) + path.wiener_at(t_end) - path.wiener_at(t_start)
    assert abs(lhs - rhs) < 0.02


def test_stationary_moments():
    path = generate_path(2, 0.0, 2000.0, 0.1)
    y = path.ou
    assert abs(y.mean()) < 0.15
    assert abs(y.var() - 0.5) < 0.1


def test_shifted_path():
    base = generate_path(9, -10.0, 0.0, 0.01)
    shifted = ShiftedPath(base, -4.0)
    assert shifted.ou_at(2.0) == base.ou_at(-2.0)
    assert shifted.wiener_at(0.0) == 0.0
    assert shifted.wiener_at(1.0) == pytest.approx(base.wiener_at(-3.0) - base.wiener_at(-4.0))
    assert shifted.t_end == pytest.approx(4.0)
    rebuilt = path_from_spec(shifted.spec())
    assert rebuilt.ou_at(3.0) == shifted.ou_at(3.0)
    with pytest.raises(OffGridError):
        ShiftedPath(base, -4.005)


def test_mean_ou_and_upsilon():
    path = generate_path(0, 0.0, 1.0, 0.01, mode='frozen', y_start=1.0)
    assert mean_ou(path, 0.0, 1.0) == pytest.approx(1 - math.exp(-1.0), abs=1e-4)
    assert mean_ou(path, 0.5, 0.5) == path.ou_at(0.5)
    assert path.upsilon(0.5, 2.0) == pytest.approx(math.exp(-2.0 * path.ou_at(0.5)))


def test_temperedness_report():
    path = generate_path(1, -50.0, 0.0, 0.1)
    report = temperedness_report(path, sigma=1.0, horizon=50.0)
    assert 0.0 <= report.max_ratio_y_over_t < 1.0
    assert report.final_decay(1.0) < 1e-15
    assert report.upsilon_growth == pytest.approx(report.max_ratio_y_over_t)
    with pytest.raises(ConfigError):
        temperedness_report(path, sigma=1.0, horizon=100.0)


def test_path_export(tmp_path):
    path = generate_path(0, -1.0, 1.0, 0.1)
    frame = path_frame(path, sigma=1.0)
    assert list(frame.columns) == ['t', 'W', 'y', 'upsilon']
    assert len(frame) == 21
    export_path_csv(path, 1.0, tmp_path / 'path.csv')
    meta, table = read_report(tmp_path / 'path.csv')
    assert meta['seed']['seed'] == 0
    assert np.allclose(table['y'].to_numpy(), path.ou)


def test_refined_path_keeps_the_coarse_values():
    path = generate_path(4, -1.0, 1.0, 0.02)
    fine = path.refine()
    assert fine.dt == pytest.approx(0.01)
    assert fine.n_steps == 2 * path.n_steps
    assert np.array_equal(fine.ou[::2], path.ou) and np.array_equal(fine.wiener[::2], path.wiener)
    assert fine.wiener_at(0.0) == 0.0
    assert np.allclose(np.diff(fine.wiener), fine.increments)
    again = path.refine()
    assert np.array_equal(again.ou, fine.ou) and np.array_equal(again.wiener, fine.wiener)


def test_refined_steps_follow_the_fine_transition_law():
    path = generate_path(6, 0.0, 2000.0, 0.2)
    fine = path.refine()
    h = fine.dt
    dw = np.diff(fine.wiener)
    resid = fine.ou[1:] - math.exp(-h) * fine.ou[:-1]
    assert np.var(dw) == pytest.approx(h, rel=0.05)
    assert np.var(resid) == pytest.approx(-0.5 * math.expm1(-2 * h), rel=0.05)
    assert np.mean(dw * resid) == pytest.approx(-math.expm1(-h), rel=0.05)


def test_segment_refinement_is_local():
    path = generate_path(8, 0.0, 1.0, 0.01)
    seg = path.segment(0.3, 0.32)
    assert seg.n_steps == 2 and seg.t_start == pytest.approx(0.3)
    fine = seg.refine()
    assert fine.n_steps == 4
    assert fine.ou_at(0.3) == path.ou_at(0.3) and fine.ou_at(0.32) == path.ou_at(0.32)
    assert fine.wiener_at(0.32) == path.wiener_at(0.32)
    # different offsets draw different midpoints
    other = path.segment(0.5, 0.52).refine()
    assert fine.ou[1] - path.ou_at(0.3) != other.ou[1] - path.ou_at(0.5)


def test_frozen_refinement_is_exact():
    path = generate_path(0, 0.0, 1.0, 0.1, mode='frozen', y_start=2.0)
    fine = path.refine().refine()
    assert np.allclose(fine.ou, 2.0 * np.exp(-fine.times), rtol=1e-12)
    assert not fine.wiener.any()


def test_shifted_segment_measures_w_from_the_shift():
    base = generate_path(9, -10.0, 0.0, 0.01)
    shifted = ShiftedPath(base, -4.0)
    seg = shifted.segment(1.0, 1.02)
    assert seg.t_start == pytest.approx(1.0) and seg.t_end == pytest.approx(1.02)
    assert seg.ou_at(1.02) == shifted.ou_at(1.02)
    assert seg.wiener_at(1.0) == pytest.approx(shifted.wiener_at(1.0), abs=1e-15)
    fine = seg.refine()
    assert fine.level == 1 and fine.ou_at(1.01) == shifted.ou_at(1.01)
