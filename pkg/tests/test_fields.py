import math

import numpy as np
import pytest
import torch

from fields import (
    Grid,
    VelocityField,
    Cutoff,
    cutoff_profile,
    estimate_korn_constant,
    forward_transform,
    gradient_part,
    inner_product,
    inverse_transform,
    korn_ratio,
    leray_project,
    mode_field,
    norms,
    random_velocity,
    sym_gradient,
    tail_mass,
    inner_mass,
)
from utils import ConfigError


@pytest.mark.parametrize('kwargs', [
    dict(n_modes=7),
    dict(n_modes=6),
    dict(n_modes=16, box_length=0.0),
    dict(n_modes=16, dealias_factor=1.7),
])
def test_grid_rejects_bad_parameters(kwargs):
    with pytest.raises(ConfigError):
        Grid(**kwargs)


def test_constant_field_normalization():
    grid = Grid(16, box_length=2.0)
    coeffs = forward_transform(torch.full((16, 16), 3.0, dtype=torch.float64), grid)
    assert abs(coeffs[0, 0].real - 3.0 * grid.box_length ** 2) < 1e-12
    u = VelocityField.from_physical(torch.stack([torch.full((16, 16), 3.0), torch.zeros(16, 16)]).double(), grid)
    # |u|_2^2 = int |u|^2 over the box
    assert u.l2_sq() == pytest.approx(9.0 * grid.box_length ** 2, rel=1e-13)
    assert torch.allclose(u.mean(), torch.tensor([3.0, 0.0], dtype=torch.float64))


def test_leray_projection_is_idempotent_and_divergence_free(grid, rng):
    raw = forward_transform(torch.from_numpy(rng.standard_normal((2, 16, 16))), grid)
    u = leray_project(raw, grid)
    assert u.divergence_residual() < 1e-14
    again = leray_project(u.coeffs, grid)
    assert torch.allclose(again.coeffs, u.coeffs, atol=1e-13)
    # the gradient part is orthogonal to the projection
    g = gradient_part(raw, grid)
    assert abs(inner_product(g, u.coeffs, grid)) < 1e-12 * u.l2_sq()


def test_nyquist_modes_are_zero(grid, rng):
    u = random_velocity(grid, rng)
    half = grid.n_modes // 2
    assert bool((u.coeffs[:, half, :] == 0).all())
    assert bool((u.coeffs[:, :, half] == 0).all())


def test_random_velocity_amplitude(grid, rng):
    u = random_velocity(grid, rng, amplitude=0.7, max_mode=3, zero_mean=True)
    assert u.l2_sq() == pytest.approx(0.49, rel=1e-12)
    assert torch.allclose(u.mean(), torch.zeros(2, dtype=torch.float64), atol=1e-14)


def test_mode_field_energy():
    grid = Grid(16, box_length=1.0)
    u = mode_field(grid, (2, 1), amplitude=2.0)
    assert u.l2_sq() == pytest.approx(2.0, rel=1e-12)
    assert u.divergence_residual() < 1e-14


def test_shear_mode_norms():
    # u = (-cos(2 pi x2), 0): |E|^2 = 2 (2 pi)^2 sin^2
    grid = Grid(16, box_length=1.0)
    n = norms(mode_field(grid, (0, 1)))
    w = (2 * math.pi) ** 4
    assert n.l2_sq == pytest.approx(0.5, rel=1e-12)
    assert n.e_l2_sq == pytest.approx(4 * math.pi ** 2, rel=1e-12)
    assert n.e_l4_4 == pytest.approx(1.5 * w, rel=1e-12)
    assert n.grad_l4_4 == pytest.approx(0.375 * w, rel=1e-12)
    assert korn_ratio(mode_field(grid, (0, 1))) == pytest.approx(1 / math.sqrt(2), rel=1e-12)


def test_sym_gradient_is_symmetric_and_traceless(fields3):
    u = fields3[0]
    e = sym_gradient(u, u.grid.quartic_points)
    assert e.is_symmetric()
    assert float(e.trace().abs().max()) < 1e-11 * float(e.values.abs().max())


def test_cutoff_profile_values():
    xi = torch.tensor([0.0, 1.0, 1.5, 2.0, 5.0], dtype=torch.float64)
    q = cutoff_profile(xi)
    assert torch.allclose(q, torch.tensor([0.0, 0.0, 0.5, 1.0, 1.0], dtype=torch.float64))


def test_tail_mass_bounds(fields3):
    u = fields3[0]
    small, large = tail_mass(u, Cutoff(0.1)), tail_mass(u, Cutoff(0.3))
    assert 0.0 <= large <= small <= u.l2_sq() * (1 + 1e-12)
    # inner weight 1 below xi = 2 and tail weight 1 above it cover the whole box
    assert inner_mass(u, Cutoff(0.3)) + large >= u.l2_sq() * (1 - 1e-12)
    assert inner_mass(u, Cutoff(0.1)) + small >= u.l2_sq() * (1 - 1e-12)
    with pytest.raises(ConfigError):
        tail_mass(u, Cutoff(0.5))


def test_korn_estimate():
    grid = Grid(16)
    with pytest.raises(ConfigError):
        estimate_korn_constant(grid, samples=50)
    estimate = estimate_korn_constant(grid, samples=100, seed=0)
    assert estimate >= 1 / math.sqrt(2) - 1e-12
    assert estimate == estimate_korn_constant(grid, samples=100, seed=0)


def test_grid_mismatch_raises(rng):
    u = random_velocity(Grid(16), rng)
    v = random_velocity(Grid(32), rng)
    with pytest.raises(ConfigError):
        u + v


def _bump(grid, center, width):
    # u = (d2 psi, -d1 psi) for a Gaussian stream function in the periodic distance to center
    x1, x2 = grid.coordinates()
    half = grid.box_length / 2
    d1 = torch.remainder(x1 - center[0] + half, grid.box_length) - half
    d2 = torch.remainder(x2 - center[1] + half, grid.box_length) - half
    psi_hat = forward_transform(torch.exp(-(d1 ** 2 + d2 ** 2) / (2 * width ** 2)), grid)
    return leray_project(torch.stack([1j * grid.kappa[1] * psi_hat, -1j * grid.kappa[0] * psi_hat]), grid)


def test_gaussian_bump_energy():
    # int |grad psi|^2 over the plane is pi for any width
    u = _bump(Grid(64, box_length=1.0), (0.5, 0.5), 0.05)
    assert u.l2_sq() == pytest.approx(math.pi, rel=1e-8)
    assert u.divergence_residual() < 1e-14


def test_tail_mass_matches_fine_quadrature():
    grid = Grid(64, box_length=1.0)
    u = _bump(grid, (0.5, 0.5), 0.05)
    cut = Cutoff(0.15)
    fine = 8 * grid.n_modes
    direct = float((cut.profile(grid, fine) ** 2 * (u.physical(fine) ** 2).sum(0)).sum()) * grid.cell_weight(fine)
    assert direct > 1e-6 * u.l2_sq()
    assert tail_mass(u, cut) == pytest.approx(direct, rel=1e-2)


def test_tail_mass_of_a_centred_and_a_distant_bump():
    grid = Grid(64, box_length=1.0)
    centred = _bump(grid, (0.5, 0.5), 0.05)
    assert tail_mass(centred, Cutoff(0.4)) < 1e-8 * centred.l2_sq()
    distant = _bump(grid, (0.0, 0.0), 0.05)
    assert tail_mass(distant, Cutoff(0.2)) == pytest.approx(distant.l2_sq(), rel=1e-8)
    assert inner_mass(distant, Cutoff(0.2)) < 1e-8 * distant.l2_sq()


def test_transform_round_trip_and_parseval(grid, rng):
    values = torch.from_numpy(rng.standard_normal((16, 16)))
    coeffs = forward_transform(values, grid)
    assert torch.allclose(inverse_transform(coeffs, grid), values, atol=1e-13)
    # (1/L^2) sum |f_hat|^2 = int |f|^2
    spectral = float((coeffs.abs() ** 2).sum()) / grid.box_length ** 2
    assert spectral == pytest.approx(float((values ** 2).sum()) * grid.cell_weight(), rel=1e-12)


def test_single_sine_mode_coefficients():
    grid = Grid(16, box_length=2.0)
    x1, _ = grid.coordinates()
    coeffs = forward_transform(torch.sin(2 * math.pi * 3 * x1 / grid.box_length), grid)
    # sin = (e^{i.} - e^{-i.}) / 2i, scaled by L^2
    assert complex(coeffs[3, 0]) == pytest.approx(-2j, abs=1e-12)
    assert complex(coeffs[-3, 0]) == pytest.approx(2j, abs=1e-12)
    coeffs[3, 0] = coeffs[-3, 0] = 0
    assert float(coeffs.abs().max()) < 1e-12


def test_sym_gradient_of_a_shear_mode():
    grid = Grid(16, box_length=2.0)
    u = mode_field(grid, (1, 0), amplitude=3.0)
    kappa = 2 * math.pi / grid.box_length
    x1, _ = grid.coordinates(32)
    e = sym_gradient(u, 32)
    expected = -3.0 * kappa * torch.sin(kappa * x1)
    assert torch.allclose(e.values[0, 1], expected, atol=1e-12)
    assert torch.allclose(e.values[1, 0], expected, atol=1e-12)
    assert float(e.values[0, 0].abs().max()) < 1e-12 and float(e.values[1, 1].abs().max()) < 1e-12


def test_norms_match_fine_quadrature(fields3):
    u = fields3[0]
    fine = 8 * u.grid.n_modes
    weight = u.grid.cell_weight(fine)
    n = norms(u)
    e = sym_gradient(u, fine)
    values = u.physical(fine)
    assert n.l2_sq == pytest.approx(float((values ** 2).sum()) * weight, rel=1e-12)
    assert n.e_l2_sq == pytest.approx(float(e.frobenius_sq().sum()) * weight, rel=1e-12)
    assert n.e_l4_4 == pytest.approx(float((e.frobenius_sq() ** 2).sum()) * weight, rel=1e-12)
    assert n.u_l4_4 == pytest.approx(float(((values ** 2).sum(0) ** 2).sum()) * weight, rel=1e-12)


def test_leray_projection_is_self_adjoint_and_kills_gradients(grid, rng):
    a = forward_transform(torch.from_numpy(rng.standard_normal((2, 16, 16))), grid)
    b = forward_transform(torch.from_numpy(rng.standard_normal((2, 16, 16))), grid)
    lhs = inner_product(leray_project(a, grid).coeffs, b, grid)
    rhs = inner_product(a, leray_project(b, grid).coeffs, grid)
    assert lhs == pytest.approx(rhs, rel=1e-12)
    phi = forward_transform(torch.from_numpy(rng.standard_normal((16, 16))), grid)
    g = 1j * grid.kappa * phi
    assert float(leray_project(g, grid).coeffs.abs().max()) < 1e-12 * float(g.abs().max())
