import math

import pytest
import torch

from fields import Grid, mode_field, norms, random_velocity
from operators import (
    convection,
    j_difference_bound,
    k_monotonicity,
    laplacian_A,
    oracle_weak_form,
    pair,
    stress_J,
    stress_K,
    trilinear,
)
from utils import ConfigError


def test_convection_is_skew(fields3):
    u, v, w = fields3
    scale = abs(trilinear(u, v, w)) + 1.0
    assert abs(trilinear(u, v, v)) < 1e-11 * scale
    assert abs(trilinear(u, v, w) + trilinear(u, w, v)) < 1e-11 * scale


def test_projected_outputs_are_divergence_free(fields3):
    u, v, _ = fields3
    for out in (convection(u, v), stress_J(u), stress_K(u)):
        assert out.projected.divergence_residual() < 1e-13


def test_k_energy_identity(fields3):
    u = fields3[0]
    half = 0.5 * norms(u).e_l4_4
    assert pair(stress_K(u).unprojected, u) == pytest.approx(half, rel=1e-11)


@pytest.mark.parametrize('tag', ['A', 'B', 'J', 'K'])
def test_weak_forms_match_fine_quadrature(fields3, tag):
    u, y, v = fields3
    if tag == 'A':
        spectral = pair(laplacian_A(u).coeffs, y)
    elif tag == 'B':
        spectral = pair(convection(u, v).unprojected, y)
    elif tag == 'J':
        spectral = pair(stress_J(u).unprojected, y)
    else:
        spectral = pair(stress_K(u).unprojected, y)
    oracle = oracle_weak_form(tag, u, y, v if tag == 'B' else None)
    assert spectral == pytest.approx(oracle, rel=1e-9, abs=1e-9)


def test_oracle_rejects_unknown_tag(fields3):
    with pytest.raises(ConfigError):
        oracle_weak_form('Q', fields3[0], fields3[1])


def test_k_monotonicity_identity(fields3):
    u, v, _ = fields3
    lhs, rhs = k_monotonicity(u, v, beta=0.3)
    assert lhs >= 0.0
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_j_difference_bound(fields3):
    u, v, _ = fields3
    lhs, rhs = j_difference_bound(u, v, alpha=0.5)
    assert lhs <= rhs * (1 + 1e-12)


def test_operators_reject_grid_mismatch(rng):
    u = random_velocity(Grid(16), rng)
    v = random_velocity(Grid(32), rng)
    with pytest.raises(ConfigError):
        convection(u, v)


def test_k_is_cubic(fields3):
    u = fields3[0]
    once = stress_K(u).projected.coeffs
    twice = stress_K(u * 2.0).projected.coeffs
    assert torch.allclose(twice, 8.0 * once, rtol=1e-12, atol=1e-12 * float(once.abs().max()))


def test_laplacian_eigenmode():
    grid = Grid(16, box_length=2.0)
    u = mode_field(grid, (2, 1))
    k_sq = (2 * math.pi / grid.box_length) ** 2 * 5
    assert torch.allclose(laplacian_A(u).coeffs, k_sq * u.coeffs, atol=1e-12 * k_sq * float(u.coeffs.abs().max()))


def test_convection_of_a_shear_vanishes():
    # (u.grad)u = 0 for u = (0, cos(2 pi x1))
    u = mode_field(Grid(16, box_length=1.0), (1, 0))
    assert float(convection(u, u).unprojected.abs().max()) < 1e-12
