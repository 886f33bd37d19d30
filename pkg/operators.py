"""
Nonlinear operators of the third-grade system, evaluated pseudo-spectrally.

    B(u, v) = P (u . grad) v                  quadratic, padded by grid.dealias_factor
    J(z)    = -P div(E(z) E(z))               quadratic, padded by grid.dealias_factor
    K(z)    = -P div(|E(z)|^2 E(z))           cubic, padded by 2
    A z     = -P Laplacian z

With those paddings every product is alias-free on the retained modes, so the weak-form
identities hold to round-off. Matrix norms are Frobenius, |A|^2 = A:A.
"""
import torch
from dataclasses import dataclass
from typing import Optional, Tuple

from fields import (
    Grid,
    VelocityField,
    SymTensorField,
    leray_project,
    inner_product,
    product_coefficients,
    sym_gradient,
    velocity_gradient,
)
from utils import ConfigError


@dataclass(frozen=True, eq=False)
class OperatorOutput:
    projected: VelocityField
    # coefficients before the Leray projection, kept for pressure recovery
    unprojected: torch.Tensor

    def __mul__(self, scalar):
        return OperatorOutput(self.projected * scalar, self.unprojected * scalar)

    __rmul__ = __mul__


def _same_grid(*fields) -> Grid:
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise ConfigError(f'grid mismatch: {grid} vs {f.grid}')
    return grid


def _output(coeffs, grid: Grid) -> OperatorOutput:
    return OperatorOutput(projected=leray_project(coeffs, grid), unprojected=coeffs)


def tensor_divergence(coeffs, grid: Grid):
    # (div T)_i = sum_j d_j T_ij
    return (1j * grid.kappa[None] * coeffs).sum(1)


def convection(u: VelocityField, v: VelocityField) -> OperatorOutput:
    grid = _same_grid(u, v)
    points = grid.product_points
    adv = torch.einsum('jxy,ijxy->ixy', u.physical(points), velocity_gradient(v, points))
    return _output(product_coefficients(adv, grid), grid)


def stress_J(z: VelocityField) -> OperatorOutput:
    grid = z.grid
    e = sym_gradient(z, grid.product_points)
    coeffs = product_coefficients(e.square(), grid)
    return _output(-tensor_divergence(coeffs, grid), grid)


def stress_K(z: VelocityField) -> OperatorOutput:
    grid = z.grid
    e = sym_gradient(z, grid.quartic_points)
    coeffs = product_coefficients(e.frobenius_sq() * e.values, grid)
    return _output(-tensor_divergence(coeffs, grid), grid)


def laplacian_A(z: VelocityField) -> VelocityField:
    return leray_project(z.grid.kappa_sq * z.coeffs, z.grid)


def pair(coeffs, y: VelocityField) -> float:
    return inner_product(coeffs, y.coeffs, y.grid)


def trilinear(u: VelocityField, v: VelocityField, w: VelocityField) -> float:
    # b(u, v, w) = int u_i d_i v_j w_j
    return pair(convection(u, v).unprojected, w)


def oracle_weak_form(op_tag: str, z: VelocityField, y: VelocityField, v: Optional[VelocityField] = None,
                     points: Optional[int] = None) -> float:
    """
    Weak forms by direct quadrature on a fine physical grid (default 4n points per axis),
    independent of the operator kernels above:
      A: int grad z : grad y
      B: b(z, v, y) with v defaulting to z
      J: 1/2 int E(z)E(z) : E(y)
      K: 1/2 int |E(z)|^2 E(z) : E(y)
    """
    grid = _same_grid(z, y) if v is None else _same_grid(z, y, v)
    points = points or 4 * grid.n_modes
    w = grid.cell_weight(points)
    if op_tag == 'A':
        return float((velocity_gradient(z, points) * velocity_gradient(y, points)).sum()) * w
    if op_tag == 'B':
        v = z if v is None else v
        adv = torch.einsum('jxy,ijxy->ixy', z.physical(points), velocity_gradient(v, points))
        return float((adv * y.physical(points)).sum()) * w
    if op_tag == 'J':
        ez, ey = sym_gradient(z, points), sym_gradient(y, points)
        return 0.5 * float((ez.square() * ey.values).sum()) * w
    if op_tag == 'K':
        ez, ey = sym_gradient(z, points), sym_gradient(y, points)
        return 0.5 * float((ez.frobenius_sq() * ez.contract(ey)).sum()) * w
    raise ConfigError(f'unknown operator tag {op_tag!r}, expected one of A, B, J, K')


def j_difference_bound(z1: VelocityField, z2: VelocityField, alpha: float = 1.0) -> Tuple[float, float]:
    """
    |alpha <J(z1) - J(z2), z1 - z2>| and its bound (|alpha|/2) int |E(z1 - z2)|^2 (|E(z1)| + |E(z2)|).
    Both sides use the factor-2 grid, where the left side is exact.
    """
    grid = _same_grid(z1, z2)
    d = z1 - z2
    lhs = abs(alpha * pair(stress_J(z1).unprojected - stress_J(z2).unprojected, d))
    points = grid.quartic_points
    e1, e2, ed = sym_gradient(z1, points), sym_gradient(z2, points), sym_gradient(d, points)
    weight = e1.frobenius_sq().sqrt() + e2.frobenius_sq().sqrt()
    rhs = 0.5 * abs(alpha) * ed.integrate(ed.frobenius_sq() * weight)
    return lhs, rhs


def k_monotonicity(z1: VelocityField, z2: VelocityField, beta: float = 1.0) -> Tuple[float, float]:
    """
    beta <K(z1) - K(z2), z1 - z2> and the same quantity written as
    (beta/4) int (|E1|^2 - |E2|^2)^2 + (beta/4) int |E(z1 - z2)|^2 (|E1|^2 + |E2|^2),
    the constant that reduces to <K(z), z> = 1/2 ||E(z)||_4^4 at z2 = 0.
    """
    grid = _same_grid(z1, z2)
    d = z1 - z2
    lhs = beta * pair(stress_K(z1).unprojected - stress_K(z2).unprojected, d)
    points = grid.quartic_points
    e1, e2, ed = sym_gradient(z1, points), sym_gradient(z2, points), sym_gradient(d, points)
    a, b = e1.frobenius_sq(), e2.frobenius_sq()
    rhs = 0.25 * beta * (ed.integrate((a - b) ** 2) + ed.integrate(ed.frobenius_sq() * (a + b)))
    return lhs, rhs


if __name__ == '__main__':
    import numpy as np
    from fields import random_velocity, norms

    grid = Grid(32)
    rng = np.random.default_rng(0)
    u, v, w = (random_velocity(grid, rng, max_mode=8) for _ in range(3))
    print(f'b(u,v,v) = {trilinear(u, v, v):.3e}')
    print(f'b(u,v,w) + b(u,w,v) = {trilinear(u, v, w) + trilinear(u, w, v):.3e}')
    print(f'<K(u),u> - 1/2 ||E(u)||_4^4 = {pair(stress_K(u).unprojected, u) - 0.5 * norms(u).e_l4_4:.3e}')
    print('K monotonicity (lhs, rhs):', k_monotonicity(u, v))
    print('J difference bound (lhs, rhs):', j_difference_bound(u, v))
