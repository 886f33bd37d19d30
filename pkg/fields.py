"""
Periodic 2D spectral field algebra on the torus [0, L)^2.

Fields are band-limited: coefficients live on integer wavevectors k in [-n/2, n/2)^2
and the Nyquist row and column are held at zero, so every real field has exact
Hermitian symmetry. Coefficients are scaled so that

    u_hat(k) = (L/n)^2 * sum_x u(x) exp(-2 pi i k.x / L)

which gives u_hat(0) = c L^2 for a constant field c and ||u||_2^2 = (1/L^2) sum |u_hat|^2.

The periodic box stands in for a bounded domain with walls; the mean mode is part of
the state and no Poincare inequality is assumed anywhere.
"""
import math
import numpy as np
import torch
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Tuple
from einops import rearrange

from utils import ConfigError


DTYPE = torch.float64
CDTYPE = torch.complex128
NORMALIZATION = 'l2-box'


@dataclass(frozen=True)
class Grid:
    n_modes: int
    box_length: float = 1.0
    dealias_factor: float = 1.5

    def __post_init__(self):
        if int(self.n_modes) != self.n_modes or self.n_modes < 8 or self.n_modes % 2:
            raise ConfigError(f'grid.n_modes must be an even integer >= 8, got {self.n_modes}')
        if not self.box_length > 0:
            raise ConfigError(f'grid.box_length must be > 0, got {self.box_length}')
        if self.dealias_factor not in (1.5, 2.0):
            raise ConfigError(f'grid.dealias_factor must be 3/2 or 2, got {self.dealias_factor}')

    @property
    def spacing(self):
        return self.box_length / self.n_modes

    @property
    def k_max(self):
        return 2 * math.pi * (self.n_modes // 2) / self.box_length

    @property
    def product_points(self):
        # padded grid for quadratic products
        return int(round(self.n_modes * self.dealias_factor))

    @property
    def quartic_points(self):
        # padded grid for cubic products and degree-4 quadrature
        return 2 * self.n_modes

    @cached_property
    def wavenumbers(self):
        k = torch.fft.fftfreq(self.n_modes, d=1.0 / self.n_modes, dtype=DTYPE)
        k1, k2 = torch.meshgrid(k, k, indexing='ij')
        return torch.stack([k1, k2])

    @cached_property
    def kappa(self):
        return 2 * math.pi / self.box_length * self.wavenumbers

    @cached_property
    def kappa_sq(self):
        return (self.kappa ** 2).sum(0)

    @cached_property
    def band_mask(self):
        half = self.n_modes // 2
        return ((self.wavenumbers.abs() < half).all(0)).to(DTYPE)

    def pad_index(self, points: int):
        k = torch.fft.fftfreq(self.n_modes, d=1.0 / self.n_modes, dtype=DTYPE).round().long()
        return torch.remainder(k, points)

    def coordinates(self, points: Optional[int] = None):
        points = points or self.n_modes
        x = torch.arange(points, dtype=DTYPE) * (self.box_length / points)
        x1, x2 = torch.meshgrid(x, x, indexing='ij')
        return x1, x2

    def cell_weight(self, points: Optional[int] = None):
        points = points or self.n_modes
        return (self.box_length / points) ** 2


def forward_transform(values, grid: Grid):
    values = torch.as_tensor(values, dtype=DTYPE)
    if tuple(values.shape[-2:]) != (grid.n_modes, grid.n_modes):
        raise ConfigError(f'field of shape {tuple(values.shape)} does not match a {grid.n_modes}x{grid.n_modes} grid')
    return torch.fft.fft2(values) * grid.spacing ** 2


def pad_coefficients(coeffs, grid: Grid, points: int):
    idx = grid.pad_index(points)
    out = coeffs.new_zeros(tuple(coeffs.shape[:-2]) + (points, points))
    out[..., idx[:, None], idx[None, :]] = coeffs * grid.band_mask
    return out


def truncate_coefficients(coeffs, grid: Grid):
    idx = grid.pad_index(coeffs.shape[-1])
    return coeffs[..., idx[:, None], idx[None, :]] * grid.band_mask


def inverse_transform(coeffs, grid: Grid, points: Optional[int] = None):
    points = points or grid.n_modes
    if points != grid.n_modes:
        coeffs = pad_coefficients(coeffs, grid, points)
    return torch.fft.ifft2(coeffs).real / grid.cell_weight(points)


def product_coefficients(values, grid: Grid):
    # physical values on a padded grid -> band-limited coefficients on the base grid
    points = values.shape[-1]
    coeffs = torch.fft.fft2(values.to(DTYPE)) * grid.cell_weight(points)
    return truncate_coefficients(coeffs, grid)


def inner_product(f, g, grid: Grid) -> float:
    return float((f * g.conj()).real.sum() / grid.box_length ** 2)


def dual_norm_sq(coeffs, grid: Grid) -> float:
    # periodic H^{-1}: (1/L^2) sum |f_hat|^2 / (1 + |2 pi k / L|^2)
    return float(((coeffs.abs() ** 2) / (1 + grid.kappa_sq)).sum() / grid.box_length ** 2)


@dataclass(frozen=True, eq=False)
class VelocityField:
    grid: Grid
    coeffs: torch.Tensor

    @classmethod
    def zeros(cls, grid: Grid):
        return cls(grid, torch.zeros(2, grid.n_modes, grid.n_modes, dtype=CDTYPE))

    @classmethod
    def from_physical(cls, values, grid: Grid):
        return leray_project(forward_transform(values, grid), grid)

    def physical(self, points: Optional[int] = None):
        return inverse_transform(self.coeffs, self.grid, points)

    def _like(self, coeffs):
        return VelocityField(self.grid, coeffs)

    def _check(self, other):
        if other.grid != self.grid:
            raise ConfigError(f'grid mismatch: {self.grid} vs {other.grid}')

    def __add__(self, other):
        self._check(other)
        return self._like(self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check(other)
        return self._like(self.coeffs - other.coeffs)

    def __neg__(self):
        return self._like(-self.coeffs)

    def __mul__(self, scalar):
        return self._like(self.coeffs * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self._like(self.coeffs / scalar)

    def inner(self, other) -> float:
        self._check(other)
        return inner_product(self.coeffs, other.coeffs, self.grid)

    def l2_sq(self) -> float:
        return inner_product(self.coeffs, self.coeffs, self.grid)

    def mean(self):
        return self.coeffs[:, 0, 0].real / self.grid.box_length ** 2

    def divergence_residual(self) -> float:
        scale = float(self.coeffs.abs().max())
        if scale == 0.0:
            return 0.0
        div = (self.grid.wavenumbers * self.coeffs).sum(0)
        return float(div.abs().max()) / (scale * self.grid.n_modes)

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.coeffs.real).all() and torch.isfinite(self.coeffs.imag).all())


def leray_project(coeffs, grid: Grid) -> VelocityField:
    """
    Exact Fourier Helmholtz projection: u_hat - k (k . u_hat) / |k|^2.
    The mean mode passes through unchanged.
    """
    if tuple(coeffs.shape) != (2, grid.n_modes, grid.n_modes):
        raise ConfigError(f'vector coefficients must have shape (2, {grid.n_modes}, {grid.n_modes}), got {tuple(coeffs.shape)}')
    coeffs = coeffs.to(CDTYPE) * grid.band_mask
    k = grid.kappa
    k_sq = grid.kappa_sq.clone()
    k_sq[0, 0] = 1.0
    return VelocityField(grid, coeffs - k * (k * coeffs).sum(0) / k_sq)


def gradient_part(coeffs, grid: Grid):
    return coeffs.to(CDTYPE) * grid.band_mask - leray_project(coeffs, grid).coeffs


def curl_residual(coeffs, grid: Grid) -> float:
    # max |k x g_hat| relative to max |g_hat|; zero for gradient fields
    scale = float(coeffs.abs().max())
    if scale == 0.0:
        return 0.0
    k = grid.wavenumbers
    cross = k[0] * coeffs[1] - k[1] * coeffs[0]
    return float(cross.abs().max()) / (scale * grid.n_modes)


def velocity_gradient(u: VelocityField, points: Optional[int] = None):
    # grad[i, j] = d_j u_i
    dcoeffs = 1j * rearrange(u.coeffs, 'i x y -> i 1 x y') * u.grid.kappa[None]
    return inverse_transform(dcoeffs, u.grid, points)


@dataclass(frozen=True, eq=False)
class SymTensorField:
    grid: Grid
    values: torch.Tensor

    @property
    def points(self):
        return self.values.shape[-1]

    def trace(self):
        return self.values[0, 0] + self.values[1, 1]

    def frobenius_sq(self):
        return (self.values ** 2).sum((0, 1))

    def square(self):
        return torch.einsum('ikxy,kjxy->ijxy', self.values, self.values)

    def contract(self, other):
        return (self.values * other.values).sum((0, 1))

    def integrate(self, scalar) -> float:
        return float(scalar.sum()) * self.grid.cell_weight(self.points)

    def is_symmetric(self) -> bool:
        return bool(torch.equal(self.values[0, 1], self.values[1, 0]))


def sym_gradient(u: VelocityField, points: Optional[int] = None) -> SymTensorField:
    grad = velocity_gradient(u, points)
    return SymTensorField(u.grid, grad + rearrange(grad, 'i j x y -> j i x y'))


@dataclass(frozen=True)
class FieldNorms:
    l2_sq: float
    e_l2_sq: float
    e_l4_4: float
    grad_l4_4: float
    u_l4_4: float


def norms(u: VelocityField) -> FieldNorms:
    grid = u.grid
    points = grid.quartic_points
    w = grid.cell_weight(points)
    e_coeffs = 1j * rearrange(u.coeffs, 'i x y -> i 1 x y') * grid.kappa[None]
    e_coeffs = e_coeffs + rearrange(e_coeffs, 'i j x y -> j i x y')
    e_l2_sq = float((e_coeffs.abs() ** 2).sum()) / grid.box_length ** 2
    u_phys = u.physical(points)
    grad = velocity_gradient(u, points)
    e = grad + rearrange(grad, 'i j x y -> j i x y')
    return FieldNorms(
        l2_sq=u.l2_sq(),
        e_l2_sq=e_l2_sq,
        e_l4_4=float(((e ** 2).sum((0, 1)) ** 2).sum()) * w,
        grad_l4_4=float(((grad ** 2).sum((0, 1)) ** 2).sum()) * w,
        u_l4_4=float(((u_phys ** 2).sum(0) ** 2).sum()) * w,
    )


def sup_norms(u: VelocityField) -> Tuple[float, float]:
    # sup |u| and sup |E(u)| sampled on the factor-2 grid
    points = u.grid.quartic_points
    u_sup = float((u.physical(points) ** 2).sum(0).sqrt().max())
    e_sup = float(sym_gradient(u, points).frobenius_sq().sqrt().max())
    return u_sup, e_sup


def cutoff_profile(xi):
    # C^2 ramp s^3 (10 - 15 s + 6 s^2) with s = xi - 1 clipped to [0, 1]
    s = torch.clamp(torch.as_tensor(xi, dtype=DTYPE) - 1.0, 0.0, 1.0)
    return s ** 3 * (10 - 15 * s + 6 * s ** 2)


# max |q'| = 15/8 at s = 1/2, max |q''| = 10/sqrt(3)
PROFILE_DERIVATIVE_BOUND = max(15 / 8, 10 / math.sqrt(3))


@dataclass(frozen=True)
class Cutoff:
    radius_k: float
    center: Optional[Tuple[float, float]] = None
    derivative_bound: float = PROFILE_DERIVATIVE_BOUND

    def __post_init__(self):
        if not self.radius_k > 0:
            raise ConfigError(f'cutoff radius must be > 0, got {self.radius_k}')

    def xi(self, grid: Grid, points: Optional[int] = None):
        cx, cy = self.center if self.center is not None else (grid.box_length / 2, grid.box_length / 2)
        x1, x2 = grid.coordinates(points)
        return ((x1 - cx) ** 2 + (x2 - cy) ** 2) / self.radius_k ** 2

    def profile(self, grid: Grid, points: Optional[int] = None):
        return cutoff_profile(self.xi(grid, points))


def _check_cutoff(u: VelocityField, cut: Cutoff):
    if cut.radius_k >= u.grid.box_length / 2:
        raise ConfigError(f'cutoff radius {cut.radius_k} does not fit inside a periodic cell of side {u.grid.box_length}')


def tail_mass(u: VelocityField, cut: Cutoff) -> float:
    _check_cutoff(u, cut)
    points = u.grid.quartic_points
    weight = cut.profile(u.grid, points) ** 2
    return float((weight * (u.physical(points) ** 2).sum(0)).sum()) * u.grid.cell_weight(points)


def inner_mass(u: VelocityField, cut: Cutoff) -> float:
    # mass of |u|^2 where the profile is below one, i.e. inside radius sqrt(2) k
    _check_cutoff(u, cut)
    points = u.grid.quartic_points
    inside = (cut.xi(u.grid, points) < 2.0).to(DTYPE)
    return float((inside * (u.physical(points) ** 2).sum(0)).sum()) * u.grid.cell_weight(points)


def mode_field(grid: Grid, k=(1, 0), amplitude=1.0, phase=0.0) -> VelocityField:
    """Divergence-free single Fourier mode amplitude * k_perp/|k| * cos(2 pi k.x / L + phase)."""
    k1, k2 = k
    norm = math.hypot(k1, k2)
    assert norm > 0, 'mode_field needs a nonzero wavevector'
    x1, x2 = grid.coordinates()
    arg = 2 * math.pi * (k1 * x1 + k2 * x2) / grid.box_length + phase
    values = amplitude * torch.stack([-k2 / norm * torch.cos(arg), k1 / norm * torch.cos(arg)])
    return VelocityField.from_physical(values, grid)


def random_velocity(grid: Grid, rng: np.random.Generator, amplitude=1.0, max_mode=None, zero_mean=False) -> VelocityField:
    values = torch.from_numpy(rng.standard_normal((2, grid.n_modes, grid.n_modes)))
    coeffs = forward_transform(values, grid)
    if max_mode is not None:
        coeffs = coeffs * (grid.wavenumbers.abs() <= max_mode).all(0)
    if zero_mean:
        coeffs[:, 0, 0] = 0.0
    u = leray_project(coeffs, grid)
    size = math.sqrt(u.l2_sq())
    return u * (amplitude / size) if size > 0 else u


def korn_ratio(u: VelocityField) -> float:
    n = norms(u)
    if n.e_l4_4 == 0.0:
        return float('nan')
    return (n.grad_l4_4 / n.e_l4_4) ** 0.25


def _trial_fields(grid: Grid, samples: int, seed: int):
    # lowest shells first, then random fields of varying bandwidth
    for k in [(1, 0), (0, 1), (1, 1), (1, -1), (2, 1), (1, 2)]:
        yield mode_field(grid, k)
        yield mode_field(grid, k) + mode_field(grid, (k[1], -k[0]), phase=0.5)
    rng = np.random.default_rng(seed)
    half = grid.n_modes // 2
    for _ in range(samples):
        max_mode = int(rng.integers(1, half))
        yield random_velocity(grid, rng, max_mode=max_mode, zero_mean=True)


def estimate_korn_constant(grid: Grid, samples: int = 200, seed: int = 0) -> float:
    """
    Lower bound for the discrete constant in ||grad u||_4 <= C ||E(u)||_4 over
    divergence-free band-limited fields. Deterministic in (grid, samples, seed).
    """
    if samples < 100:
        raise ConfigError(f'estimate_korn_constant needs samples >= 100, got {samples}')
    best = 0.0
    for u in _trial_fields(grid, samples, seed):
        ratio = korn_ratio(u)
        if math.isfinite(ratio):
            best = max(best, ratio)
    return best


def estimate_sobolev_constant(grid: Grid, samples: int = 200, seed: int = 0) -> float:
    # sup ||u - mean||_inf / ||grad u||_4 over sampled fields
    if samples < 100:
        raise ConfigError(f'estimate_sobolev_constant needs samples >= 100, got {samples}')
    best = 0.0
    for u in _trial_fields(grid, samples, seed):
        n = norms(u)
        if n.grad_l4_4 == 0.0:
            continue
        fluct = u.physical(grid.quartic_points) - u.mean()[:, None, None]
        sup = float((fluct ** 2).sum(0).sqrt().max())
        best = max(best, sup / n.grad_l4_4 ** 0.25)
    return best


def estimate_md_constant(grid: Grid, samples: int = 200, seed: int = 0) -> float:
    return estimate_sobolev_constant(grid, samples, seed) * estimate_korn_constant(grid, samples, seed)


if __name__ == '__main__':
    grid = Grid(32, box_length=1.0)
    rng = np.random.default_rng(0)
    u = random_velocity(grid, rng, max_mode=6)
    print(norms(u))
    print(f'divergence residual {u.divergence_residual():.2e}')
    print(f'Korn ratio of the shear mode {korn_ratio(mode_field(grid, (0, 1))):.6f} (1/sqrt(2) = {1 / math.sqrt(2):.6f})')
    print(f'tail mass at k = L/4: {tail_mass(u, Cutoff(0.25)):.6f} of {u.l2_sq():.6f}')
