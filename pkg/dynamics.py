"""
Pathwise integration of the transformed third-grade system

    dZ/dt + nu A Z + (sigma^2/2 - sigma y) Z + U^-1 B(Z) + alpha U^-1 J(Z) + beta U^-2 K(Z) = U P f

with U(t) = exp(-sigma y(t)) and Z = U Y, Y the solution of the Ito system.

One solver step covers an even number m >= 2 of noise-path substeps, so the midpoint
is a grid time. The diagonal part nu |k|^2 + sigma^2/2 - sigma ybar (ybar the trapezoid
mean of y over the step) is integrated exactly, B, J, K and the forcing are explicit with
U taken at the midpoint:

    z_{n+1} = P exp(-Lambda dt) (z_n + dt N(z_n)).

Every step audits the discrete energy balance against the continuous energy inequality.
"""
import math
import numpy as np
import torch
from dataclasses import dataclass, field, asdict, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, List, Optional, Sequence
from tqdm import tqdm
from scipy.integrate import cumulative_trapezoid

from fields import (
    Grid,
    VelocityField,
    FieldNorms,
    forward_transform,
    inverse_transform,
    leray_project,
    gradient_part,
    inner_product,
    dual_norm_sq,
    norms,
    sup_norms,
    random_velocity,
    CDTYPE,
)
from operators import convection, stress_J, stress_K, pair
from stochastics import MAX_REFINE, mean_ou, path_from_spec
from fieldio import encode_snapshot
from utils import ConfigError, IntegrationError, OffGridError, StepRefused, null_log


@dataclass(frozen=True)
class PhysicalParams:
    nu: float
    alpha: float
    beta: float
    sigma: float
    # False switches off B, J and K for linear reference runs (requires alpha = beta = 0)
    nonlinear: bool = True

    def __post_init__(self):
        if not self.nu > 0:
            raise ConfigError(f'nu > 0 violated: nu = {self.nu}')
        if not self.sigma > 0:
            raise ConfigError(f'sigma > 0 violated: sigma = {self.sigma} (the absorption rate sigma^2/2 degenerates)')
        if self.nonlinear:
            if not self.beta > 0:
                raise ConfigError(f'beta > 0 violated: beta = {self.beta}')
            bound = math.sqrt(2 * self.nu * self.beta)
            if not abs(self.alpha) < bound:
                raise ConfigError(f'|alpha| < sqrt(2*nu*beta) violated: |alpha| = {abs(self.alpha)}, sqrt(2*nu*beta) = {bound}')
        elif self.alpha != 0 or self.beta != 0:
            raise ConfigError('linear runs (nonlinear = false) need alpha = beta = 0')

    @property
    def epsilon0(self):
        if self.beta == 0:
            return 1.0
        return 1.0 - math.sqrt(self.alpha ** 2 / (2 * self.beta * self.nu))

    @property
    def absorption_rate(self):
        return min(2 * self.nu * self.epsilon0, self.sigma ** 2)


FORCING_KINDS = ('zero', 'constant_field', 'time_varying')
FORCING_SHAPES = ('shear', 'gaussian', 'gradient', 'random')
TIME_PROFILES = ('polynomial', 'exponential', 'periodic')


@dataclass(frozen=True)
class ForcingSchedule:
    """
    f(x, t) = time_factor(t) * spatial(x).
    time_varying profiles: |t|^power, exp(rate |t|), 1 + cos(2 pi t / period) / 2.
    """
    kind: str = 'zero'
    shape: str = 'shear'
    amplitude: float = 1.0
    mode: int = 1
    width: float = 0.05
    seed: int = 0
    profile: str = 'polynomial'
    power: float = 1.0
    rate: float = 0.0
    period: float = 1.0
    delta: float = 0.0

    def __post_init__(self):
        if self.kind not in FORCING_KINDS:
            raise ConfigError(f'forcing.kind must be one of {FORCING_KINDS}, got {self.kind!r}')
        if self.shape not in FORCING_SHAPES:
            raise ConfigError(f'forcing.shape must be one of {FORCING_SHAPES}, got {self.shape!r}')
        if self.profile not in TIME_PROFILES:
            raise ConfigError(f'forcing.profile must be one of {TIME_PROFILES}, got {self.profile!r}')
        if self.delta < 0:
            raise ConfigError(f'forcing.delta must be >= 0, got {self.delta}')

    @property
    def is_zero(self):
        return self.kind == 'zero' or self.amplitude == 0

    def check_delta(self, sigma):
        if not self.delta < sigma ** 2 / 2:
            raise ConfigError(f'delta < sigma^2/2 violated: delta = {self.delta}, sigma^2/2 = {sigma ** 2 / 2}')

    def time_factor(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.is_zero:
            return np.zeros_like(t)
        if self.kind == 'constant_field':
            return np.ones_like(t)
        if self.profile == 'polynomial':
            return np.abs(t) ** self.power
        if self.profile == 'exponential':
            with np.errstate(over='ignore'):
                return np.exp(self.rate * np.abs(t))
        return 1 + 0.5 * np.cos(2 * math.pi * t / self.period)

    def spatial(self, grid: Grid):
        return _spatial_forcing(self, grid)

    def coefficients(self, grid: Grid, t):
        return float(self.time_factor(t)) * self.spatial(grid)

    def dual_norm_sq(self, grid: Grid, t):
        # of the projected forcing, the part that enters the velocity equation
        return self.time_factor(t) ** 2 * _spatial_norms(self, grid)[0]

    def l2_norm_sq(self, grid: Grid, t):
        return self.time_factor(t) ** 2 * _spatial_norms(self, grid)[1]


@lru_cache(maxsize=32)
def _spatial_forcing(forcing: ForcingSchedule, grid: Grid):
    if forcing.is_zero:
        return torch.zeros(2, grid.n_modes, grid.n_modes, dtype=CDTYPE)
    L, m = grid.box_length, forcing.mode
    x1, x2 = grid.coordinates()
    if forcing.shape == 'shear':
        values = torch.stack([torch.sin(2 * math.pi * m * x2 / L), torch.zeros_like(x2)])
        return forcing.amplitude * forward_transform(values, grid)
    if forcing.shape == 'gaussian':
        # curl of a Gaussian stream function centred in the cell
        w = forcing.width * L
        psi = torch.exp(-((x1 - L / 2) ** 2 + (x2 - L / 2) ** 2) / (2 * w ** 2))
        psi_hat = forward_transform(psi, grid)
        coeffs = torch.stack([1j * grid.kappa[1] * psi_hat, -1j * grid.kappa[0] * psi_hat]) * grid.band_mask
        peak = float((inverse_transform(coeffs, grid) ** 2).sum(0).sqrt().max())
        return forcing.amplitude / peak * coeffs
    if forcing.shape == 'gradient':
        phi = torch.cos(2 * math.pi * m * x1 / L) + torch.sin(2 * math.pi * m * x2 / L)
        phi_hat = forward_transform(phi, grid)
        return forcing.amplitude * 1j * grid.kappa * phi_hat * grid.band_mask
    rng = np.random.default_rng(forcing.seed)
    coeffs = forward_transform(torch.from_numpy(rng.standard_normal((2, grid.n_modes, grid.n_modes))), grid)
    coeffs = coeffs * (grid.wavenumbers.abs() <= max(m, 1)).all(0) * grid.band_mask
    size = math.sqrt(inner_product(coeffs, coeffs, grid))
    return forcing.amplitude / size * coeffs


@lru_cache(maxsize=32)
def _spatial_norms(forcing: ForcingSchedule, grid: Grid):
    projected = leray_project(forcing.spatial(grid), grid).coeffs
    return dual_norm_sq(projected, grid), inner_product(projected, projected, grid)


@dataclass(frozen=True)
class LedgerRow:
    t: float
    dt: float
    substeps: int
    l2_sq: float
    e_l2_sq: float
    e_l4_4: float
    y: float
    upsilon: float
    y_mean: float
    forcing_dual_sq: float
    audit_residual: float
    inequality_excess: float
    audit_bound: float
    audit_passed: bool


@dataclass(frozen=True, eq=False)
class SolverState:
    t: float
    z: VelocityField
    ledger_row: Optional[LedgerRow] = None
    norms: Optional[FieldNorms] = None

    def with_norms(self):
        return self if self.norms is not None else replace(self, norms=norms(self.z))


@dataclass(frozen=True)
class AuditPolicy:
    """Step passes when inequality_excess and |identity defect| are both <= constant * dt * scale + rtol * energy / dt."""
    constant: float = 8.0
    rtol: float = 1e-10
    calibration_ratio: float = float('nan')

    def bound(self, dt, scale, energy):
        return self.constant * dt * scale + self.rtol * energy / dt


@dataclass(frozen=True, eq=False)
class Tendency:
    tendency: VelocityField
    unprojected: torch.Tensor


def _nonlinear(z: VelocityField, ups: float, params: PhysicalParams, f_coeffs):
    """Explicit part N(z) = -U^-1 B - alpha U^-1 J - beta U^-2 K + U f, projected and not."""
    unprojected = ups * f_coeffs
    projected = ups * leray_project(f_coeffs, z.grid).coeffs
    if params.nonlinear:
        b = convection(z, z)
        k = stress_K(z)
        unprojected = unprojected - b.unprojected / ups - params.beta * k.unprojected / ups ** 2
        projected = projected - b.projected.coeffs / ups - params.beta * k.projected.coeffs / ups ** 2
        if params.alpha != 0:
            j = stress_J(z)
            unprojected = unprojected - params.alpha * j.unprojected / ups
            projected = projected - params.alpha * j.projected.coeffs / ups
    return projected, unprojected


def _linear_rate(grid: Grid, params: PhysicalParams, y):
    return params.nu * grid.kappa_sq + params.sigma ** 2 / 2 - params.sigma * y


def rhs_transformed(z: VelocityField, t, path, params: PhysicalParams, forcing: ForcingSchedule) -> Tendency:
    y = path.ou_at(t)
    ups = math.exp(-params.sigma * y)
    projected, unprojected = _nonlinear(z, ups, params, forcing.coefficients(z.grid, t))
    linear = -_linear_rate(z.grid, params, y) * z.coeffs
    tendency = VelocityField(z.grid, linear + projected)
    if not tendency.is_finite():
        raise IntegrationError(f'non-finite tendency at t={t}', SolverState(t, z))
    return Tendency(tendency, linear + unprojected)


def stability_bound(z: VelocityField, ups: float, params: PhysicalParams, dt_cap: float = 0.5) -> float:
    """
    min{0.2 / (U^-1 |z|_inf k_max), 0.1 / (beta U^-2 |E|_inf^2 k_max^2),
        0.1 / (|alpha| U^-1 |E|_inf k_max^2), dt_cap}
    """
    if not params.nonlinear:
        return dt_cap
    u_sup, e_sup = sup_norms(z)
    k_max = z.grid.k_max
    bounds = [dt_cap]
    if u_sup > 0:
        bounds.append(0.2 / (u_sup / ups * k_max))
    if e_sup > 0:
        bounds.append(0.1 / (params.beta * e_sup ** 2 / ups ** 2 * k_max ** 2))
        if params.alpha != 0:
            bounds.append(0.1 / (abs(params.alpha) * e_sup / ups * k_max ** 2))
    return min(bounds)


def _substeps(dt, path):
    m = dt / path.dt
    mi = int(round(m))
    if abs(m - mi) > 1e-6 or mi < 2 or mi % 2:
        raise ConfigError(f'solver step {dt} must be an even multiple (>= 2) of the path step {path.dt}')
    return mi


def _advance(state: SolverState, path, params: PhysicalParams, forcing: ForcingSchedule, dt, check_stability=True):
    z = state.z
    grid = z.grid
    m = _substeps(dt, path)
    t0 = state.t
    # snap to the grid so long runs do not accumulate drift
    t1 = path.t_start + path.index(t0 + dt) * path.dt
    tm = path.t_start + path.index(t0 + 0.5 * dt) * path.dt
    y_bar = mean_ou(path, t0, t1)
    ups_m = path.upsilon(tm, params.sigma)
    if check_stability:
        bound = stability_bound(z, ups_m, params)
        if dt > bound:
            raise StepRefused(f'dt={dt} exceeds the stability bound {bound:.4g} at t={t0}', dt=dt, bound=bound)
    f_coeffs = forcing.coefficients(grid, tm)
    n_coeffs, _ = _nonlinear(z, ups_m, params, f_coeffs)
    lam = _linear_rate(grid, params, y_bar)
    z1 = leray_project(torch.exp(-lam * dt) * (z.coeffs + dt * n_coeffs), grid)
    if not z1.is_finite():
        raise IntegrationError(f'non-finite state after the step from t={t0} with dt={dt}', state)
    diagnostics = dict(m=m, t1=t1, tm=tm, y_bar=y_bar, ups_m=ups_m, n_coeffs=n_coeffs, lam=lam, f_coeffs=f_coeffs)
    return z1, diagnostics


def _audit(state: SolverState, z1: VelocityField, n1: FieldNorms, d: dict, params: PhysicalParams, dt, policy: AuditPolicy):
    """
    identity defect: (|z1|^2 - |z0|^2)/dt - 2 <F(z0), z0>, O(dt) for the scheme.
    inequality excess: the same drift plus the energy-inequality terms, <= defect exactly
    for the continuous operators, so it is bounded by the policy.
    """
    grid = z1.grid
    n0 = state.norms
    z0 = state.z
    drift = (n1.l2_sq - n0.l2_sq) / dt
    lam_z = d['lam'] * z0.coeffs
    power = inner_product(d['n_coeffs'], z0.coeffs, grid) - inner_product(lam_z, z0.coeffs, grid)
    defect = drift - 2 * power
    s = params.sigma
    fd = dual_norm_sq(leray_project(d['f_coeffs'], grid).coeffs, grid)
    ups = d['ups_m']
    excess = (drift + (s ** 2 / 2 - 2 * s * d['y_bar']) * n0.l2_sq
              + params.nu * params.epsilon0 / 2 * n0.e_l2_sq
              + params.beta * params.epsilon0 * n0.e_l4_4 / ups ** 2
              - 2 * ups ** 2 * fd / params.absorption_rate)
    scale = inner_product(lam_z, lam_z, grid) + inner_product(d['n_coeffs'], d['n_coeffs'], grid)
    bound = policy.bound(dt, scale, n0.l2_sq + n1.l2_sq)
    return defect, excess, bound, fd


def step(state: SolverState, path, params: PhysicalParams, forcing: ForcingSchedule, dt, audit: Optional[AuditPolicy] = None) -> SolverState:
    state = state.with_norms()
    audit = audit or AuditPolicy()
    z1, d = _advance(state, path, params, forcing, dt)
    n1 = norms(z1)
    defect, excess, bound, fd = _audit(state, z1, n1, d, params, dt, audit)
    y1 = path.ou_at(d['t1'])
    row = LedgerRow(
        t=d['t1'], dt=dt, substeps=d['m'],
        l2_sq=n1.l2_sq, e_l2_sq=n1.e_l2_sq, e_l4_4=n1.e_l4_4,
        y=y1, upsilon=math.exp(-params.sigma * y1), y_mean=d['y_bar'],
        forcing_dual_sq=fd, audit_residual=defect, inequality_excess=excess,
        audit_bound=bound, audit_passed=bool(excess <= bound and abs(defect) <= bound),
    )
    return SolverState(d['t1'], z1, row, n1)


def initial_row(state: SolverState, path, params: PhysicalParams, forcing: ForcingSchedule) -> LedgerRow:
    state = state.with_norms()
    y = path.ou_at(state.t)
    n = state.norms
    return LedgerRow(t=state.t, dt=0.0, substeps=0, l2_sq=n.l2_sq, e_l2_sq=n.e_l2_sq, e_l4_4=n.e_l4_4,
                     y=y, upsilon=math.exp(-params.sigma * y), y_mean=y,
                     forcing_dual_sq=float(forcing.dual_norm_sq(state.z.grid, state.t)),
                     audit_residual=0.0, inequality_excess=0.0, audit_bound=0.0, audit_passed=True)


def calibrate_audit(state: SolverState, path, params: PhysicalParams, forcing: ForcingSchedule, dt,
                    safety: float = 4.0, floor: float = 8.0) -> AuditPolicy:
    """
    Runs the first step at dt and at dt/2 (or 2dt when dt/2 is not an even number of
    substeps) and sizes the audit constant from the observed defect per dt * scale.
    """
    state = state.with_norms()
    m = _substeps(dt, path)
    pair_dts = (dt, dt / 2) if m % 4 == 0 else (2 * dt, dt)
    try:
        path.index(state.t + max(pair_dts))
    except OffGridError:
        pair_dts = (dt,)
    raw = AuditPolicy(constant=0.0, rtol=0.0)
    ratios, defects = [], []
    for h in pair_dts:
        z1, d = _advance(state, path, params, forcing, h, check_stability=False)
        defect, _, _, _ = _audit(state, z1, norms(z1), d, params, h, raw)
        lam_z = d['lam'] * state.z.coeffs
        scale = inner_product(lam_z, lam_z, z1.grid) + inner_product(d['n_coeffs'], d['n_coeffs'], z1.grid)
        defects.append(abs(defect))
        if scale > 0:
            ratios.append(abs(defect) / (h * scale))
    observed = max(ratios) if ratios else 0.0
    halving = defects[0] / defects[1] if len(defects) == 2 and defects[1] > 0 else float('nan')
    return AuditPolicy(constant=max(safety * observed, floor), calibration_ratio=halving)


@dataclass(eq=False)
class Trajectory:
    times: List[float] = field(default_factory=list)
    states: List[VelocityField] = field(default_factory=list)
    rows: List[LedgerRow] = field(default_factory=list)
    final: Optional[SolverState] = None
    audit: Optional[AuditPolicy] = None
    # deepest bridge refinement of the path the run needed
    refinement: int = 0

    def record(self, state: SolverState):
        self.times.append(state.t)
        self.states.append(state.z)


def _choose_dt(state, path, params, remaining, max_dt):
    # largest even substep count under 0.9 times the stability bound, capped by max_dt and the time left
    bound = 0.9 * stability_bound(state.z, path.upsilon(state.t, params.sigma), params)
    m = min(int(min(bound, max_dt) / path.dt + 1e-9), int(round(remaining / path.dt)))
    m -= m % 2
    if m < 2:
        raise StepRefused(f'path step {path.dt} too coarse: two substeps exceed the stability bound {bound:.4g} at t={state.t}',
                          dt=2 * path.dt, bound=bound)
    return m * path.dt


def _step_halving(states, path, params, forcing, dt, audit):
    # one shared step for every state, halved while any of them refuses
    while True:
        try:
            return [step(s, path, params, forcing, dt, audit) for s in states], dt
        except StepRefused:
            m = int(round(dt / path.dt)) // 2
            m -= m % 2
            if m < 2:
                raise
            dt = m * path.dt


def _next_pair(path, t):
    # the next two path steps from t, refined once
    if path.level >= MAX_REFINE:
        raise StepRefused(f'path step {path.dt} still too coarse after {path.level} refinements at t={t}', dt=2 * path.dt)
    return path.segment(t, path.t_start + (path.index(t) + 2) * path.dt).refine()


def _first_dt(states, path, params, remaining, max_dt):
    while True:
        try:
            return min(_choose_dt(s, path, params, remaining, max_dt) for s in states), path
        except StepRefused:
            path = _next_pair(path, states[0].t)
            remaining = min(remaining, path.t_end - states[0].t)


def _adaptive_step(states, path, params, forcing, audit, remaining, max_dt, ledgers):
    """
    One shared adaptive step of every state. When not even two substeps fit, the next
    two path steps are refined by bridge sampling and crossed on the finer grid, which
    recurses until the bound is met. Each ledger gets a row per step taken. Returns the
    states and the deepest refinement level used.
    """
    try:
        dt = min(_choose_dt(s, path, params, remaining, max_dt) for s in states)
        states, _ = _step_halving(states, path, params, forcing, dt, audit)
        for ledger, s in zip(ledgers, states):
            ledger.append(s.ledger_row)
        return states, path.level
    except StepRefused:
        fine = _next_pair(path, states[0].t)
    level = fine.level
    while fine.index(states[0].t) < fine.n_steps:
        states, deepest = _adaptive_step(states, fine, params, forcing, audit, fine.t_end - states[0].t, max_dt, ledgers)
        level = max(level, deepest)
    return states, level


def integrate(z0, t0, t1, path, params: PhysicalParams, forcing: ForcingSchedule, substeps: Optional[int] = None,
              max_substeps: int = 50, audit: Optional[AuditPolicy] = None, record_every: int = 1,
              record_times: Sequence[float] = (), log: Callable = null_log, progress: bool = False,
              checkpoint: Optional[Path] = None) -> Trajectory:
    """
    Integrates from t0 to t1 on the path grid. substeps fixes the step at substeps * path.dt
    and refuses rather than refine. Otherwise each step takes the largest even substep count
    under the stability bound (capped by max_substeps), is halved on refusal, and crosses
    the next two path steps on a bridge-refined grid when two substeps are still too long.
    record_every = 0 keeps only the end state; record_times are always kept and adaptive
    steps stop on them. Recorded times stay on the path grid.
    """
    state = z0 if isinstance(z0, SolverState) else SolverState(t0, z0)
    state = state.with_norms()
    i0, i1 = path.index(state.t), path.index(t1)
    if (i1 - i0) % 2:
        raise ConfigError(f'interval [{state.t}, {t1}] is not an even number of path steps')
    if substeps is not None:
        _substeps(substeps * path.dt, path)
        if (i1 - i0) % substeps:
            raise ConfigError(f'interval [{state.t}, {t1}] is not a whole number of {substeps}-substep steps')
    stops = sorted({path.index(t) for t in record_times if state.t < t <= t1} | {i1})
    if any((i - i0) % (substeps or 2) for i in stops):
        raise ConfigError('record_times must sit on solver step boundaries')
    max_dt = max_substeps * path.dt
    if audit is None and i1 > i0:
        if substeps:
            first, first_path = substeps * path.dt, path
        else:
            first, first_path = _first_dt([state], path, params, (stops[0] - i0) * path.dt, max_dt)
        audit = calibrate_audit(state, first_path, params, forcing, first)
        log(f'audit constant {audit.constant:.4g} (defect halving ratio {audit.calibration_ratio:.3f})', logonly=True)

    traj = Trajectory(audit=audit)
    traj.rows.append(state.ledger_row or initial_row(state, path, params, forcing))
    if record_every:
        traj.record(state)
    n, i = 0, i0
    with tqdm(total=i1 - i0, disable=not progress, leave=False) as bar:
        for stop in stops:
            while i < stop:
                if substeps is not None:
                    state = step(state, path, params, forcing, substeps * path.dt, audit)
                    traj.rows.append(state.ledger_row)
                else:
                    remaining = (stop - i) * path.dt
                    (state,), level = _adaptive_step([state], path, params, forcing, audit, remaining, max_dt, [traj.rows])
                    traj.refinement = max(traj.refinement, level)
                n += 1
                bar.update(path.index(state.t) - i)
                i = path.index(state.t)
                if record_every and n % record_every == 0:
                    traj.record(state)
            if not traj.times or traj.times[-1] != state.t:
                traj.record(state)
    if traj.refinement:
        log(f'stability bound needed {traj.refinement} bridge refinements of the path', logonly=True)
    traj.final = state
    if checkpoint is not None:
        save_checkpoint(checkpoint, state, path, params, forcing, len(traj.rows), audit)
    return traj


def integrate_lockstep(z0s: Sequence[VelocityField], t0, t1, path, params: PhysicalParams, forcing: ForcingSchedule,
                       max_substeps: int = 50, record_every: int = 1, audit: Optional[AuditPolicy] = None) -> List[Trajectory]:
    """
    Adaptive integration of several initial data on one shared time grid: each step
    takes the smallest admissible dt over the ensemble, refining the path where needed.
    """
    states = [SolverState(t0, z).with_norms() for z in z0s]
    i, i1 = path.index(t0), path.index(t1)
    if (i1 - i) % 2:
        raise ConfigError(f'interval [{t0}, {t1}] is not an even number of path steps')
    max_dt = max_substeps * path.dt
    if audit is None and i1 > i:
        first, first_path = _first_dt(states, path, params, (i1 - i) * path.dt, max_dt)
        audit = calibrate_audit(states[0], first_path, params, forcing, first)
    trajs = [Trajectory(audit=audit) for _ in states]
    for traj, s in zip(trajs, states):
        traj.rows.append(initial_row(s, path, params, forcing))
        if record_every:
            traj.record(s)
    n, level = 0, 0
    while i < i1:
        states, deepest = _adaptive_step(states, path, params, forcing, audit, (i1 - i) * path.dt, max_dt,
                                         [traj.rows for traj in trajs])
        level = max(level, deepest)
        n += 1
        i = path.index(states[0].t)
        for traj, s in zip(trajs, states):
            if record_every and n % record_every == 0:
                traj.record(s)
    for traj, s in zip(trajs, states):
        if not traj.times or traj.times[-1] != s.t:
            traj.record(s)
        traj.final = s
        traj.refinement = level
    return trajs


def doss_sussman_inverse(z: VelocityField, path, t, sigma) -> VelocityField:
    return z / path.upsilon(t, sigma)


@dataclass(frozen=True, eq=False)
class PressureGradients:
    p1_gradient: torch.Tensor
    p2_gradient: torch.Tensor
    grid: Grid

    def pressures(self):
        return pressure_from_gradient(self.p1_gradient, self.grid), pressure_from_gradient(self.p2_gradient, self.grid)


def recover_pressure(z: VelocityField, t, path, params: PhysicalParams, forcing: ForcingSchedule) -> PressureGradients:
    """
    grad P1 = (I - P){nu U^-1 Lap z - U^-2 (z.grad)z + alpha U^-2 div(E^2) + f}
    grad P2 = beta U^-3 (I - P) div(|E|^2 E)
    for the pressure of the Ito variable Y = z / U.
    """
    grid = z.grid
    ups = path.upsilon(t, params.sigma)
    total = -params.nu / ups * grid.kappa_sq * z.coeffs + forcing.coefficients(grid, t)
    p2 = torch.zeros_like(z.coeffs)
    if params.nonlinear:
        total = total - convection(z, z).unprojected / ups ** 2
        if params.alpha != 0:
            total = total - params.alpha * stress_J(z).unprojected / ups ** 2
        p2 = -params.beta / ups ** 3 * gradient_part(stress_K(z).unprojected, grid)
    return PressureGradients(gradient_part(total, grid), p2, grid)


def pressure_from_gradient(g, grid: Grid):
    # P_hat = -i (k . g_hat) / |k|^2, zero mean
    k_sq = grid.kappa_sq.clone()
    k_sq[0, 0] = 1.0
    p_hat = -1j * (grid.kappa * g).sum(0) / k_sq
    p_hat[0, 0] = 0.0
    return inverse_transform(p_hat, grid)


@dataclass
class ContinuityBound:
    times: np.ndarray
    lhs_series: np.ndarray
    rhs_series: np.ndarray
    md: float

    @property
    def lhs(self):
        return float(self.lhs_series[-1])

    @property
    def rhs(self):
        return float(self.rhs_series[-1])

    def holds(self, rtol=1e-9):
        return bool(np.all(self.lhs_series <= self.rhs_series * (1 + rtol)))


def continuity_bound(z1_traj: Trajectory, z2_traj: Trajectory, path, params: PhysicalParams, md: float = 0.0) -> ContinuityBound:
    """
    |z1(t) - z2(t)|^2 against |z1(r) - z2(r)|^2 exp(int_r^t [2 sigma |y| + U^-2 q^2 / (nu eps0)]),
    q = max(md ||E(z1)||_4, ||z1 - mean z1||_inf). md is an estimated discrete constant, so the
    right side is an estimate rather than a proven bound.
    """
    times = np.asarray(z1_traj.times)
    if len(times) != len(z2_traj.times) or not np.allclose(times, z2_traj.times, rtol=0, atol=1e-9):
        raise ConfigError('continuity_bound needs both trajectories on the same time grid')
    if z1_traj.states[0].grid != z2_traj.states[0].grid:
        raise ConfigError('continuity_bound needs both trajectories on the same grid')
    lhs = np.array([(a - b).l2_sq() for a, b in zip(z1_traj.states, z2_traj.states)])
    s = params.sigma
    # |y| on the full path grid, read off at the recorded times
    grid_times, y = path.window(times[0], times[-1])
    at = [path.index(t) - path.index(times[0]) for t in times]
    exponent = 2 * s * cumulative_trapezoid(np.abs(y), grid_times, initial=0)[at]
    if params.nonlinear:
        g = np.zeros(len(times))
        for i, (t, z) in enumerate(zip(times, z1_traj.states)):
            fluct = z.physical(z.grid.quartic_points) - z.mean()[:, None, None]
            q = max(md * norms(z).e_l4_4 ** 0.25, float((fluct ** 2).sum(0).sqrt().max()))
            g[i] = q ** 2 / path.upsilon(t, s) ** 2 / (params.nu * params.epsilon0)
        exponent += cumulative_trapezoid(g, times, initial=0)
    return ContinuityBound(times, lhs, lhs[0] * np.exp(exponent), md)


def coercivity_margin(z: VelocityField, params: PhysicalParams, ups: float):
    """
    Both sides of nu|E|^2/2 + beta U^-2 |E|_4^4 / 2 - |alpha U^-1 <J(z), z>|
                 >= eps0 (nu|E|^2/2 + beta U^-2 |E|_4^4 / 2).
    """
    n = norms(z)
    base = params.nu * n.e_l2_sq / 2 + params.beta * n.e_l4_4 / (2 * ups ** 2)
    j = abs(params.alpha * pair(stress_J(z).unprojected, z) / ups) if params.alpha != 0 else 0.0
    return base - j, params.epsilon0 * base


def save_checkpoint(filename, state: SolverState, path, params: PhysicalParams, forcing: ForcingSchedule,
                    ledger_cursor: int, audit: Optional[AuditPolicy] = None):
    grid = state.z.grid
    filename = Path(filename)
    filename.parent.mkdir(parents=True, exist_ok=True)
    log = dict(
        t=state.t,
        coeffs=state.z.coeffs.clone(),
        snapshot=encode_snapshot(state.z.physical().numpy(), grid.box_length),
        grid=asdict(grid),
        path=path.spec(),
        step_offset=path.index(state.t),
        params=asdict(params),
        forcing=asdict(forcing),
        ledger_cursor=ledger_cursor,
        ledger_row=asdict(state.ledger_row) if state.ledger_row is not None else None,
        audit=asdict(audit) if audit is not None else None,
    )
    torch.save(log, filename)


def load_checkpoint(filename) -> dict:
    log = torch.load(Path(filename), weights_only=False)
    grid = Grid(**log['grid'])
    row = LedgerRow(**log['ledger_row']) if log['ledger_row'] is not None else None
    return dict(
        state=SolverState(log['t'], VelocityField(grid, log['coeffs']), row),
        path=path_from_spec(log['path']),
        params=PhysicalParams(**log['params']),
        forcing=ForcingSchedule(**log['forcing']),
        ledger_cursor=log['ledger_cursor'],
        audit=AuditPolicy(**log['audit']) if log['audit'] is not None else None,
    )


if __name__ == '__main__':
    from stochastics import generate_path

    grid = Grid(16)
    params = PhysicalParams(nu=0.05, alpha=0.01, beta=0.01, sigma=1.0)
    forcing = ForcingSchedule(kind='constant_field', shape='shear', amplitude=0.5)
    path = generate_path(0, 0.0, 2.0, 0.01)
    z0 = random_velocity(grid, np.random.default_rng(0), amplitude=0.5, max_mode=3)
    traj = integrate(z0, 0.0, 2.0, path, params, forcing, substeps=4, log=print)
    worst = max(r.audit_residual for r in traj.rows[1:])
    print(f'{len(traj.rows) - 1} steps, |z(T)|^2 = {traj.final.norms.l2_sq:.6f}, max identity defect {worst:.3e}')
    print(f'audit passed on every step: {all(r.audit_passed for r in traj.rows)}')
