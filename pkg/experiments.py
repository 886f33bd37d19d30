"""
Quantitative experiments on the transformed system: energy audit, absorbing radius and
pullback absorption, attractor diameter, tail estimates, exponential stability,
invariant-measure sampling, forcing hypotheses, pressure recovery and operator identities.

Every experiment returns a Report of check rows (check, value, bound, relation, passed)
plus named tables. Independent jobs go through map_fn (builtin map by default, a pool's
imap from the CLI) and are reduced sorted by job key.
"""
import math
import numpy as np
import pandas as pd
from dataclasses import dataclass, field, asdict
from itertools import combinations
from typing import Callable, Dict, List, Optional, Sequence, Tuple
from scipy.integrate import cumulative_trapezoid, trapezoid

from fields import (
    Grid,
    VelocityField,
    Cutoff,
    curl_residual,
    estimate_md_constant,
    leray_project,
    mode_field,
    norms,
    random_velocity,
    tail_mass,
)
from operators import (
    convection,
    j_difference_bound,
    k_monotonicity,
    oracle_weak_form,
    pair,
    stress_J,
    stress_K,
    trilinear,
)
from stochastics import NoisePath, ShiftedPath, generate_path, temperedness_report
from dynamics import (
    ForcingSchedule,
    LedgerRow,
    PhysicalParams,
    continuity_bound,
    doss_sussman_inverse,
    integrate,
    integrate_lockstep,
    recover_pressure,
)
from utils import ConfigError, IntegrationError, StepRefused, null_log, spawn_generators


RELATIONS = ('<=', '>=', '==')


def evaluate(value, bound, relation) -> bool:
    # NaN never passes
    if relation == '<=':
        return bool(value <= bound)
    if relation == '>=':
        return bool(value >= bound)
    if relation == '==':
        return bool(value == bound)
    raise ConfigError(f'unknown relation {relation!r}, expected one of {RELATIONS}')


@dataclass
class Report:
    name: str
    meta: dict = field(default_factory=dict)
    checks: List[dict] = field(default_factory=list)
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    # VelocityField, or (values, box_length) for scalar fields
    snapshots: Dict[str, object] = field(default_factory=dict)

    def check(self, name, value, bound, relation='<='):
        value, bound = float(value), float(bound)
        self.checks.append(dict(check=name, value=value, bound=bound, relation=relation, passed=evaluate(value, bound, relation)))

    def flag(self, name, ok: bool):
        self.check(name, 1.0 if ok else 0.0, 1.0, '==')

    @property
    def passed(self):
        return all(c['passed'] for c in self.checks)

    def checks_frame(self):
        return pd.DataFrame(self.checks, columns=['check', 'value', 'bound', 'relation', 'passed'])

    def summary(self):
        failed = [c['check'] for c in self.checks if not c['passed']]
        return f'{self.name}: {len(self.checks) - len(failed)}/{len(self.checks)} checks passed' + (f', failed: {failed}' if failed else '')


class EnergyLedger:
    """Per-step energy rows of one run; times strictly increase and no entry is NaN."""

    def __init__(self, rows: Sequence[LedgerRow], sigma: float):
        self.rows = list(rows)
        self.sigma = sigma
        t = np.array([r.t for r in self.rows])
        assert np.all(np.diff(t) > 0), 'ledger times must strictly increase'
        values = self.to_frame().drop(columns=['audit_passed']).to_numpy(dtype=np.float64)
        assert not np.isnan(values).any(), 'ledger has NaN entries'

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows], columns=list(LedgerRow.__dataclass_fields__))

    @property
    def audit_passed(self):
        return all(r.audit_passed for r in self.rows)

    def max_residual(self):
        return max((abs(r.audit_residual) for r in self.rows[1:]), default=0.0)

    def integrated_norms(self) -> pd.DataFrame:
        """
        S(t) = int exp(-int_s^t (sigma^2/2 - 2 sigma y)) q(s) ds for q = |z|^2 and U^-2 |z|^4,
        accumulated step by step. Finiteness diagnostics only.
        """
        s = self.sigma
        s1 = s2 = 0.0
        out = [dict(t=self.rows[0].t, weighted_l2_sq=0.0, weighted_l2_4=0.0)]
        for prev, row in zip(self.rows, self.rows[1:]):
            discount = math.exp(-(s ** 2 / 2 - 2 * s * row.y_mean) * row.dt)
            s1 = discount * (s1 + row.dt * prev.l2_sq)
            s2 = discount * (s2 + row.dt * prev.l2_sq ** 2 / prev.upsilon ** 2)
            out.append(dict(t=row.t, weighted_l2_sq=s1, weighted_l2_4=s2))
        return pd.DataFrame(out)


def ledger_audit(frame: pd.DataFrame):
    # recomputes the per-step pass flags: excess and |identity defect| both within the audit bound
    within = (frame['inequality_excess'] <= frame['audit_bound']) & (frame['audit_residual'].abs() <= frame['audit_bound'])
    recomputed = within | (frame['dt'] == 0)
    return recomputed.to_numpy(), frame['audit_passed'].astype(bool).to_numpy()


def make_ensemble(grid: Grid, n_members: int, radius: float, seed: int, max_mode: Optional[int] = 4) -> List[VelocityField]:
    """Members with |Y0|_2 drawn uniformly from [radius/2, radius]."""
    rngs = spawn_generators(seed, n_members)
    return [random_velocity(grid, rng, amplitude=radius * rng.uniform(0.5, 1.0), max_mode=max_mode) for rng in rngs]


# ----------------------------------------------------------------------------
# absorbing radius and pullback runs

@dataclass
class AbsorbingRadius:
    value: float
    tail_bound: float
    divergent: bool
    horizon: float

    def __float__(self):
        return self.value


def absorbing_radius(r, path: NoisePath, params: PhysicalParams, forcing: ForcingSchedule, grid: Grid,
                     horizon: Optional[float] = None) -> AbsorbingRadius:
    """
    K(r) = 4 exp(2 sigma y(0)) / min{2 nu eps0, sigma^2}
           * int_{-T}^0 exp(sigma^2 z/2 + 2 sigma int_z^0 y) U(z)^2 |P f(z + r)|_dual^2 dz
    by trapezoid quadrature on the path grid. The exponential factor turns the Z-space
    bound into one for |Y(r)|^2. tail_bound estimates the part beyond -T with the forcing's delta.
    """
    horizon = horizon if horizon is not None else -path.t_start
    if path.t_start > -horizon + 1e-9 or path.t_end < 0:
        raise ConfigError(f'absorbing radius needs a path covering [-{horizon}, 0], got [{path.t_start}, {path.t_end}]')
    s = params.sigma
    zeta, y = path.window(-horizon, 0.0)
    if forcing.is_zero:
        return AbsorbingRadius(0.0, 0.0, False, horizon)
    forcing.check_delta(s)
    # int_z^0 y for every grid z
    running = cumulative_trapezoid(y, dx=path.dt, initial=0)
    tail_int = running[-1] - running
    with np.errstate(over='ignore', invalid='ignore'):
        fd = forcing.dual_norm_sq(grid, zeta + r)
        integrand = np.exp(s ** 2 * zeta / 2 + 2 * s * tail_int - 2 * s * y) * fd
        total = trapezoid(integrand, dx=path.dt)
        value = 4 * math.exp(2 * s * y[-1]) / params.absorption_rate * total
        rate = s ** 2 / 2 - forcing.delta
        tail = 4 * math.exp(2 * s * y[-1]) / params.absorption_rate * integrand[0] / rate
    divergent = not (math.isfinite(value) and math.isfinite(tail)) or tail > 0.01 * value
    return AbsorbingRadius(float(value), float(tail), bool(divergent), horizon)


@dataclass
class Arrival:
    depth: float
    member: int
    y: Optional[VelocityField]
    failure: Optional[str] = None

    @property
    def norm_sq(self):
        return self.y.l2_sq() if self.y is not None else float('nan')


@dataclass
class PullbackRun:
    anchor_time: float
    pull_depths: List[float]
    ensemble: List[VelocityField]
    path: NoisePath
    radius: float
    results: Dict[Tuple[float, int], Arrival] = field(default_factory=dict)

    def __post_init__(self):
        self.pull_depths = sorted(self.pull_depths)
        for i, y0 in enumerate(self.ensemble):
            if y0.l2_sq() > self.radius ** 2 * (1 + 1e-12):
                raise ConfigError(f'ensemble member {i} has |Y0| = {math.sqrt(y0.l2_sq()):.4g} above the declared radius {self.radius}')
        # the shifted path needs y at -r and at -max depth
        self.shifted = ShiftedPath(self.path, -self.anchor_time)
        self.path.index(-self.pull_depths[-1])

    @property
    def grid(self):
        return self.ensemble[0].grid

    def arrivals(self, depth):
        return [self.results[(depth, i)] for i in range(len(self.ensemble))]


def _pullback_job(job):
    key, y0, path, anchor, params, forcing, max_substeps = job
    depth, _ = key
    t0 = anchor - depth
    try:
        traj = integrate(y0 * path.upsilon(t0, params.sigma), t0, anchor, path, params, forcing,
                         max_substeps=max_substeps, record_every=0)
    except (IntegrationError, StepRefused) as e:
        return key, None, f'{type(e).__name__}: {e}'
    return key, doss_sussman_inverse(traj.final.z, path, anchor, params.sigma), None


def run_pullback(run: PullbackRun, params: PhysicalParams, forcing: ForcingSchedule, max_substeps: int = 50,
                 map_fn: Callable = map, log: Callable = null_log) -> PullbackRun:
    """Integrates every (depth, member) from r - depth to r on the shifted path."""
    jobs = [((d, i), y0, run.shifted, run.anchor_time, params, forcing, max_substeps)
            for d in run.pull_depths for i, y0 in enumerate(run.ensemble)]
    for key, y, failure in sorted(map_fn(_pullback_job, jobs), key=lambda out: out[0]):
        run.results[key] = Arrival(key[0], key[1], y, failure)
        if failure:
            log(f'pullback depth {key[0]} member {key[1]} failed: {failure}')
    return run


def _envelope(path: NoisePath, sigma, depth):
    # |Y(r)|^2 / |Y0|^2 bound for zero forcing: exp(2 sigma (y(0) - y(-t)) - sigma^2 t/2 + 2 sigma int_{-t}^0 y)
    _, y = path.window(-depth, 0.0)
    return math.exp(2 * sigma * (y[-1] - y[0]) - sigma ** 2 * depth / 2 + 2 * sigma * trapezoid(y, dx=path.dt))


def pullback_absorption_test(run: PullbackRun, params: PhysicalParams, forcing: ForcingSchedule,
                             horizon: Optional[float] = None, max_substeps: int = 50,
                             map_fn: Callable = map, log: Callable = null_log) -> Report:
    """
    Entry time: first listed depth from which the initial-data envelope exp(...) R^2 stays
    below K/2 (the forced part is at most K/2). Past it every arrival must satisfy
    |Y(r)|^2 <= K. With zero forcing each arrival is checked against the envelope instead.
    """
    if not run.results:
        run_pullback(run, params, forcing, max_substeps, map_fn, log)
    s = params.sigma
    radius = absorbing_radius(run.anchor_time, run.path, params, forcing, run.grid, horizon or max(run.pull_depths[-1], -run.path.t_start))
    report = Report('pullback_absorption', meta=dict(anchor_time=run.anchor_time, pull_depths=run.pull_depths,
                                                     members=len(run.ensemble), ensemble_radius=run.radius,
                                                     absorbing_radius=radius.value, tail_bound=radius.tail_bound))
    rows = []
    envelopes = {d: _envelope(run.path, s, d) for d in run.pull_depths}
    failures = sum(a.failure is not None for a in run.results.values())
    if forcing.is_zero:
        entry = 0.0
    else:
        entry = math.inf
        for d in reversed(run.pull_depths):
            if envelopes[d] * run.radius ** 2 > radius.value / 2:
                break
            entry = d
    violations = 0
    for d in run.pull_depths:
        for a in run.arrivals(d):
            y0_sq = run.ensemble[a.member].l2_sq()
            if forcing.is_zero:
                bound = envelopes[d] * y0_sq
                inside = a.norm_sq <= bound * (1 + 1e-9) + 1e-300
            else:
                bound = radius.value
                inside = a.norm_sq <= bound
            if d >= entry and not inside:
                violations += 1
            rows.append(dict(depth=d, member=a.member, initial_sq=y0_sq, arrival_sq=a.norm_sq, bound=bound,
                             envelope=envelopes[d], inside=bool(inside), failure=a.failure or ''))
    report.tables['arrivals'] = pd.DataFrame(rows)
    report.meta['entry_time'] = entry
    log(f'absorbing radius {radius.value:.6g}, entry time {entry}, violations {violations}, failures {failures}')
    report.flag('radius_quadrature_converged', not radius.divergent)
    report.check('entry_time', entry, run.pull_depths[-1], '<=')
    report.check('violations_past_entry', violations, 0, '<=')
    report.check('failed_members', failures, 0, '<=')
    return report


def attractor_diameter(run: PullbackRun, params: PhysicalParams, forcing: ForcingSchedule,
                       max_substeps: int = 50, map_fn: Callable = map, log: Callable = null_log) -> List[Tuple[float, float]]:
    """Max pairwise |Y_i(r) - Y_j(r)|_2 among the arrivals at each pull depth."""
    if len(run.ensemble) < 2:
        raise ConfigError('attractor_diameter needs at least 2 ensemble members')
    if not run.results:
        run_pullback(run, params, forcing, max_substeps, map_fn, log)
    out = []
    for d in run.pull_depths:
        ys = [a.y for a in run.arrivals(d)]
        if any(y is None for y in ys):
            out.append((d, float('nan')))
            continue
        out.append((d, max(math.sqrt((a - b).l2_sq()) for a, b in combinations(ys, 2))))
    return out


def diameter_report(run: PullbackRun, params: PhysicalParams, forcing: ForcingSchedule, min_decay: float = 1e-6,
                    horizon: Optional[float] = None, map_fn: Callable = map, log: Callable = null_log) -> Report:
    """
    Zero forcing: diameters past the stability entry stay under exp(-sigma^2 depth / 8) times
    the initial diameter, never increase, and the deepest one is below min_decay of it.
    Otherwise diameters are bounded by 2 sqrt(K).
    """
    diam = attractor_diameter(run, params, forcing, map_fn=map_fn, log=log)
    initial = max(math.sqrt((a - b).l2_sq()) for a, b in combinations(run.ensemble, 2))
    s = params.sigma
    frame = pd.DataFrame(diam, columns=['depth', 'diameter'])
    frame['ratio'] = frame['diameter'] / initial if initial > 0 else 0.0
    report = Report('attractor_diameter', meta=dict(initial_diameter=initial))
    if forcing.is_zero:
        frame['envelope'] = np.exp(-s ** 2 * frame['depth'] / 8) * initial
        under = (frame['diameter'] <= frame['envelope']).to_numpy()
        entry_idx = len(under)
        for i in range(len(under) - 1, -1, -1):
            if not under[i]:
                break
            entry_idx = i
        past = frame['diameter'].to_numpy()[entry_idx:]
        report.meta['entry_depth'] = float(frame['depth'][entry_idx]) if entry_idx < len(frame) else math.inf
        report.check('envelope_entry_index', entry_idx, len(frame) - 1, '<=')
        report.flag('nonincreasing_past_entry', bool(np.all(np.diff(past) <= 0)))
        report.check('final_diameter_ratio', frame['ratio'].iloc[-1], min_decay, '<=')
    else:
        radius = absorbing_radius(run.anchor_time, run.path, params, forcing, run.grid, horizon or max(run.pull_depths[-1], -run.path.t_start))
        frame['bound'] = 2 * math.sqrt(radius.value)
        report.check('max_diameter_over_bound', float((frame['diameter'] / frame['bound']).max()), 1.0, '<=')
    report.tables['diameters'] = frame
    return report


def tail_estimate_test(run: PullbackRun, params: PhysicalParams, forcing: ForcingSchedule, radii: Sequence[float],
                       epsilon: float = 0.05, map_fn: Callable = map, log: Callable = null_log) -> Report:
    """tail_mass over arrival states: nonincreasing in the cutoff radius, below epsilon |Y|^2 at the largest."""
    radii = sorted(radii)
    if not run.results:
        run_pullback(run, params, forcing, map_fn=map_fn, log=log)
    cuts = [Cutoff(k) for k in radii]
    rows = []
    monotone, worst = True, 0.0
    for (d, i), a in sorted(run.results.items()):
        if a.y is None:
            continue
        masses = [tail_mass(a.y, c) for c in cuts]
        energy = a.y.l2_sq()
        monotone &= all(m1 <= m0 * (1 + 1e-12) + 1e-300 for m0, m1 in zip(masses, masses[1:]))
        fraction = masses[-1] / energy if energy > 0 else 0.0
        worst = max(worst, fraction)
        rows.extend(dict(depth=d, member=i, radius=k, tail_mass=m, energy=energy) for k, m in zip(radii, masses))
    report = Report('tail_estimates', meta=dict(radii=radii, epsilon=epsilon))
    report.tables['tails'] = pd.DataFrame(rows)
    report.flag('monotone_in_radius', monotone)
    report.check('max_tail_fraction_at_largest_radius', worst, epsilon, '<=')
    return report


# ----------------------------------------------------------------------------
# exponential stability

@dataclass
class StabilityResult:
    fitted_rate: float
    entry_time: float
    converged: bool
    times: np.ndarray
    diff_sq: np.ndarray
    oracle_rate: float = float('nan')

    def frame(self):
        return pd.DataFrame({'t': self.times, 'diff_sq': self.diff_sq})


def _tail_slope(times, values):
    half = times >= times[0] + 0.5 * (times[-1] - times[0])
    t, v = times[half], values[half]
    ok = (v > 0) & np.isfinite(v)
    if ok.sum() < 2:
        return None
    return float(np.polyfit(t[ok], np.log(v[ok]), 1)[0])


def exponential_stability_test(params: PhysicalParams, path, y0_pair, horizon: float, t0: float = 0.0,
                               substeps: Optional[int] = None, max_substeps: int = 50, log: Callable = null_log) -> StabilityResult:
    """
    Runs both initial data on the same path with zero forcing (fixed substeps, or a shared
    adaptive step when substeps is None) and fits the slope of
    log |Y1 - Y2|^2 over the last half of the horizon; fitted_rate is minus that slope.
    entry_time is the first time after which |Y1 - Y2|^2 <= exp(-sigma^2 (t - t0)/4) |Y1 - Y2|^2(t0).
    In linear runs the pathwise exact decay is fitted the same way as oracle_rate.
    """
    ya, yb = y0_pair
    forcing = ForcingSchedule()
    s = params.sigma
    ups0 = path.upsilon(t0, s)
    za, zb = ya * ups0, yb * ups0
    t1 = t0 + horizon
    if substeps:
        every = max(1, int(round(horizon / (substeps * path.dt))) // 500)
        ta = integrate(za, t0, t1, path, params, forcing, substeps=substeps, record_every=every)
        tb = integrate(zb, t0, t1, path, params, forcing, substeps=substeps, record_every=every, audit=ta.audit)
    else:
        every = max(1, int(round(horizon / (2 * path.dt))) // 500)
        ta, tb = integrate_lockstep([za, zb], t0, t1, path, params, forcing, max_substeps, record_every=every)
    times = np.asarray(ta.times)
    diff = np.array([((a - b) / path.upsilon(t, s)).l2_sq() for t, a, b in zip(times, ta.states, tb.states)])
    d0 = diff[0]
    if d0 == 0:
        return StabilityResult(math.inf, t0, True, times, diff)
    slope = _tail_slope(times, diff)
    converged = slope is None
    envelope = np.exp(-s ** 2 * (times - t0) / 4) * d0
    outside = np.nonzero(diff > envelope)[0]
    entry = t0 if len(outside) == 0 else (float(times[outside[-1] + 1]) if outside[-1] + 1 < len(times) else math.inf)
    result = StabilityResult(math.inf if converged else -slope, entry, converged, times, diff)
    if not params.nonlinear:
        _, y = path.window(t0, t1)
        at = [path.index(t) - path.index(t0) for t in times]
        y_at = y[at]
        integral = cumulative_trapezoid(y, dx=path.dt, initial=0)[at]
        # each Fourier mode of the difference decays at its own exact rate
        d_hat = (ya - yb).coeffs
        grid = ya.grid
        weights = (d_hat.abs() ** 2).sum(0).numpy() / grid.box_length ** 2
        k_sq = grid.kappa_sq.numpy()
        exact = np.array([(weights * np.exp(-2 * (params.nu * k_sq + s ** 2 / 2) * (t - t0))).sum() for t in times])
        exact = exact * np.exp(2 * s * integral + 2 * s * (y_at - y_at[0]))
        oracle_slope = _tail_slope(times, exact)
        result.oracle_rate = math.inf if oracle_slope is None else -oracle_slope
    log(f'stability fit: rate {result.fitted_rate:.4f}, entry {entry}, converged {converged}', logonly=True)
    return result


def _stability_job(job):
    key, seed, params, grid, noise_dt, horizon, radius, max_mode, max_substeps = job
    path = generate_path(seed, 0.0, horizon, noise_dt)
    ya, yb = make_ensemble(grid, 2, radius, seed + 1, max_mode=max_mode)
    try:
        res = exponential_stability_test(params, path, (ya, yb), horizon, max_substeps=max_substeps)
    except (IntegrationError, StepRefused) as e:
        return key, dict(seed=seed, fitted_rate=float('nan'), entry_time=float('nan'), converged=False, failure=str(e))
    return key, dict(seed=seed, fitted_rate=res.fitted_rate, entry_time=res.entry_time, converged=res.converged, failure='')


def stability_ensemble(params: PhysicalParams, grid: Grid, seeds: Sequence[int], horizon: float, noise_dt: float = 0.01,
                       radius: float = 1.0, max_mode: int = 4, pass_fraction: float = 0.95, safety: float = 0.9,
                       max_substeps: int = 50, map_fn: Callable = map, log: Callable = null_log) -> Report:
    """Fraction of seeds whose fitted rate reaches safety * sigma^2 / 4."""
    jobs = [(i, seed, params, grid, noise_dt, horizon, radius, max_mode, max_substeps) for i, seed in enumerate(seeds)]
    rows = [row for _, row in sorted(map_fn(_stability_job, jobs), key=lambda out: out[0])]
    frame = pd.DataFrame(rows)
    target = safety * params.sigma ** 2 / 4
    frame['passed'] = frame['fitted_rate'] >= target
    fraction = float(frame['passed'].mean())
    log(f'stability: {fraction:.0%} of {len(seeds)} seeds reach rate {target:.4f}')
    report = Report('exponential_stability', meta=dict(horizon=horizon, seeds=list(seeds), target_rate=target))
    report.tables['seeds'] = frame
    report.check('fraction_of_seeds_at_rate', fraction, pass_fraction, '>=')
    return report


def linear_stability_oracle(params: PhysicalParams, grid: Grid, seed: int, horizon: float, noise_dt: float = 0.01,
                            mode=(1, 0), rtol: float = 0.01, tol: float = 0.05) -> Report:
    """Linear run (alpha = beta = 0, no convection) with a single-mode difference."""
    if params.nonlinear:
        params = PhysicalParams(params.nu, 0.0, 0.0, params.sigma, nonlinear=False)
    path = generate_path(seed, 0.0, horizon, noise_dt)
    ya = mode_field(grid, mode, amplitude=1.0)
    res = exponential_stability_test(params, path, (ya, VelocityField.zeros(grid)), horizon, substeps=2)
    k_sq = (2 * math.pi / grid.box_length) ** 2 * (mode[0] ** 2 + mode[1] ** 2)
    report = Report('linear_stability_oracle', meta=dict(mode=list(mode), seed=seed, oracle_rate=res.oracle_rate))
    report.tables['difference'] = res.frame()
    report.check('relative_rate_error', abs(res.fitted_rate - res.oracle_rate) / res.oracle_rate, rtol, '<=')
    report.check('fitted_rate', res.fitted_rate, params.sigma ** 2 / 4 + 2 * params.nu * k_sq - tol, '>=')
    return report


# ----------------------------------------------------------------------------
# invariant measure

@dataclass
class PathSamples:
    """Y(t; y0) at the sample times on every path, keyed by path index."""
    times: List[float]
    seeds: List[int]
    states: Dict[int, List[VelocityField]] = field(default_factory=dict)
    refinement: Dict[int, int] = field(default_factory=dict)
    failures: Dict[int, str] = field(default_factory=dict)

    def at(self, t) -> List[VelocityField]:
        hits = [j for j, s in enumerate(self.times) if abs(s - t) < 1e-9]
        if not hits:
            raise ConfigError(f't={t} is not among the sample times {self.times}')
        return [self.states[key][hits[0]] for key in sorted(self.states)]


def _sample_job(job):
    key, seed, y0, params, forcing, times, noise_dt, max_substeps, mode, y_start = job
    path = generate_path(seed, 0.0, times[-1], noise_dt, mode, y_start)
    s = params.sigma
    try:
        traj = integrate(y0 * path.upsilon(0.0, s), 0.0, times[-1], path, params, forcing,
                         max_substeps=max_substeps, record_every=0, record_times=times)
    except (IntegrationError, StepRefused) as e:
        return key, None, 0, f'{type(e).__name__}: {e}'
    return key, [doss_sussman_inverse(z, path, t, s) for t, z in zip(traj.times, traj.states)], traj.refinement, None


def sample_paths(params: PhysicalParams, forcing: ForcingSchedule, y0: VelocityField, times: Sequence[float],
                 seeds: Sequence[int], noise_dt: float = 0.01, max_substeps: int = 50, noise_mode: str = 'stationary',
                 y_start: float = 0.0, map_fn: Callable = map, log: Callable = null_log) -> PathSamples:
    """Integrates y0 on one path per seed and keeps Y at every sample time."""
    times = sorted(times)
    jobs = [(i, sd, y0, params, forcing, times, noise_dt, max_substeps, noise_mode, y_start) for i, sd in enumerate(seeds)]
    samples = PathSamples(times, list(seeds))
    for key, ys, level, failure in sorted(map_fn(_sample_job, jobs), key=lambda o: o[0]):
        if failure:
            samples.failures[key] = failure
            log(f'path {key} failed: {failure}')
            continue
        samples.states[key] = ys
        samples.refinement[key] = level
    return samples


def transition_operator(g: Callable, y0: VelocityField, t: float, params: PhysicalParams, forcing: ForcingSchedule,
                        seeds: Sequence[int] = (), noise_dt: float = 0.01, max_substeps: int = 50,
                        samples: Optional[PathSamples] = None, map_fn: Callable = map) -> Tuple[float, float]:
    """
    Monte Carlo (mean, standard error) of (P_t g)(y0) = E g(Y(t; y0)) over independent
    paths, from samples when given. Any failed path raises IntegrationError.
    """
    if t <= 0:
        raise ConfigError(f'transition_operator needs t > 0, got {t}')
    if samples is None:
        if len(seeds) < 2:
            raise ConfigError(f'transition_operator needs at least 2 seeds, got {len(seeds)}')
        samples = sample_paths(params, forcing, y0, [t], seeds, noise_dt, max_substeps, map_fn=map_fn)
    if samples.failures:
        key, failure = sorted(samples.failures.items())[0]
        raise IntegrationError(f'{len(samples.failures)} of {len(samples.seeds)} paths failed, first {key}: {failure}')
    values = np.array([g(y) for y in samples.at(t)], dtype=np.float64)
    if not np.isfinite(values).all():
        raise ConfigError(f'observable returned non-finite values at t={t}')
    se = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else float('nan')
    return float(values.mean()), se


def _norm(y: VelocityField):
    return math.sqrt(y.l2_sq())


def _late_times(horizon, noise_dt, count=4):
    # evenly spaced over the last quarter, on even path indices
    steps = int(round(horizon / noise_dt))
    idx = np.linspace(0.75 * steps, steps, count + 1)[:-1]
    return [2 * int(i // 2) * noise_dt for i in idx]


def invariant_measure_sampler(params: PhysicalParams, forcing: ForcingSchedule, y0: VelocityField, n_paths: int,
                              horizons: Sequence[float] = (50.0, 100.0, 200.0), seed: int = 0, noise_dt: float = 0.01,
                              ball: float = 1e-3, max_substeps: int = 50, noise_mode: str = 'stationary',
                              y_start: float = 0.0, map_fn: Callable = map, log: Callable = null_log) -> Report:
    """
    Integrates y0 on n_paths independent paths and samples Y at every horizon and at late
    times of the longest one; every path is kept, refined where its excursions need it.
    The horizon statistics are transition-operator estimates. Zero forcing: the
    concentration E|Y(h)| / |Y0| must be at most ball at the longest horizon and decrease
    over the horizons. Otherwise two disjoint path batches must agree within 3 combined
    standard errors.
    """
    if n_paths < 10:
        raise ConfigError(f'invariant_measure_sampler needs n_paths >= 10, got {n_paths}')
    horizons = sorted(horizons)
    times = sorted(set(horizons) | {t for t in _late_times(horizons[-1], noise_dt) if t > 0})
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_paths)]
    samples = sample_paths(params, forcing, y0, times, seeds, noise_dt, max_substeps, noise_mode, y_start, map_fn, log)
    # a failed path ends the run like any integration failure, it is never dropped
    if samples.failures:
        key, failure = sorted(samples.failures.items())[0]
        raise IntegrationError(f'{len(samples.failures)} of {n_paths} sampler paths failed, first {key}: {failure}')
    rows = []
    for key, ys in sorted(samples.states.items()):
        for t, y in zip(samples.times, ys):
            n = norms(y)
            mean = y.mean()
            rows.append(dict(path=key, seed=seeds[key], t=t, norm=math.sqrt(n.l2_sq), energy=n.l2_sq, e_l2_sq=n.e_l2_sq,
                             mean_u1=float(mean[0]), mean_u2=float(mean[1]), refinement=samples.refinement[key]))
    frame = pd.DataFrame(rows, columns=['path', 'seed', 't', 'norm', 'energy', 'e_l2_sq', 'mean_u1', 'mean_u2', 'refinement'])
    y0_norm = math.sqrt(y0.l2_sq())
    report = Report('invariant_measure', meta=dict(n_paths=n_paths, horizons=horizons, seed=seed, y0_norm=y0_norm,
                                                   max_refinement=max(samples.refinement.values(), default=0)))
    report.tables['samples'] = frame

    def estimate(g, h):
        return transition_operator(g, y0, h, params, forcing, samples=samples)

    summary = []
    for h in horizons:
        mean_norm, se_norm = estimate(_norm, h)
        summary.append(dict(horizon=h, mean_norm=mean_norm, se_norm=se_norm,
                            concentration=mean_norm / y0_norm if y0_norm > 0 else 0.0,
                            mass_outside_ball=estimate(lambda y: float(_norm(y) > ball), h)[0],
                            mean_u1=estimate(lambda y: float(y.mean()[0]), h)[0],
                            mean_u2=estimate(lambda y: float(y.mean()[1]), h)[0],
                            mean_e_l2_sq=estimate(lambda y: norms(y).e_l2_sq, h)[0]))
    summary = pd.DataFrame(summary)
    report.tables['summary'] = summary
    report.check('paths_integrated', len(samples.states), n_paths, '==')
    if forcing.is_zero:
        conc = summary['concentration'].to_numpy()
        decreasing = np.all(np.diff(conc) < 0) or np.all(conc == 0)
        report.check('concentration_at_longest_horizon', conc[-1], ball, '<=')
        report.flag('concentration_decreasing', bool(decreasing))
        report.flag('outside_mass_nonincreasing', bool(np.all(np.diff(summary['mass_outside_ball']) <= 0)))
    else:
        late = frame[frame['t'] >= 0.75 * horizons[-1] - 1e-9]
        per_path = late.groupby('path')['norm'].mean()
        half = len(per_path) // 2
        a, b = per_path.iloc[:half], per_path.iloc[half:]
        gap = abs(a.mean() - b.mean())
        se = math.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
        report.meta['batch_means'] = [float(a.mean()), float(b.mean())]
        report.check('batch_gap_over_se', gap / se if se > 0 else 0.0, 3.0, '<=')
    return report


# ----------------------------------------------------------------------------
# forcing hypothesis

def forcing_hypothesis_check(schedule: ForcingSchedule, sigma: float, grid: Grid, window: Optional[float] = None,
                             cs: Sequence[float] = (0.1, 1.0, 10.0), s_min: float = -200.0, n_s: int = 41,
                             quad_dt: float = 0.01, norm: str = 'dual', growth_tol: float = 0.05,
                             expect: Optional[bool] = None) -> Report:
    """
    e^{cs} int_{-W}^0 e^{delta z} |f(z + s)|^2 dz on an s grid from 0 down to s_min.
    For each c the sequence must be finite and nonincreasing over its most negative half.
    The window test compares W with 2W at s = 0; relative growth above growth_tol or a
    non-finite value flags divergence. norm = 'dual' (H^-1) or 'l2'.
    """
    schedule.check_delta(sigma)
    if norm not in ('dual', 'l2'):
        raise ConfigError(f"norm must be 'dual' or 'l2', got {norm!r}")
    delta = schedule.delta
    window = window if window is not None else (10.0 / delta if delta > 0 else 50.0)
    if delta > 0 and window < 10.0 / delta - 1e-9:
        raise ConfigError(f'window {window} shorter than 10/delta = {10.0 / delta}')
    norm_sq = schedule.dual_norm_sq if norm == 'dual' else schedule.l2_norm_sq

    def integral(s, w):
        zeta = np.linspace(-w, 0.0, int(round(w / quad_dt)) + 1)
        with np.errstate(over='ignore', invalid='ignore'):
            return trapezoid(np.exp(delta * zeta) * norm_sq(grid, zeta + s), dx=quad_dt)

    s_grid = np.linspace(0.0, s_min, n_s)
    base = np.array([integral(s, window) for s in s_grid])
    report = Report('forcing_hypothesis', meta=dict(schedule=asdict(schedule), sigma=sigma, window=window, norm=norm))
    table = pd.DataFrame({'s': s_grid, 'integral': base})
    trends_ok = True
    for c in cs:
        with np.errstate(over='ignore', invalid='ignore'):
            values = np.exp(c * s_grid) * base
        table[f'c={c:g}'] = values
        tail = values[len(values) // 2:]
        ok = bool(np.all(np.isfinite(values)) and np.all(np.diff(tail) <= 1e-12 * np.abs(tail[:-1]).max(initial=0.0)))
        trends_ok &= ok
    i_w, i_2w = integral(0.0, window), integral(0.0, 2 * window)
    if not (math.isfinite(i_w) and math.isfinite(i_2w)):
        growth = math.inf
    else:
        growth = (i_2w - i_w) / i_w if i_w > 0 else 0.0
    diverges = not (growth <= growth_tol)
    report.tables['trend'] = table
    report.meta.update(window_growth=growth if math.isfinite(growth) else 'inf', diverges=diverges)
    holds = bool(trends_ok and not diverges)
    report.meta['holds'] = holds
    if expect is not None:
        report.flag('outcome_matches_expectation', holds == expect)
    return report


# ----------------------------------------------------------------------------
# energy audit, pressure, continuity, identities, noise statistics

def energy_audit(grid: Grid, params: PhysicalParams, forcing: ForcingSchedule, path: NoisePath, y0: VelocityField,
                 horizon: float, substeps: int, ratio_range=(1.5, 3.0), beta_factor: Optional[float] = None,
                 log: Callable = null_log) -> Tuple[Report, Dict[str, EnergyLedger]]:
    """
    Runs at dt = substeps * path.dt and at dt/2, checks every audit row and the halving
    ratio of the max identity defect. beta_factor adds a run with beta scaled up, which
    must pass its audit as well.
    """
    if substeps % 4:
        raise ConfigError(f'energy audit needs substeps divisible by 4 to halve the step, got {substeps}')
    s = params.sigma
    z0 = y0 * path.upsilon(0.0, s)
    ledgers = {}
    runs = [('dt', params, substeps), ('dt_half', params, substeps // 2)]
    if beta_factor:
        runs.append(('beta_scaled', PhysicalParams(params.nu, params.alpha, params.beta * beta_factor, s), substeps))
    for name, p, m in runs:
        traj = integrate(z0, 0.0, horizon, path, p, forcing, substeps=m, record_every=0, log=log)
        ledgers[name] = EnergyLedger(traj.rows, s)
        log(f'{name}: {len(traj.rows) - 1} steps, max defect {ledgers[name].max_residual():.3e}, audit passed {ledgers[name].audit_passed}')
    report = Report('energy_audit', meta=dict(horizon=horizon, substeps=substeps, path_dt=path.dt))
    for name, ledger in ledgers.items():
        frame = ledger.to_frame()
        report.check(f'{name}_audit_failures', int((~frame['audit_passed']).sum()), 0, '<=')
        report.tables[f'ledger_{name}'] = frame
        integ = ledger.integrated_norms()
        report.flag(f'{name}_integrated_norms_finite', bool(np.isfinite(integ[['weighted_l2_sq', 'weighted_l2_4']].to_numpy()).all()))
        report.tables[f'integrated_{name}'] = integ
    ratio = ledgers['dt'].max_residual() / ledgers['dt_half'].max_residual()
    report.check('defect_halving_ratio_low', ratio, ratio_range[0], '>=')
    report.check('defect_halving_ratio_high', ratio, ratio_range[1], '<=')
    return report, ledgers


def pressure_recovery_check(grid: Grid, params: PhysicalParams, forcing: ForcingSchedule, path, n_states: int,
                            seed: int = 0, projection_tol: float = 1e-12, curl_tol: float = 1e-11,
                            save_snapshots: bool = False) -> Report:
    """save_snapshots keeps the scalar pressures P1 and P2 of the first state as snapshots."""
    rngs = spawn_generators(seed, n_states)
    times = path.t_start + path.dt * np.arange(path.index(path.t_end) + 1)
    rows, snapshots = [], {}
    for i, rng in enumerate(rngs):
        z = random_velocity(grid, rng, amplitude=rng.uniform(0.1, 2.0), max_mode=grid.n_modes // 4)
        t = float(times[rng.integers(len(times))])
        p = recover_pressure(z, t, path, params, forcing)
        total = p.p1_gradient + p.p2_gradient
        scale = float(total.abs().max())
        residual = float(leray_project(total, grid).coeffs.abs().max()) / scale if scale > 0 else 0.0
        rows.append(dict(state=i, t=t, projection_residual=residual,
                         curl_p1=curl_residual(p.p1_gradient, grid), curl_p2=curl_residual(p.p2_gradient, grid)))
        if save_snapshots and i == 0:
            p1, p2 = p.pressures()
            snapshots = {'state0_p1': (p1.numpy(), grid.box_length), 'state0_p2': (p2.numpy(), grid.box_length)}
    frame = pd.DataFrame(rows)
    report = Report('pressure_recovery', meta=dict(n_states=n_states, seed=seed), snapshots=snapshots)
    report.tables['states'] = frame
    report.check('max_projection_residual', frame['projection_residual'].max(), projection_tol)
    report.check('max_curl_residual', frame[['curl_p1', 'curl_p2']].to_numpy().max(), curl_tol)
    return report


def continuity_check(grid: Grid, params: PhysicalParams, forcing: ForcingSchedule, path, y0: VelocityField,
                     perturbation: float, horizon: float, max_substeps: int = 50, seed: int = 0,
                     md_samples: int = 200) -> Report:
    """Both runs share one adaptive time grid, refined where the path excursions demand it."""
    rng = np.random.default_rng(seed)
    y1 = y0 + random_velocity(grid, rng, amplitude=perturbation, max_mode=4)
    ups = path.upsilon(0.0, params.sigma)
    ta, tb = integrate_lockstep([y0 * ups, y1 * ups], 0.0, horizon, path, params, forcing, max_substeps)
    md = estimate_md_constant(grid, md_samples, seed)
    cb = continuity_bound(ta, tb, path, params, md=md)
    report = Report('continuity', meta=dict(md_estimate=md, perturbation=perturbation, refinement=ta.refinement))
    report.check('audit_failures', sum(not r.audit_passed for r in ta.rows + tb.rows), 0, '<=')
    report.tables['bound'] = pd.DataFrame({'t': cb.times, 'lhs': cb.lhs_series, 'rhs': cb.rhs_series})
    with np.errstate(divide='ignore', invalid='ignore'):
        worst = float(np.nanmax(np.where(cb.rhs_series > 0, cb.lhs_series / cb.rhs_series, 0.0)))
    report.check('max_lhs_over_rhs', worst, 1.0 + 1e-9)
    return report


def operator_identity_suite(grids: Sequence[Grid], n_fields: int, seed: int = 0, b_tol: float = 1e-11,
                            k_tol: float = 1e-10, mono_tol: float = 1e-9, oracle_tol: float = 1e-9,
                            map_fn: Callable = map) -> Report:
    jobs = [(g.n_modes, g, n_fields, seed) for g in grids]
    rows = []
    for _, out in sorted(map_fn(_identity_job, jobs), key=lambda o: o[0]):
        rows.extend(out)
    frame = pd.DataFrame(rows)
    report = Report('operator_identities', meta=dict(grids=[g.n_modes for g in grids], n_fields=n_fields, seed=seed))
    report.tables['fields'] = frame
    report.check('max_b_skew_antisymmetry', frame[['b_uvv', 'b_skew']].to_numpy().max(), b_tol)
    report.check('max_k_energy_identity', frame['k_identity'].max(), k_tol)
    report.check('max_k_monotonicity_mismatch', frame['k_mono_mismatch'].max(), mono_tol)
    report.check('min_k_monotonicity_lhs', frame['k_mono_lhs'].min(), 0.0, '>=')
    report.check('max_j_bound_ratio', frame['j_ratio'].max(), 1.0 + 1e-12)
    report.check('max_weak_form_oracle_mismatch', frame['oracle_mismatch'].max(), oracle_tol)
    return report


def _identity_job(job):
    key, grid, n_fields, seed = job
    rngs = spawn_generators(seed + grid.n_modes, n_fields)
    rows = []
    for i, rng in enumerate(rngs):
        u, v, w = (random_velocity(grid, rng, amplitude=rng.uniform(0.2, 2.0)) for _ in range(3))
        nu_, nv, nw = norms(u), norms(v), norms(w)
        # Hoelder bound |b(u, v, w)| <= |u|_4 |grad v|_2 |w|_4
        b_scale = nu_.u_l4_4 ** 0.25 * math.sqrt(nv.e_l2_sq / 2) * max(nv.u_l4_4, nw.u_l4_4) ** 0.25
        b_uvv = abs(trilinear(u, v, v)) / b_scale
        b_skew = abs(trilinear(u, v, w) + trilinear(u, w, v)) / b_scale
        k_identity = abs(pair(stress_K(u).unprojected, u) - 0.5 * nu_.e_l4_4) / (0.5 * nu_.e_l4_4)
        lhs, rhs = k_monotonicity(u, v)
        j_lhs, j_rhs = j_difference_bound(u, v)
        oracle = max(
            abs(pair(stress_K(u).unprojected, v) - oracle_weak_form('K', u, v)) / (0.5 * nu_.e_l4_4 ** 0.75 * nv.e_l4_4 ** 0.25),
            abs(pair(stress_J(u).unprojected, v) - oracle_weak_form('J', u, v)) / (0.5 * math.sqrt(nu_.e_l4_4) * math.sqrt(nv.e_l2_sq)),
            abs(pair(convection(u, v).unprojected, w) - oracle_weak_form('B', u, w, v)) / b_scale,
        )
        rows.append(dict(n=grid.n_modes, field=i, b_uvv=b_uvv, b_skew=b_skew, k_identity=k_identity,
                         k_mono_lhs=lhs, k_mono_mismatch=abs(lhs - rhs) / max(abs(rhs), 1e-300),
                         j_ratio=j_lhs / j_rhs if j_rhs > 0 else 0.0, oracle_mismatch=oracle))
    return key, rows


def ou_statistics(n_samples: int, seed: int = 0, dt: float = 0.01, lag: float = 1.0, n_se: float = 3.0) -> Report:
    """
    Independent paths on [-lag, lag]: y(0) mean and variance, the lag covariance of
    (y(0), y(lag)) and of (y(-lag), y(0)) against 1/2 exp(-lag), and Var W(lag) against lag.
    """
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_samples)]
    samples = np.empty((n_samples, 4))
    for i, sd in enumerate(seeds):
        path = generate_path(sd, -lag, lag, dt)
        samples[i] = path.ou_at(-lag), path.ou_at(0.0), path.ou_at(lag), path.wiener_at(lag)
    y_past, y0, y_future, w = samples.T
    n = n_samples
    cov = 0.5 * math.exp(-lag)
    report = Report('ou_statistics', meta=dict(n_samples=n, seed=seed, dt=dt, lag=lag))
    report.tables['samples'] = pd.DataFrame(samples, columns=['y_past', 'y0', 'y_future', 'w_lag'])

    def within(name, values, target):
        se = values.std(ddof=1) / math.sqrt(n)
        report.check(f'{name}_deviation_in_se', abs(values.mean() - target) / se, n_se)

    within('mean', y0, 0.0)
    within('variance', y0 ** 2, 0.5)
    within('forward_lag_covariance', y0 * y_future, cov)
    within('backward_lag_covariance', y_past * y0, cov)
    within('wiener_variance', w ** 2, lag)
    return report


def temperedness_check(seed: int, n_seeds: int, sigma: float, horizon: float = 200.0, dt: float = 0.01,
                       decay_delta: float = 0.1, decay_tol: float = 1e-6, ratio_tol: float = 0.5,
                       pass_fraction: float = 0.99) -> Report:
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_seeds)]
    rows = []
    for sd in seeds:
        rep = temperedness_report(generate_path(sd, -horizon, 0.0, dt), sigma, horizon=horizon)
        rows.append(dict(seed=sd, max_ratio_y_over_t=rep.max_ratio_y_over_t, wiener_ratio=rep.wiener_ratio,
                         final_decay=rep.final_decay(decay_delta)))
    frame = pd.DataFrame(rows)
    report = Report('temperedness', meta=dict(n_seeds=n_seeds, horizon=horizon, dt=dt))
    report.tables['seeds'] = frame
    report.check('first_seed_final_decay', frame['final_decay'].iloc[0], decay_tol)
    report.check('fraction_wiener_ratio_small', float((frame['wiener_ratio'] < ratio_tol).mean()), pass_fraction, '>=')
    return report
