"""
Two-sided scalar Wiener paths with the stationary Ornstein-Uhlenbeck process

    y(t) = int_{-inf}^t exp(-(t - s)) dW(s),      dy = -y dt + dW,

and the factor Upsilon(t) = exp(-sigma y(t)).

Time is glued at an anchor (t = 0 whenever the window contains it): y(anchor) is drawn
from N(0, 1/2), the future comes from the exact joint Gaussian transition of
(W, y) per step and the past from the exact conditional law of the previous step given
the current one, each from its own substream of the seed. Queries must hit the grid.

refine() halves the grid by sampling every midpoint from the exact Gaussian bridge of
(W, y) between its two neighbours, so a refined path keeps every original value. The
solver refines short segment()s only, where the stability bound demands it.
"""
import math
import numpy as np
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional
import pandas as pd
from scipy.integrate import trapezoid

from utils import ConfigError, OffGridError, spawn_generators, write_report


PATH_MODES = ('stationary', 'zero_start', 'frozen')
GRID_TOL = 1e-6
MAX_REFINE = 12


def _transition_cov(h):
    # Cov of (W(t+h) - W(t), y(t+h) - e^{-h} y(t))
    c = -math.expm1(-h)
    return np.array([[h, c], [c, -0.5 * math.expm1(-2 * h)]])


def _bridge_law(dt):
    """
    Midpoint of X = (W, y) over a step dt given both ends: mean = A x0 + G (x1 - A^2 x0),
    G = S A^T S2^-1, covariance S - G A S, with A = diag(1, e^{-dt/2}), S the half-step
    transition covariance and S2 = A S A^T + S the full-step one.
    """
    a = np.diag([1.0, math.exp(-dt / 2)])
    s = _transition_cov(dt / 2)
    s2 = a @ s @ a.T + s
    gain = s @ a.T @ np.linalg.inv(s2)
    cov = s - gain @ a @ s
    cov = 0.5 * (cov + cov.T)
    l11 = math.sqrt(max(cov[0, 0], 0.0))
    l21 = cov[1, 0] / l11 if l11 > 0 else 0.0
    l22 = math.sqrt(max(cov[1, 1] - l21 * l21, 0.0))
    return a, gain, np.array([[l11, 0.0], [l21, l22]])


def _steps(t_start, t_end, dt):
    if not dt > 0:
        raise ConfigError(f'noise dt must be > 0, got {dt}')
    if not t_start < t_end:
        raise ConfigError(f'noise path needs t_start < t_end, got [{t_start}, {t_end}]')
    span = t_end - t_start
    n = int(round(span / dt))
    if n < 1 or abs(n * dt - span) > 1e-9 * max(1.0, abs(span)):
        raise ConfigError(f'dt={dt} does not divide the interval [{t_start}, {t_end}]')
    return n


@dataclass(frozen=True, eq=False)
class NoisePath:
    t_start: float
    t_end: float
    dt: float
    seed: int
    mode: str
    y_start: float
    anchor_index: int
    wiener: np.ndarray
    ou: np.ndarray
    increments: np.ndarray
    level: int = 0
    offset: int = 0

    @property
    def n_steps(self):
        return len(self.increments)

    @property
    def times(self):
        return self.t_start + self.dt * np.arange(self.n_steps + 1)

    @property
    def initial_draw(self):
        return float(self.ou[self.anchor_index])

    def index(self, t) -> int:
        pos = (t - self.t_start) / self.dt
        i = int(round(pos))
        if abs(pos - i) > GRID_TOL or i < 0 or i > self.n_steps:
            raise OffGridError(f't={t} is not on the path grid [{self.t_start}:{self.dt}:{self.t_end}]')
        return i

    def ou_at(self, t) -> float:
        return float(self.ou[self.index(t)])

    def wiener_at(self, t) -> float:
        return float(self.wiener[self.index(t)])

    def upsilon(self, t, sigma) -> float:
        return math.exp(-sigma * self.ou_at(t))

    def window(self, t0, t1):
        i0, i1 = self.index(t0), self.index(t1)
        return self.t_start + self.dt * np.arange(i0, i1 + 1), self.ou[i0:i1 + 1]

    def segment(self, t0, t1) -> 'NoisePath':
        # the same values restricted to [t0, t1]; offset keeps the position on the full grid
        i0, i1 = self.index(t0), self.index(t1)
        return replace(self, t_start=self.t_start + i0 * self.dt, t_end=self.t_start + i1 * self.dt, anchor_index=0,
                       wiener=self.wiener[i0:i1 + 1], ou=self.ou[i0:i1 + 1], increments=self.increments[i0:i1],
                       offset=self.offset + i0)

    def refine(self) -> 'NoisePath':
        """
        The same path on the grid of step dt/2. Midpoints are drawn from the bridge law with
        a generator keyed on (seed, level, offset); frozen paths stay deterministic.
        """
        if self.level >= MAX_REFINE:
            raise ConfigError(f'noise path already refined {self.level} times')
        n, h = self.n_steps, self.dt / 2
        x = np.stack([self.wiener, self.ou], axis=1)
        x0, x1 = x[:-1], x[1:]
        if self.mode == 'frozen':
            mid = x0 * np.array([1.0, math.exp(-h)])
        else:
            a, gain, chol = _bridge_law(self.dt)
            mean = x0 @ a.T + (x1 - x0 @ (a @ a).T) @ gain.T
            rng = np.random.default_rng([self.seed, self.level + 1, self.offset])
            mid = mean + rng.standard_normal((n, 2)) @ chol.T
        w = np.empty(2 * n + 1)
        y = np.empty(2 * n + 1)
        w[::2], y[::2] = self.wiener, self.ou
        w[1::2], y[1::2] = mid[:, 0], mid[:, 1]
        return replace(self, dt=h, anchor_index=2 * self.anchor_index, wiener=w, ou=y,
                       increments=np.diff(w), level=self.level + 1, offset=2 * self.offset)

    def spec(self) -> dict:
        return dict(seed=self.seed, t_start=self.t_start, t_end=self.t_end, dt=self.dt, mode=self.mode, y_start=self.y_start)


@dataclass(frozen=True, eq=False)
class ShiftedPath:
    """The path of theta_s omega: W(t + s) - W(s) and y(t + s)."""
    base: NoisePath
    shift: float

    def __post_init__(self):
        # W(s) must exist for the cocycle base point
        self.base.index(self.shift)

    @property
    def dt(self):
        return self.base.dt

    @property
    def level(self):
        return self.base.level

    @property
    def t_start(self):
        return self.base.t_start - self.shift

    @property
    def t_end(self):
        return self.base.t_end - self.shift

    def index(self, t) -> int:
        return self.base.index(t + self.shift)

    def ou_at(self, t) -> float:
        return self.base.ou_at(t + self.shift)

    def wiener_at(self, t) -> float:
        return self.base.wiener_at(t + self.shift) - self.base.wiener_at(self.shift)

    def upsilon(self, t, sigma) -> float:
        return math.exp(-sigma * self.ou_at(t))

    def window(self, t0, t1):
        times, ou = self.base.window(t0 + self.shift, t1 + self.shift)
        return times - self.shift, ou

    def segment(self, t0, t1) -> NoisePath:
        # a plain path in shifted time, W measured from W(s)
        seg = self.base.segment(t0 + self.shift, t1 + self.shift)
        return replace(seg, t_start=seg.t_start - self.shift, t_end=seg.t_end - self.shift,
                       wiener=seg.wiener - self.base.wiener_at(self.shift))

    def spec(self) -> dict:
        return dict(base=self.base.spec(), shift=self.shift)


def generate_path(seed: int, t_start: float, t_end: float, dt: float, mode: str = 'stationary', y_start: float = 0.0) -> NoisePath:
    """
    Modes:
    - stationary: y(anchor) ~ N(0, 1/2)
    - zero_start: y(anchor) = 0, same increments as stationary
    - frozen: zero increments from t_start, y(t) = y_start exp(-(t - t_start))
    """
    if mode not in PATH_MODES:
        raise ConfigError(f'noise mode must be one of {PATH_MODES}, got {mode!r}')
    n = _steps(t_start, t_end, dt)
    times = t_start + dt * np.arange(n + 1)

    if mode == 'frozen':
        return NoisePath(t_start, t_end, dt, seed, mode, y_start, 0,
                         wiener=np.zeros(n + 1), ou=y_start * np.exp(-(times - t_start)), increments=np.zeros(n))

    anchor_time = min(max(0.0, t_start), t_end)
    anchor = int(round((anchor_time - t_start) / dt))
    if abs(times[anchor] - anchor_time) > GRID_TOL * dt:
        raise ConfigError(f'two-sided path needs t=0 on its grid; t_start={t_start} is not a multiple of dt={dt}')

    rng_anchor, rng_forward, rng_backward = spawn_generators(seed, 3)
    a = math.exp(-dt)
    c = -math.expm1(-dt)  # Cov(eta, dW) = 1 - e^{-dt}
    var_eta = -0.5 * math.expm1(-2 * dt)  # (1 - e^{-2dt}) / 2

    y = np.zeros(n + 1)
    w = np.zeros(n + 1)
    dw = np.zeros(n)
    y[anchor] = math.sqrt(0.5) * rng_anchor.standard_normal() if mode == 'stationary' else 0.0

    # forward: (dW, eta) jointly Gaussian, eta the OU innovation over the step
    xi = rng_forward.standard_normal((n - anchor, 2))
    s_eta = math.sqrt(max(var_eta - c * c / dt, 0.0))
    for i in range(anchor, n):
        z0, z1 = xi[i - anchor]
        dw[i] = math.sqrt(dt) * z0
        y[i + 1] = a * y[i] + c / math.sqrt(dt) * z0 + s_eta * z1
        w[i + 1] = w[i] + dw[i]

    # backward: (y_{i-1}, dW_{i-1}) given y_i has mean (a y_i, 2c y_i),
    # covariance [[(1 - a^2)/2, -a c], [-a c, dt - 2 c^2]]
    xi = rng_backward.standard_normal((anchor, 2))
    l11 = math.sqrt(var_eta)
    l21 = -a * c / l11
    l22 = math.sqrt(max(dt - 2 * c * c - l21 * l21, 0.0))
    for j, i in enumerate(range(anchor, 0, -1)):
        z0, z1 = xi[j]
        y[i - 1] = a * y[i] + l11 * z0
        dw[i - 1] = 2 * c * y[i] + l21 * z0 + l22 * z1
        w[i - 1] = w[i] - dw[i - 1]

    return NoisePath(t_start, t_end, dt, seed, mode, y_start, anchor, wiener=w, ou=y, increments=dw)


def path_from_spec(spec: dict):
    if 'base' in spec:
        return ShiftedPath(path_from_spec(spec['base']), spec['shift'])
    return generate_path(spec['seed'], spec['t_start'], spec['t_end'], spec['dt'], spec.get('mode', 'stationary'), spec.get('y_start', 0.0))


def ou_at(path, t) -> float:
    return path.ou_at(t)


def upsilon(path, t, sigma) -> float:
    return path.upsilon(t, sigma)


def mean_ou(path, t0, t1) -> float:
    # trapezoid mean of y over [t0, t1]
    _, y = path.window(t0, t1)
    if len(y) < 2:
        return float(y[0])
    return float(trapezoid(y) / (len(y) - 1))


@dataclass
class TemperednessReport:
    lags: np.ndarray
    max_ratio_y_over_t: float
    decay_samples: Dict[float, np.ndarray] = field(default_factory=dict)
    wiener_ratio: float = 0.0
    upsilon_growth: float = 0.0

    def final_decay(self, delta):
        return float(self.decay_samples[delta][-1])


def temperedness_report(path, sigma, deltas=(0.01, 0.1, 1.0), horizon: float = 50.0, t_min: float = 10.0) -> TemperednessReport:
    """
    Sub-exponential growth diagnostics along the past: sup_{t >= t_min} |y(-t)|/t and
    exp(-delta t)|y(-t)| for each delta, plus |W(-T)|/T at the far end.
    """
    if path.t_start > -horizon or path.t_end < 0:
        raise ConfigError(f'temperedness needs a path spanning at least [-{horizon}, 0], got [{path.t_start}, {path.t_end}]')
    times, y = path.window(path.t_start, 0.0)
    lags = -times[::-1]
    y_lag = np.abs(y[::-1])
    far = lags >= t_min
    ratio = float((y_lag[far] / lags[far]).max())
    t_far = float(lags[-1])
    return TemperednessReport(
        lags=lags,
        max_ratio_y_over_t=ratio,
        decay_samples={d: np.exp(-d * lags) * y_lag for d in deltas},
        wiener_ratio=abs(path.wiener_at(-t_far)) / t_far,
        upsilon_growth=sigma * ratio,
    )


def path_frame(path, sigma) -> pd.DataFrame:
    times, y = path.window(path.t_start, path.t_end)
    w = np.array([path.wiener_at(t) for t in times])
    return pd.DataFrame({'t': times, 'W': w, 'y': y, 'upsilon': np.exp(-sigma * y)})


def export_path_csv(path, sigma, filename):
    meta = dict(seed=path.spec(), dt=path.dt, sigma=sigma)
    write_report(Path(filename), meta, path_frame(path, sigma))


if __name__ == '__main__':
    path = generate_path(0, -200.0, 20.0, 0.01)
    print(f'y(0) = {path.initial_draw:.4f}, W(0) = {path.wiener_at(0.0)}')
    report = temperedness_report(path, sigma=1.0)
    print(f'max |y(-t)|/t = {report.max_ratio_y_over_t:.4f}, |W(-T)|/T = {report.wiener_ratio:.4f}')
    print(f'exp(-0.1 T)|y(-T)| = {report.final_decay(0.1):.3e}')
