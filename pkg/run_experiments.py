import os
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent
CODE_FILES = ['run_experiments.py', 'experiments.py', 'dynamics.py', 'stochastics.py', 'operators.py', 'fields.py', 'fieldio.py', 'utils.py']


def read_code():
    return ''.join((ROOT / name).read_text(encoding='utf-8') for name in CODE_FILES)


import argparse
import hashlib
import json
import math
import time
import multiprocessing as mp
import torch
from tqdm import tqdm
from dataclasses import dataclass, field, fields, asdict, MISSING
from functools import partial
from typing import get_origin, get_args, Union, Optional, List

from fields import Grid, VelocityField
from fieldio import write_snapshot, write_values, read_snapshot
from stochastics import PATH_MODES, generate_path, path_frame
from dynamics import PhysicalParams, ForcingSchedule
from experiments import (
    PullbackRun,
    evaluate,
    ledger_audit,
    make_ensemble,
    operator_identity_suite,
    ou_statistics,
    energy_audit,
    stability_ensemble,
    linear_stability_oracle,
    pullback_absorption_test,
    diameter_report,
    tail_estimate_test,
    invariant_measure_sampler,
    pressure_recovery_check,
    forcing_hypothesis_check,
    continuity_check,
    temperedness_check,
)
from utils import RunLog, ConfigError, IntegrationError, StepRefused, ArtifactError, write_report, read_report


OUTPUT_ENV = 'THIRDGRADE_OUTPUT_DIR'
EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_INTEGRATION = 0, 1, 2, 3


@dataclass
class GridConfig:
    n_modes: int = 32
    box_length: float = 1.0
    dealias_factor: float = 1.5


@dataclass
class ParamsConfig:
    nu: float = 0.05
    alpha: float = 0.0
    beta: float = 0.01
    sigma: float = 1.0
    nonlinear: bool = True


@dataclass
class ForcingConfig:
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


@dataclass
class NoiseConfig:
    seed: int = 0
    dt: float = 0.01
    mode: str = 'stationary'
    y0: float = 0.0


@dataclass
class ExperimentConfig:
    name: str = 'exponential_stability'
    horizon: float = 100.0
    substeps: Optional[int] = None
    max_substeps: int = 50

    # initial data
    ensemble_radius: float = 1.0
    init_max_mode: int = 4
    n_members: int = 16

    # pullback
    anchor_time: float = 0.0
    pull_depths: List[float] = field(default_factory=lambda: [5.0, 10.0, 20.0, 40.0])
    min_decay: float = 1e-6
    radii: List[float] = field(default_factory=lambda: [0.125, 0.25])
    epsilon: float = 0.05

    # ensembles over paths
    n_seeds: int = 50
    pass_fraction: float = 0.95
    linear_check: bool = True
    n_paths: int = 20
    horizons: List[float] = field(default_factory=lambda: [50.0, 100.0, 200.0])

    # diagnostics
    n_samples: int = 10000
    n_states: int = 100
    grids: List[int] = field(default_factory=lambda: [16, 32, 64])
    n_fields: int = 200
    cs: List[float] = field(default_factory=lambda: [0.1, 1.0, 10.0])
    window: Optional[float] = None
    s_min: float = -200.0
    norm: str = 'dual'
    expect_pass: Optional[bool] = None
    perturbation: float = 0.01
    md_samples: int = 200
    beta_factor: Optional[float] = None
    save_snapshots: bool = False


@dataclass
class OutputConfig:
    output_dir: str = 'results/run'
    timestamps: bool = False


SECTIONS = {
    'grid': GridConfig,
    'params': ParamsConfig,
    'forcing': ForcingConfig,
    'noise': NoiseConfig,
    'experiment': ExperimentConfig,
    'output': OutputConfig,
}

UNITS = {
    'grid.box_length': 'torus side L, nondimensional',
    'params.nu': 'viscosity, nondimensional',
    'params.sigma': 'noise intensity, 1/sqrt(time)',
    'noise.dt': 'path step, solver time units',
    'experiment.horizon': 'solver time units',
    'experiment.pull_depths': 'solver time units',
    'experiment.horizons': 'solver time units',
    'experiment.radii': 'cutoff radius, box units (must be < L/2)',
    'forcing.width': 'Gaussian width as a fraction of L',
    'forcing.period': 'solver time units',
}


def resolve_type(field_type):
    origin = get_origin(field_type)
    if origin is Union:
        args = get_args(field_type)
        non_none_types = [arg for arg in args if arg is not type(None)]  # Exclude NoneType
        if len(non_none_types) == 1:
            return resolve_type(non_none_types[0])
    # lists and booleans are given as JSON on the command line
    if origin is list or field_type is bool:
        return json.loads
    return field_type


def type_name(field):
    return getattr(field.type, '__name__', None) or str(field.type).replace('typing.', '')


def field_default(field):
    if field.default is not MISSING:
        return field.default
    if field.default_factory is not MISSING:
        return field.default_factory()
    return None


@dataclass
class RunConfig:
    grid: GridConfig
    params: ParamsConfig
    forcing: ForcingConfig
    noise: NoiseConfig
    experiment: ExperimentConfig
    output: OutputConfig

    def to_dict(self):
        return asdict(self)

    def text(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_config(filename, overrides: Optional[dict] = None) -> RunConfig:
    filename = Path(filename)
    if not filename.exists():
        raise ConfigError(f'config file {filename} not found')
    try:
        raw = json.loads(filename.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f'config {filename} is not valid JSON: {e}') from e
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f'unknown config sections {sorted(unknown)}')
    result = {}
    for prefix, dataclass_type in SECTIONS.items():
        section = dict(raw.get(prefix, {}))
        names = {f.name for f in fields(dataclass_type)}
        bad = set(section) - names
        if bad:
            raise ConfigError(f'unknown keys in [{prefix}]: {sorted(bad)}')
        for key, value in (overrides or {}).items():
            sec, _, name = key.partition('.')
            if sec == prefix and value is not None:
                section[name] = value
        result[prefix] = dataclass_type(**section)
    config = RunConfig(**result)
    if os.environ.get(OUTPUT_ENV):
        config.output.output_dir = os.environ[OUTPUT_ENV]
    return config


@dataclass
class Setup:
    grid: Grid
    params: PhysicalParams
    forcing: ForcingSchedule


def validate(config: RunConfig) -> Setup:
    """Applies every type invariant; ConfigError names the violated constraint."""
    grid = Grid(config.grid.n_modes, config.grid.box_length, config.grid.dealias_factor)
    params = PhysicalParams(**asdict(config.params))
    forcing = ForcingSchedule(**asdict(config.forcing))
    if forcing.delta > 0:
        forcing.check_delta(params.sigma)
    noise = config.noise
    if noise.mode not in PATH_MODES:
        raise ConfigError(f'noise.mode must be one of {PATH_MODES}, got {noise.mode!r}')
    if not noise.dt > 0:
        raise ConfigError(f'noise.dt must be > 0, got {noise.dt}')
    exp = config.experiment
    if exp.name not in EXPERIMENTS:
        raise ConfigError(f'experiment.name must be one of {sorted(EXPERIMENTS)}, got {exp.name!r}')
    if exp.substeps is not None and (exp.substeps < 2 or exp.substeps % 2):
        raise ConfigError(f'experiment.substeps must be an even integer >= 2, got {exp.substeps}')
    if any(k >= grid.box_length / 2 for k in exp.radii) and exp.name == 'tail_estimates':
        raise ConfigError(f'experiment.radii must stay below L/2 = {grid.box_length / 2}')
    return Setup(grid, params, forcing)


# ----------------------------------------------------------------------------
# experiment runners: (config, setup, map_fn, log) -> list of reports

def _path(config: RunConfig, t_start, t_end):
    n = config.noise
    return generate_path(n.seed, t_start, t_end, n.dt, n.mode, n.y0)


def _initial(config: RunConfig, setup: Setup, count=1):
    e = config.experiment
    return make_ensemble(setup.grid, count, e.ensemble_radius, config.noise.seed, e.init_max_mode)


def run_operator_identities(config, setup, map_fn, log):
    g = config.grid
    grids = [Grid(n, g.box_length, g.dealias_factor) for n in config.experiment.grids]
    return [operator_identity_suite(grids, config.experiment.n_fields, config.noise.seed, map_fn=map_fn)]


def run_ou_statistics(config, setup, map_fn, log):
    return [ou_statistics(config.experiment.n_samples, config.noise.seed, config.noise.dt)]


def run_temperedness(config, setup, map_fn, log):
    e = config.experiment
    return [temperedness_check(config.noise.seed, e.n_seeds, setup.params.sigma, e.horizon, config.noise.dt)]


def run_energy_audit(config, setup, map_fn, log):
    e = config.experiment
    if e.substeps is None:
        raise ConfigError('energy_audit needs experiment.substeps')
    path = _path(config, 0.0, e.horizon)
    report, _ = energy_audit(setup.grid, setup.params, setup.forcing, path, _initial(config, setup)[0],
                             e.horizon, e.substeps, beta_factor=e.beta_factor, log=log)
    report.tables['path'] = path_frame(path, setup.params.sigma)
    return [report]


def run_exponential_stability(config, setup, map_fn, log):
    e = config.experiment
    seeds = [config.noise.seed + i for i in range(e.n_seeds)]
    reports = [stability_ensemble(setup.params, setup.grid, seeds, e.horizon, config.noise.dt, e.ensemble_radius,
                                  e.init_max_mode, e.pass_fraction, max_substeps=e.max_substeps, map_fn=map_fn, log=log)]
    if e.linear_check:
        reports.append(linear_stability_oracle(setup.params, setup.grid, config.noise.seed, e.horizon, config.noise.dt))
    return reports


def _pullback(config, setup):
    e = config.experiment
    depth = max(max(e.pull_depths), e.anchor_time, e.horizon)
    path = _path(config, -depth, 0.0)
    ensemble = _initial(config, setup, e.n_members)
    return PullbackRun(e.anchor_time, list(e.pull_depths), ensemble, path, e.ensemble_radius)


def _arrival_snapshots(run: PullbackRun, report):
    deepest = run.pull_depths[-1]
    for a in run.arrivals(deepest):
        if a.y is not None:
            report.snapshots[f'arrival_depth{deepest:g}_member{a.member}'] = a.y


def run_pullback_absorption(config, setup, map_fn, log):
    e = config.experiment
    run = _pullback(config, setup)
    absorption = pullback_absorption_test(run, setup.params, setup.forcing, max_substeps=e.max_substeps, map_fn=map_fn, log=log)
    diameters = diameter_report(run, setup.params, setup.forcing, e.min_decay, map_fn=map_fn, log=log)
    if e.save_snapshots:
        _arrival_snapshots(run, absorption)
    return [absorption, diameters]


def run_tail_estimates(config, setup, map_fn, log):
    e = config.experiment
    run = _pullback(config, setup)
    absorption = pullback_absorption_test(run, setup.params, setup.forcing, max_substeps=e.max_substeps, map_fn=map_fn, log=log)
    tails = tail_estimate_test(run, setup.params, setup.forcing, e.radii, e.epsilon, map_fn=map_fn, log=log)
    if e.save_snapshots:
        _arrival_snapshots(run, tails)
    return [tails, absorption]


def run_invariant_measure(config, setup, map_fn, log):
    e = config.experiment
    y0 = _initial(config, setup)[0]
    return [invariant_measure_sampler(setup.params, setup.forcing, y0, e.n_paths, e.horizons, config.noise.seed,
                                      config.noise.dt, max_substeps=e.max_substeps, noise_mode=config.noise.mode,
                                      y_start=config.noise.y0, map_fn=map_fn, log=log)]


def run_pressure_recovery(config, setup, map_fn, log):
    e = config.experiment
    path = _path(config, 0.0, e.horizon)
    return [pressure_recovery_check(setup.grid, setup.params, setup.forcing, path, e.n_states, config.noise.seed,
                                    save_snapshots=e.save_snapshots)]


def run_forcing_hypothesis(config, setup, map_fn, log):
    e = config.experiment
    return [forcing_hypothesis_check(setup.forcing, setup.params.sigma, setup.grid, e.window, e.cs, e.s_min,
                                     norm=e.norm, expect=e.expect_pass)]


def run_continuity(config, setup, map_fn, log):
    e = config.experiment
    path = _path(config, 0.0, e.horizon)
    return [continuity_check(setup.grid, setup.params, setup.forcing, path, _initial(config, setup)[0], e.perturbation,
                             e.horizon, e.max_substeps, config.noise.seed, e.md_samples)]


EXPERIMENTS = {
    'operator_identities': run_operator_identities,
    'ou_statistics': run_ou_statistics,
    'temperedness': run_temperedness,
    'energy_audit': run_energy_audit,
    'exponential_stability': run_exponential_stability,
    'pullback_absorption': run_pullback_absorption,
    'tail_estimates': run_tail_estimates,
    'invariant_measure': run_invariant_measure,
    'pressure_recovery': run_pressure_recovery,
    'forcing_hypothesis': run_forcing_hypothesis,
    'continuity': run_continuity,
}


# ----------------------------------------------------------------------------
# artifacts

def build_tag():
    return hashlib.sha256(read_code().encode()).hexdigest()[:12]


class ArtifactWriter:
    """Writes report files under one output directory and keeps the manifest entries."""

    def __init__(self, output_dir: Path, header: dict):
        self.output_dir = output_dir
        self.header = header
        self.entries = []

    def table(self, name, frame, kind, meta=None):
        filename = self.output_dir / f'{name}.csv'
        write_report(filename, {**self.header, **(meta or {})}, frame)
        self.entries.append(dict(path=filename.name, kind=kind, rows=len(frame), columns=list(frame.columns)))

    def snapshot(self, name, data):
        filename = self.output_dir / "snapshots" / f"{name}.bin"
        if isinstance(data, VelocityField):
            write_snapshot(filename, data)
        else:
            values, box_length = data
            write_values(filename, values, box_length)
        self.entries.append(dict(path=str(filename.relative_to(self.output_dir)), kind='snapshot', rows=0, columns=[]))

    def report(self, report):
        self.table(f'{report.name}_checks', report.checks_frame(), 'checks', dict(report=report.name, **_jsonable(report.meta)))
        for key, frame in report.tables.items():
            kind = 'ledger' if key.startswith('ledger_') else 'table'
            self.table(f'{report.name}_{key}', frame, kind, dict(report=report.name))
        for key, data in sorted(report.snapshots.items()):
            self.snapshot(f"{report.name}_{key}", data)

    def manifest(self, status, exit_code, reports):
        manifest = dict(
            status=status,
            exit_code=exit_code,
            reports={r.name: r.passed for r in reports},
            files=self.entries,
            **self.header,
        )
        with (self.output_dir / 'manifest.json').open('w') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write('\n')


def _jsonable(meta):
    out = {}
    for k, v in meta.items():
        if isinstance(v, float) and not math.isfinite(v):
            v = str(v)
        out[k] = v
    return out


def _init_worker():
    torch.set_num_threads(1)


def run(config: RunConfig, jobs: int = 1, progress: bool = False, quiet: bool = False) -> int:
    setup = validate(config)
    output_dir = Path(config.output.output_dir)
    log = RunLog.start(output_dir, config.text(), code=read_code(), quiet=quiet)
    log(f'Config: {config.text()}', logonly=True)
    log(f'experiment {config.experiment.name} -> {output_dir}')
    torch.set_num_threads(1)

    # output location stays out of the artifacts so reruns elsewhere are byte-identical
    settings = {k: v for k, v in config.to_dict().items() if k != 'output'}
    header = dict(experiment=config.experiment.name, build=build_tag(), config=settings)
    if config.output.timestamps:
        header['created'] = time.strftime('%Y-%m-%dT%H:%M:%S')
    writer = ArtifactWriter(output_dir, header)
    reports = []

    pool = mp.Pool(jobs, initializer=_init_worker) if jobs > 1 else None
    map_fn = partial(pool.imap, chunksize=1) if pool is not None else map
    if progress:
        base = map_fn
        map_fn = lambda fn, jobs: tqdm(base(fn, jobs), total=len(jobs), leave=False)
    try:
        reports = EXPERIMENTS[config.experiment.name](config, setup, map_fn, log)
    except (IntegrationError, StepRefused) as e:
        log(f'integration failure: {e}')
        state = getattr(e, 'state', None)
        if state is not None:
            writer.snapshot('last_good_state', state.z)
        writer.manifest('integration_failure', EXIT_INTEGRATION, reports)
        return EXIT_INTEGRATION
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    for report in reports:
        writer.report(report)
        log(report.summary())
    passed = all(r.passed for r in reports)
    code = EXIT_OK if passed else EXIT_FAILED
    writer.manifest('passed' if passed else 'failed', code, reports)
    log(f'{"all checks passed" if passed else "checks failed"}, exit status {code}')
    return code


def verify(artifact_dir, log=print) -> int:
    """
    Re-checks recorded pass/fail rows and ledger audit rows without simulating.
    0 when every row holds, 1 on a failed or tampered row, 2 on missing or corrupt files.
    """
    artifact_dir = Path(artifact_dir)
    manifest_file = artifact_dir / 'manifest.json'
    if not manifest_file.exists():
        raise ArtifactError(f'no manifest in {artifact_dir}')
    try:
        manifest = json.loads(manifest_file.read_text())
        entries = manifest['files']
    except (json.JSONDecodeError, KeyError) as e:
        raise ArtifactError(f'corrupt manifest {manifest_file}: {e}') from e
    if manifest.get('status') == 'integration_failure':
        log('run ended in an integration failure')
        return EXIT_FAILED
    bad = 0
    for entry in entries:
        filename = artifact_dir / entry['path']
        if entry['kind'] == 'snapshot':
            read_snapshot(filename)
            continue
        _, frame = read_report(filename)
        if len(frame) != entry['rows'] or list(frame.columns) != entry['columns']:
            raise ArtifactError(f'{filename} has {len(frame)} rows and columns {list(frame.columns)}, manifest says {entry["rows"]} and {entry["columns"]}')
        if entry['kind'] == 'checks':
            for row in frame.itertuples(index=False):
                ok = evaluate(row.value, row.bound, row.relation)
                if not ok or ok != bool(row.passed):
                    log(f'{filename.name}: check {row.check} fails ({row.value} {row.relation} {row.bound})')
                    bad += 1
        elif entry['kind'] == 'ledger':
            recomputed, stored = ledger_audit(frame)
            failed = int((~recomputed).sum() + (recomputed != stored).sum())
            if failed:
                log(f'{filename.name}: {failed} ledger rows fail the audit')
                bad += failed
    log(f'verified {len(entries)} artifacts, {bad} failing rows')
    return EXIT_OK if bad == 0 else EXIT_FAILED


def schema_text():
    lines = ['# Run config schema', '', 'JSON object with one key per section. Every key is optional; defaults below.',
             'All quantities are nondimensional (box units for lengths, solver units for time).', '']
    for prefix, dataclass_type in SECTIONS.items():
        lines += [f'## {prefix}', '', '| key | type | default | units |', '|---|---|---|---|']
        for f in fields(dataclass_type):
            lines.append(f'| {prefix}.{f.name} | {type_name(f)} | {json.dumps(field_default(f))} | {UNITS.get(f"{prefix}.{f.name}", "")} |')
        lines.append('')
    lines += ['## experiment.name', '', ', '.join(sorted(EXPERIMENTS)), '']
    return '\n'.join(lines)


def parse_args(argv=None, dataclass_map=None):
    parser = argparse.ArgumentParser(prog='run_experiments.py')
    dataclass_map = dataclass_map or SECTIONS
    sub = parser.add_subparsers(dest='command', required=True)

    run_parser = sub.add_parser('run')
    run_parser.add_argument('config')
    run_parser.add_argument('--jobs', type=int, default=1)
    run_parser.add_argument('--timestamps', dest='timestamps', action='store_true', default=None)
    run_parser.add_argument('--no-timestamps', dest='timestamps', action='store_false')
    run_parser.add_argument('--progress', action='store_true')
    run_parser.add_argument('--quiet', action='store_true')
    # Dynamically add override flags for each dataclass
    for prefix, dataclass_type in dataclass_map.items():
        for f in fields(dataclass_type):
            run_parser.add_argument(
                f'--{prefix}.{f.name}',
                type=resolve_type(f.type),
                default=None,
                help=f'{f.name} for {prefix} (type: {type_name(f)})',
            )

    verify_parser = sub.add_parser('verify')
    verify_parser.add_argument('artifact_dir')
    sub.add_parser('print-schema')
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    if args.command == 'print-schema':
        print(schema_text())
        return EXIT_OK
    if args.command == 'verify':
        try:
            return verify(args.artifact_dir)
        except ArtifactError as e:
            print(f'artifact error: {e}', file=sys.stderr)
            return EXIT_CONFIG
    overrides = {k: v for k, v in vars(args).items() if '.' in k}
    try:
        config = load_config(args.config, overrides)
        if args.timestamps is not None:
            config.output.timestamps = args.timestamps
        return run(config, jobs=args.jobs, progress=args.progress, quiet=args.quiet)
    except ConfigError as e:
        print(f'config error: {e}', file=sys.stderr)
        return EXIT_CONFIG


if __name__ == '__main__':
    sys.exit(main())
