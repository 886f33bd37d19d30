import json

import pytest

from fieldio import read_snapshot
from run_experiments import EXIT_CONFIG, EXIT_FAILED, EXIT_INTEGRATION, EXIT_OK, load_config, main, schema_text
from utils import read_report


def write_config(tmp_path, name, **sections):
    filename = tmp_path / f'{name}.json'
    sections.setdefault('output', {'output_dir': str(tmp_path / name)})
    filename.write_text(json.dumps(sections))
    return filename


def hypothesis_config(tmp_path, name='hypothesis', expect=True, profile='polynomial'):
    return write_config(
        tmp_path, name,
        grid={'n_modes': 16},
        forcing={'kind': 'time_varying', 'profile': profile, 'rate': 1.0, 'delta': 0.25},
        experiment={'name': 'forcing_hypothesis', 'expect_pass': expect},
    )


def test_print_schema(capsys):
    assert main(['print-schema']) == EXIT_OK
    out = capsys.readouterr().out
    for key in ('grid.n_modes', 'params.sigma', 'noise.dt', 'experiment.pull_depths', 'output.timestamps'):
        assert key in out
    assert out.strip() == schema_text().strip()


def test_config_errors(tmp_path):
    assert main(['run', str(tmp_path / 'missing.json'), '--quiet']) == EXIT_CONFIG
    bad_section = write_config(tmp_path, 'bad_section', solver={'dt': 0.1})
    assert main(['run', str(bad_section), '--quiet']) == EXIT_CONFIG
    bad_key = write_config(tmp_path, 'bad_key', grid={'points': 16})
    assert main(['run', str(bad_key), '--quiet']) == EXIT_CONFIG
    bad_alpha = write_config(tmp_path, 'bad_alpha', params={'nu': 0.01, 'beta': 0.01, 'alpha': 1.0},
                             experiment={'name': 'ou_statistics', 'n_samples': 10})
    assert main(['run', str(bad_alpha), '--quiet']) == EXIT_CONFIG
    bad_name = write_config(tmp_path, 'bad_name', experiment={'name': 'turbulence'})
    assert main(['run', str(bad_name), '--quiet']) == EXIT_CONFIG


def test_overrides_and_output_env(tmp_path, monkeypatch):
    config_file = hypothesis_config(tmp_path)
    config = load_config(config_file, {'params.sigma': 2.0, 'experiment.cs': [1.0]})
    assert config.params.sigma == 2.0
    assert config.experiment.cs == [1.0]
    monkeypatch.setenv('THIRDGRADE_OUTPUT_DIR', str(tmp_path / 'elsewhere'))
    assert load_config(config_file).output.output_dir == str(tmp_path / 'elsewhere')


def test_run_and_verify(tmp_path):
    config_file = hypothesis_config(tmp_path)
    out = tmp_path / 'hypothesis'
    assert main(['run', str(config_file), '--quiet']) == EXIT_OK
    manifest = json.loads((out / 'manifest.json').read_text())
    assert manifest['status'] == 'passed'
    assert manifest['reports'] == {'forcing_hypothesis': True}
    meta, checks = read_report(out / 'forcing_hypothesis_checks.csv')
    assert meta['experiment'] == 'forcing_hypothesis'
    assert checks['check'].tolist() == ['outcome_matches_expectation']
    assert main(['verify', str(out)]) == EXIT_OK


def test_failed_checks_exit_with_one(tmp_path):
    config_file = hypothesis_config(tmp_path, 'exponential', expect=True, profile='exponential')
    assert main(['run', str(config_file), '--quiet']) == EXIT_FAILED
    assert main(['verify', str(tmp_path / 'exponential')]) == EXIT_FAILED


def test_verify_detects_tampering_and_truncation(tmp_path):
    config_file = hypothesis_config(tmp_path)
    out = tmp_path / 'hypothesis'
    assert main(['run', str(config_file), '--quiet']) == EXIT_OK

    checks = out / 'forcing_hypothesis_checks.csv'
    original = checks.read_text()
    lines = original.rstrip('\n').split('\n')
    lines[-1] = lines[-1].replace('True', 'False')
    checks.write_text('\n'.join(lines) + '\n')
    assert main(['verify', str(out)]) == EXIT_FAILED
    checks.write_text(original)

    trend = out / 'forcing_hypothesis_trend.csv'
    trend.write_text(''.join(trend.read_text().splitlines(keepends=True)[:-1]))
    assert main(['verify', str(out)]) == EXIT_CONFIG

    (out / 'manifest.json').unlink()
    assert main(['verify', str(out)]) == EXIT_CONFIG


def test_reruns_are_byte_identical(tmp_path):
    first = hypothesis_config(tmp_path, 'first')
    second = hypothesis_config(tmp_path, 'second')
    assert main(['run', str(first), '--quiet']) == EXIT_OK
    assert main(['run', str(second), '--quiet']) == EXIT_OK
    names = sorted(p.name for p in (tmp_path / 'first').iterdir() if p.name != 'run.log')
    assert names == sorted(p.name for p in (tmp_path / 'second').iterdir() if p.name != 'run.log')
    for name in names:
        assert (tmp_path / 'first' / name).read_bytes() == (tmp_path / 'second' / name).read_bytes()


def test_refused_step_exits_with_three(tmp_path):
    config_file = write_config(
        tmp_path, 'refused',
        grid={'n_modes': 16, 'box_length': 1.0},
        forcing={'kind': 'zero'},
        noise={'dt': 0.01},
        experiment={'name': 'energy_audit', 'horizon': 0.08, 'substeps': 4, 'ensemble_radius': 100.0},
    )
    assert main(['run', str(config_file), '--quiet']) == EXIT_INTEGRATION
    manifest = json.loads((tmp_path / 'refused' / 'manifest.json').read_text())
    assert manifest['status'] == 'integration_failure'
    assert main(['verify', str(tmp_path / 'refused')]) == EXIT_FAILED



def test_pressure_snapshots_are_written_and_verified(tmp_path):
    config_file = write_config(
        tmp_path, 'pressure',
        grid={'n_modes': 16},
        params={'nu': 0.01, 'alpha': 0.002, 'beta': 0.001},
        forcing={'kind': 'constant_field', 'shape': 'gradient'},
        experiment={'name': 'pressure_recovery', 'horizon': 1.0, 'n_states': 3, 'save_snapshots': True},
    )
    out = tmp_path / 'pressure'
    assert main(['run', str(config_file), '--quiet']) == EXIT_OK
    snapshot = read_snapshot(out / 'snapshots' / 'pressure_recovery_state0_p1.bin')
    assert snapshot.values.shape == (1, 16, 16)
    assert snapshot.box_length == 1.0
    assert (out / 'snapshots' / 'pressure_recovery_state0_p2.bin').exists()
    manifest = json.loads((out / 'manifest.json').read_text())
    assert sum(e['kind'] == 'snapshot' for e in manifest['files']) == 2
    assert main(['verify', str(out)]) == EXIT_OK


@pytest.mark.slow
def test_parallel_run_matches_serial(tmp_path):
    experiment = {'name': 'operator_identities', 'grids': [16], 'n_fields': 2}
    serial = write_config(tmp_path, 'serial', experiment=experiment)
    parallel = write_config(tmp_path, 'parallel', experiment=experiment)
    assert main(['run', str(serial), '--quiet']) == EXIT_OK
    assert main(['run', str(parallel), '--quiet', '--jobs', '2']) == EXIT_OK
    name = 'operator_identities_fields.csv'
    assert (tmp_path / 'serial' / name).read_bytes() == (tmp_path / 'parallel' / name).read_bytes()
