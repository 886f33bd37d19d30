"""
Shared plumbing: error types, the run log, seeded generator streams, report files
"""
import sys
import json
import hashlib
import uuid
import numpy as np
import pandas as pd
import torch
from io import StringIO
from pathlib import Path
from typing import Optional



class LabError(Exception):
    pass


class ConfigError(LabError):
    """Invalid configuration, shape mismatch or a precondition the caller controls."""


class OffGridError(ConfigError):
    pass


class StepRefused(LabError):
    def __init__(self, message, dt=None, bound=None):
        super().__init__(message)
        self.dt = dt
        self.bound = bound


class IntegrationError(LabError):
    def __init__(self, message, state=None):
        super().__init__(message)
        # last finite state before the failure
        self.state = state


class ArtifactError(LabError):
    pass


class RunLog:
    def __init__(self, logfile: Optional[Path] = None, quiet: bool = False):
        self.logfile = Path(logfile) if logfile is not None else None
        self.quiet = quiet

    @classmethod
    def start(cls, output_dir, config_text: str, code: Optional[str] = None, quiet: bool = False):
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        log = cls(output_dir / 'run.log', quiet=quiet)
        # run id is a function of the config so reruns log identically
        log.run_id = uuid.uuid5(uuid.NAMESPACE_URL, hashlib.sha256(config_text.encode()).hexdigest())
        with log.logfile.open('w') as f:
            if code is not None:
                print(code, file=f)
                print('=' * 100, file=f)
        log(f'run id: {log.run_id}')
        log(f'Running python {sys.version}', logonly=True)
        log(f'Running pytorch {torch.version.__version__}, numpy {np.__version__}, pandas {pd.__version__}', logonly=True)
        log('=' * 100, logonly=True)
        return log

    def __call__(self, s, logonly=False):
        if not logonly and not self.quiet:
            print(s)
        if self.logfile is not None:
            with self.logfile.open('a') as f:
                print(s, file=f)


def null_log(s, logonly=False):
    pass


def spawn_generators(seed: int, n: int):
    # independent PCG64 substreams of one seed
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


FLOAT_FORMAT = '%.17g'


def write_report(filename, meta: dict, frame: pd.DataFrame):
    """
    Writes a CSV preceded by a block of '# key: value' lines.
    - meta values are JSON-encoded so they read back unchanged
    - floats use 17 significant digits, so reruns are byte-identical
    """
    filename = Path(filename)
    filename.parent.mkdir(parents=True, exist_ok=True)
    with filename.open('w', newline='') as f:
        for key, value in meta.items():
            f.write(f'# {key}: {json.dumps(value, sort_keys=True)}\n')
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')


def read_report(filename):
    filename = Path(filename)
    if not filename.exists():
        raise ArtifactError(f'missing artifact {filename}')
    meta, body = {}, []
    with filename.open('r') as f:
        for line in f:
            if line.startswith('# ') and not body:
                key, _, value = line[2:].rstrip('\n').partition(': ')
                try:
                    meta[key] = json.loads(value)
                except json.JSONDecodeError as e:
                    raise ArtifactError(f'corrupt header line in {filename}: {line!r}') from e
            else:
                body.append(line)
    if not body:
        raise ArtifactError(f'{filename} has no table')
    try:
        frame = pd.read_csv(StringIO(''.join(body)))
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ArtifactError(f'unreadable table in {filename}: {e}') from e
    return meta, frame
