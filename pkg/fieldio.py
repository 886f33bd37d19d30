import numpy as np
import torch
from dataclasses import dataclass
from pathlib import Path

from fields import Grid, VelocityField, leray_project, forward_transform, NORMALIZATION
from utils import ArtifactError


SNAPSHOT_MAGIC = 20251016
SNAPSHOT_VERSION = 1
HEADER_INTS = 256
NORMALIZATION_TAGS = {'l2-box': 1}


@dataclass(frozen=True, eq=False)
class Snapshot:
    values: np.ndarray  # (components, n, n) float64
    box_length: float
    normalization: str

    @property
    def n(self):
        return self.values.shape[-1]


def encode_snapshot(values, box_length: float, normalization: str = NORMALIZATION) -> bytes:
    """
    Field snapshot layout:
    - header of 256 int32: magic, version, n, components, normalization tag,
      box length as a float64 in slots 8-9
    - then little-endian float64 physical values, component-major, row-major
    """
    values = np.ascontiguousarray(np.asarray(values, dtype='<f8'))
    if values.ndim == 2:
        values = values[None]
    assert values.ndim == 3 and values.shape[1] == values.shape[2], f'bad snapshot shape {values.shape}'
    header = np.zeros(HEADER_INTS, dtype='<i4')
    header[0] = SNAPSHOT_MAGIC
    header[1] = SNAPSHOT_VERSION
    header[2] = values.shape[-1]
    header[3] = values.shape[0]
    header[4] = NORMALIZATION_TAGS[normalization]
    header[8:10].view('<f8')[0] = box_length
    return header.tobytes() + values.tobytes(order='C')


def decode_snapshot(raw: bytes) -> Snapshot:
    if len(raw) < HEADER_INTS * 4:
        raise ArtifactError('snapshot shorter than its header')
    header = np.frombuffer(raw[:HEADER_INTS * 4], dtype='<i4')
    if header[0] != SNAPSHOT_MAGIC:
        raise ArtifactError('magic number mismatch in the snapshot file')
    if header[1] != SNAPSHOT_VERSION:
        raise ArtifactError(f'unsupported snapshot version {header[1]}')
    n, components = int(header[2]), int(header[3])
    tags = {v: k for k, v in NORMALIZATION_TAGS.items()}
    if int(header[4]) not in tags:
        raise ArtifactError(f'unknown normalization tag {header[4]}')
    box_length = float(header[8:10].copy().view('<f8')[0])
    body = raw[HEADER_INTS * 4:]
    if len(body) != components * n * n * 8:
        raise ArtifactError(f'snapshot body has {len(body)} bytes, header claims {components * n * n * 8}')
    values = np.frombuffer(body, dtype='<f8').reshape(components, n, n).copy()
    return Snapshot(values, box_length, tags[int(header[4])])


def write_snapshot(filename, field: VelocityField):
    filename = Path(filename)
    filename.parent.mkdir(parents=True, exist_ok=True)
    with filename.open('wb') as f:
        f.write(encode_snapshot(field.physical().numpy(), field.grid.box_length))


def write_values(filename, values, box_length: float):
    filename = Path(filename)
    filename.parent.mkdir(parents=True, exist_ok=True)
    with filename.open('wb') as f:
        f.write(encode_snapshot(values, box_length))


def read_snapshot(filename) -> Snapshot:
    filename = Path(filename)
    if not filename.exists():
        raise ArtifactError(f'missing snapshot {filename}')
    with filename.open('rb', buffering=0) as f:
        return decode_snapshot(f.read())


def snapshot_to_velocity(snapshot: Snapshot, dealias_factor: float = 1.5) -> VelocityField:
    if snapshot.values.shape[0] != 2:
        raise ArtifactError(f'velocity snapshot needs 2 components, got {snapshot.values.shape[0]}')
    grid = Grid(snapshot.n, snapshot.box_length, dealias_factor)
    return leray_project(forward_transform(torch.from_numpy(snapshot.values), grid), grid)
