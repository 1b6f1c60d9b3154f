"""Synthetic identity data and the feature/label file formats.

Feature file layout (little-endian)::

    b"FEAT" | uint32 n | uint32 dim | n*dim float32, row-major

Label file: UTF-8 CSV with header ``sample_id,identity,camera``.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import GroundTruth, ShapeMismatch, normalize_rows, validate_matrix

MAGIC = b"FEAT"
_HEADER = struct.Struct("<4sII")
_U32_MAX = 2**32 - 1
LABEL_HEADER = ("sample_id", "identity", "camera")


class FeatureFileError(ValueError):
    pass


class BadMagic(FeatureFileError):
    pass


class ShapeOverflow(FeatureFileError):
    pass


class TruncatedFile(FeatureFileError):
    pass


class LabelFileError(ValueError):
    pass


class MissingId(LabelFileError):
    pass


class DuplicateId(LabelFileError):
    pass


class NonDense(LabelFileError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 50
    samples_per_identity: int = 20
    obs_dim: int = 32
    num_cameras: int = 4
    identity_noise: float = 0.35
    camera_offset_scale: float = 0.25
    query_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("num_identities", "samples_per_identity", "obs_dim", "num_cameras"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("identity_noise", "camera_offset_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.query_fraction < 1:
            raise ValueError("query_fraction must be in [0, 1)")


@dataclass(frozen=True)
class Dataset:
    observations: np.ndarray
    gt: GroundTruth
    query_mask: np.ndarray

    def __len__(self):
        return self.observations.shape[0]


def _unit_gaussian(rng, rows, dim):
    g = rng.standard_normal((rows, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def generate(cfg):
    """Draw a dataset: unit prototypes per identity plus noise and camera shift.

    Sample ``j`` of identity ``i`` is ``normalize(mu_i + s_id * eps + delta_c)``
    with ``c = j mod num_cameras``. ``eps`` and the direction of ``delta_c``
    are standard normal divided by ``sqrt(obs_dim)``, so ``s_id`` and
    ``s_cam`` are the RMS lengths of the perturbations, comparable to the
    unit prototypes at any dimension. ``delta_c`` is drawn once per camera.
    One query is designated per (identity, camera) pair, pairs in random
    order, until ``ceil(query_fraction * n)`` queries are marked or the pairs
    run out.
    """
    rng = np.random.default_rng(cfg.seed)
    n_id, per, dim = cfg.num_identities, cfg.samples_per_identity, cfg.obs_dim
    n = n_id * per
    prototypes = _unit_gaussian(rng, n_id, dim)
    unit = 1.0 / np.sqrt(dim)
    offsets = cfg.camera_offset_scale * unit * rng.standard_normal((cfg.num_cameras, dim))
    identity = np.repeat(np.arange(n_id), per)
    camera = np.tile(np.arange(per) % cfg.num_cameras, n_id)
    noise = cfg.identity_noise * unit * rng.standard_normal((n, dim))
    obs = normalize_rows(prototypes[identity] + noise + offsets[camera])

    query_mask = np.zeros(n, dtype=bool)
    want = math.ceil(cfg.query_fraction * n)
    if want:
        pair = identity * cfg.num_cameras + camera
        pairs = np.unique(pair)
        for p in rng.permutation(pairs)[:want]:
            query_mask[rng.choice(np.flatnonzero(pair == p))] = True
    return Dataset(obs, GroundTruth(identity, camera), query_mask)


def write_features(path, F):
    """Write a feature matrix as float32 in the ``FEAT`` layout."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 1 or F.shape[1] < 1:
        raise ShapeMismatch(f"feature matrix must be non-empty 2-d, got {F.shape}")
    n, dim = F.shape
    if n > _U32_MAX or dim > _U32_MAX:
        raise ShapeOverflow(f"shape {F.shape} does not fit 32-bit header fields")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, dim))
        fh.write(np.ascontiguousarray(F, dtype="<f4").tobytes())


def read_features(path):
    """Read a ``FEAT`` file back into a float64 ``(n, dim)`` array."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise BadMagic(f"{path}: not a FEAT feature file")
    _, n, dim = _HEADER.unpack_from(data)
    expected = _HEADER.size + 4 * n * dim
    if n < 1 or dim < 1:
        raise ShapeMismatch(f"{path}: empty matrix ({n}x{dim})")
    if len(data) != expected:
        raise TruncatedFile(f"{path}: expected {expected} bytes for {n}x{dim}, found {len(data)}")
    F = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n, dim)
    return validate_matrix(F.astype(np.float64))


def write_labels(path, gt):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for i, (ident, cam) in enumerate(zip(gt.identity.tolist(), gt.camera.tolist())):
            w.writerow((i, ident, cam))


def read_labels(path):
    """Parse a label CSV into a dense :class:`GroundTruth` ordered by sample id."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != LABEL_HEADER:
            raise LabelFileError(f"{path}: header must be {','.join(LABEL_HEADER)}")
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise LabelFileError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            if not row[0].strip():
                raise MissingId(f"{path}:{lineno}: empty sample_id")
            try:
                sid, ident, cam = (int(x) for x in row)
            except ValueError as exc:
                raise LabelFileError(f"{path}:{lineno}: {exc}") from exc
            if sid in rows:
                raise DuplicateId(f"{path}:{lineno}: duplicate sample_id {sid}")
            rows[sid] = (ident, cam)
    if not rows:
        raise MissingId(f"{path}: no samples")
    n = len(rows)
    if min(rows) != 0 or max(rows) != n - 1:
        raise NonDense(f"{path}: sample ids must cover 0..{n - 1} exactly")
    identity = [rows[i][0] for i in range(n)]
    camera = [rows[i][1] for i in range(n)]
    return GroundTruth(np.array(identity), np.array(camera))
