"""Domain types, the CSID dataset container, normalization and splitting."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"CSID"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_RECORD_HEAD = struct.Struct("<II")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ArrayGeometry:
    num_antennas: int = 64
    num_subcarriers: int = 100
    antenna_spacing: float = 0.070
    carrier_freq: float = 2.61e9
    bandwidth: float = 20e6
    array_origin: tuple[float, float] = (0.0, 0.0)
    array_axis: tuple[float, float] = (1.0, 0.0)
    antenna_height: float = 0.93
    user_height: float = 0.20

    def __post_init__(self):
        if self.num_antennas < 1 or self.num_subcarriers < 1:
            raise ValueError("num_antennas and num_subcarriers must be >= 1")
        if self.antenna_spacing <= 0 or self.carrier_freq <= 0 or self.bandwidth <= 0:
            raise ValueError("spacing, carrier_freq and bandwidth must be positive")
        if abs(float(np.hypot(*self.array_axis)) - 1.0) > 1e-9:
            raise ValueError("array_axis must be a unit vector")
        object.__setattr__(self, "array_origin", tuple(float(v) for v in self.array_origin))
        object.__setattr__(self, "array_axis", tuple(float(v) for v in self.array_axis))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_antennas, self.num_subcarriers)

    def antenna_positions(self) -> np.ndarray:
        """Floor-plane (x, y) of every antenna, shape (M, 2)."""
        offsets = np.arange(self.num_antennas) * self.antenna_spacing
        return np.asarray(self.array_origin) + offsets[:, None] * np.asarray(self.array_axis)

    def to_dict(self) -> dict:
        return {
            "num_antennas": self.num_antennas,
            "num_subcarriers": self.num_subcarriers,
            "antenna_spacing": self.antenna_spacing,
            "carrier_freq": self.carrier_freq,
            "bandwidth": self.bandwidth,
            "array_origin": list(self.array_origin),
            "array_axis": list(self.array_axis),
            "antenna_height": self.antenna_height,
            "user_height": self.user_height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArrayGeometry":
        d = dict(d)
        for key in ("array_origin", "array_axis"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class CsiSample:
    h: np.ndarray
    position: np.ndarray
    scenario_id: int = 0

    def __post_init__(self):
        h = np.asarray(self.h)
        if h.ndim != 2:
            raise ValueError(f"CSI must be a 2-D antennas x subcarriers matrix, got shape {h.shape}")
        if not np.all(np.isfinite(h)):
            raise ValueError("CSI contains non-finite entries")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, CsiSample):
            return NotImplemented
        return (
            self.scenario_id == other.scenario_id
            and self.h.shape == other.h.shape
            and np.array_equal(self.h, other.h)
            and np.array_equal(self.position, other.position)
        )

    def replace(self, h: np.ndarray) -> "CsiSample":
        return CsiSample(h, self.position.copy(), self.scenario_id)


@dataclass(frozen=True, eq=False)
class Dataset:
    geometry: ArrayGeometry
    samples: tuple[CsiSample, ...] = field(default_factory=tuple)

    def __post_init__(self):
        samples = tuple(self.samples)
        for i, s in enumerate(samples):
            if s.h.shape != self.geometry.shape:
                raise ValueError(
                    f"sample {i} has shape {s.h.shape}, geometry expects {self.geometry.shape}"
                )
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[CsiSample]:
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.geometry == other.geometry and self.samples == other.samples

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(self.geometry, tuple(self.samples[i] for i in indices))

    def csi(self) -> np.ndarray:
        """Stacked CSI, shape (N, M, K)."""
        return np.stack([s.h for s in self.samples])

    def positions(self) -> np.ndarray:
        return np.stack([s.position for s in self.samples])

    def scenario_ids(self) -> np.ndarray:
        return np.array([s.scenario_id for s in self.samples], dtype=np.int64)

    def concat(self, other: "Dataset") -> "Dataset":
        if other.geometry.shape != self.geometry.shape:
            raise ValueError("cannot concatenate datasets with different dimensions")
        return Dataset(self.geometry, self.samples + other.samples)


def write_dataset(ds: Dataset, path, pos_dim: int | None = None) -> None:
    """Write ``ds`` as a CSID container. CSI is stored as complex64."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if pos_dim is None:
        pos_dim = int(ds.samples[0].position.shape[0])
    if pos_dim not in (2, 3):
        raise ValueError(f"pos_dim must be 2 or 3, got {pos_dim}")
    M, K = ds.geometry.shape
    parts = [_HEADER.pack(MAGIC, VERSION, M, K, len(ds), pos_dim)]
    for s in ds:
        if s.position.shape != (pos_dim,):
            raise ValueError(f"position shape {s.position.shape} does not match pos_dim={pos_dim}")
        parts.append(_RECORD_HEAD.pack(int(s.scenario_id), 0))
        parts.append(s.position.astype("<f4").tobytes())
        parts.append(np.ascontiguousarray(s.h, dtype="<c8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def record_size(M: int, K: int, pos_dim: int = 2) -> int:
    return _RECORD_HEAD.size + 4 * pos_dim + M * K * 8


def load_dataset(path, geometry: ArrayGeometry | None = None) -> Dataset:
    """Read a CSID container.

    The container stores only M and K. Other geometry fields come from
    ``geometry`` when given, otherwise from the ArrayGeometry defaults.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise DatasetFormatError("bad magic")
    if len(buf) < _HEADER.size:
        raise DatasetFormatError("truncated header")
    _, version, M, K, N, pos_dim = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise DatasetFormatError(f"version mismatch: file has {version}, reader supports {VERSION}")
    rec = record_size(M, K, pos_dim)
    expected = _HEADER.size + N * rec
    if len(buf) < expected:
        raise DatasetFormatError("truncated payload")
    if len(buf) > expected:
        raise DatasetFormatError(f"size mismatch: {len(buf) - expected} trailing bytes")

    if geometry is None:
        geometry = ArrayGeometry(num_antennas=M, num_subcarriers=K)
    elif geometry.shape != (M, K):
        raise DatasetFormatError(
            f"dimension mismatch: file has M={M}, K={K}, geometry has "
            f"M={geometry.num_antennas}, K={geometry.num_subcarriers}"
        )

    samples = []
    off = _HEADER.size
    for _ in range(N):
        scenario_id, _reserved = _RECORD_HEAD.unpack_from(buf, off)
        off += _RECORD_HEAD.size
        pos = np.frombuffer(buf, dtype="<f4", count=pos_dim, offset=off).astype(np.float64)
        off += 4 * pos_dim
        h = np.frombuffer(buf, dtype="<c8", count=M * K, offset=off).reshape(M, K).astype(np.complex64)
        off += M * K * 8
        samples.append(CsiSample(h, pos, scenario_id))
    return Dataset(geometry, tuple(samples))


@dataclass(frozen=True)
class Normalizer:
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("normalizer scale must be positive")

    def apply(self, h: np.ndarray) -> np.ndarray:
        return h / self.scale

    def normalize(self, ds: Dataset) -> Dataset:
        return Dataset(ds.geometry, tuple(s.replace(self.apply(s.h)) for s in ds))


def compute_normalizer(train: Dataset) -> Normalizer:
    if len(train) == 0:
        raise ValueError("empty dataset")
    scale = max(float(np.max(np.abs(s.h))) for s in train)
    if scale == 0.0:
        raise ValueError("degenerate normalizer: all CSI entries are zero")
    return Normalizer(scale)


def split_dataset(ds: Dataset, ratios=(0.70, 0.15, 0.15), seed: int = 0):
    """Shuffle globally and cut into train/val/test.

    Sizes are floor(N*r_train), floor(N*r_val) and the remainder.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be three positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(ds)
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    # small epsilon so 100*0.7 lands on 70 rather than 69
    n_train = int(np.floor(n * ratios[0] + 1e-9))
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    idx_train = perm[:n_train]
    idx_val = perm[n_train:n_train + n_val]
    idx_test = perm[n_train + n_val:]
    return ds.subset(idx_train), ds.subset(idx_val), ds.subset(idx_test)
