"""Blocked-antenna augmentations: zeroing (vanilla) and random attenuation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import Dataset

METHODS = ("vanilla", "random_attenuation")


@dataclass(frozen=True)
class AugmentationSpec:
    method: str = "random_attenuation"
    sample_fraction: float = 0.5
    min_db: float = 10.0
    max_db: float = 40.0
    seed: int = 0
    per_antenna: bool = False  # one attenuation draw per selected antenna instead of per sample

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown augmentation method {self.method!r}; expected one of {METHODS}")
        if not 0 < self.sample_fraction <= 1:
            raise ValueError("sample_fraction must lie in (0, 1]")
        if not 0 < self.min_db:
            raise ValueError("min_db must be positive")
        if self.min_db > self.max_db:
            raise ValueError(f"min_db ({self.min_db}) must not exceed max_db ({self.max_db})")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, path) -> "AugmentationSpec":
        return cls(**json.loads(Path(path).read_text()))


def db_to_amplitude(db: float | np.ndarray):
    return 10.0 ** (-np.asarray(db) / 20.0)


def select_targets(train: Dataset, spec: AugmentationSpec, rng: np.random.Generator):
    """Pick floor(N * fraction) samples and, for each, a nonempty antenna subset.

    Subset size is uniform on {1..M}; members are drawn without replacement.
    """
    n = len(train)
    if n == 0:
        raise ValueError("empty dataset")
    M = train.geometry.num_antennas
    count = int(np.floor(n * spec.sample_fraction + 1e-9))
    chosen = rng.choice(n, size=count, replace=False)
    targets = []
    for idx in chosen:
        size = int(rng.integers(1, M + 1))
        antennas = np.sort(rng.choice(M, size=size, replace=False))
        targets.append((int(idx), antennas))
    return targets


def _augment(train: Dataset, spec: AugmentationSpec, rng: np.random.Generator, zero: bool):
    targets = select_targets(train, spec, rng)
    extra = []
    gains = []
    for idx, antennas in targets:
        src = train[idx]
        h = np.array(src.h)
        if zero:
            h[antennas] = 0
            gains.append(0.0)
        elif spec.per_antenna:
            g = db_to_amplitude(rng.uniform(spec.min_db, spec.max_db, size=len(antennas)))
            h[antennas] *= g[:, None].astype(h.real.dtype)
            gains.append(g)
        else:
            g = float(db_to_amplitude(rng.uniform(spec.min_db, spec.max_db)))
            h[antennas] *= h.real.dtype.type(g)
            gains.append(g)
        extra.append(src.replace(h))
    return Dataset(train.geometry, train.samples + tuple(extra)), targets, gains


def vanilla_augment(train: Dataset, spec: AugmentationSpec, rng: np.random.Generator,
                    return_details: bool = False):
    if spec.method != "vanilla":
        raise ValueError("vanilla_augment requires method='vanilla'")
    out, targets, gains = _augment(train, spec, rng, zero=True)
    return (out, targets, gains) if return_details else out


def random_attenuation_augment(train: Dataset, spec: AugmentationSpec, rng: np.random.Generator,
                               return_details: bool = False):
    if spec.method != "random_attenuation":
        raise ValueError("random_attenuation_augment requires method='random_attenuation'")
    out, targets, gains = _augment(train, spec, rng, zero=False)
    return (out, targets, gains) if return_details else out


def augment(train: Dataset, spec: AugmentationSpec) -> Dataset:
    """Apply ``spec`` with a generator seeded from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    if spec.method == "vanilla":
        return vanilla_augment(train, spec, rng)
    return random_attenuation_augment(train, spec, rng)
