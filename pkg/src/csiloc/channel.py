"""Free-space ULA channel model with optional scatterers and a walking human blocker."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import ArrayGeometry, CsiSample, Dataset

SPEED_OF_LIGHT = 299_792_458.0


def wavelength(carrier_freq: float) -> float:
    if not carrier_freq > 0:
        raise ValueError("carrier frequency must be positive")
    return SPEED_OF_LIGHT / carrier_freq


def subcarrier_freqs(geometry: ArrayGeometry) -> np.ndarray:
    K = geometry.num_subcarriers
    if K == 1:
        return np.array([geometry.carrier_freq])
    start = geometry.carrier_freq - geometry.bandwidth / 2
    return start + np.arange(K) * (geometry.bandwidth / (K - 1))


def _antenna_xyz(geometry: ArrayGeometry) -> np.ndarray:
    xy = geometry.antenna_positions()
    return np.column_stack([xy, np.full(len(xy), geometry.antenna_height)])


def _ray(distance: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    # (M,) path lengths -> (M, K) coefficients with 1/d amplitude and delay phase
    return np.exp(-2j * np.pi * np.outer(distance, freqs) / SPEED_OF_LIGHT) / distance[:, None]


def los_csi(geometry: ArrayGeometry, user_pos, scenario_id: int = 0) -> CsiSample:
    user = np.array([user_pos[0], user_pos[1], geometry.user_height], dtype=np.float64)
    d = np.linalg.norm(_antenna_xyz(geometry) - user, axis=1)
    if np.any(d == 0):
        raise ValueError("user position coincides with an antenna")
    return CsiSample(_ray(d, subcarrier_freqs(geometry)), np.asarray(user_pos, dtype=np.float64), scenario_id)


@dataclass
class SimConfig:
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry)
    room_bounds: tuple[float, float, float, float] = (0.0, 0.0, 6.0, 6.0)  # xmin, ymin, xmax, ymax
    user_positions: list = field(default_factory=list)
    samples_per_position: int = 500
    num_reflectors: int = 0
    reflector_gain_db: tuple[float, float] = (-20.0, -10.0)
    noise_snr_db: float = float("inf")
    seed: int = 0
    sample_interval: float = 0.05  # seconds between consecutive samples of one user
    min_user_separation: float = 1.5
    reflector_height: float = 1.0

    def __post_init__(self):
        self.room_bounds = tuple(float(v) for v in self.room_bounds)
        self.user_positions = [tuple(float(c) for c in p) for p in self.user_positions]
        self.reflector_gain_db = tuple(float(v) for v in self.reflector_gain_db)
        self.validate()

    def validate(self):
        xmin, ymin, xmax, ymax = self.room_bounds
        if not (xmax > xmin and ymax > ymin):
            raise ValueError("room_bounds must be (xmin, ymin, xmax, ymax) with positive extent")
        for p in self.user_positions:
            if not inside(self.room_bounds, p):
                raise ValueError(f"user position {p} outside room bounds {self.room_bounds}")
        pts = np.asarray(self.user_positions, dtype=np.float64).reshape(-1, 2)
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                if np.linalg.norm(pts[i] - pts[j]) < self.min_user_separation:
                    raise ValueError(
                        f"users {i} and {j} are closer than {self.min_user_separation} m"
                    )
        if self.samples_per_position < 1:
            raise ValueError("samples_per_position must be >= 1")
        if self.num_reflectors < 0:
            raise ValueError("num_reflectors must be >= 0")
        lo, hi = self.reflector_gain_db
        if lo > hi:
            raise ValueError("reflector_gain_db must be (low, high) with low <= high")
        if self.sample_interval <= 0:
            raise ValueError("sample_interval must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geometry"] = self.geometry.to_dict()
        d["user_positions"] = [list(p) for p in self.user_positions]
        for key in ("room_bounds", "reflector_gain_db"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "geometry" in d:
            d["geometry"] = ArrayGeometry.from_dict(d["geometry"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class BlockerTrajectory:
    endpoint_a: tuple[float, float]
    endpoint_b: tuple[float, float]
    speed: float = 1.0
    radius: float = 0.3
    loss_db_range: tuple[float, float] = (10.0, 20.0)
    # gain range (dB, relative to LoS) of a ray reflected off the walker's body; None disables it
    scatter_db: tuple[float, float] | None = None
    body_height: float = 1.0

    def __post_init__(self):
        if self.scatter_db is not None:
            self.scatter_db = tuple(float(v) for v in self.scatter_db)
        self.endpoint_a = tuple(float(v) for v in self.endpoint_a)
        self.endpoint_b = tuple(float(v) for v in self.endpoint_b)
        self.loss_db_range = tuple(float(v) for v in self.loss_db_range)
        lo, hi = self.loss_db_range
        if self.speed <= 0 or self.radius <= 0:
            raise ValueError("speed and radius must be positive")
        if not 0 < lo <= hi:
            raise ValueError("loss_db_range must satisfy 0 < min <= max")

    @property
    def length(self) -> float:
        return float(np.hypot(self.endpoint_b[0] - self.endpoint_a[0], self.endpoint_b[1] - self.endpoint_a[1]))

    @property
    def period(self) -> float:
        return 2 * self.length / self.speed

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "BlockerTrajectory":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "BlockerTrajectory":
        return cls.from_dict(json.loads(Path(path).read_text()))


def inside(bounds, p) -> bool:
    xmin, ymin, xmax, ymax = bounds
    return xmin <= p[0] <= xmax and ymin <= p[1] <= ymax


def add_multipath(sample: CsiSample, config: SimConfig, rng: np.random.Generator) -> CsiSample:
    """Add ``config.num_reflectors`` single-bounce rays through random scatter points.

    Each ray's amplitude is the LoS amplitude of that antenna scaled by a gain
    drawn uniformly (in dB) from ``config.reflector_gain_db``.
    """
    R = config.num_reflectors
    if R == 0:
        return sample
    geom = config.geometry
    xmin, ymin, xmax, ymax = config.room_bounds
    ant = _antenna_xyz(geom)
    user = np.array([sample.position[0], sample.position[1], geom.user_height])
    d_los = np.linalg.norm(ant - user, axis=1)
    freqs = subcarrier_freqs(geom)
    h = np.array(sample.h, dtype=np.complex128)
    for _ in range(R):
        scatter = np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax), config.reflector_height])
        gain_db = rng.uniform(*config.reflector_gain_db)
        path = np.linalg.norm(scatter - user) + np.linalg.norm(ant - scatter, axis=1)
        amp = 10 ** (gain_db / 20) / d_los
        h += amp[:, None] * np.exp(-2j * np.pi * np.outer(path, freqs) / SPEED_OF_LIGHT)
    return sample.replace(h)


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # p: (2,), a: (2,), b: (M, 2)
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.where(denom > 0, ((p - a) @ ab.T) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(closest - p, axis=1)


def blocked_antennas(geometry: ArrayGeometry, user_pos, blocker_pos, radius: float) -> np.ndarray:
    d = _point_segment_distance(
        np.asarray(blocker_pos, dtype=np.float64),
        np.asarray(user_pos, dtype=np.float64),
        geometry.antenna_positions(),
    )
    return d <= radius


def apply_blocker(sample: CsiSample, geometry: ArrayGeometry, user_pos, blocker_pos,
                  traj: BlockerTrajectory, rng: np.random.Generator):
    """Attenuate antennas whose floor-plane path to the user passes within the blocker radius.

    One loss value per sample is drawn from ``traj.loss_db_range``. Returns the
    new sample and the boolean mask of blocked antennas.
    """
    mask = blocked_antennas(geometry, user_pos, blocker_pos, traj.radius)
    loss_db = rng.uniform(*traj.loss_db_range)
    if not mask.any():
        return sample, mask
    h = np.array(sample.h)
    h[mask] *= 10 ** (-loss_db / 20)
    return sample.replace(h), mask


def add_body_reflection(sample: CsiSample, geometry: ArrayGeometry, blocker_pos,
                        traj: BlockerTrajectory, rng: np.random.Generator) -> CsiSample:
    """Add one single-bounce ray user -> walker -> antenna, gain drawn from ``traj.scatter_db``."""
    ant = _antenna_xyz(geometry)
    user = np.array([sample.position[0], sample.position[1], geometry.user_height])
    body = np.array([blocker_pos[0], blocker_pos[1], traj.body_height])
    d_los = np.linalg.norm(ant - user, axis=1)
    path = np.linalg.norm(body - user) + np.linalg.norm(ant - body, axis=1)
    amp = 10 ** (rng.uniform(*traj.scatter_db) / 20) / d_los
    freqs = subcarrier_freqs(geometry)
    h = sample.h + amp[:, None] * np.exp(-2j * np.pi * np.outer(path, freqs) / SPEED_OF_LIGHT)
    return sample.replace(h)


def blocker_position(traj: BlockerTrajectory, t: float) -> np.ndarray:
    if t < 0:
        raise ValueError("t must be nonnegative")
    a = np.asarray(traj.endpoint_a)
    b = np.asarray(traj.endpoint_b)
    length = traj.length
    if length == 0:
        return a.copy()
    s = (t * traj.speed) % (2 * length)
    frac = s / length if s <= length else (2 * length - s) / length
    return a + frac * (b - a)


def add_awgn(h: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    if np.isinf(snr_db) and snr_db > 0:
        return h
    signal_power = float(np.mean(np.abs(h) ** 2))
    noise_power = signal_power * 10 ** (-snr_db / 10)
    sigma = np.sqrt(noise_power / 2)
    noise = rng.normal(0.0, sigma, h.shape) + 1j * rng.normal(0.0, sigma, h.shape)
    return h + noise


def _environment_rng(seed: int) -> np.random.Generator:
    # same stream for every sample: scatterers are part of the room, not of the snapshot
    return np.random.default_rng([seed, 0x5CA7])


def simulate(config: SimConfig, trajectory: BlockerTrajectory | None = None,
             snr_db: float | None = None, scenario_id: int | None = None,
             return_masks: bool = False):
    """Generate one scenario: every user position sampled at uniformly spaced times.

    Sample ``i`` of a user is taken at ``t = i * config.sample_interval``. All
    randomness comes from per-sample substreams keyed by (seed, scenario, user, i).
    """
    config.validate()
    if snr_db is None:
        snr_db = config.noise_snr_db
    if scenario_id is None:
        scenario_id = 0 if trajectory is None else 1
    if trajectory is not None and scenario_id == 0:
        raise ValueError("scenario_id 0 is reserved for the static scenario")
    if trajectory is not None:
        for p in (trajectory.endpoint_a, trajectory.endpoint_b):
            if not inside(config.room_bounds, p):
                raise ValueError(f"trajectory endpoint {p} outside room bounds")
    if not config.user_positions:
        raise ValueError("config has no user positions")

    geom = config.geometry
    samples = []
    masks = []
    for u, pos in enumerate(config.user_positions):
        clean = add_multipath(los_csi(geom, pos, scenario_id), config, _environment_rng(config.seed))
        for i in range(config.samples_per_position):
            rng = np.random.default_rng([config.seed, scenario_id, u, i])
            s = clean
            mask = np.zeros(geom.num_antennas, dtype=bool)
            if trajectory is not None:
                bpos = blocker_position(trajectory, i * config.sample_interval)
                s, mask = apply_blocker(s, geom, pos, bpos, trajectory, rng)
                if trajectory.scatter_db is not None:
                    s = add_body_reflection(s, geom, bpos, trajectory, rng)
            h = add_awgn(s.h, snr_db, rng)
            samples.append(CsiSample(h.astype(np.complex64), np.asarray(pos, dtype=np.float64), scenario_id))
            masks.append(mask)
    ds = Dataset(geom, tuple(samples))
    if return_masks:
        return ds, np.array(masks)
    return ds


def desk_geometry() -> ArrayGeometry:
    return ArrayGeometry(
        num_antennas=16,
        num_subcarriers=16,
        array_origin=(2.475, 0.3),
        array_axis=(1.0, 0.0),
    )


def desk_config(seed: int = 0, samples_per_position: int = 500, snr_db: float = 20.0) -> SimConfig:
    """6 m x 6 m room, 16x16 array on the south wall, four users >= 1.5 m apart."""
    return SimConfig(
        geometry=desk_geometry(),
        room_bounds=(0.0, 0.0, 6.0, 6.0),
        user_positions=[(1.3, 2.6), (2.9, 2.2), (4.5, 2.7), (3.2, 4.3)],
        samples_per_position=samples_per_position,
        num_reflectors=4,
        reflector_gain_db=(-15.0, -6.0),
        noise_snr_db=snr_db,
        seed=seed,
    )


def desk_trajectories() -> list[BlockerTrajectory]:
    """Walks crossing the user-array corridor, one near the array and one mid-room."""
    return [
        BlockerTrajectory((0.6, 1.0), (5.4, 1.0), speed=1.2),
        BlockerTrajectory((1.0, 1.7), (5.0, 1.7), speed=1.0),
    ]
