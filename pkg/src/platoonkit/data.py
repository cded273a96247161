"""Platoon trajectory records: CSV I/O, windowing, splits, synthetic data.

Canonical CSV schema (one row per vehicle per frame, LF line endings, floats
at 9 significant digits):

    platoon_id,vehicle_index,frame,position_m,speed_mps,length_m

Vehicle 0 is the leader; indices increase rearward. Positions are front
bumpers and increase in the travel direction. The gap of follower n is
``position[n-1] - length[n-1] - position[n]`` and must stay positive.
The sampling interval is fixed at 0.1 s and is not stored in the file.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import idm

log = logging.getLogger(__name__)

DT = 0.1
CSV_FIELDS = ("platoon_id", "vehicle_index", "frame", "position_m",
              "speed_mps", "length_m")

# Follower IDM parameter ranges for the synthetic corpus.
SYNTH_IDM_RANGES = {
    "v0": (25.0, 35.0),
    "T": (1.0, 2.0),
    "s0": (1.5, 3.0),
    "a_max": (0.8, 1.5),
    "b": (1.0, 2.5),
}
SYNTH_LENGTH_RANGE = (4.2, 5.0)
SYNTH_NOISE_SIGMA = 0.1
SPEED_CAP = 40.0

PROFILE_KINDS = ("const_accel", "const_decel", "sinusoid", "piecewise")
DEFAULT_PROFILE_MIX = {
    "const_accel": 0.25,
    "const_decel": 0.25,
    "sinusoid": 0.30,
    "piecewise": 0.20,
}


class DataError(Exception):
    pass


class DataFormatError(DataError):
    """Lexically malformed input file; message names file and line."""


class GenerationError(DataError):
    pass


@dataclass(frozen=True)
class VehicleSeries:
    position: np.ndarray
    speed: np.ndarray
    length: float


@dataclass(frozen=True)
class PlatoonRecord:
    platoon_id: str
    dt: float
    vehicles: tuple

    @property
    def duration(self) -> int:
        return len(self.vehicles[0].position)

    @property
    def n_followers(self) -> int:
        return len(self.vehicles) - 1

    def positions(self) -> np.ndarray:
        return np.stack([v.position for v in self.vehicles])

    def speeds(self) -> np.ndarray:
        return np.stack([v.speed for v in self.vehicles])

    def lengths(self) -> np.ndarray:
        return np.array([v.length for v in self.vehicles])

    def gaps(self) -> np.ndarray:
        """(n_followers, T) rear-bumper-to-front-bumper gaps."""
        pos = self.positions()
        return pos[:-1] - self.lengths()[:-1, None] - pos[1:]

    def rel_speeds(self) -> np.ndarray:
        """(n_followers, T) leader-minus-follower speed differences."""
        spd = self.speeds()
        return spd[:-1] - spd[1:]

    def feature_block(self, lo: int, hi: int) -> np.ndarray:
        """(n_followers, hi-lo, 3) blocks of [speed, gap, rel_speed]."""
        spd = self.speeds()
        return np.stack([spd[1:, lo:hi], self.gaps()[:, lo:hi],
                         self.rel_speeds()[:, lo:hi]], axis=-1)


def validate_record(record: PlatoonRecord) -> Optional[str]:
    """Return a diagnostic string if the record violates an invariant."""
    if len(record.vehicles) < 2:
        return f"platoon {record.platoon_id}: needs a leader and at least one follower"
    T = record.duration
    if T < 1:
        return f"platoon {record.platoon_id}: empty series"
    for i, v in enumerate(record.vehicles):
        if len(v.position) != T or len(v.speed) != T:
            return f"platoon {record.platoon_id}: vehicle {i} series length mismatch"
        if not v.length > 0:
            return f"platoon {record.platoon_id}: vehicle {i} non-positive length"
        if np.any(v.speed < 0):
            frame = int(np.argmax(v.speed < 0))
            return (f"platoon {record.platoon_id}: vehicle {i} negative speed "
                    f"at frame {frame}")
    gaps = record.gaps()
    bad = gaps <= 0
    if bad.any():
        n, frame = np.unravel_index(int(np.argmax(bad)), bad.shape)
        return (f"platoon {record.platoon_id}: non-positive gap at frame {frame} "
                f"between vehicle {n} and vehicle {n + 1}")
    return None


# -- CSV I/O -------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def write_trajectories(records: Sequence[PlatoonRecord], path) -> None:
    """Write records to one CSV file, rows sorted by (platoon, vehicle, frame)."""
    path = Path(path)
    lines = [",".join(CSV_FIELDS)]
    for rec in sorted(records, key=lambda r: r.platoon_id):
        for vi, veh in enumerate(rec.vehicles):
            for frame in range(rec.duration):
                lines.append(
                    f"{rec.platoon_id},{vi},{frame},{_fmt(veh.position[frame])},"
                    f"{_fmt(veh.speed[frame])},{_fmt(veh.length)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _parse_file(path: Path, rows: dict) -> None:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if tuple(header) != CSV_FIELDS:
            raise DataFormatError(f"{path}: bad header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise DataFormatError(f"{path}:{lineno}: expected 6 columns, got {len(row)}")
            pid = row[0]
            try:
                vi = int(row[1])
                frame = int(row[2])
                pos = float(row[3])
                spd = float(row[4])
                length = float(row[5])
            except ValueError as e:
                raise DataFormatError(f"{path}:{lineno}: {e}") from None
            if not (np.isfinite(pos) and np.isfinite(spd) and np.isfinite(length)):
                raise DataFormatError(f"{path}:{lineno}: non-finite value")
            rows.setdefault(pid, {}).setdefault(vi, []).append((frame, pos, spd, length))


def _assemble(pid: str, by_vehicle: dict, dt: float) -> PlatoonRecord:
    """Raises DataError with a diagnostic for structurally broken platoons."""
    indices = sorted(by_vehicle)
    if indices != list(range(len(indices))):
        raise DataError(f"platoon {pid}: vehicle indices {indices} not contiguous from 0")
    series = []
    frame_range = None
    for vi in indices:
        entries = sorted(by_vehicle[vi])
        frames = [e[0] for e in entries]
        if len(set(frames)) != len(frames):
            raise DataError(f"platoon {pid}: vehicle {vi} has duplicate frames")
        if frames != list(range(frames[0], frames[0] + len(frames))):
            raise DataError(f"platoon {pid}: vehicle {vi} has missing frames")
        if frame_range is None:
            frame_range = (frames[0], frames[-1])
        elif (frames[0], frames[-1]) != frame_range:
            raise DataError(f"platoon {pid}: vehicle {vi} frame range differs")
        lengths = {e[3] for e in entries}
        if len(lengths) != 1:
            raise DataError(f"platoon {pid}: vehicle {vi} length varies across frames")
        series.append(VehicleSeries(
            position=np.array([e[1] for e in entries]),
            speed=np.array([e[2] for e in entries]),
            length=entries[0][3]))
    return PlatoonRecord(platoon_id=pid, dt=dt, vehicles=tuple(series))


def load_trajectories(path, rejects: Optional[list] = None) -> list:
    """Load platoon records from a CSV file or a directory of CSV files.

    Lexically malformed rows raise DataFormatError. Platoons violating
    structural or physical invariants are skipped; each skip appends
    (platoon_id, reason) to ``rejects`` (if given) and logs a warning.
    """
    path = Path(path)
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    if not files:
        raise DataError(f"{path}: no CSV files found")
    rows: dict = {}
    for f in files:
        _parse_file(f, rows)
    records = []
    for pid, by_vehicle in rows.items():
        try:
            record = _assemble(pid, by_vehicle, DT)
        except DataError as e:
            log.warning("rejected %s", e)
            if rejects is not None:
                rejects.append((pid, str(e)))
            continue
        reason = validate_record(record)
        if reason is not None:
            log.warning("rejected %s", reason)
            if rejects is not None:
                rejects.append((pid, reason))
            continue
        records.append(record)
    return records


# -- windowing -------------------------------------------------------------------

@dataclass(frozen=True)
class StateWindow:
    """History block plus the ground truth needed to score a prediction.

    ``history``: (N, P, 3) follower features [speed, gap, rel_speed] ending at
    the anchor frame t. ``lead_future``: (F,) leader speeds at t+1..t+F.
    ``targets``: (N, F, 2) follower [speed, gap] at t+1..t+F.
    """

    platoon_id: str
    anchor: int
    history: np.ndarray
    lead_future: np.ndarray
    targets: np.ndarray


def extract_windows(record: PlatoonRecord, history_len: int, horizon: int,
                    stride: int = 1) -> list:
    if history_len < 1 or horizon < 1 or stride < 1:
        raise ValueError("history_len, horizon, stride must be >= 1")
    P, F = history_len, horizon
    T = record.duration
    if T < P + F:
        return []
    feats = record.feature_block(0, T)          # (N, T, 3)
    lead_speed = record.vehicles[0].speed
    spd = record.speeds()[1:]                    # followers
    gaps = record.gaps()
    windows = []
    for start in range(0, T - (P + F) + 1, stride):
        anchor = start + P - 1
        history = feats[:, start:start + P, :]
        lead_future = lead_speed[anchor + 1:anchor + 1 + F]
        targets = np.stack([spd[:, anchor + 1:anchor + 1 + F],
                            gaps[:, anchor + 1:anchor + 1 + F]], axis=-1)
        windows.append(StateWindow(record.platoon_id, anchor,
                                   np.ascontiguousarray(history),
                                   lead_future.copy(), targets))
    return windows


def split_dataset(records: Sequence[PlatoonRecord], ratios=(0.7, 0.1, 0.2),
                  seed: int = 0):
    """Shuffle platoons with ``seed`` and split into (train, val, test).

    Counts: floor(r0*M), floor(r1*M + 0.5) (half-up), remainder. Every platoon
    lands in exactly one split.
    """
    r = tuple(float(x) for x in ratios)
    if len(r) != 3 or any(x < 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be 3 non-negative values summing to 1, got {ratios}")
    M = len(records)
    n_train = int(np.floor(r[0] * M))
    n_val = int(np.floor(r[1] * M + 0.5))
    if n_train + n_val > M:
        n_val = M - n_train
    perm = np.random.default_rng(seed).permutation(M)
    train = [records[i] for i in perm[:n_train]]
    val = [records[i] for i in perm[n_train:n_train + n_val]]
    test = [records[i] for i in perm[n_train + n_val:]]
    return train, val, test


# -- synthetic generation ---------------------------------------------------------

@dataclass(frozen=True)
class LeadProfile:
    """Scripted leader speed profile.

    kind: one of PROFILE_KINDS. ``accel`` drives the constant-acceleration
    kinds; ``amp``/``period_s``/``phase`` the sinusoid; ``seed`` the piecewise
    random walk.
    """

    kind: str
    v_init: float
    accel: float = 0.0
    amp: float = 0.0
    period_s: float = 10.0
    phase: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ValueError(f"unknown lead profile kind {self.kind!r}")
        if not 0.0 <= self.v_init <= SPEED_CAP:
            raise ValueError(f"v_init {self.v_init} outside [0, {SPEED_CAP}]")
        if self.kind == "sinusoid" and not 0.0 <= self.amp < self.v_init:
            raise ValueError("sinusoid amplitude must stay below v_init")


def lead_speed_series(profile: LeadProfile, frames: int, dt: float = DT) -> np.ndarray:
    t = np.arange(frames) * dt
    if profile.kind in ("const_accel", "const_decel"):
        return np.clip(profile.v_init + profile.accel * t, 0.0, SPEED_CAP)
    if profile.kind == "sinusoid":
        return profile.v_init + profile.amp * np.sin(
            2.0 * np.pi * t / profile.period_s + profile.phase)
    # piecewise: random speed targets joined by bounded-acceleration ramps
    rng = np.random.default_rng(profile.seed)
    v = np.empty(frames)
    v[0] = profile.v_init
    i = 1
    while i < frames:
        target = rng.uniform(8.0, 30.0)
        hold = int(rng.uniform(2.0, 5.0) / dt)
        ramp = rng.uniform(0.5, 1.5)
        while i < frames and abs(v[i - 1] - target) > ramp * dt:
            v[i] = v[i - 1] + np.sign(target - v[i - 1]) * ramp * dt
            i += 1
        for _ in range(hold):
            if i >= frames:
                break
            v[i] = target
            i += 1
    return np.clip(v, 0.0, SPEED_CAP)


def synthesize_platoon(platoon_id: str, profile: LeadProfile, params: list,
                       lengths, noise_sigma: float, noise_seed: int,
                       duration_steps: int, dt: float = DT) -> PlatoonRecord:
    """Integrate IDM followers behind the scripted leader; raises
    GenerationError if any gap collapses."""
    lead = lead_speed_series(profile, duration_steps, dt)
    lengths = np.asarray(lengths, dtype=float)
    n = len(params) + 1
    if lengths.shape != (n,):
        raise ValueError(f"lengths must have shape {(n,)}")
    pos = np.zeros(n)
    spd = np.zeros(n)
    spd[0] = lead[0]
    for i, p in enumerate(params, start=1):
        v_eq = min(lead[0], 0.9 * p.v0)
        spd[i] = v_eq
        pos[i] = pos[i - 1] - lengths[i - 1] - idm.equilibrium_gap(v_eq, p)
    noise = None
    if noise_sigma > 0.0:
        noise = np.random.default_rng(noise_seed).normal(
            0.0, noise_sigma, (duration_steps - 1, len(params)))
    sim = idm.simulate_idm_platoon(lead, pos, spd, lengths, params, dt, noise)
    if sim.collision_frame is not None:
        raise GenerationError(
            f"platoon {platoon_id}: gap collapsed at frame {sim.collision_frame}")
    vehicles = tuple(
        VehicleSeries(sim.positions[i].copy(), sim.speeds[i].copy(), float(lengths[i]))
        for i in range(n))
    return PlatoonRecord(platoon_id, dt, vehicles)


def _sample_profile(rng: np.random.Generator, mix: dict) -> LeadProfile:
    kinds = sorted(mix)
    probs = np.array([mix[k] for k in kinds], dtype=float)
    probs = probs / probs.sum()
    kind = kinds[int(rng.choice(len(kinds), p=probs))]
    if kind == "const_accel":
        return LeadProfile(kind, v_init=rng.uniform(12.0, 25.0),
                           accel=rng.uniform(0.3, 1.2))
    if kind == "const_decel":
        return LeadProfile(kind, v_init=rng.uniform(20.0, 32.0),
                           accel=-rng.uniform(0.4, 1.5))
    if kind == "sinusoid":
        v = rng.uniform(15.0, 28.0)
        return LeadProfile(kind, v_init=v, amp=rng.uniform(1.0, 4.0),
                           period_s=rng.uniform(5.0, 15.0),
                           phase=rng.uniform(0.0, 2.0 * np.pi))
    return LeadProfile("piecewise", v_init=rng.uniform(10.0, 28.0),
                       seed=int(rng.integers(0, 2 ** 31)))


def _sample_idm_params(rng: np.random.Generator) -> idm.IdmParams:
    return idm.IdmParams(
        v0=rng.uniform(*SYNTH_IDM_RANGES["v0"]),
        T=rng.uniform(*SYNTH_IDM_RANGES["T"]),
        s0=rng.uniform(*SYNTH_IDM_RANGES["s0"]),
        a_max=rng.uniform(*SYNTH_IDM_RANGES["a_max"]),
        b=rng.uniform(*SYNTH_IDM_RANGES["b"]),
    )


def generate_synthetic_platoons(count: int, n_followers: int = 6,
                                duration_s: float = 15.0, seed: int = 0,
                                profile_mix: Optional[dict] = None,
                                noise_sigma: float = SYNTH_NOISE_SIGMA,
                                dt: float = DT) -> list:
    """Deterministic synthetic corpus: scripted leaders, noisy IDM followers.

    Each platoon draws from its own SeedSequence-spawned stream, so the output
    is reproducible for a given (count, seed) regardless of retry behavior.
    """
    if count < 1 or n_followers < 1:
        raise ValueError("count and n_followers must be >= 1")
    mix = dict(DEFAULT_PROFILE_MIX if profile_mix is None else profile_mix)
    unknown = set(mix) - set(PROFILE_KINDS)
    if unknown:
        raise ValueError(f"unknown profile kinds {sorted(unknown)}")
    duration_steps = int(round(duration_s / dt))
    if duration_steps < 2:
        raise ValueError("duration too short")
    records = []
    children = np.random.SeedSequence(seed).spawn(count)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        pid = f"syn-{seed}-{i:04d}"
        for attempt in range(25):
            profile = _sample_profile(rng, mix)
            params = [_sample_idm_params(rng) for _ in range(n_followers)]
            lengths = rng.uniform(*SYNTH_LENGTH_RANGE, n_followers + 1)
            noise_seed = int(rng.integers(0, 2 ** 31))
            try:
                records.append(synthesize_platoon(
                    pid, profile, params, lengths, noise_sigma, noise_seed,
                    duration_steps, dt))
                break
            except GenerationError:
                continue
        else:
            raise GenerationError(f"platoon {pid}: no valid draw in 25 attempts")
    return records


def follower_observation(record: PlatoonRecord, vehicle_index: int,
                         start: int = 0, stop: Optional[int] = None) -> idm.FollowerObservation:
    """Adapter: slice one follower (and its leader) for IDM calibration."""
    if not 1 <= vehicle_index <= record.n_followers:
        raise ValueError(f"vehicle_index {vehicle_index} is not a follower "
                         f"(1..{record.n_followers})")
    stop = record.duration if stop is None else stop
    lead = record.vehicles[vehicle_index - 1]
    ego = record.vehicles[vehicle_index]
    return idm.FollowerObservation(
        dt=record.dt,
        lead_positions=lead.position[start:stop].copy(),
        lead_speeds=lead.speed[start:stop].copy(),
        lead_length=lead.length,
        positions=ego.position[start:stop].copy(),
        speeds=ego.speed[start:stop].copy())
