"""Traffic tables, road graphs, splits, windows, sensor selection, synthesis."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

INTERVAL_MINUTES = 5
INTERVALS_PER_DAY = 288
DAYS_PER_WEEK = 7


class DataError(ValueError):
    """Malformed or degenerate input data."""


@dataclass(frozen=True)
class TrafficTable:
    values: np.ndarray  # (n_locations, n_intervals)
    start_epoch: datetime
    interval_minutes: int = INTERVAL_MINUTES

    @property
    def n_locations(self):
        return self.values.shape[0]

    @property
    def n_intervals(self):
        return self.values.shape[1]

    @property
    def start_offset(self) -> int:
        """Interval index of ``start_epoch`` within its day."""
        s = self.start_epoch
        return (s.hour * 60 + s.minute) // self.interval_minutes

    def calendar(self, index):
        """(time-of-day, day-of-week) of a local interval index."""
        g = np.asarray(index) + self.start_offset
        tod = g % INTERVALS_PER_DAY
        dow = (g // INTERVALS_PER_DAY + self.start_epoch.weekday()) % DAYS_PER_WEEK
        return tod, dow

    def slice(self, start, stop) -> "TrafficTable":
        epoch = self.start_epoch + timedelta(minutes=self.interval_minutes * start)
        return TrafficTable(self.values[:, start:stop], epoch, self.interval_minutes)


@dataclass(frozen=True)
class RoadGraph:
    adjacency: np.ndarray

    @property
    def n_locations(self):
        return self.adjacency.shape[0]

    @classmethod
    def from_edges(cls, n, edges):
        A = np.zeros((n, n))
        for i, j in edges:
            if i != j:
                A[i, j] = A[j, i] = 1.0
        return cls(A)


@dataclass(frozen=True)
class SensingPartition:
    sensed: tuple[int, ...]
    unsensed: tuple[int, ...]

    def __post_init__(self):
        s, u = set(self.sensed), set(self.unsensed)
        if not self.sensed or not self.unsensed:
            raise DataError("both sensed and unsensed sets must be non-empty")
        if s & u or len(s) != len(self.sensed) or len(u) != len(self.unsensed):
            raise DataError("sensed and unsensed sets must be disjoint and duplicate-free")
        if s | u != set(range(len(s) + len(u))):
            raise DataError("partition must cover locations 0..n-1")

    @property
    def n(self):
        return len(self.sensed) + len(self.unsensed)

    @property
    def m(self):
        return len(self.sensed)

    @property
    def m_prime(self):
        return len(self.unsensed)

    @property
    def all(self) -> np.ndarray:
        """Location ids in ``[sensed; unsensed]`` order."""
        return np.array(self.sensed + self.unsensed, dtype=np.intp)

    def save(self, path):
        Path(path).write_text(
            "sensed: " + ",".join(map(str, self.sensed)) + "\n"
            "unsensed: " + ",".join(map(str, self.unsensed)) + "\n")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text().splitlines()
        fields = {}
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            key, sep, rest = line.partition(":")
            if not sep or key.strip() not in ("sensed", "unsensed"):
                raise DataError(f"{path}:{lineno}: expected 'sensed:' or 'unsensed:' line")
            try:
                fields[key.strip()] = tuple(int(t) for t in rest.split(",") if t.strip())
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
        if set(fields) != {"sensed", "unsensed"}:
            raise DataError(f"{path}: partition file needs both sensed and unsensed lines")
        return cls(fields["sensed"], fields["unsensed"])


@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float

    def forward(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def inverse(self, x):
        return np.asarray(x) * self.std + self.mean


def transform(norm: Normalizer, x, direction="forward"):
    if direction == "forward":
        return norm.forward(x)
    if direction == "inverse":
        return norm.inverse(x)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def fit_normalizer(train_values) -> Normalizer:
    v = np.asarray(train_values, dtype=np.float64)
    std = float(v.std())
    if not std > 0:
        raise DataError("cannot fit a z-score on constant training data")
    return Normalizer(float(v.mean()), std)


@dataclass(frozen=True)
class WindowSample:
    x_M_T: np.ndarray
    x_Mp_T: np.ndarray
    x_M_Tp: np.ndarray
    x_Mp_Tp: np.ndarray
    tod_index: int
    dow_index: int


@dataclass
class WindowArrays:
    """A stack of windows, batched along axis 0."""

    x_M_T: np.ndarray
    x_Mp_T: np.ndarray
    x_M_Tp: np.ndarray
    x_Mp_Tp: np.ndarray
    tod: np.ndarray
    dow: np.ndarray

    def __len__(self):
        return len(self.tod)

    def take(self, idx) -> "WindowArrays":
        return WindowArrays(*(getattr(self, f)[idx] for f in
                              ("x_M_T", "x_Mp_T", "x_M_Tp", "x_Mp_Tp", "tod", "dow")))

    def mapped(self, fn) -> "WindowArrays":
        """Apply ``fn`` to every flow block, keeping calendar indices."""
        return WindowArrays(fn(self.x_M_T), fn(self.x_Mp_T), fn(self.x_M_Tp), fn(self.x_Mp_Tp),
                            self.tod, self.dow)


# ---------------------------------------------------------------- loading

def load_traffic_table(path) -> TrafficTable:
    path = Path(path)
    rows, stamps = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0].strip() != "timestamp":
            raise DataError(f"{path}:1: header must start with 'timestamp'")
        n = len(header) - 1
        if n < 1:
            raise DataError(f"{path}:1: no location columns")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != n + 1:
                raise DataError(f"{path}:{lineno}: expected {n + 1} cells, got {len(row)}")
            try:
                stamps.append(datetime.fromisoformat(row[0].strip()))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from None
            try:
                vals = [float(c) for c in row[1:]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric or missing flow value") from None
            if not all(np.isfinite(vals)):
                raise DataError(f"{path}:{lineno}: non-finite flow value")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    step = timedelta(minutes=INTERVAL_MINUTES)
    for k in range(1, len(stamps)):
        if stamps[k] - stamps[k - 1] != step:
            raise DataError(f"{path}:{k + 2}: timestamps must advance by {INTERVAL_MINUTES} minutes")
    return TrafficTable(np.array(rows).T.copy(), stamps[0])


def save_traffic_table(table: TrafficTable, path):
    step = timedelta(minutes=table.interval_minutes)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp"] + [f"loc_{i}" for i in range(table.n_locations)])
        for t in range(table.n_intervals):
            stamp = (table.start_epoch + t * step).isoformat()
            w.writerow([stamp] + [repr(float(v)) for v in table.values[:, t]])


def load_adjacency(path, n) -> RoadGraph:
    edges = []
    with Path(path).open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 'i,j'")
            try:
                i, j = int(row[0]), int(row[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer endpoint") from None
            if not (0 <= i < n and 0 <= j < n):
                raise DataError(f"{path}:{lineno}: edge ({i},{j}) out of range for n={n}")
            edges.append((i, j))
    return RoadGraph.from_edges(n, edges)


def save_adjacency(graph: RoadGraph, path):
    A = graph.adjacency
    with Path(path).open("w") as fh:
        for i, j in zip(*np.nonzero(np.triu(A, 1))):
            fh.write(f"{i},{j}\n")


# ---------------------------------------------------------------- split & windows

def split_sizes(T):
    train, val = int(np.floor(0.6 * T)), int(np.floor(0.2 * T))
    return train, val, T - train - val


def chronological_split(table: TrafficTable, min_length=1):
    """3:1:1 contiguous train/val/test split; remainder goes to test."""
    tr, va, te = split_sizes(table.n_intervals)
    if min(tr, va, te) < min_length:
        raise DataError(
            f"{table.n_intervals} intervals give split sizes {tr}/{va}/{te}, "
            f"each part needs at least {min_length}")
    return (table.slice(0, tr), table.slice(tr, tr + va), table.slice(tr + va, table.n_intervals))


def window_starts(length, l, l_prime, stride=1):
    return np.arange(0, max(length - l - l_prime + 1, 0), stride)


def make_windows(table: TrafficTable, partition: SensingPartition, l=12, l_prime=96, stride=1):
    starts = window_starts(table.n_intervals, l, l_prime, stride)
    if len(starts) == 0:
        log.warning("split of %d intervals is shorter than l + l' = %d; no windows",
                    table.n_intervals, l + l_prime)
    M, Mp = list(partition.sensed), list(partition.unsensed)
    X = table.values
    out = []
    for s in starts:
        tod, dow = table.calendar(s)
        past, future = X[:, s:s + l], X[:, s + l:s + l + l_prime]
        out.append(WindowSample(past[M], past[Mp], future[M], future[Mp], int(tod), int(dow)))
    return out


def stack_windows(samples) -> WindowArrays:
    if not samples:
        raise DataError("no windows to stack")
    return WindowArrays(
        np.stack([s.x_M_T for s in samples]), np.stack([s.x_Mp_T for s in samples]),
        np.stack([s.x_M_Tp for s in samples]), np.stack([s.x_Mp_Tp for s in samples]),
        np.array([s.tod_index for s in samples]), np.array([s.dow_index for s in samples]))


# ---------------------------------------------------------------- selection & noise

def select_locations(table: TrafficTable, graph: RoadGraph | None, m_prime: int,
                     mode="weighted", seed=0) -> SensingPartition:
    """Choose which locations stay unsensed.

    ``weighted`` draws the ``n - m'`` sensed sites one at a time, each with
    probability proportional to its mean flow among sites not yet chosen.
    Pass the training split so that the scores never see test data.
    """
    n = table.n_locations
    if graph is not None and graph.n_locations != n:
        raise DataError(f"graph has {graph.n_locations} locations, table has {n}")
    if not 0 < m_prime < n:
        raise ValueError(f"m' must lie in (0, {n}), got {m_prime}")
    rng = np.random.default_rng(seed)
    if mode == "random":
        unsensed = rng.choice(n, size=m_prime, replace=False)
        chosen = np.setdiff1d(np.arange(n), unsensed)
    elif mode == "weighted":
        scores = np.clip(table.values.mean(axis=1), 0.0, None)
        remaining = list(range(n))
        picked = []
        for _ in range(n - m_prime):
            w = scores[remaining]
            p = w / w.sum() if w.sum() > 0 else None
            k = int(rng.choice(len(remaining), p=p))
            picked.append(remaining.pop(k))
        chosen = np.array(picked)
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    sensed = tuple(sorted(int(i) for i in chosen))
    unsensed = tuple(i for i in range(n) if i not in set(sensed))
    return SensingPartition(sensed, unsensed)


def inject_noise(table: TrafficTable, variance: float, seed=0) -> TrafficTable:
    if variance < 0:
        raise ValueError(f"noise variance must be >= 0, got {variance}")
    if variance == 0:
        return table
    rng = np.random.default_rng(seed)
    noisy = table.values + rng.normal(0.0, np.sqrt(variance), table.values.shape)
    return replace(table, values=np.clip(noisy, 0.0, None))


# ---------------------------------------------------------------- synthetic data

SYNTH_EPOCH = datetime(2024, 1, 1)  # a Monday


def _ring_plus_chords(n, rng):
    edges = [(i, (i + 1) % n) for i in range(n)]
    for _ in range(max(1, n // 4)):
        i = int(rng.integers(n))
        j = (i + int(rng.integers(2, n - 1))) % n
        edges.append((i, j))
    return RoadGraph.from_edges(n, edges)


def generate_synthetic(n=12, days=4, seed=0, closure_rate=0.0, noise_std=3.0,
                       return_clean=False):
    """Desk-scale traffic with daily/weekly cycles and random closures.

    Each location follows ``base + amp * max(0, sin(daily phase))`` scaled by
    a weekday factor. Base, amplitude and phase vary smoothly around the ring
    so neighbours look alike. A closure multiplies a 3-6 hour block of one
    location-day by a factor in ``[0, 0.1)``.
    """
    if n < 4 or days < 2:
        raise ValueError(f"need n >= 4 and days >= 2, got n={n}, days={days}")
    if not 0.0 <= closure_rate <= 1.0 or noise_std < 0:
        raise ValueError("closure_rate must lie in [0, 1] and noise_std must be >= 0")
    rng = np.random.default_rng(seed)
    graph = _ring_plus_chords(n, rng)

    angle = 2 * np.pi * np.arange(n) / n
    def smooth_field(lo, hi):
        c = rng.normal(size=3)
        s = rng.uniform(0, 2 * np.pi, size=3)
        f = sum(c[k] * np.cos((k + 1) * angle + s[k]) for k in range(3))
        f = (f - f.min()) / (np.ptp(f) + 1e-12)
        return lo + (hi - lo) * (0.8 * f + 0.2 * rng.uniform(size=n))

    base = smooth_field(30.0, 120.0)
    amp = smooth_field(120.0, 380.0)
    start_hour = smooth_field(5.0, 8.0)  # hour at which the daily lobe opens
    weekend = smooth_field(0.55, 0.85)

    T = days * INTERVALS_PER_DAY
    t = np.arange(T)
    hour = (t % INTERVALS_PER_DAY) * INTERVAL_MINUTES / 60.0
    dow = (t // INTERVALS_PER_DAY + SYNTH_EPOCH.weekday()) % DAYS_PER_WEEK
    phase = 2 * np.pi * (hour[None, :] - start_hour[:, None]) / 24.0
    lobe = np.maximum(0.0, np.sin(phase))
    factor = np.where(dow[None, :] >= 5, weekend[:, None], 1.0)
    clean = (base[:, None] + amp[:, None] * lobe) * factor

    values = clean + (rng.normal(0.0, noise_std, clean.shape) if noise_std > 0 else 0.0)
    if closure_rate > 0:
        for loc in range(n):
            for day in range(days):
                if rng.random() >= closure_rate:
                    continue
                hours = rng.uniform(3.0, 6.0)
                span = int(np.ceil(hours * 60 / INTERVAL_MINUTES))
                start = day * INTERVALS_PER_DAY + int(rng.integers(0, INTERVALS_PER_DAY - span + 1))
                values[loc, start:start + span] *= rng.uniform(0.0, 0.1)
    values = np.clip(values, 0.0, None)
    table = TrafficTable(values, SYNTH_EPOCH)
    if return_clean:
        return table, graph, clean
    return table, graph
