"""Deterministic, seeded Gaussian increment streams on uniform time grids.

Every simulator in this package draws its randomness from a
:class:`NoiseBundle`: a set of labelled increment streams (one per driving
white noise or auxiliary Brownian motion) attached to a :class:`TimeGrid`.
Substreams are keyed by ``(seed, label)`` through a counter-based RNG
(Philox), so adding a label never perturbs the draws of the other labels,
and identical ``(seed, label, grid)`` reproduces identical arrays
bit-for-bit.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

W_PLUS = "W_PLUS"
W_MINUS = "W_MINUS"


def aux(j):
    """Label of the auxiliary Brownian stream attached to particle ``j``."""
    return "AUX(%d)" % j


def derive_key(seed, label):
    """128-bit Philox key derived from ``(seed, label)``.

    Hash-based so that the mapping is stable across platforms and numpy
    versions, and so that distinct labels give statistically independent
    streams.
    """
    h = hashlib.sha256(("%d:%s" % (seed, label)).encode()).digest()
    return int.from_bytes(h[:16], "little")


def derive_seed(seed, *parts):
    """63-bit integer sub-seed for replica fan-out (e.g. per-replica bundles)."""
    h = hashlib.sha256(":".join([str(seed)] + [str(p) for p in parts]).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def stream_generator(seed, label):
    """Counter-based generator for the ``(seed, label)`` substream.

    Consecutive ``normal`` draws from this generator concatenate to the same
    sequence regardless of chunking, which the streaming simulators rely on.
    """
    return np.random.Generator(np.random.Philox(key=derive_key(seed, label)))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform discretization of ``[t_start, t_start + n_steps*dt]``.

    ``remainder`` records the part of a requested window that the rounding
    rule of :func:`make_grid` did not cover.
    """

    t_start: float
    dt: float
    n_steps: int
    remainder: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.t_start) and math.isfinite(self.dt)):
            raise ValueError("time grid bounds must be finite")
        if self.dt <= 0:
            raise ValueError("dt must be positive, got %r" % (self.dt,))
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")

    @property
    def t_end(self):
        return self.t_start + self.n_steps * self.dt

    def time(self, k):
        """Time at step ``k``, computed multiplicatively (no accumulation drift)."""
        return self.t_start + k * self.dt

    def times(self):
        return self.t_start + self.dt * np.arange(self.n_steps + 1)

    def index_of(self, t):
        """Grid index of time ``t``; raises if ``t`` is not (nearly) on the grid."""
        k = int(round((t - self.t_start) / self.dt))
        if k < 0 or k > self.n_steps or abs(self.time(k) - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError("time %r is not on the grid" % (t,))
        return k


def make_grid(t_start, t_end, dt):
    """Build a :class:`TimeGrid` covering ``[t_start, t_end]``.

    ``n_steps = round((t_end - t_start)/dt)``; if the window is not an exact
    multiple of ``dt`` the grid end is adjusted and the remainder recorded.
    """
    if not (math.isfinite(t_start) and math.isfinite(t_end)):
        raise ValueError("grid bounds must be finite")
    if dt <= 0 or not math.isfinite(dt):
        raise ValueError("dt must be positive and finite, got %r" % (dt,))
    if t_end < t_start:
        raise ValueError("t_end must be >= t_start")
    n_steps = int(round((t_end - t_start) / dt))
    remainder = (t_end - t_start) - n_steps * dt
    return TimeGrid(t_start=t_start, dt=dt, n_steps=n_steps, remainder=remainder)


@dataclass(frozen=True)
class NoiseBundle:
    """Labelled i.i.d. N(0, dt) increment streams on a shared grid.

    Immutable after construction; safe to share across concurrent consumers.
    """

    grid: TimeGrid
    seed: int
    streams: dict = field(default_factory=dict)

    def __post_init__(self):
        for label, arr in self.streams.items():
            if len(arr) != self.grid.n_steps:
                raise ValueError(
                    "stream %r has %d increments, grid has %d steps"
                    % (label, len(arr), self.grid.n_steps)
                )

    def __getitem__(self, label):
        return self.streams[label]

    def __contains__(self, label):
        return label in self.streams

    @property
    def labels(self):
        return list(self.streams)

    def path(self, label):
        """Cumulated Brownian path of one stream (length ``n_steps + 1``)."""
        return cumulate(self.streams[label])

    def subwindow(self, k_start, k_end):
        """Bundle restricted to grid steps ``[k_start, k_end)``; same arithmetic."""
        if not (0 <= k_start <= k_end <= self.grid.n_steps):
            raise ValueError("subwindow out of range")
        grid = TimeGrid(self.grid.time(k_start), self.grid.dt, k_end - k_start)
        streams = {lab: arr[k_start:k_end] for lab, arr in self.streams.items()}
        return NoiseBundle(grid=grid, seed=self.seed, streams=streams)


def sample_bundle(grid, labels, seed):
    """Draw one increment stream per label; pure function of (grid, labels, seed)."""
    labels = list(labels)
    if len(set(labels)) != len(labels):
        raise ValueError("duplicate stream labels: %r" % (labels,))
    sigma = math.sqrt(grid.dt)
    streams = {}
    for label in labels:
        gen = stream_generator(seed, label)
        # standard_normal then scale: bit-identical to the chunked draws of
        # the batch engine, which must replay the same streams
        streams[label] = gen.standard_normal(grid.n_steps) * sigma
    return NoiseBundle(grid=grid, seed=seed, streams=streams)


def cumulate(stream):
    """Path from increments: ``out[k] = sum(stream[:k])``, ``out[0] = 0``."""
    stream = np.asarray(stream, dtype=np.float64)
    out = np.empty(len(stream) + 1)
    out[0] = 0.0
    np.cumsum(stream, out=out[1:])
    return out


class CovarianceKind(Enum):
    """Spatial covariance of the driving white noise.

    ``C_PM``  : shared noise on each half line (two basis indicators).
    ``C_PLUS``: shared noise on the positive half line only.
    """

    C_PM = "C_PM"
    C_PLUS = "C_PLUS"

    def __call__(self, x, y):
        pos = (np.asarray(x) > 0) & (np.asarray(y) > 0)
        if self is CovarianceKind.C_PLUS:
            return pos.astype(np.float64)
        neg = (np.asarray(x) < 0) & (np.asarray(y) < 0)
        return (pos | neg).astype(np.float64)

    @property
    def basis(self):
        """Indicator basis functions whose products sum to the covariance."""
        e_plus = lambda x: (np.asarray(x) > 0).astype(np.float64)
        e_minus = lambda x: (np.asarray(x) < 0).astype(np.float64)
        if self is CovarianceKind.C_PLUS:
            return (e_plus,)
        return (e_plus, e_minus)


_MAGIC = b"BFNB"


def dump_bundle(bundle, path):
    """Binary dump: header {seed, dt, n_steps, labels}, then raw f64 arrays."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QdQ", bundle.seed, bundle.grid.dt, bundle.grid.n_steps))
        fh.write(struct.pack("<d", bundle.grid.t_start))
        labels = bundle.labels
        fh.write(struct.pack("<I", len(labels)))
        for label in labels:
            raw = label.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        for label in labels:
            fh.write(np.ascontiguousarray(bundle.streams[label], dtype="<f8").tobytes())


def load_bundle(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a bundle file: %s" % path)
        seed, dt, n_steps = struct.unpack("<QdQ", fh.read(24))
        (t_start,) = struct.unpack("<d", fh.read(8))
        (n_labels,) = struct.unpack("<I", fh.read(4))
        labels = []
        for _ in range(n_labels):
            (ln,) = struct.unpack("<I", fh.read(4))
            labels.append(fh.read(ln).decode())
        streams = {}
        for label in labels:
            streams[label] = np.frombuffer(fh.read(8 * n_steps), dtype="<f8").copy()
    grid = TimeGrid(t_start=t_start, dt=dt, n_steps=int(n_steps))
    return NoiseBundle(grid=grid, seed=int(seed), streams=streams)
