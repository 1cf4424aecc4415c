"""Seed-deterministic Brownian increments on a uniform grid.

Every random quantity is drawn from its own counter-based Philox substream.
The 128-bit key is ``(seed, kind << 56 | rep << 32 | index)``, so the
increment of particle ``i`` at step ``k`` depends only on the master seed,
the repetition number, the particle's stream id and ``k``. Population size
and scheduling never change it.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GridMismatch, ShapeMismatch

COMMON, IDIOSYNCRATIC, INITIAL, PILOT = 0, 1, 2, 3
_MASK64 = (1 << 64) - 1
_MAGIC = b"MVCNOISE"
_HEADER = struct.Struct("<8sIQdQQQQQ")  # magic, version, seed, T, K, N, m0, m, rep


def stream_key(seed: int, kind: int, index: int, rep: int = 0) -> np.ndarray:
    if not (0 <= index < 1 << 32 and 0 <= rep < 1 << 24 and 0 <= kind < 256):
        raise ValueError("stream coordinates out of range")
    return np.array([int(seed) & _MASK64, (kind << 56) | (rep << 32) | index], dtype=np.uint64)


def substream(seed: int, kind: int, index: int, rep: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, kind, index, rep)))


@dataclass(frozen=True)
class TimeGrid:
    T: float
    K: int

    def __post_init__(self):
        if not self.T > 0 or int(self.K) != self.K or self.K < 1:
            raise ValueError(f"need T > 0 and integer K >= 1, got T={self.T}, K={self.K}")

    @property
    def dt(self) -> float:
        return self.T / self.K

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.K + 1) * self.dt

    def t(self, k: int) -> float:
        return k * self.dt


def compensated_cumsum(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Running Neumaier-compensated partial sums along ``axis`` (leading zero included)."""
    x = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    out = np.zeros((x.shape[0] + 1,) + x.shape[1:])
    s = np.zeros(x.shape[1:])
    comp = np.zeros(x.shape[1:])
    for k in range(x.shape[0]):
        v = x[k]
        t = s + v
        comp += np.where(np.abs(s) >= np.abs(v), (s - t) + v, (v - t) + s)
        s = t
        out[k + 1] = s + comp
    return np.moveaxis(out, 0, axis)


@dataclass(frozen=True)
class CameronMartinDirection:
    """Piecewise-constant density ``h'`` of a Cameron-Martin path, one row per grid cell."""

    hprime: np.ndarray
    dt: float

    def __post_init__(self):
        h = np.asarray(self.hprime, dtype=float)
        if h.ndim == 1:
            h = h[:, None]
        if not np.all(np.isfinite(h)):
            raise ValueError("h' must be finite")
        object.__setattr__(self, "hprime", h)

    @classmethod
    def constant(cls, grid: TimeGrid, value=1.0, width: int = 1):
        return cls(np.full((grid.K, width), value, dtype=float), grid.dt)

    @classmethod
    def from_function(cls, grid: TimeGrid, fn, width: int = 1):
        """Sample ``fn(t)`` at left cell endpoints."""
        vals = np.array([np.broadcast_to(fn(t), (width,)) for t in grid.nodes[:-1]], dtype=float)
        return cls(vals, grid.dt)

    @property
    def norm2(self) -> float:
        return float(np.sum(self.hprime ** 2) * self.dt)

    def path(self) -> np.ndarray:
        """Path values ``h(t_k)``, ``h(0) = 0``."""
        return compensated_cumsum(self.hprime * self.dt)


@dataclass(frozen=True)
class NoiseBundle:
    grid: TimeGrid
    dW0: np.ndarray            # (K, m0), shared by all particles
    dW1: np.ndarray            # (N, K, m), one row per particle
    seed: int
    stream_ids: np.ndarray     # (N,)
    rep: int = 0
    kind: int = IDIOSYNCRATIC
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def N(self) -> int:
        return self.dW1.shape[0]

    @property
    def m0(self) -> int:
        return self.dW0.shape[1]

    @property
    def m(self) -> int:
        return self.dW1.shape[2]

    def increments(self, k: int):
        """Common increment ``(m0,)`` and idiosyncratic increments ``(N, m)`` at step k."""
        return self.dW0[k], self.dW1[:, k, :]

    def W0(self) -> np.ndarray:
        """Common path values on the grid, ``(K+1, m0)``."""
        return compensated_cumsum(self.dW0)

    def W1(self) -> np.ndarray:
        """Idiosyncratic path values, ``(N, K+1, m)``."""
        return compensated_cumsum(self.dW1, axis=1)

    def subset(self, idx) -> NoiseBundle:
        idx = np.asarray(idx)
        return replace(self, dW1=self.dW1[idx], stream_ids=self.stream_ids[idx])

    def identical(self, other: NoiseBundle) -> bool:
        return (self.grid == other.grid and np.array_equal(self.dW0, other.dW0)
                and np.array_equal(self.dW1, other.dW1)
                and np.array_equal(self.stream_ids, other.stream_ids))


def _idio_rows(grid, seed, ids, m, kind, rep, workers):
    sq = np.sqrt(grid.dt)

    def one(i):
        return sq * substream(seed, kind, int(i), rep).standard_normal((grid.K, m))

    if workers > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(one, ids))
    else:
        rows = [one(i) for i in ids]
    return np.stack(rows) if rows else np.zeros((0, grid.K, m))


def common_increments(grid: TimeGrid, seed: int, m0: int = 1, rep: int = 0) -> np.ndarray:
    return np.sqrt(grid.dt) * substream(seed, COMMON, 0, rep).standard_normal((grid.K, m0))


def generate(grid: TimeGrid, N: int, seed: int, m0: int = 1, m: int = 1, *, rep: int = 0,
             stream_offset: int = 0, stream_ids=None, kind: int = IDIOSYNCRATIC,
             workers: int = 1) -> NoiseBundle:
    """Draw the common path and ``N`` idiosyncratic paths.

    Particle ``i`` uses stream id ``stream_offset + i`` unless ``stream_ids``
    is given. ``workers`` only changes scheduling, never the numbers.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    ids = (np.arange(N, dtype=np.int64) + stream_offset) if stream_ids is None \
        else np.asarray(stream_ids, dtype=np.int64)
    if len(ids) != N:
        raise ShapeMismatch("stream_ids must have N entries")
    dW0 = common_increments(grid, seed, m0, rep)
    dW1 = _idio_rows(grid, seed, ids, m, kind, rep, workers)
    return NoiseBundle(grid, dW0, dW1, int(seed), ids, rep, kind)


def companion(bundle: NoiseBundle, n: int, *, kind: int = PILOT, stream_offset: int = 0,
              workers: int = 1) -> NoiseBundle:
    """Bundle sharing ``bundle``'s common increments with ``n`` fresh idiosyncratic streams."""
    ids = np.arange(n, dtype=np.int64) + stream_offset
    dW1 = _idio_rows(bundle.grid, bundle.seed, ids, bundle.m, kind, bundle.rep, workers)
    return NoiseBundle(bundle.grid, bundle.dW0, dW1, bundle.seed, ids, bundle.rep, kind)


def _check_direction(h: CameronMartinDirection, grid: TimeGrid, width: int):
    if h.hprime.shape != (grid.K, width) or not np.isclose(h.dt, grid.dt, rtol=1e-12, atol=0):
        raise GridMismatch(f"direction of shape {h.hprime.shape} does not live on a "
                           f"{grid.K}-step grid of width {width}")


def bump_common(bundle: NoiseBundle, h: CameronMartinDirection, eps: float) -> NoiseBundle:
    """Shift the common path by ``eps * h``; idiosyncratic increments are untouched."""
    _check_direction(h, bundle.grid, bundle.m0)
    return replace(bundle, dW0=bundle.dW0 + eps * h.hprime * bundle.grid.dt)


def bump_idio(bundle: NoiseBundle, i: int, h: CameronMartinDirection, eps: float) -> NoiseBundle:
    """Shift the idiosyncratic path of particle ``i`` by ``eps * h``."""
    _check_direction(h, bundle.grid, bundle.m)
    dW1 = bundle.dW1.copy()
    dW1[i] = dW1[i] + eps * h.hprime * bundle.grid.dt
    return replace(bundle, dW1=dW1)


def sample_initial(seed: int, N: int, d: int, law: dict | None = None, *, rep: int = 0,
                   stream_offset: int = 0) -> np.ndarray:
    """Initial states, one substream per particle.

    ``law`` is ``{"kind": "normal", "mean": m, "std": s}`` (default standard
    normal) or ``{"kind": "point", "at": x}``.
    """
    law = dict(law or {"kind": "normal"})
    kind = law.pop("kind", "normal")
    if kind == "point":
        at = np.broadcast_to(np.asarray(law.pop("at", 0.0), dtype=float), (d,))
        if law:
            raise ValueError(f"unknown initial-law keys {sorted(law)}")
        return np.tile(at, (N, 1))
    if kind != "normal":
        raise ValueError(f"unknown initial law {kind!r}")
    mean = np.broadcast_to(np.asarray(law.pop("mean", 0.0), dtype=float), (d,))
    std = np.broadcast_to(np.asarray(law.pop("std", 1.0), dtype=float), (d,))
    if law:
        raise ValueError(f"unknown initial-law keys {sorted(law)}")
    z = np.stack([substream(seed, INITIAL, stream_offset + i, rep).standard_normal(d)
                  for i in range(N)])
    return mean + std * z


def dump(bundle: NoiseBundle, path) -> None:
    """Binary dump: fixed little-endian header, then dW0, dW1 (float64, row-major), stream ids (int64)."""
    g = bundle.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, int(bundle.seed) & _MASK64, g.T, g.K, bundle.N,
                              bundle.m0, bundle.m, bundle.rep))
        fh.write(np.ascontiguousarray(bundle.dW0, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.dW1, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.stream_ids, dtype="<i8").tobytes())


def load(path) -> NoiseBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, seed, T, K, N, m0, m, rep = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC or version != 1:
        raise ValueError("not a noise dump")
    off = _HEADER.size
    n0, n1 = K * m0, N * K * m
    dW0 = np.frombuffer(raw, "<f8", n0, off).reshape(K, m0).astype(float)
    off += 8 * n0
    dW1 = np.frombuffer(raw, "<f8", n1, off).reshape(N, K, m).astype(float)
    off += 8 * n1
    ids = np.frombuffer(raw, "<i8", N, off).astype(np.int64)
    return NoiseBundle(TimeGrid(T, K), dW0, dW1, seed, ids, rep)
