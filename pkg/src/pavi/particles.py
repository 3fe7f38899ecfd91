"""Particle arrays, their product empirical measure, and seeded RNG streams."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, UsageError

_ROLE_CODES = {"init": 0, "context": 1, "noise": 2, "reference": 3, "sample": 4}
_MAGIC = b"PAV1"


@dataclass(frozen=True)
class RngStream:
    """Counter-addressed randomness: (seed, iteration, role, row) -> stream.

    Identical coordinates always yield identical draws, independent of thread
    scheduling, so per-row parallel updates stay bit-reproducible.
    """

    seed: int

    def generator(self, iteration=0, role="sample", row=0) -> np.random.Generator:
        try:
            code = _ROLE_CODES[role]
        except KeyError:
            raise UsageError(
                f"unknown rng role {role!r}; expected one of {sorted(_ROLE_CODES)}"
            ) from None
        iteration = int(iteration)
        row = int(row)
        if iteration < 0 or row < 0:
            raise UsageError("iteration and row must be nonnegative")
        ss = np.random.SeedSequence(
            entropy=int(self.seed) & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(code, iteration, row),
        )
        return np.random.default_rng(ss)


class ParticleArray:
    """An m-by-N array of particle coordinates; row i holds coordinate i."""

    __slots__ = ("values",)

    def __init__(self, values):
        v = np.ascontiguousarray(values, dtype=float)
        if v.ndim != 2:
            raise ConfigError(f"particle array must be 2-D, got shape {v.shape}")
        m, N = v.shape
        if m < 1:
            raise ConfigError("particle array needs at least one coordinate row")
        if N < 2:
            raise ConfigError(
                f"N >= 2 required (got N={N}); the convergence guarantee "
                "needs at least two particles"
            )
        if not np.all(np.isfinite(v)):
            raise ConfigError("particle values must be finite")
        self.values = v

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "ParticleArray":
        return ParticleArray(self.values.copy())


class ProductEmpirical:
    """Product of the m per-row empirical measures of a particle array.

    Each marginal puts mass 1/N on the row's atoms; the product measure has
    N^m atoms conceptually and is only ever sampled, never materialized.
    """

    __slots__ = ("particles",)

    def __init__(self, particles: ParticleArray):
        if not isinstance(particles, ParticleArray):
            particles = ParticleArray(particles)
        self.particles = particles

    @property
    def values(self) -> np.ndarray:
        return self.particles.values

    @property
    def m(self) -> int:
        return self.particles.m

    @property
    def N(self) -> int:
        return self.particles.N

    def marginal_atoms(self, i) -> np.ndarray:
        if not 0 <= int(i) < self.m:
            raise UsageError(f"coordinate index {i} out of range for dimension {self.m}")
        return self.values[int(i)]


def init_particles(m, N, init="standard_normal", seed=0) -> ParticleArray:
    """Create the initial m-by-N particle state.

    ``init`` is either "standard_normal" (i.i.d. N(0,1) entries drawn from the
    seed's init stream), ("point", vector) for a point mass, or an explicit
    (m, N) array.
    """
    m, N = int(m), int(N)
    if N < 2:
        raise ConfigError(
            f"N >= 2 required (got N={N}); the convergence guarantee "
            "needs at least two particles"
        )
    if isinstance(init, str):
        if init != "standard_normal":
            raise ConfigError(f"unknown init spec {init!r}")
        vals = RngStream(seed).generator(0, "init").standard_normal((m, N))
    elif isinstance(init, tuple) and len(init) == 2 and init[0] == "point":
        point = np.asarray(init[1], dtype=float)
        if point.shape != (m,):
            raise ConfigError(f"point init must be a length-{m} vector")
        vals = np.repeat(point[:, None], N, axis=1)
    else:
        vals = np.asarray(init, dtype=float)
        if vals.shape != (m, N):
            raise ConfigError(
                f"explicit init must have shape ({m}, {N}), got {vals.shape}"
            )
    return ParticleArray(vals)


def _resolve_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator(0, "sample")
    if isinstance(rng, np.random.Generator):
        return rng
    raise UsageError("rng must be an RngStream or numpy Generator")


def sample_product(q: ProductEmpirical, B, rng) -> np.ndarray:
    """Draw B i.i.d. columns from the product empirical measure.

    For each coordinate i independently a uniform atom index is drawn, so
    entries are independent across coordinates and across columns.
    """
    B = int(B)
    if B < 1:
        raise UsageError(f"B must be >= 1, got {B}")
    gen = _resolve_generator(rng)
    idx = gen.integers(0, q.N, size=(q.m, B))
    return q.values[np.arange(q.m)[:, None], idx]


def sorted_marginal(q: ProductEmpirical, i) -> np.ndarray:
    """Order statistics of marginal i (ascending, ties kept stable)."""
    return np.sort(q.marginal_atoms(i), kind="stable")


def coordinate_means(q: ProductEmpirical) -> np.ndarray:
    """Per-coordinate means (1/N) sum_j X[i, j]."""
    return q.values.mean(axis=1)


def save_particles(path, particles: ParticleArray, seed=0, iteration=0) -> None:
    """Write particles as a flat binary file: header (m, N, seed, iteration)
    followed by row-major doubles."""
    header = struct.pack(
        "<4sqqqq", _MAGIC, particles.m, particles.N, int(seed), int(iteration)
    )
    Path(path).write_bytes(header + particles.values.astype("<f8").tobytes(order="C"))


def load_particles(path):
    """Inverse of :func:`save_particles`; returns (particles, seed, iteration)."""
    blob = Path(path).read_bytes()
    head = struct.calcsize("<4sqqqq")
    if len(blob) < head:
        raise UsageError(f"{path} is not a particle file (truncated header)")
    magic, m, N, seed, iteration = struct.unpack("<4sqqqq", blob[:head])
    if magic != _MAGIC:
        raise UsageError(f"{path} is not a particle file (bad magic {magic!r})")
    body = np.frombuffer(blob[head:], dtype="<f8")
    if body.size != m * N:
        raise UsageError(f"{path} has {body.size} values, expected {m * N}")
    return ParticleArray(body.reshape(m, N)), int(seed), int(iteration)
