"""Particle dynamics: stochastic and exact mean-field gradient steps.

One iteration draws a batch of context columns from the current product
empirical measure, estimates each coordinate's conditional gradient by
averaging partial derivatives over the batch, and moves every particle by a
gradient step plus Gaussian noise:

    X[i, j] <- X[i, j] - h * g_i(X[i, j]) + sqrt(2 h) * xi[i, j]

The exact variant replaces the batch average by the expectation under the
product of the other coordinates' empirical marginals, either through the
potential's conditional mean gradient or by exhaustive enumeration at small
scale.  Context and noise draws are addressed by (seed, iteration, role, row)
so any thread schedule reproduces the same trajectory.
"""

from __future__ import annotations

import base64
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    ConfigError,
    DivergenceError,
    EvaluationError,
    ScaleError,
    UsageError,
)
from .metrics import w2_reference_profile
from .particles import (
    ParticleArray,
    ProductEmpirical,
    RngStream,
    coordinate_means,
    init_particles,
    sample_product,
)
from .potentials import potential_fingerprint
from .reports import ConvergenceReport, StepTrace, summarize_rows

_EXHAUSTIVE_MAX = 1_000_000
_CHECKPOINT_FORMAT = "pavi-checkpoint-v1"


@dataclass
class RunConfig:
    """Settings for one run of the particle dynamics."""

    N: int
    T: int
    h: float | None = None
    B: int | None = None
    schedule: str = "explicit"  # "explicit" | "corollary"
    algorithm: str = "pavi"  # "pavi" | "exact"
    seed: int = 0
    metrics_every: int | None = None

    def resolved_metrics_every(self) -> int:
        if self.metrics_every is not None:
            me = int(self.metrics_every)
            if me < 1:
                raise ConfigError("metrics_every must be a positive integer")
            return me
        return max(1, self.T // 200)

    def to_dict(self) -> dict:
        return asdict(self)


def corollary_schedule(lip, N):
    """Default schedule h = 1/(lip * N^(1/4)), B = ceil(1/(lip * h))."""
    lip = float(lip)
    N = int(N)
    if lip <= 0:
        raise UsageError(f"lip must be positive, got {lip}")
    if N < 2:
        raise ConfigError(f"N >= 2 required (got N={N})")
    h = 1.0 / (lip * N**0.25)
    B = math.ceil(1.0 / (lip * h) - 1e-9)
    return h, max(1, B)


def step_size_bounds(pot, B):
    """The two upper bounds of the step-size guard for batch size B."""
    bound_pair = 2.0 / (pot.alpha + pot.lip)
    bound_batch = math.inf if B is None else B * pot.alpha / (4.0 * pot.lip**2)
    return bound_pair, bound_batch


def validate_config(pot, cfg: RunConfig):
    """Check the run configuration and return the resolved (h, B).

    Explicit schedules must satisfy the strict guard
    0 < h < min(2/(alpha+lip), B*alpha/(4*lip^2)); boundary equality is
    rejected.  Corollary schedules derive h and B instead of taking them.
    """
    if cfg.N < 2:
        raise ConfigError(
            f"N >= 2 required (got N={cfg.N}); the convergence guarantee "
            "needs at least two particles"
        )
    if cfg.T < 0:
        raise ConfigError("T must be nonnegative")
    cfg.resolved_metrics_every()
    if cfg.algorithm not in ("pavi", "exact"):
        raise ConfigError(f"unknown algorithm {cfg.algorithm!r}")
    if cfg.schedule == "corollary":
        if cfg.h is not None or cfg.B is not None:
            raise ConfigError("corollary schedule derives h and B; do not supply them")
        return corollary_schedule(pot.lip, cfg.N)
    if cfg.schedule != "explicit":
        raise ConfigError(f"unknown schedule {cfg.schedule!r}")
    if cfg.h is None:
        raise ConfigError("explicit schedule requires a step size h")
    h = float(cfg.h)
    B = cfg.B
    if cfg.algorithm == "pavi":
        if B is None:
            raise ConfigError("explicit schedule requires a batch size B")
        B = int(B)
        if B < 1:
            raise ConfigError(f"B must be a positive integer, got {B}")
    elif B is not None:
        B = int(B)
    bound_pair, bound_batch = step_size_bounds(pot, B)
    if not (0.0 < h < min(bound_pair, bound_batch)):
        raise ConfigError(
            f"step size h={h:.6g} violates 0 < h < min(2/(alpha+lip) = "
            f"{bound_pair:.6g}, B*alpha/(4*lip^2) = {bound_batch:.6g})"
        )
    return h, B


# gradient estimators ----------------------------------------------------------


def context_partials(pot, z, i, x) -> np.ndarray:
    """Per-context partial derivatives whose average is the batch estimate."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[0] != pot.m:
        raise UsageError(f"context array must have shape ({pot.m}, B), got {z.shape}")
    i = int(i)
    if not 0 <= i < pot.m:
        raise UsageError(f"coordinate index {i} out of range for dimension {pot.m}")
    cols = z.copy()
    cols[i, :] = x
    vals = np.asarray(pot.partial_cols(i, cols), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise EvaluationError(
            f"non-finite partial derivative in the batch estimate for coordinate {i}"
        )
    return vals


def stochastic_grad(pot, z, i, x) -> float:
    """Batch-average estimate of the conditional gradient at a single point."""
    return float(context_partials(pot, z, i, x).mean())


def stochastic_grad_at(pot, z, i, xs) -> np.ndarray:
    """Vectorized batch estimate at many points of coordinate i.

    The same context columns serve every evaluation point, matching how one
    iteration reuses its contexts across all particles.
    """
    z = np.asarray(z, dtype=float)
    m, B = z.shape
    i = int(i)
    xs = np.asarray(xs, dtype=float).ravel()
    K = xs.size
    cols = np.broadcast_to(z[:, :, None], (m, B, K)).reshape(m, B * K).copy()
    cols[i] = np.tile(xs, B)
    vals = np.asarray(pot.partial_cols(i, cols), dtype=float).reshape(B, K)
    if not np.all(np.isfinite(vals)):
        raise EvaluationError(
            f"non-finite partial derivative in the batch estimate for coordinate {i}"
        )
    return vals.mean(axis=0)


def exact_grad_profile(pot, X, i, xs) -> np.ndarray:
    """Exact conditional gradient under the other coordinates' marginals.

    Uses the potential's conditional mean gradient when available (any scale);
    otherwise averages partials over all N^(m-1) atom combinations, gated at
    10^6 combinations.
    """
    q = X if isinstance(X, ProductEmpirical) else ProductEmpirical(X)
    i = int(i)
    if not 0 <= i < q.m:
        raise UsageError(f"coordinate index {i} out of range for dimension {q.m}")
    xs = np.asarray(xs, dtype=float).ravel()
    if q.m == 1:
        return np.asarray(pot.partial_cols(i, xs[None, :]), dtype=float)
    if pot.has_conditional_mean_gradient:
        other = np.delete(coordinate_means(q), i)
        return np.asarray(pot.conditional_mean_gradient(i, xs, other), dtype=float)
    combos = q.N ** (q.m - 1)
    if combos > _EXHAUSTIVE_MAX:
        raise ScaleError(
            f"exhaustive averaging needs {combos} combinations (> {_EXHAUSTIVE_MAX}); "
            "use the stochastic algorithm instead"
        )
    others = [q.values[k] for k in range(q.m) if k != i]
    mesh = np.meshgrid(*others, indexing="ij")
    cols = np.empty((q.m, combos))
    for row, grid in zip((k for k in range(q.m) if k != i), mesh):
        cols[row] = grid.ravel()
    out = np.empty(xs.size)
    for idx, x in enumerate(xs):
        cols[i] = x
        out[idx] = float(np.mean(pot.partial_cols(i, cols)))
    return out


def exact_mean_field_grad(pot, X, i, x) -> float:
    """Exact conditional gradient at one point (scalar convenience wrapper)."""
    return float(exact_grad_profile(pot, X, i, [x])[0])


# stepping -----------------------------------------------------------------------


def _step_parts(pot, X, h, B, rng, n, algorithm, pool=None, zero_noise=False):
    """Advance the particle array one iteration; returns (values, grad_rms)."""
    values = X.values
    m, N = values.shape
    if algorithm == "pavi":
        z = sample_product(ProductEmpirical(X), B, rng.generator(n, "context"))

        def grad_row(i):
            return stochastic_grad_at(pot, z, i, values[i])

    else:

        def grad_row(i):
            return exact_grad_profile(pot, X, i, values[i])

    scale = math.sqrt(2.0 * h)

    def row_task(i):
        g = grad_row(i)
        if zero_noise:
            return values[i] - h * g, g
        noise = rng.generator(n, "noise", i).standard_normal(N)
        return values[i] - h * g + scale * noise, g

    results = list(pool.map(row_task, range(m))) if pool is not None else [
        row_task(i) for i in range(m)
    ]
    new = np.vstack([r[0] for r in results])
    grads = np.vstack([r[1] for r in results])
    if not np.all(np.isfinite(new)):
        bad_i, bad_j = np.argwhere(~np.isfinite(new))[0]
        raise DivergenceError(n, bad_i, bad_j)
    return new, float(math.sqrt(np.mean(grads * grads)))


def pavi_step(pot, X: ParticleArray, h, B, rng: RngStream, n, *, _zero_noise=False, pool=None):
    """One stochastic iteration: contexts drawn once, then per-row updates."""
    new, _ = _step_parts(pot, X, float(h), int(B), rng, int(n), "pavi", pool, _zero_noise)
    return ParticleArray(new)


def exact_step(pot, X: ParticleArray, h, rng: RngStream, n, *, _zero_noise=False, pool=None):
    """One exact-gradient iteration; same noise addressing as pavi_step."""
    new, _ = _step_parts(pot, X, float(h), None, rng, int(n), "exact", pool, _zero_noise)
    return ParticleArray(new)


# full runs ----------------------------------------------------------------------


def _write_checkpoint(path, pot, cfg, next_iteration, X, rows, wall_times):
    doc = {
        "format": _CHECKPOINT_FORMAT,
        "fingerprint": potential_fingerprint(pot),
        "config": cfg.to_dict(),
        "next_iteration": int(next_iteration),
        "rows": [r.to_dict() for r in rows],
        "wall_times": list(wall_times),
        "particles": base64.b64encode(X.values.astype("<f8").tobytes()).decode("ascii"),
        "shape": [X.m, X.N],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def _load_checkpoint(path, pot, cfg):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != _CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a checkpoint file")
    if doc["fingerprint"] != potential_fingerprint(pot):
        raise ConfigError("checkpoint was produced with a different potential")
    if doc["config"] != cfg.to_dict():
        raise ConfigError("checkpoint was produced with a different run configuration")
    m, N = doc["shape"]
    vals = np.frombuffer(base64.b64decode(doc["particles"]), dtype="<f8").reshape(m, N)
    rows = [StepTrace.from_dict(r) for r in doc["rows"]]
    return ParticleArray(vals.copy()), rows, list(doc["wall_times"]), int(doc["next_iteration"])


def run(
    pot,
    cfg: RunConfig,
    reference=None,
    sink=None,
    *,
    init="standard_normal",
    threads=1,
    checkpoint_path=None,
    checkpoint_every=None,
    resume=False,
    _stop_after=None,
) -> ConvergenceReport:
    """Execute T iterations, recording W2 to the reference at a fixed cadence.

    Metrics rows appear at iteration 0, every ``metrics_every`` iterations,
    and at T.  ``sink`` receives each row as it is produced.  When a
    checkpoint path is given the final state is always written there, a
    divergence retains the last good state, and ``resume=True`` continues a
    previous run bit-identically.
    """
    h, B = validate_config(pot, cfg)
    if cfg.algorithm == "exact" and not pot.has_conditional_mean_gradient:
        combos = cfg.N ** (pot.m - 1)
        if combos > _EXHAUSTIVE_MAX:
            raise ScaleError(
                f"exact algorithm needs {combos} combinations per evaluation "
                f"(> {_EXHAUSTIVE_MAX}); use algorithm 'pavi'"
            )
    me = cfg.resolved_metrics_every()
    rng = RngStream(cfg.seed)
    rows: list[StepTrace] = []
    wall_times: list[float] = []
    t0 = time.perf_counter()

    def record(iteration, X, grad_rms=None):
        w2_total = None
        w2_coord = None
        if reference is not None:
            per, w2_total = w2_reference_profile(ProductEmpirical(X), reference)
            w2_coord = [float(p) for p in per]
        row = StepTrace(int(iteration), w2_total, w2_coord, grad_rms)
        row.validate()
        rows.append(row)
        wall_times.append(time.perf_counter() - t0)
        if sink is not None:
            sink(row)

    start = 0
    if resume:
        if checkpoint_path is None or not Path(checkpoint_path).exists():
            raise ConfigError("resume requested but no checkpoint file found")
        X, rows, wall_times, start = _load_checkpoint(checkpoint_path, pot, cfg)
    else:
        X = init_particles(pot.m, cfg.N, init, cfg.seed)
        record(0, X)

    pool = ThreadPoolExecutor(max_workers=threads) if threads and threads > 1 else None
    try:
        for n in range(start, cfg.T):
            if _stop_after is not None and n >= _stop_after:
                if checkpoint_path is None:
                    raise UsageError("_stop_after requires a checkpoint path")
                _write_checkpoint(checkpoint_path, pot, cfg, n, X, rows, wall_times)
                return None
            try:
                new, grad_rms = _step_parts(
                    pot, X, h, B, rng, n, cfg.algorithm, pool=pool
                )
            except DivergenceError:
                if checkpoint_path is not None:
                    _write_checkpoint(checkpoint_path, pot, cfg, n, X, rows, wall_times)
                raise
            X = ParticleArray(new)
            k = n + 1
            if k % me == 0 or k == cfg.T:
                record(k, X, grad_rms)
            if checkpoint_every and k % int(checkpoint_every) == 0 and checkpoint_path:
                _write_checkpoint(checkpoint_path, pot, cfg, k, X, rows, wall_times)
    finally:
        if pool is not None:
            pool.shutdown()

    if checkpoint_path is not None:
        _write_checkpoint(checkpoint_path, pot, cfg, cfg.T, X, rows, wall_times)
    report = ConvergenceReport(
        potential_fingerprint=potential_fingerprint(pot),
        config=cfg.to_dict(),
        seed=cfg.seed,
        version=__version__,
        rows=rows,
        summary=summarize_rows(rows),
        wall_times=wall_times,
        wall_total=time.perf_counter() - t0,
    )
    report.validate()
    return report
