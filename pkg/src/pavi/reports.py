"""Run reports, steady-state summaries, and rate fitting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UsageError

METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.json"


@dataclass
class StepTrace:
    """One recorded diagnostics row of a run."""

    iteration: int
    w2_total: float | None = None
    w2_coord: list | None = None
    grad_rms: float | None = None

    def validate(self):
        for v in (self.w2_total, self.grad_rms):
            if v is not None and not math.isfinite(v):
                raise UsageError(f"non-finite diagnostic at iteration {self.iteration}")
        if self.w2_coord is not None and not all(math.isfinite(v) for v in self.w2_coord):
            raise UsageError(f"non-finite diagnostic at iteration {self.iteration}")

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "w2": self.w2_total,
            "w2_coord": self.w2_coord,
            "grad_rms": self.grad_rms,
        }

    @classmethod
    def from_dict(cls, doc) -> "StepTrace":
        return cls(
            iteration=int(doc["iteration"]),
            w2_total=doc.get("w2"),
            w2_coord=doc.get("w2_coord"),
            grad_rms=doc.get("grad_rms"),
        )


@dataclass(frozen=True)
class RateFit:
    contraction_rate: float | None
    steady_state_level: float


def steady_window(n_points: int) -> int:
    """Index where the trailing 25% steady-state window starts."""
    if n_points < 1:
        raise UsageError("need at least one point")
    return max(0, n_points - max(1, n_points // 4))


def rate_fit(iterations, values) -> RateFit:
    """Fit the transient geometric decay of a W2 series.

    The steady-state level is the trailing-window mean; the per-iteration
    contraction rate comes from a least-squares fit of log(value - level)
    over the early points that sit clearly above the level.  Returns rate
    None for flat or noise-dominated series.
    """
    n = np.asarray(iterations, dtype=float)
    v = np.asarray(values, dtype=float)
    if n.shape != v.shape or n.ndim != 1:
        raise UsageError("iterations and values must be 1-D and equal length")
    if n.size < 10:
        raise UsageError("rate fit needs at least 10 points")
    start = steady_window(n.size)
    tail = v[start:]
    level = float(tail.mean())
    level_se = float(tail.std(ddof=1) / math.sqrt(tail.size)) if tail.size > 1 else 0.0
    excess = v - level
    top = float(excess.max())
    if top <= 0.0:
        return RateFit(None, level)
    # fit only the initial consecutive stretch clearly above the level; later
    # re-crossings are steady-state noise, not transient
    floor = max(4.0 * level_se, 0.02 * top)
    below = np.flatnonzero(excess[:start] <= floor)
    prefix = below[0] if below.size else start
    usable = np.arange(prefix)
    if usable.size < 5:
        return RateFit(None, level)
    slope, _ = np.polyfit(n[usable], np.log(excess[usable]), 1)
    if slope >= 0.0:
        return RateFit(None, level)
    return RateFit(float(math.exp(slope)), level)


def fit_loglog_slope(Ns, values):
    """Least-squares slope of log(value) against log(N), with its std error."""
    Ns = np.asarray(Ns, dtype=float)
    v = np.asarray(values, dtype=float)
    if Ns.size != v.size:
        raise UsageError("N values and measurements must have equal length")
    if Ns.size < 3:
        raise UsageError("slope fit needs at least 3 distinct N values")
    if np.any(np.diff(Ns) <= 0):
        raise UsageError("N values must be strictly increasing (duplicates make the fit degenerate)")
    if np.any(v <= 0):
        raise UsageError("measurements must be positive for a log-log fit")
    x = np.log(Ns)
    y = np.log(v)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    dof = Ns.size - 2
    sxx = float(np.sum((x - x.mean()) ** 2))
    stderr = math.sqrt(float(resid @ resid) / dof / sxx) if dof > 0 else 0.0
    return float(slope), stderr


def summarize_rows(rows) -> dict:
    """Steady-state statistics and transient rate for a row series."""
    w2_rows = [(r.iteration, r.w2_total) for r in rows if r.w2_total is not None]
    summary = {
        "n_rows": len(rows),
        "final_iteration": rows[-1].iteration if rows else 0,
        "final_w2": w2_rows[-1][1] if w2_rows else None,
        "steady_mean": None,
        "steady_se": None,
        "steady_from_iteration": None,
        "contraction_rate": None,
        "steady_level": None,
    }
    if not w2_rows:
        return summary
    its = np.array([r[0] for r in w2_rows], dtype=float)
    vals = np.array([r[1] for r in w2_rows], dtype=float)
    start = steady_window(vals.size)
    tail = vals[start:]
    summary["steady_mean"] = float(tail.mean())
    summary["steady_se"] = (
        float(tail.std(ddof=1) / math.sqrt(tail.size)) if tail.size > 1 else 0.0
    )
    summary["steady_from_iteration"] = int(its[start])
    if vals.size >= 10:
        fit = rate_fit(its, vals)
        summary["contraction_rate"] = fit.contraction_rate
        summary["steady_level"] = fit.steady_state_level
    return summary


@dataclass
class ConvergenceReport:
    """Full trace of one run plus metadata and steady-state summary.

    The metrics file holds only deterministic content (one JSON object per
    recorded iteration) so reruns with the same seed are byte-identical;
    wall-clock timings live in the summary sidecar.
    """

    potential_fingerprint: str
    config: dict
    seed: int
    version: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    wall_times: list = field(default_factory=list)
    wall_total: float = 0.0

    def validate(self):
        last = -1
        for row in self.rows:
            if row.iteration <= last:
                raise UsageError("row iterations must be strictly increasing")
            last = row.iteration
            row.validate()

    def metrics_lines(self) -> list:
        return [
            json.dumps(row.to_dict(), sort_keys=True, separators=(",", ":"))
            for row in self.rows
        ]

    def save(self, outdir) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        self.validate()
        (outdir / METRICS_FILE).write_text("\n".join(self.metrics_lines()) + "\n")
        sidecar = {
            "potential_fingerprint": self.potential_fingerprint,
            "config": self.config,
            "seed": self.seed,
            "version": self.version,
            "summary": self.summary,
            "wall_times": self.wall_times,
            "wall_total": self.wall_total,
        }
        (outdir / SUMMARY_FILE).write_text(json.dumps(sidecar, sort_keys=True, indent=2))

    @classmethod
    def load(cls, outdir) -> "ConvergenceReport":
        outdir = Path(outdir)
        sidecar = json.loads((outdir / SUMMARY_FILE).read_text())
        rows = [
            StepTrace.from_dict(json.loads(line))
            for line in (outdir / METRICS_FILE).read_text().splitlines()
            if line.strip()
        ]
        return cls(
            potential_fingerprint=sidecar["potential_fingerprint"],
            config=sidecar["config"],
            seed=sidecar["seed"],
            version=sidecar["version"],
            rows=rows,
            summary=sidecar["summary"],
            wall_times=sidecar["wall_times"],
            wall_total=sidecar["wall_total"],
        )


@dataclass
class SweepEntry:
    N: int
    h: float
    B: int
    mean_w2: float
    se_w2: float
    per_seed: list

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "h": self.h,
            "B": self.B,
            "mean_w2": self.mean_w2,
            "se_w2": self.se_w2,
            "per_seed": self.per_seed,
        }


@dataclass
class SweepResult:
    """Steady-state level per particle count plus the fitted log-log slope."""

    entries: list
    slope: float
    slope_stderr: float
    seeds: list
    config: dict = field(default_factory=dict)

    @property
    def slope_ci(self):
        """95% confidence interval of the fitted slope."""
        half = 1.96 * self.slope_stderr
        return (self.slope - half, self.slope + half)

    def validate(self):
        Ns = [e.N for e in self.entries]
        if any(b <= a for a, b in zip(Ns, Ns[1:])):
            raise UsageError("sweep entries must have strictly increasing N")
        if not math.isfinite(self.slope):
            raise UsageError("sweep slope must be finite")

    def save(self, path) -> None:
        self.validate()
        doc = {
            "entries": [e.to_dict() for e in self.entries],
            "slope": self.slope,
            "slope_stderr": self.slope_stderr,
            "slope_ci": list(self.slope_ci),
            "seeds": self.seeds,
            "config": self.config,
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2))

    @classmethod
    def load(cls, path) -> "SweepResult":
        doc = json.loads(Path(path).read_text())
        entries = [SweepEntry(**e) for e in doc["entries"]]
        return cls(
            entries=entries,
            slope=doc["slope"],
            slope_stderr=doc["slope_stderr"],
            seeds=doc["seeds"],
            config=doc.get("config", {}),
        )
