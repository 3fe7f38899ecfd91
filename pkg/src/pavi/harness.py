"""Experiment orchestration: config loading, CLI commands, sweeps, checks."""

from __future__ import annotations

import base64
import json
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import dynamics, oracle
from .errors import ConfigError, UsageError
from .metrics import grad_moment_check, w2_reference_profile
from .particles import ParticleArray, ProductEmpirical, RngStream
from .potentials import potential_from_config
from .reports import (
    ConvergenceReport,
    SweepEntry,
    SweepResult,
    fit_loglog_slope,
    rate_fit,
)

__all__ = [
    "load_config",
    "build_reference",
    "run_config_from_doc",
    "cmd_run",
    "cmd_sweep",
    "cmd_oracle",
    "cmd_check",
    "cmd_compare",
    "rate_fit",
    "fit_loglog_slope",
]

CHECKPOINT_FILE = "checkpoint.json"


def load_config(path) -> dict:
    """Read a YAML or JSON config document."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    doc = yaml.safe_load(path.read_text())
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return doc


def build_reference(spec, pot):
    """Resolve the ``reference`` config entry to a ReferenceProduct or None.

    "analytic" gives the closed-form Gaussian product (quadratic targets
    only), "none"/null disables metrics, anything else is read as the path to
    a serialized oracle document.
    """
    if spec is None or spec == "none":
        return None
    if spec == "analytic":
        try:
            return oracle.gaussian_mfvi_solution(pot)
        except UsageError as err:
            raise ConfigError(str(err)) from None
    return oracle.load_reference(spec)


def run_config_from_doc(doc, seed=None) -> dynamics.RunConfig:
    try:
        N = int(doc["N"])
        T = int(doc["T"])
    except KeyError as missing:
        raise ConfigError(f"run config missing key {missing}") from None
    cfg = dynamics.RunConfig(
        N=N,
        T=T,
        h=doc.get("h"),
        B=doc.get("B"),
        schedule=doc.get("schedule", "corollary"),
        algorithm=doc.get("algorithm", "pavi"),
        seed=int(doc.get("seed", 0) if seed is None else seed),
        metrics_every=doc.get("metrics_every"),
    )
    return cfg


def _init_from_doc(doc):
    init = doc.get("init", "standard_normal")
    if isinstance(init, dict) and "point" in init:
        return ("point", np.asarray(init["point"], dtype=float))
    return init


def cmd_run(doc, out_dir=None, seed=None, threads=None, resume=False) -> ConvergenceReport:
    """Execute one run described by a config document and persist the report."""
    pot = potential_from_config(doc.get("potential") or _missing("potential"))
    cfg = run_config_from_doc(doc, seed)
    ref = build_reference(doc.get("reference"), pot)
    out = Path(out_dir or doc.get("output") or "pavi_out")
    out.mkdir(parents=True, exist_ok=True)
    report = dynamics.run(
        pot,
        cfg,
        ref,
        init=_init_from_doc(doc),
        threads=int(threads if threads is not None else doc.get("threads", 1)),
        checkpoint_path=out / CHECKPOINT_FILE,
        checkpoint_every=doc.get("checkpoint_every"),
        resume=resume,
    )
    report.save(out)
    return report


def _missing(key):
    raise ConfigError(f"config missing key {key!r}")


def run_replications(pot, base_cfg, reference, seeds, *, init="standard_normal", threads=1):
    """Run the same configuration under several seeds.

    Replications are independent jobs; with threads > 1 they execute in a
    thread pool, each run internally single-threaded.
    """

    def one(seed):
        cfg = dynamics.RunConfig(**{**base_cfg.to_dict(), "seed": int(seed)})
        return dynamics.run(pot, cfg, reference, init=init)

    seeds = [int(s) for s in seeds]
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, seeds))
    return [one(s) for s in seeds]


def cmd_sweep(doc, out_dir=None, seed=None, threads=None) -> SweepResult:
    """Replicate runs across particle counts and fit the steady-state slope.

    Each N uses the corollary schedule; the fitted quantity is
    log(mean steady-state W2) against log N by least squares.
    """
    pot = potential_from_config(doc.get("potential") or _missing("potential"))
    ref_spec = doc.get("reference")
    if ref_spec in (None, "none"):
        raise UsageError("sweep needs an analytic or oracle reference for the slope")
    ref = build_reference(ref_spec, pot)
    N_list = [int(n) for n in doc.get("N_list") or _missing("N_list")]
    if len(N_list) < 3:
        raise UsageError("sweep needs at least 3 particle counts for a slope")
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise UsageError(
            "sweep particle counts must be strictly increasing "
            "(duplicates make the design matrix degenerate)"
        )
    R = int(doc.get("replications", 16))
    if R < 1:
        raise UsageError("replications must be >= 1")
    T = int(doc.get("T") or _missing("T"))
    base_seed = int(doc.get("seed", 0) if seed is None else seed)
    seeds = [base_seed + r for r in range(R)]
    threads = int(threads if threads is not None else doc.get("threads", 1))

    entries = []
    for N in N_list:
        h, B = dynamics.corollary_schedule(pot.lip, N)
        cfg = dynamics.RunConfig(
            N=N, T=T, schedule="corollary", algorithm=doc.get("algorithm", "pavi"),
            metrics_every=doc.get("metrics_every"),
        )
        reports = run_replications(
            pot, cfg, ref, seeds, init=_init_from_doc(doc), threads=threads
        )
        per_seed = [r.summary["steady_mean"] for r in reports]
        mean = float(np.mean(per_seed))
        se = float(np.std(per_seed, ddof=1) / math.sqrt(len(per_seed))) if R > 1 else 0.0
        entries.append(SweepEntry(N=N, h=h, B=B, mean_w2=mean, se_w2=se, per_seed=per_seed))

    slope, stderr = fit_loglog_slope([e.N for e in entries], [e.mean_w2 for e in entries])
    result = SweepResult(
        entries=entries, slope=slope, slope_stderr=stderr, seeds=seeds,
        config={"T": T, "replications": R, "N_list": N_list},
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.save(out / "sweep.json")
    return result


def cmd_oracle(doc, out_path=None):
    """Compute and serialize a reference solution.

    Quadratic targets take the analytic path unless ``method: grid`` forces
    the solver; other targets always solve on the grid.  By default the grid
    path is re-run from a second starting point and the agreement between the
    two fixed points is recorded.
    """
    pot = potential_from_config(doc.get("potential") or _missing("potential"))
    method = doc.get("method", "auto")
    out = Path(out_path or doc.get("output") or "reference.json")
    analytic_ok = isinstance(pot, oracle.QuadraticPotential) and not isinstance(
        pot, oracle.PerturbedQuadraticPotential
    )
    if method == "auto":
        method = "analytic" if analytic_ok else "grid"
    if method == "analytic":
        if not analytic_ok:
            raise ConfigError("analytic oracle is only available for the quadratic family")
        ref = oracle.gaussian_mfvi_solution(pot)
    elif method == "grid":
        if pot.m > 3 and not pot.has_conditional_mean_gradient:
            raise oracle.ScaleError(
                f"grid oracle supports m <= 3 without a separable conditional "
                f"gradient; got m={pot.m}"
            )
        G = int(doc.get("grid_size", oracle.DEFAULT_GRID_SIZE))
        tol = float(doc.get("tol", 1e-8))
        max_iter = int(doc.get("max_iter", 300))
        damping = float(doc.get("damping", 1.0))
        half_width = doc.get("half_width")
        solved = oracle.fixed_point_solve(
            pot,
            oracle.initial_grid_product(pot, G, "uniform", half_width),
            tol,
            max_iter,
            damping,
        )
        if doc.get("check_inits", True):
            other = oracle.fixed_point_solve(
                pot,
                oracle.initial_grid_product(pot, G, "narrow", half_width),
                tol,
                max_iter,
                damping,
            )
            agreement = max(
                a.w2_to(b) for a, b in zip(solved.marginals, other.marginals)
            )
            solved.residual.init_agreement_w2 = float(agreement)
        ref = oracle.grid_reference(solved)
    else:
        raise ConfigError(f"unknown oracle method {method!r}")
    out.parent.mkdir(parents=True, exist_ok=True)
    oracle.save_reference(out, ref)
    return out


def _check_line(lines, name, passed, detail):
    lines.append((name, bool(passed), detail))


def cmd_check(doc, trials=None, seed=None):
    """Validate the potential's declared constants and gradient by sampling.

    Returns (all_passed, lines) where each line is (name, passed, detail);
    the CLI prints one line per check.
    """
    pot = potential_from_config(doc.get("potential") or _missing("potential"))
    trials = int(trials if trials is not None else doc.get("trials", 1000))
    gen = RngStream(int(doc.get("seed", 0) if seed is None else seed)).generator(0, "sample")
    center = oracle.minimizer(pot)
    scale = 2.0 / math.sqrt(pot.alpha)
    m = pot.m
    lines = []

    # gradient vs centered finite differences
    delta = 1e-4
    xs = center[:, None] + scale * gen.standard_normal((m, trials))
    grads = pot.gradient_cols(xs)
    worst = 0.0
    for i in range(m):
        shift = np.zeros((m, 1))
        shift[i, 0] = delta
        fd = (pot.value_cols(xs + shift) - pot.value_cols(xs - shift)) / (2 * delta)
        err = np.abs(grads[i] - fd) / (1.0 + np.abs(grads[i]))
        worst = max(worst, float(err.max()))
    _check_line(
        lines, "gradient_consistency", worst <= 1e-6,
        f"max relative finite-difference error {worst:.3e} (tol 1e-6)",
    )

    # directional second differences inside [alpha, lip]
    delta = 1e-5
    xs = center[:, None] + scale * gen.standard_normal((m, trials))
    us = gen.standard_normal((m, trials))
    us /= np.linalg.norm(us, axis=0, keepdims=True)
    quot = np.einsum(
        "ik,ik->k", us, pot.gradient_cols(xs + delta * us) - pot.gradient_cols(xs)
    ) / delta
    lo, hi = float(quot.min()), float(quot.max())
    ok = lo >= pot.alpha - 1e-3 and hi <= pot.lip + 1e-3
    _check_line(
        lines, "convexity_sandwich", ok,
        f"directional curvature in [{lo:.6g}, {hi:.6g}], "
        f"declared [alpha={pot.alpha:.6g}, lip={pot.lip:.6g}]",
    )

    # gradient-step contraction at h = 1/(alpha+lip)
    h = 1.0 / (pot.alpha + pot.lip)
    xs = center[:, None] + scale * gen.standard_normal((m, trials))
    ys = center[:, None] + scale * gen.standard_normal((m, trials))
    phi_x = xs - h * pot.gradient_cols(xs)
    phi_y = ys - h * pot.gradient_cols(ys)
    num = np.linalg.norm(phi_x - phi_y, axis=0)
    den = np.linalg.norm(xs - ys, axis=0)
    slack = num - (1.0 - pot.alpha * h) * den
    worst = float(slack.max())
    _check_line(
        lines, "contraction_map", worst <= 1e-12,
        f"max contraction slack {worst:.3e} at h=1/(alpha+lip)={h:.6g}",
    )

    # moment bounds under the reference, when one is attached
    ref_spec = doc.get("reference")
    if ref_spec not in (None, "none"):
        ref = build_reference(ref_spec, pot)
        K = int(doc.get("samples", 20000))
        samples = oracle.sample_reference(ref, K, gen)
        moments = grad_moment_check(pot, samples)
        mean_bound = 4.0 * math.sqrt(m * pot.lip**2 / pot.alpha / K)
        sq_bound = m * pot.lip**2 / pot.alpha * 1.05
        var_bound = 1.05 / pot.alpha
        ok = (
            moments.mean_grad_norm <= mean_bound
            and moments.mean_sq_grad <= sq_bound
            and np.all(moments.coordinate_variances <= var_bound)
        )
        _check_line(
            lines, "reference_moments", ok,
            f"|mean grad| {moments.mean_grad_norm:.4g} (<= {mean_bound:.4g}), "
            f"mean sq grad {moments.mean_sq_grad:.4g} (<= {sq_bound:.4g}), "
            f"max coord var {moments.coordinate_variances.max():.4g} (<= {var_bound:.4g})",
        )

    return all(p for _, p, _ in lines), lines


def _load_compare_side(path):
    path = Path(path)
    if path.is_dir():
        return ("report", ConvergenceReport.load(path), path)
    doc = json.loads(path.read_text())
    if doc.get("format") == "pavi-reference-v1":
        return ("reference", oracle.load_reference(path), path)
    raise UsageError(f"{path} is neither a report directory nor a reference document")


def cmd_compare(path_a, path_b) -> dict:
    """W2 deltas between two reports, or a report and a reference."""
    kind_a, a, dir_a = _load_compare_side(path_a)
    kind_b, b, dir_b = _load_compare_side(path_b)
    if kind_a == kind_b == "report":
        rows_a = {r.iteration: r.w2_total for r in a.rows if r.w2_total is not None}
        rows_b = {r.iteration: r.w2_total for r in b.rows if r.w2_total is not None}
        shared = sorted(set(rows_a) & set(rows_b))
        if not shared:
            raise UsageError("reports share no recorded iterations with W2 values")
        deltas = [rows_a[n] - rows_b[n] for n in shared]
        return {
            "mode": "report-report",
            "shared_iterations": len(shared),
            "mean_abs_delta": float(np.mean(np.abs(deltas))),
            "final_delta": float(deltas[-1]),
            "steady_delta": (
                None
                if a.summary.get("steady_mean") is None
                or b.summary.get("steady_mean") is None
                else float(a.summary["steady_mean"] - b.summary["steady_mean"])
            ),
        }
    if kind_a == kind_b:
        raise UsageError("compare takes two reports, or one report and one reference")
    report, rep_dir = (a, dir_a) if kind_a == "report" else (b, dir_b)
    ref = b if kind_b == "reference" else a
    ckpt = rep_dir / CHECKPOINT_FILE
    if not ckpt.exists():
        raise UsageError(
            f"report at {rep_dir} has no {CHECKPOINT_FILE}; rerun with checkpointing "
            "to compare final particles against a reference"
        )
    doc = json.loads(ckpt.read_text())
    m, N = doc["shape"]
    vals = np.frombuffer(base64.b64decode(doc["particles"]), dtype="<f8").reshape(m, N)
    per, total = w2_reference_profile(ProductEmpirical(ParticleArray(vals.copy())), ref)
    return {
        "mode": "report-reference",
        "iteration": doc["next_iteration"],
        "w2_total": total,
        "w2_coord": [float(p) for p in per],
    }
