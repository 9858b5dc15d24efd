"""Command line runner: ``qmeasure <subcommand> --config FILE [--out DIR] [--seed S] [--threads K]``.

Each run writes ``results.csv`` (one row per sweep point, complex values as
``_re``/``_im`` column pairs) and ``summary.json`` into the output directory.

Exit codes: 0 success, 1 failed check or numerical failure, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from . import coleman_hepp as ch
from . import measurement
from .approximant import (
    ContinuumProxy,
    approximant,
    format_rational,
    make_partition,
    rationalize,
    tradeoff_report,
)
from .config import KINDS, ConfigError, ExperimentConfig, expand_grid, load
from .linalg import PAULI_X, commutator_norm, operator_norm, random_hermitian

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
F_TOL = 1e-10
ORACLE_TOL = 1e-9


@dataclass
class SweepResult:
    columns: list[str]
    rows: list[list] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    error: str | None = None
    passed: bool = True


def _map(fn: Callable, items: Sequence, threads: int, result: SweepResult) -> None:
    """Append ``fn(item)`` rows in input order; stop at the first failure and record it."""
    with ThreadPoolExecutor(max_workers=threads) as pool:
        it = pool.map(fn, items) if threads > 1 else map(fn, items)
        try:
            for row in it:
                result.rows.append(row)
        except Exception as exc:  # partial results are kept
            result.error = f"{type(exc).__name__}: {exc}"
            result.passed = False


def _amplitudes(spec, n: int, rng: np.random.Generator) -> np.ndarray:
    if spec == "uniform":
        return np.full(n, 1 / math.sqrt(n), dtype=np.complex128)
    if spec == "random":
        c = rng.normal(size=n) + 1j * rng.normal(size=n)
        return c / np.linalg.norm(c)
    c = np.array([complex(a, b) for a, b in spec])
    return c / np.linalg.norm(c)


def _f_columns(n: int, nu: int) -> list[str]:
    cols = []
    for r in range(n):
        for s in range(n):
            for a in range(nu):
                cols += [f"F_{r}_{s}_{a}_re", f"F_{r}_{s}_{a}_im"]
    return cols


def _f_cells(f: measurement.FTensor) -> list[float]:
    out = []
    for z in f.values.reshape(-1):
        out += [float(z.real), float(z.imag)]
    return out


def _diagnostics(system: measurement.SystemModel, f: measurement.FTensor, a) -> list[float]:
    nan = float("nan")
    w = measurement.pointer_probabilities(system, f)
    e = measurement.expectation(system, f, a)
    collapse = abs(e - float(np.sum(system.populations * np.diagonal(a).real)))
    try:
        pointer = measurement.infer_pointer_map(f)
    except measurement.AmbiguousPointerError:
        pointer = None
    offdiag, deficit = nan, nan
    projection, born = nan, nan
    if pointer is not None:
        rep = measurement.ideality_report(f, pointer)
        offdiag, deficit = rep.offdiag_max, rep.diag_deficit
        if pointer.bijective:
            cr = measurement.collapse_check(system, f, a, pointer)
            projection, born = cr.projection_residual, cr.born_residual
    bij = float(pointer.bijective) if pointer is not None else nan
    return [*map(float, w), e, offdiag, deficit, bij, collapse, projection, born]


def run_simulate(cfg: ExperimentConfig, threads: int) -> SweepResult:
    p = cfg.params
    rng = np.random.default_rng(cfg.seed)
    if p["model"] == "random":
        model = measurement.random_model(rng, p["n"], p["dim_k"], p["nu"], p["coupling_scale"])
        energies = model.system.energies if p["energies"] is None else np.array(p["energies"])
        amps = _amplitudes(p["amplitudes"], p["n"], rng)
        model = measurement.build_coupled(measurement.SystemModel(energies, amps), model.apparatus,
                                     model.couplings)
        system, nu = model.system, model.nu

        def f_at(t):
            return measurement.f_coefficients(model, t)
    else:
        app = ch.SpinChainApparatus(p["n_spins"], tuple(p["angles"]))
        bands = ch.MagnetizationBands.majority(app.n_spins) if app.n_levels == 2 else \
            ch.MagnetizationBands.equal_width(app.n_spins, app.n_levels)
        amps = _amplitudes(p["amplitudes"], app.n_levels, rng)
        system, nu = measurement.SystemModel(p["energies"], amps), bands.count

        def f_at(t):
            return ch.f_coefficients_structured(app, bands, t, p["energies"])
    n = system.n
    obs = PAULI_X if p["observable"] == "sigma_x" else random_hermitian(rng, n)
    cols = ["t", *[f"w_{a}" for a in range(nu)], "expectation", "offdiag_max", "diag_deficit",
            "bijective", "collapse_residual", "projection_residual", "born_residual",
            *_f_columns(n, nu)]
    result = SweepResult(cols)

    def row(t):
        f = f_at(t)
        return [float(t), *_diagnostics(system, f, obs), *_f_cells(f)]

    _map(row, expand_grid(p["times"]), threads, result)
    result.summary = {"n": n, "nu": nu, "amplitudes": [[c.real, c.imag] for c in amps]}
    return result


def _t_star(p: dict) -> float:
    if "t_star" in p:
        return p["t_star"]
    return ch.readout_time(max(p["angles"], key=abs), p["p_up"])


def run_ch_sweep(cfg: ExperimentConfig, threads: int) -> SweepResult:
    p = cfg.params
    t_star = _t_star(p)
    n_levels = len(p["angles"])
    bands = ch.MagnetizationBands.majority if n_levels == 2 else \
        (lambda n_spins: ch.MagnetizationBands.equal_width(n_spins, n_levels))
    result = SweepResult(["N", "eta", "log_eta"])

    def row(n_spins):
        (_, eta), = ch.eta_sweep([n_spins], p["angles"], t_star, bands, p["energies"])
        return [n_spins, eta, math.log(eta) if eta > 0 else float("-inf")]

    _map(row, expand_grid(p["n_spins"]), threads, result)
    summary = {"t_star": t_star, "n_levels": n_levels}
    try:
        fit = ch.fit_exponential([(r[0], r[1]) for r in result.rows], n_levels)
        summary.update(c_hat=fit.c_hat, intercept=fit.intercept, r_squared=fit.r_squared,
                       fit_points=fit.n_points)
    except ValueError as exc:
        summary["fit_error"] = str(exc)
    result.summary = summary
    return result


def run_reliability(cfg: ExperimentConfig, threads: int) -> SweepResult:
    p = cfg.params
    result = SweepResult(["N", "n", "p", "misread_probability", "risk_exponent"])

    def row(pair):
        n_spins, n_bands = pair
        prob = p.get("p")
        if prob is None:
            prob = (n_bands // 2 + 0.5) / n_bands
        return [n_spins, n_bands, prob, ch.reliability_probe(n_spins, n_bands, prob),
                n_spins / n_bands ** 2]

    _map(row, p["pairs"], threads, result)
    probs = [r[3] for r in result.rows if r[3] > 0]
    result.summary = {"spread_factor": max(probs) / min(probs) if probs else None}
    return result


def run_approximant(cfg: ExperimentConfig, threads: int) -> SweepResult:
    p = cfg.params
    lo, hi = p["range"]
    if p["proxy"] == "position":
        proxy = ContinuumProxy.position(p["grid_dim"], lo, hi)
    else:
        proxy = ContinuumProxy.random(np.random.default_rng(cfg.seed), p["grid_dim"], lo, hi)
    part = make_partition(lo, hi, p["epsilon"], p["rule"])
    fa = approximant(proxy, part)
    inst = rationalize(part, p["max_denominator"])
    counts = np.bincount(part.locate(np.linalg.eigvalsh(proxy.operator)), minlength=part.n_bins)
    result = SweepResult(["bin", "lower", "upper", "representative", "readout", "readout_value",
                          "eigenvalue_count"])
    for k in range(part.n_bins):
        b_lo, b_hi = part.bin_bounds(k)
        r = inst.readouts[k]
        result.rows.append([k, b_lo, b_hi, part.representatives[k], format_rational(r),
                            float(r), int(counts[k])])
    report = tradeoff_report(lo, hi, p["epsilon"], p["apparatus_size"])
    result.summary = {
        "error_norm": operator_norm(proxy.operator - fa),
        "commutator_norm": commutator_norm(proxy.operator, fa),
        "n_bins": part.n_bins,
        "partition": part.to_dict(),
        "readouts": inst.as_strings(),
        "tradeoff": asdict(report),
    }
    return result


@dataclass
class Check:
    name: str
    value: float
    bound: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.bound)


def _inject(f: measurement.FTensor, fault: str) -> measurement.FTensor:
    v = np.array(f.values)
    if fault == "sum-rule":
        v[0, 0, :] *= 1.25
    elif fault == "hermitian":
        v[0, 1, 0] += 0.1j
    return measurement.FTensor(f.time, v)


def verify_checks(cfg: ExperimentConfig) -> list[Check]:
    p = cfg.params
    rng = np.random.default_rng(cfg.seed)
    checks: list[Check] = []
    dense_model = None
    if p["model"] == "random":
        model = measurement.random_model(rng, p["n"], p["dim_k"], p["nu"])
        amps = _amplitudes(p["amplitudes"], p["n"], rng)
        model = measurement.build_coupled(measurement.SystemModel(model.system.energies, amps),
                                     model.apparatus, model.couplings)
        f = measurement.f_coefficients(model, p["t"])
        dense_model, t = model, p["t"]
    elif p["model"] == "coleman-hepp":
        app = ch.SpinChainApparatus(p["n_spins"], tuple(p["angles"]))
        bands = ch.MagnetizationBands.majority(app.n_spins) if app.n_levels == 2 else \
            ch.MagnetizationBands.equal_width(app.n_spins, app.n_levels)
        t = _t_star(p)
        amps = _amplitudes(p["amplitudes"], app.n_levels, rng)
        f = ch.f_coefficients_structured(app, bands, t)
        dense_model = ch.dense_model(app, bands, amps)
        model = dense_model
        dense_f = measurement.f_coefficients(dense_model, t)
        checks.append(Check("structured F equals dense F",
                            float(np.max(np.abs(f.values - dense_f.values))), F_TOL))
    else:
        n = p["n"]
        amps = _amplitudes(p["amplitudes"], n, rng)
        model = measurement.SystemModel(np.zeros(n), amps)
        v = np.zeros((n, n, n), dtype=np.complex128)
        v[np.arange(n), np.arange(n), np.arange(n)] = 1.0
        f = measurement.FTensor(0.0, v)
    f = _inject(f, p["fault"])

    for name, value in measurement.f_condition_violations(f).items():
        checks.append(Check(f"F condition: {name.replace('_', ' ')}", value, F_TOL))

    n = f.n
    obs = PAULI_X if n == 2 else random_hermitian(rng, n)
    if dense_model is not None:
        phi = measurement.full_state(dense_model, t)
        w = measurement.pointer_probabilities(model, f)
        checks.append(Check("pointer probabilities match coupled state",
                            float(np.max(np.abs(w - measurement.dense_pointer_probabilities(model, phi)))),
                            ORACLE_TOL))
        checks.append(Check("expectation matches coupled state",
                            abs(measurement.expectation(model, f, obs)
                                - measurement.dense_expectation(model, phi, obs)), ORACLE_TOL))
        worst = 0.0
        for a in range(f.nu):
            if w[a] > 1e-6:
                worst = max(worst, abs(measurement.conditional_expectation(model, f, obs, a)
                                       - measurement.dense_conditional_expectation(model, phi, obs, a)))
        checks.append(Check("conditional expectations match coupled state", worst, ORACLE_TOL))

    try:
        pointer = measurement.infer_pointer_map(f)
    except measurement.AmbiguousPointerError:
        pointer = None
    if pointer is not None and pointer.bijective:
        rep = measurement.ideality_report(f, pointer)
        eta = rep.diag_deficit
        checks.append(Check("interference bounded by diagonal deficit",
                            rep.offdiag_max, math.sqrt(2 * eta) + F_TOL))
        cr = measurement.collapse_check(model, f, obs, pointer)
        bound = max(10 * eta, F_TOL)
        checks.append(Check("collapse of the expectation", cr.collapse_residual, bound))
        checks.append(Check("conditional state is the eigenstate", cr.projection_residual, bound))
        checks.append(Check("Born weights", cr.born_residual, bound))
    elif p["model"] != "random":
        checks.append(Check("pointer map bijective", 1.0, 0.0))
    return checks


def run_verify(cfg: ExperimentConfig, threads: int) -> SweepResult:
    result = SweepResult(["check", "value", "bound", "passed"])
    try:
        checks = verify_checks(cfg)
    except Exception as exc:
        result.error = f"{type(exc).__name__}: {exc}"
        result.passed = False
        return result
    for c in checks:
        result.rows.append([c.name, c.value, c.bound, int(c.passed)])
    result.passed = all(c.passed for c in checks)
    result.summary = {"checks": len(checks), "failed": [c.name for c in checks if not c.passed]}
    return result


RUNNERS = {"simulate": run_simulate, "ch-sweep": run_ch_sweep, "reliability": run_reliability,
           "approximant": run_approximant, "verify": run_verify}


def _cell(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path: Path, result: SweepResult) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(result.columns)
        for row in result.rows:
            w.writerow([_cell(x) for x in row])


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


def run(cfg: ExperimentConfig, out_dir: Path, threads: int | None = None) -> SweepResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = RUNNERS[cfg.kind](cfg, threads or cfg.threads)
    write_csv(out_dir / "results.csv", result)
    summary = {
        "kind": cfg.kind,
        "schema": cfg.schema,
        "version": __version__,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "rows": len(result.rows),
        "passed": result.passed,
        "error": result.error,
        "wall_time_s": time.perf_counter() - start,
        **result.summary,
    }
    (out_dir / "summary.json").write_text(json.dumps(_json_safe(summary), indent=2) + "\n",
                                          encoding="utf-8")
    return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qmeasure", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind)
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--out", help="output directory (default: config 'output')")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, help="worker threads for sweep points")
    return parser


def main(argv: Iterable[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config, kind=args.command)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("--seed: must be an unsigned 64-bit integer")
            cfg.seed = args.seed
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
    except ConfigError as exc:
        print(f"qmeasure: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(args.out or cfg.output)
    result = run(cfg, out_dir, args.threads)
    if cfg.kind == "verify":
        for row in result.rows:
            mark = "PASS" if row[3] else "FAIL"
            print(f"[{mark}] {row[0]}: {row[1]:.3e} (bound {row[2]:.3e})")
    if result.error:
        print(f"qmeasure: {result.error}", file=sys.stderr)
    return EXIT_OK if result.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
