"""
Command line front end: `vpblab [options] <command>`.
Every command writes into <output>/<command>/ a manifest.json next to its CSV and JSON artifacts.
"""
import argparse
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np
from joblib import Parallel, delayed

from PyVPBLab.autoinit import ConfigError
from PyVPBLab.collision_core import CoercivityError, CollisionOperator, apply_L, continuum_invariants, \
    estimate_coercivity, fit_nu_bounds, gamma_bilinear, gamma_gain, max_quadratic_form, null_space_identity_residual, \
    null_space_spectrum, reference_gain
from PyVPBLab.decay import build_neutral_data, evolve_modes, field_decay_curve, fit_decay_rate, run_decay_experiment
from PyVPBLab.functionals import EnergySpec, calibrate_energy_spec, sample_states, verify_lyapunov, \
    weighted_decay_bound
from PyVPBLab.kernel_cache import KernelCache
from PyVPBLab.macro_micro import fluid_residual
from PyVPBLab.modal_dynamics import ModalState, evolve_mode, make_modal_state, modal_generator, modal_rhs, \
    verify_unweighted_lyapunov
from PyVPBLab.nonlinear_1d import X_RISE_TOLERANCE, calibrate_constants, check_energy_monotone, evolve_nonlinear, \
    initial_state, solve_poisson, spatial_derivative, track_X, verify_nonlinear_lyapunov, x_grid
from PyVPBLab.reporting import SUMMARY_NAME, TIMING_NAME, RunManifest, config_hash, merge_summary, write_csv, \
    write_json, write_manifest
from PyVPBLab.runner import geometric_stamps
from PyVPBLab.scenario import ExperimentConfig, apply_overrides, parse_config
from PyVPBLab.velocity_space import WeightSpec, weight_time_identity_residual, weight_w

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_VERIFY = 3

COMMANDS = ("assemble-kernel", "spectrum", "modal-run", "decay", "nonlinear-run", "verify", "report")


@dataclass
class RunContext:
    config: ExperimentConfig
    root: Path
    timing: Dict[str, object] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.config.output.seed

    @property
    def threads(self) -> int:
        return self.config.output.threads

    @property
    def cache(self) -> KernelCache:
        return KernelCache(self.config.output.cache_path)

    def directory(self, command: str) -> Path:
        path = self.root / command
        path.mkdir(parents=True, exist_ok=True)
        return path

    def manifest(self, command: str) -> RunManifest:
        return RunManifest(command=command, config_hash=config_hash(self.config), config=self.config.as_dict(),
                           seed=self.seed)

    def main_operator(self):
        kernel = self.config.kernel
        op, hit = self.cache.load_or_assemble(kernel.grid(), kernel.kernel_config(), self.threads)
        self.timing["kernel_cache_hit"] = hit
        return op, hit

    def nonlinear_operator(self):
        section = self.config.nonlinear
        kernel = section.kernel_config(self.config.kernel.kernel_config())
        op, hit = self.cache.load_or_assemble(section.grid(), kernel, self.threads)
        self.timing["nonlinear_kernel_cache_hit"] = hit
        return op, hit


def _operator_summary(op: CollisionOperator) -> Dict:
    low, high = fit_nu_bounds(op)
    return dict(op.metadata, nu_bounds=[low, high], nodes=op.grid.size)


def run_assemble_kernel(ctx: RunContext, manifest: RunManifest):
    op, _ = ctx.main_operator()
    manifest.results.update(_operator_summary(op))
    manifest.artifacts["kernel"] = str(ctx.cache.path_for(op.grid, op.config))


def run_spectrum(ctx: RunContext, manifest: RunManifest):
    op, _ = ctx.main_operator()
    kappa0 = estimate_coercivity(op)
    spectrum = null_space_spectrum(op)
    manifest.constants["kappa0"] = kappa0
    manifest.results.update(_operator_summary(op), kappa0=kappa0, null_space=spectrum)
    order = np.argsort(op.grid.speed_sq, kind="stable")
    path = write_csv(ctx.directory("spectrum") / "nu.csv",
                     {"speed": np.sqrt(op.grid.speed_sq[order]), "nu": op.nu[order]})
    manifest.artifacts["nu"] = str(path)


def _lyapunov_job(op: CollisionOperator, s: ModalState, T: float, spec: EnergySpec, ells) -> List[float]:
    trace = evolve_mode(op, s, T, spec=spec)
    return [verify_lyapunov(trace, spec.with_ell(ell)).kappa for ell in ells] + [
        verify_unweighted_lyapunov(trace).kappa]


def run_modal(ctx: RunContext, manifest: RunManifest):
    op, _ = ctx.main_operator()
    modal, ells = ctx.config.modal, ctx.config.weight.ells
    radii = np.geomspace(modal.lyapunov_k_min, modal.lyapunov_k_max, modal.lyapunov_n_k)
    spec = calibrate_energy_spec(op.grid, op.config.gamma, radii, 0.0, modal.calibration_samples, ctx.seed)
    states = sample_states(op.grid, radii, modal.lyapunov_states * len(radii), ctx.seed + 1)
    logger.info("Lyapunov check on %d modal runs to T = %g.", len(states), modal.lyapunov_T)
    kappas = np.asarray(Parallel(n_jobs=ctx.threads)(
        delayed(_lyapunov_job)(op, s, modal.lyapunov_T, spec, ells) for s in states))
    columns = {"k": [s.k_norm for s in states]}
    for (j, ell) in enumerate(ells):
        columns["kappa_ell{:g}".format(ell)] = kappas[:, j]
    columns["kappa_unweighted"] = kappas[:, -1]
    manifest.artifacts["lyapunov"] = str(write_csv(ctx.directory("modal-run") / "lyapunov.csv", columns))
    manifest.constants.update({name: getattr(spec, name) for name in ("kappa1", "kappa2", "kappa3", "kappa4")})
    manifest.constants["kappa_hat"] = float(np.min(kappas[:, :-1]))
    manifest.results.update(kappa_min={"{:g}".format(ell): float(np.min(kappas[:, j])) for (j, ell) in
                                       enumerate(ells)},
                            all_positive=bool(np.all(kappas > 0)))


def run_decay(ctx: RunContext, manifest: RunManifest):
    op, _ = ctx.main_operator()
    modal, weight = ctx.config.modal, ctx.config.weight
    kgrid = modal.kgrid()
    data = build_neutral_data(op.grid, kgrid, modal.profile())
    spec = calibrate_energy_spec(op.grid, op.config.gamma, kgrid.radii, 0.0, modal.calibration_samples, ctx.seed)
    stamps = geometric_stamps(modal.T, modal.n_stamps)
    traces = evolve_modes(op, kgrid, data, modal.T, stamps, spec, modal.dt or None, ctx.threads)

    curves = {"norm_m0": run_decay_experiment(op, kgrid, data, 0.0, 0.0, traces=traces),
              "norm_m1": run_decay_experiment(op, kgrid, data, 0.0, 1.0, traces=traces),
              "field": field_decay_curve(kgrid, traces)}
    window = (modal.fit_start, modal.fit_end)
    rates = {}
    for (name, curve) in curves.items():
        fit = fit_decay_rate(curve, window)
        rates[name] = {"sigma": fit.sigma, "stderr": fit.stderr, "residual": fit.residual, "n_points": fit.n_points,
                       "window": list(fit.window), "truncation_dominated": curve.truncation_dominated}
        logger.info("Fitted decay rate of %s: %.4f +- %.4f.", name, fit.sigma, fit.stderr)

    kappa_hat = min(verify_lyapunov(t).kappa for t in traces)
    envelope = None
    if kappa_hat > 0:
        eps = modal.eps if modal.eps > 0 else kappa_hat / (8.0 * modal.J)
        report = weighted_decay_bound(traces, spec, weight.ell0, eps, modal.J, ctx.config.p, kappa_hat)
        envelope = {"eps": eps, "C_hat": report.C_hat, "uniformity": report.uniformity,
                    "min_margin": report.min_margin, "violations": report.violations}
    else:
        logger.warning("Skipping the weighted envelope check: fitted kappa = %.3e is not positive.", kappa_hat)

    directory = ctx.directory("decay")
    columns = {"t": curves["norm_m0"].times}
    columns.update({name: curve.values for (name, curve) in curves.items()})
    manifest.artifacts["curves"] = str(write_csv(directory / "decay.csv", columns))
    manifest.artifacts["rates"] = str(write_json(directory / "rates.json", rates))
    manifest.constants.update({name: getattr(spec, name) for name in ("kappa1", "kappa2", "kappa3", "kappa4")})
    manifest.constants["kappa_hat"] = kappa_hat
    manifest.results.update(rates=rates, envelope=envelope, neutral=modal.neutral, a_shape=modal.a_shape)


def run_nonlinear(ctx: RunContext, manifest: RunManifest):
    op, _ = ctx.nonlinear_operator()
    config = ctx.config.nonlinear.solver_config()
    constants = calibrate_constants(op, config, seed=ctx.seed)
    state0 = initial_state(config, op.grid)
    trace = evolve_nonlinear(op, state0, config.T, config.dt or None, config, constants)
    X = track_X(trace)
    monotone = check_energy_monotone(trace)
    lyapunov = verify_nonlinear_lyapunov(trace)
    residual = fluid_residual(trace)

    directory = ctx.directory("nonlinear-run")
    columns = dict(trace.columns(), X=X.X, X_ratio=X.ratio)
    manifest.artifacts["trace"] = str(write_csv(directory / "trace.csv", columns))
    manifest.constants.update(constants.as_dict())
    manifest.results.update(mass_drift=trace.mass_drift, cfl_violation=trace.cfl_violation,
                            initial_size=trace.initial_size, X_final=float(X.X[-1]),
                            X_ratio_final=float(X.ratio[-1]), X_bounded=X.bounded,
                            X_final_half_rise=X.final_half_rise, energy_max_rise=monotone.max_rise,
                            energy_violations=monotone.violations, kappa=lyapunov.kappa,
                            min_f=float(np.min(trace.min_f)), fluid_residual=residual)


class CheckList:
    def __init__(self):
        self.entries = []

    def add(self, name: str, value: float, threshold: float, passed: bool, hard: bool = True):
        self.entries.append({"name": name, "value": float(value), "threshold": float(threshold),
                             "passed": bool(passed), "hard": hard})
        level = logging.INFO if passed else (logging.ERROR if hard else logging.WARNING)
        logger.log(level, "%s %s: %.3e (threshold %.1e)", "PASS" if passed else "FAIL", name, value, threshold)

    def at_most(self, name: str, value: float, threshold: float, hard: bool = True):
        self.add(name, value, threshold, value <= threshold, hard)

    def at_least(self, name: str, value: float, threshold: float, hard: bool = True):
        self.add(name, value, threshold, value >= threshold, hard)

    @property
    def failed(self) -> bool:
        return any(e["hard"] and not e["passed"] for e in self.entries)


def _verify_main_operator(ctx: RunContext, checks: CheckList, manifest: RunManifest):
    op, _ = ctx.main_operator()
    grid = op.grid
    rng = np.random.default_rng(ctx.seed)
    checks.at_most("grid_mass_drift", grid.mass_drift, grid.tol_mass)
    checks.at_most("grid_negation_symmetry", float(np.max(np.abs(grid.nodes + grid.nodes[grid.negation_index]))), 1e-12)
    WK = grid.quad_weights[:, None] * op.K
    checks.at_most("k_symmetry_post", float(np.linalg.norm(WK - WK.T) / np.linalg.norm(WK)), 1e-12)
    checks.at_most("k_symmetry_pre", op.metadata["symmetrization_residual"], 1e-2, hard=False)

    psi = continuum_invariants(grid)
    leak = np.sqrt(grid.norm_sq(apply_L(op, psi, conservative=True)) / grid.norm_sq(psi))
    checks.at_most("null_space", float(np.max(leak)), 5e-3)
    # The raw operator only meets these as the grid is refined.
    checks.at_most("null_space_leakage_raw", op.metadata["null_space_leakage"], 5e-3, hard=False)
    checks.at_most("k_null_identity_raw", null_space_identity_residual(op), 5e-3, hard=False)
    checks.at_most("quadratic_form", max_quadratic_form(op, 1000, ctx.seed, conservative=True), 1e-8)
    checks.at_least("null_space_gap", null_space_spectrum(op, conservative=True)["gap_ratio"], 1e2)
    checks.at_least("null_space_gap_raw", null_space_spectrum(op)["gap_ratio"], 1e2, hard=False)
    try:
        kappa0 = estimate_coercivity(op)
    except CoercivityError as e:
        kappa0 = e.kappa0
    manifest.constants["kappa0"] = kappa0
    checks.at_least("coercivity", kappa0, 1e-2)

    k = np.array([0.7, 0.2, -0.4])
    u = rng.standard_normal(grid.size) + 1j * rng.standard_normal(grid.size)
    expected = modal_generator(op, k) @ u
    actual = modal_rhs(op, make_modal_state(grid, k, u))
    checks.at_most("modal_generator", float(np.linalg.norm(actual - expected) / np.linalg.norm(expected)), 1e-12)

    modal, ells = ctx.config.modal, ctx.config.weight.ells
    radii = np.geomspace(0.05, 5.0, 5)
    spec = calibrate_energy_spec(grid, op.config.gamma, radii, 0.0, modal.calibration_samples, ctx.seed)
    states = sample_states(grid, radii, 10, ctx.seed + 1)
    kappas = np.asarray(Parallel(n_jobs=ctx.threads)(
        delayed(_lyapunov_job)(op, s, 2.0, spec, ells) for s in states))
    for (j, ell) in enumerate(ells):
        checks.at_least("modal_lyapunov_ell{:g}".format(ell), float(np.min(kappas[:, j])), 0.0)
    checks.at_least("modal_lyapunov_unweighted", float(np.min(kappas[:, -1])), 0.0)


def _verify_nonlinear(ctx: RunContext, checks: CheckList):
    op, _ = ctx.nonlinear_operator()
    grid = op.grid
    rng = np.random.default_rng(ctx.seed)
    worst = 0.0
    for _ in range(10):
        u = rng.standard_normal((10, grid.size)) * np.sqrt(grid.sqrt_maxwellian)
        u /= np.sqrt(grid.norm_sq(u))[:, None]
        moments = (gamma_bilinear(op, u, u) * grid.quad_weights) @ grid.invariant_basis
        worst = max(worst, float(np.max(np.abs(moments))))
    checks.at_most("gamma_orthogonality", worst, 1e-8)

    f, g = rng.standard_normal((2, grid.size)) * np.sqrt(grid.sqrt_maxwellian)
    gain = gamma_gain(op, f, g)
    rows = (0, grid.size // 2, int(rng.integers(grid.size)))
    error = max(abs(gain[i] - reference_gain(op, f, g, i)) for i in rows) / np.max(np.abs(gain))
    checks.at_most("gamma_gain_oracle", float(error), 1e-10)

    kernel = op.config
    for gamma in (-2.0, -1.0, -0.5):
        swept, _ = ctx.cache.load_or_assemble(grid, kernel.replace(gamma=gamma), ctx.threads)
        try:
            kappa0 = estimate_coercivity(swept)
        except CoercivityError as e:
            kappa0 = e.kappa0
        checks.at_least("coercivity_gamma{:g}".format(gamma), kappa0, 1e-2)

    config = ctx.config.nonlinear.solver_config()
    x = x_grid(config.n_x, config.length)
    source = np.sin(2.0 * np.pi * x / config.length) + 0.3 * np.cos(4.0 * np.pi * x / config.length)
    mass = np.dot(grid.quad_weights, grid.maxwellian_values)
    phi = solve_poisson(grid, source[:, None] * grid.sqrt_maxwellian / mass, config.length)
    residual = np.max(np.abs(spatial_derivative(phi, config.length, order=2) - source))
    checks.at_most("poisson_roundtrip", float(residual), 1e-12)

    state0 = initial_state(config, grid)
    trace = evolve_nonlinear(op, state0, config.T, config.dt or None, config,
                             calibrate_constants(op, config, seed=ctx.seed))
    checks.at_most("nonlinear_mass_drift", trace.mass_drift, 1e-8)
    monotone = check_energy_monotone(trace)
    checks.at_most("nonlinear_energy_rises", monotone.violations, 0, hard=False)
    checks.at_most("nonlinear_X_final_half_rise", track_X(trace).final_half_rise, X_RISE_TOLERANCE, hard=False)


def _verify_weight(checks: CheckList):
    spec = WeightSpec(tau=-2.0, q=0.01, lam=0.02, theta=0.25, gamma=-1.0)
    xi = np.array([2.0, 0.0, 0.0])
    g, g_rate = 1.0, -0.3
    residual = weight_time_identity_residual(spec, 3.0, xi, g, g_rate)
    scale = float(weight_w(spec, 3.0, xi)) * (abs(g) + abs(g_rate))
    checks.at_most("weight_identity", residual / scale, 1e-6)

    speeds = np.linspace(0.0, 6.0, 13)
    points = np.column_stack([speeds, np.zeros_like(speeds), np.zeros_like(speeds)])
    values = np.array([weight_w(spec, t, points) for t in np.linspace(0.0, 50.0, 26)])
    checks.at_most("weight_time_monotone", float(np.max(np.diff(values, axis=0) / values[:-1])), 0.0)
    by_tau = np.array([weight_w(spec.replace(tau=tau), 1.0, points) for tau in (-1.0, 0.0, 1.0, 2.0)])
    checks.at_most("weight_tau_order", float(np.max(np.diff(by_tau, axis=0) / by_tau[:-1])), 0.0)


def run_verify(ctx: RunContext, manifest: RunManifest) -> bool:
    checks = CheckList()
    _verify_weight(checks)
    _verify_main_operator(ctx, checks, manifest)
    _verify_nonlinear(ctx, checks)
    manifest.artifacts["checks"] = str(write_json(ctx.directory("verify") / "verify.json", checks.entries))
    manifest.results.update(passed=not checks.failed, failed=[e["name"] for e in checks.entries if not e["passed"]])
    return not checks.failed


def run_report(ctx: RunContext) -> Path:
    return write_json(ctx.root / SUMMARY_NAME, merge_summary(ctx.root))


HANDLERS: Dict[str, Callable] = {
    "assemble-kernel": run_assemble_kernel,
    "spectrum": run_spectrum,
    "modal-run": run_modal,
    "decay": run_decay,
    "nonlinear-run": run_nonlinear,
    "verify": run_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vpblab",
                                     description="Numerical laboratory for the linearized and nonlinear "
                                                 "Vlasov-Poisson-Boltzmann system with soft potentials.")
    parser.add_argument("--config", type=Path, default=None, help="INI experiment file (defaults if omitted)")
    parser.add_argument("--seed", type=int, default=None, help="Random seed for samples and checks")
    parser.add_argument("--threads", type=int, default=None, help="Worker processes (-1 for all cores)")
    parser.add_argument("--cache-dir", type=str, default=None, help="Kernel cache directory")
    parser.add_argument("--strict", action="store_true", help="Reject unknown sections and keys")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    parser.add_argument("command", choices=COMMANDS)
    return parser


def run(command: str, config: ExperimentConfig) -> int:
    ctx = RunContext(config=config, root=Path(config.output.directory))
    if command == "report":
        run_report(ctx)
        return EXIT_OK
    manifest = ctx.manifest(command)
    started = time.perf_counter()
    outcome = HANDLERS[command](ctx, manifest)
    ctx.timing["seconds"] = time.perf_counter() - started
    directory = ctx.directory(command)
    manifest.artifacts["timing"] = str(write_json(directory / TIMING_NAME, ctx.timing))
    write_manifest(manifest, directory)
    if command == "verify" and not outcome:
        return EXIT_VERIFY
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = parse_config(args.config, args.strict) if args.config is not None else ExperimentConfig()
        config = apply_overrides(config, args.cache_dir, args.threads, args.seed)
    except ConfigError as e:
        logger.error("%s", e)
        return EXIT_CONFIG
    if args.config is None:
        config.warn_outside_guarantees()
    try:
        return run(args.command, config)
    except (ValueError, RuntimeError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
