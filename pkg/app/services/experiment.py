"""Experiment files, sweep execution and CSV tables."""

import configparser
import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Any

from pydantic import ValidationError

from app import __version__
from app.config import get_settings
from app.schemas.experiment import AxisName, ExperimentMode, ExperimentSpec, SweepAxis, ValidationSettings
from app.schemas.simulation import SimConfig, SimMetrics
from app.schemas.system import PolicyConfig, Reselection, SystemParams
from app.services.channel import derive_constants
from app.services.closed_form import (
    MAX_SU,
    UnstableArrivalError,
    avg_delay,
    f_p,
    f_ps,
    link_stats,
    relay_link_success,
    su_throughput,
    throughput_bound,
)
from app.services.oracle import monte_carlo_success
from app.services.simulator import get_simulation_service

logger = logging.getLogger("coop_relay")

PROVENANCE_FIELDS = [
    "series",
    "policy",
    "reselect_on_silence",
    "n_su",
    "lambda_p",
    "rate_r0",
    "p0_over_n0",
    "pmax_over_n0",
    "sigma_p_sq",
]
AXIS_FIELDS = ["axis", "axis_value"]
ANALYTIC_FIELDS = ["f_p", "f_ps", "f_rstar", "f_sstar", "bound", "mu_s", "tau", "n_p", "n_r", "status"]
MONTE_CARLO_FIELDS = ["f_rstar_mc", "f_rstar_mc_ci"]
SIM_FIELDS = [
    "seed",
    "slots",
    "warmup_slots",
    "sim_pu_throughput",
    "sim_su_throughput",
    "sim_su_spread",
    "sim_avg_delay",
    "sim_mean_qp",
    "sim_mean_qr",
    "sim_relay_success",
    "sim_own_success",
    "sim_relayed_fraction",
    "sim_avg_power_s",
    "sim_avg_power_r",
    "sim_cond_power_s",
    "sim_cond_power_r",
    "sim_failed_active",
    "sim_stability",
    "sim_stability_slope",
]
VALIDATE_FIELDS = ["check", "policy", "n_su", "observed", "expected", "delta", "tolerance", "passed"]

MODE_FIELDS: dict[ExperimentMode, list[str]] = {
    ExperimentMode.ANALYTIC: PROVENANCE_FIELDS + AXIS_FIELDS + ANALYTIC_FIELDS,
    ExperimentMode.SIMULATE: PROVENANCE_FIELDS + SIM_FIELDS,
    ExperimentMode.SWEEP: PROVENANCE_FIELDS + AXIS_FIELDS + ANALYTIC_FIELDS + MONTE_CARLO_FIELDS + SIM_FIELDS,
    ExperimentMode.VALIDATE: VALIDATE_FIELDS,
}

ALL_COMBOS = "EP-BSL, EP-BPL, AP-BSL, AP-BPL"


class ConfigError(ValueError):
    """Raised for malformed or inconsistent experiment files."""


def db_to_linear(value_db: float) -> float:
    return float(10.0 ** (value_db / 10.0))


# --- Experiment files ---


def _section(parser: configparser.ConfigParser, name: str) -> dict[str, str]:
    return dict(parser[name]) if parser.has_section(name) else {}


def _floats(text: str) -> list[float]:
    return [float(item) for item in text.split(",") if item.strip()]


def _ints(text: str) -> list[int]:
    return [int(item) for item in text.split(",") if item.strip()]


def _ratio(section: dict[str, str], prefix: str, default_db: str) -> float:
    if f"{prefix}_over_n0" in section:
        return float(section[f"{prefix}_over_n0"])
    return db_to_linear(float(section.get(f"{prefix}_db", default_db)))


def _validation_settings(section: dict[str, str]) -> ValidationSettings:
    settings = get_settings()
    values: dict[str, Any] = {
        "mc_draws": settings.MC_DRAWS,
        "ks_samples": settings.KS_SAMPLES,
        "bpl_gap_tolerance": settings.BPL_GAP_TOLERANCE,
    }
    for key, text in section.items():
        if key in ("n_grid", "ks_n_grid"):
            values[key] = _ints(text)
        elif key in ("a_grid", "lambdas", "pmax_db_grid"):
            values[key] = _floats(text)
        else:
            values[key] = text
    return ValidationSettings(**values)


def load_experiment(
    path: str | Path | None = None,
    *,
    mode: str | None = None,
    seed: int | None = None,
    slots: int | None = None,
    output: str | Path | None = None,
    workers: int | None = None,
) -> ExperimentSpec:
    """Read an INI experiment file (or defaults when ``path`` is None) and apply CLI overrides.

    dB quantities are converted to linear ratios here and nowhere else.
    """
    settings = get_settings()
    parser = configparser.ConfigParser()
    try:
        if path is not None and not parser.read(path):
            raise ConfigError(f"Cannot read experiment file {path}")
    except configparser.Error as e:
        raise ConfigError(f"Malformed experiment file {path}: {e}") from e

    experiment = _section(parser, "experiment")
    system = _section(parser, "system")
    policy = _section(parser, "policy")
    sweep = _section(parser, "sweep")
    validate = _section(parser, "validate")

    try:
        series = _ints(system.get("n_su", "2"))
        reselect = Reselection(policy.get("reselect_on_silence", Reselection.ANALYSIS_FAITHFUL.value))
        params = SystemParams(
            n_su=series[0] if series else 2,
            lambda_p=float(system.get("lambda_p", "0.1")),
            rate_r0=float(system.get("rate_r0", "2")),
            p0_over_n0=_ratio(system, "p0", "10"),
            pmax_over_n0=_ratio(system, "pmax", "7"),
            sigma_p_sq=float(system.get("sigma_p_sq", "0.25")),
        )
        axis = None
        if sweep:
            axis = SweepAxis(
                name=AxisName(sweep["axis"]),
                start=float(sweep["start"]),
                stop=float(sweep["stop"]),
                step=float(sweep["step"]),
            )
        validation = _validation_settings(validate)
        spec = ExperimentSpec(
            mode=ExperimentMode(mode or experiment.get("mode", ExperimentMode.ANALYTIC.value)),
            params=params,
            series=series,
            policies=[
                PolicyConfig.from_label(label, reselect)
                for label in policy.get("combos", ALL_COMBOS).split(",")
                if label.strip()
            ],
            axis=axis,
            output=output if output is not None else experiment.get("output") or None,
            seed=seed if seed is not None else int(experiment.get("seed", str(settings.SIM_SEED))),
            slots=slots if slots is not None else int(experiment.get("slots", str(settings.SIM_SLOTS))),
            warmup_slots=int(experiment.get("warmup_slots", str(settings.SIM_WARMUP_SLOTS))),
            workers=workers if workers is not None else int(experiment.get("workers", str(settings.SWEEP_WORKERS))),
            mc_draws=int(experiment.get("mc_draws", "0")),
            validation=validation,
        )
    except ConfigError:
        raise
    except (KeyError, ValueError, ValidationError) as e:
        raise ConfigError(f"Invalid experiment file {path or '<defaults>'}: {e}") from e

    if spec.mode is not ExperimentMode.SIMULATE:
        largest = max(spec.series + ([int(spec.axis.stop)] if spec.axis and spec.axis.name is AxisName.N_SU else []))
        if largest > MAX_SU:
            raise ConfigError(f"analytic evaluation supports N <= {MAX_SU}, got {largest}")
    return spec


# --- Rows ---


@dataclass(frozen=True)
class Point:
    series: int
    params: SystemParams
    policy: PolicyConfig
    axis_value: float | None
    seed: int


@dataclass
class ExperimentResult:
    fieldnames: list[str]
    rows: list[dict[str, Any]] = field(default_factory=list)
    passed: bool = True


def apply_axis(params: SystemParams, axis: AxisName, value: float) -> SystemParams:
    updates: dict[str, Any] = {
        AxisName.PMAX_DB: {"pmax_over_n0": db_to_linear(value)},
        AxisName.LAMBDA_P: {"lambda_p": value},
        AxisName.N_SU: {"n_su": int(round(value))},
    }[axis]
    try:
        return SystemParams(**{**params.model_dump(), **updates})
    except ValidationError as e:
        raise ConfigError(f"Sweep value {axis.value}={value} is invalid: {e}") from e


def expand_points(spec: ExperimentSpec, with_axis: bool) -> list[Point]:
    """Enumerate points in series, policy, axis order; seeds follow that order."""
    points: list[Point] = []
    axis_values: list[float | None] = list(spec.axis.points()) if with_axis and spec.axis else [None]
    for series in spec.series:
        base = apply_axis(spec.params, AxisName.N_SU, series)
        for policy in spec.policies:
            for value in axis_values:
                params = base if value is None or spec.axis is None else apply_axis(base, spec.axis.name, value)
                points.append(Point(series, params, policy, value, spec.seed + len(points)))
    return points


def provenance(point: Point) -> dict[str, Any]:
    params = point.params
    return {
        "series": point.series,
        "policy": point.policy.label,
        "reselect_on_silence": point.policy.reselect_on_silence,
        "n_su": params.n_su,
        "lambda_p": params.lambda_p,
        "rate_r0": params.rate_r0,
        "p0_over_n0": params.p0_over_n0,
        "pmax_over_n0": params.pmax_over_n0,
        "sigma_p_sq": params.sigma_p_sq,
    }


def analytic_columns(params: SystemParams, policy: PolicyConfig) -> dict[str, Any]:
    """Theory values at one parameter point; instability is reported in ``status``."""
    direct, overheard = f_p(params), f_ps(params)
    relay = relay_link_success(policy, derive_constants(params), params.n_su)
    bound = throughput_bound(direct, overheard, relay)
    columns: dict[str, Any] = {"f_p": direct, "f_ps": overheard, "f_rstar": relay, "bound": bound, "status": "ok"}
    try:
        stats = link_stats(params, policy, f_rstar=relay)
        columns["f_sstar"] = stats.f_sstar
        columns["mu_s"] = su_throughput(params.lambda_p, stats, params.n_su)
        if params.lambda_p > 0:
            delay = avg_delay(params.lambda_p, stats)
            columns.update(tau=delay.tau, n_p=delay.n_p, n_r=delay.n_r)
    except UnstableArrivalError as e:
        logger.warning("%s N=%d: %s", policy.label, params.n_su, e)
        columns["status"] = "unstable"
    return columns


def simulation_columns(point: Point, spec: ExperimentSpec, metrics: SimMetrics) -> dict[str, Any]:
    per_su = metrics.su_throughput
    return {
        "seed": point.seed,
        "slots": spec.slots,
        "warmup_slots": spec.warmup_slots,
        "sim_pu_throughput": metrics.pu_throughput,
        "sim_su_throughput": sum(per_su) / len(per_su),
        "sim_su_spread": max(per_su) - min(per_su),
        "sim_avg_delay": metrics.avg_delay,
        "sim_mean_qp": metrics.mean_qp,
        "sim_mean_qr": metrics.mean_qr,
        "sim_relay_success": metrics.relay_success_rate,
        "sim_own_success": metrics.own_success_rate,
        "sim_relayed_fraction": metrics.relayed_fraction,
        "sim_avg_power_s": metrics.avg_power_s,
        "sim_avg_power_r": metrics.avg_power_r,
        "sim_cond_power_s": metrics.cond_power_s,
        "sim_cond_power_r": metrics.cond_power_r,
        "sim_failed_active": metrics.failed_active_transmissions,
        "sim_stability": metrics.stability.verdict,
        "sim_stability_slope": metrics.stability.slope,
    }


def sim_config(point: Point, spec: ExperimentSpec) -> SimConfig:
    return SimConfig(
        params=point.params,
        policy=point.policy,
        slots=spec.slots,
        warmup_slots=spec.warmup_slots,
        seed=point.seed,
    )


class ExperimentService:
    """Runs an experiment spec in one of its four modes."""

    def run(self, spec: ExperimentSpec) -> ExperimentResult:
        logger.info("Running %s experiment with %d policies (seed=%d)", spec.mode.value, len(spec.policies), spec.seed)
        if spec.mode is ExperimentMode.VALIDATE:
            from app.services.validation import ValidationSuite

            checks = ValidationSuite(spec).run()
            rows = [{**check.model_dump(), "delta": check.delta} for check in checks]
            passed = all(check.passed for check in checks)
            logger.info("Validation: %d of %d checks passed", sum(c.passed for c in checks), len(checks))
            return ExperimentResult(MODE_FIELDS[spec.mode], rows, passed)

        points = expand_points(spec, with_axis=spec.mode is not ExperimentMode.SIMULATE)
        result = ExperimentResult(MODE_FIELDS[spec.mode])
        metrics: list[SimMetrics | None] = [None] * len(points)
        if spec.mode in (ExperimentMode.SIMULATE, ExperimentMode.SWEEP):
            metrics[:] = get_simulation_service().run_many([sim_config(p, spec) for p in points], spec.workers)

        for point, run in zip(points, metrics, strict=True):
            row = provenance(point)
            if spec.axis is not None and spec.mode is not ExperimentMode.SIMULATE:
                row.update(axis=spec.axis.name, axis_value=point.axis_value)
            if spec.mode is not ExperimentMode.SIMULATE:
                row.update(analytic_columns(point.params, point.policy))
            if spec.mode is ExperimentMode.SWEEP and spec.mc_draws:
                estimate = monte_carlo_success(point.policy, point.params, spec.mc_draws, point.seed)
                row.update(f_rstar_mc=estimate.f_rstar_hat, f_rstar_mc_ci=estimate.ci_halfwidth)
            if run is not None:
                row.update(simulation_columns(point, spec, run))
            result.rows.append(row)
        return result


_experiment_service: ExperimentService | None = None


def get_experiment_service() -> ExperimentService:
    """Get singleton experiment service instance."""
    global _experiment_service
    if _experiment_service is None:
        _experiment_service = ExperimentService()
    return _experiment_service


# --- CSV output ---


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def write_csv(result: ExperimentResult, spec: ExperimentSpec, stream: IO[str]) -> None:
    """Write a provenance comment line, the header row and every result row."""
    stream.write(f"# seed={spec.seed} version={__version__} mode={spec.mode.value}\n")
    writer = csv.DictWriter(stream, fieldnames=result.fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in result.rows:
        writer.writerow({name: format_value(row.get(name)) for name in result.fieldnames})
