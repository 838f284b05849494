"""Independent ground truth: order-statistic laws, quadrature and Monte Carlo estimators."""

import logging
import math
import warnings
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import integrate, stats

from app.config import get_settings
from app.schemas.analysis import Link, PdfSpec
from app.schemas.system import PolicyConfig, PowerPolicy, SelectionPolicy, SystemParams
from app.services.channel import DerivedConstants, derive_constants
from app.services.scheduling import schedule_batch, select_pairs_batch, single_success_batch

logger = logging.getLogger("coop_relay")

QUADRATURE_MAX_SU = 10
QUAD_OUTER_EPSABS = 1e-10
QUAD_INNER_EPSABS = 1e-12
QUAD_OUTER_EPSREL = 1e-10
QUAD_INNER_EPSREL = 1e-12
QUAD_LIMIT = 200
QUAD_ABS_TOLERANCE = 1e-8
MIN_MC_DRAWS = 100_000
MIN_KS_SAMPLES = 10_000

# A law is ("max", n) for the largest of n unit exponentials, or ("mixture", n) for an
# order statistic drawn uniformly from the n - 1 non-maximal ones.
Law = tuple[str, int]


class QuadratureError(RuntimeError):
    """Raised when adaptive quadrature fails to reach its tolerance."""


def law_of(spec: PdfSpec) -> Law:
    n = spec.n_su
    if spec.policy is SelectionPolicy.BSL:
        return {Link.OWN: ("max", n), Link.RELAY: ("max", n - 1), Link.INTERFERENCE: ("max", 1)}[spec.link]
    return {Link.RELAY: ("max", n), Link.OWN: ("max", n - 1), Link.INTERFERENCE: ("mixture", n)}[spec.link]


# --- Densities and distribution functions ---


def pdf(spec: PdfSpec, h: Any) -> Any:
    """Density of the selected gain at h (scalar or array)."""
    x = np.asarray(h, dtype=float)
    if np.any(x < 0):
        raise ValueError("gains are non-negative")
    kind, n = law_of(spec)
    below = -np.expm1(-x)
    if kind == "max":
        result = n * np.exp(-x) * below ** (n - 1)
    else:
        result = sum(
            math.comb(n - 1, k - 1) * np.exp(-x * (n - k + 1)) * below ** (k - 1) for k in range(1, n)
        ) * (n / (n - 1))
    return result if x.ndim else float(result)


def cdf(spec: PdfSpec, h: Any) -> Any:
    x = np.clip(np.asarray(h, dtype=float), 0.0, None)
    kind, n = law_of(spec)
    below = -np.expm1(-x)
    if kind == "max":
        result = below**n
    else:
        result = sum(stats.binom.sf(k - 1, n, below) for k in range(1, n)) / (n - 1)
    return result if x.ndim else float(result)


def _scalar_pdf(law: Law, h: float) -> float:
    kind, n = law
    below = -math.expm1(-h)
    if kind == "max":
        return n * math.exp(-h) * below ** (n - 1)
    return (n / (n - 1)) * math.fsum(
        math.comb(n - 1, k - 1) * math.exp(-h * (n - k + 1)) * below ** (k - 1) for k in range(1, n)
    )


def _scalar_cdf(law: Law, h: float) -> float:
    kind, n = law
    below = -math.expm1(-h)
    if kind == "max":
        return below**n
    above = math.exp(-h)
    at_least = [math.comb(n, j) * below**j * above ** (n - j) for j in range(n + 1)]
    return math.fsum(math.fsum(at_least[k:]) for k in range(1, n)) / (n - 1)


def ks_distance(samples: np.ndarray, spec: PdfSpec) -> float:
    """Kolmogorov-Smirnov distance between the samples and the law of ``spec``."""
    values = np.asarray(samples, dtype=float)
    if values.size < MIN_KS_SAMPLES:
        raise ValueError(f"need at least {MIN_KS_SAMPLES} samples, got {values.size}")
    return float(stats.kstest(values, lambda x: cdf(spec, x)).statistic)


def sample_link_gains(spec: PdfSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` relay-busy slots and return the selected gain named by ``spec``."""
    h_r = rng.standard_exponential((count, spec.n_su))
    h_s = rng.standard_exponential((count, spec.n_su))
    relay, own = select_pairs_batch(h_r, h_s, spec.policy)
    rows = np.arange(count)
    if spec.link is Link.RELAY:
        return h_r[rows, relay]
    if spec.link is Link.OWN:
        return h_s[rows, own]
    return h_r[rows, own]


# --- Quadrature ---


def _integrate(fn: Callable[[float], float], lo: float, hi: float, epsabs: float, epsrel: float) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            value, abserr = integrate.quad(fn, lo, hi, epsabs=epsabs, epsrel=epsrel, limit=QUAD_LIMIT)
        except integrate.IntegrationWarning as e:
            raise QuadratureError(f"quadrature on [{lo}, {hi}] did not converge: {e}") from e
    if abserr > QUAD_ABS_TOLERANCE:
        raise QuadratureError(f"quadrature on [{lo}, {hi}] reported error {abserr:.3g}")
    return float(value)


def _split_integral(fn: Callable[[float], float], lo: float, knee: float) -> float:
    if knee <= lo:
        return _integrate(fn, lo, math.inf, QUAD_OUTER_EPSABS, QUAD_OUTER_EPSREL)
    return _integrate(fn, lo, knee, QUAD_OUTER_EPSABS, QUAD_OUTER_EPSREL) + _integrate(
        fn, knee, math.inf, QUAD_OUTER_EPSABS, QUAD_OUTER_EPSREL
    )


def quadrature_f_rstar(policy: PolicyConfig, consts: DerivedConstants, n_su: int) -> float:
    """Relay-link success by numeric integration over the selected-gain laws.

    The interference gain is treated as independent of the relay gain, as in the
    closed forms, so this oracle checks the algebra of the closed forms.
    """
    if not 2 <= n_su <= QUADRATURE_MAX_SU:
        raise ValueError(f"quadrature oracle supports 2 <= N <= {QUADRATURE_MAX_SU}, got {n_su}")
    if math.isinf(consts.a):
        return 0.0
    a, b = consts.a, consts.b
    relay = law_of(PdfSpec(policy=policy.selection, link=Link.RELAY, n_su=n_su))
    own = law_of(PdfSpec(policy=policy.selection, link=Link.OWN, n_su=n_su))
    interference = law_of(PdfSpec(policy=policy.selection, link=Link.INTERFERENCE, n_su=n_su))

    if policy.power is PowerPolicy.EP:

        def ep_integrand(h: float) -> float:
            return (1.0 - _scalar_cdf(relay, a + h / b)) * _scalar_pdf(interference, h)

        return _split_integral(ep_integrand, 0.0, a * b)

    if a <= 0:
        raise ValueError("adaptive-power quadrature needs a > 0")
    # s* silenced: r* is the best of all N links to D_p
    silent = _scalar_cdf(own, a) * (1.0 - _scalar_cdf(("max", n_su), a))

    def joint(z: float) -> float:
        def integrand(y: float) -> float:
            return _scalar_cdf(interference, z * y) * _scalar_pdf(own, y)

        return _integrate(integrand, a, math.inf, QUAD_INNER_EPSABS, QUAD_INNER_EPSREL)

    def ap_integrand(w: float) -> float:
        return joint(b * (w / a - 1.0)) * _scalar_pdf(relay, w)

    return silent + _split_integral(ap_integrand, a, a * (1.0 + 1.0 / b))


# --- Monte Carlo ---


@dataclass(frozen=True)
class MonteCarloEstimate:
    """Exact-model success rates; ``ci_halfwidth`` is the 3-sigma band of ``f_rstar_hat``."""

    f_rstar_hat: float
    f_sstar_hat: float
    f_sstar_idle_hat: float
    ci_halfwidth: float
    draws: int


class MonteCarloOracle:
    """Estimates link success probabilities by applying the full scheduling rules to random channels."""

    def __init__(self, batch_size: int | None = None) -> None:
        self.batch_size = batch_size or get_settings().MC_BATCH_SIZE

    def estimate(self, policy: PolicyConfig, params: SystemParams, draws: int, seed: int) -> MonteCarloEstimate:
        """Return relay and own-link success rates over ``draws`` independent slots."""
        if draws < MIN_MC_DRAWS:
            raise ValueError(f"need at least {MIN_MC_DRAWS} draws, got {draws}")
        consts = derive_constants(params)
        sizes = [self.batch_size] * (draws // self.batch_size)
        if draws % self.batch_size:
            sizes.append(draws % self.batch_size)

        relay_hits = own_hits = idle_hits = 0
        for size, child in zip(sizes, np.random.SeedSequence(seed).spawn(len(sizes)), strict=True):
            rng = np.random.default_rng(child)
            h_r = rng.standard_exponential((size, params.n_su))
            h_s = rng.standard_exponential((size, params.n_su))
            outcome = schedule_batch(h_r, h_s, consts, policy)
            relay_hits += int(outcome.relay_success.sum())
            own_hits += int(outcome.own_success.sum())
            idle_hits += int(single_success_batch(h_s, consts, policy).sum())

        f_rstar_hat = relay_hits / draws
        logger.info("Monte Carlo %s N=%d: f_r*=%.6f over %d draws", policy.label, params.n_su, f_rstar_hat, draws)
        return MonteCarloEstimate(
            f_rstar_hat=f_rstar_hat,
            f_sstar_hat=own_hits / draws,
            f_sstar_idle_hat=idle_hits / draws,
            ci_halfwidth=3.0 * math.sqrt(f_rstar_hat * (1.0 - f_rstar_hat) / draws),
            draws=draws,
        )


_monte_carlo_oracle: MonteCarloOracle | None = None


def get_monte_carlo_oracle() -> MonteCarloOracle:
    """Get singleton Monte Carlo oracle instance."""
    global _monte_carlo_oracle
    if _monte_carlo_oracle is None:
        _monte_carlo_oracle = MonteCarloOracle()
    return _monte_carlo_oracle


def monte_carlo_success(policy: PolicyConfig, params: SystemParams, draws: int, seed: int) -> MonteCarloEstimate:
    return get_monte_carlo_oracle().estimate(policy, params, draws, seed)
