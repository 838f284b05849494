"""Closed-form link statistics, throughput bound and primary-packet delay."""

import logging
import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass
from math import comb
from typing import Any

import mpmath
from scipy import special

from app.schemas.analysis import DelayBreakdown, LinkStats
from app.schemas.system import PolicyConfig, PowerPolicy, SelectionPolicy, SystemParams
from app.services.channel import DerivedConstants, derive_constants

logger = logging.getLogger("coop_relay")

MAX_SU = 25
FLOAT_SU_LIMIT = 6
MPMATH_DPS = 50
PROBABILITY_SLACK = 1e-9

_CF_SWITCH = 1.0
_CF_EPS = 1e-15
_CF_MAX_ITER = 1000
_CF_TINY = 1e-300


class UnstableArrivalError(ValueError):
    """Raised when the PU arrival rate is at or beyond the stability boundary."""


# --- Exponential integral ---


def exp_integral_e1(x: float) -> float:
    """E1(x) = integral from x to infinity of e^-t / t dt."""
    if not x > 0:
        raise ValueError(f"E1 is evaluated for x > 0 only, got {x}")
    return float(special.exp1(x))


def e1_scaled(x: float) -> float:
    """Return e^x E1(x), finite for every x > 0."""
    if not x > 0:
        raise ValueError(f"E1 is evaluated for x > 0 only, got {x}")
    if math.isinf(x):
        return 0.0
    if x < _CF_SWITCH:
        return math.exp(x) * float(special.exp1(x))

    # Modified Lentz evaluation of the continued fraction 1/(x+1- 1/(x+3- 4/(x+5- ...)))
    b = x + 1.0
    c = 1.0 / _CF_TINY
    d = 1.0 / b
    h = d
    for i in range(1, _CF_MAX_ITER):
        an = -float(i * i)
        b += 2.0
        d = 1.0 / (an * d + b)
        c = b + an / c
        delta = c * d
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise RuntimeError(f"E1 continued fraction did not converge for x={x}")


# --- Arithmetic backends for the alternating sums ---


@dataclass(frozen=True)
class Arithmetic:
    """Numeric backend used by the alternating closed-form sums."""

    name: str
    lift: Callable[[float], Any]
    exp: Callable[[Any], Any]
    e1_scaled: Callable[[Any], Any]
    total: Callable[[Iterable[Any]], Any]


FLOAT_ARITHMETIC = Arithmetic(name="float", lift=float, exp=math.exp, e1_scaled=e1_scaled, total=math.fsum)
MPMATH_ARITHMETIC = Arithmetic(
    name="mpmath",
    lift=mpmath.mpf,
    exp=mpmath.exp,
    e1_scaled=lambda x: mpmath.exp(x) * mpmath.e1(x),
    total=mpmath.fsum,
)


def arithmetic_for(n_su: int) -> Arithmetic:
    return FLOAT_ARITHMETIC if n_su <= FLOAT_SU_LIMIT else MPMATH_ARITHMETIC


def _check_su_count(n_su: int) -> None:
    if n_su < 2:
        raise ValueError(f"the cluster needs at least two SUs, got {n_su}")
    if n_su > MAX_SU:
        raise ValueError(f"closed forms are evaluated for N <= {MAX_SU}, got {n_su}")


def _as_probability(value: float, what: str) -> float:
    if -PROBABILITY_SLACK <= value < 0.0:
        return 0.0
    if 1.0 < value <= 1.0 + PROBABILITY_SLACK:
        return 1.0
    if not 0.0 <= value <= 1.0:
        raise RuntimeError(f"{what} evaluated to {value}, outside [0, 1]; cancellation exceeded working precision")
    return value


def _evaluate(
    what: str, n_su: int, body: Callable[[Arithmetic], Any], arithmetic: Arithmetic | None
) -> float:
    arith = arithmetic or arithmetic_for(n_su)
    if arith is MPMATH_ARITHMETIC:
        with mpmath.workdps(MPMATH_DPS):
            value = float(body(arith))
    else:
        value = float(body(arith))
    return _as_probability(value, what)


# --- Direct and overhearing links ---


def f_p(params: SystemParams) -> float:
    """Probability the PU reaches D_p directly."""
    return math.exp(-derive_constants(params).alpha / params.sigma_p_sq)


def f_ps(params: SystemParams) -> float:
    """Probability at least one SU decodes the PU packet."""
    alpha = derive_constants(params).alpha
    return 1.0 - (-math.expm1(-alpha)) ** params.n_su


def mu_p(f_p: float, f_ps: float) -> float:
    return f_p + (1.0 - f_p) * f_ps


def epsilon(f_p: float, f_ps: float) -> float:
    """Fraction of PU packets that leave Q_p through the relay queue."""
    return (1.0 - f_p) * f_ps / mu_p(f_p, f_ps)


# --- Relay and secondary links ---


def f_rstar_ep_bsl(consts: DerivedConstants, n_su: int, arithmetic: Arithmetic | None = None) -> float:
    _check_su_count(n_su)
    if math.isinf(consts.a):
        return 0.0

    def body(ar: Arithmetic) -> Any:
        a, b = ar.lift(consts.a), ar.lift(consts.b)
        terms = [ar.lift(1.0)]
        for k in range(n_su):
            terms.append(-comb(n_su - 1, k) * (-1) ** k * ar.exp(-k * a) / (1 + k / b))
        return ar.total(terms)

    return _evaluate("EP-BSL relay success", n_su, body, arithmetic)


def f_sstar_bsl(consts: DerivedConstants, n_su: int) -> float:
    """Own-link success when s* is the best of all N links to D_s."""
    _check_su_count(n_su)
    return 1.0 - consts.beta**n_su


def f_rstar_ep_bpl(consts: DerivedConstants, n_su: int, arithmetic: Arithmetic | None = None) -> float:
    _check_su_count(n_su)
    if math.isinf(consts.a):
        return 0.0

    def body(ar: Arithmetic) -> Any:
        a, b = ar.lift(consts.a), ar.lift(consts.b)
        n = n_su
        terms = []
        for k in range(1, n):
            outer = comb(n - 1, k - 1)
            for m in range(k):
                weight = outer * comb(k - 1, m) * (-1) ** m
                terms.append(weight * ar.lift(1.0) / (n - k + m + 1))
                for ell in range(n + 1):
                    terms.append(
                        -weight * comb(n, ell) * (-1) ** ell * ar.exp(-a * ell) / (n - k + m + 1 + ell / b)
                    )
        return ar.lift(n) / (n - 1) * ar.total(terms)

    return _evaluate("EP-BPL relay success", n_su, body, arithmetic)


def gamma(lambda_p: float, f_p: float, f_ps: float, f_rstar: float) -> float:
    """Probability the relay queue is busy in a PU-idle slot."""
    if lambda_p == 0:
        return 0.0
    mu = mu_p(f_p, f_ps)
    if f_rstar <= 0 or lambda_p >= mu:
        raise UnstableArrivalError(f"lambda_p={lambda_p} leaves the relay queue without service")
    value = lambda_p * (1.0 - f_p) * f_ps / ((mu - lambda_p) * f_rstar)
    if value >= 1.0:
        raise UnstableArrivalError(f"lambda_p={lambda_p} gives gamma={value:.6g} >= 1; the relay queue is unstable")
    return value


def f_sstar_bpl(consts: DerivedConstants, n_su: int, gamma: float) -> float:
    """Own-link success averaged over relay-busy (N-1 candidates) and idle (N candidates) slots."""
    _check_su_count(n_su)
    if not 0.0 <= gamma < 1.0:
        raise UnstableArrivalError(f"gamma must lie in [0, 1), got {gamma}")
    beta = consts.beta
    return gamma * (1.0 - beta ** (n_su - 1)) + (1.0 - gamma) * (1.0 - beta**n_su)


def f_rstar_ap_bsl(consts: DerivedConstants, n_su: int, arithmetic: Arithmetic | None = None) -> float:
    _check_su_count(n_su)
    if math.isinf(consts.a):
        return 0.0

    def body(ar: Arithmetic) -> Any:
        a, b = ar.lift(consts.a), ar.lift(consts.b)
        n = n_su
        beta_n = (1 - ar.exp(-a)) ** n
        terms = [beta_n * (1 - beta_n)]
        for k in range(n):
            prefactor = n * comb(n - 1, k) * (-1) ** k * ar.exp(-a * (k + 1))
            for ell in range(n - 1):
                weight = comb(n - 2, ell) * (-1) ** ell * (n - 1)
                i3 = weight * ar.exp(-a * (ell + 1)) / ((k + 1) * (ell + 1))
                i4 = weight * (a / b) * ar.exp(-a * (ell + 1)) * ar.e1_scaled(a * (1 + b + ell) * (k + 1) / b)
                terms.append(prefactor * i3)
                terms.append(-prefactor * i4)
        return ar.total(terms)

    return _evaluate("AP-BSL relay success", n_su, body, arithmetic)


def f_rstar_ap_bpl(consts: DerivedConstants, n_su: int, arithmetic: Arithmetic | None = None) -> float:
    _check_su_count(n_su)
    if math.isinf(consts.a):
        return 0.0

    def body(ar: Arithmetic) -> Any:
        a, b = ar.lift(consts.a), ar.lift(consts.b)
        n = n_su
        beta = 1 - ar.exp(-a)
        overheard = ar.total(
            comb(n - 1, j) * (-1) ** j * ar.exp(-a * (j + 1)) / (j + 1) for j in range(n)
        )
        terms = [beta ** (n - 1) * (1 - beta**n)]
        for k in range(1, n):
            for ell in range(k):
                d = n - k + ell + 1
                for m in range(n - 1):
                    count = comb(n - 1, k - 1) * comb(k - 1, ell) * comb(n - 2, m) * (-1) ** (m + ell) * n * n
                    weight = ar.lift(count) / d
                    i5 = ar.exp(-a * (m + 1)) / (m + 1) * overheard
                    terms.append(weight * i5)
                    for j in range(n):
                        t = b * d + j + 1
                        i6 = (
                            comb(n - 1, j)
                            * (-1) ** j
                            * a
                            / (b * d)
                            * ar.exp(-a * (m + j + 2))
                            * ar.e1_scaled(t * a * (m + 1) / (b * d))
                        )
                        terms.append(-weight * i6)
        return ar.total(terms)

    return _evaluate("AP-BPL relay success", n_su, body, arithmetic)


def relay_link_success(
    policy: PolicyConfig, consts: DerivedConstants, n_su: int, arithmetic: Arithmetic | None = None
) -> float:
    """f_r* for a policy combination."""
    if policy.power is PowerPolicy.EP:
        if policy.selection is SelectionPolicy.BSL:
            return f_rstar_ep_bsl(consts, n_su, arithmetic)
        return f_rstar_ep_bpl(consts, n_su, arithmetic)
    if policy.selection is SelectionPolicy.BSL:
        return f_rstar_ap_bsl(consts, n_su, arithmetic)
    return f_rstar_ap_bpl(consts, n_su, arithmetic)


def link_stats(params: SystemParams, policy: PolicyConfig, f_rstar: float | None = None) -> LinkStats:
    """Assemble (f_p, f_ps, f_r*, f_s*) at the parameters' arrival rate.

    ``f_rstar`` overrides the closed-form value, e.g. with an exact-model estimate.
    Under BPL, f_s* depends on lambda_p and raises UnstableArrivalError past the bound.
    """
    consts = derive_constants(params)
    direct = f_p(params)
    overheard = f_ps(params)
    relay = relay_link_success(policy, consts, params.n_su) if f_rstar is None else f_rstar
    if policy.selection is SelectionPolicy.BSL:
        own = f_sstar_bsl(consts, params.n_su)
    else:
        own = f_sstar_bpl(consts, params.n_su, gamma(params.lambda_p, direct, overheard, relay))
    return LinkStats(f_p=direct, f_ps=overheard, f_rstar=relay, f_sstar=own)


# --- Throughput and delay ---


def throughput_bound(f_p: float, f_ps: float, f_rstar: float) -> float:
    """Largest PU arrival rate keeping both Q_p and Q_r stable."""
    relayed = (1.0 - f_p) * f_ps
    if f_rstar + relayed == 0:
        return 0.0
    return f_rstar * mu_p(f_p, f_ps) / (f_rstar + relayed)


def max_stable_arrival(stats: LinkStats) -> float:
    return throughput_bound(stats.f_p, stats.f_ps, stats.f_rstar)


def _require_stable(lambda_p: float, stats: LinkStats) -> float:
    bound = max_stable_arrival(stats)
    if lambda_p > 0 and lambda_p >= bound:
        raise UnstableArrivalError(f"lambda_p={lambda_p} is not below the stability bound {bound:.6g}")
    return bound


def su_throughput(lambda_p: float, stats: LinkStats, n_su: int) -> float:
    """Own-packet throughput of each SU."""
    _require_stable(lambda_p, stats)
    return (1.0 - lambda_p / stats.mu_p) * stats.f_sstar / n_su


def avg_delay(lambda_p: float, stats: LinkStats) -> DelayBreakdown:
    """Mean queue lengths and mean primary-packet delay in slots."""
    if lambda_p <= 0:
        raise ValueError("the delay is defined for a positive arrival rate")
    _require_stable(lambda_p, stats)

    mu = stats.mu_p
    relayed = stats.f_ps * (1.0 - stats.f_p)
    fr = stats.f_rstar
    r = relayed * ((fr - stats.f_p) / mu - fr - relayed)
    s = relayed * mu
    delta = fr + relayed
    zeta = mu * (-2.0 * fr - relayed)
    eta = mu * mu * fr

    n_p = (lambda_p - lambda_p**2) / (mu - lambda_p)
    n_r = (r * lambda_p**2 + s * lambda_p) / (delta * lambda_p**2 + zeta * lambda_p + eta)
    eps = epsilon(stats.f_p, stats.f_ps)
    return DelayBreakdown(
        n_p=n_p,
        n_r=n_r,
        tau=(n_p + n_r) / lambda_p,
        tau_p=n_p / lambda_p,
        tau_r=n_r / (eps * lambda_p) if eps > 0 else None,
        epsilon=eps,
        r=r,
        s=s,
        delta=delta,
        zeta=zeta,
        eta=eta,
    )
