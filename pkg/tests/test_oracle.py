"""Tests for order-statistic laws, quadrature and the Monte Carlo oracle."""

import math

import numpy as np
import pytest
from scipy import integrate

from app.schemas.analysis import Link, PdfSpec
from app.schemas.system import ALL_POLICIES, PolicyConfig, SelectionPolicy, SystemParams
from app.services.channel import DerivedConstants, derive_constants
from app.services.closed_form import f_sstar_bsl, relay_link_success
from app.services.oracle import (
    MonteCarloOracle,
    QuadratureError,
    _integrate,
    _scalar_cdf,
    _scalar_pdf,
    cdf,
    ks_distance,
    law_of,
    monte_carlo_success,
    pdf,
    quadrature_f_rstar,
    sample_link_gains,
)
from tests.conftest import make_params

NONTRIVIAL = [
    (SelectionPolicy.BSL, Link.OWN),
    (SelectionPolicy.BSL, Link.RELAY),
    (SelectionPolicy.BPL, Link.RELAY),
    (SelectionPolicy.BPL, Link.OWN),
    (SelectionPolicy.BPL, Link.INTERFERENCE),
]


def _harmonic(n: int) -> float:
    return sum(1.0 / k for k in range(1, n + 1))


class TestLaws:
    """Tests for the selected-gain densities."""

    @pytest.mark.parametrize(("policy", "link"), NONTRIVIAL)
    @pytest.mark.parametrize("n_su", [2, 3, 5])
    def test_density_normalized(self, policy: SelectionPolicy, link: Link, n_su: int):
        """Every density integrates to one and its CDF reaches one."""
        spec = PdfSpec(policy=policy, link=link, n_su=n_su)
        total, _ = integrate.quad(lambda h: pdf(spec, h), 0.0, math.inf)
        assert total == pytest.approx(1.0, abs=1e-9)
        assert cdf(spec, 60.0) == pytest.approx(1.0)
        assert cdf(spec, 0.0) == 0.0

    def test_max_law_mean(self):
        """The largest of N unit exponentials has mean H_N."""
        spec = PdfSpec(policy=SelectionPolicy.BSL, link=Link.OWN, n_su=4)
        mean, _ = integrate.quad(lambda h: h * pdf(spec, h), 0.0, math.inf)
        assert mean == pytest.approx(_harmonic(4), rel=1e-9)

    def test_mixture_mean(self):
        """A uniformly chosen non-maximal order statistic has mean (N - H_N) / (N - 1)."""
        n = 4
        spec = PdfSpec(policy=SelectionPolicy.BPL, link=Link.INTERFERENCE, n_su=n)
        mean, _ = integrate.quad(lambda h: h * pdf(spec, h), 0.0, math.inf)
        assert mean == pytest.approx((n - _harmonic(n)) / (n - 1), rel=1e-9)

    def test_bsl_interference_is_exponential(self):
        """Under BSL the interference gain is a plain unit exponential."""
        spec = PdfSpec(policy=SelectionPolicy.BSL, link=Link.INTERFERENCE, n_su=4)
        assert law_of(spec) == ("max", 1)
        assert pdf(spec, 0.7) == pytest.approx(math.exp(-0.7))

    @pytest.mark.parametrize(("policy", "link"), NONTRIVIAL)
    def test_scalar_matches_vector(self, policy: SelectionPolicy, link: Link):
        """The scalar fast paths agree with the vectorized forms."""
        spec = PdfSpec(policy=policy, link=link, n_su=4)
        law = law_of(spec)
        for h in (0.01, 0.3, 1.0, 2.5, 8.0):
            assert _scalar_pdf(law, h) == pytest.approx(pdf(spec, h), rel=1e-12)
            assert _scalar_cdf(law, h) == pytest.approx(cdf(spec, h), rel=1e-10)

    def test_negative_gain_rejected(self):
        """Densities are defined for non-negative gains only."""
        with pytest.raises(ValueError):
            pdf(PdfSpec(policy=SelectionPolicy.BSL, link=Link.OWN, n_su=2), -0.1)


@pytest.mark.slow
class TestDistributionSuite:
    """Sampled selected gains follow their laws."""

    @pytest.mark.parametrize(("policy", "link"), NONTRIVIAL)
    @pytest.mark.parametrize("n_su", [2, 4])
    def test_ks_distance(self, policy: SelectionPolicy, link: Link, n_su: int):
        """KS distance stays below 0.005 at a million samples."""
        spec = PdfSpec(policy=policy, link=link, n_su=n_su)
        samples = sample_link_gains(spec, 1_000_000, np.random.default_rng(n_su * 100 + len(link.value)))
        assert ks_distance(samples, spec) < 0.005

    def test_ks_detects_wrong_law(self):
        """Samples of the BPL relay gain do not follow the BSL relay law."""
        bpl = PdfSpec(policy=SelectionPolicy.BPL, link=Link.RELAY, n_su=2)
        bsl = PdfSpec(policy=SelectionPolicy.BSL, link=Link.RELAY, n_su=2)
        samples = sample_link_gains(bpl, 100_000, np.random.default_rng(3))
        assert ks_distance(samples, bsl) > 0.05

    def test_bpl_interference_below_relay(self):
        """Under BPL the interference gain never exceeds the relay gain."""
        rng = np.random.default_rng(4)
        relay = sample_link_gains(PdfSpec(policy=SelectionPolicy.BPL, link=Link.RELAY, n_su=3), 50_000, rng)
        rng = np.random.default_rng(4)
        interference = sample_link_gains(
            PdfSpec(policy=SelectionPolicy.BPL, link=Link.INTERFERENCE, n_su=3), 50_000, rng
        )
        assert np.all(interference <= relay)

    def test_too_few_samples(self):
        """The KS check refuses small samples."""
        spec = PdfSpec(policy=SelectionPolicy.BSL, link=Link.OWN, n_su=2)
        with pytest.raises(ValueError):
            ks_distance(np.ones(100), spec)


class TestQuadrature:
    """The quadrature oracle reproduces the closed forms."""

    @pytest.mark.parametrize("policy", ALL_POLICIES, ids=lambda p: p.label)
    def test_matches_closed_form(self, policy: PolicyConfig):
        """|closed form - quadrature| <= 1e-6 over N in 2..6 and a in {0.1, 0.6, 2.0}."""
        for n_su in range(2, 7):
            for a in (0.1, 0.6, 2.0):
                consts = derive_constants(make_params(pmax_over_n0=3.0 / a))
                closed = relay_link_success(policy, consts, n_su)
                assert quadrature_f_rstar(policy, consts, n_su) == pytest.approx(closed, abs=1e-6)

    def test_zero_budget(self, ep_bsl: PolicyConfig):
        """Infinite a short-circuits to zero."""
        assert quadrature_f_rstar(ep_bsl, derive_constants(make_params(pmax_over_n0=0.0)), 2) == 0.0

    def test_size_limit(self, consts: DerivedConstants, ep_bsl: PolicyConfig):
        """The quadrature oracle only covers small clusters."""
        with pytest.raises(ValueError):
            quadrature_f_rstar(ep_bsl, consts, 11)

    def test_divergent_integral_raises(self):
        """A non-integrable integrand surfaces as QuadratureError."""
        with pytest.raises(QuadratureError):
            _integrate(lambda x: 1.0 / x, 0.0, 1.0, 1e-10, 1e-10)


class TestMonteCarlo:
    """The Monte Carlo oracle applies the full scheduling rules."""

    def test_ep_bsl_matches_closed_form(self, params: SystemParams, ep_bsl: PolicyConfig):
        """EP-BSL estimates fall inside a 4-sigma band around the closed form."""
        estimate = monte_carlo_success(ep_bsl, params, 2_000_000, seed=41)
        closed = relay_link_success(ep_bsl, derive_constants(params), 2)
        assert abs(estimate.f_rstar_hat - closed) <= 4.0 / 3.0 * estimate.ci_halfwidth

    def test_ap_bsl_matches_closed_form(self, params: SystemParams, ap_bsl: PolicyConfig):
        """AP-BSL estimates fall inside a 4-sigma band around the closed form."""
        for n_su in (2, 4):
            sized = make_params(n_su=n_su)
            estimate = monte_carlo_success(ap_bsl, sized, 2_000_000, seed=43 + n_su)
            closed = relay_link_success(ap_bsl, derive_constants(sized), n_su)
            assert abs(estimate.f_rstar_hat - closed) <= 4.0 / 3.0 * estimate.ci_halfwidth

    def test_ep_bpl_exact_two_sus(self, params: SystemParams):
        """With N=2 the exact EP-BPL relay success is e^-a / 2, away from the closed form."""
        policy = PolicyConfig.from_label("EP-BPL")
        consts = derive_constants(params)
        estimate = monte_carlo_success(policy, params, 2_000_000, seed=47)
        exact = math.exp(-consts.a) / 2.0
        assert abs(estimate.f_rstar_hat - exact) <= 4.0 / 3.0 * estimate.ci_halfwidth
        relaxed = relay_link_success(policy, consts, 2)
        assert abs(relaxed - exact) > 10 * estimate.ci_halfwidth
        assert abs(relaxed - exact) < 0.1

    def test_own_link_rates(self, params: SystemParams, ep_bsl: PolicyConfig):
        """Under EP-BSL the busy and idle own-link rates are both 1 - beta^N."""
        estimate = monte_carlo_success(ep_bsl, params, 1_000_000, seed=53)
        expected = f_sstar_bsl(derive_constants(params), 2)
        assert estimate.f_sstar_hat == pytest.approx(expected, abs=0.002)
        assert estimate.f_sstar_idle_hat == pytest.approx(expected, abs=0.002)

    def test_deterministic(self, params: SystemParams, ap_bsl: PolicyConfig):
        """Equal seeds give equal estimates."""
        oracle = MonteCarloOracle(batch_size=50_000)
        first = oracle.estimate(ap_bsl, params, 200_000, seed=7)
        second = oracle.estimate(ap_bsl, params, 200_000, seed=7)
        assert first == second

    def test_too_few_draws(self, params: SystemParams, ep_bsl: PolicyConfig):
        """The estimator refuses tiny draw counts."""
        with pytest.raises(ValueError):
            monte_carlo_success(ep_bsl, params, 1000, seed=1)
