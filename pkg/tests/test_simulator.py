"""Tests for the slot-by-slot simulator."""

from unittest.mock import MagicMock, patch

import numpy as np
import pytest
from pydantic import ValidationError

from app.schemas.simulation import SimConfig, SimMetrics
from app.schemas.system import PolicyConfig
from app.services.channel import ChannelSample, PacketRecord, ProtocolError
from app.services.closed_form import avg_delay, epsilon, link_stats, su_throughput, throughput_bound
from app.services.simulator import SimState, SimulationService, SlotOutcome, stability_diagnostic
from tests.conftest import make_params


def _sample(h_p: float, h_ps: list[float], h_r: list[float], h_s: list[float]) -> ChannelSample:
    return ChannelSample(h_p=h_p, h_ps=h_ps, h_r=h_r, h_s=h_s)


def _step(service: SimulationService, state: SimState, sample: ChannelSample, config: SimConfig) -> SlotOutcome:
    return service.step(state, sample, np.random.default_rng(0), config)


@pytest.fixture(name="service")
def service_fixture() -> SimulationService:
    """Fresh simulation service."""
    return SimulationService()


@pytest.fixture(name="quiet_config")
def quiet_config_fixture(ep_bsl: PolicyConfig) -> SimConfig:
    """A configuration without PU arrivals, for hand-driven slots."""
    return SimConfig(params=make_params(lambda_p=0.0), policy=ep_bsl, slots=100, warmup_slots=0, seed=1)


class TestStep:
    """Tests for a single protocol slot."""

    def test_direct_delivery(self, service: SimulationService, quiet_config: SimConfig):
        """A good direct link delivers the head of Q_p and leaves Q_r alone."""
        state = service.new_state(quiet_config)
        state.queues.q_p.append(PacketRecord(arrival_slot=0))
        outcome = _step(service, state, _sample(1.0, [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]), quiet_config)
        assert outcome.direct_delivered is not None
        assert not state.queues.q_p and not state.queues.q_r
        assert outcome.assignment is None

    def test_overheard_packet_moves_to_relay_queue(self, service: SimulationService, quiet_config: SimConfig):
        """A failed direct link with an overhearing SU moves the packet to Q_r."""
        state = service.new_state(quiet_config)
        state.queues.q_p.append(PacketRecord(arrival_slot=0))
        outcome = _step(service, state, _sample(0.1, [0.0, 0.5], [1.0, 1.0], [1.0, 1.0]), quiet_config)
        assert outcome.moved_to_relay
        assert len(state.queues.q_r) == 1
        assert state.queues.q_r[0].relayed

    def test_lost_packet_is_retained(self, service: SimulationService, quiet_config: SimConfig):
        """Nobody decodes, so the packet stays in Q_p."""
        state = service.new_state(quiet_config)
        state.queues.q_p.append(PacketRecord(arrival_slot=0))
        _step(service, state, _sample(0.1, [0.1, 0.2], [1.0, 1.0], [1.0, 1.0]), quiet_config)
        assert len(state.queues.q_p) == 1
        assert not state.queues.q_r

    def test_ap_relay_slot_both_succeed(self, service: SimulationService, ap_bsl: PolicyConfig):
        """With Q_p empty and both AP roles feasible, relay and own packets both get through."""
        config = SimConfig(params=make_params(lambda_p=0.0), policy=ap_bsl, slots=100, warmup_slots=0, seed=1)
        state = service.new_state(config)
        state.queues.q_r.append(PacketRecord(arrival_slot=0, relayed=True))
        outcome = _step(service, state, _sample(0.0, [0.0, 0.0], [0.5, 4.0], [2.0, 0.1]), config)
        assert outcome.relay_ok and outcome.own_ok
        assert outcome.relay_delivered is not None
        assert not state.queues.q_r

    def test_idle_slot_single_transmitter(self, service: SimulationService, quiet_config: SimConfig):
        """With both queues empty the best SU sends alone."""
        state = service.new_state(quiet_config)
        outcome = _step(service, state, _sample(0.0, [0.0, 0.0], [1.0, 1.0], [0.2, 3.0]), quiet_config)
        assert outcome.assignment is not None
        assert outcome.assignment.own_su == 1
        assert outcome.assignment.relay_su is None
        assert outcome.own_ok

    def test_arrival_after_departure(self, service: SimulationService, ep_bsl: PolicyConfig):
        """An arrival joins Q_p after the slot's departure."""
        config = SimConfig(params=make_params(lambda_p=0.999), policy=ep_bsl, slots=100, warmup_slots=0, seed=1)
        state = service.new_state(config)
        state.queues.q_p.append(PacketRecord(arrival_slot=0))
        rng = MagicMock()
        rng.random.return_value = 0.0
        state.slot = 7
        outcome = service.step(state, _sample(1.0, [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]), rng, config)
        assert outcome.arrived
        assert outcome.direct_delivered is not None
        assert outcome.qp_length == 1
        assert [packet.arrival_slot for packet in state.queues.q_p] == [7]
        assert state.slot == 8

    def test_inconsistent_queue_aborts(self, service: SimulationService, quiet_config: SimConfig):
        """A queue update that disagrees with the protocol rule aborts the run."""
        state = service.new_state(quiet_config)
        with patch("app.services.simulator.queue_step", return_value=5), pytest.raises(ProtocolError):
            _step(service, state, _sample(0.0, [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]), quiet_config)


class TestStabilityDiagnostic:
    """Tests for the Q_r growth classifier."""

    def test_zero_trace_is_stable(self):
        """An empty queue is stable."""
        report = stability_diagnostic(np.zeros(1000))
        assert report.stable
        assert report.slope == pytest.approx(0.0)

    def test_linear_growth(self):
        """A steadily growing queue is flagged."""
        report = stability_diagnostic(np.arange(100_000) * 0.01)
        assert report.verdict == "growing"
        assert report.slope == pytest.approx(0.01, rel=1e-6)

    def test_fluctuating_queue_is_stable(self):
        """Noise around a constant level is stable."""
        trace = np.random.default_rng(2).poisson(3.0, 100_000)
        assert stability_diagnostic(trace).stable

    def test_short_trace_rejected(self):
        """Fewer than two samples per window is an error."""
        with pytest.raises(ValueError):
            stability_diagnostic(np.zeros(10))


class TestRun:
    """Tests for whole runs."""

    def test_packet_conservation(self, service: SimulationService, ep_bsl: PolicyConfig):
        """Arrivals equal deliveries plus whatever is still queued."""
        config = SimConfig(params=make_params(lambda_p=0.15), policy=ep_bsl, slots=50_000, warmup_slots=1000, seed=3)
        metrics = service.run(config)
        assert metrics.arrivals == (
            metrics.direct_deliveries + metrics.relayed_deliveries + metrics.residual_qp + metrics.residual_qr
        )
        assert metrics.measured_slots == 49_000

    def test_deterministic(self, service: SimulationService, ap_bsl: PolicyConfig):
        """Equal seeds give identical metrics."""
        config = SimConfig(params=make_params(), policy=ap_bsl, slots=20_000, warmup_slots=1000, seed=9)
        assert service.run(config) == service.run(config)

    def test_run_many_keeps_order(self, service: SimulationService, ep_bsl: PolicyConfig):
        """Batch runs return metrics in input order."""
        configs = [
            SimConfig(params=make_params(lambda_p=lam), policy=ep_bsl, slots=5000, warmup_slots=500, seed=5)
            for lam in (0.02, 0.12)
        ]
        single = [service.run(config) for config in configs]
        assert service.run_many(configs, workers=1) == single

    @pytest.mark.parametrize("label", ["EP-BSL", "EP-BPL", "AP-BSL", "AP-BPL"])
    def test_block_path_matches_stepwise(self, service: SimulationService, label: str):
        """The vectorized block path reproduces slot-by-slot stepping exactly."""
        config = SimConfig(
            params=make_params(lambda_p=0.12),
            policy=PolicyConfig.from_label(label),
            slots=20_000,
            warmup_slots=2000,
            seed=13,
        )
        assert service.run(config) == service.run(config, stepwise=True)

    def test_short_measurement_window_rejected(self, ep_bsl: PolicyConfig):
        """A run too short for the stability windows is an invalid configuration."""
        with pytest.raises(ValidationError):
            SimConfig(params=make_params(), policy=ep_bsl, slots=25, warmup_slots=10, seed=1)
        SimConfig(params=make_params(), policy=ep_bsl, slots=30, warmup_slots=10, seed=1)

    def test_zero_budget_starves_relay(self, service: SimulationService, ep_bsl: PolicyConfig):
        """Without SU power nothing leaves Q_r and it grows."""
        config = SimConfig(
            params=make_params(pmax_over_n0=0.0, lambda_p=0.2), policy=ep_bsl, slots=50_000, warmup_slots=1000, seed=4
        )
        metrics = service.run(config)
        assert metrics.relayed_deliveries == 0
        assert metrics.relay_success_rate == 0.0
        assert not metrics.stability.stable


@pytest.mark.slow
class TestReferenceRun:
    """Closure of the EP-BSL and AP-BSL reference runs with the closed forms."""

    def test_ep_bsl_relay_success(self, ep_bsl_run: SimMetrics, consts):
        """Empirical relay success matches e^-a / 4."""
        assert ep_bsl_run.relay_success_rate == pytest.approx(0.137403, abs=0.003)

    def test_ep_bsl_throughput_and_delay(self, ep_bsl_run: SimMetrics, params, ep_bsl: PolicyConfig):
        """PU throughput, SU throughput, delay and queue closure at lambda_p = 0.1."""
        stats = link_stats(params, ep_bsl)
        delay = avg_delay(0.1, stats)
        assert ep_bsl_run.pu_throughput == pytest.approx(0.1, abs=0.002)
        assert ep_bsl_run.stability.stable
        assert np.mean(ep_bsl_run.su_throughput) == pytest.approx(su_throughput(0.1, stats, 2), abs=0.01)
        assert max(ep_bsl_run.su_throughput) - min(ep_bsl_run.su_throughput) <= 0.005
        assert ep_bsl_run.avg_delay == pytest.approx(delay.tau, rel=0.05)
        assert ep_bsl_run.mean_qp == pytest.approx(delay.n_p, rel=0.05)
        assert ep_bsl_run.relayed_fraction == pytest.approx(epsilon(stats.f_p, stats.f_ps), abs=0.01)
        assert 0.1 < throughput_bound(stats.f_p, stats.f_ps, stats.f_rstar)

    def test_ep_powers(self, ep_bsl_run: SimMetrics, consts):
        """EP transmitters always use the full budget."""
        assert ep_bsl_run.cond_power_s == pytest.approx(consts.pmax, rel=1e-9)
        assert ep_bsl_run.cond_power_r == pytest.approx(consts.pmax, rel=1e-9)

    def test_ap_no_outage(self, ap_bsl_run: SimMetrics):
        """Every non-silenced AP transmission succeeds."""
        assert ap_bsl_run.failed_active_transmissions == 0

    def test_ap_saves_power(self, ap_bsl_run: SimMetrics, consts):
        """AP average powers stay strictly below the budget."""
        assert ap_bsl_run.avg_power_s <= ap_bsl_run.cond_power_s < consts.pmax
        assert ap_bsl_run.avg_power_r < consts.pmax
