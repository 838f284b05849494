"""Slot-by-slot simulation of the cooperative relaying protocol."""

import logging
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from app.schemas.simulation import STABILITY_WINDOWS, SimConfig, SimMetrics, StabilityReport
from app.services.channel import (
    ChannelSample,
    DerivedConstants,
    PacketRecord,
    ProtocolError,
    QueueState,
    derive_constants,
    direct_success,
    queue_step,
    sample_channel_block,
    samples_from_block,
    su_decode_success,
)
from app.services.scheduling import (
    Assignment,
    BatchOutcome,
    schedule,
    schedule_batch,
    schedule_single_batch,
    transmission_outcomes,
)

logger = logging.getLogger("coop_relay")

GROWTH_SLOPE = 1e-4
GROWTH_RATIO = 3.0
BLOCK_SLOTS = 8192


@dataclass
class SimState:
    consts: DerivedConstants
    queues: QueueState = field(default_factory=QueueState)
    slot: int = 0


@dataclass(slots=True)
class SlotOutcome:
    """What happened in one slot. Queue lengths are taken at slot start."""

    slot: int
    qp_length: int
    qr_length: int
    direct_delivered: PacketRecord | None = None
    moved_to_relay: bool = False
    relay_delivered: PacketRecord | None = None
    assignment: Assignment | None = None
    relay_ok: bool = False
    own_ok: bool = False
    arrived: bool = False


class Transmission(NamedTuple):
    """SU transmission summary for a PU-idle slot. ``own_su`` is -1 when s* stays silent."""

    p_s: float
    p_r: float
    own_su: int
    own_ok: bool
    relay_ok: bool


def _transmissions(batch: BatchOutcome) -> list[Transmission]:
    columns = (batch.p_s, batch.p_r, batch.own_su, batch.own_success, batch.relay_success)
    return list(map(Transmission._make, zip(*(column.tolist() for column in columns))))


def stability_diagnostic(qr_length_trace: np.ndarray) -> StabilityReport:
    """Classify a relay-queue trace as stable or growing from its window means."""
    trace = np.asarray(qr_length_trace, dtype=float)
    if trace.size < 2 * STABILITY_WINDOWS:
        raise ValueError(f"trace of {trace.size} samples is too short for {STABILITY_WINDOWS} windows")
    width = trace.size // STABILITY_WINDOWS
    means = trace[: width * STABILITY_WINDOWS].reshape(STABILITY_WINDOWS, width).mean(axis=1)
    centers = (np.arange(STABILITY_WINDOWS) + 0.5) * width
    slope = float(np.polyfit(centers, means, 1)[0])
    growing = slope > GROWTH_SLOPE and means[-1] > GROWTH_RATIO * means[0]
    return StabilityReport(
        verdict="growing" if growing else "stable",
        slope=slope,
        first_window_mean=float(means[0]),
        last_window_mean=float(means[-1]),
        windows=STABILITY_WINDOWS,
    )


class _MetricsAccumulator:
    """Collects per-slot statistics over the measured window and whole-run conservation counts."""

    def __init__(self, config: SimConfig) -> None:
        self.warmup = config.warmup_slots
        self.measured = config.slots - config.warmup_slots
        self.qr_trace = np.zeros(self.measured, dtype=np.int64)
        self.su_deliveries = [0] * config.params.n_su
        self.sum_qp = self.sum_qr = 0
        self.deliveries = self.relayed_in_window = 0
        self.delay_sum = self.delay_count = 0
        self.su_slots = self.own_hits = 0
        self.relay_attempts = self.relay_hits = 0
        self.power_s = self.power_r = 0.0
        self.active_s = self.active_r = 0
        self.failed_active = 0
        self.arrivals = self.direct_total = self.relayed_total = 0

    def _deliver(self, packet: PacketRecord, slot: int, measuring: bool) -> None:
        if packet.relayed:
            self.relayed_total += 1
        else:
            self.direct_total += 1
        if not measuring:
            return
        self.deliveries += 1
        self.relayed_in_window += packet.relayed
        if packet.arrival_slot >= self.warmup:
            self.delay_sum += slot - packet.arrival_slot
            self.delay_count += 1

    def record(self, outcome: SlotOutcome) -> None:
        transmission = None
        assignment = outcome.assignment
        if assignment is not None:
            own_su = -1 if assignment.own_su is None else assignment.own_su
            transmission = Transmission(assignment.p_s, assignment.p_r, own_su, outcome.own_ok, outcome.relay_ok)
        self.record_slot(
            outcome.slot,
            outcome.qp_length,
            outcome.qr_length,
            outcome.arrived,
            outcome.direct_delivered,
            outcome.relay_delivered,
            transmission,
        )

    def record_slot(
        self,
        slot: int,
        qp_length: int,
        qr_length: int,
        arrived: bool,
        direct_delivered: PacketRecord | None,
        relay_delivered: PacketRecord | None,
        transmission: Transmission | None,
    ) -> None:
        measuring = slot >= self.warmup
        self.arrivals += arrived
        if direct_delivered is not None:
            self._deliver(direct_delivered, slot, measuring)
        if relay_delivered is not None:
            self._deliver(relay_delivered, slot, measuring)
        if not measuring:
            return

        self.qr_trace[slot - self.warmup] = qr_length
        self.sum_qp += qp_length
        self.sum_qr += qr_length
        if transmission is None:
            return

        self.su_slots += 1
        self.power_s += transmission.p_s
        if transmission.p_s > 0:
            self.active_s += 1
            self.failed_active += not transmission.own_ok
        if transmission.own_ok and transmission.own_su >= 0:
            self.own_hits += 1
            self.su_deliveries[transmission.own_su] += 1
        if qr_length:
            self.relay_attempts += 1
            self.power_r += transmission.p_r
            self.relay_hits += transmission.relay_ok
            if transmission.p_r > 0:
                self.active_r += 1
                self.failed_active += not transmission.relay_ok

    def finish(self, queues: QueueState) -> SimMetrics:
        def ratio(num: float, den: int) -> float | None:
            return num / den if den else None

        return SimMetrics(
            pu_throughput=self.deliveries / self.measured,
            su_throughput=[count / self.measured for count in self.su_deliveries],
            avg_delay=ratio(self.delay_sum, self.delay_count),
            mean_qp=self.sum_qp / self.measured,
            mean_qr=self.sum_qr / self.measured,
            avg_power_s=ratio(self.power_s, self.su_slots) or 0.0,
            avg_power_r=ratio(self.power_r, self.relay_attempts) or 0.0,
            cond_power_s=ratio(self.power_s, self.active_s),
            cond_power_r=ratio(self.power_r, self.active_r),
            relay_success_rate=ratio(self.relay_hits, self.relay_attempts),
            own_success_rate=ratio(self.own_hits, self.su_slots),
            relayed_fraction=ratio(self.relayed_in_window, self.deliveries),
            relay_attempts=self.relay_attempts,
            su_slots=self.su_slots,
            failed_active_transmissions=self.failed_active,
            measured_slots=self.measured,
            arrivals=self.arrivals,
            direct_deliveries=self.direct_total,
            relayed_deliveries=self.relayed_total,
            residual_qp=len(queues.q_p),
            residual_qr=len(queues.q_r),
            stability=stability_diagnostic(self.qr_trace),
        )


class SimulationService:
    """Runs the slotted cooperation protocol and measures throughput, delay and power."""

    def new_state(self, config: SimConfig) -> SimState:
        return SimState(consts=derive_constants(config.params))

    def step(self, state: SimState, sample: ChannelSample, rng: np.random.Generator, config: SimConfig) -> SlotOutcome:
        """Advance one slot: PU service or SU transmissions, then a Bernoulli PU arrival."""
        queues = state.queues
        consts = state.consts
        outcome = SlotOutcome(slot=state.slot, qp_length=len(queues.q_p), qr_length=len(queues.q_r))
        departed_p = departed_r = 0

        if queues.q_p:
            if direct_success(sample, consts):
                outcome.direct_delivered = queues.q_p.popleft()
                departed_p = 1
            elif su_decode_success(sample, consts):
                packet = queues.q_p.popleft()
                packet.relayed = True
                queues.q_r.append(packet)
                outcome.moved_to_relay = True
                departed_p = 1
        else:
            assignment = schedule(sample, outcome.qr_length > 0, consts, config.policy)
            outcome.assignment = assignment
            outcome.relay_ok, outcome.own_ok = transmission_outcomes(sample, assignment, consts)
            if outcome.relay_ok:
                outcome.relay_delivered = queues.q_r.popleft()
                departed_r = 1

        outcome.arrived = bool(rng.random() < config.params.lambda_p)
        if outcome.arrived:
            queues.q_p.append(PacketRecord(arrival_slot=state.slot))

        expected_p = queue_step(outcome.qp_length, departed_p, int(outcome.arrived))
        expected_r = queue_step(outcome.qr_length, departed_r, int(outcome.moved_to_relay))
        if (expected_p, expected_r) != (len(queues.q_p), len(queues.q_r)):
            raise ProtocolError(
                f"slot {state.slot}: queues hold ({len(queues.q_p)}, {len(queues.q_r)}), "
                f"expected ({expected_p}, {expected_r})"
            )
        state.slot += 1
        return outcome

    def _advance_block(
        self,
        state: SimState,
        block: np.ndarray,
        arrivals: np.ndarray,
        config: SimConfig,
        accumulator: _MetricsAccumulator,
    ) -> None:
        """Advance one block of slots with the SU decisions for both queue states precomputed."""
        n = config.params.n_su
        consts = state.consts
        h_r = block[:, n + 1 : 2 * n + 1]
        h_s = block[:, 2 * n + 1 : 3 * n + 1]
        direct = (block[:, 0] > consts.alpha).tolist()
        overheard = (block[:, 1 : n + 1] > consts.alpha).any(axis=1).tolist()
        busy = _transmissions(schedule_batch(h_r, h_s, consts, config.policy))
        idle = _transmissions(schedule_single_batch(h_s, consts, config.policy))
        q_p, q_r = state.queues.q_p, state.queues.q_r

        for k, arrived in enumerate(arrivals.tolist()):
            slot = state.slot
            qp_length, qr_length = len(q_p), len(q_r)
            direct_delivered: PacketRecord | None = None
            relay_delivered: PacketRecord | None = None
            transmission: Transmission | None = None
            if q_p:
                if direct[k]:
                    direct_delivered = q_p.popleft()
                elif overheard[k]:
                    packet = q_p.popleft()
                    packet.relayed = True
                    q_r.append(packet)
            else:
                transmission = busy[k] if q_r else idle[k]
                if transmission.relay_ok:
                    relay_delivered = q_r.popleft()
            if arrived:
                q_p.append(PacketRecord(arrival_slot=slot))
            accumulator.record_slot(
                slot, qp_length, qr_length, arrived, direct_delivered, relay_delivered, transmission
            )
            state.slot += 1

    def run(self, config: SimConfig, *, stepwise: bool = False) -> SimMetrics:
        """Simulate ``config.slots`` slots and summarize the post-warmup window.

        ``stepwise`` routes every slot through ``step``; both paths consume the same
        random streams and produce the same metrics.
        """
        params = config.params
        logger.info(
            "Simulating %s N=%d lambda_p=%.4g for %d slots (seed=%d)",
            config.policy.label,
            params.n_su,
            params.lambda_p,
            config.slots,
            config.seed,
        )
        channel_seq, arrival_seq = np.random.SeedSequence(config.seed).spawn(2)
        channel_rng = np.random.default_rng(channel_seq)
        arrival_rng = np.random.default_rng(arrival_seq)
        state = self.new_state(config)
        accumulator = _MetricsAccumulator(config)

        remaining = config.slots
        while remaining:
            count = min(BLOCK_SLOTS, remaining)
            block = sample_channel_block(channel_rng, params, count)
            if stepwise:
                for sample in samples_from_block(block, params.n_su):
                    accumulator.record(self.step(state, sample, arrival_rng, config))
            else:
                arrivals = arrival_rng.random(count) < params.lambda_p
                self._advance_block(state, block, arrivals, config, accumulator)
            remaining -= count

        metrics = accumulator.finish(state.queues)
        logger.info(
            "Finished %s: PU throughput %.5f, relay success %s, Q_r %s",
            config.policy.label,
            metrics.pu_throughput,
            "n/a" if metrics.relay_success_rate is None else f"{metrics.relay_success_rate:.5f}",
            metrics.stability.verdict,
        )
        return metrics

    def run_many(self, configs: Sequence[SimConfig], workers: int = 1) -> list[SimMetrics]:
        """Run independent simulations and return their metrics in input order."""
        if workers <= 1 or len(configs) <= 1:
            return [self.run(config) for config in configs]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            try:
                return list(pool.map(run_simulation, configs))
            except Exception:
                logger.exception("Parallel simulation batch of %d runs failed", len(configs))
                raise


_simulation_service: SimulationService | None = None


def get_simulation_service() -> SimulationService:
    """Get singleton simulation service instance."""
    global _simulation_service
    if _simulation_service is None:
        _simulation_service = SimulationService()
    return _simulation_service


def run_simulation(config: SimConfig) -> SimMetrics:
    return get_simulation_service().run(config)
