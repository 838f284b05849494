"""Node selection (BSL/BPL) and power allocation (EP/AP) for the secondary users."""

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from app.schemas.system import PolicyConfig, PowerPolicy, Reselection, SelectionPolicy
from app.services.channel import ChannelSample, DerivedConstants, meets_target, rate_relay, rate_secondary


@dataclass(frozen=True, slots=True)
class Assignment:
    """Per-slot transmission plan.

    A silenced role keeps its index unless the other role was re-drawn after the
    silencing, in which case the index is dropped so the two never coincide.
    """

    relay_su: int | None
    own_su: int | None
    p_r: float = 0.0
    p_s: float = 0.0
    silenced_relay: bool = False
    silenced_own: bool = False


@dataclass(frozen=True)
class BatchOutcome:
    relay_success: np.ndarray
    own_success: np.ndarray
    p_r: np.ndarray
    p_s: np.ndarray
    relay_su: np.ndarray
    own_su: np.ndarray


def _argmax(values: Sequence[float], exclude: int | None = None) -> int:
    best = -1
    best_value = -math.inf
    for i, value in enumerate(values):
        if i != exclude and value > best_value:
            best, best_value = i, value
    return best


def select_pair_bsl(sample: ChannelSample) -> tuple[int, int]:
    """Return (s*, r*): s* has the best link to D_s, r* the best link to D_p among the rest."""
    if len(sample.h_s) < 2:
        raise ValueError("pair selection needs at least two SUs")
    s_star = _argmax(sample.h_s)
    return s_star, _argmax(sample.h_r, exclude=s_star)


def select_pair_bpl(sample: ChannelSample) -> tuple[int, int]:
    """Return (r*, s*): r* has the best link to D_p, s* the best link to D_s among the rest."""
    if len(sample.h_r) < 2:
        raise ValueError("pair selection needs at least two SUs")
    r_star = _argmax(sample.h_r)
    return r_star, _argmax(sample.h_s, exclude=r_star)


def select_single(sample: ChannelSample) -> int:
    if len(sample.h_s) < 2:
        raise ValueError("the cluster needs at least two SUs")
    return _argmax(sample.h_s)


def allocate_ep(relay_su: int | None, own_su: int | None, consts: DerivedConstants) -> Assignment:
    """Every transmitting SU uses the full power budget; EP never silences."""
    return Assignment(
        relay_su=relay_su,
        own_su=own_su,
        p_r=consts.pmax if relay_su is not None else 0.0,
        p_s=consts.pmax if own_su is not None else 0.0,
    )


def _required_power(threshold: float, gain: float) -> float:
    return threshold / gain if gain > 0 else math.inf


def allocate_ap(
    sample: ChannelSample,
    relay_su: int | None,
    own_su: int | None,
    consts: DerivedConstants,
    policy: PolicyConfig,
) -> Assignment:
    """Minimum powers meeting the target rate, computed for s* first and then r*.

    A role whose required power exceeds the budget is silenced. Reselection of the
    surviving role follows ``policy.reselect_on_silence`` in a single pass.
    """
    literal = policy.reselect_on_silence is Reselection.LITERAL
    p_s = p_r = 0.0
    silenced_own = silenced_relay = False

    if own_su is not None:
        p_s = _required_power(consts.threshold, sample.h_s[own_su])
        if p_s > consts.pmax:
            p_s, silenced_own = 0.0, True
            if relay_su is not None and (policy.selection is SelectionPolicy.BSL or literal):
                relay_su, own_su = _argmax(sample.h_r), None

    if relay_su is not None:
        interference = p_s * sample.h_r[own_su] if own_su is not None and p_s > 0 else 0.0
        p_r = _required_power(consts.threshold, sample.h_r[relay_su]) * (1.0 + interference)
        if p_r > consts.pmax:
            p_r, silenced_relay = 0.0, True
            if literal and own_su is not None and not silenced_own:
                own_su, relay_su = _argmax(sample.h_s), None
                p_s = _required_power(consts.threshold, sample.h_s[own_su])

    return Assignment(
        relay_su=relay_su,
        own_su=own_su,
        p_r=p_r,
        p_s=p_s,
        silenced_relay=silenced_relay,
        silenced_own=silenced_own,
    )


def schedule(sample: ChannelSample, relay_busy: bool, consts: DerivedConstants, policy: PolicyConfig) -> Assignment:
    """Select roles for a PU-idle slot and allocate their powers."""
    relay_su: int | None
    if not relay_busy:
        relay_su, own_su = None, select_single(sample)
    elif policy.selection is SelectionPolicy.BSL:
        own_su, relay_su = select_pair_bsl(sample)
    else:
        relay_su, own_su = select_pair_bpl(sample)

    if policy.power is PowerPolicy.EP:
        return allocate_ep(relay_su, own_su, consts)
    return allocate_ap(sample, relay_su, own_su, consts, policy)


def transmission_outcomes(
    sample: ChannelSample, assignment: Assignment, consts: DerivedConstants
) -> tuple[bool, bool]:
    """Return (relay delivered, own packet delivered) for an assignment."""
    own_ok = False
    relay_ok = False
    if assignment.own_su is not None and assignment.p_s > 0:
        own_ok = bool(meets_target(rate_secondary(assignment.p_s, sample.h_s[assignment.own_su]), consts))
    if assignment.relay_su is not None and assignment.p_r > 0:
        h_i = sample.h_r[assignment.own_su] if assignment.own_su is not None else 0.0
        rate = rate_relay(assignment.p_r, sample.h_r[assignment.relay_su], assignment.p_s, h_i)
        relay_ok = bool(meets_target(rate, consts))
    return relay_ok, own_ok


# --- Vectorized rules for Monte Carlo estimation ---


def _argmax_excluding(values: np.ndarray, exclude: np.ndarray) -> np.ndarray:
    masked = values.copy()
    masked[np.arange(values.shape[0]), exclude] = -np.inf
    return masked.argmax(axis=1)


def select_pairs_batch(h_r: np.ndarray, h_s: np.ndarray, selection: SelectionPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Return (relay indices, own indices) for a batch of relay-busy slots."""
    if selection is SelectionPolicy.BSL:
        own = h_s.argmax(axis=1)
        return _argmax_excluding(h_r, own), own
    relay = h_r.argmax(axis=1)
    return relay, _argmax_excluding(h_s, relay)


def schedule_batch(h_r: np.ndarray, h_s: np.ndarray, consts: DerivedConstants, policy: PolicyConfig) -> BatchOutcome:
    """Apply selection, allocation and success rules to a batch of relay-busy slots.

    Mirrors ``schedule`` + ``transmission_outcomes`` row by row.
    """
    rows = np.arange(h_r.shape[0])
    relay, own = select_pairs_batch(h_r, h_s, policy.selection)
    own_present = np.ones(rows.size, dtype=bool)

    if policy.power is PowerPolicy.EP:
        p_s = np.full(rows.size, consts.pmax)
        p_r = np.full(rows.size, consts.pmax)
    else:
        literal = policy.reselect_on_silence is Reselection.LITERAL
        with np.errstate(divide="ignore"):
            p_s = consts.threshold / h_s[rows, own]
        silenced_own = p_s > consts.pmax
        p_s = np.where(silenced_own, 0.0, p_s)
        if policy.selection is SelectionPolicy.BSL or literal:
            relay = np.where(silenced_own, h_r.argmax(axis=1), relay)
            own_present &= ~silenced_own
        interference = np.where(own_present, p_s * h_r[rows, own], 0.0)
        with np.errstate(divide="ignore"):
            p_r = consts.threshold / h_r[rows, relay] * (1.0 + interference)
        silenced_relay = p_r > consts.pmax
        p_r = np.where(silenced_relay, 0.0, p_r)
        if literal:
            redraw = silenced_relay & ~silenced_own
            own = np.where(redraw, h_s.argmax(axis=1), own)
            with np.errstate(divide="ignore"):
                p_s = np.where(redraw, consts.threshold / h_s[rows, own], p_s)

    h_i = np.where(own_present, h_r[rows, own], 0.0)
    relay_success = (p_r > 0) & meets_target(rate_relay(p_r, h_r[rows, relay], p_s, h_i), consts)
    own_success = own_present & (p_s > 0) & meets_target(rate_secondary(p_s, h_s[rows, own]), consts)
    return BatchOutcome(
        relay_success=relay_success,
        own_success=own_success,
        p_r=p_r,
        p_s=p_s,
        relay_su=relay,
        own_su=np.where(own_present, own, -1),
    )


def schedule_single_batch(h_s: np.ndarray, consts: DerivedConstants, policy: PolicyConfig) -> BatchOutcome:
    """Apply the rules for slots where both queues are empty and only s* transmits."""
    own = h_s.argmax(axis=1)
    best = h_s[np.arange(own.size), own]
    if policy.power is PowerPolicy.EP:
        p_s = np.full(best.size, consts.pmax)
    else:
        with np.errstate(divide="ignore"):
            p_s = consts.threshold / best
        p_s = np.where(p_s > consts.pmax, 0.0, p_s)
    return BatchOutcome(
        relay_success=np.zeros(best.size, dtype=bool),
        own_success=(p_s > 0) & meets_target(rate_secondary(p_s, best), consts),
        p_r=np.zeros(best.size),
        p_s=p_s,
        relay_su=np.full(best.size, -1),
        own_su=own,
    )


def single_success_batch(h_s: np.ndarray, consts: DerivedConstants, policy: PolicyConfig) -> np.ndarray:
    """Own-packet success for a batch of slots where only s* transmits."""
    return schedule_single_batch(h_s, consts, policy).own_success
