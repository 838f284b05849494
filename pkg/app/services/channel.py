"""Channel model: derived constants, fading draws, rate predicates and the queue update rule."""

import math
from collections import deque
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from app.schemas.system import SystemParams

# Rates computed from powers that meet the target with equality land within a few ulps of R0.
RATE_TOLERANCE = 1e-9


class ProtocolError(RuntimeError):
    """Raised when a queue update violates the protocol (e.g. departure from an empty queue)."""


@dataclass(frozen=True)
class DerivedConstants:
    """Dimensionless thresholds shared by the simulator and the analytic engine.

    ``threshold`` is 2^R0 - 1, the SNR a link needs to carry the target rate.
    With zero transmit power ``a`` is infinite and ``beta`` is 1.
    """

    alpha: float
    a: float
    b: float
    beta: float
    threshold: float
    rate_r0: float
    pmax: float


@dataclass(frozen=True, slots=True)
class ChannelSample:
    """One slot's fading gains. Index i of each vector belongs to SU i."""

    h_p: float
    h_ps: Sequence[float]
    h_r: Sequence[float]
    h_s: Sequence[float]


@dataclass(slots=True)
class PacketRecord:
    arrival_slot: int
    relayed: bool = False


@dataclass
class QueueState:
    q_p: deque[PacketRecord] = field(default_factory=deque)
    q_r: deque[PacketRecord] = field(default_factory=deque)


def derive_constants(params: SystemParams) -> DerivedConstants:
    """Compute alpha, a, b and beta from the system parameters."""
    threshold = 2.0**params.rate_r0 - 1.0
    a = threshold / params.pmax_over_n0 if params.pmax_over_n0 > 0 else math.inf
    return DerivedConstants(
        alpha=threshold / params.p0_over_n0,
        a=a,
        b=1.0 / threshold,
        beta=-math.expm1(-a),
        threshold=threshold,
        rate_r0=params.rate_r0,
        pmax=params.pmax_over_n0,
    )


def _row_to_sample(row: Sequence[float], n_su: int) -> ChannelSample:
    return ChannelSample(
        h_p=row[0],
        h_ps=row[1 : n_su + 1],
        h_r=row[n_su + 1 : 2 * n_su + 1],
        h_s=row[2 * n_su + 1 : 3 * n_su + 1],
    )


def sample_channel_block(rng: np.random.Generator, params: SystemParams, count: int) -> np.ndarray:
    """Draw ``count`` slots of gains as a (count, 3N + 1) array.

    Columns follow the per-slot draw order h_p, h_ps[0..N), h_r[0..N), h_s[0..N),
    so row k equals the k-th of ``count`` successive ``sample_channels`` calls.
    """
    block = rng.standard_exponential((count, 3 * params.n_su + 1))
    block[:, 0] *= params.sigma_p_sq
    return block


def sample_channels(rng: np.random.Generator, params: SystemParams) -> ChannelSample:
    """Draw one slot of independent Rayleigh gains."""
    row = sample_channel_block(rng, params, 1)[0]
    return _row_to_sample(row.tolist(), params.n_su)


def samples_from_block(block: np.ndarray, n_su: int) -> Iterator[ChannelSample]:
    for row in block.tolist():
        yield _row_to_sample(row, n_su)


def direct_success(sample: ChannelSample, consts: DerivedConstants) -> bool:
    return sample.h_p > consts.alpha


def su_decode_success(sample: ChannelSample, consts: DerivedConstants) -> bool:
    """True when at least one SU overhears the PU packet."""
    return max(sample.h_ps) > consts.alpha


def rate_secondary(p_s: Any, h_s: Any) -> Any:
    """Interference-free secondary rate log2(1 + p_s h_s); accepts scalars or arrays."""
    return np.log2(1.0 + np.multiply(p_s, h_s))


def rate_relay(p_r: Any, h_r: Any, p_s: Any, h_i: Any) -> Any:
    """Relay rate on the Z-interference channel, treating the s* signal as noise at D_p."""
    return np.log2(1.0 + np.multiply(p_r, h_r) / (1.0 + np.multiply(p_s, h_i)))


def meets_target(rate: Any, consts: DerivedConstants) -> Any:
    return rate >= consts.rate_r0 - RATE_TOLERANCE


def queue_step(length: int, departed: int, arrived: int) -> int:
    """Late-arrival queue update: departure first, then arrival."""
    if departed not in (0, 1) or arrived not in (0, 1):
        raise ValueError("departed and arrived must be 0 or 1")
    if length < 0:
        raise ValueError(f"queue length cannot be negative, got {length}")
    if departed and length == 0:
        raise ProtocolError("departure from an empty queue")
    return max(length - departed, 0) + arrived
