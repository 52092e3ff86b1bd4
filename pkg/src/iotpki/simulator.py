"""Deterministic discrete-event smart-city latency simulation.

Mobile nodes roam a square grid under RandomWaypoint mobility and poll
for the nearest static gateway on a fixed interval. Within radio range
they emit a burst of messages; each message completes either over the
direct device-to-device path (constant link latency, handshake cost
amortized over the first burst of a contact) or over a cloud-mediated
path whose delay is drawn from a Weibull distribution.

Reproducibility: every stochastic purpose draws from its own named RNG
stream derived from the config seed, so mobility is identical across
modes and full reports are bit-for-bit reproducible.
"""

from __future__ import annotations

import heapq
import math
import random
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import IotPkiError

WEIBULL_BETA = 0.5
WEIBULL_LAMBDA = 6.37
MAX_GATEWAYS = 5
GATEWAY_ARM_FRACTION = 0.3  # arm length 150 m on the 500 m reference grid
HISTOGRAM_BINS = 20


class DomainError(IotPkiError):
    """Argument outside the mathematical domain of the operation."""


class InvalidConfig(IotPkiError):
    """Simulation configuration violates an invariant."""


class EmptyInput(IotPkiError):
    """Operation requires at least one sample."""


@dataclass(frozen=True)
class WeibullParams:
    """Shape beta (dimensionless) and scale lam (seconds)."""

    beta: float = WEIBULL_BETA
    lam: float = WEIBULL_LAMBDA

    def __post_init__(self) -> None:
        if not (self.beta > 0 and self.lam > 0):
            raise InvalidConfig(f"weibull shape/scale must be positive: {self}")

    def cdf(self, x: float) -> float:
        if x <= 0:
            return 0.0
        return 1.0 - math.exp(-((x / self.lam) ** self.beta))

    def mean(self) -> float:
        return self.lam * math.gamma(1.0 + 1.0 / self.beta)


def sample_weibull(params: WeibullParams, u: float) -> float:
    """Inverse-CDF transform: x = lam * (-ln(1 - u))^(1/beta)."""
    if not 0.0 < u < 1.0:
        raise DomainError(f"u must lie strictly inside (0, 1), got {u}")
    return params.lam * (-math.log1p(-u)) ** (1.0 / params.beta)


@dataclass(frozen=True)
class SimConfig:
    num_mobile_nodes: int = 500
    num_gateways: int = 5
    grid_size: float = 500.0
    speed_min: float = 5.0
    speed_max: float = 25.0
    gateway_range: float = 100.0
    poll_interval: float = 2.0
    burst_size: int = 10
    mode: str = "d2d"
    d2d_link_latency_ms: float = 17.0
    handshake_cost_ms: float = 50.0
    cloud: WeibullParams = field(default_factory=WeibullParams)
    cloud_connection_cap: int = 0  # 0 = unlimited concurrent cloud requests
    seed: int = 0
    duration: float = 300.0

    def __post_init__(self) -> None:
        if self.mode not in ("d2d", "cloud"):
            raise InvalidConfig(f"mode must be d2d or cloud, got {self.mode!r}")
        if self.num_mobile_nodes < 1:
            raise InvalidConfig("need at least one mobile node")
        if not 1 <= self.num_gateways <= MAX_GATEWAYS:
            raise InvalidConfig(
                f"star topology defines 1..{MAX_GATEWAYS} gateways, got {self.num_gateways}"
            )
        if not (0 < self.speed_min <= self.speed_max):
            raise InvalidConfig(
                f"need 0 < speed_min <= speed_max, got {self.speed_min}..{self.speed_max}"
            )
        positives = {
            "grid_size": self.grid_size,
            "gateway_range": self.gateway_range,
            "poll_interval": self.poll_interval,
            "burst_size": self.burst_size,
            "duration": self.duration,
        }
        for name, value in positives.items():
            if value <= 0:
                raise InvalidConfig(f"{name} must be positive, got {value}")
        if self.d2d_link_latency_ms < 0 or self.handshake_cost_ms < 0:
            raise InvalidConfig("latency constants must be non-negative")
        if self.cloud_connection_cap < 0:
            raise InvalidConfig("cloud_connection_cap must be >= 0 (0 = unlimited)")


@dataclass(frozen=True, slots=True)
class LatencySample:
    node_id: int
    gateway_id: int
    send_time: float
    latency_seconds: float
    mode: str

    def __post_init__(self) -> None:
        if self.latency_seconds < 0:
            raise ValueError(f"negative latency {self.latency_seconds}")


@dataclass(frozen=True)
class SimReport:
    config: SimConfig
    samples: tuple[LatencySample, ...]
    drops: int

    def latencies(self) -> list[float]:
        return [s.latency_seconds for s in self.samples]

    def to_csv(self) -> str:
        lines = ["mode,node,gateway,t_send,latency_s"]
        for s in self.samples:
            lines.append(
                f"{s.mode},{s.node_id},{s.gateway_id},{s.send_time:.3f},{s.latency_seconds:.6f}"
            )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Summary:
    count: int
    mean: float
    median: float
    p95: float
    max: float
    histogram_csv: str


def summarize(latencies: Sequence[float], bins: int = HISTOGRAM_BINS) -> Summary:
    """Aggregate statistics plus a fixed-bin histogram CSV."""
    if not latencies:
        raise EmptyInput("no samples to summarize")
    xs = sorted(latencies)
    n = len(xs)
    p95 = xs[max(0, math.ceil(0.95 * n) - 1)]
    top = xs[-1]
    width = (top / bins) if top > 0 else 1.0
    counts = [0] * bins
    for x in xs:
        idx = min(int(x / width), bins - 1)
        counts[idx] += 1
    lines = ["bin_lo,bin_hi,count"]
    for i, count in enumerate(counts):
        lines.append(f"{i * width:.6f},{(i + 1) * width:.6f},{count}")
    return Summary(
        count=n,
        mean=statistics.mean(xs),
        median=statistics.median(xs),
        p95=p95,
        max=top,
        histogram_csv="\n".join(lines) + "\n",
    )


def gateway_positions(cfg: SimConfig) -> list[tuple[float, float]]:
    """Star topology: one gateway at grid center, four on the cardinal arms."""
    center = cfg.grid_size / 2.0
    arm = cfg.grid_size * GATEWAY_ARM_FRACTION
    star = [
        (center, center),
        (center + arm, center),
        (center - arm, center),
        (center, center + arm),
        (center, center - arm),
    ]
    return star[: cfg.num_gateways]


def _stream(seed: int, purpose: str) -> random.Random:
    """Named RNG stream; string seeding is deterministic across processes."""
    return random.Random(f"{seed}|{purpose}")


class _Node:
    """RandomWaypoint walker with zero pause time. Position is evaluated
    lazily at monotonically increasing query times."""

    __slots__ = ("rng", "grid", "speed_min", "speed_max", "pos", "waypoint",
                 "speed", "leg_start_t", "leg_duration", "contact_gateway")

    def __init__(self, rng: random.Random, cfg: SimConfig) -> None:
        self.rng = rng
        self.grid = cfg.grid_size
        self.speed_min = cfg.speed_min
        self.speed_max = cfg.speed_max
        self.pos = (rng.uniform(0.0, self.grid), rng.uniform(0.0, self.grid))
        self.contact_gateway: int | None = None
        self._pick_leg(0.0)

    def _pick_leg(self, t: float) -> None:
        self.leg_start_t = t
        while True:
            self.waypoint = (self.rng.uniform(0.0, self.grid), self.rng.uniform(0.0, self.grid))
            self.speed = self.rng.uniform(self.speed_min, self.speed_max)
            distance = math.dist(self.pos, self.waypoint)
            if distance > 0.0:
                self.leg_duration = distance / self.speed
                return

    def position(self, t: float) -> tuple[float, float]:
        while t >= self.leg_start_t + self.leg_duration:
            self.pos = self.waypoint
            self._pick_leg(self.leg_start_t + self.leg_duration)
        frac = (t - self.leg_start_t) / self.leg_duration
        x0, y0 = self.pos
        x1, y1 = self.waypoint
        return (x0 + (x1 - x0) * frac, y0 + (y1 - y0) * frac)


def run_smart_city(cfg: SimConfig) -> SimReport:
    """Event loop over node poll events on a simulated-time priority queue."""
    gateways = gateway_positions(cfg)
    nodes = [_Node(_stream(cfg.seed, f"mobility|{i}"), cfg) for i in range(cfg.num_mobile_nodes)]
    cloud_rng = _stream(cfg.seed, "cloud")
    link_s = cfg.d2d_link_latency_ms / 1000.0
    handshake_s = cfg.handshake_cost_ms / 1000.0

    samples: list[LatencySample] = []
    drops = 0
    inflight: list[float] = []  # completion times of outstanding cloud requests

    events: list[tuple[float, int]] = [(0.0, i) for i in range(cfg.num_mobile_nodes)]
    heapq.heapify(events)
    while events:
        t, node_id = heapq.heappop(events)
        if t > cfg.duration:
            continue
        node = nodes[node_id]
        pos = node.position(t)
        nearest = min(
            range(len(gateways)),
            key=lambda g: (math.dist(pos, gateways[g]), g),
        )
        if math.dist(pos, gateways[nearest]) <= cfg.gateway_range:
            fresh_contact = node.contact_gateway != nearest
            node.contact_gateway = nearest
            for _ in range(cfg.burst_size):
                if cfg.mode == "d2d":
                    latency = link_s + (handshake_s / cfg.burst_size if fresh_contact else 0.0)
                else:
                    while inflight and inflight[0] <= t:
                        heapq.heappop(inflight)
                    if cfg.cloud_connection_cap and len(inflight) >= cfg.cloud_connection_cap:
                        drops += 1
                        continue
                    latency = link_s + sample_weibull(cfg.cloud, cloud_rng.random())
                    heapq.heappush(inflight, t + latency)
                samples.append(LatencySample(node_id, nearest, t, latency, cfg.mode))
        else:
            node.contact_gateway = None
        heapq.heappush(events, (t + cfg.poll_interval, node_id))
        if events and events[0][0] > cfg.duration:
            break
    return SimReport(config=cfg, samples=tuple(samples), drops=drops)
