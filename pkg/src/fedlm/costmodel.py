"""Analytic wall-time and communication accounting for PS, AllReduce and Ring-AllReduce.

Units: payload ``S`` in megabytes (MB, 2**20 bytes), bandwidth ``B`` in MB/s,
throughput ``nu`` in batches/s, times in seconds, server capacity ``zeta`` in
FLOP/s. All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from fedlm.errors import ConfigError

MB_BYTES = 2**20
# Aggregating one payload byte is charged 4 FLOP (accumulate + scale on both halves of a 2-byte word).
AGG_FLOP_PER_BYTE = 4
DEFAULT_SERVER_FLOPS = 5e12
DEFAULT_CHANNEL_THRESHOLD = 100


class Topology(str, Enum):
    PS = "ps"
    AR = "ar"
    RAR = "rar"


@dataclass(frozen=True)
class BandwidthMatrix:
    """Symmetric per-link bandwidths (MB/s) between named sites; NaN marks a missing link."""

    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        n = len(self.names)
        if v.shape != (n, n):
            raise ConfigError(f"bandwidth matrix must be {n}x{n}, got {v.shape}")
        both = ~np.isnan(v) & ~np.isnan(v.T)
        if np.any(np.isnan(v) != np.isnan(v.T)) or not np.array_equal(v[both], v.T[both]):
            raise ConfigError("bandwidth matrix must be symmetric")
        if np.any(v[~np.isnan(v)] < 0):
            raise ConfigError("bandwidths must be non-negative")
        object.__setattr__(self, "values", v)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown site {name!r}") from None

    def link(self, i: int, j: int) -> float:
        b = float(self.values[i, j])
        if math.isnan(b) or b <= 0:
            raise ConfigError(f"no usable link between {self.names[i]!r} and {self.names[j]!r}")
        return b


def parse_bandwidth_matrix(text: str) -> BandwidthMatrix:
    """Parse a whitespace table: a header of site names, then one row per site.

    ``-`` marks a missing link; lines starting with ``#`` are comments. ::

        England Utah Quebec
        England  -   125  250
        Utah    125   -   500
        Quebec  250  500   -
    """
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows:
        raise ConfigError("empty bandwidth table")
    names = tuple(rows[0])
    if len(rows) - 1 != len(names):
        raise ConfigError(f"expected {len(names)} rows, got {len(rows) - 1}")
    values = np.full((len(names), len(names)), np.nan)
    for row in rows[1:]:
        if len(row) != len(names) + 1:
            raise ConfigError(f"row {row[0]!r} has {len(row) - 1} values, expected {len(names)}")
        if row[0] not in names:
            raise ConfigError(f"row label {row[0]!r} is not in the header")
        i = names.index(row[0])
        for j, cell in enumerate(row[1:]):
            values[i, j] = np.nan if cell == "-" else float(cell)
    return BandwidthMatrix(names, values)


def load_bandwidth_matrix(path: str | Path) -> BandwidthMatrix:
    return parse_bandwidth_matrix(Path(path).read_text())


def ring_bandwidth(matrix: BandwidthMatrix, ring: Sequence[int]) -> float:
    """Slowest link over consecutive ring edges, including the closing edge."""
    if len(ring) < 2:
        raise ConfigError("a ring needs at least two members")
    return min(matrix.link(ring[i], ring[(i + 1) % len(ring)]) for i in range(len(ring)))


def _positive(**values) -> None:
    for name, v in values.items():
        if not v > 0:
            raise ConfigError(f"{name} must be > 0, got {v}")


def local_time(tau: int, nu: float) -> float:
    """Client compute time for ``tau`` local steps at ``nu`` batches/s."""
    if not nu > 0:
        raise ConfigError(f"throughput must be > 0, got {nu}")
    if tau < 0:
        raise ConfigError("tau must be >= 0")
    return tau / nu


def comm_time(
    topology: Topology | str,
    k: int,
    s_mb: float,
    bandwidth: float | None = None,
    *,
    matrix: BandwidthMatrix | None = None,
    ring: Sequence[int] | None = None,
    channel_threshold: int = DEFAULT_CHANNEL_THRESHOLD,
) -> float:
    """Per-round communication time.

    PS: ``K S / B``; AR: ``(K - 1) S / B``; RAR: ``2 S (K - 1) / (K B)`` where for a
    bandwidth matrix ``B`` is the slowest link of the ring (default ring: members
    ``0..K-1`` in order). ``K = 1`` never communicates. ``channel_threshold`` is
    accepted for configuration compatibility; both of its regimes use ``K S / B``.
    """
    topology = Topology(topology)
    if k < 1:
        raise ConfigError(f"clients per round must be >= 1, got {k}")
    _positive(payload_mb=s_mb)
    if topology is Topology.RAR and matrix is not None:
        members = list(ring) if ring is not None else list(range(k))
        if len(members) != k:
            raise ConfigError(f"ring has {len(members)} members for K={k}")
        if k == 1:
            return 0.0
        bandwidth = ring_bandwidth(matrix, members)
    if bandwidth is None:
        raise ConfigError(f"{topology.value} needs a scalar bandwidth")
    _positive(bandwidth=bandwidth)
    if k == 1:
        return 0.0
    if topology is Topology.PS:
        return k * s_mb / bandwidth
    if topology is Topology.AR:
        return (k - 1) * s_mb / bandwidth
    return 2.0 * s_mb * (k - 1) / (k * bandwidth)


def agg_flops(k: int, s_mb: float) -> float:
    """Server work for averaging ``k`` payloads of ``s_mb`` MB (the pinned unit convention)."""
    return k * s_mb * MB_BYTES * AGG_FLOP_PER_BYTE


def agg_time(k: int, s_mb: float, zeta: float = DEFAULT_SERVER_FLOPS) -> float:
    """``K S / zeta`` with S converted to FLOP via :func:`agg_flops`."""
    _positive(server_flops=zeta)
    if k < 0:
        raise ConfigError("K must be >= 0")
    return agg_flops(k, s_mb) / zeta


def megabytes_per_round(topology: Topology | str, k: int, s_mb: float) -> float:
    """Traffic per round: PS total at the server ``2 K S`` (broadcast + upload);
    AR per worker ``2 (K - 1) S``; RAR per worker ``2 S (K - 1) / K``. Zero for K = 1."""
    topology = Topology(topology)
    if k < 1:
        raise ConfigError(f"clients per round must be >= 1, got {k}")
    if k == 1:
        return 0.0
    if topology is Topology.PS:
        return 2.0 * k * s_mb
    if topology is Topology.AR:
        return 2.0 * (k - 1) * s_mb
    return 2.0 * s_mb * (k - 1) / k


@dataclass(frozen=True)
class CostModelParams:
    payload_mb: float
    bandwidth_mbps: float = 125.0
    throughput: float = 2.0
    local_steps: int = 64
    server_flops: float = DEFAULT_SERVER_FLOPS
    channel_threshold: int = DEFAULT_CHANNEL_THRESHOLD
    matrix: BandwidthMatrix | None = None
    ring: tuple[int, ...] | None = None

    def __post_init__(self):
        _positive(
            payload_mb=self.payload_mb,
            bandwidth_mbps=self.bandwidth_mbps,
            throughput=self.throughput,
            server_flops=self.server_flops,
            channel_threshold=self.channel_threshold,
        )
        if self.local_steps < 0:
            raise ConfigError("local_steps must be >= 0")


@dataclass(frozen=True)
class WallTimeBreakdown:
    rounds: int
    t_local: float
    t_comm: float
    t_agg: float
    t_round: float
    t_total: float
    mb_per_round: float
    total_mb: float

    @property
    def comm_percent(self) -> float:
        """Share of the total wall time spent communicating, in percent."""
        return 0.0 if self.t_total == 0 else 100.0 * self.rounds * self.t_comm / self.t_total


def round_breakdown(
    params: CostModelParams,
    topology: Topology | str,
    k: int,
    ring: Sequence[int] | None = None,
) -> WallTimeBreakdown:
    return total_wall_time(1, params, topology, k, ring=ring)


def total_wall_time(
    rounds: int,
    params: CostModelParams,
    topology: Topology | str,
    k: int,
    *,
    ring: Sequence[int] | None = None,
) -> WallTimeBreakdown:
    """``T_round = T_L + T_C`` and ``T_total = R T_round``; ``T_agg`` is reported but not added."""
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    t_l = local_time(params.local_steps, params.throughput)
    t_c = comm_time(
        topology,
        k,
        params.payload_mb,
        params.bandwidth_mbps,
        matrix=params.matrix if Topology(topology) is Topology.RAR else None,
        ring=ring if ring is not None else params.ring,
        channel_threshold=params.channel_threshold,
    )
    t_round = t_l + t_c
    mb = megabytes_per_round(topology, k, params.payload_mb)
    return WallTimeBreakdown(
        rounds=rounds,
        t_local=t_l,
        t_comm=t_c,
        t_agg=agg_time(k, params.payload_mb, params.server_flops),
        t_round=t_round,
        t_total=rounds * t_round,
        mb_per_round=mb,
        total_mb=rounds * mb,
    )


def federated_sync_events(total_steps: int, tau: int) -> int:
    """Synchronizations of a federated run: one per round of ``tau`` local steps."""
    if tau < 1:
        raise ConfigError("tau must be >= 1")
    if total_steps < 0:
        raise ConfigError("total_steps must be >= 0")
    return -(-total_steps // tau)


def ddp_sync_events(total_steps: int) -> int:
    """Synchronizations of data-parallel training: one gradient all-reduce per step."""
    if total_steps < 0:
        raise ConfigError("total_steps must be >= 0")
    return total_steps


def comm_reduction_ratio(total_steps: int, tau: int) -> float:
    """How many times fewer sync events federated training needs than per-step DDP."""
    fed = federated_sync_events(total_steps, tau)
    if fed == 0:
        return 1.0
    return ddp_sync_events(total_steps) / fed
