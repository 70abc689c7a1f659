"""Coefficient exchange for N agents exploring one distribution.

Agents run their controllers independently and trade trajectory
statistics once per step through a hub: a pure relay with no
computation.  The wire format is fixed little-endian -- a 32-byte header
(agent id u32, step index u64, window start f64, window end f64, count
u32) followed by ``count`` float64 coefficients in index order -- and is
byte-identical between the in-process hub and the datagram transport.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field

import numpy as np

from .fourier import IndexSet, SearchDomain, TrajectorySegment, basis_matrix, lambda_weights
from .fourier import _clip_to_window

__all__ = [
    "CoefficientMessage",
    "Hub",
    "HubState",
    "UdpHub",
    "UdpHubClient",
    "combine_coeffs",
    "hub_exchange",
    "collective_ergodicity",
]

_HEADER = struct.Struct("<IQddI")
HEADER_BYTES = _HEADER.size


def combine_coeffs(
    own: np.ndarray,
    others: list[np.ndarray],
    n_agents: int,
    normalized_average: bool = False,
) -> np.ndarray:
    """Merge one agent's statistics with its peers' previous-step ones.

    Default is the additive rule ``own + mean(others)``; note the result
    then carries total mass 2 rather than 1, which is surfaced (not
    hidden) -- set ``normalized_average`` for the plain mean over all
    agents instead.
    """
    own = np.asarray(own, dtype=float)
    if len(others) != n_agents - 1:
        raise ValueError(f"expected {n_agents - 1} peer coefficient vectors, got {len(others)}")
    for other in others:
        if np.asarray(other).shape != own.shape:
            raise ValueError("coefficient length mismatch among agents")
    if not others:
        return own.copy()
    stacked = np.vstack([np.asarray(o, dtype=float) for o in others])
    if normalized_average:
        return (own + stacked.sum(axis=0)) / n_agents
    return own + stacked.mean(axis=0)


@dataclass(frozen=True)
class CoefficientMessage:
    """One agent's trajectory statistics for one step."""

    agent_id: int
    step_index: int
    t0erg: float
    t_end: float
    coefficients: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "coefficients", np.asarray(self.coefficients, dtype=float).reshape(-1)
        )

    @property
    def nbytes(self) -> int:
        return HEADER_BYTES + 8 * self.coefficients.size

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(
            self.agent_id, self.step_index, self.t0erg, self.t_end, self.coefficients.size
        )
        return head + self.coefficients.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CoefficientMessage":
        agent_id, step_index, t0erg, t_end, count = _HEADER.unpack_from(blob, 0)
        coeffs = np.frombuffer(blob, dtype="<f8", count=count, offset=HEADER_BYTES).copy()
        return cls(agent_id, step_index, t0erg, t_end, coeffs)


@dataclass
class HubState:
    """Latest message per agent plus per-channel byte counters."""

    latest: dict = field(default_factory=dict)
    sent_bytes: dict = field(default_factory=dict)
    received_bytes: dict = field(default_factory=dict)
    stale_events: list = field(default_factory=list)


class Hub:
    """Synchronous star relay: every agent's message goes to all peers.

    ``exchange`` is a per-step barrier; an agent that misses a step has
    its previous message re-delivered to the peers and the event logged.
    """

    def __init__(self, agent_ids):
        self.agent_ids = sorted(int(a) for a in agent_ids)
        if len(set(self.agent_ids)) != len(self.agent_ids):
            raise ValueError("agent ids must be unique")
        self.state = HubState(
            sent_bytes={a: 0 for a in self.agent_ids},
            received_bytes={a: 0 for a in self.agent_ids},
        )

    def exchange(self, outgoing: dict[int, CoefficientMessage], step_index: int):
        """Deliver each agent the other agents' latest messages."""
        for agent in self.agent_ids:
            msg = outgoing.get(agent)
            if msg is None:
                prev = self.state.latest.get(agent)
                if prev is None:
                    raise ValueError(f"agent {agent} has no message and no stored fallback")
                self.state.stale_events.append((step_index, agent))
            else:
                blob = msg.to_bytes()
                self.state.sent_bytes[agent] += len(blob)
                self.state.latest[agent] = CoefficientMessage.from_bytes(blob)
        delivered = {}
        for agent in self.agent_ids:
            inbox = [self.state.latest[p] for p in self.agent_ids if p != agent]
            self.state.received_bytes[agent] += sum(m.nbytes for m in inbox)
            delivered[agent] = inbox
        return delivered


def hub_exchange(hub: Hub, outgoing: dict[int, CoefficientMessage], step_index: int):
    return hub.exchange(outgoing, step_index)


class UdpHub:
    """Datagram relay on the loopback interface, same bytes as :class:`Hub`.

    Each registered client sends one datagram per step; once all have
    arrived the hub forwards every message to the other clients.
    """

    def __init__(self, n_agents: int, timeout: float = 5.0):
        self.n_agents = n_agents
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.settimeout(timeout)
        self.address = self.sock.getsockname()

    def serve_step(self):
        """Collect one datagram per agent, then rebroadcast to the peers."""
        inbox = {}
        senders = {}
        while len(inbox) < self.n_agents:
            blob, addr = self.sock.recvfrom(1 << 20)
            msg = CoefficientMessage.from_bytes(blob)
            inbox[msg.agent_id] = blob
            senders[msg.agent_id] = addr
        for agent, addr in senders.items():
            for peer, blob in inbox.items():
                if peer != agent:
                    self.sock.sendto(blob, addr)

    def close(self):
        self.sock.close()


class UdpHubClient:
    def __init__(self, hub_address, timeout: float = 5.0):
        self.hub_address = hub_address
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.settimeout(timeout)

    def exchange(self, message: CoefficientMessage, n_peers: int):
        self.sock.sendto(message.to_bytes(), self.hub_address)
        received = []
        while len(received) < n_peers:
            blob, _ = self.sock.recvfrom(1 << 20)
            received.append(CoefficientMessage.from_bytes(blob))
        received.sort(key=lambda m: m.agent_id)
        return received

    def close(self):
        self.sock.close()


def collective_ergodicity(
    trajectories: list[TrajectorySegment],
    phi: np.ndarray,
    domain: SearchDomain,
    idx: IndexSet,
    window: tuple[float, float],
) -> float:
    """Ergodicity of the pooled trajectories against one distribution.

    The pooled statistics average the basis integrals over total agent
    time (N trajectories of length t count as one trajectory of length
    N*t), so a single agent reduces exactly to its own ergodic metric
    and perfect collective coverage drives the value to zero.
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    lo, hi = window
    if hi <= lo:
        raise ValueError("window must have positive length")
    total = np.zeros(idx.size)
    for seg in trajectories:
        t, x = _clip_to_window(seg.times, seg.states, lo, hi)
        total += np.trapezoid(basis_matrix(domain, idx, x), t, axis=0)
    pooled = total / (len(trajectories) * (hi - lo))
    diff = pooled - np.asarray(phi, dtype=float)
    return float(np.sum(lambda_weights(idx) * diff * diff))
