"""
Network Simulation Module

This module provides the datagram channels the renderer talks over:
SimChannel, a deterministic virtual-clock link with delay, jitter, loss and
a bandwidth cap, and UdpChannel, a real UDP socket with the same send/poll
interface. It also loads and synthesizes latency traces.
"""

import heapq
import logging
import math
import queue
import socket
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

TRACE_MODES = ("cycle", "sample")


@dataclass(frozen=True)
class LinkConfig:
    """
    One direction of a simulated link.

    Attributes:
        one_way_delay_ms: constant propagation delay
        jitter_ms: extra delay drawn uniformly from [0, jitter_ms]
        loss_prob: independent per-datagram loss probability in [0, 1]
        bandwidth_bps: serialization rate, None for unlimited
        seed: RNG seed for loss, jitter and trace sampling
        trace: per-datagram delays that replace delay + jitter when set
        trace_mode: "cycle" walks the trace in order, "sample" draws from it
    """

    one_way_delay_ms: float = 0.0
    jitter_ms: float = 0.0
    loss_prob: float = 0.0
    bandwidth_bps: Optional[float] = None
    seed: int = 0
    trace: Optional[Tuple[float, ...]] = None
    trace_mode: str = "cycle"

    def __post_init__(self):
        if self.one_way_delay_ms < 0 or self.jitter_ms < 0:
            raise ValueError("one_way_delay_ms and jitter_ms must be >= 0")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError(f"loss_prob must be in [0, 1], got {self.loss_prob}")
        if self.bandwidth_bps is not None and self.bandwidth_bps <= 0:
            raise ValueError(f"bandwidth_bps must be positive, got {self.bandwidth_bps}")
        if self.trace is not None:
            if len(self.trace) == 0:
                raise ValueError("latency trace is empty")
            if min(self.trace) < 0:
                raise ValueError("latency trace contains negative delays")
            object.__setattr__(self, "trace", tuple(float(v) for v in self.trace))
        if self.trace_mode not in TRACE_MODES:
            raise ValueError(f"trace_mode must be one of {TRACE_MODES}, got '{self.trace_mode}'")


class Delivery(NamedTuple):
    """One datagram handed to the receiver."""

    delivered_at: float
    sent_at: float
    size: int
    tag: Optional[str]


class SimChannel:
    """
    Deterministic one-way datagram link on a virtual millisecond clock.

    Deliveries come out of poll() in non-decreasing deliver_at order, ties in
    send order. The whole schedule is a pure function of the config and the
    sequence of send() calls.
    """

    def __init__(self, config: Optional[LinkConfig] = None, name: str = "link"):
        self.config = config or LinkConfig()
        self.name = name
        self.rng = np.random.default_rng(self.config.seed)
        self.link_free_at = 0.0
        self.sent_count = 0
        self.lost_count = 0
        self.deliveries: List[Delivery] = []
        self._in_flight = []
        self._seq = 0
        self._trace_index = 0
        self._last_send = -math.inf
        self._last_poll = -math.inf

    def serialization_ms(self, size: int) -> float:
        if self.config.bandwidth_bps is None:
            return 0.0
        return size * 8.0 * 1000.0 / self.config.bandwidth_bps

    def _delay_ms(self) -> float:
        trace = self.config.trace
        if trace is None:
            jitter = self.rng.uniform(0.0, self.config.jitter_ms) if self.config.jitter_ms > 0 else 0.0
            return self.config.one_way_delay_ms + jitter
        if self.config.trace_mode == "sample":
            return trace[int(self.rng.integers(len(trace)))]
        delay = trace[self._trace_index % len(trace)]
        self._trace_index += 1
        return delay

    def send(self, packet: bytes, now: float, tag: Optional[str] = None) -> Optional[float]:
        """
        Put a datagram on the link at virtual time `now`.

        Lost datagrams still occupy the link for their serialization time.

        Returns:
            The scheduled delivery time, or None if the datagram was lost
        """
        if now < self._last_send:
            raise ValueError(f"{self.name}: send time went backwards ({now} < {self._last_send})")
        self._last_send = now
        self.sent_count += 1
        lost = self.config.loss_prob > 0 and self.rng.random() < self.config.loss_prob
        start = max(now, self.link_free_at)
        self.link_free_at = start + self.serialization_ms(len(packet))
        delay = self._delay_ms()
        if lost:
            self.lost_count += 1
            return None
        deliver_at = self.link_free_at + delay
        heapq.heappush(self._in_flight, (deliver_at, self._seq, now, packet, tag))
        self._seq += 1
        return deliver_at

    def poll(self, now: float) -> List[bytes]:
        """Remove and return every datagram due at or before `now`, in delivery order."""
        if now < self._last_poll:
            raise ValueError(f"{self.name}: poll time went backwards ({now} < {self._last_poll})")
        self._last_poll = now
        due = []
        while self._in_flight and self._in_flight[0][0] <= now:
            deliver_at, _, sent_at, packet, tag = heapq.heappop(self._in_flight)
            self.deliveries.append(Delivery(deliver_at, sent_at, len(packet), tag))
            due.append(packet)
        return due

    def backlog_ms(self, now: float) -> float:
        """How long a datagram sent now would wait for the link."""
        return max(0.0, self.link_free_at - now)

    @property
    def in_flight(self) -> int:
        return len(self._in_flight)

    def delivered_bytes(self, tag: Optional[str] = None) -> int:
        return sum(d.size for d in self.deliveries if tag is None or d.tag == tag)


def replay_latency_trace(channel: SimChannel, trace: Sequence[float], mode: str = "cycle") -> SimChannel:
    """
    Make `channel` delay each datagram by the next trace value (cycle) or a
    uniformly drawn one (sample) instead of delay + jitter.

    Raises:
        ValueError: If the trace is empty or the mode unknown
    """
    channel.config = replace(channel.config, trace=tuple(trace), trace_mode=mode)
    channel._trace_index = 0
    logger.info("%s: replaying %d-entry latency trace (%s, mean %.1f ms)", channel.name, len(trace),
                mode, float(np.mean(trace)))
    return channel


def load_latency_trace(filepath: str) -> List[float]:
    """
    Load a latency trace: one float (milliseconds) per line.

    Blank lines and lines starting with '#' are skipped.

    Raises:
        FileNotFoundError: If the trace file doesn't exist
        ValueError: For unparsable or negative values, or an empty trace
    """
    values = []
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                text = line.strip()
                if not text or text.startswith("#"):
                    continue
                try:
                    value = float(text)
                except ValueError:
                    raise ValueError(f"{filepath}:{lineno}: not a number: '{text}'") from None
                if value < 0 or not math.isfinite(value):
                    raise ValueError(f"{filepath}:{lineno}: latency must be finite and >= 0")
                values.append(value)
    except FileNotFoundError:
        raise FileNotFoundError(f"Latency trace file '{filepath}' not found.") from None
    if not values:
        raise ValueError(f"{filepath}: latency trace is empty")
    return values


def save_latency_trace(trace: Sequence[float], filepath: str) -> None:
    lines = ["# one-way latency, ms"] + [f"{v:.3f}" for v in trace]
    Path(filepath).write_text("\n".join(lines) + "\n", encoding="utf-8")


def lognormal_trace(count: int, mean_ms: float = 12.0, p99_ms: float = 48.3, seed: int = 0) -> np.ndarray:
    """
    Synthetic latency trace from a log-normal fitted to a mean and a 99th percentile.

    Raises:
        ValueError: If no log-normal has that mean and percentile
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not 0 < mean_ms < p99_ms:
        raise ValueError("need 0 < mean_ms < p99_ms")
    z = stats.norm.ppf(0.99)
    ratio = 2.0 * math.log(p99_ms / mean_ms)
    if z * z < ratio:
        raise ValueError(f"p99 {p99_ms} ms is too far above the mean {mean_ms} ms for a log-normal fit")
    sigma = z - math.sqrt(z * z - ratio)
    mu = math.log(mean_ms) - sigma * sigma / 2.0
    return np.random.default_rng(seed).lognormal(mu, sigma, count)


class UdpChannel:
    """
    Real UDP endpoint with the SimChannel send/poll interface.

    A daemon thread reads the socket and hands datagrams to poll() through a
    queue. Times are wall-clock milliseconds and are ignored on input. When
    no remote address is given, replies go to the last sender.
    """

    def __init__(self, bind: Tuple[str, int], remote: Optional[Tuple[str, int]] = None,
                 name: str = "udp", max_datagram: int = 65535):
        self.name = name
        self.remote = remote
        self.max_datagram = max_datagram
        self.deliveries: List[Delivery] = []
        self.sent_count = 0
        self._inbox: "queue.Queue[Tuple[float, bytes]]" = queue.Queue()
        self._closed = threading.Event()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind(bind)
        self._sock.settimeout(0.1)
        self._thread = threading.Thread(target=self._ingest, name=f"{name}-ingest", daemon=True)
        self._thread.start()
        logger.info("%s: listening on %s:%d", name, *self._sock.getsockname()[:2])

    @property
    def address(self) -> Tuple[str, int]:
        return self._sock.getsockname()[:2]

    @staticmethod
    def clock_ms() -> float:
        return time.monotonic() * 1000.0

    def _ingest(self) -> None:
        while not self._closed.is_set():
            try:
                data, addr = self._sock.recvfrom(self.max_datagram)
            except socket.timeout:
                continue
            except OSError:
                break
            if self.remote is None or self.remote != addr:
                self.remote = addr
            self._inbox.put((self.clock_ms(), data))

    def send(self, packet: bytes, now: Optional[float] = None, tag: Optional[str] = None) -> Optional[float]:
        if self.remote is None:
            logger.debug("%s: no peer yet, dropping %d-byte datagram", self.name, len(packet))
            return None
        self._sock.sendto(packet, self.remote)
        self.sent_count += 1
        return self.clock_ms()

    def poll(self, now: Optional[float] = None) -> List[bytes]:
        due = []
        while True:
            try:
                arrived_at, data = self._inbox.get_nowait()
            except queue.Empty:
                return due
            self.deliveries.append(Delivery(arrived_at, arrived_at, len(data), None))
            due.append(data)

    def backlog_ms(self, now: Optional[float] = None) -> float:
        return 0.0

    def delivered_bytes(self, tag: Optional[str] = None) -> int:
        return sum(d.size for d in self.deliveries if tag is None or d.tag == tag)

    def close(self) -> None:
        self._closed.set()
        self._sock.close()
        self._thread.join(timeout=1.0)

    def __enter__(self) -> "UdpChannel":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
