"""Deterministic discrete-event engine and the shared latency model.

All times are integer nanoseconds. Events at equal timestamps fire in the
order they were scheduled.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable

NS = 1
US = 1_000
MS = 1_000_000


class SimError(Exception):
    """Base class for simulator errors."""


class LivelockError(SimError):
    pass


class ConfigError(SimError):
    pass


@dataclass(frozen=True)
class LatencyModel:
    """Delay parameters of fabric, NIC, host CPU and swap device (ns)."""

    link_rtt: int = 2 * US
    nic_wqe_process: int = 300
    dma_per_unit: int = 10
    cpu_check_per_page: int = 10
    minor_fault: int = 1 * US
    major_fault: int = 50 * US
    iommu_flush: int = 500
    odp_timeout: int = 2 * MS
    mr_pin_per_page: int = 1526
    # knobs beyond the core set
    link_bytes_per_ns: int = 12  # ~100 Gb/s
    swap_page_interval: int = 4096  # ~1 GB/s swap device
    write_read_pipeline_penalty: int = 300
    poll_delay: int = 50
    sw_overhead: int = 100
    iommu_map_per_page: int = 76
    iommu_update_per_page: int = 50
    cpu_copy_bytes_per_ns: int = 10
    mr_reg_base: int = 50 * US
    np_mr_reg_base: int = 135 * US
    dynamic_reg: int = 50 * US

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"{f.name} must be a positive integer, got {v!r}")
        if self.odp_timeout <= 10 * self.minor_fault:
            raise ConfigError("odp_timeout must be much larger than minor_fault")

    def wire_time(self, nbytes: int) -> int:
        return -(-nbytes // self.link_bytes_per_ns)

    def cpu_copy(self, nbytes: int) -> int:
        return -(-nbytes // self.cpu_copy_bytes_per_ns)

    def with_overrides(self, **kw: int) -> "LatencyModel":
        return replace(self, **kw)


def parse_kv(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, val = line.split("=", 1)
        elif ":" in line:
            key, val = line.split(":", 1)
        else:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = val.strip()
    return out


def load_latency_model(path: str | Path, base: LatencyModel | None = None) -> LatencyModel:
    """Load a latency model from a flat key-value file of integer nanoseconds."""
    kv = parse_kv(Path(path).read_text())
    known = {f.name for f in fields(LatencyModel)}
    overrides: dict[str, int] = {}
    for k, v in kv.items():
        if k not in known:
            raise ConfigError(f"unknown latency field {k!r}")
        try:
            overrides[k] = int(v)
        except ValueError as exc:
            raise ConfigError(f"{k}: not an integer: {v!r}") from exc
    return replace(base or LatencyModel(), **overrides)


@dataclass(order=True)
class SimEvent:
    fire_at: int
    sequence: int
    action: Callable[[], Any] = None  # type: ignore[assignment]
    label: str = ""
    cancelled: bool = False


class Engine:
    """Single-clock event loop shared by every simulated host."""

    def __init__(self, max_events: int = 50_000_000) -> None:
        self._now = 0
        self._seq = 0
        self._queue: list[tuple[int, int, SimEvent]] = []
        self._by_id: dict[int, SimEvent] = {}
        self.max_events = max_events
        self.executed = 0
        self.finalized = False
        self.trace: list[tuple] = []
        self.observers: list[Callable[[tuple], None]] = []
        self.keep_trace = True

    def now(self) -> int:
        return self._now

    def schedule(self, delay: int, action: Callable[[], Any], label: str = "") -> int:
        if self.finalized:
            raise SimError("engine finalized")
        if delay < 0:
            raise ValueError("negative delay")
        self._seq += 1
        ev = SimEvent(self._now + int(delay), self._seq, action, label)
        heapq.heappush(self._queue, (ev.fire_at, ev.sequence, ev))
        self._by_id[ev.sequence] = ev
        return ev.sequence

    def at(self, when: int, action: Callable[[], Any], label: str = "") -> int:
        return self.schedule(max(0, when - self._now), action, label)

    def cancel(self, event_id: int) -> bool:
        ev = self._by_id.pop(event_id, None)
        if ev is None:
            return False
        ev.cancelled = True
        return True

    def next_time(self) -> int | None:
        """Fire time of the earliest pending event, or None."""
        while self._queue and self._queue[0][2].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0][0] if self._queue else None

    def run_until_idle(self) -> int:
        return self.run_until(None)

    def run_until(self, deadline: int | None) -> int:
        q = self._queue
        while q:
            fire_at, seq, ev = q[0]
            if deadline is not None and fire_at > deadline:
                break
            heapq.heappop(q)
            if ev.cancelled:
                continue
            del self._by_id[seq]
            self.executed += 1
            if self.executed > self.max_events:
                raise LivelockError(f"event cap {self.max_events} exceeded")
            self._now = fire_at
            ev.action()
        if deadline is not None and deadline > self._now:
            self._now = deadline
        return self._now

    def finalize(self) -> None:
        self.finalized = True

    def log(self, kind: str, *fields_: Any) -> None:
        rec = (self._now, kind, *fields_)
        if self.keep_trace:
            self.trace.append(rec)
        for obs in self.observers:
            obs(rec)

    def records(self, kind: str) -> list[tuple]:
        return [r for r in self.trace if r[1] == kind]

    def trace_hash(self) -> str:
        h = hashlib.sha256()
        for rec in self.trace:
            h.update(repr(rec).encode())
            h.update(b"\n")
        return h.hexdigest()
