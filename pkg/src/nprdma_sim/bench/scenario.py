"""Perftest-style scenarios: two simulated hosts, fault injection and an oracle.

A scenario is one flat key-value file. ``run_scenario`` builds the hosts,
drives the requested verb over every message size and returns a
:class:`Report` whose rows carry simulated latency, throughput and
counters. Every data-moving row is checked against a flat byte-array model
of the remote buffer.
"""

from __future__ import annotations

import enum
import random
import re
import statistics
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from ..host import make_pair
from ..memory import PAGE_SIZE, PRESENT, HostMemory, VirtualRegion, page_span
from ..nprdma import AtomicKind, Completion, NpConfig, NpOpcode, NpWorkRequest, make_np_pair, pin_leaks
from ..rnic import MrKind, NicWqe, Opcode
from ..sim import US, ConfigError, Engine, LatencyModel, parse_kv

_U64_MASK = (1 << 64) - 1


class Kind(enum.Enum):
    LATENCY = "latency"
    THROUGHPUT = "throughput"
    MOTIVATION_FIG1 = "motivation_fig1"
    CONTROL_PLANE = "control_plane"
    FUZZ = "fuzz"


class Mode(enum.Enum):
    NPRDMA = "nprdma"
    PINNED = "pinned"
    ODP = "odp_baseline"
    NPRDMA_USERSPACE_NOTE = "nprdma_userspace_note"


class Verb(enum.Enum):
    READ = "read"
    WRITE = "write"
    WRITE_SIGNALED = "write_signaled"
    ATOMIC = "atomic"
    SEND = "send"


class Fault(enum.Enum):
    NONE = "none"
    MINOR = "minor"
    MAJOR = "major"
    ADVERSARIAL = "adversarial"


class Ordering(enum.Enum):
    STRICT = "strict"
    RELAXED = "relaxed"


@dataclass
class Scenario:
    name: str = "scenario"
    kind: Kind = Kind.LATENCY
    mode: Mode = Mode.NPRDMA
    verb: Verb = Verb.READ
    msg_sizes: list[int] = field(default_factory=lambda: [2])
    iterations: int = 100
    fault: Fault = Fault.NONE
    fault_seed: int = 0
    ordering: Ordering = Ordering.RELAXED
    window: int = 128
    unsignaled_per_signaled: int = 100
    target_credit_limit: int = 0  # 0 = unlimited; accepted, not calibrated
    num_schedules: int = 10
    wrs_per_schedule: int = 100
    np_overrides: dict[str, Any] = field(default_factory=dict)
    latency_overrides: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.msg_sizes or any(s < 1 for s in self.msg_sizes):
            raise ConfigError("msg_sizes must be a non-empty list of positive sizes")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.unsignaled_per_signaled < 0 or self.target_credit_limit < 0:
            raise ConfigError("counts must be non-negative")
        if self.verb is Verb.ATOMIC and self.kind in (Kind.LATENCY, Kind.THROUGHPUT):
            self.msg_sizes = [8]

    def echo(self) -> dict[str, Any]:
        """Flat, JSON-friendly view of every field."""
        out: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, dict):
                v = dict(sorted(v.items()))
            elif isinstance(v, list):
                v = list(v)
            out[f.name] = v
        if self.fault is Fault.ADVERSARIAL:
            out["fault"] = f"adversarial({self.fault_seed})"
        return out

    def latency_model(self, base: LatencyModel | None = None) -> LatencyModel:
        try:
            return replace(base or LatencyModel(), **self.latency_overrides)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def np_config(self) -> NpConfig:
        try:
            return replace(NpConfig(), **self.np_overrides)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


_SUFFIX = {"": 1, "K": 1 << 10, "M": 1 << 20, "G": 1 << 30}


def parse_size(text: str) -> int:
    m = re.fullmatch(r"\s*(\d+)\s*([KMG]?)B?\s*", text, re.IGNORECASE)
    if not m:
        raise ConfigError(f"bad size {text!r}")
    return int(m.group(1)) * _SUFFIX[m.group(2).upper()]


def parse_sizes(text: str) -> list[int]:
    """``2,64,1K`` lists sizes; ``2-8K`` expands to every power of two in range."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = (parse_size(x) for x in part.split("-", 1))
            if lo > hi:
                raise ConfigError(f"empty size range {part!r}")
            s = 1
            while s <= hi:
                if s >= lo:
                    out.append(s)
                s *= 2
        else:
            out.append(parse_size(part))
    if not out:
        raise ConfigError("msg_sizes is empty")
    return out


def _enum(cls: type[enum.Enum], text: str, key: str):
    try:
        return cls(text.strip().lower())
    except ValueError:
        choices = "|".join(m.value for m in cls)
        raise ConfigError(f"{key}: {text!r} not one of {choices}") from None


def _int(text: str, key: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: not an integer: {text!r}") from None


def _np_value(name: str, text: str) -> Any:
    known = {f.name: f for f in fields(NpConfig)}
    if name not in known:
        raise ConfigError(f"unknown library option {name!r}")
    default = getattr(NpConfig(), name)
    if isinstance(default, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"np.{name}: expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    return _int(text, f"np.{name}")


def scenario_from_kv(kv: dict[str, str]) -> Scenario:
    """Build a scenario from parsed key-value pairs."""
    args: dict[str, Any] = {}
    np_over: dict[str, Any] = {}
    lat_over: dict[str, int] = {}
    lat_fields = {f.name for f in fields(LatencyModel)}
    for key, val in kv.items():
        if key.startswith("np."):
            np_over[key[3:]] = _np_value(key[3:], val)
        elif key.startswith("latency."):
            name = key[len("latency."):]
            if name not in lat_fields:
                raise ConfigError(f"unknown latency field {name!r}")
            lat_over[name] = _int(val, key)
        elif key == "name":
            args["name"] = val
        elif key == "kind":
            args["kind"] = _enum(Kind, val, key)
        elif key == "mode":
            args["mode"] = _enum(Mode, val, key)
        elif key == "verb":
            args["verb"] = _enum(Verb, val, key)
        elif key == "ordering":
            args["ordering"] = _enum(Ordering, val, key)
        elif key == "msg_sizes":
            args["msg_sizes"] = parse_sizes(val)
        elif key == "fault":
            m = re.fullmatch(r"\s*adversarial\s*\(\s*(\d+)\s*\)\s*", val)
            if m:
                args["fault"] = Fault.ADVERSARIAL
                args["fault_seed"] = int(m.group(1))
            else:
                args["fault"] = _enum(Fault, val, key)
        elif key in ("iterations", "window", "unsignaled_per_signaled", "target_credit_limit",
                     "num_schedules", "wrs_per_schedule", "fault_seed"):
            args[key] = _int(val, key)
        else:
            raise ConfigError(f"unknown scenario key {key!r}")
    sc = Scenario(**args, np_overrides=np_over, latency_overrides=lat_over)
    sc.np_config()
    sc.latency_model()
    return sc


def load_scenario(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    return scenario_from_kv(parse_kv(text))


# -- report ------------------------------------------------------------------


@dataclass
class Row:
    label: str
    mode: str
    verb: str
    size: int
    fault: str
    iterations: int
    mean_ns: float
    median_ns: float
    p99_ns: float
    ops_per_sec: float
    bytes_per_sec: float
    rtts: float
    redo: int
    pins: int
    unpins: int
    oracle_match: bool
    note: str = ""


ROW_COLUMNS = [f.name for f in fields(Row)]


@dataclass
class Report:
    scenario: dict[str, Any]
    seed: int
    latency_model: dict[str, int]
    rows: list[Row] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations and all(r.oracle_match for r in self.rows)

    def row(self, size: int, label: str | None = None) -> Row:
        for r in self.rows:
            if r.size == size and (label is None or r.label == label):
                return r
        raise KeyError((size, label))


# -- harness -----------------------------------------------------------------


def _p99(xs: list[int]) -> float:
    s = sorted(xs)
    return float(s[min(len(s) - 1, -(-99 * len(s) // 100) - 1)])


class _Oracle:
    """Flat byte model of the remote buffer plus the host-side touch helpers."""

    def __init__(self, mem: HostMemory, region: VirtualRegion, rng: random.Random) -> None:
        self.mem = mem
        self.region = region
        data = rng.randbytes(region.length)
        mem.cpu_access(region, 0, region.length, True, data)
        self.model = bytearray(data)

    def discard(self, page: int) -> None:
        self.model[page * PAGE_SIZE:(page + 1) * PAGE_SIZE] = bytes(PAGE_SIZE)

    def matches(self, offset: int, data: bytes) -> bool:
        return bytes(self.model[offset:offset + len(data)]) == data


class _Rig:
    """Common shape of the three transports under test."""

    eng: Engine
    remote_mem: HostMemory
    local_mem: HostMemory
    remote: VirtualRegion
    local: VirtualRegion

    def post(self, verb: Verb, lo: int, ro: int, n: int, signaled: bool, wr_id: int,
             order: bool = False) -> None:
        raise NotImplementedError

    def collect(self) -> list[tuple[int, bool, int, int, int, bool]]:
        """Signaled completions as ``(wr_id, ok, posted_at, completed_at, rtts, redone)``."""
        raise NotImplementedError

    def after_touch(self, pages: range) -> None:
        """Called after the harness faults remote pages back in by CPU access."""

    def counters(self) -> tuple[int, int]:
        m1, m2 = self.local_mem, self.remote_mem
        return m1.pin_calls + m2.pin_calls, m1.unpin_calls + m2.unpin_calls

    def leaks(self) -> int:
        return 0


class _NpRig(_Rig):
    def __init__(self, lat: LatencyModel, cfg: NpConfig, local_pages: int, remote_pages: int,
                 depth: int) -> None:
        self.eng, self.a, self.b, self.qa, self.qb = make_np_pair(lat, cfg, depth=depth)
        self.eng.keep_trace = False
        self.local_mem, self.remote_mem = self.a.mem, self.b.mem
        self.local = self.a.mem.alloc_region(local_pages, populate=True)
        self.remote = self.b.mem.alloc_region(remote_pages, populate=True)
        self.tl = self.a.np_register_mr(self.local)
        self.tr = self.b.np_register_mr(self.remote)
        self.posted: dict[int, int] = {}
        self.done: list[Completion] = []
        self.a.observers.append(lambda comp, wr: self.done.append(comp))
        self.recv_done: list[Completion] = []
        self.b.observers.append(lambda comp, wr: self.recv_done.append(comp)
                                if wr.opcode is NpOpcode.RECV else None)
        # warm-up: exchange keys before anything is timed
        self.post(Verb.READ, 0, 0, 1, True, 0)
        self.eng.run_until_idle()
        self.a.np_poll_cq(self.qa.cq)
        self.done.clear()

    def post(self, verb: Verb, lo: int, ro: int, n: int, signaled: bool, wr_id: int,
             order: bool = False) -> None:
        key = self.tr.read_key
        if verb is Verb.READ:
            wr = NpWorkRequest(NpOpcode.READ, self.tl, lo, n, key, ro)
        elif verb in (Verb.WRITE, Verb.WRITE_SIGNALED):
            wr = NpWorkRequest(NpOpcode.WRITE, self.tl, lo, n, key, ro)
        elif verb is Verb.ATOMIC:
            wr = NpWorkRequest(NpOpcode.ATOMIC, self.tl, lo, 8, key, ro,
                               atomic=AtomicKind.FAA, compare_add=1)
        else:
            self.b.np_post_recv(self.qb, NpWorkRequest(NpOpcode.RECV, self.tr, ro, n, wr_id=wr_id))
            wr = NpWorkRequest(NpOpcode.SEND, self.tl, lo, n)
        wr.wr_id = wr_id
        wr.signaled = signaled
        wr.order_before = order
        self.a.np_post(self.qa, wr)

    def poll(self) -> int:
        return len(self.a.np_poll_cq(self.qa.cq))

    def collect(self):
        out = [(c.wr_id, c.ok, c.posted_at, c.completed_at, c.rtts, c.redone)
               for c in self.done]
        self.done.clear()
        return out

    def after_touch(self, pages: range) -> None:
        self.b.observe(self.tr, pages)

    def leaks(self) -> int:
        return len(pin_leaks(self.a)) + len(pin_leaks(self.b))


class _NicRig(_Rig):
    """Plain verbs on pinned or ODP memory registrations."""

    def __init__(self, lat: LatencyModel, kind: MrKind, local_pages: int, remote_pages: int,
                 depth: int) -> None:
        self.eng, ha, hb = make_pair(lat)
        self.eng.keep_trace = False
        self.kind = kind
        self.local_mem, self.remote_mem = ha.mem, hb.mem
        self.na, self.nb = ha.nic, hb.nic
        self.local = ha.mem.alloc_region(local_pages, populate=True)
        self.remote = hb.mem.alloc_region(remote_pages, populate=True)
        if kind is MrKind.PINNED:
            ha.mem.pin(self.local, 0, local_pages)
            hb.mem.pin(self.remote, 0, remote_pages)
        self.ml = self.na.register_mr(self.local, kind)
        self.mr = self.nb.register_mr(self.remote, kind)
        self.cq = self.na.create_cq(1 << 20)
        self.rcq = self.nb.create_cq(1 << 20)
        self.qa = self.na.create_qp(depth, self.cq)
        self.qb = self.nb.create_qp(depth, self.rcq)
        self.na.connect(self.qa, self.qb)
        self.posted: dict[int, int] = {}

    def post(self, verb: Verb, lo: int, ro: int, n: int, signaled: bool, wr_id: int,
             order: bool = False) -> None:
        if verb is Verb.READ:
            wqe = NicWqe(Opcode.READ, self.ml.key, lo, n, self.mr.key, ro)
        elif verb in (Verb.WRITE, Verb.WRITE_SIGNALED):
            wqe = NicWqe(Opcode.WRITE, self.ml.key, lo, n, self.mr.key, ro)
        elif verb is Verb.ATOMIC:
            wqe = NicWqe(Opcode.FAA, self.ml.key, lo, 8, self.mr.key, ro, compare_add=1)
        else:
            self.nb.post_recv(self.qb, NicWqe(Opcode.RECV, self.mr.key, ro, n, wr_id=wr_id))
            wqe = NicWqe(Opcode.SEND, self.ml.key, lo, n)
        wqe.wr_id = wr_id
        wqe.signaled = signaled
        self.posted[wr_id] = self.eng.now()
        self.na.post_wqe(self.qa, wqe)

    def poll(self) -> int:
        n = len(self.cq.entries)
        self.done = getattr(self, "done", [])
        self.done.extend(self.cq.entries)
        self.cq.entries.clear()
        return n

    def collect(self):
        self.poll()
        out = [(c.wr_id, c.ok, self.posted.pop(c.wr_id, c.completed_at), c.completed_at, 1, False)
               for c in self.done]
        self.done = []
        return out

    def after_touch(self, pages: range) -> None:
        pass

    def leaks(self) -> int:
        if self.kind is MrKind.PINNED:
            return 0
        return len(self.local_mem.pins) + len(self.remote_mem.pins)


def _rig(sc: Scenario, lat: LatencyModel, local_pages: int, remote_pages: int, depth: int) -> _Rig:
    if sc.mode in (Mode.NPRDMA, Mode.NPRDMA_USERSPACE_NOTE):
        return _NpRig(lat, sc.np_config(), local_pages, remote_pages, depth)
    kind = MrKind.PINNED if sc.mode is Mode.PINNED else MrKind.ODP
    return _NicRig(lat, kind, local_pages, remote_pages, depth)


def _fault_pages(rig: _Rig, oracle: _Oracle, pages: range, fault: Fault) -> None:
    """Put ``pages`` of the remote buffer in the state the fault kind asks for."""
    mem, region = rig.remote_mem, rig.remote
    if fault is Fault.NONE:
        if any(region.kind[p] != PRESENT for p in pages):
            mem.resolve(region, pages)
        rig.after_touch(pages)
        return
    for p in pages:
        if mem.pin_count(region, p):
            continue
        if region.kind[p] != PRESENT:
            mem.resolve(region, [p])
        if fault is Fault.MINOR:
            mem.discard(region, p)
            oracle.discard(p)
        else:
            mem.swap_out(region, p)
    rig.eng.run_until_idle()


def _adversary(rig: _Rig, rng: random.Random, pages: range, horizon: int) -> None:
    """Schedule swap-outs of remote pages at random moments of an operation."""
    mem, region = rig.remote_mem, rig.remote
    for _ in range(rng.randint(1, 4)):
        p = rng.choice(pages)
        rig.eng.schedule(rng.randint(0, horizon), lambda p=p: mem.try_swap_out(region, p))


def _note(sc: Scenario) -> str:
    if sc.mode is Mode.NPRDMA_USERSPACE_NOTE:
        return "library modeled in user space; kernel driver costs not simulated"
    if sc.mode is Mode.PINNED and sc.fault is not Fault.NONE:
        return "pinned memory cannot fault; fault injection skipped"
    if sc.target_credit_limit:
        return "target_credit_limit is a knob only; not calibrated"
    return ""


def _check_op(sc: Scenario, rig: _Rig, oracle: _Oracle, lo: int, ro: int, n: int,
              payload: bytes, old: int | None) -> bool:
    lm, rm = rig.local_mem, rig.remote_mem
    if sc.verb is Verb.READ:
        return oracle.matches(ro, lm.peek(rig.local, lo, n))
    if sc.verb in (Verb.WRITE, Verb.WRITE_SIGNALED, Verb.SEND):
        oracle.model[ro:ro + n] = payload
        return rm.peek(rig.remote, ro, n) == payload
    got = int.from_bytes(lm.peek(rig.local, lo, 8), "little")
    new = (old + 1) & _U64_MASK
    oracle.model[ro:ro + 8] = new.to_bytes(8, "little")
    return got == old and int.from_bytes(rm.peek(rig.remote, ro, 8), "little") == new


def _dump(dumps: list[str] | None, rig: _Rig, size: int) -> None:
    if dumps is not None:
        dumps.append(f"## size {size}: remote buffer\n" + rig.remote_mem.dump_hex(rig.remote))


def _latency_row(sc: Scenario, lat: LatencyModel, size: int, rng: random.Random,
                 dumps: list[str] | None = None) -> Row:
    npages = len(page_span(0, size)) + 1
    rig = _rig(sc, lat, npages, npages, max(128, sc.window))
    oracle = _Oracle(rig.remote_mem, rig.remote, rng)
    # odd in-page offsets for tiny messages keep the DMA inside one page
    lo = ro = 0 if size >= PAGE_SIZE else 64
    if sc.verb is Verb.ATOMIC:
        lo = ro = 64
    pages = page_span(ro, size)
    fault = Fault.NONE if sc.mode is Mode.PINNED else sc.fault
    lats: list[int] = []
    rtts: list[int] = []
    redo = 0
    match = True
    p0, u0 = rig.counters()
    for it in range(sc.iterations):
        if fault is Fault.ADVERSARIAL:
            _fault_pages(rig, oracle, pages, Fault.NONE)
        else:
            _fault_pages(rig, oracle, pages, fault)
        payload = b""
        old = None
        if sc.verb in (Verb.WRITE, Verb.WRITE_SIGNALED, Verb.SEND):
            payload = rng.randbytes(size)
            rig.local_mem.cpu_access(rig.local, lo, size, True, payload)
        elif sc.verb is Verb.ATOMIC:
            old = int.from_bytes(oracle.model[ro:ro + 8], "little")
        if fault is Fault.ADVERSARIAL:
            _adversary(rig, rng, pages, 20 * US)
        rig.post(sc.verb, lo, ro, size, True, it + 1, sc.ordering is Ordering.STRICT)
        rig.eng.run_until_idle()
        got = rig.collect()
        if len(got) != 1 or not got[0][1]:
            match = False
            break
        _, _, t0, t1, r, red = got[0]
        lats.append(t1 - t0)
        rtts.append(r)
        redo += red
        if not _check_op(sc, rig, oracle, lo, ro, size, payload, old):
            match = False
    p1, u1 = rig.counters()
    if rig.leaks():
        match = False
    _dump(dumps, rig, size)
    if not lats:
        lats = [0]
        rtts = [0]
    mean = statistics.fmean(lats)
    return Row(sc.name, sc.mode.value, sc.verb.value, size, fault.value if fault is not Fault.ADVERSARIAL
               else f"adversarial({sc.fault_seed})", sc.iterations, mean, float(statistics.median(lats)),
               _p99(lats), 1e9 / mean if mean else 0.0, size * 1e9 / mean if mean else 0.0,
               statistics.fmean(rtts), redo, p1 - p0, u1 - u0, match, _note(sc))


def _throughput_row(sc: Scenario, lat: LatencyModel, size: int, rng: random.Random,
                    dumps: list[str] | None = None) -> Row:
    window = sc.window
    if sc.target_credit_limit and sc.verb in (Verb.WRITE, Verb.WRITE_SIGNALED):
        window = min(window, sc.target_credit_limit)
    slot_bytes = -(-size // 64) * 64
    span = slot_bytes * window
    npages = len(page_span(0, span)) + 1
    rig = _rig(sc, lat, npages, npages, max(128, window) * 2)
    oracle = _Oracle(rig.remote_mem, rig.remote, rng)
    fault = Fault.NONE if sc.mode is Mode.PINNED else sc.fault
    if fault in (Fault.MINOR, Fault.MAJOR):
        _fault_pages(rig, oracle, range(rig.remote.num_pages), fault)
    total = sc.iterations
    every = 1 if sc.verb is not Verb.WRITE else sc.unsignaled_per_signaled + 1
    strict = sc.ordering is Ordering.STRICT
    state = {"posted": 0, "done": 0, "t_end": 0}
    signaled_at: dict[int, int] = {}
    payloads: dict[int, bytes] = {}
    p0, u0 = rig.counters()
    t_start = rig.eng.now()

    def signaled(k: int) -> bool:
        # a full window must contain a signaled WR or nothing would ever be reaped
        return (k + 1) % every == 0 or k == total - 1 or k + 1 - state["done"] >= window

    def tick() -> None:
        for wr_id, ok, _t0, t1, _r, _red in rig.collect():
            if not ok:
                state["failed"] = True
            state["done"] = max(state["done"], wr_id)
            state["t_end"] = max(state["t_end"], t1)
        rig.poll()
        while state["posted"] < total and state["posted"] - state["done"] < window:
            k = state["posted"]
            slot = (k % window) * slot_bytes
            if sc.verb in (Verb.WRITE, Verb.WRITE_SIGNALED, Verb.SEND):
                data = rng.randbytes(min(size, 64))
                payloads[slot] = (data * (size // len(data) + 1))[:size]
                rig.local_mem.cpu_access(rig.local, slot, size, True, payloads[slot])
            rig.post(sc.verb, slot, slot, size, signaled(k), k + 1, strict)
            if signaled(k):
                signaled_at[k + 1] = rig.eng.now()
            state["posted"] += 1
        if state["done"] < total and not state.get("failed"):
            rig.eng.schedule(lat.poll_delay, tick)

    tick()
    rig.eng.run_until_idle()
    elapsed = max(1, state["t_end"] - t_start)
    match = not state.get("failed") and state["done"] == total
    # final-state oracle: every slot holds its last payload, or reads saw the model
    if match and sc.verb in (Verb.WRITE, Verb.WRITE_SIGNALED, Verb.SEND):
        for slot, data in payloads.items():
            oracle.model[slot:slot + size] = data
            match &= rig.remote_mem.peek(rig.remote, slot, size) == data
    elif match and sc.verb is Verb.READ:
        for k in range(min(total, window)):
            slot = k * slot_bytes
            match &= oracle.matches(slot, rig.local_mem.peek(rig.local, slot, size))
    elif match and sc.verb is Verb.ATOMIC:
        for k in range(min(total, window)):
            slot = k * slot_bytes
            hits = len(range(k, total, window))
            before = int.from_bytes(oracle.model[slot:slot + 8], "little")
            after = int.from_bytes(rig.remote_mem.peek(rig.remote, slot, 8), "little")
            match &= after == (before + hits) & _U64_MASK
    if rig.leaks():
        match = False
    _dump(dumps, rig, size)
    p1, u1 = rig.counters()
    ops = total * 1e9 / elapsed
    per_op = elapsed / total
    return Row(sc.name, sc.mode.value, sc.verb.value, size, fault.value, total, per_op, per_op, per_op,
               ops, ops * size, 0.0, 0, p1 - p0, u1 - u0, match, _note(sc))


def _motivation_rows(lat: LatencyModel, rng: random.Random) -> list[Row]:
    """Fifteen Reads of 64/128/192 bytes under three buffer-management habits."""
    sizes = [64] * 5 + [128] * 5 + [192] * 5
    pinned = Scenario(mode=Mode.PINNED, verb=Verb.READ, iterations=1)
    rig = _rig(pinned, lat, 2, 2, 128)
    oracle = _Oracle(rig.remote_mem, rig.remote, rng)
    copy_buf = 64
    rows: list[Row] = []

    def one(lo: int, ro: int, n: int) -> tuple[int, bool]:
        rig.post(Verb.READ, lo, ro, n, True, 1)
        rig.eng.run_until_idle()
        (_, ok, t0, t1, _, _), = rig.collect()
        return t1 - t0, ok and oracle.matches(ro, rig.local_mem.peek(rig.local, lo, n))

    for i, n in enumerate(sizes, 1):
        ro = 256 * i
        base, ok1 = one(0, ro, n)
        dyn = lat.dynamic_reg + base
        copy = 0
        ok2 = True
        for off in range(0, n, copy_buf):
            k = min(copy_buf, n - off)
            t, ok = one(PAGE_SIZE, ro + off, k)
            ok2 &= ok
            copy += t + lat.cpu_copy(k)
        for label, value, ok in (("static-pin", base, ok1), ("dynamic-reg", dyn, ok1),
                                 ("copy-64B", copy, ok2)):
            rows.append(Row(label, "pinned", "read", n, "none", 1, float(value), float(value),
                            float(value), 1e9 / value, n * 1e9 / value, 1.0, 0, 0, 0, ok,
                            f"read {i} of 15; slowdown {value / base:.2f}x"))
    return rows


def _control_plane_rows(lat: LatencyModel, sizes: list[int]) -> list[Row]:
    """Registration scaling per region size and the swap-out notifier delta."""
    rows: list[Row] = []
    for size in sizes:
        npages = -(-size // PAGE_SIZE)
        eng, a, _b, _qa, _qb = make_np_pair(lat, max_pages=npages + (1 << 16))
        eng.keep_trace = False
        region = a.mem.alloc_region(npages, populate=True)
        pinned_ns = a.pinned_register_cost(region)
        t = a.np_register_mr(region)
        for label, value, mode in (("create_mr", pinned_ns, "pinned"), ("create_mr", t.setup_ns, "nprdma")):
            rows.append(Row(label, mode, "register", size, "none", 1, float(value), float(value),
                            float(value), 0.0, 0.0, 0.0, 0, 0, 0, True,
                            f"{value * (1 << 30) / size / 1e6:.1f} ms per GB"))
        a.np_dereg_mr(t)
    # swap-out: plain kernel path versus one that also waits for the notifier fence
    eng, a, _b, _qa, _qb = make_np_pair(lat)
    plain = a.mem.alloc_region(1, populate=True)
    watched = a.mem.alloc_region(1, populate=True)
    a.np_register_mr(watched)
    t0 = eng.now()
    a.mem.swap_out(plain, 0)
    eng.run_until_idle()
    base = eng.now() - t0
    t0 = eng.now()
    a.mem.swap_out(watched, 0)
    eng.run_until_idle()
    delta = eng.now() - t0 - base
    rows.append(Row("swap_out_delta", "nprdma", "swap_out", PAGE_SIZE, "none", 1, float(delta),
                    float(delta), float(delta), 0.0, 0.0, 0.0, 0, 0, 0, True,
                    "extra time before the frame is reusable"))
    for label in ("library_init", "create_qp", "create_cq", "qp_init"):
        rows.append(Row(label, "nprdma", "n/a", 0, "none", 1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, 0, 0,
                        True, "n/a: tied to real hardware"))
    return rows


def run_scenario(sc: Scenario, seed: int = 1, latency: LatencyModel | None = None,
                 dumps: list[str] | None = None) -> Report:
    """Run ``sc`` deterministically for ``seed``.

    When ``dumps`` is a list, a hex dump of each row's final remote buffer is
    appended to it.
    """
    lat = sc.latency_model(latency)
    rng = random.Random(seed ^ (sc.fault_seed << 32))
    report = Report(sc.echo(), seed, {f.name: getattr(lat, f.name) for f in fields(lat)})
    if sc.kind is Kind.LATENCY:
        report.rows = [_latency_row(sc, lat, n, rng, dumps) for n in sc.msg_sizes]
    elif sc.kind is Kind.THROUGHPUT:
        report.rows = [_throughput_row(sc, lat, n, rng, dumps) for n in sc.msg_sizes]
    elif sc.kind is Kind.MOTIVATION_FIG1:
        report.rows = _motivation_rows(lat, rng)
    elif sc.kind is Kind.CONTROL_PLANE:
        report.rows = _control_plane_rows(lat, sc.msg_sizes)
    else:
        from .fuzz import fuzz_campaign
        v = fuzz_campaign(seed, sc.num_schedules, sc.wrs_per_schedule)
        report.rows = [Row("fuzz", sc.mode.value, "mixed", 0, "adversarial", v.ops, 0.0, 0.0, 0.0,
                           0.0, 0.0, 0.0, v.redone, 0, 0, v.ok,
                           f"{v.schedules} schedules, {v.completions} completions, {v.swaps} swaps")]
        report.violations = [f"{x.kind} schedule={x.schedule} seed={x.seed}: {x.detail}"
                             for x in v.violations]
    return report
