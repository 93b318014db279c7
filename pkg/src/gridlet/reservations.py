"""Advance reservation: per-site slot calendars and all-or-nothing
co-allocation across sites.

Each site serializes mutations to its own calendar. A reservation enters
HELD first and expires after ``hold_ttl`` seconds unless confirmed; the
capacity rule (at every instant, reserved processors never exceed the
offer) counts live holds and confirmations alike.

The coordinator's protocol for a multi-site window:

1. snapshot every site's calendar, intersect free capacity, pick the
   earliest start (quantized) where all sites fit for the duration;
2. place a hold at every site: any refusal releases the others and the
   negotiation fails;
3. confirm every hold: an expired or refused confirm releases
   everything placed so far, confirmed entries included.

There is no durable coordinator log: if the coordinator itself dies
mid-negotiation, leftover holds age out via the TTL.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

DEFAULT_QUANTUM = 60  # seconds
DEFAULT_HOLD_TTL = 30  # seconds

HELD = "HELD"
CONFIRMED = "CONFIRMED"

NEGOTIATING = "NEGOTIATING"
RELEASING = "RELEASING"
RELEASED = "RELEASED"
FAILED = "FAILED"


class ReservationError(Exception):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


NO_CAPACITY = "no-capacity"
NO_WINDOW = "no-window"
EXPIRED = "expired"
SITE_DOWN = "site-down"


@dataclass
class Reservation:
    agreement_id: str
    holder: str
    start: float
    end: float
    processors: int
    state: str = HELD
    held_at: float = 0.0

    def to_dict(self) -> dict:
        return {
            "agreement_id": self.agreement_id,
            "holder": self.holder,
            "start": self.start,
            "end": self.end,
            "processors": self.processors,
            "state": self.state,
        }


class SlotCalendar:
    """One site's reservation book, guarded by a lock.

    ``clock`` is injectable so tests can drive expiry with virtual time.
    With ``persist_path`` set, the book survives manager restarts: a
    confirmed slot at one site must not silently vanish while its
    partners keep theirs, or co-allocation atomicity breaks.
    """

    def __init__(self, capacity: int, hold_ttl: float = DEFAULT_HOLD_TTL,
                 clock: Callable[[], float] = time.time,
                 persist_path: Optional[str] = None):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.hold_ttl = hold_ttl
        self.clock = clock
        self.persist_path = persist_path
        self._lock = threading.Lock()
        self._entries: dict[str, Reservation] = {}
        self._load()

    def _load(self) -> None:
        if not self.persist_path:
            return
        import json
        import os

        if not os.path.exists(self.persist_path):
            return
        with open(self.persist_path) as f:
            for d in json.load(f):
                self._entries[d["agreement_id"]] = Reservation(
                    agreement_id=d["agreement_id"], holder=d["holder"], start=d["start"],
                    end=d["end"], processors=d["processors"], state=d["state"],
                    held_at=d.get("held_at", 0.0),
                )

    def _save(self) -> None:
        if not self.persist_path:
            return
        import json
        import os

        payload = [dict(r.to_dict(), held_at=r.held_at) for r in self._entries.values()]
        tmp = self.persist_path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(payload, f)
        os.replace(tmp, self.persist_path)

    def _purge_expired(self) -> None:
        now = self.clock()
        dead = [k for k, r in self._entries.items() if r.state == HELD and now - r.held_at > self.hold_ttl]
        for k in dead:
            del self._entries[k]

    def _live(self) -> list[Reservation]:
        return list(self._entries.values())

    def _fits(self, start: float, end: float, processors: int) -> bool:
        # sweep the boundaries of overlapping reservations
        points = {start}
        for r in self._live():
            if r.end > start and r.start < end:
                points.add(max(r.start, start))
        for t in points:
            used = sum(r.processors for r in self._live() if r.start <= t < r.end)
            if used + processors > self.capacity:
                return False
        return True

    def hold(self, agreement_id: str, holder: str, start: float, end: float, processors: int) -> None:
        if processors <= 0 or end <= start:
            raise ReservationError(NO_CAPACITY, "bad window or processor count")
        with self._lock:
            self._purge_expired()
            if agreement_id in self._entries:
                return  # idempotent re-hold
            if processors > self.capacity or not self._fits(start, end, processors):
                raise ReservationError(NO_CAPACITY, f"window [{start},{end}) x{processors} does not fit")
            self._entries[agreement_id] = Reservation(
                agreement_id=agreement_id, holder=holder, start=start, end=end,
                processors=processors, held_at=self.clock(),
            )
            self._save()

    def confirm(self, agreement_id: str) -> None:
        with self._lock:
            self._purge_expired()
            r = self._entries.get(agreement_id)
            if r is None:
                raise ReservationError(EXPIRED, f"no live hold for {agreement_id}")
            r.state = CONFIRMED
            self._save()

    def release(self, agreement_id: str) -> None:
        with self._lock:
            if self._entries.pop(agreement_id, None) is not None:
                self._save()

    def snapshot(self) -> list[dict]:
        with self._lock:
            self._purge_expired()
            return [r.to_dict() for r in sorted(self._entries.values(), key=lambda r: (r.start, r.agreement_id))]

    def used_at(self, t: float) -> int:
        with self._lock:
            self._purge_expired()
            return sum(r.processors for r in self._entries.values() if r.start <= t < r.end)


@dataclass
class ReservationAgreement:
    agreement_id: str
    sites: tuple[str, ...]
    start: Optional[float] = None
    end: Optional[float] = None
    demand: dict = field(default_factory=dict)  # site -> processors
    state: str = NEGOTIATING
    failure: Optional[str] = None
    pending_release: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "agreement_id": self.agreement_id,
            "sites": list(self.sites),
            "start": self.start,
            "end": self.end,
            "demand": self.demand,
            "state": self.state,
            "failure": self.failure,
        }


class AgreementSite(Protocol):
    """What the coordinator needs from each participating site."""

    def fetch_calendar(self) -> tuple[int, list[dict]]: ...

    def hold(self, agreement_id: str, start: float, end: float, processors: int) -> None: ...

    def confirm(self, agreement_id: str) -> None: ...

    def release(self, agreement_id: str) -> None: ...


class LocalAgreementSite:
    """In-process adapter over a SlotCalendar (tests, single process)."""

    def __init__(self, calendar: SlotCalendar, holder: str = "local"):
        self.calendar = calendar
        self.holder = holder

    def fetch_calendar(self) -> tuple[int, list[dict]]:
        return self.calendar.capacity, self.calendar.snapshot()

    def hold(self, agreement_id: str, start: float, end: float, processors: int) -> None:
        self.calendar.hold(agreement_id, self.holder, start, end, processors)

    def confirm(self, agreement_id: str) -> None:
        self.calendar.confirm(agreement_id)

    def release(self, agreement_id: str) -> None:
        self.calendar.release(agreement_id)


def quantize_up(t: float, quantum: float) -> float:
    q = int(t // quantum)
    return float(q * quantum if q * quantum >= t else (q + 1) * quantum)


def _fits_snapshot(capacity: int, entries: list[dict], start: float, end: float, processors: int) -> bool:
    if processors > capacity:
        return False
    points = {start}
    for r in entries:
        if r["end"] > start and r["start"] < end:
            points.add(max(r["start"], start))
    for t in points:
        used = sum(r["processors"] for r in entries if r["start"] <= t < r["end"])
        if used + processors > capacity:
            return False
    return True


def earliest_common_window(
    calendars: dict,  # site -> (capacity, entries)
    demand: dict,  # site -> processors
    duration: float,
    not_before: float,
    deadline: Optional[float] = None,
    quantum: float = DEFAULT_QUANTUM,
) -> Optional[float]:
    """Earliest quantized start where every site fits its demand.

    Candidate starts are the quantized grid plus quantized reservation
    end boundaries (capacity can only free up at an entry's end), scanned
    in order; None when nothing fits before the deadline.
    """
    first = quantize_up(not_before, quantum)
    candidates = {first}
    horizon = deadline
    if horizon is None:
        ends = [r["end"] for _, entries in calendars.values() for r in entries]
        horizon = max([first] + [quantize_up(e, quantum) for e in ends]) + quantum
    for _, entries in calendars.values():
        for r in entries:
            t = quantize_up(r["end"], quantum)
            if first <= t <= horizon:
                candidates.add(t)
    t = first
    while t <= horizon:
        candidates.add(t)
        t += quantum
    for start in sorted(candidates):
        if deadline is not None and start + duration > deadline:
            break
        if start > horizon:
            break
        if all(
            _fits_snapshot(cap, entries, start, start + duration, demand[site])
            for site, (cap, entries) in calendars.items()
        ):
            return start
    return None


def negotiate(
    sites: dict,  # site name -> AgreementSite
    demand: dict,  # site name -> processors
    duration: float,
    not_before: Optional[float] = None,
    deadline: Optional[float] = None,
    quantum: float = DEFAULT_QUANTUM,
    clock: Callable[[], float] = time.time,
    agreement_id: Optional[str] = None,
) -> ReservationAgreement:
    """Two-phase all-or-nothing co-allocation across *sites*.

    Returns a CONFIRMED agreement with the agreed start time, or a FAILED
    one (``failure`` holds the reason) with every partial hold released.
    """
    agreement = ReservationAgreement(
        agreement_id=agreement_id or f"agr-{uuid.uuid4().hex[:12]}",
        sites=tuple(sorted(sites)),
        demand=dict(demand),
    )
    not_before = clock() if not_before is None else not_before

    calendars = {}
    for name, site in sites.items():
        try:
            calendars[name] = site.fetch_calendar()
        except Exception as exc:
            agreement.state = FAILED
            agreement.failure = f"{SITE_DOWN}: {name}: {exc}"
            return agreement

    start = earliest_common_window(calendars, demand, duration, not_before, deadline, quantum)
    if start is None:
        agreement.state = FAILED
        agreement.failure = NO_WINDOW
        return agreement
    end = start + duration

    placed: list[str] = []

    def release_all() -> None:
        for name in placed:
            try:
                sites[name].release(agreement.agreement_id)
            except Exception:
                pass  # site down: its hold ages out via TTL

    for name in agreement.sites:
        try:
            sites[name].hold(agreement.agreement_id, start, end, demand[name])
            placed.append(name)
        except ReservationError as exc:
            release_all()
            agreement.state = FAILED
            agreement.failure = f"{exc.code}: refused by {name}"
            return agreement
        except Exception as exc:
            release_all()
            agreement.state = FAILED
            agreement.failure = f"{SITE_DOWN}: {name}: {exc}"
            return agreement

    for name in agreement.sites:
        try:
            sites[name].confirm(agreement.agreement_id)
        except ReservationError as exc:
            release_all()
            agreement.state = FAILED
            agreement.failure = f"{exc.code}: confirm refused by {name}"
            return agreement
        except Exception as exc:
            release_all()
            agreement.state = FAILED
            agreement.failure = f"{SITE_DOWN}: {name}: {exc}"
            return agreement

    agreement.start, agreement.end = start, end
    agreement.state = CONFIRMED
    return agreement


def confirm(sites: dict, agreement: ReservationAgreement) -> ReservationAgreement:
    """Idempotent confirm across all sites (already-confirmed is a no-op)."""
    for name in agreement.sites:
        try:
            sites[name].confirm(agreement.agreement_id)
        except ReservationError as exc:
            for other in agreement.sites:
                try:
                    sites[other].release(agreement.agreement_id)
                except Exception:
                    pass
            agreement.state = FAILED
            agreement.failure = f"{exc.code}: confirm refused by {name}"
            return agreement
    agreement.state = CONFIRMED
    return agreement


def release(sites: dict, agreement: ReservationAgreement) -> ReservationAgreement:
    """Free every slot at every site; idempotent from any live state.

    A site that cannot be reached keeps its (persisted) entry, so the
    agreement stays RELEASING with the stragglers listed in
    ``pending_release``: calling release again retries just those.
    Held-only stragglers age out on their own; confirmed ones need the
    retry.
    """
    targets = agreement.pending_release if agreement.state == RELEASING else list(agreement.sites)
    failed: list[str] = []
    for name in targets:
        try:
            sites[name].release(agreement.agreement_id)
        except Exception:
            failed.append(name)
    agreement.pending_release = failed
    if failed:
        agreement.state = RELEASING
    elif agreement.state != FAILED:
        agreement.state = RELEASED
    return agreement
